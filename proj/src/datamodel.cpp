#include "mics/datamodel.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mics::data {

namespace fs = std::filesystem;

const char* to_string(Modality m) { return m == Modality::wli ? "wli" : "nbi"; }

void validate(const PairedSample& s, int num_classes) {
  if (s.wli.height != s.nbi.height || s.wli.width != s.nbi.width) {
    throw std::invalid_argument("sample " + s.id + ": modalities differ in size");
  }
  const std::size_t expected = static_cast<std::size_t>(s.wli.height) * s.wli.width * 3;
  if (s.wli.pixels.size() != expected || s.nbi.pixels.size() != expected) {
    throw std::invalid_argument("sample " + s.id + ": pixel buffer size mismatch");
  }
  if (s.label && (*s.label < 0 || *s.label >= num_classes)) {
    throw std::invalid_argument("sample " + s.id + ": label outside [0, C)");
  }
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix(a ^ splitmix(b)); }

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

// Scalar field sampled on a side x side grid of normalised coordinates.
struct Field {
  int side;
  std::vector<double> v;
  explicit Field(int s) : side(s), v(static_cast<std::size_t>(s) * s, 0.0) {}
  double& operator()(int y, int x) { return v[static_cast<std::size_t>(y) * side + x]; }
  double operator()(int y, int x) const { return v[static_cast<std::size_t>(y) * side + x]; }
  double u(int x) const { return (x + 0.5) / side; }
};

double seg_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = ax + t * dx - px, ey = ay + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

// Random quadratic Bezier "vessels", accumulated into `out` as max-intensity.
void draw_vessels(Field& out, int count, double width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  constexpr int kSegments = 12;
  for (int c = 0; c < count; ++c) {
    const double x0 = u01(rng), y0 = u01(rng), x1 = u01(rng), y1 = u01(rng), x2 = u01(rng), y2 = u01(rng);
    std::array<std::pair<double, double>, kSegments + 1> pts;
    for (int i = 0; i <= kSegments; ++i) {
      const double t = static_cast<double>(i) / kSegments;
      const double a = (1 - t) * (1 - t), b = 2 * (1 - t) * t, d = t * t;
      pts[static_cast<std::size_t>(i)] = {a * x0 + b * x1 + d * x2, a * y0 + b * y1 + d * y2};
    }
    for (int y = 0; y < out.side; ++y) {
      for (int x = 0; x < out.side; ++x) {
        const double px = out.u(x), py = out.u(y);
        double best = 1e9;
        for (int i = 0; i < kSegments; ++i) {
          const auto& [ax, ay] = pts[static_cast<std::size_t>(i)];
          const auto& [bx, by] = pts[static_cast<std::size_t>(i + 1)];
          best = std::min(best, seg_distance(px, py, ax, ay, bx, by));
        }
        out(y, x) = std::max(out(y, x), std::exp(-best * best / (2 * width * width)));
      }
    }
  }
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

PairedSample generate_synthetic_pair(int class_id, std::uint64_t seed, int side, int num_classes, int patch_size) {
  if (num_classes <= 0) throw std::invalid_argument("num_classes must be positive");
  if (class_id < 0 || class_id >= num_classes) {
    throw std::invalid_argument("class_id " + std::to_string(class_id) + " outside [0, " + std::to_string(num_classes) + ")");
  }
  if (patch_size <= 0 || side < 32 || side % patch_size != 0) {
    throw std::invalid_argument("side must be >= 32 and divisible by the patch size");
  }
  // Patterns repeat with period 6 when more classes are requested; the
  // vessel count keeps such classes apart.
  const int pattern = class_id % kSyntheticClasses;

  // Separate streams: the white-light structure never sees the class-specific
  // narrow-band draws, so NBI-only classes share one white-light distribution.
  std::mt19937_64 bg_rng(mix(seed, 0xB6));
  std::mt19937_64 wli_rng(mix(seed, 0x57));
  std::mt19937_64 nbi_rng(mix(mix(seed, 0x4E), static_cast<std::uint64_t>(class_id)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](std::mt19937_64& r, double lo, double hi) { return lo + (hi - lo) * u01(r); };

  // Background mucosa texture.
  Field background(side);
  {
    std::array<double, 4> amp, fx, fy, ph;
    for (int k = 0; k < 4; ++k) {
      amp[k] = uni(bg_rng, 0.02, 0.06);
      fx[k] = uni(bg_rng, -4.0, 4.0);
      fy[k] = uni(bg_rng, -4.0, 4.0);
      ph[k] = uni(bg_rng, 0.0, 2 * std::numbers::pi);
    }
    std::normal_distribution<double> noise(0.0, 0.02);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double v = 0.6;
        for (int k = 0; k < 4; ++k) v += amp[k] * std::sin(2 * std::numbers::pi * (fx[k] * background.u(x) + fy[k] * background.u(y)) + ph[k]);
        background(y, x) = v + noise(bg_rng);
      }
    }
  }

  // Class structure visible in both modalities.
  Field structure(side);
  const double cx = uni(wli_rng, 0.3, 0.7), cy = uni(wli_rng, 0.3, 0.7);
  const bool shared_wli = std::find(kNbiOnlyClasses.begin(), kNbiOnlyClasses.end(), pattern) != kNbiOnlyClasses.end();
  double lesion_sigma = 0.2;
  if (pattern == 0) {  // ring
    const double r = uni(wli_rng, 0.18, 0.28), w = 0.06;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double d = std::hypot(structure.u(x) - cx, structure.u(y) - cy);
        structure(y, x) = std::exp(-((d - r) / w) * ((d - r) / w));
      }
  } else if (pattern == 1) {  // blob cluster
    const int blobs = 4 + static_cast<int>(u01(wli_rng) * 3);
    for (int b = 0; b < blobs; ++b) {
      const double bx = cx + uni(wli_rng, -0.25, 0.25), by = cy + uni(wli_rng, -0.25, 0.25), s = uni(wli_rng, 0.05, 0.08);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const double d2 = std::pow(structure.u(x) - bx, 2) + std::pow(structure.u(y) - by, 2);
          structure(y, x) = std::max(structure(y, x), std::exp(-d2 / (2 * s * s)));
        }
    }
  } else if (pattern == 2) {  // stripe field
    const double f = uni(wli_rng, 3.0, 4.0), th = uni(wli_rng, 0.0, std::numbers::pi), ph = uni(wli_rng, 0.0, 2 * std::numbers::pi);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double t = structure.u(x) * std::cos(th) + structure.u(y) * std::sin(th);
        structure(y, x) = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * f * t + ph);
      }
  } else {  // gradient lesion, shared by every NBI-only class
    lesion_sigma = uni(wli_rng, 0.15, 0.25);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double d2 = std::pow(structure.u(x) - cx, 2) + std::pow(structure.u(y) - cy, 2);
        structure(y, x) = std::exp(-d2 / (2 * lesion_sigma * lesion_sigma));
      }
  }

  // Narrow-band-only vessel overlay; density is class dependent.
  Field vessels(side);
  const double vessel_width = std::max(0.012, 0.6 / side);
  static constexpr std::array<int, kSyntheticClasses> kVesselCount{3, 5, 7, 2, 4, 14};
  draw_vessels(vessels, kVesselCount[static_cast<std::size_t>(pattern)] + class_id / kSyntheticClasses, vessel_width, nbi_rng);
  if (shared_wli && pattern == 3) {  // crater rim
    const double r = 1.3 * lesion_sigma, w = 0.035;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double d = std::hypot(vessels.u(x) - cx, vessels.u(y) - cy);
        vessels(y, x) = std::max(vessels(y, x), std::exp(-((d - r) / w) * ((d - r) / w)));
      }
  } else if (shared_wli && pattern == 4) {  // mesh
    const double period = 0.125, w = std::max(0.015, 0.7 / side);
    const double ox = uni(nbi_rng, 0.0, period), oy = uni(nbi_rng, 0.0, period);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double gx = std::fmod(vessels.u(x) + ox, period), gy = std::fmod(vessels.u(y) + oy, period);
        const double d = std::min(std::min(gx, period - gx), std::min(gy, period - gy));
        vessels(y, x) = std::max(vessels(y, x), std::exp(-d * d / (2 * w * w)));
      }
  }

  PairedSample s;
  s.id = "c" + std::to_string(class_id) + "_" + std::to_string(seed);
  s.label = class_id;
  s.wli = Image(side, side);
  s.nbi = Image(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double i = std::clamp(background(y, x) - 0.4 * structure(y, x), 0.0, 1.0);
      s.wli.raw(y, x, 0) = quantize(0.30 + 0.65 * i);
      s.wli.raw(y, x, 1) = quantize(0.12 + 0.45 * i);
      s.wli.raw(y, x, 2) = quantize(0.08 + 0.30 * i);
      const double v = vessels(y, x);
      s.nbi.raw(y, x, 0) = quantize((0.10 + 0.30 * i) * (1.0 - 0.65 * v));
      s.nbi.raw(y, x, 1) = quantize((0.25 + 0.50 * i) * (1.0 - 0.65 * v));
      s.nbi.raw(y, x, 2) = quantize((0.30 + 0.55 * i) * (1.0 - 0.40 * v));
    }
  }
  return s;
}

std::vector<std::string> synthetic_class_names(int num_classes) {
  std::vector<std::string> names;
  for (int c = 0; c < num_classes; ++c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%02d", c);
    names.emplace_back(buf);
  }
  return names;
}

std::vector<PairedSample> generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.per_class <= 0) throw std::invalid_argument("per_class must be positive");
  const auto names = synthetic_class_names(spec.num_classes);
  std::vector<PairedSample> out;
  out.reserve(static_cast<std::size_t>(spec.num_classes) * spec.per_class);
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < spec.per_class; ++i) {
      const std::uint64_t sample_seed = mix(mix(spec.seed, static_cast<std::uint64_t>(c)), static_cast<std::uint64_t>(i));
      PairedSample s = generate_synthetic_pair(c, sample_seed, spec.side, spec.num_classes, spec.patch_size);
      char stem[32];
      std::snprintf(stem, sizeof stem, "s%05d", i);
      s.id = names[static_cast<std::size_t>(c)] + "/" + stem;
      out.push_back(std::move(s));
    }
  }
  return out;
}

DatasetSplits split_dataset(std::vector<PairedSample> samples, int num_classes, const SplitRatios& ratios,
                            std::uint64_t seed) {
  double total = 0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");

  std::vector<std::vector<PairedSample>> by_class(static_cast<std::size_t>(num_classes));
  std::set<std::string> ids;
  for (auto& s : samples) {
    validate(s, num_classes);
    if (!s.label) throw std::invalid_argument("sample " + s.id + " has no label; splits are stratified");
    if (!ids.insert(s.id).second) throw std::invalid_argument("duplicate sample id " + s.id);
    by_class[static_cast<std::size_t>(*s.label)].push_back(std::move(s));
  }

  DatasetSplits out;
  out.num_classes = num_classes;
  out.ratios = ratios;
  for (int c = 0; c < num_classes; ++c) {
    auto& group = by_class[static_cast<std::size_t>(c)];
    std::sort(group.begin(), group.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(c)));
    std::shuffle(group.begin(), group.end(), rng);
    const auto n = static_cast<long>(group.size());
    const long n_train = std::min(n, std::lround(ratios[0] * static_cast<double>(n)));
    const long n_val = std::min(n - n_train, std::lround(ratios[1] * static_cast<double>(n)));
    for (long i = 0; i < n; ++i) {
      auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
      dst.push_back(std::move(group[static_cast<std::size_t>(i)]));
    }
  }
  return out;
}

LabelFractionView make_label_fraction_view(const DatasetSplits& splits, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("label fraction must lie in (0, 1]");
  std::vector<std::vector<const PairedSample*>> by_class(static_cast<std::size_t>(splits.num_classes));
  for (const auto& s : splits.train) {
    if (!s.label) throw std::invalid_argument("training sample " + s.id + " has no label");
    by_class[static_cast<std::size_t>(*s.label)].push_back(&s);
  }
  LabelFractionView view;
  view.fraction = fraction;
  for (int c = 0; c < splits.num_classes; ++c) {
    auto& group = by_class[static_cast<std::size_t>(c)];
    std::sort(group.begin(), group.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    std::mt19937_64 rng(mix(mix(seed, 0x1AB), static_cast<std::uint64_t>(c)));
    std::shuffle(group.begin(), group.end(), rng);
    const auto keep = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(group.size())));
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (i < keep) {
        view.labeled.push_back(*group[i]);
      } else {
        PairedSample hidden = *group[i];
        hidden.label.reset();
        view.unlabeled.push_back(std::move(hidden));
      }
    }
  }
  return view;
}

// --- raster I/O ----------------------------------------------------------------

void write_png(const fs::path& path, const Image& img) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

namespace {

Image read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(image.height), static_cast<int>(image.width));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return out;
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error(path.string() + ": only binary PPM (P6) is supported");
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    in >> v;
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error(path.string() + ": unsupported PPM header");
  in.get();
  Image out(h, w);
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated PPM data");
  return out;
}

}  // namespace

Image read_image(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw std::runtime_error("unsupported image format: " + path.string());
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (img.height == height && img.width == width) return img;
  Image out(height, width);
  const double sy = static_cast<double>(img.height) / height, sx = static_cast<double>(img.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ty) * ((1 - tx) * img.pixels[img.index(y0, x0, c)] + tx * img.pixels[img.index(y0, x1, c)]) +
                         ty * ((1 - tx) * img.pixels[img.index(y1, x0, c)] + tx * img.pixels[img.index(y1, x1, c)]);
        out.raw(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

// --- disk layout ------------------------------------------------------------------

void write_dataset(const fs::path& root, const std::vector<PairedSample>& samples, const std::vector<std::string>& class_names) {
  fs::create_directories(root);
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + root.string());
  for (const auto& s : samples) {
    if (!s.label) throw std::invalid_argument("write_dataset: sample " + s.id + " has no label");
    const auto& cls = class_names.at(static_cast<std::size_t>(*s.label));
    const auto slash = s.id.find_last_of('/');
    const std::string stem = slash == std::string::npos ? s.id : s.id.substr(slash + 1);
    const fs::path dir = root / cls;
    fs::create_directories(dir);
    write_png(dir / (stem + "_wli.png"), s.wli);
    write_png(dir / (stem + "_nbi.png"), s.nbi);
    manifest << stem << ' ' << *s.label << '\n';
  }
}

DatasetSplits load_paired_dataset(const fs::path& root, const SplitRatios& ratios, std::uint64_t seed, int side) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root " + root.string() + " is not a directory");
  std::vector<std::string> class_names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_names.push_back(entry.path().filename().string());
  }
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) throw std::runtime_error("dataset root " + root.string() + " has no class directories");

  std::vector<PairedSample> samples;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const fs::path dir = root / class_names[c];
    std::map<std::string, std::pair<fs::path, fs::path>> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string name = entry.path().stem().string();
      if (name.size() < 4) continue;
      const std::string suffix = name.substr(name.size() - 4);
      const std::string stem = name.substr(0, name.size() - 4);
      if (suffix == "_wli") stems[stem].first = entry.path();
      if (suffix == "_nbi") stems[stem].second = entry.path();
    }
    if (stems.empty()) throw std::runtime_error("class directory " + dir.string() + " contains no paired images");
    for (const auto& [stem, paths] : stems) {
      if (paths.first.empty() || paths.second.empty()) {
        throw std::runtime_error("unpaired stem '" + stem + "' in " + dir.string() + " (missing " +
                                 (paths.first.empty() ? "_wli" : "_nbi") + " image)");
      }
      PairedSample s;
      s.id = class_names[c] + "/" + stem;
      s.wli = read_image(paths.first);
      s.nbi = read_image(paths.second);
      if (side > 0) {
        s.wli = resize_bilinear(s.wli, side, side);
        s.nbi = resize_bilinear(s.nbi, side, side);
      }
      s.label = static_cast<int>(c);
      samples.push_back(std::move(s));
    }
  }
  DatasetSplits out = split_dataset(std::move(samples), static_cast<int>(class_names.size()), ratios, seed);
  out.class_names = class_names;
  return out;
}

}  // namespace mics::data
