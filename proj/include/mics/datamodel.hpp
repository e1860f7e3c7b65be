#pragma once

// Paired white-light / narrow-band samples, dataset splits, label-fraction
// views, on-disk ingestion and a deterministic procedural generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mics::data {

enum class Modality { wli, nbi };

const char* to_string(Modality m);

/// 8-bit RGB raster, row-major, channel-interleaved. Intensities are read
/// back as value / 255, so every pixel lies in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

  double at(int y, int x, int c) const { return pixels[index(y, x, c)] / 255.0; }
  std::uint8_t& raw(int y, int x, int c) { return pixels[index(y, x, c)]; }
  std::size_t index(int y, int x, int c) const { return (static_cast<std::size_t>(y) * width + x) * 3 + c; }

  bool operator==(const Image&) const = default;
};

struct PairedSample {
  std::string id;
  Image wli;
  Image nbi;
  std::optional<int> label;

  const Image& image(Modality m) const { return m == Modality::wli ? wli : nbi; }
};

/// Throws std::invalid_argument if the pair violates its invariants.
void validate(const PairedSample& s, int num_classes);

using SplitRatios = std::array<double, 3>;
inline constexpr SplitRatios kDefaultRatios{0.6, 0.2, 0.2};

struct DatasetSplits {
  std::vector<PairedSample> train;
  std::vector<PairedSample> val;
  std::vector<PairedSample> test;
  int num_classes = 0;
  SplitRatios ratios = kDefaultRatios;
  std::vector<std::string> class_names;
};

struct LabelFractionView {
  std::vector<PairedSample> labeled;
  std::vector<PairedSample> unlabeled;  // labels stripped
  double fraction = 1.0;
};

// --- synthetic generator ----------------------------------------------------

/// Classes whose distinguishing cue is rendered in the narrow-band image only
/// (their white-light renderings share one distribution).
inline constexpr std::array<int, 3> kNbiOnlyClasses{3, 4, 5};
inline constexpr int kSyntheticClasses = 6;

/// Deterministic for fixed (class_id, seed, side). `side` must be >= 32 and
/// divisible by `patch_size`.
PairedSample generate_synthetic_pair(int class_id, std::uint64_t seed, int side, int num_classes = kSyntheticClasses,
                                     int patch_size = 8);

struct SyntheticSpec {
  int num_classes = kSyntheticClasses;
  int per_class = 100;
  int side = 64;
  int patch_size = 8;
  std::uint64_t seed = 0;
};

/// per_class pairs for every class; ids are "<class_name>/<stem>".
std::vector<PairedSample> generate_synthetic_dataset(const SyntheticSpec& spec);
std::vector<std::string> synthetic_class_names(int num_classes);

// --- splitting ----------------------------------------------------------------

/// Stratified per-class split; within each class floor-free rounding gives
/// round(r_train * n) train and round(r_val * n) val samples, the rest test.
DatasetSplits split_dataset(std::vector<PairedSample> samples, int num_classes, const SplitRatios& ratios,
                            std::uint64_t seed);

LabelFractionView make_label_fraction_view(const DatasetSplits& splits, double fraction, std::uint64_t seed);

// --- disk layout ---------------------------------------------------------------

/// Writes root/<class_name>/<stem>_{wli,nbi}.png plus root/manifest.txt
/// ("<stem> <class index>" per line). Samples must carry labels.
void write_dataset(const std::filesystem::path& root, const std::vector<PairedSample>& samples,
                   const std::vector<std::string>& class_names);

/// Reads the layout above (PNG or binary PPM). Class index = lexicographic
/// rank of the class directory name. `side` > 0 resamples every image to
/// side x side.
DatasetSplits load_paired_dataset(const std::filesystem::path& root, const SplitRatios& ratios, std::uint64_t seed,
                                  int side = 0);

// --- raster I/O ---------------------------------------------------------------

void write_png(const std::filesystem::path& path, const Image& img);
Image read_image(const std::filesystem::path& path);
Image resize_bilinear(const Image& img, int height, int width);

}  // namespace mics::data
