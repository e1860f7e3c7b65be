#include "mics/networks.hpp"

#include <cmath>
#include <stdexcept>

namespace mics::net {

void NetConfig::validate() const {
  if (image_side <= 0 || patch_size <= 0 || image_side % patch_size != 0) {
    throw std::invalid_argument("image_side must be a positive multiple of patch_size");
  }
  if (embed_dim <= 0 || proj_dim <= 0 || glo_dim <= 0 || num_classes <= 0 || depth < 0 || mlp_ratio <= 0) {
    throw std::invalid_argument("network widths must be positive");
  }
  if (!(glo_dim > embed_dim && embed_dim >= proj_dim)) {
    throw std::invalid_argument("need glo_dim > embed_dim >= proj_dim");
  }
  if (fusion_heads <= 0 || embed_dim % fusion_heads != 0) throw std::invalid_argument("embed_dim not divisible by fusion_heads");
  if (encoder_heads <= 0 || embed_dim % encoder_heads != 0) throw std::invalid_argument("embed_dim not divisible by encoder_heads");
}

namespace {

Matrix normal_matrix(Index r, Index c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::string join(const std::string& prefix, const std::string& name) { return prefix.empty() ? name : prefix + "." + name; }

Var deep_copy(const Var& v) { return Var::constant(v.value()); }

}  // namespace

Linear Linear::init(int in, int out, std::mt19937_64& rng) {
  Linear l;
  l.weight = Var::parameter(normal_matrix(in, out, std::sqrt(2.0 / (in + out)), rng));
  l.bias = Var::parameter(Matrix::Zero(1, out));
  return l;
}

Var Linear::operator()(const Var& x) const { return add(matmul(x, weight), bias); }

void Linear::visit(const std::string& prefix, const Visitor& fn) {
  fn(join(prefix, "weight"), weight);
  fn(join(prefix, "bias"), bias);
}

LayerNorm LayerNorm::init(int dim) {
  return {Var::parameter(Matrix::Ones(1, dim)), Var::parameter(Matrix::Zero(1, dim))};
}

void LayerNorm::visit(const std::string& prefix, const Visitor& fn) {
  fn(join(prefix, "gamma"), gamma);
  fn(join(prefix, "beta"), beta);
}

TransformerBlock TransformerBlock::init(int dim, int heads, int mlp_ratio, std::mt19937_64& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm::init(dim);
  b.ln2 = LayerNorm::init(dim);
  b.q = Linear::init(dim, dim, rng);
  b.k = Linear::init(dim, dim, rng);
  b.v = Linear::init(dim, dim, rng);
  b.o = Linear::init(dim, dim, rng);
  b.fc1 = Linear::init(dim, dim * mlp_ratio, rng);
  b.fc2 = Linear::init(dim * mlp_ratio, dim, rng);
  b.heads = heads;
  return b;
}

Var TransformerBlock::operator()(const Var& x, Index batch) const {
  Var h = ln1(x);
  Var a = attention(q(h), k(h), v(h), batch, heads);
  Var x1 = add(x, o(a));
  return add(x1, fc2(gelu(fc1(ln2(x1)))));
}

void TransformerBlock::visit(const std::string& prefix, const Visitor& fn) {
  ln1.visit(join(prefix, "ln1"), fn);
  q.visit(join(prefix, "q"), fn);
  k.visit(join(prefix, "k"), fn);
  v.visit(join(prefix, "v"), fn);
  o.visit(join(prefix, "o"), fn);
  ln2.visit(join(prefix, "ln2"), fn);
  fc1.visit(join(prefix, "fc1"), fn);
  fc2.visit(join(prefix, "fc2"), fn);
}

PatchEncoder PatchEncoder::init(const NetConfig& cfg, std::mt19937_64& rng) {
  PatchEncoder e;
  e.embed = Linear::init(cfg.patch_values(), cfg.embed_dim, rng);
  e.pos = Var::parameter(normal_matrix(cfg.tokens(), cfg.embed_dim, 0.02, rng));
  for (int i = 0; i < cfg.depth; ++i) e.blocks.push_back(TransformerBlock::init(cfg.embed_dim, cfg.encoder_heads, cfg.mlp_ratio, rng));
  e.norm = LayerNorm::init(cfg.embed_dim);
  return e;
}

EncoderOutput PatchEncoder::operator()(const Matrix& patches, Index batch, std::span<const Index> visible) const {
  const Index t = pos.rows();
  if (patches.cols() != embed.weight.rows()) {
    throw std::invalid_argument("encoder: patch width " + std::to_string(patches.cols()) + " does not match " +
                                std::to_string(embed.weight.rows()));
  }
  if (patches.rows() != batch * t) {
    throw std::invalid_argument("encoder: expected " + std::to_string(batch * t) + " patch rows, got " +
                                std::to_string(patches.rows()));
  }
  if (batch == 0) {
    const Index d = embed.weight.cols();
    return {Var::constant(Matrix(0, d)), Var::constant(Matrix(0, d))};
  }
  const Index tv = visible.empty() ? t : static_cast<Index>(visible.size());
  std::vector<Index> rows, pos_rows;
  rows.reserve(static_cast<std::size_t>(batch * tv));
  pos_rows.reserve(rows.capacity());
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < tv; ++i) {
      const Index p = visible.empty() ? i : visible[static_cast<std::size_t>(i)];
      if (p < 0 || p >= t) throw std::out_of_range("encoder: visible position outside token range");
      rows.push_back(b * t + p);
      pos_rows.push_back(p);
    }
  }
  Var x = visible.empty() ? Var::constant(patches) : gather_rows(Var::constant(patches), rows);
  x = add(embed(x), gather_rows(pos, pos_rows));
  for (const auto& blk : blocks) x = blk(x, batch);
  x = norm(x);
  return {segment_mean(x, tv), x};
}

void PatchEncoder::visit(const std::string& prefix, const Visitor& fn) {
  embed.visit(join(prefix, "embed"), fn);
  fn(join(prefix, "pos"), pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(join(prefix, "blocks." + std::to_string(i)), fn);
  norm.visit(join(prefix, "norm"), fn);
}

Decoder Decoder::init(const NetConfig& cfg, std::mt19937_64& rng) {
  Decoder d;
  d.mask_token = Var::parameter(normal_matrix(1, cfg.embed_dim, 0.02, rng));
  d.pos = Var::parameter(normal_matrix(cfg.tokens(), cfg.embed_dim, 0.02, rng));
  d.block = TransformerBlock::init(cfg.embed_dim, cfg.encoder_heads, cfg.mlp_ratio, rng);
  d.norm = LayerNorm::init(cfg.embed_dim);
  d.to_pixels = Linear::init(cfg.embed_dim, cfg.patch_values(), rng);
  return d;
}

Var Decoder::operator()(const Var& visible_tokens, const std::vector<bool>& mask, Index batch) const {
  const Index t = pos.rows();
  if (static_cast<Index>(mask.size()) != t) {
    throw std::invalid_argument("decoder: mask length " + std::to_string(mask.size()) + " differs from token count " +
                                std::to_string(t));
  }
  Var full = fill_masked(visible_tokens, mask_token, mask, batch);
  if (batch == 0) return Var::constant(Matrix(0, to_pixels.weight.cols()));
  std::vector<Index> pos_rows;
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < t; ++i) pos_rows.push_back(i);
  Var x = add(full, gather_rows(pos, pos_rows));
  x = norm(block(x, batch));
  return to_pixels(x);
}

void Decoder::visit(const std::string& prefix, const Visitor& fn) {
  fn(join(prefix, "mask_token"), mask_token);
  fn(join(prefix, "pos"), pos);
  block.visit(join(prefix, "block"), fn);
  norm.visit(join(prefix, "norm"), fn);
  to_pixels.visit(join(prefix, "to_pixels"), fn);
}

ProjectionHead ProjectionHead::init(int in, int hidden, int out, std::mt19937_64& rng) {
  return {Linear::init(in, hidden, rng), Linear::init(hidden, out, rng)};
}

Var ProjectionHead::operator()(const Var& x) const {
  if (x.cols() != fc1.weight.rows()) throw std::invalid_argument("projection head: input width mismatch");
  return l2_normalize_rows(fc2(gelu(fc1(x))));
}

void ProjectionHead::visit(const std::string& prefix, const Visitor& fn) {
  fc1.visit(join(prefix, "fc1"), fn);
  fc2.visit(join(prefix, "fc2"), fn);
}

FusionEncoder FusionEncoder::init(int dim, int heads, int mlp_ratio, std::mt19937_64& rng) {
  FusionEncoder f;
  f.ln_query_w = LayerNorm::init(dim);
  f.ln_query_n = LayerNorm::init(dim);
  f.ln_ctx_w = LayerNorm::init(dim);
  f.ln_ctx_n = LayerNorm::init(dim);
  f.ln_ff = LayerNorm::init(dim);
  f.q_w = Linear::init(dim, dim, rng);
  f.k_n = Linear::init(dim, dim, rng);
  f.v_n = Linear::init(dim, dim, rng);
  f.o_w = Linear::init(dim, dim, rng);
  f.q_n = Linear::init(dim, dim, rng);
  f.k_w = Linear::init(dim, dim, rng);
  f.v_w = Linear::init(dim, dim, rng);
  f.o_n = Linear::init(dim, dim, rng);
  f.fc1 = Linear::init(dim, dim * mlp_ratio, rng);
  f.fc2 = Linear::init(dim * mlp_ratio, dim, rng);
  f.heads = heads;
  return f;
}

namespace {

// Per-sample context rows: [pooled_b; tokens_b...] for every sample b.
Var context(const Var& pooled, const Var& tokens, Index batch) {
  if (!tokens.valid()) return pooled;
  if (tokens.cols() != pooled.cols() || tokens.rows() % batch != 0) throw std::invalid_argument("fuse: token shape mismatch");
  const Index t = tokens.rows() / batch;
  std::vector<Var> parts{pooled, tokens};
  Var stacked = concat_rows(parts);
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(batch * (t + 1)));
  for (Index b = 0; b < batch; ++b) {
    rows.push_back(b);
    for (Index i = 0; i < t; ++i) rows.push_back(batch + b * t + i);
  }
  return gather_rows(stacked, rows);
}

}  // namespace

Var FusionEncoder::operator()(const Var& z_w, const Var& z_n, const Var& tokens_w, const Var& tokens_n) const {
  if (z_w.rows() != z_n.rows() || z_w.cols() != z_n.cols()) throw std::invalid_argument("fuse: z_w and z_n shapes differ");
  if (z_w.cols() != q_w.weight.rows()) throw std::invalid_argument("fuse: feature width mismatch");
  const Index batch = z_w.rows();
  if (batch == 0) return Var::constant(Matrix(0, z_w.cols()));
  Var ctx_w = ln_ctx_w(context(z_w, tokens_w, batch));
  Var ctx_n = ln_ctx_n(context(z_n, tokens_n, batch));
  Var qw = ln_query_w(z_w);
  Var qn = ln_query_n(z_n);
  Var a_w = o_w(attention(q_w(qw), k_n(ctx_n), v_n(ctx_n), batch, heads));
  Var a_n = o_n(attention(q_n(qn), k_w(ctx_w), v_w(ctx_w), batch, heads));
  Var h = scale(add(add(z_w, a_w), add(z_n, a_n)), 0.5);
  return add(h, fc2(gelu(fc1(ln_ff(h)))));
}

void FusionEncoder::visit(const std::string& prefix, const Visitor& fn) {
  ln_query_w.visit(join(prefix, "ln_query_w"), fn);
  ln_query_n.visit(join(prefix, "ln_query_n"), fn);
  ln_ctx_w.visit(join(prefix, "ln_ctx_w"), fn);
  ln_ctx_n.visit(join(prefix, "ln_ctx_n"), fn);
  q_w.visit(join(prefix, "q_w"), fn);
  k_n.visit(join(prefix, "k_n"), fn);
  v_n.visit(join(prefix, "v_n"), fn);
  o_w.visit(join(prefix, "o_w"), fn);
  q_n.visit(join(prefix, "q_n"), fn);
  k_w.visit(join(prefix, "k_w"), fn);
  v_w.visit(join(prefix, "v_w"), fn);
  o_n.visit(join(prefix, "o_n"), fn);
  ln_ff.visit(join(prefix, "ln_ff"), fn);
  fc1.visit(join(prefix, "fc1"), fn);
  fc2.visit(join(prefix, "fc2"), fn);
}

Model Model::init(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.cfg = cfg;
  m.enc_wli = PatchEncoder::init(cfg, rng);
  m.enc_nbi = PatchEncoder::init(cfg, rng);
  m.decoder = Decoder::init(cfg, rng);
  m.proj = ProjectionHead::init(cfg.embed_dim, cfg.embed_dim, cfg.proj_dim, rng);
  m.glo = ProjectionHead::init(cfg.embed_dim, cfg.glo_dim, cfg.glo_dim, rng);
  m.fusion = FusionEncoder::init(cfg.embed_dim, cfg.fusion_heads, cfg.mlp_ratio, rng);
  m.cls = Linear::init(cfg.embed_dim, cfg.num_classes, rng);
  m.evid_wli = Linear::init(cfg.embed_dim, cfg.num_classes, rng);
  m.evid_nbi = Linear::init(cfg.embed_dim, cfg.num_classes, rng);
  return m;
}

void Model::visit(const Visitor& fn) {
  enc_wli.visit("enc_wli", fn);
  enc_nbi.visit("enc_nbi", fn);
  decoder.visit("decoder", fn);
  proj.visit("proj", fn);
  glo.visit("glo", fn);
  fusion.visit("fusion", fn);
  cls.visit("cls", fn);
  evid_wli.visit("evid_wli", fn);
  evid_nbi.visit("evid_nbi", fn);
}

MomentumModel MomentumModel::copy_of(const Model& online, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("momentum coefficient must lie in [0, 1]");
  MomentumModel mm;
  mm.enc_wli = online.enc_wli;
  mm.enc_nbi = online.enc_nbi;
  mm.proj = online.proj;
  mm.m = m;
  mm.visit([](const std::string&, Var& p) { p = deep_copy(p); });
  return mm;
}

void MomentumModel::visit(const Visitor& fn) {
  enc_wli.visit("enc_wli", fn);
  enc_nbi.visit("enc_nbi", fn);
  proj.visit("proj", fn);
}

ModelState ModelState::init(const NetConfig& cfg, std::uint64_t seed, double momentum) {
  ModelState s;
  s.model = Model::init(cfg, seed);
  s.momentum = MomentumModel::copy_of(s.model, momentum);
  return s;
}

std::map<std::string, Var> named_parameters(Model& model) {
  std::map<std::string, Var> out;
  model.visit([&](const std::string& name, Var& p) { out.emplace(name, p); });
  return out;
}

std::map<std::string, Var> named_parameters(MomentumModel& momentum) {
  std::map<std::string, Var> out;
  momentum.visit([&](const std::string& name, Var& p) { out.emplace(name, p); });
  return out;
}

std::map<std::string, Var> parameters_with_prefix(Model& model, std::span<const std::string> prefixes) {
  std::map<std::string, Var> out;
  model.visit([&](const std::string& name, Var& p) {
    for (const auto& pre : prefixes) {
      if (name.compare(0, pre.size(), pre) == 0 && (name.size() == pre.size() || name[pre.size()] == '.')) {
        out.emplace(name, p);
        return;
      }
    }
  });
  return out;
}

std::size_t parameter_count(const std::map<std::string, Var>& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += static_cast<std::size_t>(p.value().size());
  return n;
}

void momentum_update(const std::map<std::string, Var>& online, const std::map<std::string, Var>& momentum, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("momentum coefficient must lie in [0, 1]");
  for (const auto& [name, mp] : momentum) {
    auto it = online.find(name);
    if (it == online.end()) throw std::invalid_argument("momentum parameter " + name + " has no online counterpart");
    const Matrix& on = it->second.value();
    Var target = mp;
    Matrix& mv = target.mutable_value();
    if (on.rows() != mv.rows() || on.cols() != mv.cols()) throw std::invalid_argument("momentum_update: shape mismatch for " + name);
    mv = m * mv + (1.0 - m) * on;
  }
}

void momentum_update(Model& online, MomentumModel& momentum) {
  auto on = named_parameters(online);
  auto mom = named_parameters(momentum);
  momentum_update(on, mom, momentum.m);
}

Matrix patchify(std::span<const data::Image* const> images, int patch_size) {
  if (images.empty()) return Matrix(0, patch_size * patch_size * 3);
  const int side = images.front()->height;
  if (side % patch_size != 0) throw std::invalid_argument("patchify: side not divisible by patch size");
  const int grid = side / patch_size;
  const Index t = static_cast<Index>(grid) * grid;
  Matrix out(static_cast<Index>(images.size()) * t, patch_size * patch_size * 3);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = *images[b];
    if (img.height != side || img.width != side) throw std::invalid_argument("patchify: images must be square and equal-sized");
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const Index row = static_cast<Index>(b) * t + gy * grid + gx;
        Index col = 0;
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            for (int c = 0; c < 3; ++c) out(row, col++) = img.at(gy * patch_size + py, gx * patch_size + px, c);
      }
    }
  }
  return out;
}

Matrix patchify(const std::vector<data::PairedSample>& batch, data::Modality m, int patch_size) {
  std::vector<const data::Image*> imgs;
  imgs.reserve(batch.size());
  for (const auto& s : batch) imgs.push_back(&s.image(m));
  return patchify(imgs, patch_size);
}

std::vector<std::vector<double>> unpatchify(const Matrix& patches, Index batch, int side, int patch_size) {
  const int grid = side / patch_size;
  const Index t = static_cast<Index>(grid) * grid;
  if (patches.rows() != batch * t || patches.cols() != patch_size * patch_size * 3) {
    throw std::invalid_argument("unpatchify: shape mismatch");
  }
  std::vector<std::vector<double>> out(static_cast<std::size_t>(batch),
                                       std::vector<double>(static_cast<std::size_t>(side) * side * 3));
  for (Index b = 0; b < batch; ++b) {
    auto& img = out[static_cast<std::size_t>(b)];
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        Index col = 0;
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            for (int c = 0; c < 3; ++c) {
              const int y = gy * patch_size + py, x = gx * patch_size + px;
              img[(static_cast<std::size_t>(y) * side + x) * 3 + c] = patches(b * t + gy * grid + gx, col++);
            }
      }
  }
  return out;
}

EncoderOutput encode(const Model& model, const Matrix& patches, Index batch, data::Modality m) {
  return model.encoder(m)(patches, batch);
}

Var fuse(const FusionEncoder& f, const Var& z_w, const Var& z_n, const Var& tokens_w, const Var& tokens_n) {
  return f(z_w, z_n, tokens_w, tokens_n);
}

Var decode(const Decoder& g, const Var& visible_tokens, const std::vector<bool>& mask, Index batch) {
  return g(visible_tokens, mask, batch);
}

Var project(const ProjectionHead& p, const Var& z) { return p(z); }

Var global_embed(const ProjectionHead& glo, const Var& z) { return glo(z); }

Var classify(const Linear& cls, const Var& z) {
  if (z.cols() != cls.weight.rows()) throw std::invalid_argument("classify: feature width mismatch");
  return cls(z);
}

}  // namespace mics::net
