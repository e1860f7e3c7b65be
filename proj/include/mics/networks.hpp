#pragma once

// Parametric components: ViT-style patch encoders for each modality, the
// shared masked-image decoder, projection / global-embedding heads, the
// cross-attention fusion encoder, classification and evidential heads, and
// the momentum copies used during pretraining.

#include "mics/autodiff.hpp"
#include "mics/datamodel.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mics::net {

using ad::Index;
using ad::Matrix;
using ad::Var;

struct NetConfig {
  int image_side = 64;
  int patch_size = 8;
  int embed_dim = 64;  // D
  int proj_dim = 32;
  int glo_dim = 256;
  int fusion_heads = 4;
  int encoder_heads = 4;
  int depth = 2;
  int mlp_ratio = 2;
  int num_classes = 6;

  int tokens() const { return (image_side / patch_size) * (image_side / patch_size); }
  int patch_values() const { return patch_size * patch_size * 3; }
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

using Visitor = std::function<void(const std::string& name, Var& param)>;

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  static Linear init(int in, int out, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
  void visit(const std::string& prefix, const Visitor& fn);
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm init(int dim);
  Var operator()(const Var& x) const { return layer_norm_rows(x, gamma, beta); }
  void visit(const std::string& prefix, const Visitor& fn);
};

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  Linear q, k, v, o, fc1, fc2;
  int heads = 1;

  static TransformerBlock init(int dim, int heads, int mlp_ratio, std::mt19937_64& rng);
  Var operator()(const Var& x, Index batch) const;
  void visit(const std::string& prefix, const Visitor& fn);
};

struct EncoderOutput {
  Var pooled;  // B x D
  Var tokens;  // (B*T') x D, T' = number of encoded (visible) positions
};

struct PatchEncoder {
  Linear embed;
  Var pos;  // T x D
  std::vector<TransformerBlock> blocks;
  LayerNorm norm;

  static PatchEncoder init(const NetConfig& cfg, std::mt19937_64& rng);
  /// `patches` is (B*T) x patch_values. When `visible` is non-empty only
  /// those token positions are encoded (masked-image pretraining).
  EncoderOutput operator()(const Matrix& patches, Index batch, std::span<const Index> visible = {}) const;
  void visit(const std::string& prefix, const Visitor& fn);
};

struct Decoder {
  Var mask_token;  // 1 x D
  Var pos;         // T x D
  TransformerBlock block;
  LayerNorm norm;
  Linear to_pixels;

  static Decoder init(const NetConfig& cfg, std::mt19937_64& rng);
  /// Visible tokens (B*T_v) x D -> reconstructed patches (B*T) x patch_values.
  Var operator()(const Var& visible_tokens, const std::vector<bool>& mask, Index batch) const;
  void visit(const std::string& prefix, const Visitor& fn);
};

/// linear -> GELU -> linear -> row L2 normalisation.
struct ProjectionHead {
  Linear fc1, fc2;

  static ProjectionHead init(int in, int hidden, int out, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
  void visit(const std::string& prefix, const Visitor& fn);
};

/// One cross-attention block per direction (WLI queries NBI context and vice
/// versa); the two attended outputs are averaged with their residuals and
/// passed through a feed-forward layer. Output width D.
struct FusionEncoder {
  LayerNorm ln_query_w, ln_query_n, ln_ctx_w, ln_ctx_n, ln_ff;
  Linear q_w, k_n, v_n, o_w;  // WLI attends to NBI
  Linear q_n, k_w, v_w, o_n;  // NBI attends to WLI
  Linear fc1, fc2;
  int heads = 1;

  static FusionEncoder init(int dim, int heads, int mlp_ratio, std::mt19937_64& rng);
  /// Per-modality context is the pooled vector followed by the sample's
  /// patch tokens; pass invalid token Vars to attend over the pooled vector only.
  Var operator()(const Var& z_w, const Var& z_n, const Var& tokens_w = {}, const Var& tokens_n = {}) const;
  void visit(const std::string& prefix, const Visitor& fn);
};

struct Model {
  NetConfig cfg;
  PatchEncoder enc_wli, enc_nbi;
  Decoder decoder;
  ProjectionHead proj, glo;
  FusionEncoder fusion;
  Linear cls, evid_wli, evid_nbi;

  static Model init(const NetConfig& cfg, std::uint64_t seed);
  const PatchEncoder& encoder(data::Modality m) const { return m == data::Modality::wli ? enc_wli : enc_nbi; }
  void visit(const Visitor& fn);
};

/// EMA copies of both encoders and the projection head. Their values are
/// constants (no gradients flow into them).
struct MomentumModel {
  PatchEncoder enc_wli, enc_nbi;
  ProjectionHead proj;
  double m = 0.995;

  static MomentumModel copy_of(const Model& online, double m);
  void visit(const Visitor& fn);
};

struct ModelState {
  Model model;
  MomentumModel momentum;

  static ModelState init(const NetConfig& cfg, std::uint64_t seed, double momentum = 0.995);
};

/// Named parameter views. Names are dotted paths, e.g. "enc_wli.blocks.0.q.weight".
std::map<std::string, Var> named_parameters(Model& model);
std::map<std::string, Var> named_parameters(MomentumModel& momentum);
/// Subset of named_parameters whose names start with any of `prefixes`.
std::map<std::string, Var> parameters_with_prefix(Model& model, std::span<const std::string> prefixes);
std::size_t parameter_count(const std::map<std::string, Var>& params);

/// momentum' = m * momentum + (1 - m) * online for every matching name.
void momentum_update(const std::map<std::string, Var>& online, const std::map<std::string, Var>& momentum, double m);
void momentum_update(Model& online, MomentumModel& momentum);

// --- tensors from images -------------------------------------------------------

/// Stacks images into (B*T) x (p*p*3), token-major per sample, pixels in [0, 1].
Matrix patchify(std::span<const data::Image* const> images, int patch_size);
Matrix patchify(const std::vector<data::PairedSample>& batch, data::Modality m, int patch_size);
/// Inverse of patchify for a batch of square images.
std::vector<std::vector<double>> unpatchify(const Matrix& patches, Index batch, int side, int patch_size);

// --- functional surface --------------------------------------------------------

struct FeatureBatch {
  Var z_w, z_n;    // B x D pooled
  Var zm_w, zm_n;  // B x proj_dim momentum projections
  Var Z_w, Z_n;    // B x glo_dim global embeddings
  Var tokens_w, tokens_n;
};

EncoderOutput encode(const Model& model, const Matrix& patches, Index batch, data::Modality m);
Var fuse(const FusionEncoder& f, const Var& z_w, const Var& z_n, const Var& tokens_w = {}, const Var& tokens_n = {});
Var decode(const Decoder& g, const Var& visible_tokens, const std::vector<bool>& mask, Index batch);
Var project(const ProjectionHead& p, const Var& z);
Var global_embed(const ProjectionHead& glo, const Var& z);
Var classify(const Linear& cls, const Var& z);

}  // namespace mics::net
