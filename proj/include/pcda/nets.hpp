#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pcda/common.hpp"
#include "pcda/geometry.hpp"
#include "pcda/tape.hpp"

namespace pcda {

/// 256-dim shape embedding produced by the autoencoder encoder.
struct LatentCode {
  Eigen::VectorXd values;
};

/// Gaussian conditional input z (and its recovery by the VAE encoder).
struct ModeVector {
  Eigen::VectorXd values;
};

/// k-dim probability vector over classes.
struct ClassProbs {
  Eigen::VectorXd probs;
};

inline constexpr int kLatentDim = 256;

/// Widths of every block. Defaults are the full-scale sizes; desk-scale and
/// miniature test configurations shrink the hidden widths.
struct NetConfig {
  int cloud_size = 1024;
  int latent_dim = kLatentDim;
  int d_z = 64;
  int num_classes = 10;

  // encoder: per-point MLP 3 -> embed1 -> width, `attn_blocks` offset
  // attention blocks at `width`, concat, linear to `fuse`, max-pool,
  // MLP fuse -> head -> latent_dim
  int enc_embed1 = 64;
  int enc_width = 128;
  int enc_fuse = 1024;
  int enc_head = 512;
  int enc_attn_blocks = 4;

  // decoder MLP latent -> h1 -> h2 -> cloud_size*3
  int dec_h1 = 512;
  int dec_h2 = 1024;

  // generator MLP (latent+d_z) -> hidden -> hidden -> latent
  int gen_hidden = 512;

  // discriminator MLP latent -> h1 -> h2 -> 1
  int disc_h1 = 256;
  int disc_h2 = 128;

  // mode encoder: per-point MLP 3 -> c1 -> c2 -> c3, max-pool, c3 -> head -> 2*d_z
  int me_c1 = 64;
  int me_c2 = 128;
  int me_c3 = 256;
  int me_head = 128;

  // VAE decoder MLP d_z -> h1 -> h2 -> cloud_size*3
  int vdec_h1 = 512;
  int vdec_h2 = 1024;

  // classifier: per-point MLP 3 -> c1 -> c2 -> c3, max-pool, c3 -> h1 -> h2 -> k
  int cls_c1 = 64;
  int cls_c2 = 128;
  int cls_c3 = 1024;
  int cls_h1 = 512;
  int cls_h2 = 256;

  double norm_eps = 1e-5;
};

/// Ordered, named parameter matrices of one network block.
template <typename S>
struct ParamBlock {
  std::string name;
  std::vector<std::pair<std::string, ad::Mat<S>>> params;

  ad::Mat<S>& at(const std::string& key) {
    for (auto& [k, v] : params) {
      if (k == key) return v;
    }
    throw ValidationError("ParamBlock " + name + ": unknown parameter " + key);
  }
  const ad::Mat<S>& at(const std::string& key) const {
    return const_cast<ParamBlock*>(this)->at(key);
  }
  int index(const std::string& key) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].first == key) return static_cast<int>(i);
    }
    throw ValidationError("ParamBlock " + name + ": unknown parameter " + key);
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params) n += static_cast<std::size_t>(v.size());
    return n;
  }
};

struct BundleMeta {
  std::string stage = "init";
  int epoch = 0;
  u64 seed = 0;
  std::string config_digest;
  std::vector<std::string> history;  // completed stages, in order

  bool has_stage(const std::string& name) const {
    for (const auto& s : history) {
      if (s == name) return true;
    }
    return false;
  }
  void record_stage(const std::string& name) {
    stage = name;
    if (!has_stage(name)) history.push_back(name);
  }
};

inline const std::vector<std::string>& block_names() {
  static const std::vector<std::string> names = {
      "encoder",      "decoder",     "generator", "discriminator",
      "mode_encoder", "vae_decoder", "classifier"};
  return names;
}

/// Named parameter collections for the network blocks plus freeze flags and
/// training metadata.
template <typename S>
struct Bundle {
  NetConfig cfg;
  ParamBlock<S> encoder{"encoder", {}};
  ParamBlock<S> decoder{"decoder", {}};
  ParamBlock<S> generator{"generator", {}};
  ParamBlock<S> discriminator{"discriminator", {}};
  ParamBlock<S> mode_encoder{"mode_encoder", {}};
  ParamBlock<S> vae_decoder{"vae_decoder", {}};
  ParamBlock<S> classifier{"classifier", {}};
  std::map<std::string, bool> frozen;
  BundleMeta meta;

  ParamBlock<S>& block(const std::string& name) {
    if (name == "encoder") return encoder;
    if (name == "decoder") return decoder;
    if (name == "generator") return generator;
    if (name == "discriminator") return discriminator;
    if (name == "mode_encoder") return mode_encoder;
    if (name == "vae_decoder") return vae_decoder;
    if (name == "classifier") return classifier;
    throw ValidationError("Bundle: unknown block " + name);
  }
  const ParamBlock<S>& block(const std::string& name) const {
    return const_cast<Bundle*>(this)->block(name);
  }
  bool is_frozen(const std::string& name) const {
    auto it = frozen.find(name);
    return it != frozen.end() && it->second;
  }
};

namespace detail {

template <typename S>
void add_linear(ParamBlock<S>& b, const std::string& layer, int in, int out, Rng& rng) {
  const double s = std::sqrt(1.0 / static_cast<double>(in));
  ad::Mat<S> w(in, out);
  for (int i = 0; i < in; ++i) {
    for (int j = 0; j < out; ++j) w(i, j) = static_cast<S>(rng.uniform(-s, s));
  }
  ad::Mat<S> bias(1, out);
  for (int j = 0; j < out; ++j) bias(0, j) = static_cast<S>(rng.uniform(-s, s));
  b.params.emplace_back(layer + ".w", std::move(w));
  b.params.emplace_back(layer + ".b", std::move(bias));
}

template <typename S>
void add_norm(ParamBlock<S>& b, const std::string& layer, int width) {
  b.params.emplace_back(layer + ".gamma", ad::Mat<S>::Ones(1, width));
  b.params.emplace_back(layer + ".beta", ad::Mat<S>::Zero(1, width));
}

}  // namespace detail

template <typename S>
Bundle<S> init_bundle(const NetConfig& cfg, u64 seed) {
  Bundle<S> b;
  b.cfg = cfg;
  b.meta.seed = seed;

  {
    Rng rng(derive_seed(seed, "init/encoder"));
    detail::add_linear(b.encoder, "embed1", 3, cfg.enc_embed1, rng);
    detail::add_linear(b.encoder, "embed2", cfg.enc_embed1, cfg.enc_width, rng);
    for (int k = 0; k < cfg.enc_attn_blocks; ++k) {
      const std::string p = "attn" + std::to_string(k);
      detail::add_linear(b.encoder, p + ".q", cfg.enc_width, cfg.enc_width, rng);
      detail::add_linear(b.encoder, p + ".k", cfg.enc_width, cfg.enc_width, rng);
      detail::add_linear(b.encoder, p + ".v", cfg.enc_width, cfg.enc_width, rng);
      detail::add_linear(b.encoder, p + ".o", cfg.enc_width, cfg.enc_width, rng);
    }
    detail::add_linear(b.encoder, "fuse", cfg.enc_attn_blocks * cfg.enc_width, cfg.enc_fuse, rng);
    detail::add_linear(b.encoder, "head1", cfg.enc_fuse, cfg.enc_head, rng);
    detail::add_linear(b.encoder, "head2", cfg.enc_head, cfg.latent_dim, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/decoder"));
    detail::add_linear(b.decoder, "fc1", cfg.latent_dim, cfg.dec_h1, rng);
    detail::add_linear(b.decoder, "fc2", cfg.dec_h1, cfg.dec_h2, rng);
    detail::add_linear(b.decoder, "fc3", cfg.dec_h2, cfg.cloud_size * 3, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/generator"));
    detail::add_linear(b.generator, "fc1", cfg.latent_dim + cfg.d_z, cfg.gen_hidden, rng);
    detail::add_linear(b.generator, "fc2", cfg.gen_hidden, cfg.gen_hidden, rng);
    detail::add_linear(b.generator, "fc3", cfg.gen_hidden, cfg.latent_dim, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/discriminator"));
    detail::add_linear(b.discriminator, "fc1", cfg.latent_dim, cfg.disc_h1, rng);
    detail::add_linear(b.discriminator, "fc2", cfg.disc_h1, cfg.disc_h2, rng);
    detail::add_linear(b.discriminator, "fc3", cfg.disc_h2, 1, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/mode_encoder"));
    detail::add_linear(b.mode_encoder, "pt1", 3, cfg.me_c1, rng);
    detail::add_norm(b.mode_encoder, "pt1", cfg.me_c1);
    detail::add_linear(b.mode_encoder, "pt2", cfg.me_c1, cfg.me_c2, rng);
    detail::add_norm(b.mode_encoder, "pt2", cfg.me_c2);
    detail::add_linear(b.mode_encoder, "pt3", cfg.me_c2, cfg.me_c3, rng);
    detail::add_norm(b.mode_encoder, "pt3", cfg.me_c3);
    detail::add_linear(b.mode_encoder, "head1", cfg.me_c3, cfg.me_head, rng);
    detail::add_linear(b.mode_encoder, "head2", cfg.me_head, 2 * cfg.d_z, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/vae_decoder"));
    detail::add_linear(b.vae_decoder, "fc1", cfg.d_z, cfg.vdec_h1, rng);
    detail::add_linear(b.vae_decoder, "fc2", cfg.vdec_h1, cfg.vdec_h2, rng);
    detail::add_linear(b.vae_decoder, "fc3", cfg.vdec_h2, cfg.cloud_size * 3, rng);
  }
  {
    Rng rng(derive_seed(seed, "init/classifier"));
    detail::add_linear(b.classifier, "pt1", 3, cfg.cls_c1, rng);
    detail::add_norm(b.classifier, "pt1", cfg.cls_c1);
    detail::add_linear(b.classifier, "pt2", cfg.cls_c1, cfg.cls_c2, rng);
    detail::add_norm(b.classifier, "pt2", cfg.cls_c2);
    detail::add_linear(b.classifier, "pt3", cfg.cls_c2, cfg.cls_c3, rng);
    detail::add_norm(b.classifier, "pt3", cfg.cls_c3);
    detail::add_linear(b.classifier, "head1", cfg.cls_c3, cfg.cls_h1, rng);
    detail::add_linear(b.classifier, "head2", cfg.cls_h1, cfg.cls_h2, rng);
    detail::add_linear(b.classifier, "head3", cfg.cls_h2, cfg.num_classes, rng);
  }
  return b;
}

template <typename S>
bool bundle_finite(const Bundle<S>& b) {
  for (const auto& name : block_names()) {
    for (const auto& [k, v] : b.block(name).params) {
      if (!v.allFinite()) return false;
    }
  }
  return true;
}

/// Canonical point order: lexicographic by (x, y, z). Set-consuming networks
/// sort their input through this order so that any permutation of the same
/// point set produces bit-identical activations, attention sums included.
template <typename Derived>
std::vector<int> canonical_order(const Eigen::MatrixBase<Derived>& pts) {
  std::vector<int> order(static_cast<std::size_t>(pts.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (pts(a, 0) != pts(b, 0)) return pts(a, 0) < pts(b, 0);
    if (pts(a, 1) != pts(b, 1)) return pts(a, 1) < pts(b, 1);
    return pts(a, 2) < pts(b, 2);
  });
  return order;
}

template <typename S>
ad::Mat<S> cloud_matrix_sorted(const PointCloud& cloud) {
  const std::vector<int> order = canonical_order(cloud.points);
  ad::Mat<S> m(cloud.points.rows(), 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      m(i, c) = static_cast<S>(cloud.points(order[static_cast<std::size_t>(i)], c));
    }
  }
  return m;
}

/// A block whose parameters are registered as tape leaves.
template <typename S>
struct BoundBlock {
  const ParamBlock<S>* block = nullptr;
  std::vector<ad::Tensor> nodes;

  ad::Tensor at(const std::string& key) const {
    return nodes[static_cast<std::size_t>(block->index(key))];
  }
};

template <typename S>
BoundBlock<S> bind_block(ad::Tape<S>& tape, const ParamBlock<S>& block, bool trainable) {
  BoundBlock<S> out;
  out.block = &block;
  out.nodes.reserve(block.params.size());
  for (const auto& [k, v] : block.params) {
    out.nodes.push_back(tape.leaf(&v, trainable));
  }
  return out;
}

namespace detail {

template <typename S>
ad::Tensor linear(ad::Tape<S>& t, const BoundBlock<S>& b, const std::string& layer,
                  ad::Tensor x) {
  return t.add_rowvec(t.matmul(x, b.at(layer + ".w")), b.at(layer + ".b"));
}

template <typename S>
ad::Tensor norm_relu(ad::Tape<S>& t, const BoundBlock<S>& b, const std::string& layer,
                     ad::Tensor x, S eps) {
  return t.relu(t.normalize_cols(x, b.at(layer + ".gamma"), b.at(layer + ".beta"), eps));
}

}  // namespace detail

/// Encoder forward on a canonically ordered N x 3 input. Returns 1 x latent.
template <typename S>
ad::Tensor encoder_forward(ad::Tape<S>& t, const BoundBlock<S>& enc, const NetConfig& cfg,
                           ad::Tensor pts) {
  ad::Tensor h = t.relu(detail::linear(t, enc, "embed1", pts));
  h = t.relu(detail::linear(t, enc, "embed2", h));
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.enc_width)));
  std::vector<ad::Tensor> outs;
  outs.reserve(static_cast<std::size_t>(cfg.enc_attn_blocks));
  for (int k = 0; k < cfg.enc_attn_blocks; ++k) {
    const std::string p = "attn" + std::to_string(k);
    ad::Tensor q = detail::linear(t, enc, p + ".q", h);
    ad::Tensor key = detail::linear(t, enc, p + ".k", h);
    ad::Tensor v = detail::linear(t, enc, p + ".v", h);
    ad::Tensor scores = t.scale(t.matmul(q, t.transpose(key)), inv_sqrt);
    ad::Tensor attn = t.matmul(t.softmax_rows(scores), v);
    ad::Tensor offset = t.sub(h, attn);
    ad::Tensor m = t.relu(detail::linear(t, enc, p + ".o", offset));
    h = t.add(h, m);
    outs.push_back(h);
  }
  ad::Tensor fused = t.relu(detail::linear(t, enc, "fuse", t.concat_cols(outs)));
  ad::Tensor pooled = t.colmax(fused);
  ad::Tensor g = t.relu(detail::linear(t, enc, "head1", pooled));
  return detail::linear(t, enc, "head2", g);
}

/// Decoder forward: 1 x latent -> N x 3.
template <typename S>
ad::Tensor decoder_forward(ad::Tape<S>& t, const BoundBlock<S>& dec, const NetConfig& cfg,
                           ad::Tensor latent) {
  ad::Tensor h = t.relu(detail::linear(t, dec, "fc1", latent));
  h = t.relu(detail::linear(t, dec, "fc2", h));
  ad::Tensor flat = detail::linear(t, dec, "fc3", h);
  return t.reshape_rowmajor(flat, cfg.cloud_size, 3);
}

template <typename S>
ad::Tensor vae_decoder_forward(ad::Tape<S>& t, const BoundBlock<S>& dec, const NetConfig& cfg,
                               ad::Tensor z) {
  ad::Tensor h = t.relu(detail::linear(t, dec, "fc1", z));
  h = t.relu(detail::linear(t, dec, "fc2", h));
  ad::Tensor flat = detail::linear(t, dec, "fc3", h);
  return t.reshape_rowmajor(flat, cfg.cloud_size, 3);
}

/// Generator forward: (1 x latent, 1 x d_z) -> 1 x latent.
template <typename S>
ad::Tensor generator_forward(ad::Tape<S>& t, const BoundBlock<S>& gen, const NetConfig&,
                             ad::Tensor latent, ad::Tensor z) {
  ad::Tensor x = t.concat_cols({latent, z});
  ad::Tensor h = t.relu(detail::linear(t, gen, "fc1", x));
  h = t.relu(detail::linear(t, gen, "fc2", h));
  return detail::linear(t, gen, "fc3", h);
}

/// Discriminator forward: 1 x latent -> 1 x 1 raw score.
template <typename S>
ad::Tensor discriminator_forward(ad::Tape<S>& t, const BoundBlock<S>& disc, const NetConfig&,
                                 ad::Tensor latent) {
  ad::Tensor h = t.relu(detail::linear(t, disc, "fc1", latent));
  h = t.relu(detail::linear(t, disc, "fc2", h));
  return detail::linear(t, disc, "fc3", h);
}

/// Mode encoder forward on canonically ordered points: returns (mu, logvar),
/// each 1 x d_z.
template <typename S>
std::pair<ad::Tensor, ad::Tensor> mode_encoder_forward(ad::Tape<S>& t, const BoundBlock<S>& me,
                                                       const NetConfig& cfg, ad::Tensor pts) {
  const S eps = static_cast<S>(cfg.norm_eps);
  ad::Tensor h = detail::norm_relu(t, me, "pt1", detail::linear(t, me, "pt1", pts), eps);
  h = detail::norm_relu(t, me, "pt2", detail::linear(t, me, "pt2", h), eps);
  h = detail::norm_relu(t, me, "pt3", detail::linear(t, me, "pt3", h), eps);
  ad::Tensor pooled = t.colmax(h);
  ad::Tensor g = t.relu(detail::linear(t, me, "head1", pooled));
  ad::Tensor both = detail::linear(t, me, "head2", g);
  return {t.slice_cols(both, 0, cfg.d_z), t.slice_cols(both, cfg.d_z, cfg.d_z)};
}

/// Classifier forward on canonically ordered points: 1 x k logits.
template <typename S>
ad::Tensor classifier_logits_forward(ad::Tape<S>& t, const BoundBlock<S>& cls,
                                     const NetConfig& cfg, ad::Tensor pts) {
  const S eps = static_cast<S>(cfg.norm_eps);
  ad::Tensor h = detail::norm_relu(t, cls, "pt1", detail::linear(t, cls, "pt1", pts), eps);
  h = detail::norm_relu(t, cls, "pt2", detail::linear(t, cls, "pt2", h), eps);
  h = detail::norm_relu(t, cls, "pt3", detail::linear(t, cls, "pt3", h), eps);
  ad::Tensor pooled = t.colmax(h);
  ad::Tensor g = t.relu(detail::linear(t, cls, "head1", pooled));
  g = t.relu(detail::linear(t, cls, "head2", g));
  return detail::linear(t, cls, "head3", g);
}

// ---- public forward wrappers --------------------------------------------

template <typename S>
LatentCode encode(const Bundle<S>& bundle, const PointCloud& cloud) {
  if (cloud.size() != bundle.cfg.cloud_size) {
    throw ValidationError("encode: expected " + std::to_string(bundle.cfg.cloud_size) +
                          " points, got " + std::to_string(cloud.size()));
  }
  ad::Tape<S> t;
  BoundBlock<S> enc = bind_block(t, bundle.encoder, false);
  ad::Tensor out = encoder_forward(t, enc, bundle.cfg, t.constant(cloud_matrix_sorted<S>(cloud)));
  LatentCode code;
  code.values = t.value(out).row(0).template cast<double>();
  return code;
}

template <typename S>
PointCloud decode(const Bundle<S>& bundle, const LatentCode& code) {
  if (static_cast<int>(code.values.size()) != bundle.cfg.latent_dim) {
    throw ValidationError("decode: latent dimension mismatch");
  }
  ad::Tape<S> t;
  BoundBlock<S> dec = bind_block(t, bundle.decoder, false);
  ad::Mat<S> in = code.values.transpose().template cast<S>();
  ad::Tensor out = decoder_forward(t, dec, bundle.cfg, t.constant(std::move(in)));
  PointCloud cloud;
  cloud.points = t.value(out).template cast<double>();
  cloud.domain = DomainTag::synthetic;
  return cloud;
}

template <typename S>
LatentCode generate(const Bundle<S>& bundle, const LatentCode& code, const ModeVector& z) {
  if (static_cast<int>(z.values.size()) != bundle.cfg.d_z) {
    throw ValidationError("generate: mode vector dimension mismatch");
  }
  ad::Tape<S> t;
  BoundBlock<S> gen = bind_block(t, bundle.generator, false);
  ad::Mat<S> lin = code.values.transpose().template cast<S>();
  ad::Mat<S> zin = z.values.transpose().template cast<S>();
  ad::Tensor out = generator_forward(t, gen, bundle.cfg, t.constant(std::move(lin)),
                                     t.constant(std::move(zin)));
  LatentCode res;
  res.values = t.value(out).row(0).template cast<double>();
  return res;
}

template <typename S>
double discriminate(const Bundle<S>& bundle, const LatentCode& code) {
  ad::Tape<S> t;
  BoundBlock<S> disc = bind_block(t, bundle.discriminator, false);
  ad::Mat<S> in = code.values.transpose().template cast<S>();
  ad::Tensor out = discriminator_forward(t, disc, bundle.cfg, t.constant(std::move(in)));
  return static_cast<double>(t.scalar(out));
}

template <typename S>
std::pair<ModeVector, ModeVector> mode_encode(const Bundle<S>& bundle, const PointCloud& cloud) {
  ad::Tape<S> t;
  BoundBlock<S> me = bind_block(t, bundle.mode_encoder, false);
  auto [mu, logvar] =
      mode_encoder_forward(t, me, bundle.cfg, t.constant(cloud_matrix_sorted<S>(cloud)));
  ModeVector m, lv;
  m.values = t.value(mu).row(0).template cast<double>();
  lv.values = t.value(logvar).row(0).template cast<double>();
  return {m, lv};
}

template <typename S>
ClassProbs classify(const Bundle<S>& bundle, const PointCloud& cloud) {
  ad::Tape<S> t;
  BoundBlock<S> cls = bind_block(t, bundle.classifier, false);
  ad::Tensor logits =
      classifier_logits_forward(t, cls, bundle.cfg, t.constant(cloud_matrix_sorted<S>(cloud)));
  ad::Tensor probs = t.softmax_rows(logits);
  ClassProbs out;
  out.probs = t.value(probs).row(0).template cast<double>();
  return out;
}

/// Reparameterized sample mu + exp(logvar/2) * eps with seeded standard
/// normal noise.
inline ModeVector reparameterize(const ModeVector& mu, const ModeVector& logvar, u64 seed) {
  Rng rng(seed);
  ModeVector z;
  z.values.resize(mu.values.size());
  for (Eigen::Index i = 0; i < mu.values.size(); ++i) {
    z.values(i) = mu.values(i) + std::exp(0.5 * logvar.values(i)) * rng.normal();
  }
  return z;
}

}  // namespace pcda
