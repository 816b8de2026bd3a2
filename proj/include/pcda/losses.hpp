#pragma once

#include <span>
#include <string>
#include <vector>

#include "pcda/geometry.hpp"
#include "pcda/nets.hpp"

namespace pcda {

/// Importance weights of the generator objective.
struct LossWeights {
  double alpha = 1.0;  // shape reconstruction
  double beta = 1.0;   // latent-space reconstruction
  double gamma = 0.01; // classification

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) {
      throw ValidationError("loss weights must be nonnegative");
    }
  }
};

/// Which latent the discriminator's fake term sees. `generated` is the
/// trainable reading; `raw_source` is the literal printed form, kept for
/// ablation.
enum class FakeTerm { generated, raw_source };

struct EmdOptions {
  enum class Solver { approx, exact };
  Solver solver = Solver::approx;
  double epsilon = 1e-2;
};

inline Assignment solve_emd(const PointCloud& a, const PointCloud& b, const EmdOptions& opt) {
  return opt.solver == EmdOptions::Solver::exact ? emd_exact(a, b)
                                                 : emd_approx(a, b, opt.epsilon);
}

struct LossReport {
  double l_gan_f = 0;
  double l_gan_g = 0;
  double l_recon_ae = 0;
  double l_recon_g = 0;
  double l_latent = 0;
  double l_cls = 0;
  double total = 0;
};

/// total = L_GAN_G + alpha * L_recon_G + beta * L_latent + gamma * L_cls.
inline double compose_total(double gan_g, double recon_g, double latent, double cls,
                            const LossWeights& w) {
  return gan_g + w.alpha * recon_g + w.beta * latent + w.gamma * cls;
}

/// Least-squares GAN discriminator loss: mean[(real-1)^2] + mean[fake^2].
template <typename S>
S lsgan_discriminator_loss(std::span<const S> real_scores, std::span<const S> fake_scores) {
  if (real_scores.empty() || fake_scores.empty()) {
    throw ValidationError("lsgan_discriminator_loss: empty score batch");
  }
  S real = S(0);
  for (S s : real_scores) real += (s - S(1)) * (s - S(1));
  S fake = S(0);
  for (S s : fake_scores) fake += s * s;
  return real / static_cast<S>(real_scores.size()) + fake / static_cast<S>(fake_scores.size());
}

/// Least-squares GAN generator loss: mean[(fake-1)^2].
template <typename S>
S lsgan_generator_loss(std::span<const S> fake_scores) {
  if (fake_scores.empty()) throw ValidationError("lsgan_generator_loss: empty score batch");
  S acc = S(0);
  for (S s : fake_scores) acc += (s - S(1)) * (s - S(1));
  return acc / static_cast<S>(fake_scores.size());
}

/// Mean EMD over (input, reconstruction) pairs.
inline double mean_emd(std::span<const std::pair<PointCloud, PointCloud>> pairs,
                       const EmdOptions& opt) {
  if (pairs.empty()) throw ValidationError("mean_emd: empty batch");
  double acc = 0;
  for (const auto& [a, b] : pairs) acc += solve_emd(a, b, opt).cost;
  return acc / static_cast<double>(pairs.size());
}

/// KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions. Nonnegative.
inline double gaussian_kl(const Eigen::VectorXd& mu, const Eigen::VectorXd& logvar) {
  double acc = 0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    acc += -0.5 * (1.0 + logvar(i) - mu(i) * mu(i) - std::exp(logvar(i)));
  }
  return acc;
}

/// Sum-of-absolute-differences latent reconstruction distance.
inline double l1_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ValidationError("l1_distance: dimension mismatch");
  return (a - b).cwiseAbs().sum();
}

// ---- tape builders (shared by the value wrappers and the trainers) -------

template <typename S>
struct BoundBundle {
  BoundBlock<S> encoder, decoder, generator, discriminator, mode_encoder, vae_decoder,
      classifier;
};

/// Binds every block; a block's parameters require gradients only when its
/// name is listed in `trainable` and the bundle does not freeze it.
template <typename S>
BoundBundle<S> bind_bundle(ad::Tape<S>& tape, const Bundle<S>& b,
                           const std::vector<std::string>& trainable = {}) {
  auto want = [&](const std::string& name) {
    if (b.is_frozen(name)) return false;
    for (const auto& t : trainable) {
      if (t == name) return true;
    }
    return false;
  };
  BoundBundle<S> out;
  out.encoder = bind_block(tape, b.encoder, want("encoder"));
  out.decoder = bind_block(tape, b.decoder, want("decoder"));
  out.generator = bind_block(tape, b.generator, want("generator"));
  out.discriminator = bind_block(tape, b.discriminator, want("discriminator"));
  out.mode_encoder = bind_block(tape, b.mode_encoder, want("mode_encoder"));
  out.vae_decoder = bind_block(tape, b.vae_decoder, want("vae_decoder"));
  out.classifier = bind_block(tape, b.classifier, want("classifier"));
  return out;
}

/// EMD between an in-tape N x 3 tensor and a fixed reference cloud, as a
/// scalar tape node carrying the fixed-assignment subgradient.
template <typename S>
ad::Tensor emd_term(ad::Tape<S>& t, ad::Tensor decoded, const PointCloud& reference,
                    const EmdOptions& opt) {
  PointCloud moving;
  moving.points = t.value(decoded).template cast<double>();
  const Assignment asg = solve_emd(moving, reference, opt);
  const Points g = emd_gradient(moving, reference, asg);
  return t.external_scalar(static_cast<S>(asg.cost), decoded, g.template cast<S>());
}

template <typename S>
ad::Tensor cloud_input(ad::Tape<S>& t, const PointCloud& cloud) {
  return t.constant(cloud_matrix_sorted<S>(cloud));
}

template <typename S>
ad::Tensor mode_vector_input(ad::Tape<S>& t, const ModeVector& z) {
  return t.constant(ad::Mat<S>(z.values.transpose().template cast<S>()));
}

/// In-tape canonical ordering of a computed point tensor.
template <typename S>
ad::Tensor sort_points(ad::Tape<S>& t, ad::Tensor pts) {
  return t.permute_rows(pts, canonical_order(t.value(pts)));
}

/// emd(X, D(E(X))) for one cloud.
template <typename S>
ad::Tensor ae_recon_element(ad::Tape<S>& t, const BoundBundle<S>& bb, const NetConfig& cfg,
                            const PointCloud& cloud, const EmdOptions& opt) {
  ad::Tensor latent = encoder_forward(t, bb.encoder, cfg, cloud_input(t, cloud));
  ad::Tensor decoded = decoder_forward(t, bb.decoder, cfg, latent);
  return emd_term(t, decoded, cloud, opt);
}

/// Discriminator score on a real (target) cloud's latent.
template <typename S>
ad::Tensor real_score_element(ad::Tape<S>& t, const BoundBundle<S>& bb, const NetConfig& cfg,
                              const PointCloud& cloud) {
  ad::Tensor latent = encoder_forward(t, bb.encoder, cfg, cloud_input(t, cloud));
  return discriminator_forward(t, bb.discriminator, cfg, latent);
}

/// Discriminator score on a generated latent (or the raw source latent under
/// the literal fake-term reading).
template <typename S>
ad::Tensor fake_score_element(ad::Tape<S>& t, const BoundBundle<S>& bb, const NetConfig& cfg,
                              const PointCloud& cloud, const ModeVector& z, FakeTerm fake) {
  ad::Tensor latent = encoder_forward(t, bb.encoder, cfg, cloud_input(t, cloud));
  if (fake == FakeTerm::raw_source) {
    return discriminator_forward(t, bb.discriminator, cfg, latent);
  }
  ad::Tensor gen = generator_forward(t, bb.generator, cfg, latent, mode_vector_input(t, z));
  return discriminator_forward(t, bb.discriminator, cfg, gen);
}

template <typename S>
struct GenObjectiveParts {
  S gan_g{};
  S recon{};
  S latent{};
  S cls{};
  S total{};
};

/// Full per-element generator objective
///   (F(G(E(X),z))-1)^2 + alpha*emd(X, D(G(E(X),z))) + beta*||z - Ez(D(...))||_1
///   + gamma*CE(C(D(...)), y).
/// Zero-weighted components are still evaluated for logging but excluded
/// from the differentiated total.
template <typename S>
ad::Tensor generator_objective_element(ad::Tape<S>& t, const BoundBundle<S>& bb,
                                       const NetConfig& cfg, const PointCloud& source,
                                       const ModeVector& z, const LossWeights& w,
                                       const EmdOptions& opt, GenObjectiveParts<S>* parts) {
  if (static_cast<int>(z.values.size()) != cfg.d_z) {
    throw ValidationError("generator objective: mode vector dimension mismatch");
  }
  ad::Tensor z_in = mode_vector_input(t, z);
  ad::Tensor latent = encoder_forward(t, bb.encoder, cfg, cloud_input(t, source));
  ad::Tensor gen = generator_forward(t, bb.generator, cfg, latent, z_in);

  ad::Tensor score = discriminator_forward(t, bb.discriminator, cfg, gen);
  ad::Tensor gan_g = t.square(t.add_scalar(score, S(-1)));

  ad::Tensor decoded = decoder_forward(t, bb.decoder, cfg, gen);
  ad::Tensor recon = emd_term(t, decoded, source, opt);

  ad::Tensor sorted = sort_points(t, decoded);
  auto [mu, logvar] = mode_encoder_forward(t, bb.mode_encoder, cfg, sorted);
  (void)logvar;
  ad::Tensor latent_l1 = t.sum(t.abs(t.sub(z_in, mu)));

  if (!source.label.has_value()) {
    throw ValidationError("generator objective: source cloud has no label");
  }
  ad::Tensor logits = classifier_logits_forward(t, bb.classifier, cfg, sorted);
  ad::Tensor ce = t.nll_index(t.log_softmax_rows(logits), *source.label);

  ad::Tensor total = gan_g;
  if (w.alpha != 0.0) total = t.add(total, t.scale(recon, static_cast<S>(w.alpha)));
  if (w.beta != 0.0) total = t.add(total, t.scale(latent_l1, static_cast<S>(w.beta)));
  if (w.gamma != 0.0) total = t.add(total, t.scale(ce, static_cast<S>(w.gamma)));

  if (parts != nullptr) {
    parts->gan_g = t.scalar(gan_g);
    parts->recon = t.scalar(recon);
    parts->latent = t.scalar(latent_l1);
    parts->cls = t.scalar(ce);
    parts->total = t.scalar(total);
  }
  return total;
}

/// VAE objective for one cloud: emd(X, Dz(mu + exp(logvar/2) * eps)) +
/// kl_weight * KL(q(z|X) || N(0, I)).
template <typename S>
ad::Tensor vae_objective_element(ad::Tape<S>& t, const BoundBundle<S>& bb, const NetConfig& cfg,
                                 const PointCloud& cloud, const Eigen::VectorXd& noise,
                                 double kl_weight, const EmdOptions& opt, S* recon_out = nullptr,
                                 S* kl_out = nullptr) {
  auto [mu, logvar] = mode_encoder_forward(t, bb.mode_encoder, cfg, cloud_input(t, cloud));
  ad::Tensor eps = t.constant(ad::Mat<S>(noise.transpose().template cast<S>()));
  ad::Tensor zsample = t.add(mu, t.hadamard(t.exp(t.scale(logvar, S(0.5))), eps));
  ad::Tensor decoded = vae_decoder_forward(t, bb.vae_decoder, cfg, zsample);
  ad::Tensor recon = emd_term(t, decoded, cloud, opt);
  // KL = -0.5 * sum(1 + logvar - mu^2 - exp(logvar))
  ad::Tensor inner = t.sub(t.sub(t.add_scalar(logvar, S(1)), t.square(mu)), t.exp(logvar));
  ad::Tensor kl = t.scale(t.sum(inner), S(-0.5));
  if (recon_out != nullptr) *recon_out = t.scalar(recon);
  if (kl_out != nullptr) *kl_out = t.scalar(kl);
  return t.add(recon, t.scale(kl, static_cast<S>(kl_weight)));
}

/// Cross-entropy of the classifier on one labeled cloud.
template <typename S>
ad::Tensor classifier_ce_element(ad::Tape<S>& t, const BoundBundle<S>& bb, const NetConfig& cfg,
                                 const PointCloud& cloud) {
  if (!cloud.label.has_value()) {
    throw ValidationError("classifier loss: cloud has no label");
  }
  ad::Tensor logits = classifier_logits_forward(t, bb.classifier, cfg, cloud_input(t, cloud));
  return t.nll_index(t.log_softmax_rows(logits), *cloud.label);
}

// ---- batch value wrappers (forward only) ----------------------------------

template <typename S>
S loss_recon_ae(const Bundle<S>& bundle, std::span<const PointCloud> batch,
                const EmdOptions& opt) {
  if (batch.empty()) throw ValidationError("loss_recon_ae: empty batch");
  S acc = S(0);
  for (const PointCloud& c : batch) {
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    acc += t.scalar(ae_recon_element(t, bb, bundle.cfg, c, opt));
  }
  return acc / static_cast<S>(batch.size());
}

template <typename S>
S loss_adv_discriminator(const Bundle<S>& bundle, std::span<const PointCloud> batch_src,
                         std::span<const PointCloud> batch_tgt,
                         std::span<const ModeVector> z_batch,
                         FakeTerm fake = FakeTerm::generated) {
  if (batch_src.empty() || batch_tgt.empty()) {
    throw ValidationError("loss_adv_discriminator: empty batch");
  }
  if (z_batch.size() != batch_src.size()) {
    throw ValidationError("loss_adv_discriminator: z batch size mismatch with source batch");
  }
  std::vector<S> real, fake_scores;
  for (const PointCloud& c : batch_tgt) {
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    real.push_back(t.scalar(real_score_element(t, bb, bundle.cfg, c)));
  }
  for (std::size_t i = 0; i < batch_src.size(); ++i) {
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    fake_scores.push_back(
        t.scalar(fake_score_element(t, bb, bundle.cfg, batch_src[i], z_batch[i], fake)));
  }
  return lsgan_discriminator_loss<S>(real, fake_scores);
}

template <typename S>
S loss_adv_generator(const Bundle<S>& bundle, std::span<const PointCloud> batch_src,
                     std::span<const ModeVector> z_batch) {
  if (batch_src.empty()) throw ValidationError("loss_adv_generator: empty batch");
  if (z_batch.size() != batch_src.size()) {
    throw ValidationError("loss_adv_generator: z batch size mismatch with source batch");
  }
  std::vector<S> scores;
  for (std::size_t i = 0; i < batch_src.size(); ++i) {
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    scores.push_back(t.scalar(
        fake_score_element(t, bb, bundle.cfg, batch_src[i], z_batch[i], FakeTerm::generated)));
  }
  return lsgan_generator_loss<S>(scores);
}

template <typename S>
S loss_recon_generator(const Bundle<S>& bundle, std::span<const PointCloud> batch_src,
                       std::span<const ModeVector> z_batch, const EmdOptions& opt) {
  if (batch_src.empty()) throw ValidationError("loss_recon_generator: empty batch");
  if (z_batch.size() != batch_src.size()) {
    throw ValidationError("loss_recon_generator: z batch size mismatch");
  }
  S acc = S(0);
  for (std::size_t i = 0; i < batch_src.size(); ++i) {
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    ad::Tensor latent =
        encoder_forward(t, bb.encoder, bundle.cfg, cloud_input(t, batch_src[i]));
    ad::Tensor gen = generator_forward(t, bb.generator, bundle.cfg, latent,
                                       mode_vector_input(t, z_batch[i]));
    ad::Tensor decoded = decoder_forward(t, bb.decoder, bundle.cfg, gen);
    acc += t.scalar(emd_term(t, decoded, batch_src[i], opt));
  }
  return acc / static_cast<S>(batch_src.size());
}

template <typename S>
S loss_latent(const Bundle<S>& bundle, std::span<const PointCloud> batch_src,
              std::span<const ModeVector> z_batch) {
  if (batch_src.empty()) throw ValidationError("loss_latent: empty batch");
  if (z_batch.size() != batch_src.size()) {
    throw ValidationError("loss_latent: z batch size mismatch");
  }
  S acc = S(0);
  for (std::size_t i = 0; i < batch_src.size(); ++i) {
    if (static_cast<int>(z_batch[i].values.size()) != bundle.cfg.d_z) {
      throw ValidationError("loss_latent: mode vector dimension mismatch");
    }
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    ad::Tensor z_in = mode_vector_input(t, z_batch[i]);
    ad::Tensor latent =
        encoder_forward(t, bb.encoder, bundle.cfg, cloud_input(t, batch_src[i]));
    ad::Tensor gen = generator_forward(t, bb.generator, bundle.cfg, latent, z_in);
    ad::Tensor decoded = decoder_forward(t, bb.decoder, bundle.cfg, gen);
    auto [mu, logvar] =
        mode_encoder_forward(t, bb.mode_encoder, bundle.cfg, sort_points(t, decoded));
    (void)logvar;
    acc += t.scalar(t.sum(t.abs(t.sub(z_in, mu))));
  }
  return acc / static_cast<S>(batch_src.size());
}

template <typename S>
S loss_classification(const Bundle<S>& bundle, std::span<const PointCloud> batch_src,
                      std::span<const ModeVector> z_batch) {
  if (batch_src.empty()) throw ValidationError("loss_classification: empty batch");
  if (z_batch.size() != batch_src.size()) {
    throw ValidationError("loss_classification: z batch size mismatch");
  }
  S acc = S(0);
  for (std::size_t i = 0; i < batch_src.size(); ++i) {
    const PointCloud& c = batch_src[i];
    if (!c.label.has_value()) {
      throw ValidationError("loss_classification: source cloud has no label");
    }
    ad::Tape<S> t;
    BoundBundle<S> bb = bind_bundle(t, bundle);
    ad::Tensor latent = encoder_forward(t, bb.encoder, bundle.cfg, cloud_input(t, c));
    ad::Tensor gen = generator_forward(t, bb.generator, bundle.cfg, latent,
                                       mode_vector_input(t, z_batch[i]));
    ad::Tensor decoded = decoder_forward(t, bb.decoder, bundle.cfg, gen);
    ad::Tensor logits =
        classifier_logits_forward(t, bb.classifier, bundle.cfg, sort_points(t, decoded));
    acc += t.scalar(t.nll_index(t.log_softmax_rows(logits), *c.label));
  }
  return acc / static_cast<S>(batch_src.size());
}

/// Evaluates every component over the given batches and composes the
/// generator-side total.
template <typename S>
LossReport total_generator_objective(const Bundle<S>& bundle,
                                     std::span<const PointCloud> batch_src,
                                     std::span<const PointCloud> batch_tgt,
                                     std::span<const ModeVector> z_batch, const LossWeights& w,
                                     const EmdOptions& opt,
                                     FakeTerm fake = FakeTerm::generated) {
  w.validate();
  LossReport r;
  r.l_gan_f = static_cast<double>(loss_adv_discriminator(bundle, batch_src, batch_tgt, z_batch, fake));
  r.l_gan_g = static_cast<double>(loss_adv_generator(bundle, batch_src, z_batch));
  r.l_recon_ae = static_cast<double>(loss_recon_ae(bundle, batch_src, opt));
  r.l_recon_g = static_cast<double>(loss_recon_generator(bundle, batch_src, z_batch, opt));
  r.l_latent = static_cast<double>(loss_latent(bundle, batch_src, z_batch));
  r.l_cls = static_cast<double>(loss_classification(bundle, batch_src, z_batch));
  r.total = compose_total(r.l_gan_g, r.l_recon_g, r.l_latent, r.l_cls, w);
  return r;
}

}  // namespace pcda
