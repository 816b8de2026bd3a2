#include <doctest.h>

#include <cmath>

#include "pcda/losses.hpp"

using namespace pcda;

namespace {

NetConfig tiny_config(int num_classes = 4) {
  NetConfig cfg;
  cfg.cloud_size = 12;
  cfg.d_z = 4;
  cfg.num_classes = num_classes;
  cfg.enc_embed1 = 8;
  cfg.enc_width = 8;
  cfg.enc_fuse = 16;
  cfg.enc_head = 8;
  cfg.dec_h1 = 8;
  cfg.dec_h2 = 16;
  cfg.gen_hidden = 8;
  cfg.disc_h1 = 8;
  cfg.disc_h2 = 8;
  cfg.me_c1 = 8;
  cfg.me_c2 = 8;
  cfg.me_c3 = 8;
  cfg.me_head = 8;
  cfg.vdec_h1 = 8;
  cfg.vdec_h2 = 16;
  cfg.cls_c1 = 8;
  cfg.cls_c2 = 8;
  cfg.cls_c3 = 16;
  cfg.cls_h1 = 8;
  cfg.cls_h2 = 8;
  return cfg;
}

PointCloud random_cloud(int n, u64 seed, std::optional<int> label = std::nullopt) {
  Rng rng(seed);
  PointCloud c;
  c.points.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) c.points(i, j) = rng.uniform(-1, 1);
  }
  c.label = label;
  return c;
}

std::vector<ModeVector> random_z(int count, int d_z, u64 seed) {
  Rng rng(seed);
  std::vector<ModeVector> out;
  for (int i = 0; i < count; ++i) {
    ModeVector z;
    z.values = Eigen::VectorXd::NullaryExpr(d_z, [&](Eigen::Index) { return rng.normal(); });
    out.push_back(std::move(z));
  }
  return out;
}

const EmdOptions kExact{EmdOptions::Solver::exact, 1e-3};

}  // namespace

TEST_CASE("lsgan cores hit their optima and fixed points") {
  const std::vector<double> ones = {1, 1, 1};
  const std::vector<double> zeros = {0, 0, 0};
  CHECK(lsgan_discriminator_loss<double>(ones, zeros) == doctest::Approx(0.0));
  CHECK(lsgan_discriminator_loss<double>(zeros, zeros) == doctest::Approx(1.0));
  CHECK(lsgan_generator_loss<double>(ones) == doctest::Approx(0.0));
  CHECK(lsgan_generator_loss<double>(zeros) == doctest::Approx(1.0));
  CHECK_THROWS_AS(lsgan_generator_loss<double>(std::span<const double>{}), ValidationError);
}

TEST_CASE("mean_emd fixtures") {
  const PointCloud a = random_cloud(6, 1);
  std::vector<std::pair<PointCloud, PointCloud>> pairs = {{a, a}};
  CHECK(mean_emd(pairs, kExact) == doctest::Approx(0.0));

  PointCloud x, y;
  x.points.resize(1, 3);
  x.points << 0, 0, 0;
  y.points.resize(1, 3);
  y.points << 1, 0, 0;
  pairs = {{x, y}};
  CHECK(mean_emd(pairs, kExact) == doctest::Approx(1.0));
  CHECK_THROWS_AS(mean_emd({}, kExact), ValidationError);
}

TEST_CASE("gaussian KL: zero at the prior, nonnegative, hand value") {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
  CHECK(gaussian_kl(zero, zero) == doctest::Approx(0.0));
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Eigen::VectorXd mu = Eigen::VectorXd::NullaryExpr(6, [&](Eigen::Index) { return rng.normal(); });
    Eigen::VectorXd lv = Eigen::VectorXd::NullaryExpr(6, [&](Eigen::Index) { return rng.normal(); });
    CHECK(gaussian_kl(mu, lv) >= -1e-12);
  }
  // mu = 1, logvar = 0, one dim: KL = 0.5
  Eigen::VectorXd one(1), z(1);
  one << 1;
  z << 0;
  CHECK(gaussian_kl(one, z) == doctest::Approx(0.5));
}

TEST_CASE("l1 latent distance fixtures") {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(4);
  CHECK(l1_distance(z, z) == doctest::Approx(0.0));
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(4);
  CHECK(l1_distance(z, ones) == doctest::Approx(4.0));  // sum-of-absolute convention
  Eigen::VectorXd bad = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(l1_distance(z, bad), ValidationError);
}

TEST_CASE("compose_total reproduces the published weighted composition") {
  // M->S importance weights on fixture components (1, 2, 3, 4).
  const LossWeights ms{0.05, 0.05, 0.01};
  CHECK(compose_total(1, 2, 3, 4, ms) == doctest::Approx(1.29));
  const LossWeights zero{0, 0, 0};
  CHECK(compose_total(7.5, 2, 3, 4, zero) == doctest::Approx(7.5));
  const LossWeights sss{10, 1, 0.01};  // S->S* row
  CHECK(compose_total(1, 2, 3, 4, sss) == doctest::Approx(1 + 20 + 3 + 0.04));
}

TEST_CASE("loss_recon_ae equals a hand-rolled per-element loop") {
  const NetConfig cfg = tiny_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 10);
  std::vector<PointCloud> batch;
  for (u64 i = 0; i < 5; ++i) batch.push_back(random_cloud(cfg.cloud_size, 100 + i));

  const double got = loss_recon_ae(bundle, batch, kExact);
  double expected = 0;
  for (const PointCloud& c : batch) {
    const PointCloud rec = decode(bundle, encode(bundle, c));
    expected += emd_exact(rec, c).cost;
  }
  expected /= static_cast<double>(batch.size());
  CHECK(got == doctest::Approx(expected).epsilon(1e-6));
  CHECK_THROWS_AS(loss_recon_ae(bundle, {}, kExact), ValidationError);
}

TEST_CASE("adversarial losses match straight-line recomputation") {
  const NetConfig cfg = tiny_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 20);
  std::vector<PointCloud> src, tgt;
  for (u64 i = 0; i < 4; ++i) {
    src.push_back(random_cloud(cfg.cloud_size, 200 + i, static_cast<int>(i % cfg.num_classes)));
    tgt.push_back(random_cloud(cfg.cloud_size, 300 + i));
  }
  const std::vector<ModeVector> z = random_z(4, cfg.d_z, 21);

  std::vector<double> real_scores, fake_scores;
  for (const PointCloud& c : tgt) real_scores.push_back(discriminate(bundle, encode(bundle, c)));
  for (std::size_t i = 0; i < src.size(); ++i) {
    fake_scores.push_back(
        discriminate(bundle, generate(bundle, encode(bundle, src[i]), z[i])));
  }
  const double expected_d = lsgan_discriminator_loss<double>(real_scores, fake_scores);
  CHECK(loss_adv_discriminator(bundle, src, tgt, z) ==
        doctest::Approx(expected_d).epsilon(1e-9));

  const double expected_g = lsgan_generator_loss<double>(fake_scores);
  CHECK(loss_adv_generator(bundle, src, z) == doctest::Approx(expected_g).epsilon(1e-9));

  // The literal fake-term reading scores raw source latents instead.
  std::vector<double> raw_scores;
  for (const PointCloud& c : src) raw_scores.push_back(discriminate(bundle, encode(bundle, c)));
  const double expected_raw = lsgan_discriminator_loss<double>(real_scores, raw_scores);
  CHECK(loss_adv_discriminator(bundle, src, tgt, z, FakeTerm::raw_source) ==
        doctest::Approx(expected_raw).epsilon(1e-9));

  const std::vector<ModeVector> bad_z = random_z(3, cfg.d_z, 22);
  CHECK_THROWS_AS(loss_adv_discriminator(bundle, src, tgt, bad_z), ValidationError);
}

TEST_CASE("generator-side losses match straight-line recomputation") {
  const NetConfig cfg = tiny_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 30);
  std::vector<PointCloud> src;
  for (u64 i = 0; i < 3; ++i) {
    src.push_back(random_cloud(cfg.cloud_size, 400 + i, static_cast<int>(i % cfg.num_classes)));
  }
  const std::vector<ModeVector> z = random_z(3, cfg.d_z, 31);

  double recon = 0, latent = 0, cls = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const PointCloud synth = decode(bundle, generate(bundle, encode(bundle, src[i]), z[i]));
    recon += emd_exact(synth, src[i]).cost;
    const auto [mu, logvar] = mode_encode(bundle, synth);
    latent += l1_distance(z[i].values, mu.values);
    const ClassProbs probs = classify(bundle, synth);
    cls += -std::log(probs.probs(*src[i].label));
  }
  recon /= 3;
  latent /= 3;
  cls /= 3;

  CHECK(loss_recon_generator(bundle, src, z, kExact) == doctest::Approx(recon).epsilon(1e-6));
  CHECK(loss_latent(bundle, src, z) == doctest::Approx(latent).epsilon(1e-6));
  CHECK(loss_classification(bundle, src, z) == doctest::Approx(cls).epsilon(1e-6));

  std::vector<PointCloud> unlabeled = src;
  unlabeled[1].label.reset();
  CHECK_THROWS_AS(loss_classification(bundle, unlabeled, z), ValidationError);
}

TEST_CASE("uniform classifier cross-entropy equals ln k") {
  const NetConfig cfg = tiny_config(10);
  Bundle<double> bundle = init_bundle<double>(cfg, 40);
  bundle.classifier.at("head3.w").setZero();
  bundle.classifier.at("head3.b").setZero();
  std::vector<PointCloud> src = {random_cloud(cfg.cloud_size, 41, 3)};
  const std::vector<ModeVector> z = random_z(1, cfg.d_z, 42);
  CHECK(loss_classification(bundle, src, z) == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("total objective report carries components and the composition") {
  const NetConfig cfg = tiny_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 50);
  std::vector<PointCloud> src, tgt;
  for (u64 i = 0; i < 3; ++i) {
    src.push_back(random_cloud(cfg.cloud_size, 500 + i, static_cast<int>(i % cfg.num_classes)));
    tgt.push_back(random_cloud(cfg.cloud_size, 600 + i));
  }
  const std::vector<ModeVector> z = random_z(3, cfg.d_z, 51);
  const LossWeights w{0.05, 0.05, 0.01};
  const LossReport r = total_generator_objective(bundle, src, tgt, z, w, kExact);
  CHECK(r.total ==
        doctest::Approx(r.l_gan_g + 0.05 * r.l_recon_g + 0.05 * r.l_latent + 0.01 * r.l_cls));
  CHECK(r.l_gan_f >= 0);
  CHECK(r.l_gan_g >= 0);
  CHECK(r.l_recon_ae >= 0);
  CHECK(r.l_recon_g >= 0);
  CHECK(r.l_latent >= 0);
  CHECK(r.l_cls >= 0);

  const LossWeights zero{0, 0, 0};
  const LossReport rz = total_generator_objective(bundle, src, tgt, z, zero, kExact);
  CHECK(rz.total == doctest::Approx(rz.l_gan_g));

  // Linearity in alpha: d(total)/d(alpha) = l_recon_g.
  const LossWeights wp{0.06, 0.05, 0.01}, wm{0.04, 0.05, 0.01};
  const double tp = compose_total(r.l_gan_g, r.l_recon_g, r.l_latent, r.l_cls, wp);
  const double tm = compose_total(r.l_gan_g, r.l_recon_g, r.l_latent, r.l_cls, wm);
  CHECK((tp - tm) / 0.02 == doctest::Approx(r.l_recon_g).epsilon(1e-9));
}

TEST_CASE("batch mean property: batch loss equals mean of singletons") {
  const NetConfig cfg = tiny_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 60);
  std::vector<PointCloud> src;
  for (u64 i = 0; i < 6; ++i) {
    src.push_back(random_cloud(cfg.cloud_size, 700 + i, static_cast<int>(i % cfg.num_classes)));
  }
  const std::vector<ModeVector> z = random_z(6, cfg.d_z, 61);

  const double batch = loss_recon_generator(bundle, src, z, kExact);
  double singles = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::vector<PointCloud> one = {src[i]};
    std::vector<ModeVector> zz = {z[i]};
    singles += loss_recon_generator(bundle, one, zz, kExact);
  }
  singles /= static_cast<double>(src.size());
  CHECK(batch == doctest::Approx(singles).epsilon(1e-6));
}

TEST_CASE("generator objective parameter gradients match finite differences") {
  NetConfig cfg = tiny_config();
  cfg.latent_dim = 8;  // miniature latent keeps the FD sweep small
  Bundle<double> bundle = init_bundle<double>(cfg, 70);
  const PointCloud src = random_cloud(cfg.cloud_size, 71, 2);
  const std::vector<ModeVector> z = random_z(1, cfg.d_z, 72);
  const LossWeights w{0.7, 0.3, 0.2};

  auto value = [&]() {
    ad::Tape<double> t;
    BoundBundle<double> bb = bind_bundle(t, bundle);
    return t.scalar(
        generator_objective_element<double>(t, bb, cfg, src, z[0], w, kExact, nullptr));
  };

  std::vector<ad::Mat<double>> analytic;
  {
    ad::Tape<double> t;
    BoundBundle<double> bb = bind_bundle(t, bundle, {"generator"});
    ad::Tensor root =
        generator_objective_element<double>(t, bb, cfg, src, z[0], w, kExact, nullptr);
    t.backward(root);
    for (ad::Tensor node : bb.generator.nodes) analytic.push_back(t.grad(node));
  }

  const double h = 1e-5;
  ParamBlock<double>& gen = bundle.generator;
  int checked = 0;
  for (std::size_t pi = 0; pi < gen.params.size(); ++pi) {
    auto& mat = gen.params[pi].second;
    for (Eigen::Index i = 0; i < mat.rows(); ++i) {
      for (Eigen::Index j = 0; j < mat.cols(); ++j) {
        const double orig = mat(i, j);
        mat(i, j) = orig + h;
        const double fp = value();
        mat(i, j) = orig - h;
        const double fm = value();
        mat(i, j) = orig;
        const double fd = (fp - fm) / (2 * h);
        const double got = analytic[pi](i, j);
        CHECK(std::abs(got - fd) <= 1e-4 * std::max({1.0, std::abs(fd), std::abs(got)}));
        ++checked;
      }
    }
  }
  CHECK(checked > 200);
}
