#include <doctest.h>

#include <filesystem>

#include "naive_forward.hpp"
#include "pcda/losses.hpp"
#include "pcda/nets.hpp"
#include "pcda/nets_io.hpp"

using namespace pcda;

namespace {

NetConfig small_config() {
  NetConfig cfg;
  cfg.cloud_size = 64;
  cfg.d_z = 8;
  cfg.num_classes = 4;
  cfg.enc_embed1 = 8;
  cfg.enc_width = 16;
  cfg.enc_fuse = 32;
  cfg.enc_head = 16;
  cfg.dec_h1 = 16;
  cfg.dec_h2 = 32;
  cfg.gen_hidden = 16;
  cfg.disc_h1 = 16;
  cfg.disc_h2 = 8;
  cfg.me_c1 = 8;
  cfg.me_c2 = 16;
  cfg.me_c3 = 16;
  cfg.me_head = 8;
  cfg.vdec_h1 = 16;
  cfg.vdec_h2 = 32;
  cfg.cls_c1 = 8;
  cfg.cls_c2 = 16;
  cfg.cls_c3 = 32;
  cfg.cls_h1 = 16;
  cfg.cls_h2 = 8;
  return cfg;
}

// Miniature widths for finite-difference runs (spec: N = 16, width-8 blocks;
// the latent dimension shrinks with them to keep the probe cheap).
NetConfig miniature_config() {
  NetConfig cfg = small_config();
  cfg.cloud_size = 16;
  cfg.latent_dim = 8;
  cfg.d_z = 4;
  cfg.num_classes = 3;
  cfg.enc_embed1 = 8;
  cfg.enc_width = 8;
  cfg.enc_fuse = 8;
  cfg.enc_head = 8;
  cfg.dec_h1 = 8;
  cfg.dec_h2 = 8;
  cfg.gen_hidden = 8;
  cfg.disc_h1 = 8;
  cfg.disc_h2 = 8;
  cfg.me_c1 = 8;
  cfg.me_c2 = 8;
  cfg.me_c3 = 8;
  cfg.me_head = 8;
  cfg.vdec_h1 = 8;
  cfg.vdec_h2 = 8;
  cfg.cls_c1 = 8;
  cfg.cls_c2 = 8;
  cfg.cls_c3 = 8;
  cfg.cls_h1 = 8;
  cfg.cls_h2 = 8;
  return cfg;
}

PointCloud random_cloud(int n, u64 seed) {
  Rng rng(seed);
  PointCloud c;
  c.points.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) c.points(i, j) = rng.uniform(-1, 1);
  }
  return c;
}

PointCloud permuted(const PointCloud& c, u64 seed) {
  Rng rng(seed);
  const std::vector<int> perm = rng.permutation(c.size());
  PointCloud out = c;
  for (int i = 0; i < c.size(); ++i) {
    out.points.row(i) = c.points.row(perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

// FD harness: probe(tape, bound bundle) must bind exactly `block` trainable.
template <typename Probe>
void check_block_gradients(Bundle<double>& bundle, const std::string& block, Probe probe) {
  std::vector<ad::Mat<double>> analytic;
  {
    ad::Tape<double> tape;
    BoundBundle<double> bb = bind_bundle(tape, bundle, {block});
    ad::Tensor root = probe(tape, bb);
    tape.backward(root);
    const BoundBlock<double>* bound = nullptr;
    if (block == "encoder") bound = &bb.encoder;
    if (block == "decoder") bound = &bb.decoder;
    if (block == "generator") bound = &bb.generator;
    if (block == "discriminator") bound = &bb.discriminator;
    if (block == "mode_encoder") bound = &bb.mode_encoder;
    if (block == "vae_decoder") bound = &bb.vae_decoder;
    if (block == "classifier") bound = &bb.classifier;
    REQUIRE(bound != nullptr);
    for (ad::Tensor t : bound->nodes) analytic.push_back(tape.grad(t));
  }

  auto value = [&]() {
    ad::Tape<double> tape;
    BoundBundle<double> bb = bind_bundle(tape, bundle);
    return tape.scalar(probe(tape, bb));
  };

  const double h = 1e-5;
  ParamBlock<double>& pb = bundle.block(block);
  for (std::size_t pi = 0; pi < pb.params.size(); ++pi) {
    auto& mat = pb.params[pi].second;
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
      }
    }
  }
}

}  // namespace

TEST_CASE("encode: permutation invariance is exact and shapes hold") {
  const NetConfig cfg = small_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 11);
  const PointCloud cloud = random_cloud(cfg.cloud_size, 5);
  const LatentCode base = encode(bundle, cloud);
  CHECK(base.values.size() == kLatentDim);
  CHECK(base.values.allFinite());
  for (u64 p = 0; p < 20; ++p) {
    const LatentCode other = encode(bundle, permuted(cloud, 100 + p));
    CHECK((base.values - other.values).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("encode: wrong point count is invalid") {
  const Bundle<double> bundle = init_bundle<double>(small_config(), 1);
  CHECK_THROWS_AS(encode(bundle, random_cloud(10, 2)), ValidationError);
}

TEST_CASE("encode agrees with the straight-line reimplementation") {
  const NetConfig cfg = small_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 41);
  const PointCloud cloud = random_cloud(cfg.cloud_size, 6);
  const LatentCode ours = encode(bundle, cloud);

  const auto sorted = cloud_matrix_sorted<double>(cloud);
  const pcda_test::Grid ref = pcda_test::naive_encoder(bundle, pcda_test::to_grid(sorted));
  REQUIRE(static_cast<int>(ref[0].size()) == kLatentDim);
  for (int i = 0; i < kLatentDim; ++i) {
    CHECK(ours.values(i) ==
          doctest::Approx(ref[0][static_cast<std::size_t>(i)]).epsilon(1e-6));
  }
}

TEST_CASE("decode: zero code with zero final layer lands on the bias") {
  const NetConfig cfg = small_config();
  Bundle<double> bundle = init_bundle<double>(cfg, 3);
  bundle.decoder.at("fc3.w").setZero();
  LatentCode zero;
  zero.values = Eigen::VectorXd::Zero(kLatentDim);
  const PointCloud out = decode(bundle, zero);
  REQUIRE(out.size() == cfg.cloud_size);
  const auto& bias = bundle.decoder.at("fc3.b");
  for (int i = 0; i < out.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      CHECK(out.points(i, c) == doctest::Approx(bias(0, i * 3 + c)));
    }
  }
}

TEST_CASE("generator: zero final layer ignores its inputs") {
  const NetConfig cfg = small_config();
  Bundle<double> bundle = init_bundle<double>(cfg, 4);
  bundle.generator.at("fc3.w").setZero();
  Rng rng(9);
  LatentCode a, b;
  a.values = Eigen::VectorXd::NullaryExpr(kLatentDim, [&](Eigen::Index) { return rng.normal(); });
  b.values = Eigen::VectorXd::NullaryExpr(kLatentDim, [&](Eigen::Index) { return rng.normal(); });
  ModeVector za, zb;
  za.values = Eigen::VectorXd::NullaryExpr(cfg.d_z, [&](Eigen::Index) { return rng.normal(); });
  zb.values = Eigen::VectorXd::NullaryExpr(cfg.d_z, [&](Eigen::Index) { return rng.normal(); });
  const LatentCode ga = generate(bundle, a, za);
  const LatentCode gb = generate(bundle, b, zb);
  CHECK((ga.values - gb.values).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(ga.values.size() == kLatentDim);
}

TEST_CASE("discriminator: zero parameters score zero") {
  const NetConfig cfg = small_config();
  Bundle<double> bundle = init_bundle<double>(cfg, 5);
  for (auto& [k, v] : bundle.discriminator.params) v.setZero();
  Rng rng(10);
  LatentCode code;
  code.values =
      Eigen::VectorXd::NullaryExpr(kLatentDim, [&](Eigen::Index) { return rng.normal(); });
  CHECK(discriminate(bundle, code) == doctest::Approx(0.0));
}

TEST_CASE("mode_encode: permutation invariance, shapes, seeded reparameterization") {
  const NetConfig cfg = small_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 6);
  const PointCloud cloud = random_cloud(cfg.cloud_size, 7);
  const auto [mu, logvar] = mode_encode(bundle, cloud);
  CHECK(mu.values.size() == cfg.d_z);
  CHECK(logvar.values.size() == cfg.d_z);
  for (u64 p = 0; p < 20; ++p) {
    const auto [mu2, lv2] = mode_encode(bundle, permuted(cloud, 300 + p));
    CHECK((mu.values - mu2.values).cwiseAbs().maxCoeff() == 0.0);
    CHECK((logvar.values - lv2.values).cwiseAbs().maxCoeff() == 0.0);
  }
  const ModeVector s1 = reparameterize(mu, logvar, 77);
  const ModeVector s2 = reparameterize(mu, logvar, 77);
  CHECK((s1.values - s2.values).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("classify: simplex contract and permutation invariance") {
  const NetConfig cfg = small_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 8);
  const PointCloud cloud = random_cloud(cfg.cloud_size, 9);
  const ClassProbs probs = classify(bundle, cloud);
  REQUIRE(probs.probs.size() == cfg.num_classes);
  CHECK(probs.probs.minCoeff() >= 0.0);
  CHECK(probs.probs.sum() == doctest::Approx(1.0).epsilon(1e-6));
  for (u64 p = 0; p < 20; ++p) {
    const ClassProbs other = classify(bundle, permuted(cloud, 500 + p));
    CHECK((probs.probs - other.probs).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("finite outputs for finite inputs across blocks") {
  const NetConfig cfg = small_config();
  const Bundle<double> bundle = init_bundle<double>(cfg, 12);
  CHECK(bundle_finite(bundle));
  const PointCloud cloud = random_cloud(cfg.cloud_size, 13);
  const LatentCode code = encode(bundle, cloud);
  CHECK(code.values.allFinite());
  const PointCloud dec = decode(bundle, code);
  CHECK(dec.points.allFinite());
  Rng rng(14);
  ModeVector z;
  z.values = Eigen::VectorXd::NullaryExpr(cfg.d_z, [&](Eigen::Index) { return rng.normal(); });
  CHECK(generate(bundle, code, z).values.allFinite());
  CHECK(std::isfinite(discriminate(bundle, code)));
}

TEST_CASE("gradient checks: all six blocks at miniature widths") {
  const NetConfig cfg = miniature_config();
  Bundle<double> bundle = init_bundle<double>(cfg, 21);
  const PointCloud cloud = random_cloud(cfg.cloud_size, 22);
  Rng rng(23);
  ad::Mat<double> zrow(1, cfg.d_z);
  for (int d = 0; d < cfg.d_z; ++d) zrow(0, d) = rng.normal();
  ad::Mat<double> latent_row(1, cfg.latent_dim);
  for (int d = 0; d < cfg.latent_dim; ++d) latent_row(0, d) = rng.normal();

  SUBCASE("encoder") {
    check_block_gradients(bundle, "encoder", [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
      return t.sum(t.square(
          encoder_forward(t, bb.encoder, cfg, t.constant(cloud_matrix_sorted<double>(cloud)))));
    });
  }
  SUBCASE("decoder") {
    check_block_gradients(bundle, "decoder", [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
      return t.sum(t.square(decoder_forward(t, bb.decoder, cfg, t.constant(latent_row))));
    });
  }
  SUBCASE("generator") {
    check_block_gradients(bundle, "generator", [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
      return t.sum(t.square(
          generator_forward(t, bb.generator, cfg, t.constant(latent_row), t.constant(zrow))));
    });
  }
  SUBCASE("discriminator") {
    check_block_gradients(bundle, "discriminator",
                          [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
                            return t.square(discriminator_forward(t, bb.discriminator, cfg,
                                                                  t.constant(latent_row)));
                          });
  }
  SUBCASE("mode_encoder") {
    check_block_gradients(bundle, "mode_encoder",
                          [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
                            auto [mu, logvar] = mode_encoder_forward(
                                t, bb.mode_encoder, cfg,
                                t.constant(cloud_matrix_sorted<double>(cloud)));
                            return t.add(t.sum(t.square(mu)), t.sum(t.square(logvar)));
                          });
  }
  SUBCASE("vae_decoder") {
    check_block_gradients(bundle, "vae_decoder",
                          [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
                            return t.sum(t.square(
                                vae_decoder_forward(t, bb.vae_decoder, cfg, t.constant(zrow))));
                          });
  }
  SUBCASE("classifier") {
    check_block_gradients(bundle, "classifier", [&](ad::Tape<double>& t, BoundBundle<double>& bb) {
      ad::Tensor logits = classifier_logits_forward(
          t, bb.classifier, cfg, t.constant(cloud_matrix_sorted<double>(cloud)));
      return t.nll_index(t.log_softmax_rows(logits), 1);
    });
  }
}

TEST_CASE("checkpoint round trip preserves parameters, meta and shapes") {
  const NetConfig cfg = small_config();
  Bundle<float> bundle = init_bundle<float>(cfg, 31);
  bundle.meta.record_stage("ae");
  bundle.meta.record_stage("vae");
  bundle.meta.epoch = 12;
  bundle.meta.config_digest = "deadbeef";
  bundle.frozen["encoder"] = true;

  const auto dir = std::filesystem::temp_directory_path() / "pcda_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(bundle, dir);
  const Bundle<float> back = load_checkpoint<float>(dir);

  CHECK(back.meta.stage == "vae");
  CHECK(back.meta.epoch == 12);
  CHECK(back.meta.config_digest == "deadbeef");
  CHECK(back.meta.has_stage("ae"));
  CHECK(back.is_frozen("encoder"));
  for (const auto& name : block_names()) {
    const auto& a = bundle.block(name);
    const auto& b = back.block(name);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      CHECK(a.params[i].first == b.params[i].first);
      CHECK((a.params[i].second - b.params[i].second).cwiseAbs().maxCoeff() == 0.0f);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects truncated arrays") {
  const NetConfig cfg = small_config();
  Bundle<float> bundle = init_bundle<float>(cfg, 32);
  const auto dir = std::filesystem::temp_directory_path() / "pcda_ckpt_trunc";
  std::filesystem::remove_all(dir);
  save_checkpoint(bundle, dir);
  std::filesystem::resize_file(dir / "encoder.embed1.w.bin", 4);
  CHECK_THROWS_AS(load_checkpoint<float>(dir), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("seeded initialization is reproducible and seed-sensitive") {
  const NetConfig cfg = small_config();
  const Bundle<double> a = init_bundle<double>(cfg, 77);
  const Bundle<double> b = init_bundle<double>(cfg, 77);
  const Bundle<double> c = init_bundle<double>(cfg, 78);
  CHECK((a.encoder.at("embed1.w") - b.encoder.at("embed1.w")).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.encoder.at("embed1.w") - c.encoder.at("embed1.w")).cwiseAbs().maxCoeff() > 0.0);
}
