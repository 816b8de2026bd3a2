#include "pcda/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "pcda/nets_io.hpp"
#include "pcda/parallel.hpp"

namespace pcda {

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;
using FMat = ad::Mat<float>;

// ---- config ------------------------------------------------------------------

namespace {

struct Table1Row {
  const char* scenario;
  const char* source;
  const char* target;
  double alpha, beta, gamma;
};

constexpr Table1Row kScenarioWeights[] = {
    {"M-S", "M", "S", 0.05, 0.05, 0.01},  {"M-S*", "M", "S*", 5.0, 5.0, 0.01},
    {"S-S*", "S", "S*", 10.0, 1.0, 0.01}, {"S*-S", "S*", "S", 0.1, 0.1, 0.01},
    {"S-M", "S", "M", 0.01, 0.01, 0.01},  {"S*-M", "S*", "M", 0.05, 0.05, 0.01},
};

const Table1Row* find_scenario_row(const std::string& name) {
  for (const auto& row : kScenarioWeights) {
    if (name == row.scenario) return &row;
  }
  return nullptr;
}

void schedule_to_json(njson& j, const StageSchedule& s) {
  j = njson{{"learning_rate", s.learning_rate},
            {"adam_beta1", s.adam_beta1},
            {"epochs", s.epochs},
            {"batch_size", s.batch_size},
            {"weight_decay", s.weight_decay}};
}

void schedule_from_json(const njson& j, StageSchedule& s) {
  if (j.contains("learning_rate")) s.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("adam_beta1")) s.adam_beta1 = j.at("adam_beta1").get<double>();
  if (j.contains("epochs")) s.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<int>();
  if (j.contains("weight_decay")) s.weight_decay = j.at("weight_decay").get<double>();
}

void deform_to_json(njson& j, const ToyDeformation& d) {
  j = njson{{"density_bias", d.density_bias},
            {"part_dropout", d.part_dropout},
            {"jitter_sigma", d.jitter_sigma}};
}

void deform_from_json(const njson& j, ToyDeformation& d) {
  if (j.contains("density_bias")) d.density_bias = j.at("density_bias").get<double>();
  if (j.contains("part_dropout")) d.part_dropout = j.at("part_dropout").get<double>();
  if (j.contains("jitter_sigma")) d.jitter_sigma = j.at("jitter_sigma").get<double>();
}

}  // namespace

void AdaptationConfig::validate() const {
  weights.validate();
  for (const StageSchedule* s : {&ae, &vae, &classifier, &gan, &downstream}) {
    if (s->learning_rate <= 0 || s->batch_size <= 0 || s->epochs < 0 || s->adam_beta1 < 0 ||
        s->adam_beta1 >= 1) {
      throw ValidationError("invalid stage schedule");
    }
  }
  if (nets.cloud_size <= 0 || nets.d_z <= 0 || nets.num_classes <= 1) {
    throw ValidationError("invalid net configuration");
  }
  if (nets.latent_dim != kLatentDim) {
    throw ValidationError("latent dimension is fixed at " + std::to_string(kLatentDim));
  }
  if (samples_per_object <= 0) {
    throw ValidationError("samples_per_object must be positive");
  }
  if (ae_train_data != "both" && ae_train_data != "source") {
    throw ValidationError("ae_train_data must be 'both' or 'source'");
  }
  if (workers < 1) throw ValidationError("workers must be >= 1");
  if (emd.epsilon <= 0) throw ValidationError("emd epsilon must be positive");
  if (const Table1Row* row = find_scenario_row(scenario)) {
    if (weights.alpha != row->alpha || weights.beta != row->beta || weights.gamma != row->gamma) {
      throw ValidationError("scenario " + scenario +
                            " requires its published importance weights");
    }
  }
}

njson config_to_json(const AdaptationConfig& cfg) {
  njson j;
  j["scenario"] = cfg.scenario;
  j["source_domain"] = cfg.source_domain;
  j["target_domain"] = cfg.target_domain;
  j["weights"] = {{"alpha", cfg.weights.alpha},
                  {"beta", cfg.weights.beta},
                  {"gamma", cfg.weights.gamma}};
  njson stages;
  schedule_to_json(stages["ae"], cfg.ae);
  schedule_to_json(stages["vae"], cfg.vae);
  schedule_to_json(stages["classifier"], cfg.classifier);
  schedule_to_json(stages["gan"], cfg.gan);
  schedule_to_json(stages["downstream"], cfg.downstream);
  j["stages"] = stages;
  j["ablation"] = {
      {"use_latent_recon", cfg.ablation.use_latent_recon},
      {"use_classifier_disc", cfg.ablation.use_classifier_disc},
      {"fake_term", cfg.ablation.fake_term == FakeTerm::generated ? "generated" : "raw_source"}};
  j["seed"] = cfg.seed;
  j["nets"] = cfg.nets;
  j["emd"] = {{"solver", cfg.emd.solver == EmdOptions::Solver::exact ? "exact" : "approx"},
              {"epsilon", cfg.emd.epsilon}};
  j["kl_weight"] = cfg.kl_weight;
  j["samples_per_object"] = cfg.samples_per_object;
  j["ae_train_data"] = cfg.ae_train_data;
  j["update_classifier_in_gan"] = cfg.update_classifier_in_gan;
  j["update_mode_encoder_in_gan"] = cfg.update_mode_encoder_in_gan;
  j["train_supervised_bound"] = cfg.train_supervised_bound;
  j["workers"] = cfg.workers;
  njson toy;
  toy["enabled"] = cfg.toy.enabled;
  toy["per_class"] = cfg.toy.per_class;
  deform_to_json(toy["source_deform"], cfg.toy.source_deform);
  deform_to_json(toy["target_deform"], cfg.toy.target_deform);
  j["toy"] = toy;
  return j;
}

AdaptationConfig config_from_json(const njson& j) {
  AdaptationConfig cfg;
  if (j.contains("scenario")) cfg.scenario = j.at("scenario").get<std::string>();
  if (j.contains("source_domain")) cfg.source_domain = j.at("source_domain").get<std::string>();
  if (j.contains("target_domain")) cfg.target_domain = j.at("target_domain").get<std::string>();
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    if (w.contains("alpha")) cfg.weights.alpha = w.at("alpha").get<double>();
    if (w.contains("beta")) cfg.weights.beta = w.at("beta").get<double>();
    if (w.contains("gamma")) cfg.weights.gamma = w.at("gamma").get<double>();
  }
  if (j.contains("stages")) {
    const auto& s = j.at("stages");
    if (s.contains("ae")) schedule_from_json(s.at("ae"), cfg.ae);
    if (s.contains("vae")) schedule_from_json(s.at("vae"), cfg.vae);
    if (s.contains("classifier")) schedule_from_json(s.at("classifier"), cfg.classifier);
    if (s.contains("gan")) schedule_from_json(s.at("gan"), cfg.gan);
    if (s.contains("downstream")) schedule_from_json(s.at("downstream"), cfg.downstream);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    if (a.contains("use_latent_recon")) {
      cfg.ablation.use_latent_recon = a.at("use_latent_recon").get<bool>();
    }
    if (a.contains("use_classifier_disc")) {
      cfg.ablation.use_classifier_disc = a.at("use_classifier_disc").get<bool>();
    }
    if (a.contains("fake_term")) {
      const std::string f = a.at("fake_term").get<std::string>();
      if (f == "generated") {
        cfg.ablation.fake_term = FakeTerm::generated;
      } else if (f == "raw_source") {
        cfg.ablation.fake_term = FakeTerm::raw_source;
      } else {
        throw ValidationError("unknown fake_term " + f);
      }
    }
  }
  if (j.contains("seed")) cfg.seed = j.at("seed").get<u64>();
  if (j.contains("nets")) cfg.nets = j.at("nets").get<NetConfig>();
  if (j.contains("emd")) {
    const auto& e = j.at("emd");
    if (e.contains("solver")) {
      const std::string s = e.at("solver").get<std::string>();
      if (s == "exact") {
        cfg.emd.solver = EmdOptions::Solver::exact;
      } else if (s == "approx") {
        cfg.emd.solver = EmdOptions::Solver::approx;
      } else {
        throw ValidationError("unknown emd solver " + s);
      }
    }
    if (e.contains("epsilon")) cfg.emd.epsilon = e.at("epsilon").get<double>();
  }
  if (j.contains("kl_weight")) cfg.kl_weight = j.at("kl_weight").get<double>();
  if (j.contains("samples_per_object")) {
    cfg.samples_per_object = j.at("samples_per_object").get<int>();
  }
  if (j.contains("ae_train_data")) cfg.ae_train_data = j.at("ae_train_data").get<std::string>();
  if (j.contains("update_classifier_in_gan")) {
    cfg.update_classifier_in_gan = j.at("update_classifier_in_gan").get<bool>();
  }
  if (j.contains("update_mode_encoder_in_gan")) {
    cfg.update_mode_encoder_in_gan = j.at("update_mode_encoder_in_gan").get<bool>();
  }
  if (j.contains("train_supervised_bound")) {
    cfg.train_supervised_bound = j.at("train_supervised_bound").get<bool>();
  }
  if (j.contains("workers")) cfg.workers = j.at("workers").get<int>();
  if (j.contains("toy")) {
    const auto& t = j.at("toy");
    if (t.contains("enabled")) cfg.toy.enabled = t.at("enabled").get<bool>();
    if (t.contains("per_class")) cfg.toy.per_class = t.at("per_class").get<int>();
    if (t.contains("source_deform")) deform_from_json(t.at("source_deform"), cfg.toy.source_deform);
    if (t.contains("target_deform")) deform_from_json(t.at("target_deform"), cfg.toy.target_deform);
  }
  return cfg;
}

std::string AdaptationConfig::digest() const {
  return hex_digest(fnv1a64(config_to_json(*this).dump()));
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& row : kScenarioWeights) names.push_back(row.scenario);
  names.push_back("toy-gap");
  names.push_back("toy-nogap");
  names.push_back("toy-smoke");
  return names;
}

namespace {

NetConfig toy_net_config() {
  NetConfig n;
  n.cloud_size = 256;
  n.d_z = 16;
  n.num_classes = 4;
  n.enc_embed1 = 32;
  n.enc_width = 48;
  n.enc_fuse = 192;
  n.enc_head = 128;
  n.dec_h1 = 256;
  n.dec_h2 = 512;
  n.gen_hidden = 128;
  n.disc_h1 = 128;
  n.disc_h2 = 64;
  n.me_c1 = 32;
  n.me_c2 = 64;
  n.me_c3 = 128;
  n.me_head = 64;
  n.vdec_h1 = 256;
  n.vdec_h2 = 512;
  n.cls_c1 = 32;
  n.cls_c2 = 64;
  n.cls_c3 = 256;
  n.cls_h1 = 128;
  n.cls_h2 = 64;
  return n;
}

AdaptationConfig toy_base_config() {
  AdaptationConfig cfg;
  cfg.source_domain = "toy_source";
  cfg.target_domain = "toy_target";
  cfg.nets = toy_net_config();
  cfg.weights = LossWeights{2.0, 0.1, 0.3};
  cfg.ae = StageSchedule{5e-4, 0.5, 25, 32, 0.0};
  cfg.vae = StageSchedule{5e-4, 0.9, 15, 200, 0.0};
  cfg.classifier = StageSchedule{1e-4, 0.9, 30, 64, 0.0};
  cfg.gan = StageSchedule{5e-4, 0.5, 25, 50, 0.0};
  cfg.downstream = StageSchedule{1e-4, 0.9, 30, 64, 5e-4};
  cfg.kl_weight = 1.0;
  cfg.emd = EmdOptions{EmdOptions::Solver::approx, 1e-2};
  cfg.toy.enabled = true;
  cfg.toy.per_class = 200;
  cfg.toy.source_deform = ToyDeformation{0.0, 0.0, 0.0};
  cfg.toy.target_deform = ToyDeformation{2.5, 0.35, 0.01};
  return cfg;
}

}  // namespace

AdaptationConfig preset_config(const std::string& name) {
  if (const Table1Row* row = find_scenario_row(name)) {
    AdaptationConfig cfg;
    cfg.scenario = row->scenario;
    cfg.source_domain = row->source;
    cfg.target_domain = row->target;
    cfg.weights = LossWeights{row->alpha, row->beta, row->gamma};
    cfg.train_supervised_bound = true;
    return cfg;
  }
  if (name == "toy-gap") {
    AdaptationConfig cfg = toy_base_config();
    cfg.scenario = "toy-gap";
    return cfg;
  }
  if (name == "toy-nogap") {
    AdaptationConfig cfg = toy_base_config();
    cfg.scenario = "toy-nogap";
    cfg.toy.target_deform = cfg.toy.source_deform;
    return cfg;
  }
  if (name == "toy-smoke") {
    AdaptationConfig cfg = toy_base_config();
    cfg.scenario = "toy-smoke";
    cfg.toy.per_class = 8;
    cfg.nets.cloud_size = 48;
    cfg.nets.enc_embed1 = 8;
    cfg.nets.enc_width = 16;
    cfg.nets.enc_fuse = 32;
    cfg.nets.enc_head = 32;
    cfg.nets.dec_h1 = 32;
    cfg.nets.dec_h2 = 64;
    cfg.nets.gen_hidden = 32;
    cfg.nets.disc_h1 = 32;
    cfg.nets.disc_h2 = 16;
    cfg.nets.me_c1 = 8;
    cfg.nets.me_c2 = 16;
    cfg.nets.me_c3 = 32;
    cfg.nets.me_head = 16;
    cfg.nets.cls_c1 = 8;
    cfg.nets.cls_c2 = 16;
    cfg.nets.cls_c3 = 32;
    cfg.nets.cls_h1 = 32;
    cfg.nets.cls_h2 = 16;
    cfg.nets.d_z = 8;
    cfg.ae = StageSchedule{5e-4, 0.5, 2, 16, 0.0};
    cfg.vae = StageSchedule{5e-4, 0.9, 2, 16, 0.0};
    cfg.classifier = StageSchedule{1e-3, 0.9, 4, 16, 0.0};
    cfg.gan = StageSchedule{5e-4, 0.5, 2, 16, 0.0};
    cfg.downstream = StageSchedule{1e-3, 0.9, 4, 16, 5e-4};
    return cfg;
  }
  throw ValidationError("unknown preset scenario " + name);
}

void apply_override(njson& doc, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) {
    throw ValidationError("override must look like key.path=value: " + spec);
  }
  const std::string path = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  std::vector<std::string> keys;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) keys.push_back(part);
  if (keys.empty()) throw ValidationError("empty override path: " + spec);

  njson* node = &doc;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i])) {
      throw ValidationError("override path not in config: " + path);
    }
    node = &(*node)[keys[i]];
  }
  if (!node->contains(keys.back())) {
    throw ValidationError("override path not in config: " + path);
  }
  njson parsed = njson::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) {
    (*node)[keys.back()] = value;  // plain string
  } else {
    (*node)[keys.back()] = parsed;
  }
}

// ---- optimizer -----------------------------------------------------------------

namespace {

/// Adam with optional L2 weight decay folded into the gradient. One instance
/// owns the moment estimates for the blocks it was attached to, in order.
class Adam {
 public:
  Adam(double lr, double beta1, double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), weight_decay_(weight_decay) {}

  void attach(ParamBlock<float>& block) {
    blocks_.push_back(&block);
    auto& m = m_.emplace_back();
    auto& v = v_.emplace_back();
    for (const auto& [k, p] : block.params) {
      m.push_back(FMat::Zero(p.rows(), p.cols()));
      v.push_back(FMat::Zero(p.rows(), p.cols()));
    }
  }

  std::size_t block_count() const { return blocks_.size(); }

  /// grads[i][j] matches blocks_[i].params[j]. Applies one update.
  void step(const std::vector<std::vector<FMat>>& grads) {
    ++t_;
    const float b1 = static_cast<float>(beta1_);
    const float b2 = 0.999f;
    const float eps = 1e-8f;
    const float corr1 = 1.0f - std::pow(b1, static_cast<float>(t_));
    const float corr2 = 1.0f - std::pow(b2, static_cast<float>(t_));
    const float lr = static_cast<float>(lr_);
    const float wd = static_cast<float>(weight_decay_);
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      auto& params = blocks_[bi]->params;
      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        FMat g = grads[bi][pi];
        if (wd != 0.0f) g += wd * params[pi].second;
        FMat& m = m_[bi][pi];
        FMat& v = v_[bi][pi];
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
        const FMat mh = m / corr1;
        const FMat vh = v / corr2;
        params[pi].second -=
            lr * mh.cwiseQuotient(vh.cwiseSqrt() + FMat::Constant(g.rows(), g.cols(), eps));
      }
    }
  }

 private:
  double lr_, beta1_, weight_decay_;
  long t_ = 0;
  std::vector<ParamBlock<float>*> blocks_;
  std::vector<std::vector<FMat>> m_, v_;
};

// ---- batch gradient plumbing ----------------------------------------------------

const BoundBlock<float>& bound_of(const BoundBundle<float>& bb, const std::string& name) {
  if (name == "encoder") return bb.encoder;
  if (name == "decoder") return bb.decoder;
  if (name == "generator") return bb.generator;
  if (name == "discriminator") return bb.discriminator;
  if (name == "mode_encoder") return bb.mode_encoder;
  if (name == "vae_decoder") return bb.vae_decoder;
  if (name == "classifier") return bb.classifier;
  throw ValidationError("unknown block " + name);
}

using GradSet = std::vector<std::vector<FMat>>;  // [block][param]

GradSet zero_grads(const TrainBundle& bundle, const std::vector<std::string>& names) {
  GradSet g;
  for (const auto& name : names) {
    auto& block = g.emplace_back();
    for (const auto& [k, p] : bundle.block(name).params) {
      block.push_back(FMat::Zero(p.rows(), p.cols()));
    }
  }
  return g;
}

GradSet extract_grads(ad::Tape<float>& tape, const BoundBundle<float>& bb,
                      const std::vector<std::string>& names) {
  GradSet g;
  for (const auto& name : names) {
    const BoundBlock<float>& bound = bound_of(bb, name);
    auto& block = g.emplace_back();
    block.reserve(bound.nodes.size());
    for (ad::Tensor t : bound.nodes) block.push_back(tape.grad(t));
  }
  return g;
}

void add_scaled(GradSet& into, const GradSet& from, float scale) {
  for (std::size_t b = 0; b < into.size(); ++b) {
    for (std::size_t p = 0; p < into[b].size(); ++p) into[b][p] += scale * from[b][p];
  }
}

GradSet copy_params(const TrainBundle& bundle, const std::vector<std::string>& names) {
  GradSet g;
  for (const auto& name : names) {
    auto& block = g.emplace_back();
    for (const auto& [k, p] : bundle.block(name).params) block.push_back(p);
  }
  return g;
}

void restore_params(TrainBundle& bundle, const std::vector<std::string>& names,
                    const GradSet& snapshot) {
  for (std::size_t b = 0; b < names.size(); ++b) {
    auto& params = bundle.block(names[b]).params;
    for (std::size_t p = 0; p < params.size(); ++p) params[p].second = snapshot[b][p];
  }
}

struct ElementOut {
  GradSet grads;
  std::vector<double> values;
};

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) {
    fs::create_directories(path.parent_path());
    out_.open(path);
    if (!out_) throw ValidationError("cannot open log " + path.string());
  }
  void write(const njson& record) { out_ << record.dump() << "\n"; }

 private:
  std::ofstream out_;
};

}  // namespace

// ---- stages ---------------------------------------------------------------------

StageResult train_autoencoder(const AdaptationConfig& cfg, const std::vector<PointCloud>& data,
                              TrainBundle& bundle, const fs::path& out_dir) {
  if (data.empty()) throw ValidationError("train_autoencoder: no training data");
  const StageSchedule& sch = cfg.ae;
  const std::vector<std::string> trainable = {"encoder", "decoder"};
  Adam opt(sch.learning_rate, sch.adam_beta1, sch.weight_decay);
  opt.attach(bundle.encoder);
  opt.attach(bundle.decoder);
  BatchStream stream(static_cast<int>(data.size()), sch.batch_size,
                     derive_seed(cfg.seed, "ae/batch"));
  JsonlLog log(out_dir / "logs" / "ae.jsonl");
  Timer wall;
  GradSet last_good = copy_params(bundle, trainable);
  StageResult result;
  int step = 0;

  for (int epoch = 0; epoch < sch.epochs; ++epoch) {
    double epoch_sum = 0;
    int epoch_n = 0;
    for (int s = 0; s < stream.batches_per_epoch(); ++s) {
      const Batch batch = stream.next();
      const float inv = 1.0f / static_cast<float>(batch.indices.size());
      GradSet master = zero_grads(bundle, trainable);
      double loss_sum = 0;
      ordered_parallel_for<ElementOut>(
          batch.indices.size(), static_cast<unsigned>(cfg.workers),
          [&](std::size_t i) {
            ad::Tape<float> tape;
            BoundBundle<float> bb = bind_bundle(tape, bundle, trainable);
            ad::Tensor loss = ae_recon_element(tape, bb, cfg.nets,
                                               data[static_cast<std::size_t>(
                                                   batch.indices[i])],
                                               cfg.emd);
            tape.backward(loss);
            return ElementOut{extract_grads(tape, bb, trainable),
                              {static_cast<double>(tape.scalar(loss))}};
          },
          [&](std::size_t, ElementOut&& out) {
            add_scaled(master, out.grads, inv);
            loss_sum += out.values[0];
          });
      const double batch_loss = loss_sum / static_cast<double>(batch.indices.size());
      if (!std::isfinite(batch_loss)) {
        restore_params(bundle, trainable, last_good);
        bundle.meta.stage = "ae_aborted";
        save_checkpoint(bundle, out_dir / "checkpoints" / "ae");
        throw TrainingAbort("train_autoencoder: non-finite loss at step " +
                            std::to_string(step) + "; last finite checkpoint retained");
      }
      last_good = copy_params(bundle, trainable);
      opt.step(master);
      log.write({{"step", step}, {"epoch", epoch}, {"stage", "ae"},
                 {"l_recon_ae", batch_loss}, {"wall_s", wall.seconds()}});
      epoch_sum += batch_loss;
      ++epoch_n;
      ++step;
    }
    if (epoch_n > 0) {
      result.epoch_curve.push_back({{"l_recon_ae", epoch_sum / epoch_n}});
    }
  }

  // Full-pass evaluation defines the logged final loss; reloading the
  // checkpoint must reproduce it.
  {
    double total = 0;
    ordered_parallel_for<double>(
        data.size(), static_cast<unsigned>(cfg.workers),
        [&](std::size_t i) {
          ad::Tape<float> tape;
          BoundBundle<float> bb = bind_bundle(tape, bundle);
          return static_cast<double>(
              tape.scalar(ae_recon_element(tape, bb, cfg.nets, data[i], cfg.emd)));
        },
        [&](std::size_t, double&& v) { total += v; });
    result.final_losses["l_recon_ae"] = total / static_cast<double>(data.size());
  }

  bundle.meta.record_stage("ae");
  bundle.meta.epoch = sch.epochs;
  bundle.meta.config_digest = cfg.digest();
  result.checkpoint = out_dir / "checkpoints" / "ae";
  save_checkpoint(bundle, result.checkpoint);
  result.wall_seconds = wall.seconds();
  return result;
}

StageResult train_vae(const AdaptationConfig& cfg, const std::vector<PointCloud>& data,
                      TrainBundle& bundle, const fs::path& out_dir) {
  if (data.empty()) throw ValidationError("train_vae: no training data");
  const StageSchedule& sch = cfg.vae;
  const std::vector<std::string> trainable = {"mode_encoder", "vae_decoder"};
  Adam opt(sch.learning_rate, sch.adam_beta1, sch.weight_decay);
  opt.attach(bundle.mode_encoder);
  opt.attach(bundle.vae_decoder);
  BatchStream stream(static_cast<int>(data.size()), sch.batch_size,
                     derive_seed(cfg.seed, "vae/batch"));
  JsonlLog log(out_dir / "logs" / "vae.jsonl");
  Timer wall;
  GradSet last_good = copy_params(bundle, trainable);
  StageResult result;
  int step = 0;

  for (int epoch = 0; epoch < sch.epochs; ++epoch) {
    double recon_sum = 0, kl_sum = 0;
    int epoch_n = 0;
    for (int s = 0; s < stream.batches_per_epoch(); ++s) {
      const Batch batch = stream.next();
      const float inv = 1.0f / static_cast<float>(batch.indices.size());
      const u64 noise_base = static_cast<u64>(step) * static_cast<u64>(sch.batch_size);
      GradSet master = zero_grads(bundle, trainable);
      double recon_batch = 0, kl_batch = 0;
      ordered_parallel_for<ElementOut>(
          batch.indices.size(), static_cast<unsigned>(cfg.workers),
          [&](std::size_t i) {
            Rng noise_rng(derive_seed(cfg.seed, "vae/eps", noise_base + i));
            Eigen::VectorXd noise(cfg.nets.d_z);
            for (int d = 0; d < cfg.nets.d_z; ++d) noise(d) = noise_rng.normal();
            ad::Tape<float> tape;
            BoundBundle<float> bb = bind_bundle(tape, bundle, trainable);
            float recon = 0, kl = 0;
            ad::Tensor loss = vae_objective_element(
                tape, bb, cfg.nets, data[static_cast<std::size_t>(batch.indices[i])], noise,
                cfg.kl_weight, cfg.emd, &recon, &kl);
            tape.backward(loss);
            return ElementOut{extract_grads(tape, bb, trainable),
                              {static_cast<double>(recon), static_cast<double>(kl)}};
          },
          [&](std::size_t, ElementOut&& out) {
            add_scaled(master, out.grads, inv);
            recon_batch += out.values[0];
            kl_batch += out.values[1];
          });
      recon_batch /= static_cast<double>(batch.indices.size());
      kl_batch /= static_cast<double>(batch.indices.size());
      const double batch_loss = recon_batch + cfg.kl_weight * kl_batch;
      if (!std::isfinite(batch_loss)) {
        restore_params(bundle, trainable, last_good);
        bundle.meta.stage = "vae_aborted";
        save_checkpoint(bundle, out_dir / "checkpoints" / "vae");
        throw TrainingAbort("train_vae: non-finite loss at step " + std::to_string(step) +
                            "; last finite checkpoint retained");
      }
      last_good = copy_params(bundle, trainable);
      opt.step(master);
      log.write({{"step", step}, {"epoch", epoch}, {"stage", "vae"},
                 {"l_recon", recon_batch}, {"l_kl", kl_batch}, {"wall_s", wall.seconds()}});
      recon_sum += recon_batch;
      kl_sum += kl_batch;
      ++epoch_n;
      ++step;
    }
    if (epoch_n > 0) {
      result.epoch_curve.push_back(
          {{"l_recon", recon_sum / epoch_n}, {"l_kl", kl_sum / epoch_n}});
    }
  }

  {
    double recon_total = 0, kl_total = 0;
    ordered_parallel_for<std::pair<double, double>>(
        data.size(), static_cast<unsigned>(cfg.workers),
        [&](std::size_t i) {
          Rng noise_rng(derive_seed(cfg.seed, "vae/eval-eps", i));
          Eigen::VectorXd noise(cfg.nets.d_z);
          for (int d = 0; d < cfg.nets.d_z; ++d) noise(d) = noise_rng.normal();
          ad::Tape<float> tape;
          BoundBundle<float> bb = bind_bundle(tape, bundle);
          float recon = 0, kl = 0;
          vae_objective_element(tape, bb, cfg.nets, data[i], noise, cfg.kl_weight, cfg.emd,
                                &recon, &kl);
          return std::pair<double, double>(recon, kl);
        },
        [&](std::size_t, std::pair<double, double>&& v) {
          recon_total += v.first;
          kl_total += v.second;
        });
    result.final_losses["l_recon"] = recon_total / static_cast<double>(data.size());
    result.final_losses["l_kl"] = kl_total / static_cast<double>(data.size());
  }

  bundle.meta.record_stage("vae");
  bundle.meta.epoch = sch.epochs;
  bundle.meta.config_digest = cfg.digest();
  result.checkpoint = out_dir / "checkpoints" / "vae";
  save_checkpoint(bundle, result.checkpoint);
  result.wall_seconds = wall.seconds();
  return result;
}

StageResult train_classifier(const AdaptationConfig& cfg, const std::vector<PointCloud>& data,
                             const std::string& tag, TrainBundle& bundle,
                             const fs::path& out_dir) {
  if (data.empty()) throw ValidationError("train_classifier: no training data");
  if (tag != "source_pretrain" && tag != "downstream_synthetic" && tag != "supervised_bound") {
    throw ValidationError("train_classifier: unknown tag " + tag);
  }
  for (const PointCloud& c : data) {
    if (!c.label.has_value()) {
      throw ValidationError("train_classifier: unlabeled cloud in training data");
    }
  }
  const StageSchedule& sch = tag == "source_pretrain" ? cfg.classifier : cfg.downstream;
  const std::vector<std::string> trainable = {"classifier"};
  Adam opt(sch.learning_rate, sch.adam_beta1, sch.weight_decay);
  opt.attach(bundle.classifier);
  BatchStream stream(static_cast<int>(data.size()), sch.batch_size,
                     derive_seed(cfg.seed, "cls/" + tag));
  JsonlLog log(out_dir / "logs" / (tag + ".jsonl"));
  Timer wall;
  GradSet last_good = copy_params(bundle, trainable);
  StageResult result;
  int step = 0;

  for (int epoch = 0; epoch < sch.epochs; ++epoch) {
    double epoch_sum = 0;
    int epoch_n = 0;
    for (int s = 0; s < stream.batches_per_epoch(); ++s) {
      const Batch batch = stream.next();
      const float inv = 1.0f / static_cast<float>(batch.indices.size());
      GradSet master = zero_grads(bundle, trainable);
      double loss_sum = 0;
      ordered_parallel_for<ElementOut>(
          batch.indices.size(), static_cast<unsigned>(cfg.workers),
          [&](std::size_t i) {
            ad::Tape<float> tape;
            BoundBundle<float> bb = bind_bundle(tape, bundle, trainable);
            ad::Tensor loss = classifier_ce_element(
                tape, bb, cfg.nets, data[static_cast<std::size_t>(batch.indices[i])]);
            tape.backward(loss);
            return ElementOut{extract_grads(tape, bb, trainable),
                              {static_cast<double>(tape.scalar(loss))}};
          },
          [&](std::size_t, ElementOut&& out) {
            add_scaled(master, out.grads, inv);
            loss_sum += out.values[0];
          });
      const double batch_loss = loss_sum / static_cast<double>(batch.indices.size());
      if (!std::isfinite(batch_loss)) {
        restore_params(bundle, trainable, last_good);
        bundle.meta.stage = tag + "_aborted";
        save_checkpoint(bundle, out_dir / "checkpoints" / tag);
        throw TrainingAbort("train_classifier(" + tag + "): non-finite loss at step " +
                            std::to_string(step) + "; last finite checkpoint retained");
      }
      last_good = copy_params(bundle, trainable);
      opt.step(master);
      log.write({{"step", step}, {"epoch", epoch}, {"stage", tag},
                 {"l_cls", batch_loss}, {"wall_s", wall.seconds()}});
      epoch_sum += batch_loss;
      ++epoch_n;
      ++step;
    }
    if (epoch_n > 0) result.epoch_curve.push_back({{"l_cls", epoch_sum / epoch_n}});
  }

  {
    double total = 0;
    ordered_parallel_for<double>(
        data.size(), static_cast<unsigned>(cfg.workers),
        [&](std::size_t i) {
          ad::Tape<float> tape;
          BoundBundle<float> bb = bind_bundle(tape, bundle);
          return static_cast<double>(
              tape.scalar(classifier_ce_element(tape, bb, cfg.nets, data[i])));
        },
        [&](std::size_t, double&& v) { total += v; });
    result.final_losses["l_cls"] = total / static_cast<double>(data.size());
  }

  const std::string stage_name = tag == "source_pretrain" ? "classifier" : tag;
  bundle.meta.record_stage(stage_name);
  bundle.meta.epoch = sch.epochs;
  bundle.meta.config_digest = cfg.digest();
  result.checkpoint = out_dir / "checkpoints" / stage_name;
  save_checkpoint(bundle, result.checkpoint);
  result.wall_seconds = wall.seconds();
  return result;
}

// ---- GAN -------------------------------------------------------------------------

struct GanTrainer::Impl {
  const AdaptationConfig* cfg = nullptr;
  TrainBundle* bundle = nullptr;
  std::vector<std::string> d_trainable;
  std::vector<std::string> g_trainable;
  std::unique_ptr<Adam> opt_d;
  std::unique_ptr<Adam> opt_g;
};

GanTrainer::GanTrainer(const AdaptationConfig& cfg, TrainBundle& bundle)
    : impl_(std::make_unique<Impl>()) {
  for (const char* prereq : {"ae", "vae", "classifier"}) {
    if (!bundle.meta.has_stage(prereq)) {
      throw ValidationError(std::string("train_gan: missing prerequisite checkpoint '") +
                            prereq + "'");
    }
  }
  impl_->cfg = &cfg;
  impl_->bundle = &bundle;

  // Pretrained autoencoder and VAE stay fixed; the classifier follows the
  // config flag.
  bundle.frozen["encoder"] = true;
  bundle.frozen["decoder"] = true;
  bundle.frozen["vae_decoder"] = true;
  bundle.frozen["mode_encoder"] = !cfg.update_mode_encoder_in_gan;
  bundle.frozen["classifier"] = !cfg.update_classifier_in_gan;

  weights_ = cfg.weights;
  if (!cfg.ablation.use_latent_recon) weights_.beta = 0;
  if (!cfg.ablation.use_classifier_disc) weights_.gamma = 0;

  impl_->d_trainable = {"discriminator"};
  impl_->g_trainable = {"generator"};
  if (cfg.update_classifier_in_gan) impl_->g_trainable.push_back("classifier");
  if (cfg.update_mode_encoder_in_gan) impl_->g_trainable.push_back("mode_encoder");

  impl_->opt_d = std::make_unique<Adam>(cfg.gan.learning_rate, cfg.gan.adam_beta1,
                                        cfg.gan.weight_decay);
  impl_->opt_d->attach(bundle.discriminator);
  impl_->opt_g = std::make_unique<Adam>(cfg.gan.learning_rate, cfg.gan.adam_beta1,
                                        cfg.gan.weight_decay);
  for (const auto& name : impl_->g_trainable) impl_->opt_g->attach(bundle.block(name));
}

GanTrainer::~GanTrainer() = default;

double GanTrainer::discriminator_step(const std::vector<const PointCloud*>& source,
                                      const std::vector<const PointCloud*>& target,
                                      const std::vector<ModeVector>& z) {
  if (source.empty() || target.empty()) {
    throw ValidationError("gan discriminator step: empty batch");
  }
  if (z.size() != source.size()) {
    throw ValidationError("gan discriminator step: z batch size mismatch with source batch");
  }
  const AdaptationConfig& cfg = *impl_->cfg;
  TrainBundle& bundle = *impl_->bundle;
  GradSet master = zero_grads(bundle, impl_->d_trainable);
  double real_sum = 0, fake_sum = 0;

  const float inv_real = 1.0f / static_cast<float>(target.size());
  ordered_parallel_for<ElementOut>(
      target.size(), static_cast<unsigned>(cfg.workers),
      [&](std::size_t i) {
        ad::Tape<float> tape;
        BoundBundle<float> bb = bind_bundle(tape, bundle, impl_->d_trainable);
        ad::Tensor score = real_score_element(tape, bb, cfg.nets, *target[i]);
        ad::Tensor loss = tape.square(tape.add_scalar(score, -1.0f));
        tape.backward(loss);
        return ElementOut{extract_grads(tape, bb, impl_->d_trainable),
                          {static_cast<double>(tape.scalar(loss))}};
      },
      [&](std::size_t, ElementOut&& out) {
        add_scaled(master, out.grads, inv_real);
        real_sum += out.values[0];
      });

  const float inv_fake = 1.0f / static_cast<float>(source.size());
  ordered_parallel_for<ElementOut>(
      source.size(), static_cast<unsigned>(cfg.workers),
      [&](std::size_t i) {
        ad::Tape<float> tape;
        BoundBundle<float> bb = bind_bundle(tape, bundle, impl_->d_trainable);
        ad::Tensor score =
            fake_score_element(tape, bb, cfg.nets, *source[i], z[i], cfg.ablation.fake_term);
        ad::Tensor loss = tape.square(score);
        tape.backward(loss);
        return ElementOut{extract_grads(tape, bb, impl_->d_trainable),
                          {static_cast<double>(tape.scalar(loss))}};
      },
      [&](std::size_t, ElementOut&& out) {
        add_scaled(master, out.grads, inv_fake);
        fake_sum += out.values[0];
      });

  const double loss = real_sum / static_cast<double>(target.size()) +
                      fake_sum / static_cast<double>(source.size());
  if (!std::isfinite(loss)) {
    throw TrainingAbort("gan discriminator step: non-finite loss");
  }
  impl_->opt_d->step(master);
  return loss;
}

LossReport GanTrainer::generator_step(const std::vector<const PointCloud*>& source,
                                      const std::vector<ModeVector>& z) {
  if (source.empty()) throw ValidationError("gan generator step: empty batch");
  if (z.size() != source.size()) {
    throw ValidationError("gan generator step: z batch size mismatch with source batch");
  }
  const AdaptationConfig& cfg = *impl_->cfg;
  TrainBundle& bundle = *impl_->bundle;
  GradSet master = zero_grads(bundle, impl_->g_trainable);
  GenObjectiveParts<float> sums{};

  const float inv = 1.0f / static_cast<float>(source.size());
  ordered_parallel_for<std::pair<GradSet, GenObjectiveParts<float>>>(
      source.size(), static_cast<unsigned>(cfg.workers),
      [&](std::size_t i) {
        ad::Tape<float> tape;
        BoundBundle<float> bb = bind_bundle(tape, bundle, impl_->g_trainable);
        GenObjectiveParts<float> parts{};
        ad::Tensor loss = generator_objective_element(tape, bb, cfg.nets, *source[i], z[i],
                                                      weights_, cfg.emd, &parts);
        tape.backward(loss);
        return std::pair<GradSet, GenObjectiveParts<float>>(
            extract_grads(tape, bb, impl_->g_trainable), parts);
      },
      [&](std::size_t, std::pair<GradSet, GenObjectiveParts<float>>&& out) {
        add_scaled(master, out.first, inv);
        sums.gan_g += out.second.gan_g;
        sums.recon += out.second.recon;
        sums.latent += out.second.latent;
        sums.cls += out.second.cls;
        sums.total += out.second.total;
      });

  LossReport r;
  const double n = static_cast<double>(source.size());
  r.l_gan_g = sums.gan_g / n;
  r.l_recon_g = sums.recon / n;
  r.l_latent = sums.latent / n;
  r.l_cls = sums.cls / n;
  r.total = sums.total / n;
  if (!std::isfinite(r.total)) {
    throw TrainingAbort("gan generator step: non-finite loss");
  }
  impl_->opt_g->step(master);
  return r;
}

StageResult train_gan(const AdaptationConfig& cfg, const std::vector<PointCloud>& source,
                      const std::vector<PointCloud>& target, TrainBundle& bundle,
                      const fs::path& out_dir) {
  if (source.empty() || target.empty()) {
    throw ValidationError("train_gan: source and target data required");
  }
  for (const PointCloud& c : source) {
    if (!c.label.has_value()) throw ValidationError("train_gan: unlabeled source cloud");
  }
  GanTrainer trainer(cfg, bundle);
  const StageSchedule& sch = cfg.gan;
  BatchStream src_stream(static_cast<int>(source.size()), sch.batch_size,
                         derive_seed(cfg.seed, "gan/src"), /*paired_z=*/true, cfg.nets.d_z);
  BatchStream tgt_stream(static_cast<int>(target.size()), sch.batch_size,
                         derive_seed(cfg.seed, "gan/tgt"));
  JsonlLog log(out_dir / "logs" / "gan.jsonl");
  Timer wall;
  StageResult result;
  const std::vector<std::string> snapshot_names = {"generator", "discriminator"};
  GradSet last_good = copy_params(bundle, snapshot_names);
  int step = 0;

  for (int epoch = 0; epoch < sch.epochs; ++epoch) {
    std::map<std::string, double> epoch_sums = {{"l_gan_f", 0}, {"l_gan_g", 0},
                                                {"l_recon_g", 0}, {"l_latent", 0},
                                                {"l_cls", 0}, {"total", 0}};
    int epoch_n = 0;
    for (int s = 0; s < src_stream.batches_per_epoch(); ++s) {
      const Batch sb = src_stream.next();
      const Batch tb = tgt_stream.next();
      std::vector<const PointCloud*> src_ptrs, tgt_ptrs;
      for (int idx : sb.indices) src_ptrs.push_back(&source[static_cast<std::size_t>(idx)]);
      for (int idx : tb.indices) tgt_ptrs.push_back(&target[static_cast<std::size_t>(idx)]);

      double l_gan_f = 0;
      LossReport g;
      try {
        l_gan_f = trainer.discriminator_step(src_ptrs, tgt_ptrs, sb.z);
        g = trainer.generator_step(src_ptrs, sb.z);
      } catch (const TrainingAbort&) {
        restore_params(bundle, snapshot_names, last_good);
        bundle.meta.stage = "gan_aborted";
        save_checkpoint(bundle, out_dir / "checkpoints" / "gan");
        throw TrainingAbort("train_gan: non-finite loss at step " + std::to_string(step) +
                            "; last finite checkpoint retained");
      }
      last_good = copy_params(bundle, snapshot_names);
      g.l_gan_f = l_gan_f;
      log.write({{"step", step}, {"epoch", epoch}, {"stage", "gan"},
                 {"l_gan_f", g.l_gan_f}, {"l_gan_g", g.l_gan_g}, {"l_recon_g", g.l_recon_g},
                 {"l_latent", g.l_latent}, {"l_cls", g.l_cls}, {"total", g.total},
                 {"wall_s", wall.seconds()}});
      epoch_sums["l_gan_f"] += g.l_gan_f;
      epoch_sums["l_gan_g"] += g.l_gan_g;
      epoch_sums["l_recon_g"] += g.l_recon_g;
      epoch_sums["l_latent"] += g.l_latent;
      epoch_sums["l_cls"] += g.l_cls;
      epoch_sums["total"] += g.total;
      ++epoch_n;
      ++step;
    }
    if (epoch_n > 0) {
      std::map<std::string, double> means;
      for (auto& [k, v] : epoch_sums) means[k] = v / epoch_n;
      result.epoch_curve.push_back(means);
    }
  }

  if (!result.epoch_curve.empty()) {
    result.final_losses = result.epoch_curve.back();
  }
  bundle.meta.record_stage("gan");
  bundle.meta.epoch = sch.epochs;
  bundle.meta.config_digest = cfg.digest();
  result.checkpoint = out_dir / "checkpoints" / "gan";
  save_checkpoint(bundle, result.checkpoint);
  result.wall_seconds = wall.seconds();
  return result;
}

// ---- synthetic dataset --------------------------------------------------------

DatasetManifest generate_synthetic(const AdaptationConfig& cfg, const TrainBundle& bundle,
                                   const Dataset& source, int samples_per_object,
                                   const fs::path& out_root) {
  if (samples_per_object <= 0) {
    throw ValidationError("generate_synthetic: samples_per_object must be positive");
  }
  const std::vector<PointCloud>& clouds = source.split("train");
  DatasetManifest manifest;
  manifest.domain_name = "synthetic";
  manifest.cloud_size = cfg.nets.cloud_size;
  manifest.classes = source.manifest.classes;
  std::vector<std::vector<std::string>> per_class(manifest.classes.size());
  std::vector<int> class_counter(manifest.classes.size(), 0);

  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const PointCloud& src = clouds[i];
    if (!src.label.has_value()) {
      throw ValidationError("generate_synthetic: unlabeled source cloud");
    }
    const int cls = *src.label;
    const LatentCode code = encode(bundle, src);
    for (int s = 0; s < samples_per_object; ++s) {
      Rng rng(derive_seed(cfg.seed, "synthetic/z", i * static_cast<u64>(samples_per_object) +
                                                       static_cast<u64>(s)));
      ModeVector z;
      z.values.resize(cfg.nets.d_z);
      for (int d = 0; d < cfg.nets.d_z; ++d) z.values(d) = rng.normal();
      PointCloud synth = decode(bundle, generate(bundle, code, z));
      synth.label = cls;
      synth.domain = DomainTag::synthetic;
      quantize_f32(synth);
      char name[48];
      std::snprintf(name, sizeof(name), "%05d_%02d.npy", class_counter[static_cast<std::size_t>(cls)],
                    s);
      const std::string rel =
          "train/" + manifest.classes[static_cast<std::size_t>(cls)] + "/" + name;
      write_cloud_npy(out_root / "synthetic" / rel, synth);
      per_class[static_cast<std::size_t>(cls)].push_back(rel);
    }
    ++class_counter[static_cast<std::size_t>(cls)];
  }
  manifest.splits["train"] = std::move(per_class);
  manifest.splits["test"] = std::vector<std::vector<std::string>>(manifest.classes.size());
  save_manifest(manifest, out_root / "synthetic" / "manifest.json");
  return manifest;
}

// ---- scenario orchestration -----------------------------------------------------

namespace {

std::vector<PointCloud> strip_labels(const std::vector<PointCloud>& clouds) {
  std::vector<PointCloud> out = clouds;
  for (PointCloud& c : out) c.label.reset();
  return out;
}

void write_text(const fs::path& path, const std::string& body) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  f << body;
}

njson confusion_to_json(const ConfusionMatrix& m) {
  njson rows = njson::array();
  for (Eigen::Index i = 0; i < m.counts.rows(); ++i) {
    njson row = njson::array();
    for (Eigen::Index j = 0; j < m.counts.cols(); ++j) row.push_back(m.counts(i, j));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

njson metrics_json(const ScenarioOutcome& outcome, const AdaptationConfig& cfg) {
  njson j;
  j["scenario"] = outcome.scenario;
  j["ablation"] = outcome.ablation;
  j["seed"] = outcome.seed;
  j["config_digest"] = cfg.digest();
  njson acc;
  acc["wo_adapt"] = outcome.wo_adapt.accuracy;
  acc["adapted"] = outcome.adapted.accuracy;
  if (outcome.supervised.has_value()) acc["supervised"] = outcome.supervised->accuracy;
  j["accuracy"] = acc;
  njson conf;
  conf["wo_adapt"] = confusion_to_json(outcome.wo_adapt.confusion);
  conf["adapted"] = confusion_to_json(outcome.adapted.confusion);
  if (outcome.supervised.has_value()) {
    conf["supervised"] = confusion_to_json(outcome.supervised->confusion);
  }
  j["confusion_counts"] = conf;
  return j;
}

ScenarioOutcome run_scenario(const AdaptationConfig& cfg, const fs::path& data_root,
                             const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_text(out_dir / "config.resolved.json", config_to_json(cfg).dump(2) + "\n");

  if (cfg.toy.enabled) {
    ToyDomainSpec src_spec, tgt_spec;
    src_spec.name = cfg.source_domain;
    src_spec.deformation = cfg.toy.source_deform;
    src_spec.seed = cfg.seed;
    tgt_spec.name = cfg.target_domain;
    tgt_spec.deformation = cfg.toy.target_deform;
    tgt_spec.seed = cfg.seed;
    make_toy_pair(data_root, src_spec, tgt_spec, cfg.toy.per_class, cfg.nets.cloud_size);
  }

  const DatasetManifest src_manifest =
      load_manifest(data_root / cfg.source_domain / "manifest.json");
  const DatasetManifest tgt_manifest =
      load_manifest(data_root / cfg.target_domain / "manifest.json");
  if (src_manifest.classes != tgt_manifest.classes) {
    throw ValidationError("run_scenario: domains disagree on the class list");
  }
  if (static_cast<int>(src_manifest.classes.size()) != cfg.nets.num_classes) {
    throw ValidationError("run_scenario: nets.num_classes does not match the dataset");
  }
  Dataset src = load_dataset(data_root / cfg.source_domain, src_manifest, DomainTag::source);
  Dataset tgt = load_dataset(data_root / cfg.target_domain, tgt_manifest, DomainTag::target);

  ScenarioOutcome outcome;
  outcome.scenario = cfg.scenario;
  outcome.ablation = cfg.ablation.name();
  outcome.seed = cfg.seed;

  TrainBundle bundle = init_bundle<float>(cfg.nets, cfg.seed);
  bundle.meta.config_digest = cfg.digest();

  // Stage 1: shared autoencoder. Target training clouds are unlabeled, so
  // including them stays within the UDA contract.
  std::vector<PointCloud> ae_data = src.split("train");
  if (cfg.ae_train_data == "both") {
    const std::vector<PointCloud> tgt_unlabeled = strip_labels(tgt.split("train"));
    ae_data.insert(ae_data.end(), tgt_unlabeled.begin(), tgt_unlabeled.end());
  }
  {
    Timer t;
    train_autoencoder(cfg, ae_data, bundle, out_dir);
    outcome.stage_seconds["ae"] = t.seconds();
  }
  {
    Timer t;
    train_vae(cfg, src.split("train"), bundle, out_dir);
    outcome.stage_seconds["vae"] = t.seconds();
  }
  {
    Timer t;
    train_classifier(cfg, src.split("train"), "source_pretrain", bundle, out_dir);
    outcome.stage_seconds["classifier"] = t.seconds();
  }

  // (a) w/o adapt: the source-trained classifier on the target test split.
  outcome.wo_adapt = evaluate(bundle, tgt.split("test"));

  {
    Timer t;
    train_gan(cfg, src.split("train"), strip_labels(tgt.split("train")), bundle, out_dir);
    outcome.stage_seconds["gan"] = t.seconds();
  }

  DatasetManifest synth_manifest;
  {
    Timer t;
    synth_manifest = generate_synthetic(cfg, bundle, src, cfg.samples_per_object, out_dir);
    outcome.stage_seconds["generate"] = t.seconds();
  }
  Dataset synth =
      load_dataset(out_dir / "synthetic", synth_manifest, DomainTag::synthetic, true);

  // (b) adapted: a fresh classifier trained on the synthetic dataset.
  TrainBundle downstream = bundle;
  {
    TrainBundle fresh = init_bundle<float>(cfg.nets, derive_seed(cfg.seed, "downstream-init"));
    downstream.classifier = fresh.classifier;
    downstream.frozen["classifier"] = false;
  }
  {
    Timer t;
    train_classifier(cfg, synth.split("train"), "downstream_synthetic", downstream, out_dir);
    outcome.stage_seconds["downstream"] = t.seconds();
  }
  outcome.adapted = evaluate(downstream, tgt.split("test"));

  // (c) optional supervised bound: target-trained classifier on target test.
  if (cfg.train_supervised_bound) {
    TrainBundle sup = bundle;
    TrainBundle fresh = init_bundle<float>(cfg.nets, derive_seed(cfg.seed, "supervised-init"));
    sup.classifier = fresh.classifier;
    sup.frozen["classifier"] = false;
    Timer t;
    train_classifier(cfg, tgt.split("train"), "supervised_bound", sup, out_dir);
    outcome.stage_seconds["supervised"] = t.seconds();
    outcome.supervised = evaluate(sup, tgt.split("test"));
  }

  // Reports.
  const njson metrics = metrics_json(outcome, cfg);
  outcome.metrics_path = out_dir / "metrics.json";
  write_text(outcome.metrics_path, metrics.dump(2) + "\n");

  {
    njson timings;
    for (const auto& [k, v] : outcome.stage_seconds) timings[k] = v;
    write_text(out_dir / "timings.json", timings.dump(2) + "\n");
  }

  ScenarioReport report;
  report.scenario = cfg.scenario;
  report.wo_adapt = outcome.wo_adapt.accuracy * 100.0;
  report.adapted[outcome.ablation] = outcome.adapted.accuracy * 100.0;
  if (outcome.supervised.has_value()) {
    report.supervised = outcome.supervised->accuracy * 100.0;
  }
  write_text(out_dir / "report.txt", compare_scenarios({report}));
  write_text(out_dir / "eval" / "confusion_wo_adapt.csv",
             confusion_csv(outcome.wo_adapt.confusion, src_manifest.classes));
  write_text(out_dir / "eval" / "confusion_adapted.csv",
             confusion_csv(outcome.adapted.confusion, src_manifest.classes));
  if (outcome.supervised.has_value()) {
    write_text(out_dir / "eval" / "confusion_supervised.csv",
               confusion_csv(outcome.supervised->confusion, src_manifest.classes));
  }
  return outcome;
}

}  // namespace pcda
