#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcda/evalreport.hpp"
#include "pcda/nets_io.hpp"
#include "pcda/pipeline.hpp"

namespace fs = std::filesystem;
using pcda::AdaptationConfig;
using pcda::ValidationError;

namespace {

struct CliOptions {
  std::string config_path;
  std::string scenario;
  std::string data_root;
  std::string out_dir = "out";
  std::string ablation;
  std::optional<pcda::u64> seed;
  std::optional<int> workers;
  std::vector<std::string> overrides;
};

void add_common_flags(CLI::App* cmd, CliOptions& opt) {
  cmd->add_option("--config", opt.config_path, "JSON config file");
  cmd->add_option("--scenario", opt.scenario,
                  "preset name (M-S, M-S*, S-M, S-S*, S*-M, S*-S, toy-gap, toy-nogap, toy-smoke)");
  cmd->add_option("--data-root", opt.data_root, "dataset root (default env PCDA_DATA_ROOT)");
  cmd->add_option("--out", opt.out_dir, "output directory");
  cmd->add_option("--ablation", opt.ablation, "only-ae | ae-l | full");
  cmd->add_option("--seed", opt.seed, "override the config seed");
  cmd->add_option("--workers", opt.workers, "data-parallel worker threads");
  cmd->add_option("--set", opt.overrides, "config override key.path=value (repeatable)");
}

AdaptationConfig resolve_config(const CliOptions& opt) {
  nlohmann::ordered_json doc;
  if (!opt.config_path.empty()) {
    std::ifstream f(opt.config_path);
    if (!f) throw ValidationError("config file not found: " + opt.config_path);
    doc = nlohmann::ordered_json::parse(f);
    if (!opt.scenario.empty()) {
      throw ValidationError("pass either --config or --scenario, not both");
    }
  } else {
    const std::string name = opt.scenario.empty() ? "toy-gap" : opt.scenario;
    doc = pcda::config_to_json(pcda::preset_config(name));
  }
  for (const auto& o : opt.overrides) pcda::apply_override(doc, o);
  AdaptationConfig cfg = pcda::config_from_json(doc);
  if (opt.seed.has_value()) cfg.seed = *opt.seed;
  if (opt.workers.has_value()) cfg.workers = *opt.workers;
  if (!opt.ablation.empty()) {
    if (opt.ablation == "only-ae") {
      cfg.ablation.use_latent_recon = false;
      cfg.ablation.use_classifier_disc = false;
    } else if (opt.ablation == "ae-l") {
      cfg.ablation.use_latent_recon = true;
      cfg.ablation.use_classifier_disc = false;
    } else if (opt.ablation == "full") {
      cfg.ablation.use_latent_recon = true;
      cfg.ablation.use_classifier_disc = true;
    } else {
      throw ValidationError("unknown ablation " + opt.ablation +
                            " (expected only-ae, ae-l or full)");
    }
  }
  cfg.validate();
  return cfg;
}

fs::path resolve_data_root(const CliOptions& opt) {
  if (!opt.data_root.empty()) return opt.data_root;
  if (const char* env = std::getenv("PCDA_DATA_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return fs::path(opt.out_dir) / "data";
}

void write_config_snapshot(const AdaptationConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir / "config.resolved.json");
  f << pcda::config_to_json(cfg).dump(2) << "\n";
}

void ensure_toy_data(const AdaptationConfig& cfg, const fs::path& data_root) {
  if (!cfg.toy.enabled) return;
  const fs::path src_manifest = data_root / cfg.source_domain / "manifest.json";
  const fs::path tgt_manifest = data_root / cfg.target_domain / "manifest.json";
  if (fs::exists(src_manifest) && fs::exists(tgt_manifest)) return;
  pcda::ToyDomainSpec src_spec, tgt_spec;
  src_spec.name = cfg.source_domain;
  src_spec.deformation = cfg.toy.source_deform;
  src_spec.seed = cfg.seed;
  tgt_spec.name = cfg.target_domain;
  tgt_spec.deformation = cfg.toy.target_deform;
  tgt_spec.seed = cfg.seed;
  pcda::make_toy_pair(data_root, src_spec, tgt_spec, cfg.toy.per_class, cfg.nets.cloud_size);
}

pcda::Dataset load_domain(const AdaptationConfig& cfg, const fs::path& data_root,
                          const std::string& domain, pcda::DomainTag tag) {
  const fs::path manifest_path = data_root / domain / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw ValidationError("dataset manifest not found: " + manifest_path.string());
  }
  return pcda::load_dataset(data_root / domain, pcda::load_manifest(manifest_path), tag);
}

pcda::TrainBundle load_stage_checkpoint(const fs::path& out_dir, const std::string& stage) {
  const fs::path dir = out_dir / "checkpoints" / stage;
  if (!fs::exists(dir / "meta.json")) {
    throw ValidationError("missing prerequisite checkpoint '" + stage + "' (expected at " +
                          dir.string() + ")");
  }
  return pcda::load_checkpoint<float>(dir);
}

pcda::TrainBundle latest_or_fresh(const AdaptationConfig& cfg, const fs::path& out_dir,
                                  const std::vector<std::string>& preferred) {
  for (const auto& stage : preferred) {
    const fs::path dir = out_dir / "checkpoints" / stage;
    if (fs::exists(dir / "meta.json")) return pcda::load_checkpoint<float>(dir);
  }
  return pcda::init_bundle<float>(cfg.nets, cfg.seed);
}

int run_command(const std::string& verb, const CliOptions& opt) {
  AdaptationConfig cfg = resolve_config(opt);
  const fs::path out_dir = opt.out_dir;
  const fs::path data_root = resolve_data_root(opt);
  write_config_snapshot(cfg, out_dir);

  if (verb == "make-toy") {
    if (!cfg.toy.enabled) throw ValidationError("make-toy: config has toy.enabled = false");
    pcda::ToyDomainSpec src_spec, tgt_spec;
    src_spec.name = cfg.source_domain;
    src_spec.deformation = cfg.toy.source_deform;
    src_spec.seed = cfg.seed;
    tgt_spec.name = cfg.target_domain;
    tgt_spec.deformation = cfg.toy.target_deform;
    tgt_spec.seed = cfg.seed;
    auto [ms, mt] =
        pcda::make_toy_pair(data_root, src_spec, tgt_spec, cfg.toy.per_class, cfg.nets.cloud_size);
    std::cout << "wrote " << ms.domain_name << " (" << ms.total("train") << " train / "
              << ms.total("test") << " test) and " << mt.domain_name << " under " << data_root
              << "\n";
    return 0;
  }

  if (verb == "run-all") {
    ensure_toy_data(cfg, data_root);
    const pcda::ScenarioOutcome outcome = pcda::run_scenario(cfg, data_root, out_dir);
    std::cout << "w/o adapt: " << outcome.wo_adapt.accuracy
              << "  adapted: " << outcome.adapted.accuracy;
    if (outcome.supervised.has_value()) {
      std::cout << "  supervised: " << outcome.supervised->accuracy;
    }
    std::cout << "\nmetrics: " << outcome.metrics_path << "\n";
    return 0;
  }

  if (verb == "train-ae") {
    ensure_toy_data(cfg, data_root);
    pcda::Dataset src = load_domain(cfg, data_root, cfg.source_domain, pcda::DomainTag::source);
    std::vector<pcda::PointCloud> data = src.split("train");
    if (cfg.ae_train_data == "both") {
      pcda::Dataset tgt = load_domain(cfg, data_root, cfg.target_domain, pcda::DomainTag::target);
      for (pcda::PointCloud c : tgt.split("train")) {
        c.label.reset();
        data.push_back(std::move(c));
      }
    }
    pcda::TrainBundle bundle = pcda::init_bundle<float>(cfg.nets, cfg.seed);
    const pcda::StageResult r = pcda::train_autoencoder(cfg, data, bundle, out_dir);
    std::cout << "ae final l_recon_ae: " << r.final_losses.at("l_recon_ae") << "\n";
    return 0;
  }

  if (verb == "train-vae") {
    ensure_toy_data(cfg, data_root);
    pcda::Dataset src = load_domain(cfg, data_root, cfg.source_domain, pcda::DomainTag::source);
    pcda::TrainBundle bundle = latest_or_fresh(cfg, out_dir, {"ae"});
    const pcda::StageResult r = pcda::train_vae(cfg, src.split("train"), bundle, out_dir);
    std::cout << "vae final l_recon: " << r.final_losses.at("l_recon")
              << "  l_kl: " << r.final_losses.at("l_kl") << "\n";
    return 0;
  }

  if (verb == "train-cls") {
    ensure_toy_data(cfg, data_root);
    pcda::TrainBundle bundle = latest_or_fresh(cfg, out_dir, {"vae", "ae"});
    pcda::Dataset src = load_domain(cfg, data_root, cfg.source_domain, pcda::DomainTag::source);
    const pcda::StageResult r =
        pcda::train_classifier(cfg, src.split("train"), "source_pretrain", bundle, out_dir);
    std::cout << "classifier final l_cls: " << r.final_losses.at("l_cls") << "\n";
    return 0;
  }

  if (verb == "train-gan") {
    ensure_toy_data(cfg, data_root);
    pcda::TrainBundle bundle = load_stage_checkpoint(out_dir, "classifier");
    pcda::Dataset src = load_domain(cfg, data_root, cfg.source_domain, pcda::DomainTag::source);
    pcda::Dataset tgt = load_domain(cfg, data_root, cfg.target_domain, pcda::DomainTag::target);
    std::vector<pcda::PointCloud> tgt_train = tgt.split("train");
    for (pcda::PointCloud& c : tgt_train) c.label.reset();
    const pcda::StageResult r =
        pcda::train_gan(cfg, src.split("train"), tgt_train, bundle, out_dir);
    std::cout << "gan final total: "
              << (r.final_losses.count("total") ? r.final_losses.at("total") : 0.0) << "\n";
    return 0;
  }

  if (verb == "generate") {
    ensure_toy_data(cfg, data_root);
    pcda::TrainBundle bundle = load_stage_checkpoint(out_dir, "gan");
    pcda::Dataset src = load_domain(cfg, data_root, cfg.source_domain, pcda::DomainTag::source);
    const pcda::DatasetManifest m =
        pcda::generate_synthetic(cfg, bundle, src, cfg.samples_per_object, out_dir);
    std::cout << "synthetic train clouds: " << m.total("train") << "\n";
    return 0;
  }

  if (verb == "adapt-eval") {
    pcda::Dataset tgt = load_domain(cfg, data_root, cfg.target_domain, pcda::DomainTag::target);
    pcda::TrainBundle source_cls = load_stage_checkpoint(out_dir, "classifier");
    pcda::TrainBundle downstream = load_stage_checkpoint(out_dir, "downstream_synthetic");
    const pcda::EvalResult wo = pcda::evaluate(source_cls, tgt.split("test"));
    const pcda::EvalResult adapted = pcda::evaluate(downstream, tgt.split("test"));
    nlohmann::ordered_json j;
    j["scenario"] = cfg.scenario;
    j["accuracy"] = {{"wo_adapt", wo.accuracy}, {"adapted", adapted.accuracy}};
    std::ofstream f(out_dir / "metrics.json");
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (verb == "export-viz") {
    ensure_toy_data(cfg, data_root);
    pcda::TrainBundle bundle = load_stage_checkpoint(out_dir, "gan");
    pcda::Dataset src = load_domain(cfg, data_root, cfg.source_domain, pcda::DomainTag::source);
    pcda::Dataset tgt = load_domain(cfg, data_root, cfg.target_domain, pcda::DomainTag::target);
    const auto& src_clouds = src.split("train");
    const auto& tgt_clouds = tgt.split("train");
    const std::size_t count = std::min<std::size_t>({4, src_clouds.size(), tgt_clouds.size()});
    for (std::size_t i = 0; i < count; ++i) {
      pcda::Rng rng(pcda::derive_seed(cfg.seed, "viz/z", i));
      pcda::ModeVector z;
      z.values.resize(cfg.nets.d_z);
      for (int d = 0; d < cfg.nets.d_z; ++d) z.values(d) = rng.normal();
      pcda::PointCloud synth =
          pcda::decode(bundle, pcda::generate(bundle, pcda::encode(bundle, src_clouds[i]), z));
      char stem[32];
      std::snprintf(stem, sizeof(stem), "object_%04zu", i);
      const fs::path viz = out_dir / "viz";
      pcda::export_cloud_ply(src_clouds[i], viz / (std::string(stem) + "_source.ply"));
      pcda::export_cloud_ply(synth, viz / (std::string(stem) + "_synthetic.ply"));
      pcda::export_cloud_ply(tgt_clouds[i], viz / (std::string(stem) + "_target.ply"));
      pcda::export_triple_svg(src_clouds[i], synth, tgt_clouds[i],
                              viz / (std::string(stem) + ".svg"));
    }
    std::cout << "wrote " << count << " visual triples under " << (out_dir / "viz") << "\n";
    return 0;
  }

  throw ValidationError("unknown command " + verb);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GAN-based point-cloud domain adaptation"};
  app.require_subcommand(1);

  const std::vector<std::string> verbs = {"make-toy",  "train-ae", "train-vae",
                                          "train-cls", "train-gan", "generate",
                                          "adapt-eval", "run-all",  "export-viz"};
  std::map<std::string, CliOptions> options;
  for (const auto& verb : verbs) {
    CLI::App* cmd = app.add_subcommand(verb);
    add_common_flags(cmd, options[verb]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const auto& verb : verbs) {
      if (app.got_subcommand(verb)) return run_command(verb, options[verb]);
    }
    std::cerr << "no command given\n";
    return 1;
  } catch (const pcda::TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
