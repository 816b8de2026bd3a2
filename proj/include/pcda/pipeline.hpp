#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcda/datasets.hpp"
#include "pcda/evalreport.hpp"
#include "pcda/losses.hpp"
#include "pcda/nets.hpp"

namespace pcda {

/// Training computations run in float32; gradient-check tests instantiate the
/// same code in double.
using TrainBundle = Bundle<float>;

struct StageSchedule {
  double learning_rate = 5e-4;
  double adam_beta1 = 0.5;
  int epochs = 1;
  int batch_size = 32;
  double weight_decay = 0.0;
};

struct AblationFlags {
  bool use_latent_recon = true;     // Table 4 column L
  bool use_classifier_disc = true;  // Table 4 column C
  FakeTerm fake_term = FakeTerm::generated;

  std::string name() const {
    if (!use_latent_recon && !use_classifier_disc) return "only-ae";
    if (!use_classifier_disc) return "ae-l";
    return "full";
  }
};

struct ToyPairConfig {
  bool enabled = false;
  int per_class = 200;
  ToyDeformation source_deform;
  ToyDeformation target_deform;
};

struct AdaptationConfig {
  std::string scenario = "custom";
  std::string source_domain;
  std::string target_domain;
  LossWeights weights;
  StageSchedule ae{5e-4, 0.5, 1000, 32, 0.0};
  StageSchedule vae{5e-4, 0.9, 2000, 200, 0.0};
  StageSchedule classifier{1e-4, 0.9, 200, 64, 0.0};
  StageSchedule gan{5e-4, 0.5, 1000, 50, 0.0};
  StageSchedule downstream{1e-4, 0.9, 200, 64, 5e-4};
  AblationFlags ablation;
  u64 seed = 7;
  NetConfig nets;
  EmdOptions emd;
  double kl_weight = 1.0;
  int samples_per_object = 1;
  // The shared autoencoder may see target training clouds (they are
  // unlabeled); "source" keeps the literal single-domain protocol.
  std::string ae_train_data = "both";
  bool update_classifier_in_gan = false;
  bool update_mode_encoder_in_gan = false;
  bool train_supervised_bound = false;
  int workers = 1;
  ToyPairConfig toy;

  void validate() const;
  std::string digest() const;
};

nlohmann::ordered_json config_to_json(const AdaptationConfig& cfg);
AdaptationConfig config_from_json(const nlohmann::ordered_json& j);

/// Named presets: the six published scenarios (full-scale schedules and
/// importance weights) plus the desk-scale toy pairs.
std::vector<std::string> preset_names();
AdaptationConfig preset_config(const std::string& name);

/// Applies `key=value` overrides with dotted paths into the config JSON.
/// Unknown keys are errors.
void apply_override(nlohmann::ordered_json& doc, const std::string& spec);

struct StageResult {
  std::filesystem::path checkpoint;
  std::map<std::string, double> final_losses;
  double wall_seconds = 0;
  std::vector<std::map<std::string, double>> epoch_curve;
};

/// Minimizes emd(X, D(E(X))) with Adam. Emits a checkpoint carrying the
/// whole bundle; meta.stage becomes "ae".
StageResult train_autoencoder(const AdaptationConfig& cfg, const std::vector<PointCloud>& data,
                              TrainBundle& bundle, const std::filesystem::path& out_dir);

/// VAE objective (EMD reconstruction through the stage-local decoder + KL)
/// over source clouds; trains mode_encoder and vae_decoder.
StageResult train_vae(const AdaptationConfig& cfg, const std::vector<PointCloud>& data,
                      TrainBundle& bundle, const std::filesystem::path& out_dir);

/// Cross-entropy classifier training. `tag` selects the schedule:
/// source_pretrain uses cfg.classifier, downstream_synthetic and
/// supervised_bound use cfg.downstream (weight decay per the evaluation
/// protocol).
StageResult train_classifier(const AdaptationConfig& cfg, const std::vector<PointCloud>& data,
                             const std::string& tag, TrainBundle& bundle,
                             const std::filesystem::path& out_dir);

/// Alternating LSGAN steps: discriminator minimizes the least-squares real /
/// fake loss, the generator minimizes the weighted objective. Pretrained
/// encoder, decoder, mode encoder and (by default) classifier stay frozen.
/// Refuses to run unless ae, vae and classifier stages are recorded.
StageResult train_gan(const AdaptationConfig& cfg, const std::vector<PointCloud>& source,
                      const std::vector<PointCloud>& target, TrainBundle& bundle,
                      const std::filesystem::path& out_dir);

/// One discriminator / generator alternation, exposed so training behavior
/// (update partitioning, freeze contract) is testable step by step.
class GanTrainer {
 public:
  GanTrainer(const AdaptationConfig& cfg, TrainBundle& bundle);
  ~GanTrainer();

  /// Least-squares discriminator update; returns the batch loss.
  double discriminator_step(const std::vector<const PointCloud*>& source,
                            const std::vector<const PointCloud*>& target,
                            const std::vector<ModeVector>& z);

  /// Weighted generator update; returns batch-mean components.
  LossReport generator_step(const std::vector<const PointCloud*>& source,
                            const std::vector<ModeVector>& z);

  const LossWeights& effective_weights() const { return weights_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  LossWeights weights_;
};

/// Decodes samples_per_object generated latents per labeled source cloud and
/// materializes a synthetic dataset with inherited labels.
DatasetManifest generate_synthetic(const AdaptationConfig& cfg, const TrainBundle& bundle,
                                   const Dataset& source, int samples_per_object,
                                   const std::filesystem::path& out_root);

struct ScenarioOutcome {
  std::string scenario;
  std::string ablation;
  u64 seed = 0;
  EvalResult wo_adapt;
  EvalResult adapted;
  std::optional<EvalResult> supervised;
  std::map<std::string, double> stage_seconds;
  std::filesystem::path metrics_path;
};

/// Runs the six stages end to end and writes metrics.json, the comparison
/// report, confusion CSVs and checkpoints under out_dir.
ScenarioOutcome run_scenario(const AdaptationConfig& cfg, const std::filesystem::path& data_root,
                             const std::filesystem::path& out_dir);

/// metrics.json body for an outcome (deterministic; excludes wall-clock).
nlohmann::ordered_json metrics_json(const ScenarioOutcome& outcome,
                                    const AdaptationConfig& cfg);

}  // namespace pcda
