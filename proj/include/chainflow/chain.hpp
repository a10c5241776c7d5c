#pragma once

// End-to-end speech chain: ASR generation, straight-through discretization,
// teacher-forced TTS reconstruction and the combined loss
//   L_F = w_asr * L_ASR + w_rec * L_rec.

#include "chainflow/asr.hpp"
#include "chainflow/checkpoint.hpp"
#include "chainflow/data.hpp"
#include "chainflow/metrics.hpp"
#include "chainflow/tts.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace chainflow {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;  // global gradient-norm clip
};

struct ChainConfig {
  StMode st_mode = StMode::gumbel;
  GenMode gen_mode = GenMode::teacher_forcing;
  double tau = 1.0;
  AsrConfig asr;
  TtsConfig tts;
  OptimConfig optim;
  std::uint64_t seed = 1;
  int epochs = 30;
  int batch_size = 4;
  double w_asr = 1.0;
  double w_rec = 1.0;
  bool freeze_tts = false;
  int beam = 5;
  int threads = 1;

  void validate() const;
};

/// Parses `key = value` text. Unknown keys and malformed lines raise ParseError.
/// A comma-separated `tau` is returned through `tau_grid`; cfg.tau takes the first entry.
ChainConfig parse_chain_config(const std::string& text, const std::string& source,
                               std::vector<double>* tau_grid = nullptr);
std::string chain_config_to_text(const ChainConfig& cfg);

class ChainModel {
 public:
  explicit ChainModel(const ChainConfig& cfg);

  ParameterSet& params() { return *params_; }
  const ParameterSet& params() const { return *params_; }
  const AsrModel& asr() const { return *asr_; }
  const TtsModel& tts() const { return *tts_; }

 private:
  std::unique_ptr<ParameterSet> params_;
  std::unique_ptr<AsrModel> asr_;
  std::unique_ptr<TtsModel> tts_;
};

struct StepResult {
  double l_asr = 0.0;
  double l_rec = 0.0;
  double l_total = 0.0;
  GradientMap grads;             // of L_F
  double grad_norm_asr_from_rec = 0.0;  // ||d(w_rec L_rec)/d theta_ASR||
  std::vector<int> chain_tokens; // token realization handed to the TTS
  bool truncated = false;
};

/// One utterance through the chain. `rng` drives Gumbel noise and sampling.
StepResult chain_step(const ChainModel& model, const Utterance& utt, const ChainConfig& cfg, Rng& rng);

class Adam {
 public:
  explicit Adam(OptimConfig cfg = {}) : cfg_(cfg) {}
  /// Clips `grads` to the configured global norm, then updates every parameter
  /// that has a gradient. Returns the pre-clip norm.
  double step(ParameterSet& params, GradientMap grads);
  long long steps() const { return t_; }
  void save(ArrayBundle& out) const;
  void load(const ArrayBundle& in, const ParameterSet& params);

 private:
  OptimConfig cfg_;
  long long t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

struct EpochRecord {
  int epoch = 0;
  double l_asr = 0.0;
  double l_rec = 0.0;
  double l_total = 0.0;
  double val_cer = 0.0;
  double grad_norm_asr_from_rec = 0.0;
  double max_decomposition_residual = 0.0;  // max over steps of |L_F - L_ASR - L_rec| (unit weights)
};

/// One metrics-stream line (JSON object).
std::string metrics_line(const EpochRecord& r, const ChainConfig& cfg);

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double best_val_cer = 0.0;
  int best_epoch = 0;  // 0 means the initial parameters
};

/// Owns the optimizer and best-model bookkeeping for one run. Epoch rngs are
/// derived from (seed, epoch), so a resumed trainer replays an uninterrupted one.
class Trainer {
 public:
  Trainer(ChainModel& model, const ChainConfig& cfg, const Corpus& corpus);

  EpochRecord run_epoch();
  int epoch() const { return epoch_; }
  const TrainReport& report() const { return report_; }

  double validation_cer() const;
  void restore_best();

  /// Parameters plus optimizer and bookkeeping state.
  void save_state(ArrayBundle& out) const;
  void load_state(const ArrayBundle& in);
  /// Best parameters seen so far (initial parameters before any epoch).
  const std::vector<Matrix>& best_params() const { return best_; }

 private:
  void snapshot_best();

  ChainModel& model_;
  ChainConfig cfg_;
  const Corpus& corpus_;
  Adam adam_;
  int epoch_ = 0;
  TrainReport report_;
  std::vector<Matrix> best_;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs cfg.epochs - trainer.epoch() further epochs.
TrainReport train(Trainer& trainer, const ChainConfig& cfg, const TrainHooks& hooks = {});

// Model files: parameters under their own names, dims and normalization under "meta." / "norm.".
void save_model(ArrayBundle& out, const ChainModel& model, const ChainConfig& cfg, const NormStats& stats);
void save_model(ArrayBundle& out, const std::vector<Matrix>& values, const ChainModel& model, const ChainConfig& cfg,
                const NormStats& stats);
struct LoadedModel {
  ChainConfig cfg;
  std::unique_ptr<ChainModel> model;
  NormStats stats;
};
LoadedModel load_model(const ArrayBundle& in);
void load_parameters(ParameterSet& params, const ArrayBundle& in);

struct ArmResult {
  double val_cer = 0.0;        // best validation CER during training
  double noiseless_cer = 0.0;  // best model on the noiseless dev split
  TrainReport report;
};

struct AblationRow {
  std::uint64_t seed = 0;
  ArmResult baseline;
  ArmResult proposed;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double mean_baseline_cer() const;
  double mean_proposed_cer() const;
  int proposed_not_worse() const;
};

/// Trains both arms on the same normalized corpus. Arms must share seed and dims.
std::pair<ArmResult, ArmResult> compare_arms(const Corpus& corpus, const std::vector<Utterance>* noiseless_dev,
                                             const ChainConfig& baseline, const ChainConfig& proposed);

/// Per seed: {st_mode=none} vs {teacher_forcing, gumbel, tau=1}, all else from `base`.
AblationReport ablation_compare(const Corpus& corpus, const std::vector<Utterance>* noiseless_dev,
                                const ChainConfig& base, const std::vector<std::uint64_t>& seeds,
                                const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace chainflow
