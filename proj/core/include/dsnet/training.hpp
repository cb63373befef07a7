#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsnet/data.hpp"
#include "dsnet/decoder.hpp"
#include "dsnet/losses.hpp"
#include "dsnet/module.hpp"
#include "dsnet/serialize.hpp"

namespace dsnet {

struct TrainConfig {
  std::int64_t epochs = 200;
  std::int64_t batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.5;
  std::int64_t patience = 10;
  double min_lr = 1e-6;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool augment = true;
  AugmentConfig augmentation;
  LossConfig loss;

  void validate() const;
  /// [train] section in the same key-value format as model configs.
  std::string to_ini() const;
  /// Applies the keys of a [train] section on top of `base`.
  static TrainConfig from_ini(const std::string& text, const TrainConfig& base);
  static TrainConfig from_ini(const std::string& text);
};

/// AdamW with decoupled weight decay: each step first scales every decayed
/// parameter by (1 - lr * weight_decay), then applies the bias-corrected Adam
/// update. Parameters registered with decay=false skip the shrink.
template <typename T>
class AdamW {
 public:
  struct Hyper {
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamW(std::vector<NamedTensor<T>> params, Hyper hyper);

  /// Throws NumericError naming the first parameter with a non-finite
  /// gradient; nothing is updated in that case. Parameters without a
  /// gradient buffer are left untouched.
  void step(double lr);
  std::uint64_t steps() const { return steps_; }
  const Hyper& hyper() const { return hyper_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }

  /// Moments as "adam/m/<name>" and "adam/v/<name>", plus "adam/steps".
  void export_state(Archive& ar) const;
  /// Throws ConfigError listing missing or misshapen moments.
  void import_state(const Archive& ar);

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  Hyper hyper_;
  std::uint64_t steps_ = 0;
};

/// Reduce-on-plateau for a metric that should increase. A strictly larger
/// value is an improvement and resets the counter; the patience-th
/// consecutive non-improving epoch multiplies lr by `factor` (never below
/// `min_lr`) and restarts the count.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.5, std::int64_t patience = 10, double min_lr = 1e-6);

  /// Feeds one epoch's metric; returns true on improvement.
  bool step(double metric);

  double lr() const { return lr_; }
  std::optional<double> best() const { return best_; }
  std::int64_t bad_epochs() const { return bad_epochs_; }
  std::int64_t epochs_seen() const { return epochs_; }
  std::int64_t best_epoch() const { return best_epoch_; }

  std::string state() const;
  void restore(const std::string& state);

 private:
  double lr_, factor_;
  std::int64_t patience_;
  double min_lr_;
  std::optional<double> best_;
  std::int64_t bad_epochs_ = 0;
  std::int64_t epochs_ = 0;
  std::int64_t best_epoch_ = 0;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double val_mdice = 0.0;
  double val_miou = 0.0;
  double lr = 0.0;  // learning rate used during this epoch
  bool improved = false;

  /// One JSON object on a single line; numbers print exactly.
  std::string to_json_line() const;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Continue from this checkpoint (usually out_dir/last.ckpt).
  std::optional<std::filesystem::path> resume;
  /// Stop after this epoch even if cfg.epochs is larger; resuming later with
  /// the same config continues the schedule.
  std::optional<std::int64_t> stop_after;
  /// Invoked with (epoch, step, batch) before each forward pass.
  std::function<void(std::int64_t, std::int64_t, Batch<float>&)> on_batch;
  /// Invoked after each epoch's record is written.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Ends training after the current epoch when it returns true.
  std::function<bool(const EpochRecord&)> stop_when;
};

struct TrainResult {
  std::vector<EpochRecord> records;
  double best_mdice = 0.0;
  std::int64_t best_epoch = 0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log_file;
};

/// Trains with the combined loss and AdamW, monitors thresholded validation
/// mDice with the plateau scheduler, and writes into out_dir:
///   log.jsonl     one EpochRecord per line (deterministic given the seed)
///   timing.jsonl  wall-clock seconds per epoch
///   last.ckpt     full state after every epoch
///   best.ckpt     full state at the best validation mDice
/// A non-finite loss aborts with NumericError; the checkpoints of the last
/// completed epoch stay intact.
TrainResult train_model(DSNet<float>& model, std::span<const Sample> train_set, std::span<const Sample> valid_set,
                        const TrainConfig& cfg, const TrainOptions& opts);

// ---------------------------------------------------------------------------
// Checkpoints

/// Progress stored alongside the weights so a run can resume exactly.
struct TrainProgress {
  std::int64_t epoch = 0;
  std::string scheduler;
  std::string rng;
  std::string log;
};

void save_checkpoint(const std::filesystem::path& path, const DSNet<float>& model, const AdamW<float>* optimizer,
                     const TrainProgress* progress, const TrainConfig* cfg);

/// Restores weights (and optimizer/progress when given) from `path`. Throws
/// ConfigError listing every mismatch if the stored model configuration or any
/// tensor shape differs from `model`; nothing is modified in that case.
void load_checkpoint(const std::filesystem::path& path, DSNet<float>& model, AdamW<float>* optimizer = nullptr,
                     TrainProgress* progress = nullptr);

/// Model configuration stored in a checkpoint.
ModelConfig checkpoint_model_config(const std::filesystem::path& path);
/// Builds a model from the checkpoint's stored configuration and loads it.
std::unique_ptr<DSNet<float>> load_model(const std::filesystem::path& path);

}  // namespace dsnet
