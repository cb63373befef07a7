#include "dsnet/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dsnet/error.hpp"
#include "dsnet/ini.hpp"
#include "dsnet/metrics.hpp"

namespace dsnet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train: plateau_factor must lie in (0, 1)");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (!(min_lr >= 0.0) || min_lr > lr) throw ConfigError("train: min_lr must lie in [0, lr]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train: threshold must lie in (0, 1)");
  if (!(augmentation.brightness_min > 0.0 && augmentation.brightness_min <= augmentation.brightness_max)) {
    throw ConfigError("train: brightness range must satisfy 0 < min <= max");
  }
  if (!(loss.dice_smooth >= 0.0)) throw ConfigError("train: dice_smooth must be >= 0");
}

std::string TrainConfig::to_ini() const {
  using ini::number_text;
  std::ostringstream os;
  os << "[train]\n"
     << "epochs = " << epochs << "\n"
     << "batch_size = " << batch_size << "\n"
     << "lr = " << number_text(lr) << "\n"
     << "weight_decay = " << number_text(weight_decay) << "\n"
     << "beta1 = " << number_text(beta1) << "\n"
     << "beta2 = " << number_text(beta2) << "\n"
     << "adam_eps = " << number_text(adam_eps) << "\n"
     << "plateau_factor = " << number_text(plateau_factor) << "\n"
     << "patience = " << patience << "\n"
     << "min_lr = " << number_text(min_lr) << "\n"
     << "seed = " << seed << "\n"
     << "threshold = " << number_text(threshold) << "\n"
     << "augment = " << (augment ? "true" : "false") << "\n"
     << "brightness_min = " << number_text(augmentation.brightness_min) << "\n"
     << "brightness_max = " << number_text(augmentation.brightness_max) << "\n"
     << "hflip_probability = " << number_text(augmentation.hflip_probability) << "\n"
     << "vflip_probability = " << number_text(augmentation.vflip_probability) << "\n"
     << "rotate = " << (augmentation.rotate ? "true" : "false") << "\n"
     << "arbitrary_angle = " << (augmentation.arbitrary_angle ? "true" : "false") << "\n"
     << "max_angle = " << number_text(augmentation.max_angle) << "\n"
     << "bce_weight = " << number_text(loss.bce_weight) << "\n"
     << "dice_weight = " << number_text(loss.dice_weight) << "\n"
     << "dice_smooth = " << number_text(loss.dice_smooth) << "\n";
  return os.str();
}

TrainConfig TrainConfig::from_ini(const std::string& text) { return from_ini(text, TrainConfig{}); }

TrainConfig TrainConfig::from_ini(const std::string& text, const TrainConfig& base) {
  TrainConfig c = base;
  auto sections = ini::parse_sections(text);
  auto it = sections.find("train");
  if (it == sections.end()) return c;
  const auto& s = it->second;
  ini::reject_unknown(s,
                      {"epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "adam_eps",
                       "plateau_factor", "patience", "min_lr", "seed", "threshold", "augment", "brightness_min",
                       "brightness_max", "hflip_probability", "vflip_probability", "rotate", "arbitrary_angle",
                       "max_angle", "bce_weight", "dice_weight", "dice_smooth"},
                      "train");
  ini::read_int(s, "epochs", c.epochs);
  ini::read_int(s, "batch_size", c.batch_size);
  ini::read_double(s, "lr", c.lr);
  ini::read_double(s, "weight_decay", c.weight_decay);
  ini::read_double(s, "beta1", c.beta1);
  ini::read_double(s, "beta2", c.beta2);
  ini::read_double(s, "adam_eps", c.adam_eps);
  ini::read_double(s, "plateau_factor", c.plateau_factor);
  ini::read_int(s, "patience", c.patience);
  ini::read_double(s, "min_lr", c.min_lr);
  std::int64_t seed = static_cast<std::int64_t>(c.seed);
  ini::read_int(s, "seed", seed);
  if (seed < 0) throw ConfigError("train: seed must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  ini::read_double(s, "threshold", c.threshold);
  ini::read_bool(s, "augment", c.augment);
  ini::read_double(s, "brightness_min", c.augmentation.brightness_min);
  ini::read_double(s, "brightness_max", c.augmentation.brightness_max);
  ini::read_double(s, "hflip_probability", c.augmentation.hflip_probability);
  ini::read_double(s, "vflip_probability", c.augmentation.vflip_probability);
  ini::read_bool(s, "rotate", c.augmentation.rotate);
  ini::read_bool(s, "arbitrary_angle", c.augmentation.arbitrary_angle);
  ini::read_double(s, "max_angle", c.augmentation.max_angle);
  ini::read_double(s, "bce_weight", c.loss.bce_weight);
  ini::read_double(s, "dice_weight", c.loss.dice_weight);
  ini::read_double(s, "dice_smooth", c.loss.dice_smooth);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// AdamW

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>> params, Hyper hyper) : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T{0});
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T{0});
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "' (optimizer step " + std::to_string(steps_ + 1) + ")");
      }
    }
  }
  ++steps_;
  const double b1 = hyper_.beta1, b2 = hyper_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double bc2_sqrt = std::sqrt(1.0 - std::pow(b2, static_cast<double>(steps_)));
  const double step_size = lr / bc1;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    const double shrink = p.decay ? 1.0 - lr * hyper_.weight_decay : 1.0;
    auto w = p.tensor.mutable_values();
    const auto g = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double denom = std::sqrt(static_cast<double>(v[j])) / bc2_sqrt + hyper_.eps;
      w[j] = static_cast<T>(static_cast<double>(w[j]) * shrink - step_size * static_cast<double>(m[j]) / denom);
    }
  }
}

template <typename T>
void AdamW<T>::export_state(Archive& ar) const {
  ar.put_text("adam/steps", std::to_string(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& shape = params_[i].tensor.shape();
    ar.put("adam/m/" + params_[i].name, Tensor<T>(shape, m_[i]));
    ar.put("adam/v/" + params_[i].name, Tensor<T>(shape, v_[i]));
  }
}

template <typename T>
void AdamW<T>::import_state(const Archive& ar) {
  std::vector<std::string> problems;
  if (!ar.contains("adam/steps") || !ar.is_text("adam/steps")) problems.push_back("missing adam/steps");
  for (const auto& p : params_) {
    for (const char* kind : {"adam/m/", "adam/v/"}) {
      const auto key = kind + p.name;
      if (!ar.contains(key) || ar.is_text(key)) {
        problems.push_back("missing " + key);
      } else if (ar.tensor(key).shape != p.tensor.shape()) {
        problems.push_back("shape mismatch " + key);
      }
    }
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "optimizer state import failed:";
    for (const auto& p : problems) os << "\n  " << p;
    throw ConfigError(os.str());
  }
  steps_ = std::stoull(ar.text("adam/steps"));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto m = ar.tensor("adam/m/" + params_[i].name).template to_tensor<T>();
    const auto v = ar.tensor("adam/v/" + params_[i].name).template to_tensor<T>();
    m_[i].assign(m.values().begin(), m.values().end());
    v_[i].assign(v.values().begin(), v.values().end());
  }
}

template class AdamW<float>;
template class AdamW<double>;

// ---------------------------------------------------------------------------
// PlateauScheduler

PlateauScheduler::PlateauScheduler(double lr, double factor, std::int64_t patience, double min_lr)
    : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {
  if (!(lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience < 1 || !(min_lr >= 0.0)) {
    throw ConfigError("plateau scheduler: invalid settings");
  }
}

bool PlateauScheduler::step(double metric) {
  ++epochs_;
  if (!best_ || metric > *best_) {
    best_ = metric;
    best_epoch_ = epochs_;
    bad_epochs_ = 0;
    return true;
  }
  if (++bad_epochs_ >= patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_epochs_ = 0;
  }
  return false;
}

std::string PlateauScheduler::state() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g %.17g %lld %.17g %d %.17g %lld %lld %lld", lr_, factor_,
                static_cast<long long>(patience_), min_lr_, best_ ? 1 : 0, best_.value_or(0.0),
                static_cast<long long>(bad_epochs_), static_cast<long long>(epochs_),
                static_cast<long long>(best_epoch_));
  return buf;
}

void PlateauScheduler::restore(const std::string& state) {
  std::istringstream is(state);
  double lr, factor, min_lr, best;
  long long patience, bad, epochs, best_epoch;
  int has_best;
  if (!(is >> lr >> factor >> patience >> min_lr >> has_best >> best >> bad >> epochs >> best_epoch)) {
    throw FormatError("malformed scheduler state '" + state + "'");
  }
  lr_ = lr;
  factor_ = factor;
  patience_ = patience;
  min_lr_ = min_lr;
  best_ = has_best ? std::optional<double>(best) : std::nullopt;
  bad_epochs_ = bad;
  epochs_ = epochs;
  best_epoch_ = best_epoch;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointFormat = "dsnet-checkpoint 1";

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

Archive open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  auto ar = Archive::load(path);
  if (!ar.contains("meta/format") || !ar.is_text("meta/format") || ar.text("meta/format") != kCheckpointFormat) {
    throw FormatError(path.string() + " is not a DSNet checkpoint (or has an unsupported version)");
  }
  if (!ar.contains("meta/model") || !ar.is_text("meta/model")) {
    throw FormatError(path.string() + " has no model configuration");
  }
  return ar;
}

}  // namespace

void save_checkpoint(const fs::path& path, const DSNet<float>& model, const AdamW<float>* optimizer,
                     const TrainProgress* progress, const TrainConfig* cfg) {
  Archive ar;
  ar.put_text("meta/format", kCheckpointFormat);
  ar.put_text("meta/model", model.config().to_ini());
  if (cfg) ar.put_text("meta/train", cfg->to_ini());
  if (progress) {
    ar.put_text("meta/epoch", std::to_string(progress->epoch));
    ar.put_text("meta/scheduler", progress->scheduler);
    ar.put_text("meta/rng", progress->rng);
    ar.put_text("meta/log", progress->log);
  }
  export_state(model, ar);
  if (optimizer) optimizer->export_state(ar);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  ar.save(path);
}

void load_checkpoint(const fs::path& path, DSNet<float>& model, AdamW<float>* optimizer, TrainProgress* progress) {
  const auto ar = open_checkpoint(path);
  const auto stored = lines_of(ar.text("meta/model"));
  const auto current = lines_of(model.config().to_ini());
  if (stored != current) {
    std::ostringstream os;
    os << "checkpoint " << path.string() << " was saved for a different model:";
    for (std::size_t i = 0; i < std::max(stored.size(), current.size()); ++i) {
      const auto a = i < stored.size() ? stored[i] : std::string("<none>");
      const auto b = i < current.size() ? current[i] : std::string("<none>");
      if (a != b) os << "\n  checkpoint: " << a << "  |  model: " << b;
    }
    throw ConfigError(os.str());
  }
  if (progress) {
    for (const char* key : {"meta/epoch", "meta/scheduler", "meta/rng", "meta/log"}) {
      if (!ar.contains(key)) throw ConfigError("checkpoint " + path.string() + " has no training progress (" + key + ")");
    }
  }
  if (optimizer) optimizer->import_state(ar);
  import_state(model, ar);
  if (progress) {
    progress->epoch = std::stoll(ar.text("meta/epoch"));
    progress->scheduler = ar.text("meta/scheduler");
    progress->rng = ar.text("meta/rng");
    progress->log = ar.text("meta/log");
  }
}

ModelConfig checkpoint_model_config(const fs::path& path) {
  return ModelConfig::from_ini(open_checkpoint(path).text("meta/model"));
}

std::unique_ptr<DSNet<float>> load_model(const fs::path& path) {
  const auto cfg = checkpoint_model_config(path);
  Rng rng(0);
  auto model = std::make_unique<DSNet<float>>(cfg, rng);
  load_checkpoint(path, *model);
  model->eval();
  return model;
}

// ---------------------------------------------------------------------------
// Training loop

std::string EpochRecord::to_json_line() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\": %lld, \"train_loss\": %.17g, \"val_mdice\": %.17g, \"val_miou\": %.17g, "
                "\"lr\": %.17g, \"improved\": %s}",
                static_cast<long long>(epoch), train_loss, val_mdice, val_miou, lr, improved ? "true" : "false");
  return buf;
}

namespace {

// Data order and augmentation draw from their own stream so that changing
// the model initialization never perturbs the batches.
std::uint64_t data_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << line << '\n';
}

}  // namespace

TrainResult train_model(DSNet<float>& model, std::span<const Sample> train_set, std::span<const Sample> valid_set,
                        const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training split");
  if (valid_set.empty()) throw ConfigError("train: empty validation split");
  if (opts.out_dir.empty()) throw ConfigError("train: output directory not set");
  fs::create_directories(opts.out_dir);

  TrainResult result;
  result.log_file = opts.out_dir / "log.jsonl";
  result.last_checkpoint = opts.out_dir / "last.ckpt";
  result.best_checkpoint = opts.out_dir / "best.ckpt";
  const auto timing_file = opts.out_dir / "timing.jsonl";

  AdamW<float> optimizer(model.named_parameters(), {cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps});
  PlateauScheduler scheduler(cfg.lr, cfg.plateau_factor, cfg.patience, cfg.min_lr);
  Rng rng(data_seed(cfg.seed));
  std::string log;
  std::int64_t start_epoch = 1;

  if (opts.resume) {
    TrainProgress progress;
    load_checkpoint(*opts.resume, model, &optimizer, &progress);
    scheduler.restore(progress.scheduler);
    rng.restore(progress.rng);
    log = progress.log;
    start_epoch = progress.epoch + 1;
  }
  write_text(result.log_file, log);
  if (!opts.resume) write_text(timing_file, "");

  const std::int64_t last_epoch = std::min(cfg.epochs, opts.stop_after.value_or(cfg.epochs));
  for (std::int64_t epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = scheduler.lr();
    model.train();
    BatchIterator batches(train_set, static_cast<std::size_t>(cfg.batch_size), rng, false,
                          cfg.augment ? &cfg.augmentation : nullptr);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::int64_t step = 1; batches.has_next(); ++step) {
      const auto samples = batches.next();
      auto batch = make_batch<float>(samples);
      if (opts.on_batch) opts.on_batch(epoch, step, batch);
      Tape<float> tape;
      Tensor<float> loss;
      {
        TapeScope<float> scope(tape);
        loss = combined_loss(model.forward(batch.images), batch.masks, cfg.loss);
      }
      const auto where = [&] {
        return " at epoch " + std::to_string(epoch) + " step " + std::to_string(step) + "; last good checkpoint: " +
               (epoch > start_epoch || opts.resume ? result.last_checkpoint.string() : std::string("<none>"));
      };
      const double value = loss.item();
      if (!std::isfinite(value)) throw NumericError("non-finite training loss" + where());
      model.zero_grad();
      tape.backward(loss);
      try {
        optimizer.step(lr);
      } catch (const NumericError& e) {
        throw NumericError(e.what() + where());
      }
      loss_sum += value * static_cast<double>(samples.size());
      seen += samples.size();
    }

    const auto report = evaluate_split(model, valid_set, cfg.threshold, static_cast<std::size_t>(cfg.batch_size));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.val_mdice = report.mdice;
    rec.val_miou = report.miou;
    rec.lr = lr;
    rec.improved = scheduler.step(report.mdice);

    const auto line = rec.to_json_line();
    log += line + "\n";
    append_line(result.log_file, line);

    TrainProgress progress{epoch, scheduler.state(), rng.state(), log};
    if (rec.improved) save_checkpoint(result.best_checkpoint, model, &optimizer, &progress, &cfg);
    save_checkpoint(result.last_checkpoint, model, &optimizer, &progress, &cfg);

    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char tbuf[128];
    std::snprintf(tbuf, sizeof tbuf, "{\"epoch\": %lld, \"wall_seconds\": %.3f}", static_cast<long long>(epoch),
                  seconds);
    append_line(timing_file, tbuf);

    result.records.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (opts.stop_when && opts.stop_when(rec)) break;
  }
  result.best_mdice = scheduler.best().value_or(0.0);
  result.best_epoch = scheduler.best_epoch();
  return result;
}

}  // namespace dsnet
