#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "dsnet/analysis.hpp"
#include "dsnet/data.hpp"
#include "dsnet/error.hpp"
#include "dsnet/image_io.hpp"
#include "dsnet/ini.hpp"
#include "dsnet/metrics.hpp"
#include "dsnet/training.hpp"

namespace dsnet::cli {

namespace fs = std::filesystem;

namespace {

// Everything a train or ablate run needs; serialized as the effective config.
struct RunConfig {
  std::string scale = "T";
  std::string dsa = "+FP+FN";
  std::string data;
  std::int64_t size = 352;
  std::string out = "runs/dsnet";
  std::string split_preset = "kvasir-seg";
  std::optional<std::array<double, 3>> split_ratios;
  std::optional<std::array<std::size_t, 3>> split_counts;
  bool train_on_all = false;
  std::string backbone_config;
  std::string backbone_weights;
  TrainConfig train;

  std::string to_ini() const {
    std::ostringstream os;
    os << "[run]\n"
       << "scale = \"" << scale << "\"\n"
       << "dsa = \"" << dsa << "\"\n"
       << "data = \"" << data << "\"\n"
       << "size = " << size << "\n"
       << "out = \"" << out << "\"\n"
       << "split_preset = \"" << split_preset << "\"\n";
    if (split_ratios) {
      os << "split_ratios = [" << ini::number_text((*split_ratios)[0]) << ", " << ini::number_text((*split_ratios)[1])
         << ", " << ini::number_text((*split_ratios)[2]) << "]\n";
    }
    if (split_counts) {
      os << "split_counts = [" << (*split_counts)[0] << ", " << (*split_counts)[1] << ", " << (*split_counts)[2]
         << "]\n";
    }
    os << "train_on_all = " << (train_on_all ? "true" : "false") << "\n";
    if (!backbone_config.empty()) os << "backbone_config = \"" << backbone_config << "\"\n";
    if (!backbone_weights.empty()) os << "backbone_weights = \"" << backbone_weights << "\"\n";
    os << "\n" << train.to_ini();
    return os.str();
  }

  void apply_file(const fs::path& path) {
    const auto text = ini::read_file(path);
    const auto sections = ini::parse_sections(text);
    for (const auto& [name, _] : sections) {
      if (name != "run" && name != "train") throw ConfigError("unknown section [" + name + "] in " + path.string());
    }
    if (auto it = sections.find("run"); it != sections.end()) {
      const auto& s = it->second;
      ini::reject_unknown(s,
                          {"scale", "dsa", "data", "size", "out", "split_preset", "split_ratios", "split_counts",
                           "train_on_all", "backbone_config", "backbone_weights"},
                          "run");
      ini::read_string(s, "scale", scale);
      ini::read_string(s, "dsa", dsa);
      ini::read_string(s, "data", data);
      ini::read_int(s, "size", size);
      ini::read_string(s, "out", out);
      ini::read_string(s, "split_preset", split_preset);
      if (auto v = ini::find_key(s, "split_ratios")) {
        if (v->size() != 3) throw ConfigError("split_ratios needs 3 values");
        split_ratios = std::array<double, 3>{};
        for (int i = 0; i < 3; ++i) (*split_ratios)[i] = ini::to_double("split_ratios", (*v)[i]);
      }
      if (auto v = ini::find_key(s, "split_counts")) {
        if (v->size() != 3) throw ConfigError("split_counts needs 3 values");
        split_counts = std::array<std::size_t, 3>{};
        for (int i = 0; i < 3; ++i) {
          const auto n = ini::to_int("split_counts", (*v)[i]);
          if (n < 0) throw ConfigError("split_counts must be non-negative");
          (*split_counts)[i] = static_cast<std::size_t>(n);
        }
      }
      ini::read_bool(s, "train_on_all", train_on_all);
      ini::read_string(s, "backbone_config", backbone_config);
      ini::read_string(s, "backbone_weights", backbone_weights);
    }
    train = TrainConfig::from_ini(text, train);
  }

  ModelConfig model_config() const {
    auto mc = ModelConfig::for_scale(parse_scale(scale), DSAConfig::parse(dsa));
    if (!backbone_config.empty()) mc.encoder = MiTConfig::load(backbone_config);
    mc.validate();
    return mc;
  }

  SplitSpec split_spec() const {
    SplitSpec spec = SplitSpec::preset(split_preset, train.seed);
    if (split_ratios) spec.ratios = *split_ratios;
    if (split_counts) spec.counts = *split_counts;
    return spec;
  }
};

// Flags shared by train and ablate; values are applied only when given, so
// that explicit flags beat the config file which beats the defaults.
struct RunFlags {
  std::string config;
  RunConfig values;
  std::int64_t seed = 0;
  std::vector<double> split_ratios;
  std::vector<std::size_t> split_counts;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App& app, bool ablate) {
    app.add_option("--config", config, "Key-value config file with [run] and [train] sections")->check(CLI::ExistingFile);
    opts["data"] = app.add_option("--data", values.data, "Dataset root with images/ and masks/");
    opts["scale"] = app.add_option("--scale", values.scale, "Model scale: T, S, B or L");
    if (!ablate) opts["dsa"] = app.add_option("--dsa", values.dsa, "DSA variant: B, +FP, +FN or +FP+FN");
    opts["size"] = app.add_option("--size", values.size, "Square input size (multiple of 32)");
    opts["out"] = app.add_option("--out", values.out, "Output directory");
    opts["seed"] = app.add_option("--seed", seed, "Seed for initialization, split, order and augmentation");
    opts["epochs"] = app.add_option("--epochs", values.train.epochs, "Epoch budget");
    opts["batch"] = app.add_option("--batch-size", values.train.batch_size, "Batch size");
    opts["lr"] = app.add_option("--lr", values.train.lr, "Initial learning rate");
    opts["wd"] = app.add_option("--weight-decay", values.train.weight_decay, "AdamW decoupled weight decay");
    opts["patience"] = app.add_option("--patience", values.train.patience, "Plateau patience in epochs");
    opts["min_lr"] = app.add_option("--min-lr", values.train.min_lr, "Learning-rate floor");
    opts["preset"] = app.add_option("--split-preset", values.split_preset,
                                    "Split proportions: cvc-clinicdb, kvasir-seg or isic-2018");
    opts["ratios"] = app.add_option("--split-ratios", split_ratios, "train valid test fractions")->expected(3);
    opts["counts"] = app.add_option("--split-counts", split_counts, "train valid test counts")->expected(3);
    opts["all"] = app.add_flag("--train-on-all", values.train_on_all,
                               "Use every sample for training, validation and testing");
    opts["noaug"] = app.add_flag("--no-augment", "Disable augmentation");
    opts["bb_cfg"] = app.add_option("--backbone-config", values.backbone_config, "Encoder config file")
                         ->check(CLI::ExistingFile);
    opts["bb_w"] = app.add_option("--backbone-weights", values.backbone_weights, "Encoder weight file")
                       ->check(CLI::ExistingFile);
  }

  bool given(const std::string& key) const {
    auto it = opts.find(key);
    return it != opts.end() && it->second->count() > 0;
  }

  RunConfig resolve() const {
    RunConfig r;
    if (!config.empty()) r.apply_file(config);
    auto take = [&](const char* key, auto member) {
      if (given(key)) r.*member = values.*member;
    };
    take("data", &RunConfig::data);
    take("scale", &RunConfig::scale);
    take("dsa", &RunConfig::dsa);
    take("size", &RunConfig::size);
    take("out", &RunConfig::out);
    take("preset", &RunConfig::split_preset);
    take("all", &RunConfig::train_on_all);
    take("bb_cfg", &RunConfig::backbone_config);
    take("bb_w", &RunConfig::backbone_weights);
    if (given("seed")) {
      if (seed < 0) throw ConfigError("--seed must be non-negative");
      r.train.seed = static_cast<std::uint64_t>(seed);
    }
    if (given("epochs")) r.train.epochs = values.train.epochs;
    if (given("batch")) r.train.batch_size = values.train.batch_size;
    if (given("lr")) r.train.lr = values.train.lr;
    if (given("wd")) r.train.weight_decay = values.train.weight_decay;
    if (given("patience")) r.train.patience = values.train.patience;
    if (given("min_lr")) r.train.min_lr = values.train.min_lr;
    if (given("noaug")) r.train.augment = false;
    if (given("ratios")) r.split_ratios = std::array<double, 3>{split_ratios[0], split_ratios[1], split_ratios[2]};
    if (given("counts")) {
      r.split_counts = std::array<std::size_t, 3>{split_counts[0], split_counts[1], split_counts[2]};
    }
    if (r.data.empty()) throw ConfigError("no dataset given (use --data or [run] data in --config)");
    require_input_extent(r.size, r.size);
    r.train.validate();
    r.model_config();
    return r;
  }
};

struct Splits {
  std::vector<Sample> train, valid, test;
  std::string file_text;
};

Splits make_splits(const RunConfig& rc, const std::vector<Sample>& samples) {
  Splits s;
  if (rc.train_on_all) {
    s.train = s.valid = s.test = samples;
    for (const auto& x : samples) s.file_text += x.id + " train\n";
    return s;
  }
  const auto idx = make_split(samples.size(), rc.split_spec());
  s.train = gather(samples, idx.train);
  s.valid = gather(samples, idx.valid);
  s.test = gather(samples, idx.test);
  s.file_text = split_file_text(samples, idx);
  if (s.train.empty() || s.valid.empty()) {
    throw ConfigError("split leaves an empty train or valid set for " + std::to_string(samples.size()) + " samples");
  }
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::vector<Sample> load_samples(const std::string& root, std::int64_t size, std::ostream& err) {
  auto loaded = load_dataset(root, size);
  for (const auto& e : loaded.errors) err << "warning: " << e << "\n";
  return std::move(loaded.samples);
}

struct TrainedRun {
  MetricReport report;
  std::string report_split;
  std::int64_t params = 0;
};

// Trains one model into `dir` and evaluates its best checkpoint on the test
// split (validation split if the test split is empty).
TrainedRun train_one(const RunConfig& rc, const ModelConfig& mc, const Splits& splits, const fs::path& dir,
                     std::optional<fs::path> resume, std::ostream& out) {
  fs::create_directories(dir);
  write_file(dir / "effective_config.ini", rc.to_ini());
  write_file(dir / "split.txt", splits.file_text);

  Rng init(rc.train.seed);
  DSNet<float> model(mc, init);
  if (!rc.backbone_weights.empty()) load_backbone_weights(model.encoder(), rc.backbone_weights);

  TrainOptions opts;
  opts.out_dir = dir;
  opts.resume = std::move(resume);
  opts.on_epoch = [&out](const EpochRecord& r) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %lld  loss %.5f  val mDice %.4f  mIoU %.4f  lr %.3g%s\n",
                  static_cast<long long>(r.epoch), r.train_loss, r.val_mdice, r.val_miou, r.lr,
                  r.improved ? "  *" : "");
    out << buf << std::flush;
  };
  const auto result = train_model(model, splits.train, splits.valid, rc.train, opts);

  load_checkpoint(result.best_checkpoint, model);
  TrainedRun run;
  run.report_split = splits.test.empty() ? "valid" : "test";
  run.report = evaluate_split(model, splits.test.empty() ? splits.valid : splits.test, rc.train.threshold,
                              static_cast<std::size_t>(rc.train.batch_size));
  run.params = model.parameter_count();
  write_file(dir / (run.report_split + "_metrics.txt"), run.report.to_text());
  write_file(dir / (run.report_split + "_metrics.json"), run.report.to_json());
  return run;
}

int cmd_train(const RunFlags& flags, const std::string& resume, std::ostream& out, std::ostream& err) {
  const auto rc = flags.resolve();
  const auto mc = rc.model_config();
  const auto samples = load_samples(rc.data, rc.size, err);
  const auto splits = make_splits(rc, samples);
  out << scale_name(mc.scale) << " (" << mc.dsa.label() << "): " << splits.train.size() << " train / "
      << splits.valid.size() << " valid / " << splits.test.size() << " test samples at " << rc.size << "x" << rc.size
      << "\n";
  std::optional<fs::path> resume_path;
  if (!resume.empty()) resume_path = resume;
  const auto run = train_one(rc, mc, splits, rc.out, resume_path, out);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s mDice %.4f  mIoU %.4f\n", run.report_split.c_str(), run.report.mdice,
                run.report.miou);
  out << buf;
  return kExitOk;
}

int cmd_ablate(const RunFlags& flags, std::ostream& out, std::ostream& err) {
  auto rc = flags.resolve();
  if (!flags.given("epochs") && rc.train.epochs == TrainConfig{}.epochs) rc.train.epochs = 5;
  const auto samples = load_samples(rc.data, rc.size, err);
  const auto splits = make_splits(rc, samples);
  std::vector<AblationEntry> entries;
  std::vector<ResultRow> rows;
  const fs::path root = rc.out;
  for (const auto& dsa : DSAConfig::ablation_grid()) {
    RunConfig variant = rc;
    variant.dsa = dsa.label();
    const auto mc = variant.model_config();
    std::string dir = dsa.label();
    for (auto& ch : dir) ch = ch == '+' ? '_' : ch;
    if (dir.front() == '_') dir.erase(0, 1);
    out << "== " << scale_name(mc.scale) << " " << dsa.label() << "\n";
    variant.out = (root / dir).string();
    const auto run = train_one(variant, mc, splits, root / dir, std::nullopt, out);
    AblationEntry e;
    e.scale = mc.scale;
    e.dsa = dsa;
    e.complexity = analyze_complexity(mc, rc.size, rc.size);
    e.mdice = run.report.mdice;
    e.miou = run.report.miou;
    entries.push_back(e);
    rows.push_back({scale_name(mc.scale) + " " + dsa.label(), e.mdice, e.miou, e.complexity.total_params,
                    e.complexity.flops()});
  }
  const auto table = ablation_table_text(entries);
  write_file(root / "ablation.txt", table + "\n" + results_table_text(rows, FlopConvention::kMac));
  write_file(root / "ablation.json", ablation_table_json(entries));
  out << table;
  return kExitOk;
}

std::map<std::string, std::string> read_split_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read split file " + path.string());
  std::map<std::string, std::string> out;
  std::string id, label;
  while (is >> id >> label) out[id] = label;
  return out;
}

struct EvalFlags {
  std::string checkpoint, data, split = "all", split_file, out, scale;
  std::int64_t size = 352;
  double threshold = 0.5;
};

int cmd_eval(const EvalFlags& f, std::ostream& out, std::ostream& err) {
  if (f.split != "all" && f.split != "train" && f.split != "valid" && f.split != "test") {
    throw ConfigError("--split must be one of all, train, valid, test");
  }
  require_input_extent(f.size, f.size);
  const auto stored = checkpoint_model_config(f.checkpoint);
  if (!f.scale.empty() && parse_scale(f.scale) != stored.scale) {
    throw ConfigError("checkpoint holds " + scale_name(stored.scale) + " weights but --scale asks for " +
                      scale_name(parse_scale(f.scale)));
  }
  auto model = load_model(f.checkpoint);
  auto samples = load_samples(f.data, f.size, err);
  if (f.split != "all") {
    fs::path split_path = f.split_file;
    if (split_path.empty()) split_path = fs::path(f.checkpoint).parent_path() / "split.txt";
    const auto labels = read_split_file(split_path);
    std::vector<Sample> chosen;
    for (auto& s : samples) {
      auto it = labels.find(s.id);
      if (it != labels.end() && it->second == f.split) chosen.push_back(std::move(s));
    }
    samples = std::move(chosen);
  }
  if (samples.empty()) throw ConfigError("split '" + f.split + "' is empty");
  const auto report = evaluate_split(*model, samples, f.threshold);
  out << report.to_text();
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_file(fs::path(f.out) / "metrics.txt", report.to_text());
    write_file(fs::path(f.out) / "metrics.json", report.to_json());
  }
  return kExitOk;
}

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

struct PredictFlags {
  std::string checkpoint, image, out;
  double threshold = 0.5;
};

int cmd_predict(const PredictFlags& f, std::ostream& out) {
  auto model = load_model(f.checkpoint);
  const auto img = read_png(f.image);
  const std::int64_t h = img.height, w = img.width;
  const std::int64_t hp = (h + 31) / 32 * 32, wp = (w + 31) / 32 * 32;
  // Reflect-pad on the bottom and right to the next multiple of 32.
  Tensor<float> x(Shape{1, 3, hp, wp});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < hp; ++y)
      for (std::int64_t xx = 0; xx < wp; ++xx) {
        const auto sy = reflect_index(y, h), sx = reflect_index(xx, w);
        const auto src_c = img.channels == 1 ? 0 : c;
        x.mutable_data()[(c * hp + y) * wp + xx] =
            static_cast<float>(img.pixels[static_cast<std::size_t>((sy * w + sx) * img.channels + src_c)]) / 255.0f;
      }
  const auto mask = binarize_logits(model->forward(x), f.threshold);
  RasterImage result{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
  std::int64_t fg = 0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < w; ++xx) {
      const bool on = mask.data()[y * wp + xx] > 0.5f;
      result.pixels[static_cast<std::size_t>(y * w + xx)] = on ? 255 : 0;
      fg += on;
    }
  const fs::path out_path(f.out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_png(out_path, result);
  out << "wrote " << out_path.string() << " (" << w << "x" << h << ", " << fg << " foreground pixels)\n";
  return kExitOk;
}

struct AnalyzeFlags {
  std::string scale, dsa = "+FP+FN", flops = "mac", out;
  std::int64_t size = 352;
  bool ablation = false, json = false;
};

int cmd_analyze(const AnalyzeFlags& f, std::ostream& out) {
  const auto convention = parse_flop_convention(f.flops);
  require_input_extent(f.size, f.size);
  std::string text, json;
  if (f.ablation) {
    std::vector<Scale> scales;
    if (f.scale.empty()) {
      scales = {Scale::kLarge, Scale::kBase, Scale::kSmall, Scale::kTiny};
    } else {
      scales = {parse_scale(f.scale)};
    }
    const auto entries = ablation_complexity(scales, f.size, convention);
    std::vector<ResultRow> rows;
    for (const auto& e : entries) {
      rows.push_back({scale_name(e.scale) + " " + e.dsa.label(), std::nullopt, std::nullopt,
                      e.complexity.total_params, e.complexity.flops()});
    }
    text = ablation_table_text(entries) + "\n" + results_table_text(rows, convention);
    json = ablation_table_json(entries);
  } else {
    const auto mc = ModelConfig::for_scale(parse_scale(f.scale.empty() ? "T" : f.scale), DSAConfig::parse(f.dsa));
    const auto report = analyze_complexity(mc, f.size, f.size, convention);
    text = report.to_text();
    json = report.to_json();
  }
  out << (f.json ? json : text);
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_file(fs::path(f.out) / "complexity.txt", text);
    write_file(fs::path(f.out) / "complexity.json", json);
  }
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"DSNet lesion segmentation: train, evaluate, predict and analyze"};
  app.name("dsnet");
  app.require_subcommand(1);

  RunFlags train_flags;
  std::string resume;
  auto* train = app.add_subcommand("train", "Train a model and evaluate its best checkpoint");
  train_flags.add(*train, false);
  train->add_option("--resume", resume, "Continue from a checkpoint (e.g. <out>/last.ckpt)")->check(CLI::ExistingFile);

  RunFlags ablate_flags;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the B, +FP, +FN and +FP+FN variants");
  ablate_flags.add(*ablate, true);

  EvalFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", eval_flags.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", eval_flags.data, "Dataset root")->required();
  eval->add_option("--size", eval_flags.size, "Square input size (multiple of 32)");
  eval->add_option("--split", eval_flags.split, "all, train, valid or test");
  eval->add_option("--split-file", eval_flags.split_file, "Split file (default: split.txt next to the checkpoint)");
  eval->add_option("--scale", eval_flags.scale, "Expected model scale");
  eval->add_option("--threshold", eval_flags.threshold, "Probability threshold");
  eval->add_option("--out", eval_flags.out, "Directory for metrics.txt and metrics.json");

  PredictFlags predict_flags;
  auto* predict = app.add_subcommand("predict", "Write a binary mask PNG for one image");
  predict->add_option("--checkpoint", predict_flags.checkpoint, "Checkpoint file")->required();
  predict->add_option("--image", predict_flags.image, "Input PNG")->required();
  predict->add_option("--out", predict_flags.out, "Output mask PNG")->required();
  predict->add_option("--threshold", predict_flags.threshold, "Probability threshold");

  AnalyzeFlags analyze_flags;
  auto* analyze = app.add_subcommand("analyze", "Report parameters and FLOPs");
  analyze->add_option("--scale", analyze_flags.scale, "Model scale: T, S, B or L");
  analyze->add_option("--size", analyze_flags.size, "Square input size (multiple of 32)");
  analyze->add_option("--dsa", analyze_flags.dsa, "DSA variant: B, +FP, +FN or +FP+FN");
  analyze->add_option("--flops", analyze_flags.flops, "mac (1 MAC = 1 FLOP) or flop (2 per MAC)");
  analyze->add_flag("--ablation", analyze_flags.ablation, "Complexity of every variant at every scale");
  analyze->add_flag("--json", analyze_flags.json, "Print JSON instead of text");
  analyze->add_option("--out", analyze_flags.out, "Directory for complexity.txt and complexity.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(train_flags, resume, out, err);
    if (ablate->parsed()) return cmd_ablate(ablate_flags, out, err);
    if (eval->parsed()) return cmd_eval(eval_flags, out, err);
    if (predict->parsed()) return cmd_predict(predict_flags, out);
    if (analyze->parsed()) return cmd_analyze(analyze_flags, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dsnet::cli
