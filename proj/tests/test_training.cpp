#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dsnet/error.hpp"
#include "dsnet/metrics.hpp"
#include "dsnet/training.hpp"
#include "support.hpp"

using namespace dsnet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TrainConfig smoke_config(std::int64_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  c.patience = 2;
  return c;
}

std::unique_ptr<DSNet<float>> fresh_model(std::uint64_t seed) {
  Rng rng(seed);
  return std::make_unique<DSNet<float>>(test::tiny_model_config({true, true}), rng);
}

const std::vector<Sample>& smoke_data() {
  static const auto samples = synthetic_ellipses(8, 32, 5);
  return samples;
}

std::span<const Sample> first(std::size_t n) { return std::span<const Sample>(smoke_data()).first(n); }
std::span<const Sample> last(std::size_t n) { return std::span<const Sample>(smoke_data()).last(n); }

}  // namespace

TEST_CASE("AdamW matches a scalar reference over several steps") {
  Tensor<double> w(Shape{1}, 1.0), b(Shape{1}, -0.5);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  AdamW<double>::Hyper h;
  h.weight_decay = 1e-2;
  AdamW<double> opt({{"w", w, true}, {"b", b, false}}, h);
  const double lr = 1e-3;
  const double grads_w[] = {0.5, -0.2, 1e-3}, grads_b[] = {-3.0, 0.0, 2.0};
  long double pw = 1.0L, pb = -0.5L, mw = 0, vw = 0, mb = 0, vb = 0;
  for (int t = 1; t <= 3; ++t) {
    w.grad_buffer()[0] = grads_w[t - 1];
    b.grad_buffer()[0] = grads_b[t - 1];
    opt.step(lr);
    const long double bc1 = 1 - std::pow(0.9L, t), bc2 = 1 - std::pow(0.999L, t);
    auto ref = [&](long double& p, long double& m, long double& v, long double g, bool decay) {
      if (decay) p *= 1 - lr * 1e-2L;
      m = 0.9L * m + 0.1L * g;
      v = 0.999L * v + 0.001L * g * g;
      p -= (lr / bc1) * m / (std::sqrt(v) / std::sqrt(bc2) + 1e-8L);
    };
    ref(pw, mw, vw, grads_w[t - 1], true);
    ref(pb, mb, vb, grads_b[t - 1], false);
    CHECK(std::abs(w.data()[0] - static_cast<double>(pw)) < 1e-12);
    CHECK(std::abs(b.data()[0] - static_cast<double>(pb)) < 1e-12);
    w.zero_grad();
    b.zero_grad();
  }
  CHECK(opt.steps() == 3);
}

TEST_CASE("AdamW decoupled decay shrinks only decayed parameters") {
  Tensor<double> w(Shape{2}, std::vector<double>{2.0, -4.0}), n(Shape{1}, 3.0), untouched(Shape{1}, 7.0);
  AdamW<double>::Hyper h;
  h.weight_decay = 0.1;
  AdamW<double> opt({{"w", w, true}, {"norm", n, false}, {"idle", untouched, true}}, h);
  w.grad_buffer();
  n.grad_buffer();
  opt.step(0.5);
  CHECK(w.data()[0] == doctest::Approx(2.0 * 0.95).epsilon(1e-15));
  CHECK(w.data()[1] == doctest::Approx(-4.0 * 0.95).epsilon(1e-15));
  CHECK(n.data()[0] == 3.0);
  CHECK(untouched.data()[0] == 7.0);
}

TEST_CASE("AdamW refuses non-finite gradients without touching anything") {
  Tensor<double> a(Shape{1}, 1.0), b(Shape{1}, 2.0);
  AdamW<double> opt({{"layer.a", a, true}, {"layer.b", b, true}}, {});
  a.grad_buffer()[0] = 0.1;
  b.grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    opt.step(1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.b") != std::string::npos);
  }
  CHECK(a.data()[0] == 1.0);
  CHECK(b.data()[0] == 2.0);
  CHECK(opt.steps() == 0);
}

TEST_CASE("AdamW state round-trips and rejects mismatched moments") {
  Tensor<double> a(Shape{2}, 1.0);
  AdamW<double> opt({{"a", a, true}}, {});
  a.grad_buffer()[0] = 0.3;
  opt.step(1e-2);
  Archive ar;
  opt.export_state(ar);
  Tensor<double> a2(Shape{2}, 1.0);
  AdamW<double> other({{"a", a2, true}}, {});
  other.import_state(ar);
  CHECK(other.steps() == 1);
  Archive again;
  other.export_state(again);
  std::ostringstream s1, s2;
  ar.write(s1);
  again.write(s2);
  CHECK(s1.str() == s2.str());
  Tensor<double> wrong(Shape{3}, 1.0);
  AdamW<double> bad({{"a", wrong, true}}, {});
  CHECK_THROWS_AS(bad.import_state(ar), ConfigError);
}

TEST_CASE("plateau scheduler: halves after 10 flat epochs and clamps at the minimum") {
  PlateauScheduler s(1e-4, 0.5, 10, 1e-6);
  CHECK(s.step(0.5));
  for (int i = 1; i <= 9; ++i) {
    CHECK_FALSE(s.step(0.5));  // equal is not an improvement
    CHECK(s.lr() == 1e-4);
  }
  CHECK_FALSE(s.step(0.4));
  CHECK(s.lr() == 5e-5);
  CHECK(s.bad_epochs() == 0);
  CHECK(s.step(0.6));
  CHECK(s.best_epoch() == 12);
  std::vector<double> seen;
  for (int i = 0; i < 200; ++i) {
    s.step(0.1);
    seen.push_back(s.lr());
  }
  CHECK(s.lr() == 1e-6);
  CHECK(std::count(seen.begin(), seen.end(), 1e-6) > 100);
  // 5e-5 halves every 10 flat epochs: 2.5e-5 ... 1.5625e-6, then clamps.
  CHECK(seen[9] == 2.5e-5);
  CHECK(seen[49] == 1.5625e-6);
  CHECK(seen[58] == 1.5625e-6);
  CHECK(seen[59] == 1e-6);

  PlateauScheduler r(1.0);
  r.restore(s.state());
  CHECK(r.state() == s.state());
  CHECK(r.best() == s.best());
  CHECK_THROWS_AS(PlateauScheduler(1e-4, 1.5), ConfigError);
  CHECK_THROWS(r.restore("garbage"));
}

TEST_CASE("train config ini round-trip and validation") {
  TrainConfig c;
  c.epochs = 7;
  c.lr = 3e-4;
  c.augment = false;
  c.loss.dice_weight = 0.25;
  c.augmentation.arbitrary_angle = true;
  const auto back = TrainConfig::from_ini(c.to_ini());
  CHECK(back.to_ini() == c.to_ini());
  CHECK(back.lr == 3e-4);
  CHECK(TrainConfig::from_ini("[train]\nepochs = 3\n", c).lr == 3e-4);
  CHECK_THROWS_AS(TrainConfig::from_ini("[train]\nepoch = 3\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_ini("[train]\nbatch_size = 0\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_ini("[train]\nlr = -1\n"), ConfigError);
}

TEST_CASE("one small AdamW step lowers the training loss") {
  Rng rng(1);
  DSNet<double> model(test::tiny_model_config({true, true}), rng);
  model.train();
  const auto batch = make_batch<double>(first(4));
  AdamW<double> opt(model.named_parameters(), {});
  auto loss_of = [&] { return combined_loss(model.forward(batch.images), batch.masks).item(); };
  Tape<double> tape;
  Tensor<double> loss;
  {
    TapeScope<double> s(tape);
    loss = combined_loss(model.forward(batch.images), batch.masks);
  }
  tape.backward(loss);
  opt.step(1e-6);
  CHECK(loss_of() < loss.item());
}

TEST_CASE("smoke training is bit-reproducible and resumes exactly") {
  const auto a = test::scratch_dir("train_a"), b = test::scratch_dir("train_b"), c = test::scratch_dir("train_c");
  const auto cfg = smoke_config(4);

  auto ma = fresh_model(cfg.seed);
  TrainOptions oa;
  oa.out_dir = a;
  const auto ra = train_model(*ma, first(6), last(2), cfg, oa);
  CHECK(ra.records.size() == 4);
  CHECK(fs::exists(a / "best.ckpt"));
  CHECK(fs::exists(a / "timing.jsonl"));

  auto mb = fresh_model(cfg.seed);
  TrainOptions ob;
  ob.out_dir = b;
  train_model(*mb, first(6), last(2), cfg, ob);
  CHECK(slurp(a / "log.jsonl") == slurp(b / "log.jsonl"));
  CHECK(slurp(a / "last.ckpt") == slurp(b / "last.ckpt"));
  CHECK(slurp(a / "best.ckpt") == slurp(b / "best.ckpt"));

  // Interrupted after two epochs, resumed into a differently initialized model.
  auto mc = fresh_model(cfg.seed);
  TrainOptions oc;
  oc.out_dir = c;
  oc.stop_after = 2;
  CHECK(train_model(*mc, first(6), last(2), cfg, oc).records.size() == 2);
  auto md = fresh_model(99);
  oc.stop_after.reset();
  oc.resume = c / "last.ckpt";
  const auto rc = train_model(*md, first(6), last(2), cfg, oc);
  CHECK(rc.records.size() == 2);
  CHECK(rc.records.front().epoch == 3);
  CHECK(slurp(a / "log.jsonl") == slurp(c / "log.jsonl"));
  CHECK(slurp(a / "last.ckpt") == slurp(c / "last.ckpt"));

  std::istringstream log(slurp(a / "log.jsonl"));
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) CHECK(line.find("\"epoch\": " + std::to_string(lines + 1)) != std::string::npos);
  CHECK(lines == 4);
}

TEST_CASE("checkpoint round-trip preserves bytes, parameter totals and metrics") {
  const auto dir = test::scratch_dir("ckpt_roundtrip");
  auto m = fresh_model(4);
  test::warm_up(*m, 32, 32);
  AdamW<float> opt(m->named_parameters(), {});
  TrainProgress prog{3, PlateauScheduler(1e-4).state(), Rng(1).state(), "{}\n"};
  TrainConfig cfg;
  save_checkpoint(dir / "a.ckpt", *m, &opt, &prog, &cfg);

  auto n = fresh_model(5);
  AdamW<float> opt2(n->named_parameters(), {});
  TrainProgress prog2;
  load_checkpoint(dir / "a.ckpt", *n, &opt2, &prog2);
  CHECK(prog2.epoch == 3);
  CHECK(prog2.log == "{}\n");
  save_checkpoint(dir / "b.ckpt", *n, &opt2, &prog2, &cfg);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  const auto ar = Archive::load(dir / "a.ckpt");
  std::int64_t stored = 0, counted = 0;
  for (const auto& name : ar.names())
    if (name.rfind("param/", 0) == 0) stored += ar.tensor(name).numel();
  for (const auto& p : m->named_parameters()) counted += p.tensor.numel();
  CHECK(stored == counted);

  m->eval();
  auto loaded = load_model(dir / "a.ckpt");
  const auto r1 = evaluate_split(*m, std::span<const Sample>(smoke_data()));
  const auto r2 = evaluate_split(*loaded, std::span<const Sample>(smoke_data()));
  CHECK(r1.mdice == r2.mdice);
  CHECK(r1.miou == r2.miou);
  CHECK(r1.dice == r2.dice);
}

TEST_CASE("loading a checkpoint into a different model fails and changes nothing") {
  const auto dir = test::scratch_dir("ckpt_mismatch");
  auto m = fresh_model(6);
  save_checkpoint(dir / "m.ckpt", *m, nullptr, nullptr, nullptr);
  Rng rng(7);
  DSNet<float> other(test::tiny_model_config({true, false}), rng);
  const auto before = other.named_parameters().front().tensor.clone();
  try {
    load_checkpoint(dir / "m.ckpt", other);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("dsa") != std::string::npos);
  }
  CHECK(other.named_parameters().front().tensor.values()[0] == before.values()[0]);

  Rng r2(8);
  DSNet<float> small(ModelConfig::for_scale(Scale::kSmall), r2);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", small), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt", small), ConfigError);
  std::ofstream(dir / "junk.ckpt") << "junk";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt", small), FormatError);
  TrainProgress p;
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", *m, nullptr, &p), ConfigError);
}

TEST_CASE("a NaN batch aborts training and keeps the last good checkpoint") {
  const auto dir = test::scratch_dir("train_nan");
  auto m = fresh_model(9);
  TrainOptions o;
  o.out_dir = dir;
  o.on_batch = [](std::int64_t epoch, std::int64_t step, Batch<float>& b) {
    if (epoch == 2 && step == 1) b.images.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  };
  try {
    train_model(*m, first(6), last(2), smoke_config(3), o);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    INFO(std::string(e.what()));
    CHECK(std::string(e.what()).find("last.ckpt") != std::string::npos);
    CHECK(std::string(e.what()).find("epoch 2") != std::string::npos);
  }
  auto n = fresh_model(10);
  AdamW<float> opt(n->named_parameters(), {});
  TrainProgress prog;
  load_checkpoint(dir / "last.ckpt", *n, &opt, &prog);
  CHECK(prog.epoch == 1);
}
