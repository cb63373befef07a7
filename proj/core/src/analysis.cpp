#include "dsnet/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "json.hpp"

#include "dsnet/error.hpp"

namespace dsnet {

using i64 = std::int64_t;
using u64 = std::uint64_t;

FlopConvention parse_flop_convention(std::string_view text) {
  if (text == "mac" || text == "macs") return FlopConvention::kMac;
  if (text == "flop" || text == "2mac") return FlopConvention::kTwoMac;
  throw ConfigError("unknown FLOP convention '" + std::string(text) + "' (expected mac or flop)");
}

std::string flop_convention_name(FlopConvention c) {
  return c == FlopConvention::kMac ? "mac" : "flop";
}

double ComplexityReport::flops() const {
  return static_cast<double>(total_macs) * (convention == FlopConvention::kMac ? 1.0 : 2.0);
}

namespace {

bool under(const std::string& name, const std::string& prefix) {
  if (prefix.empty()) return true;
  return name == prefix || (name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0 &&
                            name[prefix.size()] == '.');
}

// Accumulates the cost of one block while mirroring its forward pass.
struct Counter {
  BlockCost cost;

  void conv(i64 cin, i64 cout, i64 k, i64 groups, i64 out_pixels, bool bias = true) {
    cost.params += cout * (cin / groups) * k * k + (bias ? cout : 0);
    cost.macs += u64(cout * (cin / groups) * k * k * out_pixels);
  }
  void linear(i64 in, i64 out, i64 rows) {
    cost.params += in * out + out;
    cost.macs += u64(rows * in * out);
  }
  void norm(i64 channels, i64 elements) {
    cost.params += 2 * channels;
    cost.macs += u64(elements);
  }
  void elementwise(i64 elements) { cost.macs += u64(elements); }
  void conv_br(i64 cin, i64 cout, i64 k, i64 pixels) {
    conv(cin, cout, k, 1, pixels);
    norm(cout, cout * pixels);
    elementwise(cout * pixels);
  }
};

}  // namespace

std::int64_t ComplexityReport::params_under(const std::string& prefix) const {
  i64 s = 0;
  for (const auto& b : blocks)
    if (under(b.name, prefix)) s += b.params;
  return s;
}

std::uint64_t ComplexityReport::macs_under(const std::string& prefix) const {
  u64 s = 0;
  for (const auto& b : blocks)
    if (under(b.name, prefix)) s += b.macs;
  return s;
}

ComplexityReport analyze_complexity(const ModelConfig& cfg, std::int64_t height, std::int64_t width,
                                    FlopConvention convention) {
  cfg.validate();
  const auto& e = cfg.encoder;
  require_input_extent(height, width, e.total_stride());

  ComplexityReport r;
  r.network = scale_name(cfg.scale);
  r.variant = cfg.dsa.label();
  r.height = height;
  r.width = width;
  r.convention = convention;
  auto push = [&r](Counter& c, std::string name) {
    c.cost.name = std::move(name);
    r.blocks.push_back(c.cost);
  };

  std::array<i64, 4> hs{}, ws{};
  i64 h = height, w = width, cin = e.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string stage = "encoder.stage" + std::to_string(i + 1);
    const i64 c = e.embed_dims[i];
    h = (h + 2 * e.patch_paddings[i] - e.patch_kernels[i]) / e.patch_strides[i] + 1;
    w = (w + 2 * e.patch_paddings[i] - e.patch_kernels[i]) / e.patch_strides[i] + 1;
    hs[i] = h;
    ws[i] = w;
    const i64 l = h * w;
    {
      Counter k;
      k.conv(cin, c, e.patch_kernels[i], 1, l);
      k.norm(c, l * c);
      push(k, stage + ".patch_embed");
    }
    const i64 sr = e.sr_ratios[i], heads = e.num_heads[i], hidden = c * e.mlp_ratios[i];
    for (i64 b = 0; b < e.depths[i]; ++b) {
      Counter k;
      k.norm(c, l * c);  // norm1
      k.linear(c, c, l); // q
      i64 lk = l;
      if (sr > 1) {
        lk = (h / sr) * (w / sr);
        k.conv(c, c, sr, 1, lk);
        k.norm(c, lk * c);
      }
      k.linear(c, c, lk);  // k
      k.linear(c, c, lk);  // v
      k.elementwise(l * lk * 2 * c + heads * l * lk);
      k.linear(c, c, l);   // proj
      k.elementwise(l * c);  // residual
      k.norm(c, l * c);    // norm2
      k.linear(c, hidden, l);
      k.conv(hidden, hidden, 3, hidden, l);
      k.elementwise(l * hidden);  // gelu
      k.linear(hidden, c, l);
      k.elementwise(l * c);  // residual
      push(k, stage + ".block" + std::to_string(b));
    }
    Counter k;
    k.norm(c, l * c);
    push(k, stage + ".norm");
    cin = c;
  }

  const auto& d = cfg.decoder;
  std::array<i64, 4> px{};
  for (int i = 0; i < 4; ++i) px[i] = hs[i] * ws[i];
  for (int i = 0; i < 4; ++i) {
    Counter k;
    k.conv_br(e.embed_dims[i], d.reduced_channels[i], 1, px[i]);
    push(k, "decoder.reduce" + std::to_string(i + 1));
  }
  {
    Counter k;
    k.conv_br(d.reduced_channels[3], d.level_channels[3], 3, px[3]);
    push(k, "decoder.top");
  }
  for (int level = 3; level >= 1; --level) {
    const int i = level - 1;
    const i64 cr = d.reduced_channels[i], co = d.level_channels[i], cn = d.level_channels[i + 1];
    Counter k;
    if (cfg.dsa.is_baseline()) {
      k.conv_br(cr, co, 3, px[i]);
    } else {
      k.elementwise(cn * px[i]);  // upsample of the higher-level output
      k.conv_br(cn, cr, 3, px[i]);
      i64 branches = 0;
      for (bool on : {cfg.dsa.enable_fpsa, cfg.dsa.enable_fnsa}) {
        if (!on) continue;
        k.elementwise(cr * px[i]);  // f - h or f + h
        k.conv_br(cr, co, 3, px[i]);
        ++branches;
      }
      k.conv_br(branches * co, co, 3, px[i]);
    }
    push(k, "decoder.dsa" + std::to_string(level));
  }
  {
    Counter k;
    for (int i = 1; i < 4; ++i) k.elementwise(d.level_channels[i] * px[0]);
    k.conv_br(d.fused_channels(), d.head_channels, 3, px[0]);
    k.conv(d.head_channels, d.num_classes, 3, 1, px[0]);
    k.elementwise(d.num_classes * height * width);
    push(k, "decoder.head");
  }

  for (const auto& b : r.blocks) {
    r.total_params += b.params;
    r.total_macs += b.macs;
  }
  return r;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const char* flops_label(FlopConvention c) {
  return c == FlopConvention::kMac ? "FLOPs counted as multiply-accumulates (1 MAC = 1 FLOP)"
                                   : "FLOPs counted as 2 x multiply-accumulates";
}

}  // namespace

std::string ComplexityReport::to_text() const {
  std::ostringstream os;
  os << "# " << network << " (" << variant << ") input 1x3x" << height << "x" << width << "\n";
  os << "# " << flops_label(convention) << "\n";
  os << "Para(M) " << fmt("%.3f", params_millions()) << "\n";
  os << "FLOPs(G) " << fmt("%.3f", flops_giga()) << "\n";
  os << "params " << total_params << "\n";
  os << "macs " << total_macs << "\n";
  os << "\n";
  std::size_t width_col = 5;
  for (const auto& b : blocks) width_col = std::max(width_col, b.name.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %12s %14s\n", static_cast<int>(width_col), "block", "params", "GFLOPs");
  os << buf;
  const double mult = convention == FlopConvention::kMac ? 1.0 : 2.0;
  for (const auto& b : blocks) {
    std::snprintf(buf, sizeof buf, "%-*s %12lld %14.6f\n", static_cast<int>(width_col), b.name.c_str(),
                  static_cast<long long>(b.params), static_cast<double>(b.macs) * mult / 1e9);
    os << buf;
  }
  return os.str();
}

std::string ComplexityReport::to_json() const {
  nlohmann::ordered_json j;
  j["network"] = network;
  j["variant"] = variant;
  j["input"] = {1, 3, height, width};
  j["flop_convention"] = flop_convention_name(convention);
  j["params"] = total_params;
  j["macs"] = total_macs;
  j["Para(M)"] = params_millions();
  j["FLOPs(G)"] = flops_giga();
  j["blocks"] = nlohmann::ordered_json::array();
  for (const auto& b : blocks) j["blocks"].push_back({{"name", b.name}, {"params", b.params}, {"macs", b.macs}});
  return j.dump(2) + "\n";
}

std::string results_table_text(const std::vector<ResultRow>& rows, FlopConvention convention) {
  std::ostringstream os;
  os << "# " << flops_label(convention) << "\n";
  std::size_t w = 7;
  for (const auto& r : rows) w = std::max(w, r.network.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %8s %8s %9s %9s\n", static_cast<int>(w), "Network", "mDice", "mIoU",
                "Para(M)", "FLOPs(G)");
  os << buf;
  for (const auto& r : rows) {
    const auto md = r.mdice ? fmt("%.3f", *r.mdice) : "-";
    const auto mi = r.miou ? fmt("%.3f", *r.miou) : "-";
    std::snprintf(buf, sizeof buf, "%-*s %8s %8s %9.1f %9.1f\n", static_cast<int>(w), r.network.c_str(), md.c_str(),
                  mi.c_str(), static_cast<double>(r.params) / 1e6, r.flops / 1e9);
    os << buf;
  }
  return os.str();
}

std::string results_table_json(const std::vector<ResultRow>& rows, FlopConvention convention) {
  nlohmann::ordered_json j;
  j["columns"] = {"Network", "mDice", "mIoU", "Para(M)", "FLOPs(G)"};
  j["flop_convention"] = flop_convention_name(convention);
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["Network"] = r.network;
    row["mDice"] = r.mdice ? nlohmann::ordered_json(*r.mdice) : nlohmann::ordered_json(nullptr);
    row["mIoU"] = r.miou ? nlohmann::ordered_json(*r.miou) : nlohmann::ordered_json(nullptr);
    row["Para(M)"] = static_cast<double>(r.params) / 1e6;
    row["FLOPs(G)"] = r.flops / 1e9;
    j["rows"].push_back(row);
  }
  return j.dump(2) + "\n";
}

std::vector<AblationEntry> ablation_complexity(const std::vector<Scale>& scales, std::int64_t size,
                                               FlopConvention convention) {
  std::vector<AblationEntry> out;
  for (auto s : scales) {
    for (const auto& dsa : DSAConfig::ablation_grid()) {
      AblationEntry e;
      e.scale = s;
      e.dsa = dsa;
      e.complexity = analyze_complexity(ModelConfig::for_scale(s, dsa), size, size, convention);
      out.push_back(std::move(e));
    }
  }
  return out;
}

namespace {

// Entries grouped per scale in first-seen order, each group indexed by variant.
std::vector<std::pair<Scale, std::array<const AblationEntry*, 4>>> group_by_scale(
    const std::vector<AblationEntry>& entries) {
  std::vector<std::pair<Scale, std::array<const AblationEntry*, 4>>> groups;
  const auto grid = DSAConfig::ablation_grid();
  for (const auto& e : entries) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == e.scale; });
    if (it == groups.end()) {
      groups.push_back({e.scale, {}});
      it = groups.end() - 1;
    }
    const auto v = std::find(grid.begin(), grid.end(), e.dsa) - grid.begin();
    it->second[static_cast<std::size_t>(v)] = &e;
  }
  return groups;
}

}  // namespace

std::string ablation_table_text(const std::vector<AblationEntry>& entries) {
  std::ostringstream os;
  if (!entries.empty()) os << "# " << flops_label(entries.front().complexity.convention) << "\n";
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-9s|%-17s|%-17s|%-17s|%-37s\n", "", " B", " +FP", " +FN", " +FP+FN");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-9s| %7s %7s | %7s %7s | %7s %7s | %7s %7s %9s %9s\n", "Network", "mDice",
                "mIoU", "mDice", "mIoU", "mDice", "mIoU", "mDice", "mIoU", "Para(M)", "FLOPs(G)");
  os << buf;
  auto metric = [](const AblationEntry* e, bool dice) -> std::string {
    if (!e) return "-";
    const auto& v = dice ? e->mdice : e->miou;
    return v ? fmt("%.3f", *v) : "-";
  };
  const auto groups = group_by_scale(entries);
  for (const auto& [scale, row] : groups) {
    const auto* full = row[3];
    std::snprintf(buf, sizeof buf, "%-9s| %7s %7s | %7s %7s | %7s %7s | %7s %7s %9s %9s\n", scale_name(scale).c_str(),
                  metric(row[0], true).c_str(), metric(row[0], false).c_str(), metric(row[1], true).c_str(),
                  metric(row[1], false).c_str(), metric(row[2], true).c_str(), metric(row[2], false).c_str(),
                  metric(row[3], true).c_str(), metric(row[3], false).c_str(),
                  full ? fmt("%.1f", full->complexity.params_millions()).c_str() : "-",
                  full ? fmt("%.1f", full->complexity.flops_giga()).c_str() : "-");
    os << buf;
  }
  os << "\n# parameters per variant\n";
  for (const auto& [scale, row] : groups) {
    os << scale_name(scale);
    for (const auto* e : row) {
      if (e) os << "  " << e->dsa.label() << "=" << e->complexity.total_params;
    }
    os << "\n";
  }
  return os.str();
}

std::string ablation_table_json(const std::vector<AblationEntry>& entries) {
  nlohmann::ordered_json j;
  j["variants"] = {"B", "+FP", "+FN", "+FP+FN"};
  if (!entries.empty()) j["flop_convention"] = flop_convention_name(entries.front().complexity.convention);
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json row;
    row["Network"] = scale_name(e.scale);
    row["variant"] = e.dsa.label();
    row["mDice"] = e.mdice ? nlohmann::ordered_json(*e.mdice) : nlohmann::ordered_json(nullptr);
    row["mIoU"] = e.miou ? nlohmann::ordered_json(*e.miou) : nlohmann::ordered_json(nullptr);
    row["Para(M)"] = e.complexity.params_millions();
    row["FLOPs(G)"] = e.complexity.flops_giga();
    row["params"] = e.complexity.total_params;
    row["macs"] = e.complexity.total_macs;
    j["rows"].push_back(row);
  }
  return j.dump(2) + "\n";
}

}  // namespace dsnet
