#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsnet/config.hpp"

namespace dsnet {

/// How FLOPs are reported: one per multiply-accumulate (the default, as
/// common profilers do) or two.
enum class FlopConvention { kMac, kTwoMac };

FlopConvention parse_flop_convention(std::string_view text);
std::string flop_convention_name(FlopConvention c);

struct BlockCost {
  std::string name;  // dotted module path, e.g. "encoder.stage1.block0"
  std::int64_t params = 0;
  std::uint64_t macs = 0;
};

struct ComplexityReport {
  std::string network;
  std::string variant;
  std::int64_t height = 0;
  std::int64_t width = 0;
  FlopConvention convention = FlopConvention::kMac;
  std::vector<BlockCost> blocks;
  std::int64_t total_params = 0;
  std::uint64_t total_macs = 0;

  /// FLOPs of one image under `convention`.
  double flops() const;
  double params_millions() const { return static_cast<double>(total_params) / 1e6; }
  double flops_giga() const { return flops() / 1e9; }
  /// Summed over blocks whose name starts with `prefix`.
  std::int64_t params_under(const std::string& prefix) const;
  std::uint64_t macs_under(const std::string& prefix) const;

  std::string to_text() const;
  std::string to_json() const;
};

/// Counts parameters (biases and norm affines included, running statistics
/// excluded) and per-image operations of the model for an input of
/// height x width, block by block, without building it. Per-op counts follow
/// the same conventions as the tape profiler, so the two agree exactly.
ComplexityReport analyze_complexity(const ModelConfig& cfg, std::int64_t height, std::int64_t width,
                                    FlopConvention convention = FlopConvention::kMac);

/// One row of a results table: Network, mDice, mIoU, Para(M), FLOPs(G).
struct ResultRow {
  std::string network;
  std::optional<double> mdice;
  std::optional<double> miou;
  std::int64_t params = 0;
  double flops = 0.0;
};

/// Plain-text table in the column order Network, mDice, mIoU, Para(M),
/// FLOPs(G); missing metrics print as "-".
std::string results_table_text(const std::vector<ResultRow>& rows, FlopConvention convention);
std::string results_table_json(const std::vector<ResultRow>& rows, FlopConvention convention);

/// Complexity of every DSA variant (B, +FP, +FN, +FP+FN) at every requested
/// scale: one row per (scale, variant), scales in the order given.
struct AblationEntry {
  Scale scale = Scale::kTiny;
  DSAConfig dsa;
  ComplexityReport complexity;
  std::optional<double> mdice;
  std::optional<double> miou;
};

std::vector<AblationEntry> ablation_complexity(const std::vector<Scale>& scales, std::int64_t size,
                                               FlopConvention convention = FlopConvention::kMac);

/// Wide layout with one line per scale: mDice and mIoU for B, +FP, +FN and
/// +FP+FN followed by Para(M) and FLOPs(G) of the full model, then the
/// parameter count of each variant.
std::string ablation_table_text(const std::vector<AblationEntry>& entries);
std::string ablation_table_json(const std::vector<AblationEntry>& entries);

}  // namespace dsnet
