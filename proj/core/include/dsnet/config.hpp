#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dsnet {

/// Model scales; each maps to one MiT backbone preset (T -> B0 ... L -> B3).
enum class Scale { kTiny, kSmall, kBase, kLarge };

Scale parse_scale(std::string_view text);
char scale_letter(Scale s);
/// "DSNet-T" etc.
std::string scale_name(Scale s);
/// "b0" .. "b3".
std::string backbone_preset_name(Scale s);

using Stages = std::array<std::int64_t, 4>;

/// Hyperparameters of the four-stage Mix Transformer encoder.
struct MiTConfig {
  std::string name = "custom";
  std::int64_t in_channels = 3;
  Stages embed_dims{32, 64, 160, 256};
  Stages depths{2, 2, 2, 2};
  Stages num_heads{1, 2, 5, 8};
  Stages sr_ratios{8, 4, 2, 1};
  Stages mlp_ratios{4, 4, 4, 4};
  Stages patch_kernels{7, 3, 3, 3};
  Stages patch_strides{4, 2, 2, 2};
  Stages patch_paddings{3, 1, 1, 1};
  double layer_norm_eps = 1e-6;
  double drop_rate = 0.0;
  double drop_path_rate = 0.0;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
  std::int64_t total_stride() const;

  /// Built-in presets "b0" .. "b3".
  static MiTConfig preset(std::string_view name);
  static MiTConfig for_scale(Scale s) { return preset(backbone_preset_name(s)); }

  /// Key-value text with an [encoder] section; see configs/mit_b*.ini.
  std::string to_ini() const;
  static MiTConfig from_ini(const std::string& text);
  static MiTConfig load(const std::filesystem::path& path);

  bool operator==(const MiTConfig&) const = default;
};

/// Decoder channel plan: 1x1-reduced widths, per-level output widths and the
/// fusion head hidden width.
struct DecoderConfig {
  Stages reduced_channels{64, 128, 128, 256};
  Stages level_channels{32, 64, 96, 96};
  std::int64_t head_channels = 256;
  std::int64_t num_classes = 1;

  void validate() const;
  std::int64_t fused_channels() const;
  bool operator==(const DecoderConfig&) const = default;
};

/// Branch toggles of the dual-stream attention modules.
struct DSAConfig {
  bool enable_fpsa = true;
  bool enable_fnsa = true;

  bool is_baseline() const { return !enable_fpsa && !enable_fnsa; }
  /// "B", "+FP", "+FN" or "+FP+FN".
  std::string label() const;
  static DSAConfig parse(std::string_view label);
  /// B, +FP, +FN, +FP+FN in that order.
  static std::array<DSAConfig, 4> ablation_grid();
  bool operator==(const DSAConfig&) const = default;
};

struct ModelConfig {
  Scale scale = Scale::kTiny;
  MiTConfig encoder = MiTConfig::preset("b0");
  DecoderConfig decoder;
  DSAConfig dsa;

  static ModelConfig for_scale(Scale s, DSAConfig dsa = {});
  void validate() const;
  /// Full textual description; stored in checkpoints for compatibility checks.
  std::string to_ini() const;
  static ModelConfig from_ini(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

/// Rejects image extents the model cannot process (must be positive multiples
/// of the total encoder stride).
void require_input_extent(std::int64_t height, std::int64_t width, std::int64_t stride = 32);

}  // namespace dsnet
