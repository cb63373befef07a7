#include "dsnet/config.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "dsnet/error.hpp"
#include "dsnet/ini.hpp"

namespace dsnet {

Scale parse_scale(std::string_view text) {
  if (text == "T" || text == "t" || text == "tiny") return Scale::kTiny;
  if (text == "S" || text == "s" || text == "small") return Scale::kSmall;
  if (text == "B" || text == "b" || text == "base") return Scale::kBase;
  if (text == "L" || text == "l" || text == "large") return Scale::kLarge;
  throw ConfigError("unknown scale '" + std::string(text) + "' (expected T, S, B or L)");
}

char scale_letter(Scale s) {
  switch (s) {
    case Scale::kTiny: return 'T';
    case Scale::kSmall: return 'S';
    case Scale::kBase: return 'B';
    case Scale::kLarge: return 'L';
  }
  return '?';
}

std::string scale_name(Scale s) { return std::string("DSNet-") + scale_letter(s); }

std::string backbone_preset_name(Scale s) {
  switch (s) {
    case Scale::kTiny: return "b0";
    case Scale::kSmall: return "b1";
    case Scale::kBase: return "b2";
    case Scale::kLarge: return "b3";
  }
  return "b0";
}

void MiTConfig::validate() const {
  if (in_channels <= 0) throw ConfigError("encoder: in_channels must be positive");
  for (int i = 0; i < 4; ++i) {
    const auto stage = "encoder stage " + std::to_string(i + 1) + ": ";
    if (embed_dims[i] <= 0) throw ConfigError(stage + "embed_dim must be positive");
    if (depths[i] < 1) throw ConfigError(stage + "depth must be >= 1");
    if (num_heads[i] < 1 || embed_dims[i] % num_heads[i] != 0) {
      throw ConfigError(stage + "embed_dim " + std::to_string(embed_dims[i]) +
                        " not divisible by heads " + std::to_string(num_heads[i]));
    }
    if (sr_ratios[i] < 1) throw ConfigError(stage + "sr_ratio must be >= 1");
    if (mlp_ratios[i] < 1) throw ConfigError(stage + "mlp_ratio must be >= 1");
    if (patch_kernels[i] < patch_strides[i]) {
      throw ConfigError(stage + "patch kernel smaller than stride");
    }
  }
  if (patch_strides[0] != 4) throw ConfigError("encoder: stage 1 embedding stride must be 4");
  for (int i = 1; i < 4; ++i) {
    if (patch_strides[i] != 2) throw ConfigError("encoder: stages 2-4 embedding stride must be 2");
  }
  if (drop_rate != 0.0 || drop_path_rate != 0.0) {
    throw ConfigError("encoder: dropout and drop-path are not supported (must be 0)");
  }
}

std::int64_t MiTConfig::total_stride() const {
  std::int64_t s = 1;
  for (auto v : patch_strides) s *= v;
  return s;
}

MiTConfig MiTConfig::preset(std::string_view name) {
  MiTConfig c;
  c.name = std::string(name);
  c.num_heads = {1, 2, 5, 8};
  c.sr_ratios = {8, 4, 2, 1};
  c.mlp_ratios = {4, 4, 4, 4};
  if (name == "b0") {
    c.embed_dims = {32, 64, 160, 256};
    c.depths = {2, 2, 2, 2};
  } else if (name == "b1") {
    c.embed_dims = {64, 128, 320, 512};
    c.depths = {2, 2, 2, 2};
  } else if (name == "b2") {
    c.embed_dims = {64, 128, 320, 512};
    c.depths = {3, 4, 6, 3};
  } else if (name == "b3") {
    c.embed_dims = {64, 128, 320, 512};
    c.depths = {3, 4, 18, 3};
  } else {
    throw ConfigError("unknown backbone preset '" + std::string(name) + "'");
  }
  return c;
}

namespace {

using namespace ini;

std::string stages_text(const Stages& s) {
  std::ostringstream os;
  os << '[' << s[0] << ", " << s[1] << ", " << s[2] << ", " << s[3] << ']';
  return os.str();
}

void write_encoder(std::ostream& os, const MiTConfig& c) {
  os << "[encoder]\n"
     << "name = \"" << c.name << "\"\n"
     << "in_channels = " << c.in_channels << "\n"
     << "embed_dims = " << stages_text(c.embed_dims) << "\n"
     << "depths = " << stages_text(c.depths) << "\n"
     << "num_heads = " << stages_text(c.num_heads) << "\n"
     << "sr_ratios = " << stages_text(c.sr_ratios) << "\n"
     << "mlp_ratios = " << stages_text(c.mlp_ratios) << "\n"
     << "patch_kernels = " << stages_text(c.patch_kernels) << "\n"
     << "patch_strides = " << stages_text(c.patch_strides) << "\n"
     << "patch_paddings = " << stages_text(c.patch_paddings) << "\n"
     << "layer_norm_eps = " << number_text(c.layer_norm_eps) << "\n"
     << "drop_rate = " << number_text(c.drop_rate) << "\n"
     << "drop_path_rate = " << number_text(c.drop_path_rate) << "\n";
}

MiTConfig read_encoder(const Section& s) {
  reject_unknown(s,
                 {"name", "in_channels", "embed_dims", "depths", "num_heads", "sr_ratios",
                  "mlp_ratios", "patch_kernels", "patch_strides", "patch_paddings",
                  "layer_norm_eps", "drop_rate", "drop_path_rate"},
                 "encoder");
  MiTConfig c;
  if (auto v = find_key(s, "name"); v && !v->empty()) c.name = v->front();
  read_int(s, "in_channels", c.in_channels);
  read_stages(s, "embed_dims", c.embed_dims);
  read_stages(s, "depths", c.depths);
  read_stages(s, "num_heads", c.num_heads);
  read_stages(s, "sr_ratios", c.sr_ratios);
  read_stages(s, "mlp_ratios", c.mlp_ratios);
  read_stages(s, "patch_kernels", c.patch_kernels);
  read_stages(s, "patch_strides", c.patch_strides);
  read_stages(s, "patch_paddings", c.patch_paddings);
  read_double(s, "layer_norm_eps", c.layer_norm_eps);
  read_double(s, "drop_rate", c.drop_rate);
  read_double(s, "drop_path_rate", c.drop_path_rate);
  c.validate();
  return c;
}

}  // namespace

std::string MiTConfig::to_ini() const {
  std::ostringstream os;
  write_encoder(os, *this);
  return os.str();
}

MiTConfig MiTConfig::from_ini(const std::string& text) {
  auto sections = parse_sections(text);
  auto it = sections.find("encoder");
  if (it == sections.end()) throw ConfigError("backbone config has no [encoder] section");
  return read_encoder(it->second);
}

MiTConfig MiTConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read backbone config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_ini(ss.str());
}

void DecoderConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (reduced_channels[i] <= 0 || level_channels[i] <= 0) {
      throw ConfigError("decoder: channel counts must be positive (level " + std::to_string(i + 1) + ")");
    }
  }
  if (head_channels <= 0 || num_classes <= 0) throw ConfigError("decoder: head widths must be positive");
}

std::int64_t DecoderConfig::fused_channels() const {
  return level_channels[0] + level_channels[1] + level_channels[2] + level_channels[3];
}

std::string DSAConfig::label() const {
  if (enable_fpsa && enable_fnsa) return "+FP+FN";
  if (enable_fpsa) return "+FP";
  if (enable_fnsa) return "+FN";
  return "B";
}

DSAConfig DSAConfig::parse(std::string_view label) {
  if (label == "B" || label == "none" || label == "baseline") return {false, false};
  if (label == "+FP" || label == "fp") return {true, false};
  if (label == "+FN" || label == "fn") return {false, true};
  if (label == "+FP+FN" || label == "both" || label == "fp+fn") return {true, true};
  throw ConfigError("unknown DSA variant '" + std::string(label) + "' (expected B, +FP, +FN or +FP+FN)");
}

std::array<DSAConfig, 4> DSAConfig::ablation_grid() {
  return {DSAConfig{false, false}, DSAConfig{true, false}, DSAConfig{false, true}, DSAConfig{true, true}};
}

ModelConfig ModelConfig::for_scale(Scale s, DSAConfig dsa) {
  ModelConfig m;
  m.scale = s;
  m.encoder = MiTConfig::for_scale(s);
  m.dsa = dsa;
  return m;
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
}

std::string ModelConfig::to_ini() const {
  std::ostringstream os;
  os << "[model]\n"
     << "scale = \"" << scale_letter(scale) << "\"\n"
     << "dsa = \"" << dsa.label() << "\"\n";
  write_encoder(os, encoder);
  os << "[decoder]\n"
     << "reduced_channels = " << stages_text(decoder.reduced_channels) << "\n"
     << "level_channels = " << stages_text(decoder.level_channels) << "\n"
     << "head_channels = " << decoder.head_channels << "\n"
     << "num_classes = " << decoder.num_classes << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_ini(const std::string& text) {
  auto sections = parse_sections(text);
  ModelConfig m;
  auto model = sections.find("model");
  if (model == sections.end()) throw ConfigError("model config has no [model] section");
  if (auto v = find_key(model->second, "scale"); v && !v->empty()) m.scale = parse_scale(v->front());
  if (auto v = find_key(model->second, "dsa"); v && !v->empty()) m.dsa = DSAConfig::parse(v->front());
  m.encoder = MiTConfig::for_scale(m.scale);
  if (auto enc = sections.find("encoder"); enc != sections.end()) m.encoder = read_encoder(enc->second);
  if (auto dec = sections.find("decoder"); dec != sections.end()) {
    read_stages(dec->second, "reduced_channels", m.decoder.reduced_channels);
    read_stages(dec->second, "level_channels", m.decoder.level_channels);
    read_int(dec->second, "head_channels", m.decoder.head_channels);
    read_int(dec->second, "num_classes", m.decoder.num_classes);
  }
  m.validate();
  return m;
}

void require_input_extent(std::int64_t height, std::int64_t width, std::int64_t stride) {
  if (height <= 0 || width <= 0 || height % stride != 0 || width % stride != 0) {
    throw ConfigError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be a positive multiple of " + std::to_string(stride) +
                      " in both dimensions");
  }
}

}  // namespace dsnet
