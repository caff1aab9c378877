#include "iau/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

namespace iau {

ModelConfig ModelConfig::toy(std::size_t num_ids) {
  ModelConfig c;
  c.stages = {{16, 1, 2, false}, {32, 2, 2, true}, {64, 2, 2, true}, {128, 1, 2, false}};
  c.num_ids = num_ids;
  return c;
}

bool ModelConfig::has_iau() const {
  for (const auto& s : stages)
    if (s.iau) return true;
  return false;
}

void ModelConfig::validate() const {
  if (stages.empty()) throw ConfigError("model needs at least one stage");
  if (parts < 2) throw ConfigError("model.parts must be >= 2");
  if (frames < 1) throw ConfigError("model.frames must be >= 1");
  if (num_ids < 2) throw ConfigError("model needs at least 2 identities");
  if (image_height < 1 || image_width < 1) throw ConfigError("image size must be positive");
  if (part_mode == PartMode::kEqualPatch && parts != 4)
    throw ConfigError("model.part_mode equal_patch uses exactly 4 strips (model.parts = 4)");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string key = "model.stages[" + std::to_string(i) + "]";
    if (s.channels < 1) throw ConfigError(key + ".channels must be positive");
    if (s.downsample != 1 && s.downsample != 2) throw ConfigError(key + ".downsample must be 1 or 2");
    if (s.blocks < 1) throw ConfigError(key + ".blocks must be >= 1");
  }
}

IauBlockOptions ModelConfig::block_options(bool training) const {
  IauBlockOptions o;
  o.arrangement = arrangement;
  o.variant = variant;
  o.training = training;
  o.stiau.parts = parts;
  o.stiau.mode = part_mode;
  o.stiau.self_relations = self_relations;
  o.stiau.temporal = temporal;
  o.stiau.share_relation = share_relation;
  return o;
}

std::size_t TrainConfig::effective_lr_step() const {
  if (lr_step) return *lr_step;
  return mode == TrainMode::kImage ? 20 : 40;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (effective_lr_step() < 1) throw ConfigError("train.lr_step must be >= 1");
  if (!(lr_decay > 0)) throw ConfigError("train.lr_decay must be positive");
  if (classes < 2) throw ConfigError("train.batch.classes must be >= 2");
  if (per_class < 2) throw ConfigError("train.batch.per_class must be >= 2 (triplets need positives)");
  if (stride < 1) throw ConfigError("train.stride must be >= 1");
  loss.validate();
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (train.mode == TrainMode::kImage && model.frames != 1)
    throw ConfigError("image mode requires model.frames = 1");
}

std::string to_string(TrainMode mode) { return mode == TrainMode::kImage ? "image" : "video"; }

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const ConfigEntry& e, const std::string& expected) {
  throw ConfigError("line " + std::to_string(e.line) + ": " + e.key + " = '" + e.value +
                    "' is not " + expected);
}

std::size_t as_size(const ConfigEntry& e) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size()) bad_value(e, "a non-negative integer");
  return v;
}

std::uint64_t as_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size()) bad_value(e, "a non-negative integer");
  return v;
}

double as_double(const ConfigEntry& e) {
  double v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size() || !std::isfinite(v))
    bad_value(e, "a finite number");
  return v;
}

bool as_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  bad_value(e, "true or false");
}

template <typename F>
auto wrap(const ConfigEntry& e, F parse) {
  try {
    return parse(e.value);
  } catch (const ConfigError& err) {
    throw ConfigError("line " + std::to_string(e.line) + ": " + e.key + ": " + err.what());
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<ConfigEntry> parse_entries(std::string_view text, const std::string& source) {
  std::vector<ConfigEntry> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value', got '" + body + "'");
    ConfigEntry e{trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)), line_no};
    if (e.key.empty() || e.value.empty())
      throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key or value");
    out.push_back(std::move(e));
  }
  return out;
}

void apply_entry(RunConfig& c, const ConfigEntry& e) {
  static const std::regex stage_key(R"(model\.stages\[(\d+)\]\.(channels|downsample|blocks|iau))");
  std::smatch m;
  const std::string& k = e.key;
  auto& mc = c.model;
  auto& tc = c.train;
  if (std::regex_match(k, m, stage_key)) {
    const std::size_t index = std::stoul(m[1].str());
    if (index > 64) throw ConfigError("line " + std::to_string(e.line) + ": stage index too large");
    if (mc.stages.size() <= index) mc.stages.resize(index + 1);
    auto& s = mc.stages[index];
    const std::string field = m[2].str();
    if (field == "channels") s.channels = as_size(e);
    else if (field == "downsample") s.downsample = as_size(e);
    else if (field == "blocks") s.blocks = as_size(e);
    else s.iau = as_bool(e);
  } else if (k == "model.parts") mc.parts = as_size(e);
  else if (k == "model.frames") mc.frames = as_size(e);
  else if (k == "model.embedding_dim") mc.embedding_dim = as_size(e);
  else if (k == "model.num_ids") mc.num_ids = as_size(e);
  else if (k == "model.image_height") mc.image_height = as_size(e);
  else if (k == "model.image_width") mc.image_width = as_size(e);
  else if (k == "model.part_mode") mc.part_mode = wrap(e, parse_part_mode);
  else if (k == "model.arrangement") mc.arrangement = wrap(e, parse_arrangement);
  else if (k == "model.variant") mc.variant = wrap(e, parse_block_variant);
  else if (k == "model.share_relation") mc.share_relation = as_bool(e);
  else if (k == "model.self_relations") mc.self_relations = as_bool(e);
  else if (k == "model.temporal") mc.temporal = as_bool(e);
  else if (k == "train.mode") {
    if (e.value == "image") tc.mode = TrainMode::kImage;
    else if (e.value == "video") tc.mode = TrainMode::kVideo;
    else bad_value(e, "image or video");
  } else if (k == "train.lr") tc.lr = as_double(e);
  else if (k == "train.lr_step") tc.lr_step = as_size(e);
  else if (k == "train.lr_decay") tc.lr_decay = as_double(e);
  else if (k == "train.epochs") tc.epochs = as_size(e);
  else if (k == "train.batch.classes") tc.classes = as_size(e);
  else if (k == "train.batch.per_class") tc.per_class = as_size(e);
  else if (k == "train.stride") tc.stride = as_size(e);
  else if (k == "train.steps_per_epoch") tc.steps_per_epoch = as_size(e);
  else if (k == "train.margin") tc.loss.margin = as_double(e);
  else if (k == "train.lambda1") tc.loss.lambda1 = as_double(e);
  else if (k == "train.lambda2") tc.loss.lambda2 = as_double(e);
  else if (k == "data.train_ids") c.data.train_ids = as_size(e);
  else if (k == "data.eval_clips") c.data.eval_clips = as_size(e);
  else if (k == "seed") c.seed = as_u64(e);
  else throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + k + "'");
}

RunConfig parse_run_config(std::string_view text, const std::string& source) {
  RunConfig c;
  bool stages_seen = false;
  for (const auto& e : parse_entries(text, source)) {
    if (!stages_seen && e.key.rfind("model.stages[", 0) == 0) {
      c.model.stages.clear();
      stages_seen = true;
    }
    apply_entry(c, e);
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string to_text(const RunConfig& c) {
  std::ostringstream o;
  const auto& m = c.model;
  o << "seed = " << c.seed << "\n";
  o << "model.parts = " << m.parts << "\n";
  o << "model.frames = " << m.frames << "\n";
  o << "model.embedding_dim = " << m.embedding_dim << "\n";
  o << "model.num_ids = " << m.num_ids << "\n";
  o << "model.image_height = " << m.image_height << "\n";
  o << "model.image_width = " << m.image_width << "\n";
  o << "model.part_mode = " << to_string(m.part_mode) << "\n";
  o << "model.arrangement = " << to_string(m.arrangement) << "\n";
  o << "model.variant = " << to_string(m.variant) << "\n";
  o << "model.share_relation = " << (m.share_relation ? "true" : "false") << "\n";
  o << "model.self_relations = " << (m.self_relations ? "true" : "false") << "\n";
  o << "model.temporal = " << (m.temporal ? "true" : "false") << "\n";
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    const auto& s = m.stages[i];
    const std::string p = "model.stages[" + std::to_string(i) + "].";
    o << p << "channels = " << s.channels << "\n";
    o << p << "downsample = " << s.downsample << "\n";
    o << p << "blocks = " << s.blocks << "\n";
    o << p << "iau = " << (s.iau ? "true" : "false") << "\n";
  }
  const auto& t = c.train;
  o << "train.mode = " << to_string(t.mode) << "\n";
  o << "train.lr = " << format_double(t.lr) << "\n";
  if (t.lr_step) o << "train.lr_step = " << *t.lr_step << "\n";
  o << "train.lr_decay = " << format_double(t.lr_decay) << "\n";
  o << "train.epochs = " << t.epochs << "\n";
  o << "train.batch.classes = " << t.classes << "\n";
  o << "train.batch.per_class = " << t.per_class << "\n";
  o << "train.stride = " << t.stride << "\n";
  o << "train.steps_per_epoch = " << t.steps_per_epoch << "\n";
  o << "train.margin = " << format_double(t.loss.margin) << "\n";
  o << "train.lambda1 = " << format_double(t.loss.lambda1) << "\n";
  o << "train.lambda2 = " << format_double(t.loss.lambda2) << "\n";
  o << "data.train_ids = " << c.data.train_ids << "\n";
  o << "data.eval_clips = " << c.data.eval_clips << "\n";
  return o.str();
}

}  // namespace iau
