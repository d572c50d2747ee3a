#include "lcdlab/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>

#include "lcdlab/error.hpp"
#include "lcdlab/rng.hpp"

namespace lcdlab {

using nlohmann::json;

std::string to_string(TrainKind kind) {
  switch (kind) {
    case TrainKind::Teacher: return "teacher";
    case TrainKind::LCD: return "lcd";
    case TrainKind::ControlNet: return "controlnet";
  }
  return "teacher";
}

TrainKind train_kind_from_string(const std::string& name) {
  if (name == "teacher") return TrainKind::Teacher;
  if (name == "lcd") return TrainKind::LCD;
  if (name == "controlnet") return TrainKind::ControlNet;
  throw ConfigError("train.kind: unknown kind '" + name + "' (expected teacher, lcd or controlnet)");
}

std::uint64_t derive_seed(std::uint64_t root, const std::string& component) {
  return splitmix64(root ^ fnv1a64(component));
}

void Config::validate() const {
  model.validate();
  dataset_spec().validate();
  const int latent = encoder().latent_size(data.image_size);
  if (model.image_size != latent)
    throw ConfigError("model.image_size (" + std::to_string(model.image_size) + ") must equal the encoded size " +
                      std::to_string(latent) + " of data.image_size");
  if (model.num_classes != data.num_classes) throw ConfigError("model.num_classes must equal data.num_classes");
  (void)make_schedule();
  if (resolved_lr() <= 0.0F) throw ConfigError("train.lr must be positive");
  if (resolved_batch() < 1) throw ConfigError("train.batch must be >= 1");
  if (resolved_batch() > data.n_samples) throw ConfigError("train.batch exceeds data.n_samples");
  if (resolved_steps() < 0) throw ConfigError("train.steps must be >= 0");
  if (train.sample_every < 0 || train.checkpoint_every < 0)
    throw ConfigError("train.sample_every and train.checkpoint_every must be >= 0");
  if (train.sample_count < 1) throw ConfigError("train.sample_count must be >= 1");
  if (!(train.p_drop >= 0.0F && train.p_drop <= 1.0F)) throw ConfigError("train.p_drop must lie in [0, 1]");
  if (train.weight_decay < 0.0F) throw ConfigError("train.weight_decay must be >= 0");
  lcd_config().validate(schedule.T);
  const int n = resolved_n_copy();
  if (n < 1 || n > model.depth) throw ConfigError("control.n_copy must lie in [1, model.depth]");
  if (control.accumulation < 1) throw ConfigError("control.accumulation must be >= 1");
  if (train.kind == TrainKind::ControlNet && resolved_batch() % control.accumulation != 0)
    throw ConfigError("train.batch must be divisible by control.accumulation");
  if (!(control.edge_threshold > 0.0F && control.edge_threshold < 1.0F))
    throw ConfigError("control.edge_threshold must lie in (0, 1)");
  if (control.guidance < 0.0F) throw ConfigError("control.guidance must be >= 0");
}

NoiseSchedule Config::make_schedule() const {
  return NoiseSchedule(schedule.kind, schedule.beta_start, schedule.beta_end, schedule.T);
}

ToyDatasetSpec Config::dataset_spec() const {
  ToyDatasetSpec spec;
  spec.n_samples = data.n_samples;
  spec.image_size = data.image_size;
  spec.num_classes = data.num_classes;
  spec.seed = data.seed ? *data.seed : derive_seed(train.seed, "data");
  return spec;
}

float Config::resolved_lr() const {
  if (train.lr) return *train.lr;
  switch (train.kind) {
    case TrainKind::Teacher: return 3e-4F;
    case TrainKind::LCD: return 2e-5F;
    case TrainKind::ControlNet: return 1e-4F;
  }
  return 3e-4F;
}

int Config::resolved_batch() const {
  if (train.batch) return *train.batch;
  switch (train.kind) {
    case TrainKind::Teacher: return 64;
    case TrainKind::LCD: return 24;
    case TrainKind::ControlNet: return 16;
  }
  return 64;
}

int Config::resolved_steps() const {
  if (train.steps) return *train.steps;
  switch (train.kind) {
    case TrainKind::Teacher: return 20000;
    case TrainKind::LCD: return 5000;
    case TrainKind::ControlNet: return 2000;
  }
  return 20000;
}

int Config::resolved_n_copy() const {
  if (control.variant == ControlVariant::UNet) return model.depth / 2;
  return control.n_copy ? *control.n_copy : default_n_copy(model.depth);
}

LCDConfig Config::lcd_config() const {
  LCDConfig c;
  c.omega_fix = lcd.omega_fix;
  c.k = lcd.k;
  c.mu = lcd.mu;
  c.lr = train.lr ? *train.lr : 2e-5F;
  c.batch = train.batch ? *train.batch : 24;
  c.max_steps = train.steps ? *train.steps : 5000;
  c.distance = lcd.distance;
  c.huber_delta = lcd.huber_delta;
  c.seed = derive_seed(train.seed, "lcd");
  return c;
}

std::filesystem::path Config::resolved_out_dir() const {
  if (!io.out_dir.empty()) return io.out_dir;
  if (const char* env = std::getenv("LCDLAB_OUT"); env != nullptr && *env != '\0') return env;
  return std::filesystem::path("runs") / to_string(train.kind);
}

namespace {

// Floats are echoed by their shortest decimal form, so 0.1F prints as 0.1.
json num(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return json(std::strtod(std::string(buf, res.ptr).c_str(), nullptr));
}

template <typename T>
json num(T v) {
  return json(v);
}

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? num(*v) : json(nullptr);
}

}  // namespace

json config_to_json(const Config& c) {
  json j;
  j["model"] = {{"image_size", c.model.image_size}, {"patch_size", c.model.patch_size}, {"width", c.model.width},
                {"depth", c.model.depth},           {"heads", c.model.heads},           {"num_classes", c.model.num_classes},
                {"mlp_ratio", c.model.mlp_ratio}};
  j["schedule"] = {{"kind", to_string(c.schedule.kind)},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end},
                   {"T", c.schedule.T}};
  j["train"] = {{"kind", to_string(c.train.kind)},
                {"lr", opt(c.train.lr)},
                {"batch", opt(c.train.batch)},
                {"steps", opt(c.train.steps)},
                {"seed", c.train.seed},
                {"sample_every", c.train.sample_every},
                {"checkpoint_every", c.train.checkpoint_every},
                {"sample_count", c.train.sample_count},
                {"p_drop", num(c.train.p_drop)},
                {"weight_decay", num(c.train.weight_decay)},
                {"teacher", c.train.teacher},
                {"resume", c.train.resume},
                {"log_wall_time", c.train.log_wall_time}};
  j["lcd"] = {{"omega_fix", num(c.lcd.omega_fix)},
              {"k", c.lcd.k},
              {"mu", num(c.lcd.mu)},
              {"distance", to_string(c.lcd.distance)},
              {"huber_delta", num(c.lcd.huber_delta)}};
  j["control"] = {{"variant", to_string(c.control.variant)},
                  {"n_copy", opt(c.control.n_copy)},
                  {"accumulation", c.control.accumulation},
                  {"edge_threshold", num(c.control.edge_threshold)},
                  {"guidance", num(c.control.guidance)}};
  j["data"] = {{"n_samples", c.data.n_samples}, {"image_size", c.data.image_size},
               {"num_classes", c.data.num_classes}, {"seed", opt(c.data.seed)},
               {"encoder", to_string(c.data.encoder)}, {"path", c.data.path}};
  j["io"] = {{"out_dir", c.io.out_dir}};
  return j;
}

namespace {

// Reads typed values out of one section, remembering which keys were used.
class SectionReader {
 public:
  SectionReader(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    section_ = &root.at(name);
    if (!section_->is_object()) throw ConfigError(name + ": section must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + ": wrong type (" + v->dump() + ")");
    }
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v->is_number_integer() && !v->is_number_unsigned())
        throw ConfigError(name_ + "." + key + ": expected an integer, got " + v->dump());
    }
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) throw ConfigError(name_ + "." + key + ": expected a boolean, got " + v->dump());
    }
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    T value{};
    get(key, value);
    out = value;
  }

  template <typename F>
  void get_enum(const std::string& key, F&& parse) {
    const json* v = find(key);
    if (v == nullptr) return;
    if (!v->is_string()) throw ConfigError(name_ + "." + key + ": expected a string, got " + v->dump());
    parse(v->get<std::string>());
  }

  void finish() const {
    if (section_ == nullptr) return;
    for (const auto& [key, value] : section_->items())
      if (used_.count(key) == 0) throw ConfigError("unknown config key '" + name_ + "." + key + "'");
  }

 private:
  const json* find(const std::string& key) {
    used_.insert(key);
    if (section_ == nullptr || !section_->contains(key)) return nullptr;
    return &section_->at(key);
  }

  std::string name_;
  const json* section_ = nullptr;
  std::set<std::string> used_;
};

}  // namespace

Config config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> kSections{"model", "schedule", "train", "lcd", "control", "data", "io"};
  for (const auto& [key, value] : j.items())
    if (kSections.count(key) == 0) throw ConfigError("unknown config section '" + key + "'");

  Config c;
  SectionReader m(j, "model");
  m.get("image_size", c.model.image_size);
  m.get("patch_size", c.model.patch_size);
  m.get("width", c.model.width);
  m.get("depth", c.model.depth);
  m.get("heads", c.model.heads);
  m.get("num_classes", c.model.num_classes);
  m.get("mlp_ratio", c.model.mlp_ratio);
  m.finish();

  SectionReader s(j, "schedule");
  s.get_enum("kind", [&](const std::string& v) { c.schedule.kind = schedule_kind_from_string(v); });
  s.get("beta_start", c.schedule.beta_start);
  s.get("beta_end", c.schedule.beta_end);
  s.get("T", c.schedule.T);
  s.finish();

  SectionReader t(j, "train");
  t.get_enum("kind", [&](const std::string& v) { c.train.kind = train_kind_from_string(v); });
  t.get("lr", c.train.lr);
  t.get("batch", c.train.batch);
  t.get("steps", c.train.steps);
  t.get("seed", c.train.seed);
  t.get("sample_every", c.train.sample_every);
  t.get("checkpoint_every", c.train.checkpoint_every);
  t.get("sample_count", c.train.sample_count);
  t.get("p_drop", c.train.p_drop);
  t.get("weight_decay", c.train.weight_decay);
  t.get("teacher", c.train.teacher);
  t.get("resume", c.train.resume);
  t.get("log_wall_time", c.train.log_wall_time);
  t.finish();

  SectionReader l(j, "lcd");
  l.get("omega_fix", c.lcd.omega_fix);
  l.get("k", c.lcd.k);
  l.get("mu", c.lcd.mu);
  l.get_enum("distance", [&](const std::string& v) { c.lcd.distance = distance_kind_from_string(v); });
  l.get("huber_delta", c.lcd.huber_delta);
  l.finish();

  SectionReader ctl(j, "control");
  ctl.get_enum("variant", [&](const std::string& v) { c.control.variant = control_variant_from_string(v); });
  ctl.get("n_copy", c.control.n_copy);
  ctl.get("accumulation", c.control.accumulation);
  ctl.get("edge_threshold", c.control.edge_threshold);
  ctl.get("guidance", c.control.guidance);
  ctl.finish();

  SectionReader d(j, "data");
  d.get("n_samples", c.data.n_samples);
  d.get("image_size", c.data.image_size);
  d.get("num_classes", c.data.num_classes);
  d.get("seed", c.data.seed);
  d.get_enum("encoder", [&](const std::string& v) { c.data.encoder = encoder_kind_from_string(v); });
  d.get("path", c.data.path);
  d.finish();

  SectionReader io(j, "io");
  io.get("out_dir", c.io.out_dir);
  io.finish();
  return c;
}

namespace {

// Interprets an override string against the type of the value it replaces.
json parse_override(const json& current, const std::string& path, const std::string& text) {
  if (current.is_string()) return text;
  if (current.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(path + ": expected true or false, got '" + text + "'");
  }
  json parsed = json::parse(text, nullptr, false);
  if (parsed.is_discarded()) {
    if (current.is_null()) return text;
    throw ConfigError(path + ": cannot parse '" + text + "'");
  }
  if (current.is_number() && !parsed.is_number()) throw ConfigError(path + ": expected a number, got '" + text + "'");
  return parsed;
}

}  // namespace

Config load_config(const std::filesystem::path& file, const std::vector<ConfigOverride>& overrides) {
  json merged = config_to_json(Config{});
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("config: cannot open " + file.string());
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config: " + file.string() + " is not valid JSON");
    // Strict pass first so unknown keys are reported against the file.
    (void)config_from_json(user);
    for (const auto& [section, body] : user.items())
      for (const auto& [key, value] : body.items()) merged[section][key] = value;
  }
  for (const auto& o : overrides) {
    const auto dot = o.path.find('.');
    if (dot == std::string::npos) throw ConfigError("override '" + o.path + "' must look like section.key");
    const std::string section = o.path.substr(0, dot);
    std::string key = o.path.substr(dot + 1);
    for (auto& ch : key)
      if (ch == '-') ch = '_';
    if (!merged.contains(section)) throw ConfigError("unknown config section '" + section + "'");
    if (!merged[section].contains(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    merged[section][key] = parse_override(merged[section][key], section + "." + key, o.value);
  }
  Config c = config_from_json(merged);
  c.validate();
  return c;
}

}  // namespace lcdlab
