#pragma once

// Flat key=value run configuration. Every tunable lives here; unknown keys
// are hard errors so typos cannot pass silently, and every run writes its
// fully-resolved configuration beside its outputs.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "skc/dataset.hpp"
#include "skc/dit.hpp"
#include "skc/error.hpp"
#include "skc/flow.hpp"

namespace skc {

class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "42"},
        {"data.n_clips", "8"},
        {"data.image_clips", "2"},
        {"data.frames", "8"},
        {"data.height", "64"},
        {"data.width", "64"},
        {"data.shapes_min", "1"},
        {"data.shapes_max", "2"},
        {"data.velocity_max", "2.5"},
        {"data.bounce", "1"},
        {"codec.kind", "conv"},
        {"codec.train_steps", "1000"},
        {"codec.batch", "4"},
        {"codec.lr", "0.001"},
        {"codec.holdout_frames", "16"},
        {"codec.extra_clips", "12"},
        {"model.depth", "6"},
        {"model.heads", "4"},
        {"model.d", "144"},
        {"model.patch", "2"},
        {"model.ffn_mult", "4"},
        {"model.d_cond", "0"},
        {"model.phys_patch", "16"},
        {"model.phys_hidden", "64"},
        {"model.use_instance_embed", "1"},
        {"model.use_phys_tokens", "1"},
        {"rope.enabled", "1"},
        {"rope.theta", "10000"},
        {"rope.alpha_t", "0.1"},
        {"rope.alpha_h", "0.3"},
        {"rope.alpha_w", "0.3"},
        {"rope.fallback_threshold", "0.1"},
        {"flow.levels", "3"},
        {"flow.iterations", "100"},
        {"flow.smooth_weight", "0.1"},
        {"flow.blur_sigma", "1.5"},
        {"schedule.t_train", "1000"},
        {"train.steps", "2000"},
        {"train.batch", "1"},
        {"train.lr", "0.0002"},
        {"train.weight_decay", "0.03"},
        {"train.checkpoint_every", "1000"},
        {"train.warmup_steps", "100"},
        {"train.lr_min_frac", "0.1"},
        {"train.grad_clip", "1.0"},
        {"sample.steps", "50"},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end())
      throw ConfigError("unknown configuration key '" + key + "'");
    it->second = value;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path.string());
    RunConfig cfg;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto strip = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = strip(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("malformed line " + std::to_string(lineno) + " in " +
                          path.string() + ": " + line);
      cfg.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return cfg;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write config: " + path.string());
    for (const auto& [k, v] : values_) f << k << "=" << v << "\n";
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end())
      throw ConfigError("unknown configuration key '" + key + "'");
    return it->second;
  }
  int64_t get_int(const std::string& key) const {
    try {
      return std::stoll(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not an integer: " + get(key));
    }
  }
  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' is not a number: " + get(key));
    }
  }
  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ConfigError("key '" + key + "' is not a boolean: " + v);
  }

  uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }

  ClipParams clip_params() const {
    ClipParams p;
    p.shapes_min = static_cast<int>(get_int("data.shapes_min"));
    p.shapes_max = static_cast<int>(get_int("data.shapes_max"));
    p.frames = static_cast<int>(get_int("data.frames"));
    p.height = static_cast<int>(get_int("data.height"));
    p.width = static_cast<int>(get_int("data.width"));
    p.velocity_max = get_double("data.velocity_max");
    p.bounce = get_bool("data.bounce");
    return p;
  }

  FlowParams flow_params() const {
    FlowParams p;
    p.levels = static_cast<int>(get_int("flow.levels"));
    p.iterations = static_cast<int>(get_int("flow.iterations"));
    p.smooth_weight = get_double("flow.smooth_weight");
    p.blur_sigma = get_double("flow.blur_sigma");
    return p;
  }

  DiTConfig dit_config() const {
    DiTConfig c;
    c.depth = get_int("model.depth");
    c.heads = get_int("model.heads");
    c.d = get_int("model.d");
    c.patch = get_int("model.patch");
    c.ffn_mult = get_int("model.ffn_mult");
    c.d_cond = get_int("model.d_cond");
    c.phys_patch = get_int("model.phys_patch");
    c.phys_hidden = get_int("model.phys_hidden");
    c.use_instance_embed = get_bool("model.use_instance_embed");
    c.use_phys_tokens = get_bool("model.use_phys_tokens");
    c.t_train = get_int("schedule.t_train");
    c.rope.enabled = get_bool("rope.enabled");
    c.rope.theta = get_double("rope.theta");
    c.rope.alpha_t = get_double("rope.alpha_t");
    c.rope.alpha_h = get_double("rope.alpha_h");
    c.rope.alpha_w = get_double("rope.alpha_w");
    c.rope.fallback_threshold = get_double("rope.fallback_threshold");
    c.validate();
    return c;
  }

  CodecKind codec_kind() const { return codec_kind_from_name(get("codec.kind")); }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace skc
