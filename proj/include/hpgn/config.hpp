#pragma once

// Run configuration: INI sections (model, loss, schedule, data, eval, synth)
// resolved as defaults < file < flags, echoed verbatim into run outputs.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "hpgn/data.hpp"
#include "hpgn/errors.hpp"
#include "hpgn/eval.hpp"
#include "hpgn/losses.hpp"
#include "hpgn/model.hpp"
#include "hpgn/optim.hpp"
#include "hpgn/sampling.hpp"

namespace hpgn {

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  ScheduleConfig schedule;
  OptimConfig optim;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // extra numbered checkpoints; 0 keeps only the latest

  std::size_t identities_per_batch = 8;  // P
  std::size_t images_per_identity = 4;   // K
  AugmentConfig augment;

  std::string protocol = "crosscam";
  std::size_t repeats = 10;
  SplitMode split_mode = SplitMode::conventional;
  std::size_t eval_batch = 64;

  SynthSpec synth;

  void validate() const {
    model.validate_shape();
    loss.validate();
    schedule.validate();
    if (identities_per_batch < 2) throw ConfigError("data.P must be at least 2 for triplet mining");
    if (images_per_identity < 2) throw ConfigError("data.K must be at least 2 for triplet mining");
    if (protocol != "crosscam" && protocol != "repeated")
      throw ConfigError("eval.protocol must be crosscam or repeated, got '" + protocol + "'");
    if (repeats < 1) throw ConfigError("eval.repeats must be >= 1");
  }

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::string get(const std::string& section, const std::string& key) const;
  std::string to_ini() const;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <class N>
N parse_number(const std::string& raw, const std::string& what) {
  const std::string s = trim(raw);
  N v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError(what + ": cannot parse '" + raw + "'");
  return v;
}

inline bool parse_bool(const std::string& raw, const std::string& what) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(what + ": expected true/false, got '" + raw + "'");
}

template <class N>
std::vector<N> parse_list(const std::string& raw, const std::string& what) {
  std::vector<N> out;
  if (trim(raw).empty()) return out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<N>(item, what));
  return out;
}

template <class N>
std::string join_list(const std::vector<N>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<N>)
      out += fmt_double(v[i]);
    else
      out += std::to_string(v[i]);
  }
  return out;
}

struct ConfigField {
  std::string section, key, help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define HPGN_FIELD_SIZE(SEC, KEY, MEMBER, HELP)                                                     \
  ConfigField{SEC, KEY, HELP,                                                                       \
              [](RunConfig& c, const std::string& v) {                                              \
                c.MEMBER = parse_number<std::size_t>(v, SEC "." KEY);                               \
              },                                                                                    \
              [](const RunConfig& c) { return std::to_string(c.MEMBER); }}
#define HPGN_FIELD_DOUBLE(SEC, KEY, MEMBER, HELP)                                                   \
  ConfigField{SEC, KEY, HELP,                                                                       \
              [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(v, SEC "." KEY); }, \
              [](const RunConfig& c) { return fmt_double(c.MEMBER); }}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      {"model", "variant", "hpgn | baseline | hpgn-ng | hpgn-oi | hpgn1 | hpgn2 | hpgn3",
       [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(trim(v)); },
       [](const RunConfig& c) { return to_string(c.model.variant); }},
      HPGN_FIELD_SIZE("model", "input_size", model.input_size, "square input side in pixels"),
      {"model", "channels", "backbone stage widths, comma separated",
       [](RunConfig& c, const std::string& v) { c.model.channels = parse_list<std::size_t>(v, "model.channels"); },
       [](const RunConfig& c) { return join_list(c.model.channels); }},
      {"model", "kernels", "backbone kernel per stage (empty: all 3)",
       [](RunConfig& c, const std::string& v) { c.model.kernels = parse_list<std::size_t>(v, "model.kernels"); },
       [](const RunConfig& c) { return join_list(c.model.kernels); }},
      {"model", "last_stride_one", "final backbone stage keeps resolution",
       [](RunConfig& c, const std::string& v) { c.model.last_stride_one = parse_bool(v, "model.last_stride_one"); },
       [](const RunConfig& c) { return std::string(c.model.last_stride_one ? "true" : "false"); }},
      HPGN_FIELD_SIZE("model", "sgn_depth", model.sgn_depth, "SG layers per SGN"),
      HPGN_FIELD_SIZE("model", "embed_dim", model.embed_dim, "CBR output width"),
      {"model", "scales", "explicit SGN pooling windows (empty: variant default)",
       [](RunConfig& c, const std::string& v) { c.model.scales = parse_list<std::size_t>(v, "model.scales"); },
       [](const RunConfig& c) { return join_list(c.model.scales); }},
      HPGN_FIELD_DOUBLE("loss", "alpha", loss.alpha, "smoothed softmax weight on CBR1"),
      HPGN_FIELD_DOUBLE("loss", "beta", loss.beta, "triplet weight on CBR1"),
      HPGN_FIELD_DOUBLE("loss", "rho", loss.rho, "smoothed softmax weight on CBR2"),
      HPGN_FIELD_DOUBLE("loss", "lambda", loss.lambda, "triplet weight on CBR2"),
      HPGN_FIELD_DOUBLE("loss", "epsilon", loss.epsilon, "label smoothing"),
      HPGN_FIELD_DOUBLE("loss", "margin", loss.margin, "triplet margin"),
      HPGN_FIELD_SIZE("schedule", "epochs", schedule.total_epochs, "total epochs; boundaries rescale"),
      HPGN_FIELD_DOUBLE("schedule", "warmup_lr", schedule.warmup_lr, "learning rate at epoch 1"),
      HPGN_FIELD_DOUBLE("schedule", "base_lr", schedule.base_lr, "learning rate at the end of warm-up"),
      {"schedule", "plateau_lr", "rate per plateau",
       [](RunConfig& c, const std::string& v) { c.schedule.plateau_lr = parse_list<double>(v, "schedule.plateau_lr"); },
       [](const RunConfig& c) { return join_list(c.schedule.plateau_lr); }},
      {"schedule", "boundaries", "last epoch of warm-up and of each plateau, for a 150-epoch run",
       [](RunConfig& c, const std::string& v) {
         c.schedule.boundaries = parse_list<std::size_t>(v, "schedule.boundaries");
       },
       [](const RunConfig& c) { return join_list(c.schedule.boundaries); }},
      HPGN_FIELD_DOUBLE("schedule", "momentum", optim.momentum, "SGD momentum"),
      HPGN_FIELD_DOUBLE("schedule", "weight_decay", optim.weight_decay, "L2 decay (BN excluded)"),
      {"schedule", "seed", "training seed",
       [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v, "schedule.seed"); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      HPGN_FIELD_SIZE("schedule", "checkpoint_every", checkpoint_every,
                      "also keep epoch-numbered checkpoints every N epochs (0: off)"),
      HPGN_FIELD_SIZE("data", "P", identities_per_batch, "identities per batch"),
      HPGN_FIELD_SIZE("data", "K", images_per_identity, "images per identity"),
      HPGN_FIELD_DOUBLE("data", "flip_prob", augment.flip_prob, "horizontal flip probability"),
      HPGN_FIELD_DOUBLE("data", "erase_prob", augment.erase_prob, "random erasing probability"),
      {"eval", "protocol", "crosscam | repeated",
       [](RunConfig& c, const std::string& v) { c.protocol = trim(v); },
       [](const RunConfig& c) { return c.protocol; }},
      HPGN_FIELD_SIZE("eval", "repeats", repeats, "repeated-split count"),
      {"eval", "split_mode", "conventional | literal",
       [](RunConfig& c, const std::string& v) { c.split_mode = parse_split_mode(trim(v)); },
       [](const RunConfig& c) {
         return std::string(c.split_mode == SplitMode::conventional ? "conventional" : "literal");
       }},
      HPGN_FIELD_SIZE("eval", "batch", eval_batch, "feature extraction batch size"),
      HPGN_FIELD_SIZE("synth", "ids", synth.identities, "synthetic identities"),
      HPGN_FIELD_SIZE("synth", "imgs", synth.images_per_identity, "images per identity"),
      HPGN_FIELD_SIZE("synth", "size", synth.image_size, "image side"),
      HPGN_FIELD_SIZE("synth", "cams", synth.cameras, "camera count"),
      HPGN_FIELD_SIZE("synth", "marker_min", synth.marker_min, "smallest glyph side"),
      HPGN_FIELD_SIZE("synth", "marker_max", synth.marker_max, "largest glyph side"),
      HPGN_FIELD_SIZE("synth", "groups", synth.color_groups, "shared base-colour groups"),
      HPGN_FIELD_DOUBLE("synth", "train_fraction", synth.train_fraction, "identities tagged train"),
      {"synth", "seed", "generator seed",
       [](RunConfig& c, const std::string& v) { c.synth.seed = parse_number<std::uint64_t>(v, "synth.seed"); },
       [](const RunConfig& c) { return std::to_string(c.synth.seed); }},
  };
  return fields;
}

#undef HPGN_FIELD_SIZE
#undef HPGN_FIELD_DOUBLE

inline const ConfigField& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : config_fields())
    if (f.section == section && f.key == key) return f;
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

}  // namespace detail

inline void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  detail::find_field(section, key).set(*this, value);
}

inline std::string RunConfig::get(const std::string& section, const std::string& key) const {
  return detail::find_field(section, key).get(*this);
}

inline std::string RunConfig::to_ini() const {
  std::ostringstream os;
  std::string current;
  for (const auto& f : detail::config_fields()) {
    if (f.section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << f.section << "]\n";
      current = f.section;
    }
    os << f.key << " = " << f.get(*this) << '\n';
  }
  return os.str();
}

// Applies every key of an INI document. Sections listed in `passthrough`
// are returned instead of applied (used for checkpoint bookkeeping).
inline std::map<std::string, std::string> apply_ini(RunConfig& cfg, const std::string& text,
                                                    const std::vector<std::string>& passthrough = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
  }
  std::map<std::string, std::string> extra;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config: key '" + section + "' appears outside any section");
    const bool pass = std::find(passthrough.begin(), passthrough.end(), section) != passthrough.end();
    for (const auto& [key, node] : body) {
      if (pass)
        extra[section + "." + key] = node.data();
      else
        cfg.set(section, key, node.data());
    }
  }
  return extra;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  apply_ini(cfg, ss.str());
  return cfg;
}

// "section.key=value" override as used by --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  cfg.set(detail::trim(assignment.substr(0, dot)), detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
          assignment.substr(eq + 1));
}

// "[section] key = default  # help" lines for --help output.
inline std::string config_reference() {
  RunConfig defaults;
  std::ostringstream os;
  for (const auto& f : detail::config_fields())
    os << "  [" << f.section << "] " << f.key << " = " << f.get(defaults) << "   # " << f.help << '\n';
  return os.str();
}

}  // namespace hpgn
