#pragma once

// Config files are plain text, one `key = value` per line. Blank lines and
// lines starting with '#' are skipped; keys carry a section prefix such as
// `train.learning_rate`. Unknown keys are rejected.

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <string>

#include "facaid/decoder.hpp"
#include "facaid/sizing.hpp"

namespace facaid {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string model_path;  // empty: symbolic endpoints only
  bool cors = false;
  std::size_t max_body_bytes = 8u << 20;
  int threads = 8;
  std::string static_dir;  // optional UI bundle served at /

  void validate() const {
    if (port < 1 || port > 65535) throw Error(ErrorCode::BadInput, "port must lie in [1, 65535]");
    if (threads < 1) throw Error(ErrorCode::BadInput, "threads must be at least 1");
  }
};

struct Settings {
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const { return values.contains(key); }
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline Settings parse_settings(std::istream& in, const std::string& source = "config") {
  Settings s;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::BadInput, source + ":" + std::to_string(n) + ": expected key = value");
    auto key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw Error(ErrorCode::BadInput, source + ":" + std::to_string(n) + ": empty key");
    s.values[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return s;
}

inline Settings load_settings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::BadInput, "cannot open config " + path);
  return parse_settings(in, path);
}

namespace detail {

template <class T>
void parse_value(const std::string& key, const std::string& text, T& out) {
  if constexpr (std::is_same_v<T, std::string>) {
    out = text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else throw Error(ErrorCode::BadInput, key + ": expected true or false");
  } else {
    T v{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size())
      throw Error(ErrorCode::BadInput, key + ": cannot parse '" + text + "'");
    out = v;
  }
}

/// Binds keys to fields; `apply` copies every present key and rejects keys
/// under the bound prefixes that have no field.
class Binder {
 public:
  template <class T>
  Binder& bind(std::string key, T& field) {
    setters_[std::move(key)] = [&field](const std::string& k, const std::string& v) { parse_value(k, v, field); };
    return *this;
  }

  void apply(const Settings& s, const std::vector<std::string>& prefixes) const {
    for (const auto& [k, v] : s.values) {
      const bool ours = std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return k.starts_with(p); });
      if (!ours) continue;
      auto it = setters_.find(k);
      if (it == setters_.end()) throw Error(ErrorCode::BadInput, "unknown config key " + k);
      it->second(k, v);
    }
  }

 private:
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters_;
};

}  // namespace detail

inline void apply_settings(const Settings& s, ModelConfig& c) {
  detail::Binder b;
  b.bind("model.embed_dim", c.embed_dim).bind("model.enc_layers", c.enc_layers).bind("model.dec_layers", c.dec_layers);
  b.bind("model.heads", c.heads).bind("model.ff_mult", c.ff_mult).bind("model.dropout", c.dropout);
  b.bind("model.resolution", c.resolution).bind("model.max_input", c.max_input).bind("model.max_output", c.max_output);
  b.apply(s, {"model."});
}

inline void apply_settings(const Settings& s, TrainConfig& c) {
  detail::Binder b;
  b.bind("train.learning_rate", c.learning_rate).bind("train.batch_size", c.batch_size).bind("train.epochs", c.epochs);
  b.bind("train.weight_decay", c.weight_decay).bind("train.seed", c.seed);
  b.bind("train.validation_fraction", c.validation_fraction).bind("train.clip_norm", c.clip_norm);
  b.bind("train.patience", c.patience).bind("train.warmup_steps", c.warmup_steps);
  b.bind("train.beta1", c.beta1).bind("train.beta2", c.beta2).bind("train.eps", c.eps);
  b.apply(s, {"train."});
}

inline void apply_settings(const Settings& s, OptimizeConfig& c) {
  detail::Binder b;
  b.bind("optimize.width", c.width).bind("optimize.height", c.height).bind("optimize.tau", c.tau);
  b.bind("optimize.step", c.step).bind("optimize.beta1", c.beta1).bind("optimize.beta2", c.beta2);
  b.bind("optimize.eps", c.eps).bind("optimize.max_iterations", c.max_iterations).bind("optimize.window", c.window);
  b.bind("optimize.tolerance", c.tolerance).bind("optimize.grad_tolerance", c.grad_tolerance);
  b.bind("optimize.anneal_from", c.anneal_from).bind("optimize.anneal_iterations", c.anneal_iterations);
  b.apply(s, {"optimize."});
}

inline void apply_settings(const Settings& s, DecodeConfig& c) {
  detail::Binder b;
  b.bind("infer.temperature", c.temperature).bind("infer.seed", c.seed).bind("infer.max_tokens", c.max_tokens);
  b.apply(s, {"infer."});
}

inline void apply_settings(const Settings& s, ServiceConfig& c) {
  detail::Binder b;
  b.bind("serve.host", c.host).bind("serve.port", c.port).bind("serve.model", c.model_path).bind("serve.cors", c.cors);
  b.bind("serve.max_body_bytes", c.max_body_bytes).bind("serve.threads", c.threads);
  b.bind("serve.static_dir", c.static_dir);
  b.apply(s, {"serve."});
}

}  // namespace facaid
