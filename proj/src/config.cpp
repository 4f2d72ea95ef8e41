#include "ldkl/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "ldkl/error.hpp"

namespace ldkl::cfg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  return out;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct Binding {
  std::function<void(const std::string&, const std::string&)> set;
  std::function<std::string()> get;
};

std::map<std::string, Binding> bindings(model::ModelConfig& m, train::TrainConfig& t) {
  std::map<std::string, Binding> b;
  auto real = [&b](const std::string& key, double* field) {
    b[key] = {[field](const std::string& k, const std::string& v) { *field = to_double(k, v); },
              [field] { return num(*field); }};
  };
  auto count = [&b](const std::string& key, std::size_t* field) {
    b[key] = {[field](const std::string& k, const std::string& v) { *field = to_size(k, v); },
              [field] { return std::to_string(*field); }};
  };
  b["model"] = {[&m](const std::string&, const std::string& v) { m.kind = model::parse_kind(v); },
                [&m] { return model::kind_name(m.kind); }};
  count("latent_dim", &m.latent_dim);
  count("inducing_points", &m.inducing_points);
  count("conv_filters", &m.conv_filters);
  count("enc_hidden", &m.enc_hidden);
  count("fwd_hidden", &m.fwd_hidden);
  real("grid_lo", &m.grid_lo);
  real("grid_hi", &m.grid_hi);
  real("lr_nn", &t.lr_nn);
  real("lr_gp", &t.lr_gp);
  real("weight_decay", &t.weight_decay);
  real("alpha", &t.alpha);
  real("beta", &t.beta);
  real("lambda_var", &t.lambda_var);
  count("batch_size", &t.batch_size);
  count("epochs", &t.epochs);
  real("sigma_x2", &t.noise.sigma_x2);
  real("sigma_u2", &t.noise.sigma_u2);
  b["seed"] = {[&t](const std::string& k, const std::string& v) { t.seed = to_size(k, v); },
               [&t] { return std::to_string(t.seed); }};
  return b;
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key or value");
    if (kv.contains(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

void apply(const KeyValues& kv, model::ModelConfig& model, train::TrainConfig& train) {
  auto b = bindings(model, train);
  for (const auto& [key, value] : kv) {
    const auto it = b.find(key);
    if (it == b.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(key, value);
  }
}

KeyValues describe(const model::ModelConfig& model, const train::TrainConfig& train) {
  model::ModelConfig m = model;
  train::TrainConfig t = train;
  KeyValues out;
  for (const auto& [key, binding] : bindings(m, t)) out[key] = binding.get();
  return out;
}

}  // namespace ldkl::cfg
