#pragma once

// Flat UTF-8 key=value configuration. Keys are the dotted field paths of the
// configuration structs (e.g. `spec.lambda=0.5`, `spec.orders=2,3`).
// Blank lines and lines starting with '#' are ignored.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pointmoment/evaluation.hpp"
#include "pointmoment/geometry.hpp"
#include "pointmoment/training.hpp"

namespace pointmoment {

struct ConfigKey {
  std::string key;
  std::string help;
};

class KeyValues {
 public:
  // Throws ParseError on a malformed line and ConfigError on duplicate keys.
  static KeyValues parse(const std::string& text, const std::string& source = "<config>");
  // Missing file -> DataError naming the path.
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct DataConfig {
  CorpusSpec corpus;
  std::size_t test_per_class = 50;
  // Seed of the synthetic corpus; independent of the training seed so that
  // seed sweeps share one dataset.
  std::uint64_t seed = 0;
  // When set, datasets are read from <dir>/train and <dir>/test instead of generated.
  std::filesystem::path dir;
};

struct BenchConfig {
  std::vector<std::size_t> batch_sizes{32};
  std::vector<std::size_t> dims{16, 32};
  std::vector<std::vector<unsigned>> order_sets{{2}, {2, 3}};
  std::size_t repeats = 20;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  ProbeOptions probe;
  BenchConfig bench;
  std::vector<double> sweep_lambdas{0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0};
};

const std::vector<ConfigKey>& config_keys();

// Applies every entry; an unknown key or bad value throws ConfigError.
void apply_config(RunConfig& config, const KeyValues& kv);
// Round-trippable key=value text for every key.
std::string format_config(const RunConfig& config);

std::vector<unsigned> parse_orders(const std::string& text);
std::string format_orders(const std::vector<unsigned>& orders);

}  // namespace pointmoment
