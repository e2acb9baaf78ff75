#include "pointmoment/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "detail/util.hpp"
#include "pointmoment/error.hpp"

namespace pointmoment {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": not a number: '" + v + "'");
  return x;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": not a non-negative integer: '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

template <typename T>
std::vector<T> to_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  for (const auto& item : split(v, ',')) {
    if constexpr (std::is_floating_point_v<T>) {
      out.push_back(to_double(key, item));
    } else {
      out.push_back(static_cast<T>(to_u64(key, item)));
    }
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>) {
      s += detail::format_double(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

std::string axis_name(RotationAxis a) {
  switch (a) {
    case RotationAxis::Random: return "random";
    case RotationAxis::X: return "x";
    case RotationAxis::Y: return "y";
    case RotationAxis::Z: return "z";
  }
  return "random";
}

RotationAxis parse_axis(const std::string& key, const std::string& v) {
  if (v == "random") return RotationAxis::Random;
  if (v == "x") return RotationAxis::X;
  if (v == "y") return RotationAxis::Y;
  if (v == "z") return RotationAxis::Z;
  throw ConfigError(key + ": expected random|x|y|z, got '" + v + "'");
}

struct Field {
  ConfigKey doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define PM_DOUBLE(KEY, MEMBER, HELP)                                                            \
  Field {                                                                                       \
    {KEY, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); },      \
        [](const RunConfig& c) { return detail::format_double(c.MEMBER); }                      \
  }
#define PM_UINT(KEY, MEMBER, HELP)                                                                      \
  Field {                                                                                               \
    {KEY, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = static_cast<decltype(c.MEMBER)>(to_u64(KEY, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                                     \
  }
#define PM_BOOL(KEY, MEMBER, HELP)                                                            \
  Field {                                                                                     \
    {KEY, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(KEY, v); },      \
        [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }           \
  }
#define PM_PATH(KEY, MEMBER, HELP)                                                         \
  Field {                                                                                  \
    {KEY, HELP}, [](RunConfig& c, const std::string& v) { c.MEMBER = v; },                 \
        [](const RunConfig& c) { return c.MEMBER.string(); }                               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PM_UINT("epochs", train.epochs, "pre-training epochs (>= 1)"),
      PM_UINT("batch_size", train.batch_size, "clouds per batch (>= 2)"),
      PM_DOUBLE("lr_init", train.lr_init, "initial learning rate of the cosine schedule"),
      PM_DOUBLE("lr_min", train.lr_min, "final learning rate of the cosine schedule"),
      PM_DOUBLE("weight_decay", train.weight_decay, "decoupled Adam weight decay"),
      PM_UINT("seed", train.seed, "run seed (shuffling, augmentation, init, branch choice)"),
      PM_UINT("checkpoint_every", train.checkpoint_every, "save a checkpoint every N epochs (0 = only final)"),
      PM_PATH("checkpoint_dir", train.checkpoint_dir, "directory for *.pmnt checkpoints"),
      PM_PATH("metrics_path", train.metrics_path, "per-step metrics CSV (per-epoch rows go to <stem>_epochs.csv)"),
      PM_UINT("threads", train.threads, "worker threads for augmentation and feature extraction"),
      Field{{"spec.orders", "comma-separated moment orders, e.g. 2,3 (empty = invariance only)"},
            [](RunConfig& c, const std::string& v) { c.train.spec.orders = parse_orders(v); },
            [](const RunConfig& c) { return format_orders(c.train.spec.orders); }},
      Field{{"spec.branch_mode", "all | single"},
            [](RunConfig& c, const std::string& v) { c.train.spec.branch_mode = parse_branch_mode(v); },
            [](const RunConfig& c) { return branch_mode_name(c.train.spec.branch_mode); }},
      PM_DOUBLE("spec.lambda", train.spec.lambda, "weight of the redundancy term"),
      PM_UINT("spec.views", train.spec.views, "augmented views per cloud (must be 2)"),
      PM_UINT("spec.term_budget", train.spec.term_budget, "maximum number of moment terms"),
      Field{{"aug.rotation_axis", "random | x | y | z"},
            [](RunConfig& c, const std::string& v) { c.train.aug.rotation_axis = parse_axis("aug.rotation_axis", v); },
            [](const RunConfig& c) { return axis_name(c.train.aug.rotation_axis); }},
      PM_DOUBLE("aug.rotation_max", train.aug.rotation_max, "rotation angle drawn from [0, max) radians"),
      PM_DOUBLE("aug.scale_lo", train.aug.scale_lo, "lower bound of the scale factor"),
      PM_DOUBLE("aug.scale_hi", train.aug.scale_hi, "upper bound of the scale factor"),
      PM_BOOL("aug.scale_isotropic", train.aug.scale_isotropic, "one scale for all axes"),
      PM_DOUBLE("aug.translation_lo", train.aug.translation_lo, "lower bound of per-axis translation"),
      PM_DOUBLE("aug.translation_hi", train.aug.translation_hi, "upper bound of per-axis translation"),
      PM_DOUBLE("aug.jitter_sigma", train.aug.jitter_sigma, "Gaussian jitter std"),
      PM_DOUBLE("aug.jitter_clip", train.aug.jitter_clip, "jitter clip bound"),
      PM_BOOL("aug.normalize", train.aug.normalize, "renormalize to the unit sphere after augmenting"),
      Field{{"encoder.point_mlp_widths", "shared per-point MLP widths, starting with 3"},
            [](RunConfig& c, const std::string& v) {
              c.train.encoder.point_mlp_widths = to_list<std::size_t>("encoder.point_mlp_widths", v);
            },
            [](const RunConfig& c) { return join(c.train.encoder.point_mlp_widths); }},
      PM_UINT("encoder.feature_dim", train.encoder.feature_dim, "encoder output width"),
      PM_UINT("encoder.embed_dim", train.encoder.embed_dim, "projector output width D (>= 2)"),
      PM_UINT("encoder.projector_hidden", train.encoder.projector_hidden, "projector hidden width"),
      Field{{"data.classes", "comma-separated shape kinds for the synthetic corpus"},
            [](RunConfig& c, const std::string& v) {
              c.data.corpus.classes.clear();
              for (const auto& name : split(v, ',')) c.data.corpus.classes.push_back(parse_shape(name));
            },
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.data.corpus.classes.size(); ++i) {
                if (i) s += ",";
                s += shape_name(c.data.corpus.classes[i]);
              }
              return s;
            }},
      PM_UINT("data.train_per_class", data.corpus.per_class, "synthetic training clouds per class"),
      PM_UINT("data.test_per_class", data.test_per_class, "synthetic test clouds per class"),
      PM_UINT("data.n_points", data.corpus.n_points, "points per synthetic cloud"),
      PM_BOOL("data.random_pose", data.corpus.random_pose, "rotate each synthetic cloud by a uniformly random rotation"),
      PM_UINT("data.seed", data.seed, "seed of the synthetic corpus"),
      PM_PATH("data.dir", data.dir, "read <dir>/train and <dir>/test .xyz trees instead of generating"),
      PM_DOUBLE("probe.reg", probe.reg, "SVM L2 regularization"),
      PM_UINT("probe.epochs", probe.epochs, "SVM epochs"),
      PM_DOUBLE("probe.step0", probe.step0, "SVM step size numerator (step0 / sqrt(t))"),
      PM_BOOL("probe.fixed_step", probe.fixed_step, "constant SVM step size"),
      PM_UINT("probe.batch_size", probe.batch_size, "SVM mini-batch size (0 = full batch)"),
      PM_UINT("probe.seed", probe.seed, "SVM shuffling seed"),
      Field{{"bench.batch_sizes", "comma-separated batch sizes for bench"},
            [](RunConfig& c, const std::string& v) { c.bench.batch_sizes = to_list<std::size_t>("bench.batch_sizes", v); },
            [](const RunConfig& c) { return join(c.bench.batch_sizes); }},
      Field{{"bench.dims", "comma-separated embedding widths for bench"},
            [](RunConfig& c, const std::string& v) { c.bench.dims = to_list<std::size_t>("bench.dims", v); },
            [](const RunConfig& c) { return join(c.bench.dims); }},
      Field{{"bench.orders", "semicolon-separated order sets, e.g. 2;2,3"},
            [](RunConfig& c, const std::string& v) {
              c.bench.order_sets.clear();
              for (const auto& set : split(v, ';')) c.bench.order_sets.push_back(parse_orders(set));
            },
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.bench.order_sets.size(); ++i) {
                if (i) s += ";";
                s += format_orders(c.bench.order_sets[i]);
              }
              return s;
            }},
      PM_UINT("bench.repeats", bench.repeats, "timed repetitions per bench cell"),
      Field{{"sweep.lambdas", "comma-separated lambda values for sweep-lambda"},
            [](RunConfig& c, const std::string& v) { c.sweep_lambdas = to_list<double>("sweep.lambdas", v); },
            [](const RunConfig& c) { return join(c.sweep_lambdas); }},
  };
  return table;
}

#undef PM_DOUBLE
#undef PM_UINT
#undef PM_BOOL
#undef PM_PATH

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected key=value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(source, lineno, "empty key");
    if (kv.contains(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv.values_[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.doc);
    return out;
  }();
  return keys;
}

void apply_config(RunConfig& config, const KeyValues& kv) {
  for (const auto& [key, value] : kv.entries()) {
    bool known = false;
    for (const auto& f : fields()) {
      if (f.doc.key == key) {
        f.set(config, value);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.doc.key + "=" + f.get(config) + "\n";
  return out;
}

std::vector<unsigned> parse_orders(const std::string& text) {
  std::vector<unsigned> orders;
  for (const auto& item : split(text, ',')) {
    const auto k = to_u64("spec.orders", item);
    if (k < 2) throw ConfigError("spec.orders: orders must be >= 2");
    orders.push_back(static_cast<unsigned>(k));
  }
  std::sort(orders.begin(), orders.end());
  orders.erase(std::unique(orders.begin(), orders.end()), orders.end());
  return orders;
}

std::string format_orders(const std::vector<unsigned>& orders) { return join(orders); }

}  // namespace pointmoment
