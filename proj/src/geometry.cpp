#include "pointmoment/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "pointmoment/error.hpp"

namespace pointmoment {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double norm(const Point3& p) { return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]); }

Point3 random_unit_vector(Rng& rng) {
  for (;;) {
    Point3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(v);
    if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

// Picks an index with probability proportional to weights.
std::size_t pick_weighted(const std::vector<double>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

Point3 sample_box(const ShapeParams& p, Rng& rng) {
  const double a = p.a, b = p.b, c = p.c;
  const std::size_t face = pick_weighted({b * c, a * c, a * b}, rng);
  const double s = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
  switch (face) {
    case 0: return {s * a, u * b, v * c};
    case 1: return {u * a, s * b, v * c};
    default: return {u * a, v * b, s * c};
  }
}

Point3 sample_cylinder(const ShapeParams& p, Rng& rng) {
  const double r = p.a, h = p.c;
  const double side = kTwoPi * r * 2.0 * h, caps = 2.0 * std::numbers::pi * r * r;
  const double phi = rng.uniform(0.0, kTwoPi);
  if (pick_weighted({side, caps}, rng) == 0) return {r * std::cos(phi), r * std::sin(phi), rng.uniform(-h, h)};
  const double rad = r * std::sqrt(rng.uniform());
  return {rad * std::cos(phi), rad * std::sin(phi), rng.uniform() < 0.5 ? -h : h};
}

Point3 sample_torus(const ShapeParams& p, Rng& rng) {
  const double big = p.a, tube = p.c;
  // Area element is proportional to (R + r cos(theta)).
  double theta;
  do {
    theta = rng.uniform(0.0, kTwoPi);
  } while (rng.uniform() * (big + tube) > big + tube * std::cos(theta));
  const double phi = rng.uniform(0.0, kTwoPi);
  const double ring = big + tube * std::cos(theta);
  return {ring * std::cos(phi), ring * std::sin(phi), tube * std::sin(theta)};
}

Point3 sample_cone(const ShapeParams& p, Rng& rng) {
  const double r = p.a, h = p.c;
  const double lateral = std::numbers::pi * r * std::sqrt(r * r + h * h), base = std::numbers::pi * r * r;
  const double phi = rng.uniform(0.0, kTwoPi);
  if (pick_weighted({lateral, base}, rng) == 0) {
    const double s = std::sqrt(rng.uniform());  // fraction of slant length from the apex
    return {s * r * std::cos(phi), s * r * std::sin(phi), h * (1.0 - s)};
  }
  const double rad = r * std::sqrt(rng.uniform());
  return {rad * std::cos(phi), rad * std::sin(phi), 0.0};
}

Point3 sample_plane(const ShapeParams& p, Rng& rng) {
  return {rng.uniform(-p.a, p.a), rng.uniform(-p.b, p.b), 0.0};
}

Point3 sample_helix(const ShapeParams& p, Rng& rng) {
  const double half = std::numbers::pi * p.turns;
  const double t = rng.uniform(-half, half);
  return {p.a * std::cos(t), p.a * std::sin(t), p.c * t / kTwoPi};
}

Point3 sample_cross(const ShapeParams& p, Rng& rng) {
  const std::size_t arm = pick_weighted({p.a, p.b, p.c}, rng);
  const double len[3] = {p.a, p.b, p.c};
  Point3 q{0.0, 0.0, 0.0};
  q[arm] = rng.uniform(-len[arm], len[arm]);
  return q;
}

bool centrally_symmetric(ShapeKind kind) { return kind != ShapeKind::Cone && kind != ShapeKind::Helix; }

double parse_double(std::string_view token, const std::string& file, std::size_t line) {
  double v = 0.0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (!token.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ParseError(file, line, "invalid number '" + std::string(token) + "'");
  if (!std::isfinite(v)) throw ParseError(file, line, "non-finite coordinate");
  return v;
}

std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir, bool want_dirs) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (want_dirs ? entry.is_directory() : (entry.is_regular_file() && entry.path().extension() == ".xyz")) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

PointCloud::PointCloud(std::vector<Point3> points, std::optional<std::size_t> label)
    : points_(std::move(points)), label_(label) {
  if (points_.empty()) throw DataError("point cloud must contain at least one point");
  for (const auto& p : points_) {
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw DataError("point cloud contains a non-finite coordinate");
    }
  }
}

Tensor PointCloud::to_tensor() const {
  Tensor t(Shape{points_.size(), 3});
  for (std::size_t i = 0; i < points_.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) t.at(i, k) = points_[i][k];
  return t;
}

void Dataset::validate() const {
  for (const auto& pc : clouds) {
    if (pc.label() && *pc.label() >= class_names.size()) {
      throw DataError("label " + std::to_string(*pc.label()) + " outside class vocabulary of size " +
                      std::to_string(class_names.size()));
    }
  }
}

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Cone: return "cone";
    case ShapeKind::Plane: return "plane";
    case ShapeKind::Helix: return "helix";
    case ShapeKind::Cross: return "cross";
  }
  return "?";
}

ShapeKind parse_shape(std::string_view name) {
  for (ShapeKind k : kAllShapes)
    if (shape_name(k) == name) return k;
  throw ConfigError("unknown shape kind '" + std::string(name) + "'");
}

ShapeParams sample_shape_params(ShapeKind kind, Rng& rng) {
  ShapeParams p;
  switch (kind) {
    case ShapeKind::Sphere:
      break;
    case ShapeKind::Cube:
      p.a = rng.uniform(0.7, 1.3);
      p.b = rng.uniform(0.7, 1.3);
      p.c = rng.uniform(0.7, 1.3);
      break;
    case ShapeKind::Cylinder:
      p.a = rng.uniform(0.4, 0.7);
      p.c = rng.uniform(0.8, 1.2);
      break;
    case ShapeKind::Torus:
      p.a = 1.0;
      p.c = rng.uniform(0.2, 0.4);
      break;
    case ShapeKind::Cone:
      p.a = rng.uniform(0.6, 1.0);
      p.c = rng.uniform(1.2, 2.0);
      break;
    case ShapeKind::Plane:
      p.a = 1.0;
      p.b = rng.uniform(0.5, 1.0);
      break;
    case ShapeKind::Helix:
      p.a = 1.0;
      p.c = rng.uniform(0.3, 0.6);
      p.turns = rng.uniform(2.0, 4.0);
      break;
    case ShapeKind::Cross:
      p.a = rng.uniform(0.6, 1.2);
      p.b = rng.uniform(0.6, 1.2);
      p.c = rng.uniform(0.6, 1.2);
      break;
  }
  return p;
}

std::vector<Point3> sample_shape_surface(ShapeKind kind, const ShapeParams& params, std::size_t n_points, Rng& rng) {
  auto draw = [&]() -> Point3 {
    switch (kind) {
      case ShapeKind::Sphere: return random_unit_vector(rng);
      case ShapeKind::Cube: return sample_box(params, rng);
      case ShapeKind::Cylinder: return sample_cylinder(params, rng);
      case ShapeKind::Torus: return sample_torus(params, rng);
      case ShapeKind::Cone: return sample_cone(params, rng);
      case ShapeKind::Plane: return sample_plane(params, rng);
      case ShapeKind::Helix: return sample_helix(params, rng);
      case ShapeKind::Cross: return sample_cross(params, rng);
    }
    return {0.0, 0.0, 0.0};
  };
  std::vector<Point3> pts;
  pts.reserve(n_points);
  const bool paired = centrally_symmetric(kind);
  while (pts.size() < n_points) {
    const Point3 p = draw();
    pts.push_back(p);
    if (paired && pts.size() < n_points) pts.push_back({-p[0], -p[1], -p[2]});
  }
  return pts;
}

PointCloud generate_shape(ShapeKind kind, std::size_t n_points, Rng& rng) {
  if (n_points < 8) throw ConfigError("generate_shape: n_points must be >= 8");
  const ShapeParams params = sample_shape_params(kind, rng);
  return normalize_unit_sphere(PointCloud(sample_shape_surface(kind, params, n_points, rng), static_cast<std::size_t>(kind)));
}

Dataset generate_corpus(const CorpusSpec& spec, std::uint64_t seed, const std::string& split) {
  if (spec.classes.empty()) throw ConfigError("corpus needs at least one class");
  Dataset data;
  data.split = split;
  for (ShapeKind k : spec.classes) data.class_names.emplace_back(shape_name(k));
  const std::uint64_t split_tag = split == "train" ? 1 : split == "test" ? 2 : 3;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Rng rng(derive_seed(seed, {split_tag, c, i}));
      PointCloud pc = generate_shape(spec.classes[c], spec.n_points, rng);
      if (spec.random_pose) {
        const Matrix3 r = random_rotation(rng);
        std::vector<Point3> pts = pc.points();
        for (auto& pt : pts) {
          const Point3 q = pt;
          for (std::size_t k = 0; k < 3; ++k) pt[k] = r[k][0] * q[0] + r[k][1] * q[1] + r[k][2] * q[2];
        }
        pc = PointCloud(std::move(pts));
      }
      pc.set_label(c);
      data.clouds.push_back(std::move(pc));
    }
  }
  return data;
}

PointCloud normalize_unit_sphere(const PointCloud& pc) {
  const auto& in = pc.points();
  Point3 centroid{0.0, 0.0, 0.0};
  for (const auto& p : in)
    for (std::size_t k = 0; k < 3; ++k) centroid[k] += p[k];
  for (double& c : centroid) c /= static_cast<double>(in.size());

  std::vector<Point3> out(in.size());
  double max_norm = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) out[i][k] = in[i][k] - centroid[k];
    max_norm = std::max(max_norm, norm(out[i]));
  }
  if (!(max_norm > 0.0)) throw DataError("cannot normalize a degenerate point cloud (all points coincide)");
  for (auto& p : out)
    for (double& v : p) v /= max_norm;
  // Rounding can leave the furthest point one ulp outside the sphere.
  for (;;) {
    double m = 0.0;
    for (const auto& p : out) m = std::max(m, norm(p));
    if (m <= 1.0) break;
    for (auto& p : out)
      for (double& v : p) v *= std::nextafter(1.0, 0.0);
  }
  return PointCloud(std::move(out), pc.label());
}

AugmentationPolicy AugmentationPolicy::identity() {
  AugmentationPolicy p;
  p.rotation_max = 0.0;
  p.scale_lo = p.scale_hi = 1.0;
  p.translation_lo = p.translation_hi = 0.0;
  p.jitter_sigma = 0.0;
  p.jitter_clip = 0.0;
  p.normalize = false;
  return p;
}

void AugmentationPolicy::validate() const {
  if (!(rotation_max >= 0.0)) throw ConfigError("aug.rotation_max must be >= 0");
  if (!(scale_lo > 0.0) || !(scale_hi >= scale_lo)) throw ConfigError("aug.scale range must satisfy 0 < lo <= hi");
  if (!(translation_hi >= translation_lo)) throw ConfigError("aug.translation range must satisfy lo <= hi");
  if (!(jitter_sigma >= 0.0) || !(jitter_clip >= jitter_sigma)) {
    throw ConfigError("aug.jitter must satisfy 0 <= sigma <= clip");
  }
}

Matrix3 rotation_matrix(const Point3& axis, double angle) {
  const double n = norm(axis);
  const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

Matrix3 random_rotation(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double w = a * std::sin(kTwoPi * u2), x = a * std::cos(kTwoPi * u2);
  const double y = b * std::sin(kTwoPi * u3), z = b * std::cos(kTwoPi * u3);
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

PointCloud augment(const PointCloud& pc, const AugmentationPolicy& policy, Rng& rng) {
  std::vector<Point3> pts = pc.points();

  if (policy.rotation_max > 0.0) {
    Point3 axis;
    switch (policy.rotation_axis) {
      case RotationAxis::Random: axis = random_unit_vector(rng); break;
      case RotationAxis::X: axis = {1.0, 0.0, 0.0}; break;
      case RotationAxis::Y: axis = {0.0, 1.0, 0.0}; break;
      case RotationAxis::Z: axis = {0.0, 0.0, 1.0}; break;
    }
    const Matrix3 r = rotation_matrix(axis, rng.uniform(0.0, policy.rotation_max));
    for (auto& p : pts) {
      const Point3 q = p;
      for (std::size_t i = 0; i < 3; ++i) p[i] = r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2];
    }
  }

  if (policy.scale_lo != 1.0 || policy.scale_hi != 1.0) {
    Point3 s;
    if (policy.scale_isotropic) {
      s.fill(rng.uniform(policy.scale_lo, policy.scale_hi));
    } else {
      for (double& v : s) v = rng.uniform(policy.scale_lo, policy.scale_hi);
    }
    for (auto& p : pts)
      for (std::size_t k = 0; k < 3; ++k) p[k] *= s[k];
  }

  if (policy.translation_lo != 0.0 || policy.translation_hi != 0.0) {
    Point3 t;
    for (double& v : t) v = rng.uniform(policy.translation_lo, policy.translation_hi);
    for (auto& p : pts)
      for (std::size_t k = 0; k < 3; ++k) p[k] += t[k];
  }

  if (policy.jitter_sigma > 0.0) {
    for (auto& p : pts)
      for (double& v : p) v += std::clamp(rng.normal(0.0, policy.jitter_sigma), -policy.jitter_clip, policy.jitter_clip);
  }

  PointCloud out(std::move(pts), pc.label());
  return policy.normalize ? normalize_unit_sphere(out) : out;
}

PointCloud read_xyz_file(const std::filesystem::path& file, std::optional<std::size_t> label) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  std::vector<Point3> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string_view> tokens;
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto start = rest.find_first_not_of(" \t\r");
      if (start == std::string_view::npos) break;
      rest.remove_prefix(start);
      const auto end = rest.find_first_of(" \t\r");
      tokens.push_back(rest.substr(0, end));
      rest.remove_prefix(end == std::string_view::npos ? rest.size() : end);
    }
    if (tokens.empty() || tokens.front().front() == '#') continue;
    if (tokens.size() != 3) {
      throw ParseError(file.string(), lineno, "expected 3 coordinates, found " + std::to_string(tokens.size()));
    }
    pts.push_back({parse_double(tokens[0], file.string(), lineno), parse_double(tokens[1], file.string(), lineno),
                   parse_double(tokens[2], file.string(), lineno)});
  }
  if (pts.empty()) throw DataError(file.string() + ": no points");
  return PointCloud(std::move(pts), label);
}

Dataset load_xyz_dir(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw DataError("not a directory: " + root.string());
  Dataset data;
  data.split = root.filename().string();
  for (const auto& class_dir : sorted_entries(root, true)) {
    const auto files = sorted_entries(class_dir, false);
    if (files.empty()) continue;
    const std::size_t label = data.class_names.size();
    data.class_names.push_back(class_dir.filename().string());
    for (const auto& f : files) data.clouds.push_back(read_xyz_file(f, label));
  }
  if (data.clouds.empty()) throw DataError("no .xyz files under " + root.string());
  return data;
}

void write_xyz_file(const std::filesystem::path& file, const PointCloud& pc) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << std::setprecision(17);
  for (const auto& p : pc.points()) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

void write_xyz_dir(const std::filesystem::path& root, const Dataset& data) {
  data.validate();
  std::vector<std::size_t> counter(data.class_names.size(), 0);
  for (const auto& pc : data.clouds) {
    if (!pc.label()) throw DataError("cannot write unlabeled cloud into a class directory");
    const auto dir = root / data.class_names[*pc.label()];
    std::filesystem::create_directories(dir);
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << counter[*pc.label()]++ << ".xyz";
    write_xyz_file(dir / name.str(), pc);
  }
}

}  // namespace pointmoment
