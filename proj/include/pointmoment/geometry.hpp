#pragma once

// Point-cloud data model, synthetic shape corpus, .xyz ingestion and the
// stochastic augmentation pipeline.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pointmoment/random.hpp"
#include "pointmoment/tensor.hpp"

namespace pointmoment {

using Point3 = std::array<double, 3>;
using Matrix3 = std::array<std::array<double, 3>, 3>;

class PointCloud {
 public:
  // Throws DataError if empty or if any coordinate is non-finite.
  explicit PointCloud(std::vector<Point3> points, std::optional<std::size_t> label = std::nullopt);

  std::size_t size() const { return points_.size(); }
  const std::vector<Point3>& points() const { return points_; }
  const Point3& operator[](std::size_t i) const { return points_[i]; }
  std::optional<std::size_t> label() const { return label_; }
  void set_label(std::optional<std::size_t> label) { label_ = label; }

  // N x 3 tensor of coordinates.
  Tensor to_tensor() const;

  friend bool operator==(const PointCloud&, const PointCloud&) = default;

 private:
  std::vector<Point3> points_;
  std::optional<std::size_t> label_;
};

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> class_names;
  std::string split = "train";

  std::size_t size() const { return clouds.size(); }
  bool empty() const { return clouds.empty(); }
  // Throws DataError if a label does not index class_names.
  void validate() const;
};

enum class ShapeKind { Sphere, Cube, Cylinder, Torus, Cone, Plane, Helix, Cross };

inline constexpr std::array<ShapeKind, 8> kAllShapes = {ShapeKind::Sphere, ShapeKind::Cube,  ShapeKind::Cylinder,
                                                        ShapeKind::Torus,  ShapeKind::Cone,  ShapeKind::Plane,
                                                        ShapeKind::Helix,  ShapeKind::Cross};

std::string_view shape_name(ShapeKind kind);
// Throws ConfigError on an unknown name.
ShapeKind parse_shape(std::string_view name);

// Free parameters of each parametric family. Fields that do not apply to a
// kind are ignored.
struct ShapeParams {
  double a = 1.0;  // box half-extents / plane half-extents / cylinder+cone radius / torus major radius
  double b = 1.0;
  double c = 1.0;  // box third half-extent / cylinder+cone height / helix pitch / torus tube radius
  double turns = 3.0;  // helix
};

// Per-instance shape variation drawn from `rng`.
ShapeParams sample_shape_params(ShapeKind kind, Rng& rng);

// Points on the surface (or curve) of the shape in its canonical pose, not
// normalized. Centrally symmetric shapes are sampled in antipodal pairs.
std::vector<Point3> sample_shape_surface(ShapeKind kind, const ShapeParams& params, std::size_t n_points, Rng& rng);

// Draws instance parameters, samples n_points and normalizes to the unit
// sphere. The label is the kind's index in kAllShapes; corpus builders
// relabel by position in their class list.
// Requires n_points >= 8.
PointCloud generate_shape(ShapeKind kind, std::size_t n_points, Rng& rng);

struct CorpusSpec {
  std::vector<ShapeKind> classes{kAllShapes.begin(), kAllShapes.end()};
  std::size_t per_class = 200;
  std::size_t n_points = 256;
  // Rotate every cloud by its own uniformly random rotation after sampling.
  // Canonical-pose clouds are separable from raw coordinates alone.
  bool random_pose = false;
};

Dataset generate_corpus(const CorpusSpec& spec, std::uint64_t seed, const std::string& split);

// Centroid to the origin, furthest point at distance 1.
// Throws DataError when all points coincide.
PointCloud normalize_unit_sphere(const PointCloud& pc);

enum class RotationAxis { Random, X, Y, Z };

struct AugmentationPolicy {
  RotationAxis rotation_axis = RotationAxis::Random;
  double rotation_max = 6.283185307179586;  // angle ~ U[0, rotation_max)
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  bool scale_isotropic = true;
  double translation_lo = -0.1;
  double translation_hi = 0.1;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
  bool normalize = true;

  static AugmentationPolicy identity();
  // Throws ConfigError when an invariant does not hold.
  void validate() const;
};

// Rodrigues rotation about a unit axis.
Matrix3 rotation_matrix(const Point3& axis, double angle);

// Uniform (Haar) rotation, from a random unit quaternion.
Matrix3 random_rotation(Rng& rng);

// rotate -> scale -> translate -> jitter -> normalize (optional).
// Stages whose parameters make them the identity are skipped.
PointCloud augment(const PointCloud& pc, const AugmentationPolicy& policy, Rng& rng);

// Reads root/<class_name>/*.xyz. Classes and files are visited in
// lexicographic order.
Dataset load_xyz_dir(const std::filesystem::path& root);
PointCloud read_xyz_file(const std::filesystem::path& file, std::optional<std::size_t> label = std::nullopt);
void write_xyz_file(const std::filesystem::path& file, const PointCloud& pc);
// Writes root/<class_name>/<index>.xyz for every cloud.
void write_xyz_dir(const std::filesystem::path& root, const Dataset& data);

}  // namespace pointmoment
