#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "pmf/rng.hpp"
#include "pmf/tensor.hpp"

namespace pmf {

enum class Family { Sphere, Torus, Box, Cylinder, TwoSpheres };

Family family_from_string(const std::string& s);
std::string family_to_string(Family f);
constexpr int kNumFamilies = 5;
constexpr int kDescriptorDim = 13;  // 5 one-hot + 8 normalized parameters

// Parametric shape instance. params are family-specific:
//   sphere:      p0 = radius
//   torus:       p0 = major radius R, p1 = tube radius r (r < R)
//   box:         p0,p1,p2 = half extents
//   cylinder:    p0 = radius, p1 = half height
//   two_spheres: p0 = radius, p1 = center separation
struct ShapeSpec {
    Family family = Family::Sphere;
    std::array<double, 3> params{1.0, 0.0, 0.0};
    double yaw = 0.0;    // rotation about z
    double scale = 1.0;  // applied after unit normalization

    void validate() const;
    double circumradius() const;  // max point norm before normalization
};

struct ConditionDescriptor {
    std::array<double, kNumFamilies> one_hot{};
    std::array<double, 8> params_norm{};  // range-normalized, yaw quantized to 8 bins

    Tensor as_tensor() const;  // (13,)
};

ConditionDescriptor descriptor_for(const ShapeSpec& spec);
Tensor descriptor_batch(const std::vector<ShapeSpec>& specs);  // (B,13)

// Area-weighted surface sample, yaw-rotated, scaled into [-1,1]^3 and
// re-centered at the origin. Even n uses antipodal pairs so the centroid is
// exactly zero without moving points off the surface.
std::pair<Tensor, ConditionDescriptor> generate_sample(const ShapeSpec& spec, int n, Rng& rng);

ShapeSpec random_spec(Rng& rng);
uint64_t spec_hash(const ShapeSpec& spec);

struct DatasetManifest {
    std::vector<ShapeSpec> specs;
    std::vector<uint64_t> point_seeds;
};

struct Splits {
    DatasetManifest train;
    DatasetManifest test;
};

// Disjoint train/test spec lists (checked by spec hash), deterministic in seed.
Splits make_splits(int n_train, int n_test, uint64_t seed);

// one `key=value ...` record per line
std::string manifest_line(const ShapeSpec& spec, uint64_t point_seed);
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// point-set file formats
void write_ply(const std::string& path, const Tensor& pts);
Tensor read_ply(const std::string& path);
void write_pmf1(const std::string& path, const Tensor& pts);  // "PMF1", u32 n, 3n f32 LE
Tensor read_pmf1(const std::string& path);

}  // namespace pmf
