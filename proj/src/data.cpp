#include "pmf/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace pmf {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

struct ParamRange {
    double lo, hi;
};
// normalization ranges for the descriptor (random_spec draws inside these)
const ParamRange kRanges[kNumFamilies][3] = {
    {{0.5, 1.0}, {0, 1}, {0, 1}},       // sphere: radius
    {{0.5, 0.8}, {0.1, 0.3}, {0, 1}},   // torus: R, r
    {{0.3, 1.0}, {0.3, 1.0}, {0.3, 1.0}},  // box half extents
    {{0.3, 0.8}, {0.3, 1.0}, {0, 1}},   // cylinder: radius, half height
    {{0.25, 0.4}, {0.8, 1.2}, {0, 1}},  // two_spheres: radius, separation
};
const int kParamCount[kNumFamilies] = {1, 2, 3, 2, 2};
constexpr double kScaleLo = 0.6, kScaleHi = 1.0;
}  // namespace

Family family_from_string(const std::string& s) {
    if (s == "sphere") return Family::Sphere;
    if (s == "torus") return Family::Torus;
    if (s == "box") return Family::Box;
    if (s == "cylinder") return Family::Cylinder;
    if (s == "two_spheres") return Family::TwoSpheres;
    throw DataError("unknown shape family '" + s + "'");
}

std::string family_to_string(Family f) {
    switch (f) {
        case Family::Sphere: return "sphere";
        case Family::Torus: return "torus";
        case Family::Box: return "box";
        case Family::Cylinder: return "cylinder";
        case Family::TwoSpheres: return "two_spheres";
    }
    return "?";
}

void ShapeSpec::validate() const {
    int fi = static_cast<int>(family);
    for (int i = 0; i < kParamCount[fi]; ++i)
        if (params[i] <= 0)
            throw DataError("ShapeSpec: non-positive parameter p" + std::to_string(i) + " for " +
                            family_to_string(family));
    if (family == Family::Torus && params[1] >= params[0])
        throw DataError("ShapeSpec: torus tube radius must be below the major radius");
    if (scale <= 0) throw DataError("ShapeSpec: scale must be positive");
}

double ShapeSpec::circumradius() const {
    switch (family) {
        case Family::Sphere: return params[0];
        case Family::Torus: return params[0] + params[1];
        case Family::Box:
            return std::sqrt(params[0] * params[0] + params[1] * params[1] + params[2] * params[2]);
        case Family::Cylinder: return std::sqrt(params[0] * params[0] + params[1] * params[1]);
        case Family::TwoSpheres: return 0.5 * params[1] + params[0];
    }
    return 1.0;
}

ConditionDescriptor descriptor_for(const ShapeSpec& spec) {
    ConditionDescriptor d;
    int fi = static_cast<int>(spec.family);
    d.one_hot[fi] = 1.0;
    for (int i = 0; i < kParamCount[fi]; ++i) {
        const ParamRange& r = kRanges[fi][i];
        double v = (spec.params[i] - r.lo) / (r.hi - r.lo);
        d.params_norm[i] = std::min(1.0, std::max(0.0, v));
    }
    // yaw enters only through its bin: residual orientation stays ambiguous
    double y = std::fmod(spec.yaw, kTwoPi);
    if (y < 0) y += kTwoPi;
    int bin = std::min(7, int(y / (kTwoPi / 8.0)));
    d.params_norm[3] = double(bin) / 7.0;
    d.params_norm[4] =
        std::min(1.0, std::max(0.0, (spec.scale - kScaleLo) / (kScaleHi - kScaleLo)));
    return d;
}

Tensor ConditionDescriptor::as_tensor() const {
    Tensor t = Tensor::uninit(Shape{kDescriptorDim});
    double* p = t.mut();
    for (int i = 0; i < kNumFamilies; ++i) p[i] = one_hot[i];
    for (int i = 0; i < 8; ++i) p[kNumFamilies + i] = params_norm[i];
    return t;
}

Tensor descriptor_batch(const std::vector<ShapeSpec>& specs) {
    Tensor out = Tensor::uninit(Shape{int64_t(specs.size()), kDescriptorDim});
    for (size_t i = 0; i < specs.size(); ++i) {
        Tensor d = descriptor_for(specs[i]).as_tensor();
        std::memcpy(out.mut() + i * kDescriptorDim, d.data(), sizeof(double) * kDescriptorDim);
    }
    return out;
}

// ---------------------------------------------------------------------------
// surface sampling
// ---------------------------------------------------------------------------
namespace {

// one surface point; the caller emits p and -p (every family here is
// centrally symmetric, so -p lies on the surface too)
void sample_point(const ShapeSpec& s, Rng& rng, double* p) {
    switch (s.family) {
        case Family::Sphere: {
            double x, y, z, n2;
            do {
                x = rng.next_normal();
                y = rng.next_normal();
                z = rng.next_normal();
                n2 = x * x + y * y + z * z;
            } while (n2 < 1e-12);
            double k = s.params[0] / std::sqrt(n2);
            p[0] = x * k;
            p[1] = y * k;
            p[2] = z * k;
            return;
        }
        case Family::Torus: {
            double R = s.params[0], r = s.params[1];
            double u = kTwoPi * rng.next_uniform();
            double v;
            do {  // area element is proportional to R + r cos v
                v = kTwoPi * rng.next_uniform();
            } while (rng.next_uniform() * (R + r) > R + r * std::cos(v));
            double w = R + r * std::cos(v);
            p[0] = w * std::cos(u);
            p[1] = w * std::sin(u);
            p[2] = r * std::sin(v);
            return;
        }
        case Family::Box: {
            double a = s.params[0], b = s.params[1], c = s.params[2];
            double area_z = a * b, area_y = a * c, area_x = b * c;
            double pick = rng.next_uniform() * (area_x + area_y + area_z);
            double sgn = rng.next_uniform() < 0.5 ? -1.0 : 1.0;
            double u = 2.0 * rng.next_uniform() - 1.0;
            double v = 2.0 * rng.next_uniform() - 1.0;
            if (pick < area_x) {
                p[0] = sgn * a;
                p[1] = u * b;
                p[2] = v * c;
            } else if (pick < area_x + area_y) {
                p[0] = u * a;
                p[1] = sgn * b;
                p[2] = v * c;
            } else {
                p[0] = u * a;
                p[1] = v * b;
                p[2] = sgn * c;
            }
            return;
        }
        case Family::Cylinder: {
            double rad = s.params[0], h = s.params[1];
            double lateral = kTwoPi * rad * 2.0 * h;
            double caps = 2.0 * M_PI * rad * rad;
            double th = kTwoPi * rng.next_uniform();
            if (rng.next_uniform() * (lateral + caps) < lateral) {
                double z = (2.0 * rng.next_uniform() - 1.0) * h;
                p[0] = rad * std::cos(th);
                p[1] = rad * std::sin(th);
                p[2] = z;
            } else {
                double rr = rad * std::sqrt(rng.next_uniform());
                double sgn = rng.next_uniform() < 0.5 ? -1.0 : 1.0;
                p[0] = rr * std::cos(th);
                p[1] = rr * std::sin(th);
                p[2] = sgn * h;
            }
            return;
        }
        case Family::TwoSpheres: {
            double rad = s.params[0], sep = s.params[1];
            double x, y, z, n2;
            do {
                x = rng.next_normal();
                y = rng.next_normal();
                z = rng.next_normal();
                n2 = x * x + y * y + z * z;
            } while (n2 < 1e-12);
            double k = rad / std::sqrt(n2);
            p[0] = 0.5 * sep + x * k;
            p[1] = y * k;
            p[2] = z * k;
            return;
        }
    }
}

}  // namespace

std::pair<Tensor, ConditionDescriptor> generate_sample(const ShapeSpec& spec, int n, Rng& rng) {
    spec.validate();
    if (n < 8) throw DataError("generate_sample: need n >= 8 points, got " + std::to_string(n));

    Tensor pts = Tensor::uninit(Shape{n, 3});
    double* p = pts.mut();
    double cy = std::cos(spec.yaw), sy = std::sin(spec.yaw);
    double k = spec.scale / spec.circumradius();

    auto emit = [&](int idx, const double* q, double sign) {
        double x = sign * q[0], y = sign * q[1], z = sign * q[2];
        double rx = cy * x - sy * y;
        double ry = sy * x + cy * y;
        p[3 * idx + 0] = k * rx;
        p[3 * idx + 1] = k * ry;
        p[3 * idx + 2] = k * z;
    };

    double q[3];
    int pairs = n / 2;
    for (int i = 0; i < pairs; ++i) {
        sample_point(spec, rng, q);
        emit(2 * i, q, 1.0);
        emit(2 * i + 1, q, -1.0);
    }
    if (n % 2) {
        sample_point(spec, rng, q);
        emit(n - 1, q, 1.0);
    }

    // re-center; exact zero mean already for even n
    double mean[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i)
        for (int k2 = 0; k2 < 3; ++k2) mean[k2] += p[3 * i + k2];
    for (int k2 = 0; k2 < 3; ++k2) mean[k2] /= double(n);
    for (int i = 0; i < n; ++i)
        for (int k2 = 0; k2 < 3; ++k2) p[3 * i + k2] -= mean[k2];

    return {std::move(pts), descriptor_for(spec)};
}

ShapeSpec random_spec(Rng& rng) {
    ShapeSpec s;
    s.family = static_cast<Family>(rng.next_below(kNumFamilies));
    int fi = static_cast<int>(s.family);
    for (int i = 0; i < kParamCount[fi]; ++i) {
        const ParamRange& r = kRanges[fi][i];
        s.params[i] = r.lo + (r.hi - r.lo) * rng.next_uniform();
    }
    for (int i = kParamCount[fi]; i < 3; ++i) s.params[i] = 0.0;
    s.yaw = kTwoPi * rng.next_uniform();
    s.scale = kScaleLo + (kScaleHi - kScaleLo) * rng.next_uniform();
    return s;
}

std::string manifest_line(const ShapeSpec& spec, uint64_t point_seed) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "family=%s p0=%.17g p1=%.17g p2=%.17g yaw=%.17g scale=%.17g pseed=%llu",
                  family_to_string(spec.family).c_str(), spec.params[0], spec.params[1],
                  spec.params[2], spec.yaw, spec.scale,
                  static_cast<unsigned long long>(point_seed));
    return buf;
}

uint64_t spec_hash(const ShapeSpec& spec) {
    std::string key = manifest_line(spec, 0);
    uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : key) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Splits make_splits(int n_train, int n_test, uint64_t seed) {
    if (n_train < 1 || n_test < 1) throw DataError("make_splits: counts must be >= 1");
    Rng rng(seed, /*stream=*/0x73706c69);
    Splits out;
    std::set<uint64_t> seen;
    auto fill = [&](DatasetManifest& m, int count) {
        while (static_cast<int>(m.specs.size()) < count) {
            ShapeSpec s = random_spec(rng);
            uint64_t h = spec_hash(s);
            if (!seen.insert(h).second) continue;  // collision: redraw
            m.specs.push_back(s);
            m.point_seeds.push_back(derive_seed(seed, h));
        }
    };
    fill(out.train, n_train);
    fill(out.test, n_test);
    return out;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream f(path);
    if (!f) throw DataError("write_manifest: cannot open " + path);
    for (size_t i = 0; i < m.specs.size(); ++i) f << manifest_line(m.specs[i], m.point_seeds[i]) << "\n";
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("read_manifest: cannot open " + path);
    DatasetManifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        ShapeSpec s;
        uint64_t pseed = 0;
        std::istringstream is(line);
        std::string tok;
        bool have_family = false;
        while (is >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos)
                throw DataError("read_manifest: bad token '" + tok + "' at line " +
                                std::to_string(lineno));
            std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "family") {
                s.family = family_from_string(val);
                have_family = true;
            } else if (key == "p0")
                s.params[0] = std::stod(val);
            else if (key == "p1")
                s.params[1] = std::stod(val);
            else if (key == "p2")
                s.params[2] = std::stod(val);
            else if (key == "yaw")
                s.yaw = std::stod(val);
            else if (key == "scale")
                s.scale = std::stod(val);
            else if (key == "pseed")
                pseed = std::stoull(val);
            else
                throw DataError("read_manifest: unknown key '" + key + "' at line " +
                                std::to_string(lineno));
        }
        if (!have_family) throw DataError("read_manifest: missing family at line " + std::to_string(lineno));
        m.specs.push_back(s);
        m.point_seeds.push_back(pseed);
    }
    return m;
}

// ---------------------------------------------------------------------------
// point-set files
// ---------------------------------------------------------------------------
void write_ply(const std::string& path, const Tensor& pts) {
    if (pts.shape().rank != 2 || pts.shape()[1] != 3)
        throw DataError("write_ply: expected (N,3), got " + pts.shape().str());
    std::ofstream f(path);
    if (!f) throw DataError("write_ply: cannot open " + path);
    int64_t n = pts.shape()[0];
    f << "ply\nformat ascii 1.0\nelement vertex " << n
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    char buf[128];
    const double* p = pts.data();
    for (int64_t i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", float(p[3 * i]), float(p[3 * i + 1]),
                      float(p[3 * i + 2]));
        f << buf;
    }
}

Tensor read_ply(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("read_ply: cannot open " + path);
    std::string line;
    int64_t n = -1;
    bool ascii = false;
    while (std::getline(f, line)) {
        if (line.rfind("format", 0) == 0) ascii = line.find("ascii") != std::string::npos;
        if (line.rfind("element vertex", 0) == 0) n = std::stoll(line.substr(15));
        if (line == "end_header") break;
    }
    if (!ascii || n < 0) throw DataError("read_ply: unsupported or corrupt header in " + path);
    Tensor pts = Tensor::uninit(Shape{n, 3});
    double* p = pts.mut();
    for (int64_t i = 0; i < n; ++i)
        if (!(f >> p[3 * i] >> p[3 * i + 1] >> p[3 * i + 2]))
            throw DataError("read_ply: truncated vertex data in " + path);
    return pts;
}

void write_pmf1(const std::string& path, const Tensor& pts) {
    if (pts.shape().rank != 2 || pts.shape()[1] != 3)
        throw DataError("write_pmf1: expected (N,3), got " + pts.shape().str());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_pmf1: cannot open " + path);
    f.write("PMF1", 4);
    uint32_t n = static_cast<uint32_t>(pts.shape()[0]);
    f.write(reinterpret_cast<const char*>(&n), 4);
    const double* p = pts.data();
    for (int64_t i = 0; i < 3 * pts.shape()[0]; ++i) {
        float v = static_cast<float>(p[i]);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
}

Tensor read_pmf1(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_pmf1: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "PMF1", 4) != 0)
        throw DataError("read_pmf1: bad magic in " + path);
    uint32_t n = 0;
    f.read(reinterpret_cast<char*>(&n), 4);
    if (!f) throw DataError("read_pmf1: truncated header in " + path);
    Tensor pts = Tensor::uninit(Shape{int64_t(n), 3});
    double* p = pts.mut();
    for (int64_t i = 0; i < 3 * int64_t(n); ++i) {
        float v;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw DataError("read_pmf1: truncated point data in " + path);
        p[i] = v;
    }
    return pts;
}

}  // namespace pmf
