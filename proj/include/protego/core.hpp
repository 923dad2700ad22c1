#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace protego {

// Error hierarchy. Every failure mode named by a module contract has its own
// type so callers and tests can tell them apart.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class NoFaceError : public Error {
public:
    using Error::Error;
};

class ConsistencyError : public Error {
public:
    using Error::Error;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class DependencyError : public Error {
public:
    using Error::Error;
};

class TrainingFailure : public Error {
public:
    TrainingFailure(const std::string& what, double achieved)
        : Error(what), achieved_(achieved) {}
    double achieved() const { return achieved_; }

private:
    double achieved_;
};

/// Dense rows x cols x channels array of doubles, interleaved (HWC) storage.
/// Used for images, UV-space textures and perturbation masks alike.
struct Image {
    int rows = 0;
    int cols = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int r, int c, int ch, double fill = 0.0)
        : rows(r), cols(c), channels(ch),
          data(static_cast<std::size_t>(r) * c * ch, fill) {}

    std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * cols + c) * channels + ch;
    }
    double& at(int r, int c, int ch) { return data[index(r, c, ch)]; }
    double at(int r, int c, int ch) const { return data[index(r, c, ch)]; }

    std::size_t size() const { return data.size(); }
    std::size_t pixel_count() const { return static_cast<std::size_t>(rows) * cols; }
    bool same_shape(const Image& o) const {
        return rows == o.rows && cols == o.cols && channels == o.channels;
    }
    bool operator==(const Image&) const = default;
};

using Texture = Image;

std::string shape_string(const Image& img);
void require_same_shape(const Image& a, const Image& b, const char* what);
double max_abs(std::span<const double> values);
double max_abs_diff(const Image& a, const Image& b);

/// Seeded generator with portable uniform/normal mappings, so that every
/// derived quantity is a pure function of the seed on any standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace protego
