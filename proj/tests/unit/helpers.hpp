#pragma once

#include <memory>
#include <vector>

#include "protego/face_world.hpp"
#include "protego/fr_models.hpp"

namespace testing {

using namespace protego;

inline std::shared_ptr<const FRModel> random_model(nn::Architecture arch, int input_size, int dim, std::uint64_t seed,
                                                   const std::string& id = "") {
    nn::Embedder e(arch, input_size, 3, dim);
    std::vector<double> params(e.parameter_count());
    Rng rng(seed);
    e.initialize(params, rng);
    return std::make_shared<FRModel>(arch, LossKind::Softmax, input_size, 3, dim, seed, params,
                                     id.empty() ? "rand-" + std::to_string(seed) : id);
}

inline Image random_image(int rows, int cols, int channels, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Image img(rows, cols, channels);
    for (auto& x : img.data) x = rng.uniform(lo, hi);
    return img;
}

inline FeatureVector random_unit(std::size_t d, Rng& rng) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    return FeatureVector::from_raw(v);
}

/// Small world config for fast tests.
inline WorldConfig small_world(int size = 32) {
    WorldConfig c;
    c.image_size = size;
    c.texture_size = size;
    return c;
}

}  // namespace testing
