#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "protego/core.hpp"

namespace protego::nn {

enum class Architecture { Conv3, Conv4 };

std::string to_string(Architecture a);
Architecture parse_architecture(const std::string& s);

/// 3x3 convolution, padding 1.
struct ConvLayer {
    int in_channels;
    int out_channels;
    int stride;
    int in_size;   // square input side
    int out_size;  // square output side
    std::size_t weight_offset;
    std::size_t bias_offset;
};

/// Activations after each layer are kept so the backward pass can reuse them.
struct Trace {
    std::vector<Eigen::MatrixXd> cols;  // im2col matrix per conv layer
    std::vector<Eigen::MatrixXd> pre;   // pre-activation per conv layer
    Eigen::VectorXd flat;               // flattened last activation
    Eigen::VectorXd z;                  // unnormalized embedding
};

/// Convolutional embedder: conv/SiLU stack, flatten, linear projection.
/// Parameters live in a caller-owned flat buffer.
class Embedder {
public:
    Embedder(Architecture arch, int input_size, int channels, int feature_dim);

    Architecture architecture() const { return arch_; }
    int input_size() const { return input_size_; }
    int channels() const { return channels_; }
    int feature_dim() const { return feature_dim_; }
    std::size_t parameter_count() const { return parameter_count_; }

    void initialize(std::span<double> params, Rng& rng) const;

    /// Returns the unnormalized embedding; fills `trace` when non-null.
    Eigen::VectorXd forward(std::span<const double> params, const Image& image, Trace* trace) const;

    /// Back-propagates dL/dz. Accumulates parameter gradients into `dparams`
    /// when it is non-empty and writes dL/dimage into `dinput` when non-null.
    void backward(std::span<const double> params, const Trace& trace, const Eigen::VectorXd& dz,
                  std::span<double> dparams, Image* dinput) const;

private:
    Architecture arch_;
    int input_size_;
    int channels_;
    int feature_dim_;
    std::vector<ConvLayer> convs_;
    std::size_t fc_weight_offset_ = 0;
    std::size_t fc_bias_offset_ = 0;
    std::size_t flat_size_ = 0;
    std::size_t parameter_count_ = 0;
};

}  // namespace protego::nn
