#include "protego/nn.hpp"

#include <cmath>

namespace protego::nn {
namespace {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Input activation is (C, H*W) column-major, i.e. interleaved HWC memory.
Eigen::MatrixXd im2col(const Eigen::MatrixXd& input, const ConvLayer& L) {
    const int n = L.in_size, m = L.out_size, c_in = L.in_channels;
    Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(c_in * 9, static_cast<Eigen::Index>(m) * m);
    for (int oy = 0; oy < m; ++oy) {
        for (int ox = 0; ox < m; ++ox) {
            const Eigen::Index col = static_cast<Eigen::Index>(oy) * m + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * L.stride - 1 + ky;
                if (iy < 0 || iy >= n) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * L.stride - 1 + kx;
                    if (ix < 0 || ix >= n) continue;
                    const Eigen::Index src = static_cast<Eigen::Index>(iy) * n + ix;
                    for (int c = 0; c < c_in; ++c) cols(c * 9 + ky * 3 + kx, col) = input(c, src);
                }
            }
        }
    }
    return cols;
}

Eigen::MatrixXd col2im(const Eigen::MatrixXd& dcols, const ConvLayer& L) {
    const int n = L.in_size, m = L.out_size, c_in = L.in_channels;
    Eigen::MatrixXd dinput = Eigen::MatrixXd::Zero(c_in, static_cast<Eigen::Index>(n) * n);
    for (int oy = 0; oy < m; ++oy) {
        for (int ox = 0; ox < m; ++ox) {
            const Eigen::Index col = static_cast<Eigen::Index>(oy) * m + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * L.stride - 1 + ky;
                if (iy < 0 || iy >= n) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * L.stride - 1 + kx;
                    if (ix < 0 || ix >= n) continue;
                    const Eigen::Index dst = static_cast<Eigen::Index>(iy) * n + ix;
                    for (int c = 0; c < c_in; ++c) dinput(c, dst) += dcols(c * 9 + ky * 3 + kx, col);
                }
            }
        }
    }
    return dinput;
}

struct Stage {
    int out_channels;
    int stride;
};

std::vector<Stage> stages_for(Architecture arch) {
    switch (arch) {
        case Architecture::Conv3:
            return {{8, 2}, {16, 2}, {32, 2}};
        case Architecture::Conv4:
            return {{6, 2}, {12, 2}, {24, 2}, {32, 2}};
    }
    throw ConfigError("unknown architecture");
}

}  // namespace

std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::Conv3:
            return "conv3";
        case Architecture::Conv4:
            return "conv4";
    }
    return "unknown";
}

Architecture parse_architecture(const std::string& s) {
    if (s == "conv3") return Architecture::Conv3;
    if (s == "conv4") return Architecture::Conv4;
    throw ConfigError("unknown architecture '" + s + "'");
}

Embedder::Embedder(Architecture arch, int input_size, int channels, int feature_dim)
    : arch_(arch), input_size_(input_size), channels_(channels), feature_dim_(feature_dim) {
    if (input_size < 8 || channels < 1 || feature_dim < 1)
        throw ConfigError("Embedder: invalid input size, channels or feature dimension");
    std::size_t offset = 0;
    int size = input_size, in_ch = channels;
    for (const Stage& s : stages_for(arch)) {
        ConvLayer L{};
        L.in_channels = in_ch;
        L.out_channels = s.out_channels;
        L.stride = s.stride;
        L.in_size = size;
        L.out_size = (size - 1) / s.stride + 1;
        L.weight_offset = offset;
        offset += static_cast<std::size_t>(L.out_channels) * L.in_channels * 9;
        L.bias_offset = offset;
        offset += L.out_channels;
        convs_.push_back(L);
        size = L.out_size;
        in_ch = s.out_channels;
    }
    flat_size_ = static_cast<std::size_t>(in_ch) * size * size;
    fc_weight_offset_ = offset;
    offset += flat_size_ * feature_dim;
    fc_bias_offset_ = offset;
    offset += feature_dim;
    parameter_count_ = offset;
}

void Embedder::initialize(std::span<double> params, Rng& rng) const {
    if (params.size() != parameter_count_) throw ShapeError("Embedder::initialize: parameter count mismatch");
    for (const auto& L : convs_) {
        const double std_dev = std::sqrt(2.0 / (L.in_channels * 9));
        const std::size_t count = static_cast<std::size_t>(L.out_channels) * L.in_channels * 9;
        for (std::size_t i = 0; i < count; ++i) params[L.weight_offset + i] = std_dev * rng.normal();
        for (int i = 0; i < L.out_channels; ++i) params[L.bias_offset + i] = 0.0;
    }
    const double fc_std = std::sqrt(1.0 / static_cast<double>(flat_size_));
    for (std::size_t i = 0; i < flat_size_ * feature_dim_; ++i) params[fc_weight_offset_ + i] = fc_std * rng.normal();
    for (int i = 0; i < feature_dim_; ++i) params[fc_bias_offset_ + i] = 0.0;
}

Eigen::VectorXd Embedder::forward(std::span<const double> params, const Image& image, Trace* trace) const {
    if (image.rows != input_size_ || image.cols != input_size_ || image.channels != channels_) {
        throw ShapeError("embed: expected " + std::to_string(input_size_) + "x" + std::to_string(input_size_) +
                         "x" + std::to_string(channels_) + " image, got " + shape_string(image));
    }
    if (params.size() != parameter_count_) throw ShapeError("embed: parameter count mismatch");

    Eigen::MatrixXd act = Eigen::Map<const Eigen::MatrixXd>(image.data.data(), channels_,
                                                            static_cast<Eigen::Index>(image.pixel_count()));
    act.array() -= 0.5;
    if (trace) {
        trace->cols.clear();
        trace->pre.clear();
    }
    for (const auto& L : convs_) {
        Eigen::MatrixXd cols = im2col(act, L);
        RowMajorMap W(params.data() + L.weight_offset, L.out_channels, L.in_channels * 9);
        Eigen::Map<const Eigen::VectorXd> b(params.data() + L.bias_offset, L.out_channels);
        Eigen::MatrixXd pre = W * cols;
        pre.colwise() += b;
        act = pre.unaryExpr([](double x) { return x * sigmoid(x); });
        if (trace) {
            trace->cols.push_back(std::move(cols));
            trace->pre.push_back(std::move(pre));
        }
    }
    Eigen::Map<const Eigen::VectorXd> flat(act.data(), static_cast<Eigen::Index>(flat_size_));
    RowMajorMap Wfc(params.data() + fc_weight_offset_, feature_dim_, static_cast<Eigen::Index>(flat_size_));
    Eigen::Map<const Eigen::VectorXd> bfc(params.data() + fc_bias_offset_, feature_dim_);
    Eigen::VectorXd z = Wfc * flat + bfc;
    if (trace) {
        trace->flat = flat;
        trace->z = z;
    }
    return z;
}

void Embedder::backward(std::span<const double> params, const Trace& trace, const Eigen::VectorXd& dz,
                        std::span<double> dparams, Image* dinput) const {
    const bool want_params = !dparams.empty();
    if (want_params && dparams.size() != parameter_count_) throw ShapeError("backward: gradient buffer mismatch");

    RowMajorMap Wfc(params.data() + fc_weight_offset_, feature_dim_, static_cast<Eigen::Index>(flat_size_));
    if (want_params) {
        RowMajorMutMap dWfc(dparams.data() + fc_weight_offset_, feature_dim_, static_cast<Eigen::Index>(flat_size_));
        dWfc.noalias() += dz * trace.flat.transpose();
        Eigen::Map<Eigen::VectorXd>(dparams.data() + fc_bias_offset_, feature_dim_) += dz;
    }
    const auto& last = convs_.back();
    Eigen::VectorXd dflat = Wfc.transpose() * dz;
    Eigen::MatrixXd dact = Eigen::Map<Eigen::MatrixXd>(dflat.data(), last.out_channels,
                                                       static_cast<Eigen::Index>(last.out_size) * last.out_size);

    for (int li = static_cast<int>(convs_.size()) - 1; li >= 0; --li) {
        const auto& L = convs_[li];
        const Eigen::MatrixXd& pre = trace.pre[li];
        Eigen::MatrixXd dpre = dact.array() * pre.unaryExpr([](double x) {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        }).array();
        RowMajorMap W(params.data() + L.weight_offset, L.out_channels, L.in_channels * 9);
        if (want_params) {
            RowMajorMutMap dW(dparams.data() + L.weight_offset, L.out_channels, L.in_channels * 9);
            dW.noalias() += dpre * trace.cols[li].transpose();
            Eigen::Map<Eigen::VectorXd>(dparams.data() + L.bias_offset, L.out_channels) += dpre.rowwise().sum();
        }
        if (li == 0 && dinput == nullptr) break;
        Eigen::MatrixXd dcols = W.transpose() * dpre;
        dact = col2im(dcols, L);
    }
    if (dinput) {
        *dinput = Image(input_size_, input_size_, channels_);
        Eigen::Map<Eigen::MatrixXd>(dinput->data.data(), channels_,
                                    static_cast<Eigen::Index>(dinput->pixel_count())) = dact;
    }
}

}  // namespace protego::nn
