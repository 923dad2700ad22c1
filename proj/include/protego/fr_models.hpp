#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "protego/core.hpp"
#include "protego/face_world.hpp"
#include "protego/nn.hpp"

namespace protego {

using nn::Architecture;

/// Unit-norm embedding.
struct FeatureVector {
    std::vector<double> values;

    FeatureVector() = default;
    explicit FeatureVector(std::vector<double> v) : values(std::move(v)) {}
    /// Normalizes `raw`; throws NumericError for a zero vector.
    static FeatureVector from_raw(std::span<const double> raw);

    std::size_t dim() const { return values.size(); }
    double norm() const;
    bool operator==(const FeatureVector&) const = default;
};

enum class LossKind { Softmax, AngularMargin };

std::string to_string(LossKind k);
LossKind parse_loss(const std::string& s);

struct FRTrainSpec {
    Architecture architecture = Architecture::Conv3;
    LossKind loss = LossKind::Softmax;
    int feature_dim = 32;
    std::uint64_t seed = 0;
    std::string name;  // optional model id; derived from the spec when empty

    int epochs = 30;
    int batch_size = 16;
    double learning_rate = 2e-3;
    double margin = 0.3;
    double scale = 16.0;

    double holdout_fraction = 0.2;
    double accuracy_floor = 0.9;
    int verification_triples = 2000;

    // Augmentation: additive pixel noise plus occasional mild blur.
    bool augment = true;
    double noise_sigma = 0.01;
    double blur_probability = 0.3;
    double blur_sigma_max = 1.0;
};

/// A trained, immutable face-recognition model: image -> unit feature.
class FRModel {
public:
    FRModel(Architecture arch, LossKind loss, int input_size, int channels, int feature_dim,
            std::uint64_t training_seed, std::vector<double> parameters, std::string id);

    const std::string& id() const { return id_; }
    Architecture architecture() const { return embedder_.architecture(); }
    LossKind loss() const { return loss_; }
    int feature_dim() const { return embedder_.feature_dim(); }
    int input_size() const { return embedder_.input_size(); }
    int channels() const { return embedder_.channels(); }
    std::uint64_t training_seed() const { return training_seed_; }
    std::span<const double> parameters() const { return parameters_; }

    double accuracy() const { return accuracy_; }
    void set_accuracy(double a) { accuracy_ = a; }

    FeatureVector embed(const Image& image) const;

    /// Forward pass that keeps what the input gradient needs.
    struct Tape {
        FeatureVector feature;
        nn::Trace trace;
        double raw_norm = 0.0;
    };
    Tape record(const Image& image) const;
    /// d(upstream . feature)/d(image) for a recorded forward pass.
    Image input_gradient(const Tape& tape, std::span<const double> upstream) const;

    Image embed_with_gradient(const Image& image, std::span<const double> upstream) const;

    const nn::Embedder& embedder() const { return embedder_; }

private:
    nn::Embedder embedder_;
    LossKind loss_;
    std::uint64_t training_seed_;
    std::vector<double> parameters_;
    std::string id_;
    double accuracy_ = 0.0;
};

using ModelPtr = std::shared_ptr<const FRModel>;

struct Ensemble {
    std::vector<ModelPtr> members;

    std::size_t size() const { return members.size(); }
    /// Throws ConfigError when empty or (if `distinct`) when two members share
    /// an (architecture, loss, seed) triple.
    void validate(bool distinct = false) const;
    Ensemble without(std::size_t index) const;
    std::vector<std::string> ids() const;
};

FeatureVector embed(const FRModel& model, const Image& image);
Image embed_with_gradient(const FRModel& model, const Image& image, std::span<const double> upstream);

double cosine_sim(const FeatureVector& a, const FeatureVector& b);

/// Trains on identity labels; the dataset is split per identity into a
/// training part and a held-out part used for the verification floor.
FRModel train_fr(const std::vector<RenderedFace>& dataset, const FRTrainSpec& spec);

/// Fraction of (anchor, positive, negative) triples with
/// cos(anchor, positive) > cos(anchor, negative); anchors drawn from `anchors`.
double verification_accuracy(const FRModel& model, const std::vector<RenderedFace>& anchors,
                             const std::vector<RenderedFace>& gallery, int triples, std::uint64_t seed);

// Checkpoints: <path>.bin parameter blob + <path>.json metadata.
void save_model(const FRModel& model, const std::filesystem::path& stem);
FRModel load_model(const std::filesystem::path& stem);

}  // namespace protego
