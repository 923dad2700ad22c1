#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "protego/core.hpp"
#include "protego/face_world.hpp"
#include "protego/fr_models.hpp"
#include "protego/ssim.hpp"

namespace protego {

/// Hyper-parameters of texture learning. Defaults: epsilon 0.063,
/// step epsilon/10, omega 0.025, batch 4.
struct PPTTrainSpec {
    double epsilon = 0.063;
    double step = -1.0;  // eta; negative means epsilon / 10
    double omega = 0.025;
    int batch_size = 4;
    int iterations = 1000;
    std::uint64_t seed = 0;

    bool use_logdet = true;  // false ablates the Gram log-det term
    double ridge = 1e-4;     // gamma in log det(G + gamma I)

    double lambda_init = 1.0;
    double lambda_up = 1.2;
    double lambda_down = 0.9;
    double lambda_max = 1e6;
    double lambda_min = 0.1;

    double eta() const { return step < 0.0 ? epsilon / 10.0 : step; }
    void validate() const;
};

struct PPTTrainingMeta {
    double eta = 0.0;
    double omega = 0.0;
    int batch_size = 0;
    int iterations = 0;
    std::vector<std::string> ensemble_ids;
    std::uint64_t seed = 0;
    bool use_logdet = true;
};

/// Privacy protection texture: a UV-space perturbation bounded by epsilon.
struct PPT {
    Texture texture;
    double epsilon = 0.063;
    int user_id = 0;
    PPTTrainingMeta meta;

    static PPT zeros(int rows, int cols, int channels, double epsilon, int user_id);
    /// Throws NumericError when any texel leaves [-epsilon, epsilon].
    void check_bound() const;
};

struct ProtectionResult {
    Image protected_image;
    Image delta;
    std::string source_ref;
};

struct LossBreakdown {
    double protect_logdet_term = 0.0;
    double protect_sim_term = 0.0;
    double percept_term = 0.0;
    double lambda_ssim = 0.0;
    double total = 0.0;
    double mean_ssim = 1.0;
    double max_abs_texture = 0.0;
};

/// One training/evaluation image with its UV map.
struct Sample {
    Image image;
    UVMap uv;
};

std::vector<Sample> to_samples(const std::vector<RenderedFace>& faces);

/// delta[p] = bilinear(texture, uv[p]) on the face, 0 elsewhere.
Image deform(const Texture& texture, const UVMap& uv);
Image deform(const PPT& ppt, const UVMap& uv);
/// Adjoint of deform: accumulates dL/d(delta) into the four neighbouring
/// texels of every sampled point with bilinear weights.
void deform_backward(const UVMap& uv, const Image& grad_delta, Texture& grad_texture);

/// clip_[0,1](image - deform(texture, uv))
Image apply_texture(const Image& image, const Texture& texture, const UVMap& uv);

ProtectionResult protect(const Image& image, const PPT& ppt, const UVProvider& uv_provider,
                         std::string source_ref = {});
std::vector<ProtectionResult> protect_sequence(const std::vector<Image>& frames, const PPT& ppt,
                                               const UVProvider& uv_provider);

Eigen::MatrixXd gram_matrix(const std::vector<FeatureVector>& features);
/// log det of a symmetric positive-definite matrix via Cholesky.
double log_det_spd(const Eigen::MatrixXd& m);

/// Loss value with the texture gradient (empty when not requested).
struct LossValue {
    LossBreakdown breakdown;
    Texture gradient;
};

/// Clean features per ensemble member and batch position, [member][item].
using CleanFeatures = std::vector<std::vector<FeatureVector>>;

/// Hypersensitivity (log-det) plus protected-vs-original similarity terms,
/// averaged over the ensemble. Requires at least two samples.
LossValue protection_loss(std::span<const Sample> batch, const Texture& texture, const Ensemble& ensemble,
                          const PPTTrainSpec& spec, bool want_gradient, const CleanFeatures* clean = nullptr);

/// max(sum_x (1 - SSIM(x, protected x)) / (2|B|) - omega, 0).
LossValue perceptual_loss(std::span<const Sample> batch, const Texture& texture, double omega,
                          bool want_gradient);

/// Full objective protection + lambda * perceptual.
LossValue total_loss(std::span<const Sample> batch, const Texture& texture, const Ensemble& ensemble,
                     const PPTTrainSpec& spec, double lambda_ssim, bool want_gradient,
                     const CleanFeatures* clean = nullptr);

struct PPTTrainingResult {
    PPT ppt;
    std::vector<LossBreakdown> log;
};

PPTTrainingResult train_ppt(const UserSplit& user, const Ensemble& ensemble, const PPTTrainSpec& spec);
PPTTrainingResult train_ppt(const std::vector<Sample>& omega, int user_id, const Ensemble& ensemble,
                            const PPTTrainSpec& spec, int texture_rows, int texture_cols);

// <stem>.bin texture blob + <stem>.json sidecar.
void save_ppt(const PPT& ppt, const std::filesystem::path& stem);
PPT load_ppt(const std::filesystem::path& stem);
std::string training_log_csv(const std::vector<LossBreakdown>& log);

}  // namespace protego
