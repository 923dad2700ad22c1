#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "protego/core.hpp"
#include "protego/retrieval.hpp"

namespace protego {

enum class AttackKind { Gaussian, Median, Jpeg, Resize };

std::string to_string(AttackKind k);
AttackKind parse_attack_kind(const std::string& s);

/// parameter: sigma > 0 (gaussian), odd window k >= 1 (median),
/// quality in [1,100] (jpeg), scale in (0,1) (resize).
struct AttackSpec {
    AttackKind kind = AttackKind::Gaussian;
    double parameter = 1.0;

    void validate() const;
    std::string label() const;  // e.g. "jpeg:75"
    bool operator==(const AttackSpec&) const = default;
};

/// gaussian {0.5, 1.0}, median {3}, jpeg {75, 90}, resize {0.5, 0.75}.
std::vector<AttackSpec> default_attacks();

Image apply_attack(const Image& image, const AttackSpec& spec);

Image median_filter(const Image& image, int k);
/// Baseline JPEG round trip through libjpeg, 4:4:4, 8-bit quantization.
Image jpeg_round_trip(const Image& image, int quality);

/// 10 log10(1 / MSE); +infinity when the images are equal.
double psnr(const Image& a, const Image& b);
/// Fraction of pixels where any channel differs by more than 1/255.
double l0_normalized(const Image& a, const Image& b);

struct AttackOutcome {
    AttackSpec spec;
    ScenarioReport report;
};

struct AttackSweepReport {
    ScenarioReport unattacked;
    std::vector<AttackOutcome> attacked;

    nlohmann::json to_json() const;
    /// attack,parameter,mean_recall,user_id,recall; the unattacked row uses
    /// attack "none".
    std::string to_csv() const;
};

struct ScenarioInputs {
    const World* world = nullptr;
    std::vector<int> user_ids;
    const PPTMap* ppts = nullptr;
    const FRModel* intruder = nullptr;
    Scenario scenario = Scenario::ProtQueryProtDb;
    double protected_fraction = 1.0;
    std::uint64_t seed = 0;
};

AttackSweepReport attack_sweep(const ScenarioInputs& inputs, const std::vector<AttackSpec>& attacks);

}  // namespace protego
