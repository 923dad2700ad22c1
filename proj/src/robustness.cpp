#include "protego/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "protego/image_ops.hpp"

namespace protego {

std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::Gaussian: return "gaussian";
        case AttackKind::Median: return "median";
        case AttackKind::Jpeg: return "jpeg";
        case AttackKind::Resize: return "resize";
    }
    return "gaussian";
}

AttackKind parse_attack_kind(const std::string& s) {
    for (AttackKind k : {AttackKind::Gaussian, AttackKind::Median, AttackKind::Jpeg, AttackKind::Resize})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown attack kind '" + s + "'");
}

void AttackSpec::validate() const {
    const double p = parameter;
    switch (kind) {
        case AttackKind::Gaussian:
            if (!(p > 0.0) || !std::isfinite(p)) throw ConfigError("gaussian sigma must be > 0");
            break;
        case AttackKind::Median:
            if (p < 1 || p != std::floor(p) || static_cast<long>(p) % 2 == 0)
                throw ConfigError("median window must be an odd integer >= 1");
            break;
        case AttackKind::Jpeg:
            if (p < 1 || p > 100 || p != std::floor(p)) throw ConfigError("jpeg quality must be an integer in [1,100]");
            break;
        case AttackKind::Resize:
            if (!(p > 0.0 && p < 1.0)) throw ConfigError("resize scale must lie in (0,1)");
            break;
    }
}

std::string AttackSpec::label() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s:%g", to_string(kind).c_str(), parameter);
    return buf;
}

std::vector<AttackSpec> default_attacks() {
    return {{AttackKind::Gaussian, 0.5}, {AttackKind::Gaussian, 1.0}, {AttackKind::Median, 3},
            {AttackKind::Jpeg, 75},      {AttackKind::Jpeg, 90},      {AttackKind::Resize, 0.5},
            {AttackKind::Resize, 0.75}};
}

Image median_filter(const Image& image, int k) {
    if (k < 1 || k % 2 == 0) throw ConfigError("median window must be an odd integer >= 1");
    if (k == 1) return image;
    const int h = k / 2;
    Image out(image.rows, image.cols, image.channels);
    std::vector<double> window(static_cast<std::size_t>(k) * k);
    for (int r = 0; r < image.rows; ++r)
        for (int c = 0; c < image.cols; ++c)
            for (int ch = 0; ch < image.channels; ++ch) {
                std::size_t n = 0;
                for (int dr = -h; dr <= h; ++dr)
                    for (int dc = -h; dc <= h; ++dc) {
                        const int rr = std::clamp(r + dr, 0, image.rows - 1);
                        const int cc = std::clamp(c + dc, 0, image.cols - 1);
                        window[n++] = image.at(rr, cc, ch);
                    }
                std::nth_element(window.begin(), window.begin() + n / 2, window.end());
                out.at(r, c, ch) = window[n / 2];
            }
    return out;
}

Image apply_attack(const Image& image, const AttackSpec& spec) {
    spec.validate();
    for (double x : image.data)
        if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("apply_attack: image values must lie in [0,1]");
    Image out;
    switch (spec.kind) {
        case AttackKind::Gaussian: out = gaussian_blur(image, spec.parameter); break;
        case AttackKind::Median: out = median_filter(image, static_cast<int>(spec.parameter)); break;
        case AttackKind::Jpeg: out = jpeg_round_trip(image, static_cast<int>(spec.parameter)); break;
        case AttackKind::Resize: {
            const int rows = std::max(1, static_cast<int>(std::lround(image.rows * spec.parameter)));
            const int cols = std::max(1, static_cast<int>(std::lround(image.cols * spec.parameter)));
            out = resize_bilinear(resize_bilinear(image, rows, cols), image.rows, image.cols);
            break;
        }
    }
    clip_unit(out);
    return out;
}

double psnr(const Image& a, const Image& b) {
    require_same_shape(a, b, "psnr");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sum += d * d;
    }
    if (sum == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(static_cast<double>(a.size()) / sum);
}

double l0_normalized(const Image& a, const Image& b) {
    require_same_shape(a, b, "l0_normalized");
    const std::size_t pixels = static_cast<std::size_t>(a.rows) * a.cols;
    if (pixels == 0) return 0.0;
    std::size_t changed = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
        for (int k = 0; k < a.channels; ++k) {
            const std::size_t i = p * a.channels + k;
            if (std::abs(a.data[i] - b.data[i]) > 1.0 / 255.0) {
                ++changed;
                break;
            }
        }
    }
    return static_cast<double>(changed) / static_cast<double>(pixels);
}

nlohmann::json AttackSweepReport::to_json() const {
    nlohmann::json j;
    j["unattacked"] = unattacked.to_json();
    nlohmann::json list = nlohmann::json::array();
    for (const auto& a : attacked) {
        nlohmann::json e = a.report.to_json();
        e["attack"] = to_string(a.spec.kind);
        e["parameter"] = a.spec.parameter;
        e["recall_change"] = a.report.mean_recall - unattacked.mean_recall;
        list.push_back(e);
    }
    j["attacks"] = list;
    return j;
}

std::string AttackSweepReport::to_csv() const {
    std::string out = "attack,parameter,mean_recall,user_id,recall\n";
    char buf[256];
    auto rows = [&](const std::string& kind, double param, const ScenarioReport& r) {
        for (const auto& [u, v] : r.per_user_recall) {
            std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%d,%.17g\n", kind.c_str(), param, r.mean_recall, u, v);
            out += buf;
        }
    };
    rows("none", 0.0, unattacked);
    for (const auto& a : attacked) rows(to_string(a.spec.kind), a.spec.parameter, a.report);
    return out;
}

AttackSweepReport attack_sweep(const ScenarioInputs& in, const std::vector<AttackSpec>& attacks) {
    if (!in.world || !in.intruder) throw ConfigError("attack_sweep: world and intruder are required");
    for (const auto& a : attacks) a.validate();
    static const PPTMap kNone;
    const PPTMap& ppts = in.ppts ? *in.ppts : kNone;
    AttackSweepReport report;
    report.unattacked = run_scenario(*in.world, in.user_ids, ppts, *in.intruder, in.scenario,
                                     in.protected_fraction, in.seed);
    for (const auto& a : attacks) {
        const ImageTransform t = [a](const Image& img) { return apply_attack(img, a); };
        report.attacked.push_back(
            {a, run_scenario(*in.world, in.user_ids, ppts, *in.intruder, in.scenario, in.protected_fraction, in.seed, t)});
    }
    return report;
}

}  // namespace protego
