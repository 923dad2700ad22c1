#include "protego/ppt_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "protego/io.hpp"

namespace protego {
namespace {

constexpr char kPptMagic[9] = "PRTGPPT1";
constexpr std::uint32_t kPptVersion = 1;

void check_uv(const Image& image, const UVMap& uv) {
    if (uv.rows != image.rows || uv.cols != image.cols)
        throw ShapeError("uv map " + std::to_string(uv.rows) + "x" + std::to_string(uv.cols) +
                         " does not match image " + shape_string(image));
}

struct Forward {
    Image delta;
    Image protected_image;
    std::vector<std::uint8_t> pass;  // 1 where the clip is inactive
};

Forward forward_protection(const Sample& s, const Texture& texture) {
    check_uv(s.image, s.uv);
    Forward f;
    f.delta = deform(texture, s.uv);
    f.protected_image = Image(s.image.rows, s.image.cols, s.image.channels);
    f.pass.resize(s.image.size());
    for (std::size_t i = 0; i < s.image.size(); ++i) {
        const double v = s.image.data[i] - f.delta.data[i];
        f.pass[i] = (v >= 0.0 && v <= 1.0) ? 1 : 0;
        f.protected_image.data[i] = std::clamp(v, 0.0, 1.0);
    }
    return f;
}

// dL/d(texture) from dL/d(protected) for one sample.
void accumulate_texture_grad(const Sample& s, const Forward& f, const Image& grad_protected, Texture& grad) {
    Image grad_delta(s.image.rows, s.image.cols, s.image.channels);
    for (std::size_t i = 0; i < grad_delta.size(); ++i)
        grad_delta.data[i] = f.pass[i] ? -grad_protected.data[i] : 0.0;
    deform_backward(s.uv, grad_delta, grad);
}

void add_into(Image& acc, const Image& g, double scale = 1.0) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += scale * g.data[i];
}

// clip(x - d) pulled back by single ulps when rounding pushes it past x +- eps.
double protected_value(double x, double d, double eps) {
    double v = std::clamp(x - d, 0.0, 1.0);
    while (v - x > eps) v = std::nextafter(v, x);
    while (x - v > eps) v = std::nextafter(v, x);
    return v;
}

void check_image_range(const Image& image) {
    for (double x : image.data)
        if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("image values must lie in [0,1]");
}

}  // namespace

void PPTTrainSpec::validate() const {
    if (!(epsilon > 0.0) || epsilon > 1.0) throw ConfigError("PPTTrainSpec: epsilon must be in (0, 1]");
    if (eta() < 0.0) throw ConfigError("PPTTrainSpec: step must be >= 0");
    if (omega < 0.0) throw ConfigError("PPTTrainSpec: omega must be >= 0");
    if (batch_size < 2) throw ConfigError("PPTTrainSpec: batch_size must be >= 2");
    if (iterations < 0) throw ConfigError("PPTTrainSpec: iterations must be >= 0");
    if (!(ridge > 0.0)) throw ConfigError("PPTTrainSpec: ridge must be > 0");
    if (lambda_init <= 0 || lambda_min <= 0 || lambda_max < lambda_min)
        throw ConfigError("PPTTrainSpec: invalid lambda schedule");
}

PPT PPT::zeros(int rows, int cols, int channels, double epsilon, int user_id) {
    PPT p;
    p.texture = Texture(rows, cols, channels, 0.0);
    p.epsilon = epsilon;
    p.user_id = user_id;
    return p;
}

void PPT::check_bound() const {
    const double m = max_abs(texture.data);
    if (!(m <= epsilon)) throw NumericError("PPT texture exceeds epsilon: " + std::to_string(m));
}

std::vector<Sample> to_samples(const std::vector<RenderedFace>& faces) {
    std::vector<Sample> out;
    out.reserve(faces.size());
    for (const auto& f : faces) out.push_back({f.image, f.uv});
    return out;
}

Image deform(const Texture& texture, const UVMap& uv) {
    if (texture.rows < 2 || texture.cols < 2) throw ShapeError("deform: texture must be at least 2x2");
    Image delta(uv.rows, uv.cols, texture.channels, 0.0);
    std::vector<double> sample(texture.channels);
    for (int r = 0; r < uv.rows; ++r) {
        for (int c = 0; c < uv.cols; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * uv.cols + c;
            if (!uv.mask[p]) continue;
            bilinear_sample(texture, uv.u[p], uv.v[p], sample);
            for (int k = 0; k < texture.channels; ++k) delta.at(r, c, k) = sample[k];
        }
    }
    return delta;
}

Image deform(const PPT& ppt, const UVMap& uv) { return deform(ppt.texture, uv); }

void deform_backward(const UVMap& uv, const Image& grad_delta, Texture& grad_texture) {
    if (grad_delta.rows != uv.rows || grad_delta.cols != uv.cols || grad_delta.channels != grad_texture.channels)
        throw ShapeError("deform_backward: gradient shape does not match uv map / texture");
    const int tc = grad_texture.cols, tr = grad_texture.rows;
    for (int r = 0; r < uv.rows; ++r) {
        for (int c = 0; c < uv.cols; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * uv.cols + c;
            if (!uv.mask[p]) continue;
            const double x = uv.u[p] * (tc - 1);
            const double y = uv.v[p] * (tr - 1);
            const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, tc - 2);
            const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, tr - 2);
            const double fx = x - x0, fy = y - y0;
            for (int k = 0; k < grad_texture.channels; ++k) {
                const double g = grad_delta.at(r, c, k);
                if (g == 0.0) continue;
                grad_texture.at(y0, x0, k) += (1 - fx) * (1 - fy) * g;
                grad_texture.at(y0, x0 + 1, k) += fx * (1 - fy) * g;
                grad_texture.at(y0 + 1, x0, k) += (1 - fx) * fy * g;
                grad_texture.at(y0 + 1, x0 + 1, k) += fx * fy * g;
            }
        }
    }
}

Image apply_texture(const Image& image, const Texture& texture, const UVMap& uv) {
    check_uv(image, uv);
    if (texture.channels != image.channels) throw ShapeError("texture channels do not match image channels");
    Image out = deform(texture, uv);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::clamp(image.data[i] - out.data[i], 0.0, 1.0);
    return out;
}

ProtectionResult protect(const Image& image, const PPT& ppt, const UVProvider& uv_provider, std::string source_ref) {
    check_image_range(image);
    const UVMap uv = uv_provider.estimate(image);
    check_uv(image, uv);
    if (uv.valid_count() == 0) throw NoFaceError("no face surface in " + (source_ref.empty() ? "image" : source_ref));
    if (ppt.texture.channels != image.channels) throw ShapeError("PPT channels do not match image channels");
    ProtectionResult out;
    out.delta = deform(ppt.texture, uv);
    out.protected_image = Image(image.rows, image.cols, image.channels);
    for (std::size_t i = 0; i < image.size(); ++i)
        out.protected_image.data[i] = protected_value(image.data[i], out.delta.data[i], ppt.epsilon);
    out.source_ref = std::move(source_ref);
    return out;
}

std::vector<ProtectionResult> protect_sequence(const std::vector<Image>& frames, const PPT& ppt,
                                               const UVProvider& uv_provider) {
    std::vector<ProtectionResult> out;
    out.reserve(frames.size());
    for (std::size_t k = 0; k < frames.size(); ++k) {
        if (!frames[k].same_shape(frames.front())) throw ShapeError("protect_sequence: frames differ in shape");
        try {
            out.push_back(protect(frames[k], ppt, uv_provider, "frame " + std::to_string(k)));
        } catch (const NoFaceError& e) {
            throw NoFaceError("frame " + std::to_string(k) + ": " + e.what());
        }
    }
    return out;
}

Eigen::MatrixXd gram_matrix(const std::vector<FeatureVector>& features) {
    if (features.empty()) throw ShapeError("gram_matrix: empty feature list");
    const std::size_t d = features.front().dim();
    const auto b = static_cast<Eigen::Index>(features.size());
    Eigen::MatrixXd g(b, b);
    for (Eigen::Index i = 0; i < b; ++i) {
        if (features[i].dim() != d) throw ShapeError("gram_matrix: features differ in dimension");
        for (Eigen::Index j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += features[i].values[k] * features[j].values[k];
            g(i, j) = g(j, i) = s;
        }
    }
    return g;
}

double log_det_spd(const Eigen::MatrixXd& m) {
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw NumericError("log_det_spd: Cholesky decomposition failed");
    const Eigen::MatrixXd& l = llt.matrixL();
    double s = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
}

LossValue protection_loss(std::span<const Sample> batch, const Texture& texture, const Ensemble& ensemble,
                          const PPTTrainSpec& spec, bool want_gradient, const CleanFeatures* clean) {
    if (batch.size() < 2) throw ConfigError("protection_loss: batch must contain at least 2 images");
    ensemble.validate();
    const std::size_t nb = batch.size();
    const double nf = static_cast<double>(ensemble.size());

    std::vector<Forward> fwd;
    fwd.reserve(nb);
    for (const auto& s : batch) fwd.push_back(forward_protection(s, texture));

    LossValue out;
    if (want_gradient) out.gradient = Texture(texture.rows, texture.cols, texture.channels, 0.0);
    std::vector<Image> grad_protected(nb);

    for (std::size_t m = 0; m < ensemble.size(); ++m) {
        const FRModel& model = *ensemble.members[m];
        std::vector<FRModel::Tape> tapes;
        std::vector<FeatureVector> feats;
        tapes.reserve(nb);
        for (std::size_t i = 0; i < nb; ++i) {
            tapes.push_back(model.record(fwd[i].protected_image));
            feats.push_back(tapes.back().feature);
        }
        std::vector<FeatureVector> originals;
        for (std::size_t i = 0; i < nb; ++i)
            originals.push_back(clean ? (*clean)[m][i] : model.embed(batch[i].image));

        Eigen::MatrixXd inverse;
        if (spec.use_logdet) {
            Eigen::MatrixXd g = gram_matrix(feats);
            g.diagonal().array() += spec.ridge;
            Eigen::LLT<Eigen::MatrixXd> llt(g);
            if (llt.info() != Eigen::Success) throw NumericError("protection_loss: Gram decomposition failed");
            const Eigen::MatrixXd& l = llt.matrixL();
            double logdet = 0.0;
            for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i));
            out.breakdown.protect_logdet_term += -logdet / nf;
            if (want_gradient) inverse = llt.solve(Eigen::MatrixXd::Identity(g.rows(), g.cols()));
        }
        for (std::size_t i = 0; i < nb; ++i)
            out.breakdown.protect_sim_term += cosine_sim(originals[i], feats[i]) / (nf * nb);

        if (!want_gradient) continue;
        const std::size_t d = feats.front().dim();
        for (std::size_t i = 0; i < nb; ++i) {
            std::vector<double> upstream(d, 0.0);
            for (std::size_t k = 0; k < d; ++k) upstream[k] = originals[i].values[k] / (nf * nb);
            if (spec.use_logdet) {
                for (std::size_t j = 0; j < nb; ++j) {
                    const double w = -2.0 / nf * inverse(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                    for (std::size_t k = 0; k < d; ++k) upstream[k] += w * feats[j].values[k];
                }
            }
            Image g = model.input_gradient(tapes[i], upstream);
            if (grad_protected[i].size() == 0) grad_protected[i] = std::move(g);
            else add_into(grad_protected[i], g);
        }
    }
    out.breakdown.total = out.breakdown.protect_logdet_term + out.breakdown.protect_sim_term;
    if (want_gradient)
        for (std::size_t i = 0; i < nb; ++i) accumulate_texture_grad(batch[i], fwd[i], grad_protected[i], out.gradient);
    return out;
}

LossValue perceptual_loss(std::span<const Sample> batch, const Texture& texture, double omega, bool want_gradient) {
    if (batch.empty()) throw ConfigError("perceptual_loss: empty batch");
    const double nb = static_cast<double>(batch.size());
    std::vector<Forward> fwd;
    std::vector<double> values;
    double drop = 0.0;
    for (const auto& s : batch) {
        fwd.push_back(forward_protection(s, texture));
        values.push_back(ssim(s.image, fwd.back().protected_image));
        drop += (1.0 - values.back()) / (2.0 * nb);
    }
    LossValue out;
    double mean = 0.0;
    for (double v : values) mean += v / nb;
    out.breakdown.mean_ssim = mean;
    const double excess = drop - omega;
    out.breakdown.percept_term = excess > 0.0 ? excess : 0.0;
    out.breakdown.total = out.breakdown.percept_term;
    if (want_gradient) {
        out.gradient = Texture(texture.rows, texture.cols, texture.channels, 0.0);
        if (excess > 0.0) {
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Image g;
                ssim_with_gradient(batch[i].image, fwd[i].protected_image, g);
                for (auto& x : g.data) x *= -1.0 / (2.0 * nb);
                accumulate_texture_grad(batch[i], fwd[i], g, out.gradient);
            }
        }
    }
    return out;
}

LossValue total_loss(std::span<const Sample> batch, const Texture& texture, const Ensemble& ensemble,
                     const PPTTrainSpec& spec, double lambda_ssim, bool want_gradient, const CleanFeatures* clean) {
    LossValue prot = protection_loss(batch, texture, ensemble, spec, want_gradient, clean);
    LossValue perc = perceptual_loss(batch, texture, spec.omega, want_gradient);
    LossValue out;
    out.breakdown.protect_logdet_term = prot.breakdown.protect_logdet_term;
    out.breakdown.protect_sim_term = prot.breakdown.protect_sim_term;
    out.breakdown.percept_term = perc.breakdown.percept_term;
    out.breakdown.mean_ssim = perc.breakdown.mean_ssim;
    out.breakdown.lambda_ssim = lambda_ssim;
    out.breakdown.total = out.breakdown.protect_logdet_term + out.breakdown.protect_sim_term +
                          lambda_ssim * out.breakdown.percept_term;
    out.breakdown.max_abs_texture = max_abs(texture.data);
    if (want_gradient) {
        out.gradient = std::move(prot.gradient);
        add_into(out.gradient, perc.gradient, lambda_ssim);
    }
    return out;
}

PPTTrainingResult train_ppt(const UserSplit& user, const Ensemble& ensemble, const PPTTrainSpec& spec) {
    if (user.train_db_images.empty()) throw ConfigError("train_ppt: user has no training images");
    // The texture shares the face world's UV parameterization; default to the image resolution.
    const auto& img = user.train_db_images.front().image;
    return train_ppt(to_samples(user.train_db_images), user.user_id, ensemble, spec, img.rows, img.cols);
}

PPTTrainingResult train_ppt(const std::vector<Sample>& omega, int user_id, const Ensemble& ensemble,
                            const PPTTrainSpec& spec, int texture_rows, int texture_cols) {
    spec.validate();
    ensemble.validate();
    if (omega.empty()) throw ConfigError("train_ppt: empty training set");
    const int channels = omega.front().image.channels;
    const std::size_t batch = std::min<std::size_t>(spec.batch_size, omega.size());
    if (batch < 2) throw ConfigError("train_ppt: at least 2 training images are required");

    PPTTrainingResult result;
    result.ppt = PPT::zeros(texture_rows, texture_cols, channels, spec.epsilon, user_id);
    result.ppt.meta = {spec.eta(), spec.omega, static_cast<int>(batch), spec.iterations, ensemble.ids(),
                       spec.seed, spec.use_logdet};
    Texture& tex = result.ppt.texture;

    // Clean features never change; embed them once.
    std::vector<std::vector<FeatureVector>> clean_all(ensemble.size());
    for (std::size_t m = 0; m < ensemble.size(); ++m)
        for (const auto& s : omega) clean_all[m].push_back(ensemble.members[m]->embed(s.image));

    Rng rng(derive_seed(spec.seed, 0x7E7));
    std::vector<std::size_t> order(omega.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();

    const double eta = spec.eta();
    double lambda = spec.lambda_init;
    result.log.reserve(spec.iterations);
    for (int it = 0; it < spec.iterations; ++it) {
        if (cursor + batch > order.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        std::vector<Sample> mb;
        CleanFeatures clean(ensemble.size());
        for (std::size_t k = 0; k < batch; ++k) {
            const std::size_t idx = order[cursor + k];
            mb.push_back(omega[idx]);
            for (std::size_t m = 0; m < ensemble.size(); ++m) clean[m].push_back(clean_all[m][idx]);
        }
        cursor += batch;

        LossValue loss = total_loss(mb, tex, ensemble, spec, lambda, true, &clean);
        const auto& b = loss.breakdown;
        if (!std::isfinite(b.total)) {
            std::ostringstream msg;
            msg << "train_ppt: non-finite loss at iteration " << it << " (logdet=" << b.protect_logdet_term
                << ", sim=" << b.protect_sim_term << ", percept=" << b.percept_term << ", lambda=" << lambda << ")";
            throw NumericError(msg.str());
        }
        for (std::size_t i = 0; i < tex.size(); ++i) {
            const double g = loss.gradient.data[i];
            const double sign = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
            tex.data[i] = std::clamp(tex.data[i] - eta * sign, -spec.epsilon, spec.epsilon);
        }
        LossBreakdown entry = b;
        entry.max_abs_texture = max_abs(tex.data);
        result.log.push_back(entry);

        lambda = b.percept_term > 0.0 ? std::min(lambda * spec.lambda_up, spec.lambda_max)
                                      : std::max(lambda * spec.lambda_down, spec.lambda_min);
    }
    result.ppt.check_bound();
    return result;
}

void save_ppt(const PPT& ppt, const std::filesystem::path& stem) {
    const auto& t = ppt.texture;
    io::write_blob(stem.string() + ".bin", kPptMagic, kPptVersion,
                   {static_cast<std::uint64_t>(t.rows), static_cast<std::uint64_t>(t.cols),
                    static_cast<std::uint64_t>(t.channels)},
                   t.data);
    io::json meta;
    meta["format"] = "protego-ppt";
    meta["format_version"] = kPptVersion;
    meta["epsilon"] = ppt.epsilon;
    meta["user_id"] = ppt.user_id;
    meta["training_meta"] = {{"eta", ppt.meta.eta},
                             {"omega", ppt.meta.omega},
                             {"batch_size", ppt.meta.batch_size},
                             {"iterations", ppt.meta.iterations},
                             {"ensemble", ppt.meta.ensemble_ids},
                             {"seed", ppt.meta.seed},
                             {"use_logdet", ppt.meta.use_logdet}};
    io::write_json(stem.string() + ".json", meta);
}

PPT load_ppt(const std::filesystem::path& stem) {
    const io::json meta = io::read_json(stem.string() + ".json");
    if (meta.value("format", "") != "protego-ppt" || meta.value("format_version", 0u) != kPptVersion)
        throw FormatError(stem.string() + ".json: unsupported PPT format or version");
    io::Blob blob = io::read_blob(stem.string() + ".bin", kPptMagic);
    if (blob.version != kPptVersion || blob.dims.size() != 3) throw FormatError(stem.string() + ".bin: bad PPT blob");
    PPT ppt;
    ppt.texture = Texture(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]), static_cast<int>(blob.dims[2]));
    ppt.texture.data = std::move(blob.data);
    ppt.epsilon = meta.at("epsilon");
    ppt.user_id = meta.at("user_id");
    const auto& tm = meta.at("training_meta");
    ppt.meta.eta = tm.at("eta");
    ppt.meta.omega = tm.at("omega");
    ppt.meta.batch_size = tm.at("batch_size");
    ppt.meta.iterations = tm.at("iterations");
    ppt.meta.ensemble_ids = tm.at("ensemble").get<std::vector<std::string>>();
    ppt.meta.seed = tm.at("seed").get<std::uint64_t>();
    ppt.meta.use_logdet = tm.at("use_logdet");
    ppt.check_bound();
    return ppt;
}

std::string training_log_csv(const std::vector<LossBreakdown>& log) {
    std::string out = "iteration,protect_logdet_term,protect_sim_term,percept_term,lambda_ssim,total,mean_ssim,max_abs_texture\n";
    char line[512];
    for (std::size_t i = 0; i < log.size(); ++i) {
        const auto& b = log[i];
        std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", i, b.protect_logdet_term,
                      b.protect_sim_term, b.percept_term, b.lambda_ssim, b.total, b.mean_ssim, b.max_abs_texture);
        out += line;
    }
    return out;
}

}  // namespace protego
