#include "protego/fr_models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <tuple>

#include "protego/image_ops.hpp"
#include "protego/io.hpp"

namespace protego {
namespace {

constexpr char kModelMagic[9] = "PRTGFRM1";
constexpr std::uint32_t kModelVersion = 1;

std::string default_model_id(const FRTrainSpec& spec) {
    return nn::to_string(spec.architecture) + "-" + to_string(spec.loss) + "-d" +
           std::to_string(spec.feature_dim) + "-s" + std::to_string(spec.seed);
}

/// Adam state over one flat parameter vector.
struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    long step = 0;

    Adam(std::size_t n, double learning_rate) : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}

    void apply(std::vector<double>& params, const std::vector<double>& grad) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

/// Classification head loss. Writes dL/dz into `dz` and accumulates head
/// gradients; returns the cross-entropy.
double head_loss(const FRTrainSpec& spec, const Eigen::VectorXd& z, int label, const Eigen::MatrixXd& head_w,
                 const Eigen::VectorXd& head_b, Eigen::VectorXd& dz, Eigen::MatrixXd& d_head_w,
                 Eigen::VectorXd& d_head_b) {
    const Eigen::Index classes = head_w.rows();
    Eigen::VectorXd logits(classes);
    if (spec.loss == LossKind::Softmax) {
        logits = head_w * z + head_b;
    } else {
        const double zn = z.norm();
        const Eigen::VectorXd f = z / zn;
        Eigen::VectorXd wn = head_w.rowwise().norm();
        Eigen::VectorXd cos = (head_w * f).array() / wn.array();
        const double cm = std::cos(spec.margin), sm = std::sin(spec.margin);
        const double threshold = std::cos(std::numbers::pi - spec.margin);
        const double fallback = std::sin(std::numbers::pi - spec.margin) * spec.margin;
        const double ct = std::clamp(cos(label), -1.0, 1.0);
        double phi, dphi;
        if (ct > threshold) {
            const double st = std::sqrt(std::max(1e-12, 1.0 - ct * ct));
            phi = ct * cm - st * sm;
            dphi = cm + sm * ct / st;
        } else {
            phi = ct - fallback;
            dphi = 1.0;
        }
        logits = spec.scale * cos;
        logits(label) = spec.scale * phi;

        const double mx = logits.maxCoeff();
        Eigen::VectorXd p = (logits.array() - mx).exp();
        p /= p.sum();
        const double loss = -std::log(std::max(p(label), 1e-300));
        Eigen::VectorXd dlogit = p;
        dlogit(label) -= 1.0;

        Eigen::VectorXd dcos = spec.scale * dlogit;
        dcos(label) *= dphi;
        Eigen::VectorXd df = Eigen::VectorXd::Zero(f.size());
        for (Eigen::Index j = 0; j < classes; ++j) {
            const Eigen::VectorXd what = head_w.row(j).transpose() / wn(j);
            df += dcos(j) * what;
            const Eigen::VectorXd dwhat = dcos(j) * f;
            d_head_w.row(j) += ((dwhat - what * what.dot(dwhat)) / wn(j)).transpose();
        }
        dz = (df - f * f.dot(df)) / zn;
        return loss;
    }
    const double mx = logits.maxCoeff();
    Eigen::VectorXd p = (logits.array() - mx).exp();
    p /= p.sum();
    const double loss = -std::log(std::max(p(label), 1e-300));
    Eigen::VectorXd dlogit = p;
    dlogit(label) -= 1.0;
    d_head_w += dlogit * z.transpose();
    d_head_b += dlogit;
    dz = head_w.transpose() * dlogit;
    return loss;
}

Image augment(const Image& image, const FRTrainSpec& spec, Rng& rng) {
    Image out = image;
    if (rng.uniform() < spec.blur_probability) out = gaussian_blur(out, rng.uniform(0.3, spec.blur_sigma_max));
    for (auto& x : out.data) x += spec.noise_sigma * rng.normal();
    clip_unit(out);
    return out;
}

}  // namespace

FeatureVector FeatureVector::from_raw(std::span<const double> raw) {
    double n2 = 0.0;
    for (double x : raw) n2 += x * x;
    const double n = std::sqrt(n2);
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("cannot normalize a zero or non-finite feature");
    std::vector<double> v(raw.begin(), raw.end());
    for (auto& x : v) x /= n;
    return FeatureVector(std::move(v));
}

double FeatureVector::norm() const {
    double n2 = 0.0;
    for (double x : values) n2 += x * x;
    return std::sqrt(n2);
}

std::string to_string(LossKind k) { return k == LossKind::Softmax ? "softmax" : "arcface"; }

LossKind parse_loss(const std::string& s) {
    if (s == "softmax") return LossKind::Softmax;
    if (s == "arcface" || s == "angular-margin") return LossKind::AngularMargin;
    throw ConfigError("unknown loss '" + s + "'");
}

FRModel::FRModel(Architecture arch, LossKind loss, int input_size, int channels, int feature_dim,
                 std::uint64_t training_seed, std::vector<double> parameters, std::string id)
    : embedder_(arch, input_size, channels, feature_dim),
      loss_(loss),
      training_seed_(training_seed),
      parameters_(std::move(parameters)),
      id_(std::move(id)) {
    if (parameters_.size() != embedder_.parameter_count())
        throw ShapeError("FRModel: expected " + std::to_string(embedder_.parameter_count()) + " parameters, got " +
                         std::to_string(parameters_.size()));
}

FeatureVector FRModel::embed(const Image& image) const {
    const Eigen::VectorXd z = embedder_.forward(parameters_, image, nullptr);
    return FeatureVector::from_raw(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
}

FRModel::Tape FRModel::record(const Image& image) const {
    Tape tape;
    const Eigen::VectorXd z = embedder_.forward(parameters_, image, &tape.trace);
    tape.raw_norm = z.norm();
    tape.feature = FeatureVector::from_raw(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
    return tape;
}

Image FRModel::input_gradient(const Tape& tape, std::span<const double> upstream) const {
    if (upstream.size() != tape.feature.dim())
        throw ShapeError("embed_with_gradient: upstream has dimension " + std::to_string(upstream.size()) +
                         ", feature has " + std::to_string(tape.feature.dim()));
    Eigen::Map<const Eigen::VectorXd> g(upstream.data(), static_cast<Eigen::Index>(upstream.size()));
    Eigen::Map<const Eigen::VectorXd> f(tape.feature.values.data(), static_cast<Eigen::Index>(tape.feature.dim()));
    // Through the normalization: d(f)/d(z) = (I - f f^T) / |z|.
    const Eigen::VectorXd dz = (g - f * f.dot(g)) / tape.raw_norm;
    Image grad;
    embedder_.backward(parameters_, tape.trace, dz, {}, &grad);
    return grad;
}

Image FRModel::embed_with_gradient(const Image& image, std::span<const double> upstream) const {
    return input_gradient(record(image), upstream);
}

void Ensemble::validate(bool distinct) const {
    if (members.empty()) throw ConfigError("ensemble must have at least one member");
    for (const auto& m : members)
        if (!m) throw ConfigError("ensemble contains a null model");
    if (distinct) {
        std::set<std::tuple<int, int, std::uint64_t>> seen;
        for (const auto& m : members) {
            auto key = std::make_tuple(static_cast<int>(m->architecture()), static_cast<int>(m->loss()),
                                       m->training_seed());
            if (!seen.insert(key).second)
                throw ConfigError("ensemble members must have distinct (architecture, loss, seed): " + m->id());
        }
    }
}

Ensemble Ensemble::without(std::size_t index) const {
    Ensemble out;
    for (std::size_t i = 0; i < members.size(); ++i)
        if (i != index) out.members.push_back(members[i]);
    return out;
}

std::vector<std::string> Ensemble::ids() const {
    std::vector<std::string> out;
    for (const auto& m : members) out.push_back(m->id());
    return out;
}

FeatureVector embed(const FRModel& model, const Image& image) { return model.embed(image); }

Image embed_with_gradient(const FRModel& model, const Image& image, std::span<const double> upstream) {
    return model.embed_with_gradient(image, upstream);
}

double cosine_sim(const FeatureVector& a, const FeatureVector& b) {
    if (a.dim() != b.dim())
        throw ShapeError("cosine_sim: dimension mismatch " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) s += a.values[i] * b.values[i];
    return std::clamp(s, -1.0, 1.0);
}

double verification_accuracy(const FRModel& model, const std::vector<RenderedFace>& anchors,
                             const std::vector<RenderedFace>& gallery, int triples, std::uint64_t seed) {
    if (anchors.empty() || gallery.empty()) throw ConfigError("verification_accuracy: empty inputs");
    std::vector<FeatureVector> anchor_f, gallery_f;
    for (const auto& a : anchors) anchor_f.push_back(model.embed(a.image));
    for (const auto& g : gallery) gallery_f.push_back(model.embed(g.image));
    std::map<int, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < gallery.size(); ++i) by_id[gallery[i].identity_id].push_back(i);

    Rng rng(seed);
    int good = 0, total = 0;
    for (int t = 0; t < triples; ++t) {
        const std::size_t a = rng.index(anchors.size());
        const int id = anchors[a].identity_id;
        auto it = by_id.find(id);
        if (it == by_id.end()) continue;
        std::vector<std::size_t> positives;
        for (auto gi : it->second)
            if (!(gallery[gi].image == anchors[a].image)) positives.push_back(gi);
        if (positives.empty() || by_id.size() < 2) continue;
        const std::size_t p = positives[rng.index(positives.size())];
        std::size_t n;
        do {
            n = rng.index(gallery.size());
        } while (gallery[n].identity_id == id);
        ++total;
        if (cosine_sim(anchor_f[a], gallery_f[p]) > cosine_sim(anchor_f[a], gallery_f[n])) ++good;
    }
    if (total == 0) throw ConfigError("verification_accuracy: no valid triples");
    return static_cast<double>(good) / total;
}

FRModel train_fr(const std::vector<RenderedFace>& dataset, const FRTrainSpec& spec) {
    if (dataset.empty()) throw ConfigError("train_fr: empty dataset");
    if (spec.epochs < 1 || spec.batch_size < 1 || spec.feature_dim < 1)
        throw ConfigError("train_fr: epochs, batch_size and feature_dim must be positive");

    std::map<int, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_id[dataset[i].identity_id].push_back(i);
    int usable = 0;
    for (const auto& [id, idx] : by_id)
        if (idx.size() >= 2) ++usable;
    if (usable < 2) throw ConfigError("train_fr: need at least 2 identities with at least 2 images each");

    std::map<int, int> label_of;
    std::vector<std::size_t> train_idx;
    std::vector<RenderedFace> holdout;
    for (const auto& [id, idx] : by_id) {
        const int label = static_cast<int>(label_of.size());
        label_of[id] = label;
        int hold = 0;
        if (idx.size() >= 2) {
            hold = std::max(1, static_cast<int>(std::lround(spec.holdout_fraction * idx.size())));
            hold = std::min(hold, static_cast<int>(idx.size()) - 1);
        }
        const std::size_t keep = idx.size() - hold;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (k < keep) train_idx.push_back(idx[k]);
            else holdout.push_back(dataset[idx[k]]);
        }
    }

    const auto& first = dataset.front().image;
    if (first.rows != first.cols) throw ShapeError("train_fr: square images required");
    nn::Embedder emb(spec.architecture, first.rows, first.channels, spec.feature_dim);
    const std::size_t n_params = emb.parameter_count();
    const int classes = static_cast<int>(label_of.size());
    const std::size_t n_head_w = static_cast<std::size_t>(classes) * spec.feature_dim;
    const std::size_t total = n_params + n_head_w + classes;

    std::vector<double> theta(total, 0.0);
    Rng init_rng(derive_seed(spec.seed, 1));
    emb.initialize(std::span<double>(theta.data(), n_params), init_rng);
    const double head_std = 1.0 / std::sqrt(static_cast<double>(spec.feature_dim));
    for (std::size_t i = 0; i < n_head_w; ++i) theta[n_params + i] = head_std * init_rng.normal();

    Adam adam(total, spec.learning_rate);
    Rng order_rng(derive_seed(spec.seed, 2));
    Rng aug_rng(derive_seed(spec.seed, 3));
    std::vector<double> grad(total);
    nn::Trace trace;

    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        order_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
            const std::size_t end = std::min(order.size(), start + spec.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> hw(
                theta.data() + n_params, classes, spec.feature_dim);
            const Eigen::MatrixXd head_w = hw;
            const Eigen::VectorXd head_b =
                Eigen::Map<const Eigen::VectorXd>(theta.data() + n_params + n_head_w, classes);
            Eigen::MatrixXd d_head_w = Eigen::MatrixXd::Zero(classes, spec.feature_dim);
            Eigen::VectorXd d_head_b = Eigen::VectorXd::Zero(classes);
            for (std::size_t b = start; b < end; ++b) {
                const RenderedFace& face = dataset[order[b]];
                const Image input = spec.augment ? augment(face.image, spec, aug_rng) : face.image;
                const Eigen::VectorXd z =
                    emb.forward(std::span<const double>(theta.data(), n_params), input, &trace);
                Eigen::VectorXd dz;
                head_loss(spec, z, label_of.at(face.identity_id), head_w, head_b, dz, d_head_w, d_head_b);
                emb.backward(std::span<const double>(theta.data(), n_params), trace, dz,
                             std::span<double>(grad.data(), n_params), nullptr);
            }
            for (int r = 0; r < classes; ++r)
                for (int c = 0; c < spec.feature_dim; ++c)
                    grad[n_params + static_cast<std::size_t>(r) * spec.feature_dim + c] = d_head_w(r, c);
            for (int r = 0; r < classes; ++r) grad[n_params + n_head_w + r] = d_head_b(r);
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& g : grad) g *= inv;
            adam.apply(theta, grad);
        }
    }

    std::vector<double> params(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(n_params));
    for (double p : params)
        if (!std::isfinite(p)) throw TrainingFailure("train_fr: parameters diverged", 0.0);
    FRModel model(spec.architecture, spec.loss, first.rows, first.channels, spec.feature_dim, spec.seed,
                  std::move(params), spec.name.empty() ? default_model_id(spec) : spec.name);
    const double acc =
        verification_accuracy(model, holdout, dataset, spec.verification_triples, derive_seed(spec.seed, 4));
    model.set_accuracy(acc);
    if (acc < spec.accuracy_floor) {
        throw TrainingFailure("train_fr: verification accuracy " + std::to_string(acc) + " below floor " +
                                  std::to_string(spec.accuracy_floor),
                              acc);
    }
    return model;
}

void save_model(const FRModel& model, const std::filesystem::path& stem) {
    const auto params = model.parameters();
    io::write_blob(stem.string() + ".bin", kModelMagic, kModelVersion, {params.size()}, params);
    io::json meta;
    meta["format"] = "protego-fr-model";
    meta["format_version"] = kModelVersion;
    meta["id"] = model.id();
    meta["architecture_id"] = nn::to_string(model.architecture());
    meta["loss_id"] = to_string(model.loss());
    meta["feature_dim"] = model.feature_dim();
    meta["input_size"] = model.input_size();
    meta["channels"] = model.channels();
    meta["training_seed"] = model.training_seed();
    meta["accuracy"] = model.accuracy();
    meta["parameter_count"] = params.size();
    io::write_json(stem.string() + ".json", meta);
}

FRModel load_model(const std::filesystem::path& stem) {
    const io::json meta = io::read_json(stem.string() + ".json");
    if (meta.value("format", "") != "protego-fr-model" || meta.value("format_version", 0u) != kModelVersion)
        throw FormatError(stem.string() + ".json: unsupported model format or version");
    io::Blob blob = io::read_blob(stem.string() + ".bin", kModelMagic);
    if (blob.version != kModelVersion) throw FormatError(stem.string() + ".bin: unsupported version");
    FRModel model(nn::parse_architecture(meta.at("architecture_id")), parse_loss(meta.at("loss_id")),
                  meta.at("input_size"), meta.at("channels"), meta.at("feature_dim"),
                  meta.at("training_seed").get<std::uint64_t>(), std::move(blob.data), meta.at("id"));
    model.set_accuracy(meta.value("accuracy", 0.0));
    return model;
}

}  // namespace protego
