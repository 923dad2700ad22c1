#include "protego/face_world.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>

namespace protego {
namespace {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

Mat3 rotation(const FacePose& p) {
    const double cy = std::cos(p.yaw), sy = std::sin(p.yaw);
    const double cp = std::cos(p.pitch), sp = std::sin(p.pitch);
    const double cr = std::cos(p.roll), sr = std::sin(p.roll);
    const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
    const Mat3 rx{{{1, 0, 0}, {0, cp, -sp}, {0, sp, cp}}};
    const Mat3 rz{{{cr, -sr, 0}, {sr, cr, 0}, {0, 0, 1}}};
    auto mul = [](const Mat3& a, const Mat3& b) {
        Mat3 m{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) m[i][j] += a[i][k] * b[k][j];
        return m;
    };
    // head frame -> camera frame
    return mul(ry, mul(rx, rz));
}

Vec3 apply(const Mat3& m, const Vec3& v) {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

Vec3 apply_transpose(const Mat3& m, const Vec3& v) {
    return {m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2]};
}

Vec3 normalized(const Vec3& v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

void check_range(double value, double lo, double hi, const char* name) {
    if (!(value >= lo && value <= hi)) {
        throw ConfigError(std::string("FacePose.") + name + " = " + std::to_string(value) +
                          " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

}  // namespace

void WorldConfig::validate() const {
    if (image_size < 8 || texture_size < 2 || channels < 1)
        throw ConfigError("WorldConfig: image_size >= 8, texture_size >= 2, channels >= 1 required");
    if (n_users < 0 || n_noise < 0) throw ConfigError("WorldConfig: negative identity counts");
    if (per_identity < 5)
        throw ConfigError("WorldConfig: per_identity must be >= 5 for a 20/60/20 split");
    if (!(base_min >= 0.0 && base_max <= 1.0 && base_min <= base_max))
        throw ConfigError("WorldConfig: base colour range must lie in [0,1]");
    if (n_blobs < 0 || blob_sigma_min <= 0.0 || blob_sigma_max < blob_sigma_min)
        throw ConfigError("WorldConfig: invalid blob statistics");
    if (max_texel_step_sum <= 0.0) throw ConfigError("WorldConfig: max_texel_step_sum must be > 0");
    if (head_a <= 0 || head_b <= 0 || head_c <= 0) throw ConfigError("WorldConfig: head axes must be > 0");
    if (yaw_max < 0 || yaw_max > std::numbers::pi / 2 || pitch_max < 0 ||
        pitch_max > std::numbers::pi / 4 || roll_max < 0 || roll_max > std::numbers::pi / 4)
        throw ConfigError("WorldConfig: pose range outside the FacePose domain");
    if (expression_min < 0 || expression_max > 1 || expression_min > expression_max)
        throw ConfigError("WorldConfig: expression range must lie in [0,1]");
    if (scale_min <= 0 || scale_max < scale_min) throw ConfigError("WorldConfig: invalid scale range");
    if (lighting_min < 0.5 || lighting_max > 1.0 || lighting_min > lighting_max)
        throw ConfigError("WorldConfig: lighting range must lie in [0.5,1]");
}

FacePose::FacePose(double yaw_, double pitch_, double roll_, double expression_, double scale_,
                   double lighting_)
    : yaw(yaw_), pitch(pitch_), roll(roll_), expression(expression_), scale(scale_),
      lighting(lighting_) {
    validate();
}

void FacePose::validate() const {
    check_range(yaw, -std::numbers::pi / 2, std::numbers::pi / 2, "yaw");
    check_range(pitch, -std::numbers::pi / 4, std::numbers::pi / 4, "pitch");
    check_range(roll, -std::numbers::pi / 4, std::numbers::pi / 4, "roll");
    check_range(expression, 0.0, 1.0, "expression");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("FacePose.scale must be > 0");
    check_range(lighting, 0.5, 1.0, "lighting");
}

std::size_t UVMap::valid_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

double UVMap::area_fraction() const {
    return mask.empty() ? 0.0 : static_cast<double>(valid_count()) / static_cast<double>(mask.size());
}

SplitCounts split_counts(int per_identity) {
    if (per_identity < 5) throw ConfigError("per_identity must be >= 5 for a 20/60/20 split");
    const int query = static_cast<int>(std::lround(0.2 * per_identity));
    const int unseen = static_cast<int>(std::lround(0.2 * per_identity));
    return {query, per_identity - query - unseen, unseen};
}

std::uint64_t identity_texture_seed(std::uint64_t world_seed, int identity_id) {
    // Kept non-negative so it round-trips through signed seed fields.
    return derive_seed(world_seed, 0x1000000ULL + static_cast<std::uint64_t>(identity_id)) >> 1;
}

IdentityAtlas make_identity(std::int64_t seed, const WorldConfig& config, int identity_id) {
    if (seed < 0) throw ConfigError("make_identity: seed must be >= 0");
    config.validate();
    const int n = config.texture_size;
    const int ch = config.channels;
    Rng rng(static_cast<std::uint64_t>(seed));

    std::vector<double> base(ch);
    for (auto& b : base) b = rng.uniform(config.base_min, config.base_max);

    struct Blob {
        double cu, cv, sigma;
        std::vector<double> amp;
    };
    std::vector<Blob> blobs(config.n_blobs);
    for (auto& b : blobs) {
        b.cu = rng.uniform(0.15, 0.85) * (n - 1);
        b.cv = rng.uniform(0.15, 0.85) * (n - 1);
        b.sigma = rng.uniform(config.blob_sigma_min, config.blob_sigma_max);
        b.amp.resize(ch);
        for (auto& a : b.amp) a = rng.uniform(-config.blob_amplitude, config.blob_amplitude);
    }

    Texture tex(n, n, ch);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            for (int k = 0; k < ch; ++k) tex.at(r, c, k) = base[k];
            for (const auto& b : blobs) {
                const double d2 = (c - b.cu) * (c - b.cu) + (r - b.cv) * (r - b.cv);
                const double w = std::exp(-d2 / (2.0 * b.sigma * b.sigma));
                for (int k = 0; k < ch; ++k) tex.at(r, c, k) += b.amp[k] * w;
            }
        }
    }

    // Cap the neighbouring-texel steps so that bilinear samples within one
    // texel of each other agree to the configured tolerance.
    double worst = 0.0;
    for (int k = 0; k < ch; ++k) {
        double step_u = 0.0, step_v = 0.0;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c + 1 < n; ++c)
                step_u = std::max(step_u, std::abs(tex.at(r, c + 1, k) - tex.at(r, c, k)));
        for (int r = 0; r + 1 < n; ++r)
            for (int c = 0; c < n; ++c)
                step_v = std::max(step_v, std::abs(tex.at(r + 1, c, k) - tex.at(r, c, k)));
        worst = std::max(worst, step_u + step_v);
    }
    if (worst > config.max_texel_step_sum) {
        const double shrink = config.max_texel_step_sum / worst;
        for (int k = 0; k < ch; ++k) {
            double mean = 0.0;
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < n; ++c) mean += tex.at(r, c, k);
            mean /= static_cast<double>(n) * n;
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < n; ++c) tex.at(r, c, k) = mean + (tex.at(r, c, k) - mean) * shrink;
        }
    }
    for (auto& x : tex.data) x = std::clamp(x, 0.0, 1.0);

    return IdentityAtlas{identity_id >= 0 ? identity_id : static_cast<int>(seed % 1000000007),
                         std::move(tex), seed};
}

void bilinear_sample(const Texture& texture, double u, double v, std::span<double> out) {
    const double x = u * (texture.cols - 1);
    const double y = v * (texture.rows - 1);
    const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, texture.cols - 2);
    const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, texture.rows - 2);
    const double fx = x - x0;
    const double fy = y - y0;
    for (int k = 0; k < texture.channels; ++k) {
        const double top = (1 - fx) * texture.at(y0, x0, k) + fx * texture.at(y0, x0 + 1, k);
        const double bottom = (1 - fx) * texture.at(y0 + 1, x0, k) + fx * texture.at(y0 + 1, x0 + 1, k);
        out[k] = (1 - fy) * top + fy * bottom;
    }
}

RenderedFace render_face(const IdentityAtlas& atlas, const FacePose& pose, const WorldConfig& config) {
    pose.validate();
    const int n = config.image_size;
    const int ch = atlas.base_texture.channels;
    const Mat3 rot = rotation(pose);
    const Vec3 axes{config.head_a * (1.0 + config.expression_widen * pose.expression),
                    config.head_b * (1.0 + config.expression_stretch * pose.expression),
                    config.head_c};
    const Vec3 light = normalized({0.3, 0.5, 1.0});
    const Vec3 dir_h = apply_transpose(rot, {0.0, 0.0, -1.0});
    const Vec3 dir_s{dir_h[0] / axes[0], dir_h[1] / axes[1], dir_h[2] / axes[2]};

    RenderedFace out;
    out.image = Image(n, n, ch, config.background);
    out.uv = UVMap(n, n);
    out.shading.assign(static_cast<std::size_t>(n) * n, 0.0);
    out.identity_id = atlas.identity_id;
    out.pose = pose;

    std::vector<double> texel(ch);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const double X = ((c + 0.5) / n) * 2.0 - 1.0;
            const double Y = 1.0 - ((r + 0.5) / n) * 2.0;
            const Vec3 origin_h = apply_transpose(rot, {X / pose.scale, Y / pose.scale, 10.0});
            const Vec3 o{origin_h[0] / axes[0], origin_h[1] / axes[1], origin_h[2] / axes[2]};
            const double A = dir_s[0] * dir_s[0] + dir_s[1] * dir_s[1] + dir_s[2] * dir_s[2];
            const double B = 2.0 * (o[0] * dir_s[0] + o[1] * dir_s[1] + o[2] * dir_s[2]);
            const double C = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - 1.0;
            const double disc = B * B - 4.0 * A * C;
            if (disc < 0.0) continue;
            const double t = (-B - std::sqrt(disc)) / (2.0 * A);
            const Vec3 s{o[0] + t * dir_s[0], o[1] + t * dir_s[1], o[2] + t * dir_s[2]};

            const double u = 0.5 + std::atan2(s[0], s[2]) / (2.0 * std::numbers::pi);
            const double v = std::acos(std::clamp(s[1], -1.0, 1.0)) / std::numbers::pi;
            const Vec3 normal = normalized(apply(rot, {s[0] / axes[0], s[1] / axes[1], s[2] / axes[2]}));
            const double lambert = std::max(0.0, normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]);
            const double shade = pose.lighting * (config.ambient + (1.0 - config.ambient) * lambert);

            const std::size_t p = static_cast<std::size_t>(r) * n + c;
            out.uv.u[p] = std::clamp(u, 0.0, 1.0);
            out.uv.v[p] = std::clamp(v, 0.0, 1.0);
            out.uv.mask[p] = 1;
            out.shading[p] = shade;
            bilinear_sample(atlas.base_texture, out.uv.u[p], out.uv.v[p], texel);
            for (int k = 0; k < ch; ++k) out.image.at(r, c, k) = shade * texel[k];
        }
    }
    return out;
}

FacePose sample_pose(Rng& rng, const WorldConfig& config) {
    FacePose p;
    p.yaw = rng.uniform(-config.yaw_max, config.yaw_max);
    p.pitch = rng.uniform(-config.pitch_max, config.pitch_max);
    p.roll = rng.uniform(-config.roll_max, config.roll_max);
    p.expression = rng.uniform(config.expression_min, config.expression_max);
    p.scale = rng.uniform(config.scale_min, config.scale_max);
    p.lighting = rng.uniform(config.lighting_min, config.lighting_max);
    p.validate();
    return p;
}

namespace {

std::vector<RenderedFace> render_identity(int identity_id, int count, std::uint64_t seed,
                                          const WorldConfig& config) {
    const auto atlas = make_identity(
        static_cast<std::int64_t>(identity_texture_seed(seed, identity_id)), config, identity_id);
    Rng rng(derive_seed(seed, 0x5000000ULL + static_cast<std::uint64_t>(identity_id)));
    std::vector<RenderedFace> faces;
    faces.reserve(count);
    for (int i = 0; i < count; ++i) faces.push_back(render_face(atlas, sample_pose(rng, config), config));
    return faces;
}

}  // namespace

World sample_world(int n_users, int n_noise_identities, int per_identity, std::uint64_t seed,
                   WorldConfig config) {
    config.n_users = n_users;
    config.n_noise = n_noise_identities;
    config.per_identity = per_identity;
    config.seed = seed;
    return sample_world(config);
}

World sample_world(const WorldConfig& config) {
    config.validate();
    const SplitCounts counts = split_counts(config.per_identity);
    World world;
    world.config = config;
    for (int u = 0; u < config.n_users; ++u) {
        auto faces = render_identity(u, config.per_identity, config.seed, config);
        UserSplit split;
        split.user_id = u;
        auto it = std::make_move_iterator(faces.begin());
        split.query_images.assign(it, it + counts.query);
        split.train_db_images.assign(it + counts.query, it + counts.query + counts.train_db);
        split.unseen_db_images.assign(it + counts.query + counts.train_db, std::make_move_iterator(faces.end()));
        world.users.push_back(std::move(split));
    }
    for (int k = 0; k < config.n_noise; ++k) {
        auto faces = render_identity(config.n_users + k, config.per_identity, config.seed, config);
        for (auto& f : faces) world.noise_db_images.push_back(std::move(f));
    }
    return world;
}

LabeledFaces render_identity_pool(int first_id, int count, int per_identity, std::uint64_t seed,
                                  const WorldConfig& config) {
    config.validate();
    if (count < 1 || per_identity < 1) throw ConfigError("render_identity_pool: empty pool");
    LabeledFaces pool;
    pool.identity_count = count;
    for (int k = 0; k < count; ++k) {
        auto faces = render_identity(first_id + k, per_identity, seed, config);
        for (auto& f : faces) pool.faces.push_back(std::move(f));
    }
    return pool;
}

std::uint64_t hash_image(const Image& image) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    mix(&image.rows, sizeof image.rows);
    mix(&image.cols, sizeof image.cols);
    mix(&image.channels, sizeof image.channels);
    mix(image.data.data(), image.data.size() * sizeof(double));
    return h;
}

GroundTruthUVProvider::GroundTruthUVProvider(const std::vector<RenderedFace>& faces) {
    for (const auto& f : faces) add(f.image, f.uv);
}

void GroundTruthUVProvider::add(const Image& image, const UVMap& uv) {
    if (uv.rows != image.rows || uv.cols != image.cols)
        throw ShapeError("GroundTruthUVProvider: uv map does not match image");
    entries_.emplace(hash_image(image), std::make_pair(image, uv));
}

UVMap GroundTruthUVProvider::estimate(const Image& image) const {
    auto [lo, hi] = entries_.equal_range(hash_image(image));
    for (auto it = lo; it != hi; ++it) {
        if (it->second.first == image) {
            if (it->second.second.valid_count() == 0) throw NoFaceError("no face surface in image");
            return it->second.second;
        }
    }
    throw NoFaceError("no face surface found for image " + shape_string(image));
}

UVMap FixedUVProvider::estimate(const Image& image) const {
    if (uv_.rows != image.rows || uv_.cols != image.cols)
        throw ShapeError("FixedUVProvider: uv map does not match image");
    if (uv_.valid_count() == 0) throw NoFaceError("no face surface in image");
    return uv_;
}

}  // namespace protego
