#pragma once

#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

#include "protego/core.hpp"

namespace protego {

/// Parameters of the synthetic population and of the head-proxy renderer.
struct WorldConfig {
    int image_size = 64;
    int texture_size = 64;
    int channels = 3;

    int n_users = 20;
    int n_noise = 100;
    int per_identity = 20;
    std::uint64_t seed = 0;

    // Pose sampling ranges (symmetric around zero for the angles).
    double yaw_max = 0.7;
    double pitch_max = 0.3;
    double roll_max = 0.2;
    double expression_min = 0.0;
    double expression_max = 1.0;
    double scale_min = 0.85;
    double scale_max = 1.05;
    double lighting_min = 0.6;
    double lighting_max = 1.0;

    // Texture statistics.
    double base_min = 0.3;
    double base_max = 0.7;
    int n_blobs = 10;
    double blob_sigma_min = 5.0;   // texels
    double blob_sigma_max = 11.0;  // texels
    double blob_amplitude = 0.2;
    /// Per channel cap on (max horizontal + max vertical) neighbouring-texel difference.
    /// Bilinear samples less than one texel apart then differ by at most this.
    double max_texel_step_sum = 0.007;
    double separation_floor = 0.02;

    // Head proxy (orthographic, image plane spans [-1, 1]^2).
    double head_a = 0.62;
    double head_b = 0.78;
    double head_c = 0.60;
    double expression_widen = -0.08;
    double expression_stretch = 0.12;
    double ambient = 0.4;
    double background = 0.35;

    void validate() const;
};

/// A user's identity: the albedo texture in UV space.
struct IdentityAtlas {
    int identity_id = 0;
    Texture base_texture;
    std::int64_t texture_seed = 0;
};

struct FacePose {
    double yaw = 0.0;
    double pitch = 0.0;
    double roll = 0.0;
    double expression = 0.0;
    double scale = 1.0;
    double lighting = 1.0;

    FacePose() = default;
    /// Rejects out-of-range fields with ConfigError.
    FacePose(double yaw, double pitch, double roll, double expression, double scale,
             double lighting);

    void validate() const;
    bool operator==(const FacePose&) const = default;
};

/// Per-pixel UV coordinates and face-surface mask. Invalid pixels carry the
/// sentinel coordinate and must never be sampled.
struct UVMap {
    static constexpr double kSentinel = -1.0;

    int rows = 0;
    int cols = 0;
    std::vector<double> u;
    std::vector<double> v;
    std::vector<std::uint8_t> mask;

    UVMap() = default;
    UVMap(int r, int c)
        : rows(r), cols(c),
          u(static_cast<std::size_t>(r) * c, kSentinel),
          v(static_cast<std::size_t>(r) * c, kSentinel),
          mask(static_cast<std::size_t>(r) * c, 0) {}

    std::size_t pixel_count() const { return mask.size(); }
    std::size_t valid_count() const;
    double area_fraction() const;
    bool operator==(const UVMap&) const = default;
};

struct RenderedFace {
    Image image;
    UVMap uv;
    /// Lambertian shading factor per pixel; zero off the mask.
    std::vector<double> shading;
    int identity_id = 0;
    FacePose pose;
};

struct UserSplit {
    int user_id = 0;
    std::vector<RenderedFace> query_images;
    std::vector<RenderedFace> train_db_images;
    std::vector<RenderedFace> unseen_db_images;
};

struct World {
    WorldConfig config;
    std::vector<UserSplit> users;
    std::vector<RenderedFace> noise_db_images;
};

/// Split of n images into query / train-DB / unseen-DB counts (20/60/20).
struct SplitCounts {
    int query;
    int train_db;
    int unseen_db;
};
SplitCounts split_counts(int per_identity);

IdentityAtlas make_identity(std::int64_t seed, const WorldConfig& config, int identity_id = -1);

RenderedFace render_face(const IdentityAtlas& atlas, const FacePose& pose,
                         const WorldConfig& config);

/// Samples a pose uniformly inside the configured ranges.
FacePose sample_pose(Rng& rng, const WorldConfig& config);

/// Bilinear lookup at continuous UV in [0,1]^2 (texel centres at the grid
/// corners, u along columns, v along rows). Writes one value per channel.
void bilinear_sample(const Texture& texture, double u, double v, std::span<double> out);

World sample_world(int n_users, int n_noise_identities, int per_identity, std::uint64_t seed,
                   WorldConfig config = {});
/// Uses n_users / n_noise / per_identity / seed from the config itself.
World sample_world(const WorldConfig& config);

/// Renders `count` identities (ids first_id..) with `per_identity` poses each,
/// for training face-recognition models on identities outside the user set.
struct LabeledFaces {
    std::vector<RenderedFace> faces;
    int identity_count = 0;
};
LabeledFaces render_identity_pool(int first_id, int count, int per_identity,
                                  std::uint64_t seed, const WorldConfig& config);

std::uint64_t identity_texture_seed(std::uint64_t world_seed, int identity_id);

/// Source of UV maps for arbitrary images (the pose-estimation stage).
class UVProvider {
public:
    virtual ~UVProvider() = default;
    /// Throws NoFaceError when no face surface is found.
    virtual UVMap estimate(const Image& image) const = 0;
};

/// Returns the exact UV map of any image it was constructed with; images are
/// matched by content.
class GroundTruthUVProvider : public UVProvider {
public:
    GroundTruthUVProvider() = default;
    explicit GroundTruthUVProvider(const std::vector<RenderedFace>& faces);

    void add(const Image& image, const UVMap& uv);
    UVMap estimate(const Image& image) const override;

private:
    std::unordered_multimap<std::uint64_t, std::pair<Image, UVMap>> entries_;
};

/// Always returns the same UV map; useful when the caller already knows it.
class FixedUVProvider : public UVProvider {
public:
    explicit FixedUVProvider(UVMap uv) : uv_(std::move(uv)) {}
    UVMap estimate(const Image& image) const override;

private:
    UVMap uv_;
};

std::uint64_t hash_image(const Image& image);

}  // namespace protego
