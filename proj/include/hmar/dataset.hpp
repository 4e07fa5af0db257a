#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hmar/box.hpp"
#include "hmar/io.hpp"
#include "hmar/tensor.hpp"

namespace hmar {

enum class Motif { Disk, Ring, Cross, Bar, Blob, CornerWedge, DoubleDot, GridPatch };
inline constexpr std::size_t kMotifCount = 8;
const char* motif_name(Motif m);

struct SyntheticSpec {
    std::size_t num_classes = 8;
    std::size_t images_per_class = 200;
    std::size_t image_size = 64;
    double noise_sigma = 0.03;
    double motif_contrast = 0.45;
    int min_motif = 14;
    int max_motif = 28;

    void validate() const;
};

struct SyntheticImage {
    Tensor pixels; // [1,H,W] in [0,1]
    BoundingBox box;
    int label = 0;
};

/// Renders one image of class `label` from its own seed.
SyntheticImage render_synthetic(const SyntheticSpec& spec, int label, std::uint64_t seed);

struct ManifestEntry {
    std::uint64_t id = 0;
    std::string path; // relative to the manifest directory, or absolute
    int label = 0;
    std::optional<BoundingBox> box;

    bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir; // directory that relative paths resolve against

    std::filesystem::path resolve(const ManifestEntry& e) const;
    /// Entry with the given id; throws DomainError when absent.
    const ManifestEntry& find(std::uint64_t id) const;
    std::size_t num_classes() const;
};

/// Writes images/{id}.png and manifest.jsonl under `out_dir`. Image ids are 0..N-1 with
/// label = id mod num_classes, so class balance is exact.
Manifest generate(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir);

Manifest read_manifest(const std::filesystem::path& path);
/// Writes JSON lines; paths are stored relative to the file's directory when possible.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct Splits {
    Manifest train, val, test;
};

/// Stratified split: per class, a seeded shuffle cut at the rounded ratio boundaries.
Splits split(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed);

/// 8-bit grayscale PNG -> [1,H,W] in [0,1].
Tensor load_image(const std::filesystem::path& path);
Tensor decode_png(const std::vector<std::uint8_t>& bytes);
/// [1,H,W] or [H,W] in [0,1] -> 8-bit grayscale PNG (values rounded, clamped).
std::vector<std::uint8_t> encode_png(const Tensor& image);
void save_image(const std::filesystem::path& path, const Tensor& image);

/// Loads entries as one batch [N,1,H,W].
Tensor load_batch(const Manifest& manifest, const std::vector<std::size_t>& indices);

/// A manifest decoded into memory.
struct ImageSet {
    Tensor images; // [N,1,H,W]
    std::vector<int> labels;
    std::vector<std::uint64_t> ids;
    std::vector<std::optional<BoundingBox>> boxes;

    std::size_t size() const { return ids.size(); }
    /// Rows `indices` as a batch [n,1,H,W].
    Tensor batch(const std::vector<std::size_t>& indices) const;
    /// Single image [1,1,H,W].
    Tensor image(std::size_t index) const { return batch({index}); }
};

ImageSet load_image_set(const Manifest& manifest);

} // namespace hmar
