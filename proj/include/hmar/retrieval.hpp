#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "hmar/box.hpp"
#include "hmar/tensor.hpp"

namespace hmar {

/// Packs a +-1 code: +1 -> bit 1, -1 -> bit 0, bit i of the code is bit (i % 64) of
/// word i / 64, unused high bits are zero.
std::vector<std::uint64_t> pack_code(std::span<const std::int8_t> signs);
std::vector<std::int8_t> unpack_code(std::span<const std::uint64_t> words, std::size_t bits);
inline std::size_t words_for_bits(std::size_t bits) { return (bits + 63) / 64; }

/// Popcount of the XOR; throws ShapeError on a length mismatch.
int hamming(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

/// Bit-packed codes of a database, one row per image.
class PackedCodeSet {
public:
    PackedCodeSet() = default;
    explicit PackedCodeSet(std::size_t bits);

    std::size_t bits() const { return bits_; }
    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }
    std::size_t words_per_code() const { return words_for_bits(bits_); }

    void add(std::span<const std::int8_t> signs, std::uint64_t id);
    void add_packed(std::span<const std::uint64_t> words, std::uint64_t id);
    std::span<const std::uint64_t> code(std::size_t row) const;
    std::uint64_t id(std::size_t row) const { return ids_.at(row); }
    const std::vector<std::uint64_t>& ids() const { return ids_; }
    const std::vector<std::uint64_t>& words() const { return words_; }

    /// Binarizes each row of continuous codes [N,bits].
    static PackedCodeSet from_continuous(const Tensor& codes, const std::vector<std::uint64_t>& ids);

    bool operator==(const PackedCodeSet&) const = default;

private:
    std::size_t bits_ = 0;
    std::vector<std::uint64_t> words_;
    std::vector<std::uint64_t> ids_;
};

/// Code database file: "HMARCODE", u16 version, u16 bits, u64 count, words, ids; little endian.
void write_code_db(const std::filesystem::path& path, const PackedCodeSet& codes);
PackedCodeSet read_code_db(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_code_db(const PackedCodeSet& codes);
PackedCodeSet deserialize_code_db(std::span<const std::uint8_t> bytes);

struct WindowMatch {
    std::uint64_t candidate_id = 0;
    std::size_t i = 0; // feature-space row of the window origin
    std::size_t j = 0; // feature-space column
    int score = 0;     // Hamming distance to the query code
    double residual = 0.0;
    BoundingBox box; // pixel space
};

struct RankedItem {
    std::uint64_t id = 0;
    int distance = 0;
    double residual = 0.0;
    std::optional<WindowMatch> match;
};

struct RetrievalResult {
    std::vector<RankedItem> items;
};

/// The k codes nearest to `query`, by (distance, id). k larger than the database returns all.
RetrievalResult top_k_global(std::span<const std::uint64_t> query, const PackedCodeSet& db, std::size_t k);

/// Window origins along one axis: the stride lattice through `phase`, plus 0 and the last
/// origin that fits. Sorted, unique. Throws DomainError if the window does not fit.
std::vector<std::size_t> window_origins(std::size_t extent, std::size_t window, std::size_t stride,
                                        std::size_t phase = 0);

/// Continuous local codes [windows,bits] for a list of windows of one candidate map.
using WindowEncoder = std::function<Tensor(const std::vector<Window>&)>;

struct LocalQuery {
    std::vector<double> code; // continuous query code
    std::size_t window_h = 0; // feature-space window size
    std::size_t window_w = 0;
    std::size_t phase_i = 0; // query window origin, phases the origin lattice
    std::size_t phase_j = 0;
    BoundingBox pixel_box; // query box; matched windows keep its size and its offset within the origin cell
    int factor = 4;
    std::size_t stride = 5;
};

/// Query description for a pixel box on a feature map of size fmap_h x fmap_w.
LocalQuery make_local_query(std::vector<double> code, const BoundingBox& box, std::size_t fmap_h, std::size_t fmap_w,
                            int factor = 4, std::size_t stride = 5);

/// Best window of a candidate map: least Hamming distance, then least squared distance
/// between continuous codes, then row-major earliest origin.
WindowMatch sliding_window_match(const LocalQuery& query, std::size_t fmap_h, std::size_t fmap_w,
                                 const WindowEncoder& encode, std::uint64_t candidate_id = 0);

/// Scores each candidate by its best window and keeps the n best by (score, residual, id).
RetrievalResult local_rerank(const LocalQuery& query, const std::vector<std::uint64_t>& candidates, std::size_t n,
                             const std::function<WindowMatch(const LocalQuery&, std::uint64_t)>& match);

/// Average precision of a ranked relevance list: mean of precision@k over the relevant
/// ranks; 0 when nothing relevant was retrieved.
double average_precision(const std::vector<bool>& relevant);

/// Mean AP of each query's ranking over the database (ascending Hamming distance, ties by
/// id), truncated to top_k (0 = whole database). Labels are multi-hot rows; an item is
/// relevant when its label row shares a positive entry with the query's.
double compute_map(const PackedCodeSet& queries, const std::vector<std::vector<double>>& query_labels,
                   const PackedCodeSet& db, const std::vector<std::vector<double>>& db_labels, std::size_t top_k = 0);
/// Single-label convenience form.
double compute_map(const PackedCodeSet& queries, const std::vector<int>& query_labels, const PackedCodeSet& db,
                   const std::vector<int>& db_labels, std::size_t top_k = 0);

} // namespace hmar
