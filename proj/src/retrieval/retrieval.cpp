#include "hmar/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <tuple>

#include "hmar/errors.hpp"
#include "hmar/io.hpp"
#include "hmar/kan.hpp"

namespace hmar {

namespace {

constexpr char kCodeMagic[8] = {'H', 'M', 'A', 'R', 'C', 'O', 'D', 'E'};
constexpr std::uint16_t kCodeVersion = 1;

bool ranks_before(const RankedItem& a, const RankedItem& b) {
    return std::tie(a.distance, a.residual, a.id) < std::tie(b.distance, b.residual, b.id);
}

} // namespace

std::vector<std::uint64_t> pack_code(std::span<const std::int8_t> signs) {
    std::vector<std::uint64_t> words(words_for_bits(signs.size()), 0);
    for (std::size_t i = 0; i < signs.size(); ++i) {
        if (signs[i] != 1 && signs[i] != -1) throw DomainError("pack_code: code entries must be +1 or -1");
        if (signs[i] == 1) words[i / 64] |= std::uint64_t{1} << (i % 64);
    }
    return words;
}

std::vector<std::int8_t> unpack_code(std::span<const std::uint64_t> words, std::size_t bits) {
    if (words.size() != words_for_bits(bits))
        throw ShapeError("unpack_code: " + std::to_string(words.size()) + " words for " + std::to_string(bits) + " bits");
    std::vector<std::int8_t> signs(bits);
    for (std::size_t i = 0; i < bits; ++i) signs[i] = ((words[i / 64] >> (i % 64)) & 1) ? 1 : -1;
    return signs;
}

int hamming(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    if (a.size() != b.size())
        throw ShapeError("hamming: codes of " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " words");
    int d = 0;
    for (std::size_t w = 0; w < a.size(); ++w) d += std::popcount(a[w] ^ b[w]);
    return d;
}

PackedCodeSet::PackedCodeSet(std::size_t bits) : bits_(bits) {
    if (bits == 0) throw DomainError("PackedCodeSet: bits must be positive");
}

void PackedCodeSet::add(std::span<const std::int8_t> signs, std::uint64_t id) {
    if (signs.size() != bits_)
        throw ShapeError("PackedCodeSet::add: " + std::to_string(signs.size()) + "-bit code into a " +
                         std::to_string(bits_) + "-bit set");
    const auto words = pack_code(signs);
    words_.insert(words_.end(), words.begin(), words.end());
    ids_.push_back(id);
}

void PackedCodeSet::add_packed(std::span<const std::uint64_t> words, std::uint64_t id) {
    if (words.size() != words_per_code()) throw ShapeError("PackedCodeSet::add_packed: wrong word count");
    const std::size_t pad = words_per_code() * 64 - bits_;
    if (pad > 0 && (words.back() >> (64 - pad)) != 0) throw DomainError("PackedCodeSet::add_packed: nonzero pad bits");
    words_.insert(words_.end(), words.begin(), words.end());
    ids_.push_back(id);
}

std::span<const std::uint64_t> PackedCodeSet::code(std::size_t row) const {
    if (row >= size()) throw DomainError("PackedCodeSet::code: row " + std::to_string(row) + " out of range");
    return {words_.data() + row * words_per_code(), words_per_code()};
}

PackedCodeSet PackedCodeSet::from_continuous(const Tensor& codes, const std::vector<std::uint64_t>& ids) {
    if (codes.rank() != 2 || codes.dim(0) != ids.size())
        throw ShapeError("PackedCodeSet::from_continuous: codes " + shape_string(codes.shape()) + " for " +
                         std::to_string(ids.size()) + " ids");
    PackedCodeSet set(codes.dim(1));
    const auto& d = codes.data();
    for (std::size_t r = 0; r < ids.size(); ++r)
        set.add(binarize(std::span<const double>(d.data() + r * set.bits(), set.bits())), ids[r]);
    return set;
}

std::vector<std::uint8_t> serialize_code_db(const PackedCodeSet& codes) {
    ByteWriter w;
    w.put_bytes(std::string_view(kCodeMagic, sizeof(kCodeMagic)));
    w.put<std::uint16_t>(kCodeVersion);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(codes.bits()));
    w.put<std::uint64_t>(codes.size());
    for (std::uint64_t word : codes.words()) w.put(word);
    for (std::uint64_t id : codes.ids()) w.put(id);
    return std::move(w.bytes());
}

PackedCodeSet deserialize_code_db(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "code db");
    if (r.get_string(sizeof(kCodeMagic)) != std::string_view(kCodeMagic, sizeof(kCodeMagic))) r.fail("bad magic");
    const auto version = r.get<std::uint16_t>();
    if (version != kCodeVersion) r.fail("unsupported version " + std::to_string(version));
    const auto bits = r.get<std::uint16_t>();
    const auto count = r.get<std::uint64_t>();
    if (bits == 0) r.fail("zero bits");
    const std::size_t wpc = words_for_bits(bits);
    if (r.remaining() / 8 / (wpc + 1) != count || r.remaining() % (8 * (wpc + 1)) != 0)
        r.fail("size does not match " + std::to_string(count) + " codes of " + std::to_string(bits) + " bits");
    std::vector<std::uint64_t> words(count * wpc);
    for (auto& word : words) word = r.get<std::uint64_t>();
    PackedCodeSet set(bits);
    for (std::size_t row = 0; row < count; ++row) {
        try {
            set.add_packed(std::span<const std::uint64_t>(words.data() + row * wpc, wpc), r.get<std::uint64_t>());
        } catch (const DomainError& e) {
            r.fail(e.what());
        }
    }
    return set;
}

void write_code_db(const std::filesystem::path& path, const PackedCodeSet& codes) { write_file(path, serialize_code_db(codes)); }

PackedCodeSet read_code_db(const std::filesystem::path& path) { return deserialize_code_db(read_file(path)); }

RetrievalResult top_k_global(std::span<const std::uint64_t> query, const PackedCodeSet& db, std::size_t k) {
    if (db.empty()) throw DomainError("top_k_global: empty database");
    if (k == 0) throw DomainError("top_k_global: k must be at least 1");
    RetrievalResult result;
    result.items.reserve(db.size());
    for (std::size_t r = 0; r < db.size(); ++r) result.items.push_back({db.id(r), hamming(query, db.code(r)), 0.0, {}});
    k = std::min(k, db.size());
    std::partial_sort(result.items.begin(), result.items.begin() + static_cast<std::ptrdiff_t>(k), result.items.end(),
                      ranks_before);
    result.items.resize(k);
    return result;
}

std::vector<std::size_t> window_origins(std::size_t extent, std::size_t window, std::size_t stride, std::size_t phase) {
    if (window == 0 || window > extent)
        throw DomainError("window of " + std::to_string(window) + " does not fit an extent of " + std::to_string(extent));
    if (stride == 0) throw DomainError("window stride must be positive");
    const std::size_t last = extent - window;
    std::vector<std::size_t> origins{0, last};
    for (std::size_t o = phase % stride; o <= last; o += stride) origins.push_back(o);
    std::sort(origins.begin(), origins.end());
    origins.erase(std::unique(origins.begin(), origins.end()), origins.end());
    return origins;
}

LocalQuery make_local_query(std::vector<double> code, const BoundingBox& box, std::size_t fmap_h, std::size_t fmap_w,
                            int factor, std::size_t stride) {
    const Window w = map_box_to_feature(box, factor);
    if (w.y1 > fmap_h || w.x1 > fmap_w)
        throw DomainError("box " + box.str() + " maps outside a " + std::to_string(fmap_h) + "x" + std::to_string(fmap_w) +
                          " feature map");
    LocalQuery q;
    q.code = std::move(code);
    q.window_h = w.y1 - w.y0;
    q.window_w = w.x1 - w.x0;
    q.phase_i = w.y0;
    q.phase_j = w.x0;
    q.pixel_box = box;
    q.factor = factor;
    q.stride = stride;
    return q;
}

WindowMatch sliding_window_match(const LocalQuery& query, std::size_t fmap_h, std::size_t fmap_w,
                                 const WindowEncoder& encode, std::uint64_t candidate_id) {
    const auto rows = window_origins(fmap_h, query.window_h, query.stride, query.phase_i);
    const auto cols = window_origins(fmap_w, query.window_w, query.stride, query.phase_j);
    std::vector<Window> windows;
    windows.reserve(rows.size() * cols.size());
    for (std::size_t i : rows)
        for (std::size_t j : cols) windows.push_back({i, i + query.window_h, j, j + query.window_w});
    const Tensor codes = encode(windows);
    const std::size_t q = query.code.size();
    if (codes.rank() != 2 || codes.dim(0) != windows.size() || codes.dim(1) != q)
        throw ShapeError("sliding_window_match: encoder returned " + shape_string(codes.shape()) + " for " +
                         std::to_string(windows.size()) + " windows of " + std::to_string(q) + " bits");
    const auto query_words = pack_code(binarize(query.code));
    std::size_t best = 0;
    int best_score = 0;
    double best_residual = 0.0;
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const std::span<const double> u(codes.data().data() + w * q, q);
        const int score = hamming(query_words, pack_code(binarize(u)));
        double residual = 0.0;
        for (std::size_t b = 0; b < q; ++b) residual += (u[b] - query.code[b]) * (u[b] - query.code[b]);
        if (w == 0 || std::tie(score, residual) < std::tie(best_score, best_residual)) {
            best = w;
            best_score = score;
            best_residual = residual;
        }
    }
    WindowMatch m;
    m.candidate_id = candidate_id;
    m.i = windows[best].y0;
    m.j = windows[best].x0;
    m.score = best_score;
    m.residual = best_residual;
    const int x1 = static_cast<int>(m.j) * query.factor + query.pixel_box.x1 - static_cast<int>(query.phase_j) * query.factor;
    const int y1 = static_cast<int>(m.i) * query.factor + query.pixel_box.y1 - static_cast<int>(query.phase_i) * query.factor;
    m.box = {x1, y1, x1 + query.pixel_box.width(), y1 + query.pixel_box.height()};
    return m;
}

RetrievalResult local_rerank(const LocalQuery& query, const std::vector<std::uint64_t>& candidates, std::size_t n,
                             const std::function<WindowMatch(const LocalQuery&, std::uint64_t)>& match) {
    if (n == 0) throw DomainError("local_rerank: n must be at least 1");
    RetrievalResult result;
    for (std::uint64_t id : candidates) {
        WindowMatch m = match(query, id);
        m.candidate_id = id;
        result.items.push_back({id, m.score, m.residual, m});
    }
    std::sort(result.items.begin(), result.items.end(), ranks_before);
    if (result.items.size() > n) result.items.resize(n);
    return result;
}

double average_precision(const std::vector<bool>& relevant) {
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < relevant.size(); ++k) {
        if (!relevant[k]) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

double compute_map(const PackedCodeSet& queries, const std::vector<std::vector<double>>& query_labels,
                   const PackedCodeSet& db, const std::vector<std::vector<double>>& db_labels, std::size_t top_k) {
    if (db.empty()) throw DomainError("compute_map: empty database");
    if (queries.empty()) throw DomainError("compute_map: no queries");
    if (query_labels.size() != queries.size() || db_labels.size() != db.size())
        throw ShapeError("compute_map: label rows do not match code counts");
    if (queries.bits() != db.bits()) throw ShapeError("compute_map: query and database code lengths differ");
    const std::size_t k = top_k == 0 ? db.size() : std::min(top_k, db.size());
    std::vector<std::pair<std::uint64_t, std::size_t>> id_rows;
    for (std::size_t r = 0; r < db.size(); ++r) id_rows.emplace_back(db.id(r), r);
    std::sort(id_rows.begin(), id_rows.end());
    double total = 0.0;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const auto ranked = top_k_global(queries.code(qi), db, k);
        std::vector<bool> rel;
        rel.reserve(k);
        for (const auto& item : ranked.items) {
            const auto it = std::lower_bound(id_rows.begin(), id_rows.end(), std::make_pair(item.id, std::size_t{0}));
            const auto& lab = db_labels[it->second];
            const auto& ql = query_labels[qi];
            if (lab.size() != ql.size()) throw ShapeError("compute_map: label vectors of different lengths");
            rel.push_back(std::inner_product(ql.begin(), ql.end(), lab.begin(), 0.0) > 0.0);
        }
        total += average_precision(rel);
    }
    return total / static_cast<double>(queries.size());
}

double compute_map(const PackedCodeSet& queries, const std::vector<int>& query_labels, const PackedCodeSet& db,
                   const std::vector<int>& db_labels, std::size_t top_k) {
    int classes = 0;
    for (int l : query_labels) classes = std::max(classes, l + 1);
    for (int l : db_labels) classes = std::max(classes, l + 1);
    auto one_hot = [&](const std::vector<int>& labels) {
        std::vector<std::vector<double>> rows;
        for (int l : labels) {
            if (l < 0) throw DomainError("compute_map: negative label");
            std::vector<double> row(static_cast<std::size_t>(classes), 0.0);
            row[static_cast<std::size_t>(l)] = 1.0;
            rows.push_back(std::move(row));
        }
        return rows;
    };
    return compute_map(queries, one_hot(query_labels), db, one_hot(db_labels), top_k);
}

} // namespace hmar
