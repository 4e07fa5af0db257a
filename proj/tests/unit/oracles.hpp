#pragma once

// Straightforward reference implementations used to cross-check the retrieval module.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <tuple>
#include <vector>

#include "hmar/retrieval.hpp"
#include "support.hpp"

namespace hmar::testing {

inline std::vector<std::int8_t> random_code(std::mt19937_64& rng, std::size_t bits) {
    std::vector<std::int8_t> c(bits);
    for (auto& v : c) v = (rng() & 1) ? 1 : -1;
    return c;
}

/// Count of positions where two sign vectors differ.
inline int bitloop_hamming(const std::vector<std::int8_t>& a, const std::vector<std::int8_t>& b) {
    int d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

/// Full sort of (distance, id) over unpacked codes.
inline std::vector<std::pair<int, std::uint64_t>> naive_ranking(const std::vector<std::int8_t>& query,
                                                                const std::vector<std::vector<std::int8_t>>& codes,
                                                                const std::vector<std::uint64_t>& ids) {
    std::vector<std::pair<int, std::uint64_t>> all;
    for (std::size_t r = 0; r < codes.size(); ++r) all.emplace_back(bitloop_hamming(query, codes[r]), ids[r]);
    std::sort(all.begin(), all.end());
    return all;
}

/// Every window at the listed origins evaluated one at a time; the best by (score, residual,
/// row, column).
struct BruteMatch {
    std::size_t i = 0, j = 0;
    int score = 0;
    double residual = 0.0;
};

inline BruteMatch brute_window_match(const std::vector<double>& query_code, const std::vector<std::size_t>& rows,
                                     const std::vector<std::size_t>& cols, std::size_t wh, std::size_t ww,
                                     const WindowEncoder& encode) {
    std::vector<std::int8_t> qs(query_code.size());
    for (std::size_t b = 0; b < qs.size(); ++b) qs[b] = query_code[b] >= 0.0 ? 1 : -1;
    bool first = true;
    BruteMatch best;
    for (std::size_t i : rows)
        for (std::size_t j : cols) {
            const Tensor u = encode({Window{i, i + wh, j, j + ww}});
            std::vector<std::int8_t> s(qs.size());
            double residual = 0.0;
            for (std::size_t b = 0; b < qs.size(); ++b) {
                s[b] = u[b] >= 0.0 ? 1 : -1;
                residual += (u[b] - query_code[b]) * (u[b] - query_code[b]);
            }
            const int score = bitloop_hamming(qs, s);
            if (first || std::tie(score, residual, i, j) < std::tie(best.score, best.residual, best.i, best.j)) {
                best = {i, j, score, residual};
                first = false;
            }
        }
    return best;
}

/// AP by counting, for every relevant rank k, the relevant items at ranks <= k.
inline double quadratic_ap(const std::vector<bool>& rel) {
    double sum = 0.0;
    int relevant = 0;
    for (std::size_t k = 0; k < rel.size(); ++k) {
        if (!rel[k]) continue;
        ++relevant;
        int hits = 0;
        for (std::size_t m = 0; m <= k; ++m) hits += rel[m];
        sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    return relevant == 0 ? 0.0 : sum / relevant;
}

/// mAP over single-label queries with every ranking built by naive_ranking.
inline double quadratic_map(const std::vector<std::vector<std::int8_t>>& queries, const std::vector<int>& qlabels,
                            const std::vector<std::vector<std::int8_t>>& db, const std::vector<int>& dlabels,
                            const std::vector<std::uint64_t>& ids, std::size_t top_k) {
    double total = 0.0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        auto ranking = naive_ranking(queries[q], db, ids);
        ranking.resize(std::min(top_k, ranking.size()));
        std::vector<bool> rel;
        for (const auto& [d, id] : ranking) {
            const auto row = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), id) - ids.begin());
            rel.push_back(dlabels[row] == qlabels[q]);
        }
        total += quadratic_ap(rel);
    }
    return total / static_cast<double>(queries.size());
}

/// Encoder producing pseudo-random but deterministic codes from window contents of a map.
struct ProjectionEncoder {
    Tensor fmap;     // [C,h,w]
    Tensor proj;     // [bits, C]
    double scale = 1.0;

    Tensor operator()(const std::vector<Window>& windows) const {
        const std::size_t c = fmap.dim(0), w = fmap.dim(2), bits = proj.dim(0);
        Tensor out({windows.size(), bits}, 0.0);
        for (std::size_t n = 0; n < windows.size(); ++n) {
            const Window& win = windows[n];
            std::vector<double> pooled(c, 0.0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t y = win.y0; y < win.y1; ++y)
                    for (std::size_t x = win.x0; x < win.x1; ++x) pooled[ch] += fmap[(ch * fmap.dim(1) + y) * w + x];
                pooled[ch] /= static_cast<double>((win.y1 - win.y0) * (win.x1 - win.x0));
            }
            for (std::size_t b = 0; b < bits; ++b) {
                double acc = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) acc += proj[b * c + ch] * pooled[ch];
                out[n * bits + b] = std::tanh(scale * acc);
            }
        }
        return out;
    }
};

/// Random database; ids are a permutation of 1000..1000+n-1 when n is coprime to 7.
inline PackedCodeSet random_db(std::mt19937_64& rng, std::size_t n, std::size_t bits,
                               std::vector<std::vector<std::int8_t>>* codes = nullptr, std::vector<std::uint64_t>* ids = nullptr) {
    PackedCodeSet db(bits);
    for (std::size_t r = 0; r < n; ++r) {
        auto c = random_code(rng, bits);
        const std::uint64_t id = 1000 + r * 7 % n;
        db.add(c, id);
        if (codes) codes->push_back(c);
        if (ids) ids->push_back(id);
    }
    return db;
}

inline ProjectionEncoder random_encoder(std::mt19937_64& rng, std::size_t c, std::size_t h, std::size_t w, std::size_t bits) {
    return {random_tensor({c, h, w}, rng), random_tensor({bits, c}, rng), 3.0};
}

} // namespace hmar::testing
