// One PASS/FAIL line per acceptance criterion. Exit status is nonzero if any line fails.
// Set HMAR_ACCEPTANCE_KEEP=1 to keep the working directory.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "cli.hpp"
#include "hmar/checkpoint.hpp"
#include "hmar/io.hpp"
#include "hmar/losses.hpp"
#include "hmar/ops.hpp"
#include "hmar/dataset.hpp"
#include "hmar/gradcheck.hpp"
#include "hmar/kan.hpp"
#include "hmar/retrieval.hpp"
#include "hmar/service.hpp"
#include "hmar/trainer.hpp"
#include "unit/oracles.hpp"

using namespace hmar;
using namespace hmar::testing;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeed = 7;
constexpr std::size_t kBits = 16;
constexpr const char* kStage1Lr = "3e-3";
constexpr const char* kStage2Lr = "1e-4";

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
    std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    failures += !pass;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

/// Runs a CLI command in-process; aborts the pipeline on failure.
nlohmann::json cli_run(const std::vector<std::string>& args, std::string* log = nullptr) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) throw std::runtime_error("hmar " + args.front() + " failed: " + err.str());
    const std::string text = out.str();
    if (log) *log = text;
    const auto last = text.find_last_of('{');
    return last == std::string::npos ? nlohmann::json{} : nlohmann::json::parse(text.substr(last));
}

void gradient_suite_check() {
    const auto t0 = Clock::now();
    const auto reports = gradient_suite(20);
    const double secs = seconds_since(t0);
    double worst = 0.0;
    std::string worst_name;
    for (const auto& r : reports)
        if (r.max_error >= worst) worst = r.max_error, worst_name = r.component;
    report(worst < kGradCheckTolerance && secs < 120.0, "gradient suite",
           fmt("%zu components, max relative error %.3e (%s), %.1f s", reports.size(), worst, worst_name.c_str(), secs));
}

void hamming_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    std::size_t mismatches = 0, pairs = 0;
    for (std::size_t q : {8, 16, 64, 128})
        for (int n = 0; n < 10000; ++n, ++pairs) {
            const auto a = random_code(rng, q), b = random_code(rng, q);
            mismatches += hamming(pack_code(a), pack_code(b)) != bitloop_hamming(a, b);
        }
    const double secs = seconds_since(t0);
    report(mismatches == 0 && secs < 5.0, "Hamming oracle",
           fmt("%zu pairs over q in {8,16,64,128}, %zu mismatches, %.2f s", pairs, mismatches, secs));
}

void index_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(102);
    std::size_t bad = 0;
    for (int instance = 0; instance < 100; ++instance) {
        std::vector<std::vector<std::int8_t>> codes;
        std::vector<std::uint64_t> ids;
        const PackedCodeSet db = random_db(rng, 5000, 64, &codes, &ids);
        const auto query = random_code(rng, 64);
        const std::size_t k = 1 + rng() % 5000;
        const auto result = top_k_global(pack_code(query), db, k);
        const auto oracle = naive_ranking(query, codes, ids);
        bool same = result.items.size() == k;
        for (std::size_t r = 0; same && r < k; ++r)
            same = result.items[r].distance == oracle[r].first && result.items[r].id == oracle[r].second;
        bad += !same;
    }
    const double secs = seconds_since(t0);
    report(bad == 0 && secs < 30.0, "index oracle",
           fmt("100 instances, N=5000, q=64, %zu differ from the full sort, %.1f s", bad, secs));
}

void window_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(103);
    std::size_t bad = 0;
    for (int instance = 0; instance < 50; ++instance) {
        const std::size_t h = 8 + rng() % 12, w = 8 + rng() % 12;
        const ProjectionEncoder enc = random_encoder(rng, 4, h, w, 16);
        const int bw = 4 + static_cast<int>(rng() % (4 * w - 4)), bh = 4 + static_cast<int>(rng() % (4 * h - 4));
        const int x1 = static_cast<int>(rng() % (4 * w - static_cast<std::size_t>(bw) + 1));
        const int y1 = static_cast<int>(rng() % (4 * h - static_cast<std::size_t>(bh) + 1));
        std::vector<double> qcode(16);
        for (auto& v : qcode) v = std::uniform_real_distribution<double>(-1, 1)(rng);
        const LocalQuery q = make_local_query(qcode, {x1, y1, x1 + bw, y1 + bh}, h, w);
        const WindowMatch m = sliding_window_match(q, h, w, enc);
        const BruteMatch b = brute_window_match(qcode, window_origins(h, q.window_h, q.stride, q.phase_i),
                                                window_origins(w, q.window_w, q.stride, q.phase_j), q.window_h,
                                                q.window_w, enc);
        bad += !(m.score == b.score && m.i == b.i && m.j == b.j);
    }
    const double secs = seconds_since(t0);
    report(bad == 0 && secs < 30.0, "window oracle",
           fmt("50 random maps, %zu differ from brute force, %.2f s", bad, secs));
}

void map_oracle() {
    std::mt19937_64 rng(104);
    double worst = 0.0;
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t bits = instance % 2 ? 8 : 32, n = 60 + rng() % 60, nq = 5 + rng() % 10;
        std::vector<std::vector<std::int8_t>> db_codes, q_codes;
        std::vector<std::uint64_t> ids;
        const PackedCodeSet db = random_db(rng, n, bits, &db_codes, &ids);
        PackedCodeSet queries(bits);
        std::vector<int> dl(n), ql(nq);
        for (auto& l : dl) l = static_cast<int>(rng() % 4);
        for (std::size_t i = 0; i < nq; ++i) {
            q_codes.push_back(random_code(rng, bits));
            queries.add(q_codes.back(), i);
            ql[i] = static_cast<int>(rng() % 4);
        }
        const std::size_t k = instance % 3 == 0 ? 0 : 1 + rng() % n;
        const double fast = compute_map(queries, ql, db, dl, k);
        const double slow = quadratic_map(q_codes, ql, db_codes, dl, ids, k == 0 ? n : k);
        worst = std::max(worst, std::abs(fast - slow));
    }
    const double hand = average_precision({true, false, true});
    report(worst <= 1e-12 && std::abs(hand - 0.5 * (1.0 + 2.0 / 3.0)) <= 1e-12, "mAP oracle",
           fmt("20 instances, max |difference| %.2e; hand example AP %.4f", worst, hand));
}

void ste_contract() {
    std::mt19937_64 rng(105);
    std::size_t mismatches = 0, total = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({4, 16}, rng), g = random_tensor({4, 16}, rng, -5.0, 5.0);
        const auto r = forward_backward([&](ParamScope& s) { return sum(mul(sign_ste(s("x")), s.tape().constant(g))); },
                                        TensorMap{{"x", x}});
        const Tensor& dx = r.grads.at("x");
        for (std::size_t i = 0; i < g.size(); ++i, ++total) mismatches += dx[i] != g[i];
    }
    report(mismatches == 0, "STE contract",
           fmt("%zu upstream gradient entries, %zu differ bitwise after the sign backward", total, mismatches));
}

double mean_abs(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += std::abs(v);
    return s / static_cast<double>(t.size());
}

PackedCodeSet local_codes(const ModelParams& p, const ImageSet& set, const Tensor& images) {
    return PackedCodeSet::from_continuous(encode_local_full(p, images), set.ids);
}

double mean_flip_hamming(const ModelParams& p, const ImageSet& set) {
    const PackedCodeSet a = local_codes(p, set, set.images), b = local_codes(p, set, apply_augment(set.images, Augment::FlipH));
    double total = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) total += hamming(a.code(i), b.code(i));
    return total / static_cast<double>(set.size());
}

/// Mean Hamming over all pairs of distinct images, and over pairs from distinct classes.
std::pair<double, double> mean_pairwise_hamming(const ModelParams& p, const ImageSet& set) {
    const PackedCodeSet c = local_codes(p, set, set.images);
    double all = 0.0, cross = 0.0;
    std::size_t n_all = 0, n_cross = 0;
    for (std::size_t i = 0; i < set.size(); ++i)
        for (std::size_t j = i + 1; j < set.size(); ++j) {
            const int d = hamming(c.code(i), c.code(j));
            all += d, ++n_all;
            if (set.labels[i] != set.labels[j]) cross += d, ++n_cross;
        }
    return {all / static_cast<double>(n_all), cross / static_cast<double>(n_cross)};
}

struct PipelineRun {
    std::filesystem::path dir, stage1, stage2, code_db, cache;
    double initial_loss = 0.0, final_loss = 0.0, stage1_seconds = 0.0;
};

/// gen-data -> train stage 1 -> train stage 2 -> encode -> index, all through the CLI.
PipelineRun run_pipeline(const std::filesystem::path& dir) {
    PipelineRun r;
    r.dir = dir;
    r.stage1 = dir / "stage1.ckpt";
    r.stage2 = dir / "stage2.ckpt";
    r.code_db = dir / "codes.db";
    r.cache = dir / "fmap_cache";
    const std::string data = (dir / "data").string(), seed = std::to_string(kSeed), bits = std::to_string(kBits);
    cli_run({"gen-data", "--out", data, "--seed", seed});
    const auto t0 = Clock::now();
    const auto s1 = cli_run({"train", "--stage", "1", "--bits", bits, "--train", data + "/train.jsonl", "--out",
                             r.stage1.string(), "--seed", seed, "--lr", kStage1Lr, "--log", (dir / "stage1.tsv").string()});
    r.stage1_seconds = seconds_since(t0);
    r.initial_loss = s1.at("initial_loss");
    const auto log = read_file(dir / "stage1.tsv");
    std::istringstream tsv(std::string(log.begin(), log.end()));
    for (std::string line; std::getline(tsv, line);) {
        // Columns: epoch, stage, contrast, quant, ce, consist, reg, val_mAP.
        std::istringstream cols(line);
        double e, st, c, q, ce;
        cols >> e >> st >> c >> q >> ce;
        r.final_loss = stage1_total(c, q, ce);
    }
    cli_run({"train", "--stage", "2", "--bits", bits, "--train", data + "/train.jsonl", "--init", r.stage1.string(),
             "--out", r.stage2.string(), "--seed", seed, "--lr", kStage2Lr});
    const std::vector<std::string> paths{"--checkpoint", r.stage2.string(), "--manifest", data + "/manifest.jsonl",
                                         "--code-db", r.code_db.string(), "--cache-dir", r.cache.string()};
    std::vector<std::string> encode{"encode"}, index{"index"};
    encode.insert(encode.end(), paths.begin(), paths.end());
    index.insert(index.end(), paths.begin(), paths.end());
    cli_run(encode);
    const auto encoded = read_file(r.code_db);
    cli_run(index);
    if (read_file(r.code_db) != encoded) throw std::runtime_error("index and encode wrote different code databases");
    return r;
}

void training_criteria(const PipelineRun& run) {
    const auto data = run.dir / "data";
    const ImageSet train = load_image_set(read_manifest(data / "train.jsonl"));
    const ImageSet test = load_image_set(read_manifest(data / "test.jsonl"));
    const ModelParams s1 = load_checkpoint(run.stage1);
    const ModelParams s2 = load_checkpoint(run.stage2);

    const double abs_u = mean_abs(encode_global_batched(s1, test.images));
    const double test_map = global_map(s1, test, train);
    report(run.final_loss < run.initial_loss && abs_u >= 0.9 && test_map >= 0.70 && run.stage1_seconds <= 1800.0,
           "Stage-1 training signal",
           fmt("loss %.4f -> %.4f, mean|u| %.4f (>= 0.9), test mAP %.4f (>= 0.70), %.0f s, lr %s", run.initial_loss,
               run.final_loss, abs_u, test_map, run.stage1_seconds, kStage1Lr));

    const ModelParams entering = calibrate_local_head(clone_expert0_to_expert1(s1), train);
    std::size_t frozen = 0, moved = 0;
    for (const auto& [name, t] : s1.tensors) {
        if (name.find("expert1") != std::string::npos || name.starts_with("kan_local.")) continue;
        ++frozen;
        moved += s2.tensors.at(name) != t;
    }
    const double flip_before = mean_flip_hamming(entering, test), flip_after = mean_flip_hamming(s2, test);
    const auto [pair_all, pair_cross] = mean_pairwise_hamming(s2, test);
    const double drop = flip_before > 0.0 ? 1.0 - flip_after / flip_before : 0.0;
    report(moved == 0 && drop >= 0.5 && pair_all >= 0.2 * kBits, "Stage-2 contracts",
           fmt("%zu/%zu frozen tensors changed; flip Hamming %.3f -> %.3f (drop %.1f%%, >= 50%%); pairwise Hamming "
               "%.3f over distinct images (>= %.1f), %.3f over distinct classes",
               moved, frozen, flip_before, flip_after, 100.0 * drop, pair_all, 0.2 * kBits, pair_cross));
}

void local_self_retrieval(const PipelineRun& run) {
    const auto data = run.dir / "data";
    const Manifest all = read_manifest(data / "manifest.jsonl");
    const Manifest test = read_manifest(data / "test.jsonl");
    ServiceConfig config;
    Service service(config, load_checkpoint(run.stage2));
    service.set_index(load_index(all, run.code_db, run.cache));
    std::size_t rank1 = 0, overlap = 0, missing = 0;
    const std::size_t queries = std::min<std::size_t>(50, test.entries.size());
    for (std::size_t q = 0; q < queries; ++q) {
        const ManifestEntry& e = test.entries[q];
        const RetrievalResult r = service.query_local({std::nullopt, e.id, e.box, std::nullopt, std::nullopt});
        const auto self = std::find_if(r.items.begin(), r.items.end(), [&](const RankedItem& i) { return i.id == e.id; });
        missing += self == r.items.end();
        rank1 += !r.items.empty() && r.items.front().id == e.id && r.items.front().distance == 0;
        overlap += !r.items.empty() && r.items.front().id == e.id && iou(r.items.front().match->box, *e.box) > 0.3;
    }
    report(rank1 >= 48 && overlap >= 40, "local self-retrieval",
           fmt("%zu/%zu at rank 1 with score 0 (>= 48), %zu/%zu with IoU > 0.3 (>= 40), %zu absent from the top n",
               rank1, queries, overlap, queries, missing));
}

} // namespace

int main() {
    const char* keep = std::getenv("HMAR_ACCEPTANCE_KEEP");
    const auto work = std::filesystem::temp_directory_path() / ("hmar-acceptance-" + std::to_string(::getpid()));
    std::filesystem::create_directories(work);

    report(true, "non-reproduction",
           "the published benchmark mAP (0.711 at 64 bits, 0.724 at 128 bits on a CT collection) is not reproduced; "
           "there is no dataset and no large-scale training here, so the criteria below are oracle and property checks");
    gradient_suite_check();
    hamming_oracle();
    index_oracle();
    window_oracle();
    map_oracle();
    ste_contract();

    try {
        const PipelineRun first = run_pipeline(work / "run1");
        training_criteria(first);
        local_self_retrieval(first);
        const PipelineRun second = run_pipeline(work / "run2");
        const bool same = read_file(first.code_db) == read_file(second.code_db);
        report(same, "determinism",
               fmt("two pipeline runs with seed %llu: code databases %s (%zu bytes)",
                   static_cast<unsigned long long>(kSeed), same ? "byte-identical" : "differ",
                   read_file(first.code_db).size()));
    } catch (const std::exception& e) {
        report(false, "pipeline", e.what());
    }

    if (!keep) std::filesystem::remove_all(work);
    std::printf("%s: %d failing criteria\n", failures == 0 ? "ACCEPTED" : "NOT ACCEPTED", failures);
    return failures == 0 ? 0 : 1;
}
