#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "hmar/dataset.hpp"
#include "hmar/errors.hpp"
#include "hmar/kan.hpp"
#include "hmar/service.hpp"
#include "support.hpp"

using namespace hmar;
using hmar::testing::TempDir;
using nlohmann::json;

namespace {

ModelConfig small_model(std::size_t bits = 32) {
    ModelConfig c;
    c.backbone.input_size = 32;
    c.backbone.shallow_channels = 8;
    c.backbone.deep_channels = 8;
    c.backbone.num_classes = 4;
    c.bits = bits;
    return c;
}

SyntheticSpec small_spec(std::size_t per_class) {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.images_per_class = per_class;
    spec.image_size = 32;
    spec.min_motif = 8;
    spec.max_motif = 14;
    return spec;
}

struct Fixture {
    TempDir dir{"service"};
    Manifest manifest;
    std::filesystem::path manifest_path;
    ModelParams params;

    explicit Fixture(std::size_t per_class = 3, std::uint64_t seed = 21) {
        manifest = generate(small_spec(per_class), seed, dir.path() / "data");
        manifest_path = dir.path() / "data" / "manifest.jsonl";
        params = ModelParams::init(small_model(), 5);
    }

    ServiceConfig config() const {
        ServiceConfig c;
        c.code_db = dir.path() / "codes.db";
        c.cache_dir = dir.path() / "cache";
        c.top_k_global = 8;
        c.top_n_local = 4;
        return c;
    }
};

json post(Service& s, const std::string& path, const json& body, int expected = 200) {
    const HttpReply r = s.handle("POST", path, body.dump());
    CHECK_MESSAGE(r.status == expected, r.body);
    return json::parse(r.body);
}

std::uint64_t code_checksum(const PackedCodeSet& codes) {
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < codes.words().size(); ++i) sum += codes.words()[i] * (i + 1);
    return sum;
}

// Captured from the reference run: 100 generated images (seed 21), ModelParams::init(small_model(), 5).
// Checksum is sum of word[i] * (i + 1); ranking is the top 5 for image 17.
constexpr std::uint64_t kGoldenCodeChecksum = 10818356475566ULL;
const std::vector<std::uint64_t> kGoldenRanking = {17, 5, 7, 11, 16};
const std::vector<int> kGoldenDistances = {0, 2, 2, 2, 2};

} // namespace

TEST_CASE("base64 matches the standard alphabet and padding") {
    auto bytes = [](const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); };
    CHECK(base64_encode(bytes("")) == "");
    CHECK(base64_encode(bytes("M")) == "TQ==");
    CHECK(base64_encode(bytes("Ma")) == "TWE=");
    CHECK(base64_encode(bytes("Man")) == "TWFu");
    CHECK(base64_encode(bytes("hello world")) == "aGVsbG8gd29ybGQ=");
    CHECK(base64_decode("TQ==") == bytes("M"));
    CHECK(base64_decode("TWE=") == bytes("Ma"));
    CHECK(base64_decode("aGVs\nbG8gd29ybGQ=") == bytes("hello world"));
    std::vector<std::uint8_t> all(256);
    for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
    CHECK(base64_decode(base64_encode(all)) == all);
    for (const char* bad : {"TQ=", "T*==", "=TQA", "TQ=A"}) {
        try {
            base64_decode(bad);
            FAIL("accepted " << bad);
        } catch (const RequestError& e) {
            CHECK(e.status() == 400);
        }
    }
}

TEST_CASE("parse_query accepts the documented fields and rejects the rest") {
    const QueryRequest r = parse_query(R"({"image_id": 7, "bbox": [1, 2, 10, 12], "k": 5, "n": 3})");
    CHECK(r.image_id == 7u);
    CHECK_FALSE(r.image_b64);
    CHECK(*r.bbox == BoundingBox{1, 2, 10, 12});
    CHECK(r.k == 5u);
    CHECK(r.n == 3u);
    CHECK(parse_query(R"({"image_b64": "TQ=="})").image_b64 == "TQ==");
    for (const char* bad : {"", "[1]", "{}", R"({"image_id": 1, "image_b64": "TQ=="})", R"({"image_id": -1})",
                            R"({"image_id": 1, "bbox": [1, 2, 3]})", R"({"image_id": 1, "bbox": [1, 2, 3, "4"]})",
                            R"({"image_id": 1, "k": 0})", R"({"image_id": 1, "n": 1.5})"}) {
        try {
            parse_query(bad);
            FAIL("accepted " << bad);
        } catch (const RequestError& e) {
            CHECK(e.status() == 400);
        }
    }
}

TEST_CASE("service config invariants") {
    ServiceConfig c;
    CHECK_NOTHROW(c.validate());
    c.top_n_local = 51;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c.top_n_local = 10;
    c.alpha = 1.5;
    CHECK_THROWS_AS(c.validate(), DomainError);
}

TEST_CASE("feature map files round trip at fp32") {
    TempDir dir("fmap");
    std::mt19937_64 rng(3);
    Tensor t = hmar::testing::random_tensor({1, 3, 4, 5}, rng);
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
    const auto path = feature_map_path(dir.path(), 42);
    CHECK(path.filename() == "42.fmap");
    write_feature_map(path, t);
    CHECK(read_feature_map(path) == t);
    auto bytes = read_file(path);
    bytes.pop_back();
    write_file(path, bytes);
    CHECK_THROWS_AS(read_feature_map(path), FormatError);
    bytes[0] = 'X';
    write_file(path, bytes);
    CHECK_THROWS_AS(read_feature_map(path), FormatError);
}

TEST_CASE("queries before indexing are unavailable") {
    Fixture f(1);
    Service s(f.config(), f.params);
    const HttpReply health = s.handle("GET", "/health", "");
    CHECK(health.status == 200);
    const json h = json::parse(health.body);
    CHECK(h["status"] == "no_index");
    CHECK(h["bits"] == 32);
    CHECK(h["index_size"] == 0);
    post(s, "/query/global", {{"image_id", 0}}, 503);
    post(s, "/query/local", {{"image_id", 0}, {"bbox", {0, 0, 8, 8}}}, 503);
    CHECK(s.handle("GET", "/image/0", "").status == 503);
    CHECK(s.handle("GET", "/nowhere", "").status == 404);
    CHECK(s.handle("GET", "/query/global", "").status == 405);
}

TEST_CASE("empty manifest gives an empty index") {
    Fixture f(1);
    const auto index = build_index(Manifest{}, f.params, 0.0, f.dir.path() / "empty.db", f.dir.path() / "empty");
    CHECK(index->size() == 0);
    CHECK(read_code_db(f.dir.path() / "empty.db").empty());
    Service s(f.config(), f.params);
    s.set_index(index);
    const json r = post(s, "/query/local",
                        {{"image_b64", base64_encode(read_file(f.manifest.resolve(f.manifest.entries[0])))},
                         {"bbox", {0, 0, 32, 32}}});
    CHECK(r["results"].empty());
}

TEST_CASE("index build, self queries and error statuses") {
    Fixture f;
    Service s(f.config(), f.params);
    CHECK(post(s, "/index", {{"manifest_path", f.manifest_path.string()}})["count"] == 12);
    CHECK(json::parse(s.handle("GET", "/health", "").body)["index_size"] == 12);

    SUBCASE("global self query returns the image at distance 0") {
        for (const auto& e : f.manifest.entries) {
            const json r = post(s, "/query/global", {{"image_id", e.id}});
            REQUIRE(r["results"].size() == 8);
            const json& top = r["results"][0];
            CHECK(top["distance"] == 0);
            const auto& results = r["results"];
            const auto self = std::find_if(results.begin(), results.end(), [&](const json& x) { return x["id"] == e.id; });
            REQUIRE(self != results.end());
            CHECK((*self)["distance"] == 0);
            CHECK((*self)["path"] == f.manifest.resolve(e).string());
        }
        const json one = post(s, "/query/global", {{"image_id", 3}, {"k", 1}});
        CHECK(one["results"].size() == 1);
        const json inline_img =
            post(s, "/query/global", {{"image_b64", base64_encode(read_file(f.manifest.resolve(f.manifest.entries[3])))}});
        CHECK(inline_img == post(s, "/query/global", {{"image_id", 3}}));
    }

    SUBCASE("local self query with the motif box") {
        for (const auto& e : f.manifest.entries) {
            const BoundingBox b = *e.box;
            const json r = post(s, "/query/local", {{"image_id", e.id}, {"bbox", {b.x1, b.y1, b.x2, b.y2}}});
            REQUIRE(r["results"].size() == 4);
            CHECK(r["results"][0]["distance"] == 0);
            bool self_zero = false;
            for (const auto& item : r["results"]) {
                const auto w = item["window"].get<std::vector<int>>();
                CHECK(w[0] >= 0);
                CHECK(w[1] >= 0);
                CHECK(w[2] <= 32);
                CHECK(w[3] <= 32);
                CHECK(w[2] - w[0] == b.width());
                CHECK(w[3] - w[1] == b.height());
                if (item["id"] == e.id) {
                    self_zero = item["distance"] == 0;
                    CHECK(iou(BoundingBox{w[0], w[1], w[2], w[3]}, b) > 0.3);
                }
            }
            CHECK(self_zero);
        }
    }

    SUBCASE("n larger than k is clamped to k") {
        const json r = post(s, "/query/local", {{"image_id", 0}, {"bbox", {0, 0, 16, 16}}, {"k", 3}, {"n", 9}});
        CHECK(r["results"].size() == 3);
    }

    SUBCASE("full-image box scores candidates by their full-map window") {
        const QueryRequest req{std::nullopt, 5, BoundingBox{0, 0, 32, 32}, 12, 12};
        const RetrievalResult r = s.query_local(req);
        REQUIRE(r.items.size() == 12);
        const auto index = s.index();
        const Tensor query_map = index->fmaps.at(5);
        const Window full{0, 8, 0, 8};
        const auto qsigns = binarize(encode_local_windows(f.params, query_map, {full}).data());
        for (const auto& item : r.items) {
            CHECK(item.match->box == BoundingBox{0, 0, 32, 32});
            const auto csigns = binarize(encode_local_windows(f.params, index->fmaps.at(item.id), {full}).data());
            CHECK(item.distance == hamming(pack_code(qsigns), pack_code(csigns)));
        }
    }

    SUBCASE("error statuses") {
        const json bad_box = post(s, "/query/local", {{"image_id", 0}, {"bbox", {4, 4, 40, 20}}}, 400);
        CHECK(bad_box["error"].get<std::string>().find("32") != std::string::npos);
        post(s, "/query/local", {{"image_id", 0}}, 400);
        post(s, "/query/global", {{"image_id", 999}}, 404);
        post(s, "/query/global", {{"image_b64", "aGVsbG8gd29ybGQ="}}, 400);
        post(s, "/query/global", {{"image_b64", "@@@@"}}, 400);
        CHECK(s.handle("POST", "/query/global", "{not json").status == 400);
        post(s, "/index", {{"manifest_path", (f.dir.path() / "missing.jsonl").string()}}, 404);
        post(s, "/index", {{"path", "x"}}, 400);
        CHECK(s.handle("GET", "/image/999", "").status == 404);
        CHECK(s.handle("GET", "/image/99999999999999999999999", "").status == 404);
    }

    SUBCASE("GET /image returns the stored PNG") {
        const HttpReply r = s.handle("GET", "/image/4", "");
        CHECK(r.status == 200);
        CHECK(r.content_type == "image/png");
        const auto expected = read_file(f.manifest.resolve(f.manifest.entries[4]));
        CHECK(r.body == std::string(expected.begin(), expected.end()));
    }

    SUBCASE("responses are deterministic") {
        const json req = {{"image_id", 2}, {"bbox", {3, 5, 20, 25}}};
        const HttpReply a = s.handle("POST", "/query/local", req.dump());
        const HttpReply b = s.handle("POST", "/query/local", req.dump());
        CHECK(a.body == b.body);
    }
}

TEST_CASE("rebuild is byte-identical and the cache reloads exactly") {
    Fixture f;
    ServiceConfig c = f.config();
    const auto built = build_index(f.manifest, f.params, 0.0, c.code_db, c.cache_dir);
    const auto first = read_file(c.code_db);
    build_index(f.manifest, f.params, 0.0, c.code_db, c.cache_dir);
    CHECK(read_file(c.code_db) == first);
    const auto loaded = load_index(f.manifest, c.code_db, c.cache_dir);
    CHECK(loaded->codes == built->codes);
    CHECK(loaded->fmaps == built->fmaps);
    CHECK(loaded->entry_of == built->entry_of);
}

TEST_CASE("100-image build matches the reference checksum and ranking") {
    Fixture f(25);
    const auto index = build_index(f.manifest, f.params, 0.0, {}, {});
    REQUIRE(index->size() == 100);
    Service s(f.config(), f.params);
    s.set_index(index);
    const RetrievalResult r = s.query_global(QueryRequest{std::nullopt, 17, std::nullopt, 5, std::nullopt});
    std::vector<std::uint64_t> ids;
    std::vector<int> dists;
    for (const auto& item : r.items) {
        ids.push_back(item.id);
        dists.push_back(item.distance);
    }
    CHECK(code_checksum(index->codes) == kGoldenCodeChecksum);
    CHECK(ids == kGoldenRanking);
    CHECK(dists == kGoldenDistances);
}

TEST_CASE("index swaps are atomic under concurrent queries") {
    Fixture f(2);
    Service s(f.config(), f.params);
    s.build(f.manifest_path);
    std::atomic<bool> done{false};
    std::atomic<int> failures{0};
    std::vector<std::thread> readers;
    for (int t = 0; t < 3; ++t)
        readers.emplace_back([&] {
            while (!done) {
                const HttpReply r = s.handle("POST", "/query/global", R"({"image_id": 1})");
                const json j = json::parse(r.body);
                if (r.status != 200 || j["results"].size() != 8) ++failures;
            }
        });
    for (int i = 0; i < 3; ++i) s.build(f.manifest_path);
    done = true;
    for (auto& t : readers) t.join();
    CHECK(failures == 0);
}

TEST_CASE("HTTP loopback smoke test") {
    Fixture f(1);
    Service s(f.config(), f.params);
    HttpServer server(s);
    const int port = server.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    std::thread th([&] { server.listen(); });
    httplib::Client client("127.0.0.1", port);
    auto health = client.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    auto index = client.Post("/index", json{{"manifest_path", f.manifest_path.string()}}.dump(), "application/json");
    REQUIRE(index);
    CHECK(json::parse(index->body)["count"] == 4);
    auto query = client.Post("/query/global", R"({"image_id": 0, "k": 2})", "application/json");
    REQUIRE(query);
    CHECK(query->status == 200);
    CHECK(json::parse(query->body)["results"].size() == 2);
    auto image = client.Get("/image/0");
    REQUIRE(image);
    CHECK(image->get_header_value("Content-Type") == "image/png");
    auto missing = client.Get("/image/77");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    server.stop();
    th.join();
}
