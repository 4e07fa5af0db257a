#include "hmar/service.hpp"

#include <algorithm>
#include <cctype>
#include <regex>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/dataflow_exception.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <json.hpp>

#include "hmar/errors.hpp"
#include "hmar/io.hpp"
#include "hmar/kan.hpp"
#include "hmar/trainer.hpp"

namespace hmar {

namespace {

constexpr std::string_view kFmapMagic = "HMARFMAP";

using Json = nlohmann::ordered_json;

HttpReply json_reply(int status, const Json& body) { return {status, "application/json", body.dump()}; }

HttpReply error_reply(int status, const std::string& message) { return json_reply(status, {{"error", message}}); }

Json box_json(const BoundingBox& b) { return Json::array({b.x1, b.y1, b.x2, b.y2}); }

std::size_t positive_field(const nlohmann::json& j, const char* key) {
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 1)
        throw RequestError(400, std::string("'") + key + "' must be a positive integer");
    return v.get<std::size_t>();
}

Tensor single_map(const Tensor& maps, std::size_t row) {
    Shape shape = maps.shape();
    const std::size_t per = maps.size() / shape[0];
    shape[0] = 1;
    const auto src = maps.data().subspan(row * per, per);
    return Tensor(std::move(shape), std::vector<double>(src.begin(), src.end()));
}

std::vector<std::uint64_t> global_code(const ModelParams& params, const Tensor& image) {
    const Tensor codes = encode_global(params, image);
    return pack_code(binarize(codes.data()));
}

} // namespace

void ServiceConfig::validate() const {
    if (port < 0 || port > 65535) throw DomainError("port must be in [0, 65535], got " + std::to_string(port));
    if (top_k_global == 0) throw DomainError("top_k_global must be at least 1");
    if (top_n_local == 0) throw DomainError("top_n_local must be at least 1");
    if (top_n_local > top_k_global)
        throw DomainError("top_n_local (" + std::to_string(top_n_local) + ") exceeds top_k_global (" +
                          std::to_string(top_k_global) + ")");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("alpha must be in [0, 1]");
}

void write_feature_map(const std::filesystem::path& path, const Tensor& fmap) {
    ByteWriter w;
    w.put_bytes(kFmapMagic);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(fmap.rank()));
    for (std::size_t d : fmap.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : fmap.data()) w.put_f32(static_cast<float>(v));
    write_file(path, w.bytes());
}

Tensor read_feature_map(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    if (r.get_string(kFmapMagic.size()) != kFmapMagic) r.fail("bad magic (expected HMARFMAP)");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const std::size_t size = shape_size(shape);
    if (size != r.remaining() / 4 || r.remaining() % 4 != 0) r.fail("payload does not match shape " + shape_string(shape));
    std::vector<double> data(size);
    for (auto& v : data) v = static_cast<double>(r.get_f32());
    return Tensor(std::move(shape), std::move(data));
}

std::filesystem::path feature_map_path(const std::filesystem::path& cache_dir, std::uint64_t id) {
    return cache_dir / (std::to_string(id) + ".fmap");
}

Tensor extract_cached_maps(const ModelParams& params, const Tensor& images, double alpha, std::size_t batch_size) {
    if (batch_size == 0) throw DomainError("extract_cached_maps: batch_size must be at least 1");
    const std::size_t n = images.dim(0), per = images.size() / n;
    std::vector<double> out;
    Shape shape;
    for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
        const std::size_t b1 = std::min(n, b0 + batch_size);
        Shape in_shape = images.shape();
        in_shape[0] = b1 - b0;
        const auto src = images.data().subspan(b0 * per, (b1 - b0) * per);
        const Tensor maps =
            extract_local_feature_map(params, Tensor(std::move(in_shape), std::vector<double>(src.begin(), src.end())), alpha);
        shape = maps.shape();
        out.insert(out.end(), maps.data().begin(), maps.data().end());
    }
    for (double& v : out) v = static_cast<double>(static_cast<float>(v));
    shape[0] = n;
    return Tensor(std::move(shape), std::move(out));
}

std::shared_ptr<const Index> build_index(const Manifest& manifest, const ModelParams& params, double alpha,
                                         const std::filesystem::path& code_db, const std::filesystem::path& cache_dir,
                                         std::size_t batch_size) {
    auto index = std::make_shared<Index>();
    index->manifest = manifest;
    index->codes = PackedCodeSet(params.config.bits);
    for (std::size_t e = 0; e < manifest.entries.size(); ++e)
        if (!index->entry_of.emplace(manifest.entries[e].id, e).second)
            throw FormatError("manifest: duplicate id " + std::to_string(manifest.entries[e].id));
    if (!manifest.entries.empty()) {
        const ImageSet set = load_image_set(manifest);
        index->codes = PackedCodeSet::from_continuous(encode_global_batched(params, set.images, batch_size), set.ids);
        const Tensor maps = extract_cached_maps(params, set.images, alpha, batch_size);
        for (std::size_t i = 0; i < set.size(); ++i) index->fmaps.emplace(set.ids[i], single_map(maps, i));
    }
    if (!code_db.empty()) write_code_db(code_db, index->codes);
    if (!cache_dir.empty())
        for (const auto& [id, fmap] : index->fmaps) write_feature_map(feature_map_path(cache_dir, id), fmap);
    return index;
}

std::shared_ptr<const Index> load_index(const Manifest& manifest, const std::filesystem::path& code_db,
                                        const std::filesystem::path& cache_dir) {
    auto index = std::make_shared<Index>();
    index->manifest = manifest;
    index->codes = read_code_db(code_db);
    for (std::size_t e = 0; e < manifest.entries.size(); ++e) index->entry_of.emplace(manifest.entries[e].id, e);
    for (std::uint64_t id : index->codes.ids()) {
        if (!index->entry_of.count(id))
            throw FormatError(code_db.string() + ": id " + std::to_string(id) + " is not in the manifest");
        index->fmaps.emplace(id, read_feature_map(feature_map_path(cache_dir, id)));
    }
    return index;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    using namespace boost::archive::iterators;
    using Decoder = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
    std::string clean;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
    if (clean.size() % 4 != 0) throw RequestError(400, "base64 length is not a multiple of 4");
    std::size_t pad = 0;
    while (pad < 2 && !clean.empty() && clean[clean.size() - 1 - pad] == '=') ++pad;
    if (clean.find('=') < clean.size() - pad) throw RequestError(400, "misplaced base64 padding");
    std::replace(clean.end() - static_cast<std::ptrdiff_t>(pad), clean.end(), '=', 'A');
    std::vector<std::uint8_t> out;
    try {
        out.assign(Decoder(clean.cbegin()), Decoder(clean.cend()));
    } catch (const dataflow_exception&) {
        throw RequestError(400, "invalid base64 character");
    }
    out.resize(out.size() - pad);
    return out;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    using namespace boost::archive::iterators;
    using Encoder = base64_from_binary<transform_width<std::vector<std::uint8_t>::const_iterator, 6, 8>>;
    std::string out(Encoder(bytes.cbegin()), Encoder(bytes.cend()));
    out.append((3 - bytes.size() % 3) % 3, '=');
    return out;
}

QueryRequest parse_query(const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw RequestError(400, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw RequestError(400, "request body must be a JSON object");
    QueryRequest req;
    if (j.contains("image_b64")) {
        if (!j["image_b64"].is_string()) throw RequestError(400, "'image_b64' must be a string");
        req.image_b64 = j["image_b64"].get<std::string>();
    }
    if (j.contains("image_id")) {
        const auto& v = j["image_id"];
        if (!v.is_number_unsigned()) throw RequestError(400, "'image_id' must be a non-negative integer");
        req.image_id = v.get<std::uint64_t>();
    }
    if (req.image_b64.has_value() == req.image_id.has_value())
        throw RequestError(400, "exactly one of 'image_b64' and 'image_id' is required");
    if (j.contains("bbox")) {
        const auto& b = j["bbox"];
        if (!b.is_array() || b.size() != 4 || !std::all_of(b.begin(), b.end(), [](const auto& v) { return v.is_number_integer(); }))
            throw RequestError(400, "'bbox' must be [x1,y1,x2,y2] integers");
        req.bbox = BoundingBox{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
    }
    if (j.contains("k")) req.k = positive_field(j, "k");
    if (j.contains("n")) req.n = positive_field(j, "n");
    return req;
}

Service::Service(ServiceConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
}

std::size_t Service::build(const std::filesystem::path& manifest_path) {
    std::lock_guard build_lock(build_mutex_);
    auto index = build_index(read_manifest(manifest_path), params_, config_.alpha, config_.code_db, config_.cache_dir);
    const std::size_t size = index->size();
    set_index(std::move(index));
    return size;
}

void Service::set_index(std::shared_ptr<const Index> index) {
    std::lock_guard lock(index_mutex_);
    index_ = std::move(index);
}

std::shared_ptr<const Index> Service::index() const {
    std::lock_guard lock(index_mutex_);
    return index_;
}

std::shared_ptr<const Index> Service::require_index() const {
    auto index = this->index();
    if (!index) throw RequestError(503, "no index loaded; POST /index first");
    return index;
}

Tensor Service::query_image(const Index& index, const QueryRequest& req) const {
    Tensor image;
    if (req.image_id) {
        const auto it = index.entry_of.find(*req.image_id);
        if (it == index.entry_of.end()) throw RequestError(404, "unknown image id " + std::to_string(*req.image_id));
        image = load_image(index.manifest.resolve(index.manifest.entries[it->second]));
    } else if (req.image_b64) {
        try {
            image = decode_png(base64_decode(*req.image_b64));
        } catch (const FormatError& e) {
            throw RequestError(400, std::string("malformed image: ") + e.what());
        }
    } else {
        throw RequestError(400, "request has no image");
    }
    const std::size_t size = params_.config.backbone.input_size;
    if (image.dim(0) != params_.config.backbone.in_channels || image.dim(1) != size || image.dim(2) != size)
        throw RequestError(400, "image has shape " + shape_string(image.shape()) + ", expected [" +
                                    std::to_string(params_.config.backbone.in_channels) + "," + std::to_string(size) +
                                    "," + std::to_string(size) + "]");
    return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

RetrievalResult Service::query_global(const QueryRequest& req) const { return run_global(*require_index(), req); }

RetrievalResult Service::query_local(const QueryRequest& req) const { return run_local(*require_index(), req); }

RetrievalResult Service::run_global(const Index& index, const QueryRequest& req) const {
    const Tensor image = query_image(index, req);
    if (index.codes.empty()) return {};
    return top_k_global(global_code(params_, image), index.codes, req.k.value_or(config_.top_k_global));
}

RetrievalResult Service::run_local(const Index& index, const QueryRequest& req) const {
    if (!req.bbox) throw RequestError(400, "local query requires 'bbox'");
    const Tensor image = query_image(index, req);
    try {
        req.bbox->validate(static_cast<int>(image.dim(3)), static_cast<int>(image.dim(2)));
    } catch (const DomainError& e) {
        throw RequestError(400, e.what());
    }
    if (index.codes.empty()) return {};

    const std::size_t k = req.k.value_or(config_.top_k_global);
    const std::size_t n = std::min(req.n.value_or(config_.top_n_local), k);
    const RetrievalResult candidates = top_k_global(global_code(params_, image), index.codes, k);

    const Tensor fmap = single_map(extract_cached_maps(params_, image, config_.alpha), 0);
    const std::size_t h = fmap.dim(2), w = fmap.dim(3);
    const Window qw = map_box_to_feature(*req.bbox);
    const Tensor qcode = encode_local_windows(params_, fmap, {qw});
    const LocalQuery query = make_local_query(qcode.vector(), *req.bbox, h, w);

    std::vector<std::uint64_t> ids;
    for (const auto& item : candidates.items) ids.push_back(item.id);
    return local_rerank(query, ids, n, [&](const LocalQuery& q, std::uint64_t id) {
        const Tensor& cand = index.fmaps.at(id);
        return sliding_window_match(
            q, h, w, [&](const std::vector<Window>& windows) { return encode_local_windows(params_, cand, windows); }, id);
    });
}

HttpReply Service::handle(const std::string& method, const std::string& path, const std::string& body) {
    try {
        static const std::regex image_route("^/image/([0-9]+)$");
        std::smatch m;
        if (path == "/health") {
            if (method != "GET") return error_reply(405, "use GET for /health");
            const auto index = this->index();
            return json_reply(200, {{"status", index ? "ready" : "no_index"},
                                    {"bits", params_.config.bits},
                                    {"index_size", index ? index->size() : 0}});
        }
        if (path == "/index") {
            if (method != "POST") return error_reply(405, "use POST for /index");
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(body);
            } catch (const nlohmann::json::parse_error& e) {
                throw RequestError(400, std::string("malformed JSON: ") + e.what());
            }
            if (!j.is_object() || !j.contains("manifest_path") || !j["manifest_path"].is_string())
                throw RequestError(400, "'manifest_path' string is required");
            const std::filesystem::path manifest = j["manifest_path"].get<std::string>();
            if (!std::filesystem::exists(manifest)) throw RequestError(404, "manifest not found: " + manifest.string());
            std::size_t count = 0;
            try {
                count = build(manifest);
            } catch (const FormatError& e) {
                throw RequestError(400, e.what());
            }
            return json_reply(200, {{"count", count}});
        }
        if (path == "/query/global" || path == "/query/local") {
            if (method != "POST") return error_reply(405, "use POST for " + path);
            const QueryRequest req = parse_query(body);
            const bool local = path == "/query/local";
            const auto index = require_index();
            const RetrievalResult result = local ? run_local(*index, req) : run_global(*index, req);
            Json items = Json::array();
            for (const auto& item : result.items) {
                const auto& entry = index->manifest.entries[index->entry_of.at(item.id)];
                Json row = {{"id", item.id}, {"distance", item.distance}};
                if (local) row["window"] = box_json(item.match->box);
                row["path"] = index->manifest.resolve(entry).string();
                items.push_back(std::move(row));
            }
            return json_reply(200, {{"results", std::move(items)}});
        }
        if (std::regex_match(path, m, image_route)) {
            if (method != "GET") return error_reply(405, "use GET for /image/{id}");
            const auto index = require_index();
            const auto it = m[1].length() > 19 ? index->entry_of.end() : index->entry_of.find(std::stoull(m[1].str()));
            if (it == index->entry_of.end()) throw RequestError(404, "unknown image id " + m[1].str());
            const auto file = index->manifest.resolve(index->manifest.entries[it->second]);
            if (!std::filesystem::exists(file)) throw RequestError(404, "image file missing: " + file.string());
            const auto bytes = read_file(file);
            return {200, "image/png", std::string(bytes.begin(), bytes.end())};
        }
        return error_reply(404, "no route for " + method + " " + path);
    } catch (const RequestError& e) {
        return error_reply(e.status(), e.what());
    } catch (const std::exception& e) {
        return error_reply(500, e.what());
    }
}

} // namespace hmar
