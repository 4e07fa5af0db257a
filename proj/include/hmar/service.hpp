#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmar/dataset.hpp"
#include "hmar/model.hpp"
#include "hmar/retrieval.hpp"

namespace hmar {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path checkpoint;
    std::filesystem::path code_db = "codes.db";
    std::filesystem::path manifest;
    std::filesystem::path cache_dir = "fmap_cache";
    std::size_t top_k_global = 50;
    std::size_t top_n_local = 10;
    double alpha = 0.0;

    void validate() const;
};

/// Feature-map cache file: "HMARFMAP", u32 rank, rank x u32 dims, fp32 values.
void write_feature_map(const std::filesystem::path& path, const Tensor& fmap);
Tensor read_feature_map(const std::filesystem::path& path);
std::filesystem::path feature_map_path(const std::filesystem::path& cache_dir, std::uint64_t id);

/// Extracts local feature maps [N,C,h,w] and rounds them to fp32, the precision they are cached in.
Tensor extract_cached_maps(const ModelParams& params, const Tensor& images, double alpha, std::size_t batch_size = 64);

/// Everything a query needs; immutable once built.
struct Index {
    Manifest manifest;
    PackedCodeSet codes;
    std::map<std::uint64_t, Tensor> fmaps; // id -> [1,C,h,w]
    std::map<std::uint64_t, std::size_t> entry_of; // id -> manifest entry

    std::size_t size() const { return codes.size(); }
};

/// Global codes and local maps for every manifest entry. Writes the code database and one
/// cached map per image when the paths are non-empty.
std::shared_ptr<const Index> build_index(const Manifest& manifest, const ModelParams& params, double alpha,
                                         const std::filesystem::path& code_db, const std::filesystem::path& cache_dir,
                                         std::size_t batch_size = 64);

/// Reads a code database and its cached maps instead of recomputing them.
std::shared_ptr<const Index> load_index(const Manifest& manifest, const std::filesystem::path& code_db,
                                        const std::filesystem::path& cache_dir);

/// Error carrying an HTTP status.
class RequestError : public std::runtime_error {
public:
    RequestError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

struct QueryRequest {
    std::optional<std::string> image_b64;
    std::optional<std::uint64_t> image_id;
    std::optional<BoundingBox> bbox;
    std::optional<std::size_t> k;
    std::optional<std::size_t> n;
};

struct HttpReply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

std::vector<std::uint8_t> base64_decode(const std::string& text);
std::string base64_encode(const std::vector<std::uint8_t>& bytes);

/// Query logic behind the HTTP API. Requests may run concurrently; index swaps are atomic.
class Service {
public:
    Service(ServiceConfig config, ModelParams params);

    const ServiceConfig& config() const { return config_; }
    const ModelParams& params() const { return params_; }

    /// Builds an index from a manifest file and swaps it in; returns its size.
    std::size_t build(const std::filesystem::path& manifest_path);
    void set_index(std::shared_ptr<const Index> index);
    std::shared_ptr<const Index> index() const;

    RetrievalResult query_global(const QueryRequest& req) const;
    RetrievalResult query_local(const QueryRequest& req) const;

    /// Routes one request; never throws.
    HttpReply handle(const std::string& method, const std::string& path, const std::string& body);

private:
    std::shared_ptr<const Index> require_index() const;
    Tensor query_image(const Index& index, const QueryRequest& req) const;
    RetrievalResult run_global(const Index& index, const QueryRequest& req) const;
    RetrievalResult run_local(const Index& index, const QueryRequest& req) const;

    ServiceConfig config_;
    ModelParams params_;
    mutable std::mutex index_mutex_;
    std::shared_ptr<const Index> index_;
    std::mutex build_mutex_;
};

/// Parses a request body of /query/global or /query/local.
QueryRequest parse_query(const std::string& body);

/// HTTP front end over a Service.
class HttpServer {
public:
    explicit HttpServer(Service& service);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Binds `host:port`; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop() is called from another thread.
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace hmar
