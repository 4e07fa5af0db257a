#include <httplib.h>

#include "hmar/service.hpp"

namespace hmar {

struct HttpServer::Impl {
    explicit Impl(Service& s) : service(s) {}
    Service& service;
    httplib::Server server;
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
        const HttpReply reply = impl_->service.handle(req.method, req.path, req.body);
        res.status = reply.status;
        res.set_content(reply.body, reply.content_type.c_str());
    };
    impl_->server.Get(".*", route);
    impl_->server.Post(".*", route);
    impl_->server.Put(".*", route);
    impl_->server.Delete(".*", route);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::listen() {
    if (!impl_->server.listen_after_bind()) throw std::runtime_error("HTTP server stopped with an error");
}

void HttpServer::stop() { impl_->server.stop(); }

} // namespace hmar
