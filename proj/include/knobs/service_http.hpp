#pragma once

#include <string>

#include "httplib.h"
#include "knobs/service.hpp"

namespace knobs {

inline void install_routes(httplib::Server& server, const EngineSnapshot& snapshot) {
  const auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  const auto get = [&snapshot, reply](const std::string& path) {
    return [&snapshot, reply, path](const httplib::Request& req, httplib::Response& res) {
      QueryParams q;
      for (const auto& [k, v] : req.params) q.emplace(k, v);
      reply(res, dispatch(snapshot, "GET", path, q, ""));
    };
  };
  const auto post = [&snapshot, reply](const std::string& path) {
    return [&snapshot, reply, path](const httplib::Request& req, httplib::Response& res) {
      reply(res, dispatch(snapshot, "POST", path, {}, req.body));
    };
  };
  // httplib defaults to SO_REUSEPORT, which would let a second server share a
  // busy port silently.
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  for (const char* path : {"/health", "/knobs", "/tags", "/items"}) server.Get(path, get(path));
  for (const char* path : {"/recommend", "/encode"}) server.Post(path, post(path));
  // The control panel may be served from another origin.
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

// Blocks until the server stops. Fails if the address cannot be bound.
inline void serve(const EngineSnapshot& snapshot, const std::string& host, int port) {
  httplib::Server server;
  install_routes(server, snapshot);
  if (!server.bind_to_port(host, port))
    throw Error(ErrorCode::config, "cannot bind " + host + ":" + std::to_string(port));
  server.listen_after_bind();
}

}  // namespace knobs
