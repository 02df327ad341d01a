#pragma once

#include <stdexcept>
#include <string>
#include <thread>

#include "httplib.h"

// Local search service on an ephemeral port; register handlers on `server`
// before start().
struct StubServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    if (port <= 0) throw std::runtime_error("stub server: cannot bind a local port");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~StubServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};
