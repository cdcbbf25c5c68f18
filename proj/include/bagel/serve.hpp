#pragma once

#include <filesystem>
#include <string>

#include "httplib.h"

#include "bagel/error.hpp"

namespace bagel::run {

/// Static file server over a run directory; the explorer UI fetches
/// graph.json and dynamics.json from it. No dynamic endpoints.
inline void configure_static_server(httplib::Server& server, const std::filesystem::path& run_dir) {
  if (!std::filesystem::is_directory(run_dir))
    throw InvalidArgument("serve: run directory not found: " + run_dir.string());
  if (!std::filesystem::exists(run_dir / "graph.json"))
    throw MissingArtifact("serve", "missing graph.json (run 'graph' first)");
  server.set_mount_point("/", run_dir.string());
  server.set_file_extension_and_mimetype_mapping("jsonl", "application/x-ndjson");
}

inline void cmd_serve(const std::filesystem::path& run_dir, int port, const std::string& host = "127.0.0.1") {
  httplib::Server server;
  configure_static_server(server, run_dir);
  if (!server.listen(host, port)) throw Error("serve: cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace bagel::run
