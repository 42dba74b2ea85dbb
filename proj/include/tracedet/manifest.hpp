#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tracedet/errors.hpp"

namespace tracedet {

inline constexpr const char* kManifestFormat = "tracedet-manifest-v1";

// FNV-1a over the file bytes, hex-encoded. Used to fingerprint emitted
// artifacts for reproducibility checks, not for security.
inline std::string file_hash_fnv1a64(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("file_hash: cannot open '" + path.string() + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buffer[1 << 16];
  while (in.read(buffer, sizeof(buffer)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buffer[i]);
      h *= 0x100000001b3ULL;
    }
    if (got < static_cast<std::streamsize>(sizeof(buffer))) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

// Record of one CLI run: what ran, with which resolved configuration, over
// which files, producing which artifacts.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config;
  std::vector<std::pair<std::string, std::string>> inputs;   // label -> path
  std::vector<std::pair<std::string, std::string>> outputs;  // label -> path
  double wall_seconds = 0.0;
};

// Serializes the manifest with per-output content hashes; written to a
// temporary file first and renamed so the manifest appears atomically.
inline void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format"] = kManifestFormat;
  j["command"] = manifest.command;
  j["seed"] = manifest.seed;
  j["config"] = manifest.config;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  for (const auto& [label, p] : manifest.inputs) inputs[label] = p;
  j["inputs"] = std::move(inputs);
  nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
  for (const auto& [label, p] : manifest.outputs) {
    nlohmann::ordered_json entry;
    entry["path"] = p;
    entry["fnv1a64"] = file_hash_fnv1a64(p);
    outputs[label] = std::move(entry);
  }
  j["outputs"] = std::move(outputs);
  j["wall_seconds"] = manifest.wall_seconds;

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw io_error("write_manifest: cannot open '" + tmp.string() + "'");
    out << j.dump(2) << "\n";
    if (!out) throw io_error("write_manifest: write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace tracedet
