#include "stages.hpp"

#include "mfam/csv.hpp"

#include <Eigen/Core>
#include <boost/version.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <memory>
#include <stdexcept>

#ifndef MFAM_VERSION
#define MFAM_VERSION "unknown"
#endif

namespace mfam::cli {

using nlohmann::json;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256: init failed");
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

namespace {

json hashed(const fs::path& p, const fs::path& relative_to = {}) {
  return {{"path", relative_to.empty() ? p.string() : p.lexically_relative(relative_to).generic_string()},
          {"sha256", sha256_file(p)}};
}

}  // namespace

void write_manifest(const RunConfig& c, const std::string& command, const std::vector<std::string>& stages) {
  json m;
  m["manifest_version"] = 1;
  m["tool"] = "mfam";
  m["command"] = command;
  m["stages"] = stages;
  m["config_source"] = c.source.string();
  m["config"] = c.resolved;
  m["seed"] = c.seed;
  m["replicate_seeds"] = json::array();
  for (int r = 0; r < c.replicates; ++r) {
    json g = json::array(), l = json::array();
    for (size_t k = 0; k < c.families.size(); ++k) {
      g.push_back(stage_seed(c.seed, r, 100 + static_cast<int>(k)));
      l.push_back(stage_seed(c.seed, r, 200 + static_cast<int>(k)));
    }
    m["replicate_seeds"].push_back({{"replicate", r + 1},
                                    {"simulate", replicate_seed(c.seed, r)},
                                    {"gfpca_refit", g},
                                    {"gfpca_local", l},
                                    {"fit", stage_seed(c.seed, r, 4)}});
  }
  m["inputs"] = json::array();
  m["inputs"].push_back(hashed(c.source));
  if (c.data) {
    m["inputs"].push_back(hashed(c.data->path));
    if (c.data->covariates) m["inputs"].push_back(hashed(*c.data->covariates));
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(c.out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  m["outputs"] = json::array();
  for (const auto& f : files) m["outputs"].push_back(hashed(f, c.out));
  m["versions"] = {{"mfam", MFAM_VERSION},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"boost", BOOST_LIB_VERSION},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                   {"compiler", __VERSION__}};
  csv::write_atomic(c.out / "manifest.json", m.dump(2) + "\n");
}

}  // namespace mfam::cli
