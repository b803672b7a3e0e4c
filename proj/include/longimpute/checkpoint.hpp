#pragma once

// Model checkpoint file:
//
//   bytes 0..7    magic "LICKPT01"
//   bytes 8..15   header length H, uint64 little-endian
//   next H bytes  JSON header {"schema": "longimpute.checkpoint", "version": 1,
//                 "meta": {...}, "tensors": [{"name", "rows", "cols"}, ...]}
//   rest          tensor payloads in header order, row-major little-endian
//                 IEEE-754 doubles

#include <Eigen/Core>
#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace longimpute {

class IoFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  static constexpr int kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  const Eigen::MatrixXd& tensor(const std::string& name) const;
  void add(std::string name, Eigen::MatrixXd value) { tensors.emplace_back(std::move(name), std::move(value)); }
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace longimpute
