#include "longimpute/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace longimpute {

namespace {

constexpr char kMagic[9] = "LICKPT01";

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  if (at + 8 > in.size()) throw IoFailure("checkpoint truncated");
  std::uint64_t v;
  std::memcpy(&v, in.data() + at, 8);
  return v;
}

}  // namespace

const Eigen::MatrixXd& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw MissingArtifact("checkpoint has no tensor " + name);
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["schema"] = "longimpute.checkpoint";
  header["version"] = Checkpoint::kVersion;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  const std::string text = header.dump();
  std::string out(kMagic, 8);
  put_u64(out, text.size());
  out += text;
  for (const auto& [name, m] : ckpt.tensors) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        char buf[8];
        std::memcpy(buf, &v, 8);
        out.append(buf, 8);
      }
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, kMagic) != 0) throw IoFailure("not a checkpoint file");
  const std::uint64_t len = get_u64(bytes, 8);
  if (16 + len > bytes.size()) throw IoFailure("checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  if (header.value("schema", "") != "longimpute.checkpoint") throw IoFailure("unknown checkpoint schema");
  if (header.value("version", 0) != Checkpoint::kVersion) throw IoFailure("unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  std::size_t at = 16 + len;
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Eigen::MatrixXd m(rows, cols);
    if (at + static_cast<std::size_t>(rows * cols) * 8 > bytes.size()) throw IoFailure("checkpoint payload truncated");
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        double v;
        std::memcpy(&v, bytes.data() + at, 8);
        m(r, c) = v;
        at += 8;
      }
    }
    ckpt.add(t.at("name").get<std::string>(), std::move(m));
  }
  if (at != bytes.size()) throw IoFailure("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot write " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoFailure("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("missing checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace longimpute
