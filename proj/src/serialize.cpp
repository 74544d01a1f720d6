#include "dynfuse/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dynfuse {
namespace {

static_assert(std::endian::native == std::endian::little,
              "blob encoding assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw std::runtime_error("blob: truncated input");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::size_t element_count(const std::vector<std::int32_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::runtime_error("blob: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

std::string encode_blob(const std::array<char, 4>& magic, const std::vector<BlobLayer>& layers) {
  std::string out(magic.begin(), magic.end());
  put<std::uint32_t>(out, kBlobVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& layer : layers) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(layer.size()));
    for (const auto& t : layer) {
      if (element_count(t.shape) != t.values.size()) {
        throw std::invalid_argument("blob: tensor shape does not match its values");
      }
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) put<std::int32_t>(out, d);
    }
  }
  for (const auto& layer : layers)
    for (const auto& t : layer)
      for (double v : t.values) put<double>(out, v);
  return out;
}

std::vector<BlobLayer> decode_blob(const std::array<char, 4>& magic, const std::string& bytes) {
  if (bytes.size() < 4 || !std::equal(magic.begin(), magic.end(), bytes.begin())) {
    throw std::runtime_error("blob: bad magic");
  }
  Reader r(bytes);
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kBlobVersion) {
    throw std::runtime_error("blob: unsupported version " + std::to_string(version));
  }
  std::vector<BlobLayer> layers(r.get<std::uint32_t>());
  for (auto& layer : layers) {
    layer.resize(r.get<std::uint32_t>());
    for (auto& t : layer) {
      t.shape.resize(r.get<std::uint32_t>());
      for (auto& d : t.shape) d = r.get<std::int32_t>();
    }
  }
  for (auto& layer : layers) {
    for (auto& t : layer) {
      t.values.resize(element_count(t.shape));
      for (double& v : t.values) v = r.get<double>();
    }
  }
  if (!r.done()) throw std::runtime_error("blob: trailing bytes");
  return layers;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace dynfuse
