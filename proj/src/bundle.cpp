#include "tailquant/bundle.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tailquant {

namespace fs = std::filesystem;

const Tensor& TensorBundle::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("bundle: no entry named " + name);
  return it->second;
}

std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

std::string checksum_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t checksum_from_hex(const std::string& hex) {
  return std::stoull(hex, nullptr, 16);
}

void append_f32_le(std::string& out, float value) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

float read_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

std::string payload_name(const std::string& manifest_path) {
  return fs::path(manifest_path).stem().string() + ".bin";
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

Tensor to_storage_precision(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

void write_bundle(const std::string& manifest_path,
                  const std::vector<std::pair<std::string, Tensor>>& entries,
                  const nlohmann::json& meta) {
  std::string payload;
  nlohmann::json jentries = nlohmann::json::array();
  for (const auto& [name, tensor] : entries) {
    if (!tensor.all_finite()) {
      throw std::runtime_error("bundle: refusing to store non-finite tensor " + name);
    }
    const std::uint64_t offset = payload.size();
    for (double v : tensor.data()) append_f32_le(payload, static_cast<float>(v));
    const std::uint64_t length = payload.size() - offset;
    const std::uint64_t sum =
        fnv1a64(reinterpret_cast<const unsigned char*>(payload.data()) + offset, length);
    jentries.push_back({{"name", name},
                        {"dtype", "f32"},
                        {"shape", tensor.shape()},
                        {"offset", offset},
                        {"bytes", length},
                        {"checksum", checksum_hex(sum)}});
  }

  nlohmann::json manifest = {{"format", "tensor-bundle-v1"},
                             {"payload", payload_name(manifest_path)},
                             {"entries", jentries},
                             {"meta", meta}};

  const fs::path dir = fs::path(manifest_path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  atomic_write_file((dir / payload_name(manifest_path)).string(), payload);
  atomic_write_file(manifest_path, manifest.dump(2) + "\n");
}

TensorBundle read_bundle(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open bundle manifest: " + manifest_path);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed bundle manifest " + manifest_path + ": " + e.what());
  }
  if (manifest.value("format", "") != "tensor-bundle-v1") {
    throw std::runtime_error("unsupported bundle format in " + manifest_path);
  }

  const fs::path payload_path =
      fs::path(manifest_path).parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream pin(payload_path, std::ios::binary);
  if (!pin) throw std::runtime_error("cannot open bundle payload: " + payload_path.string());
  std::ostringstream buf;
  buf << pin.rdbuf();
  const std::string payload = buf.str();

  TensorBundle bundle;
  bundle.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& je : manifest.at("entries")) {
    BundleEntry entry;
    entry.name = je.at("name").get<std::string>();
    entry.shape = je.at("shape").get<std::vector<std::size_t>>();
    entry.offset = je.at("offset").get<std::uint64_t>();
    entry.byte_length = je.at("bytes").get<std::uint64_t>();
    entry.checksum = checksum_from_hex(je.at("checksum").get<std::string>());
    if (je.value("dtype", "f32") != "f32") {
      throw std::runtime_error("bundle entry " + entry.name + ": unsupported dtype");
    }
    const std::size_t count = shape_product(entry.shape);
    if (entry.byte_length != 4 * count) {
      throw std::runtime_error("bundle entry " + entry.name + ": byte length does not match shape");
    }
    if (entry.offset + entry.byte_length > payload.size()) {
      throw std::runtime_error("bundle entry " + entry.name + ": payload out of range");
    }
    const unsigned char* base = reinterpret_cast<const unsigned char*>(payload.data()) + entry.offset;
    if (fnv1a64(base, entry.byte_length) != entry.checksum) {
      throw std::runtime_error("bundle entry " + entry.name + ": checksum mismatch");
    }
    Tensor t(entry.shape);
    for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<double>(read_f32_le(base + 4 * i));
    if (!t.all_finite()) {
      throw std::runtime_error("bundle entry " + entry.name + ": non-finite values");
    }
    bundle.tensors.emplace(entry.name, std::move(t));
    bundle.entries.push_back(std::move(entry));
  }
  return bundle;
}

}  // namespace tailquant
