#pragma once

// Single-file checkpoint container.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "SNMACKPT"
//   uint32        schema version (kCheckpointSchema)
//   uint64        header length n
//   n bytes       UTF-8 JSON header:
//                   {"schema_version", "kind", "config", "metadata",
//                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
//   payload       raw tensor bytes; offsets are relative to the payload start
//
// Files are written to a temporary sibling and renamed, so a failed save never
// leaves a partial checkpoint behind.

#include <semnoma/error.hpp>

#include <json.hpp>
#include <torch/torch.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace semnoma {

inline constexpr std::uint32_t kCheckpointSchema = 1;
inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'N', 'M', 'A', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct TensorEntry {
  std::string name;
  torch::Tensor value;
};

struct CheckpointFile {
  std::string kind;
  nlohmann::json config;
  nlohmann::json metadata;
  std::vector<TensorEntry> tensors;

  const torch::Tensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.value;
    }
    return nullptr;
  }
};

namespace detail {

inline std::string dtype_name(torch::Dtype d) {
  switch (d) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw CheckpointError("checkpoint: unsupported tensor dtype");
  }
}

inline torch::Dtype dtype_from(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  if (s == "uint8") return torch::kUInt8;
  throw CheckpointError("checkpoint: unknown dtype '" + s + "'");
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& ck) {
  nlohmann::json header{{"schema_version", kCheckpointSchema},
                        {"kind", ck.kind},
                        {"config", ck.config},
                        {"metadata", ck.metadata},
                        {"tensors", nlohmann::json::array()}};
  std::vector<torch::Tensor> contiguous;
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    auto c = t.value.detach().cpu().contiguous();
    const auto nbytes = static_cast<std::uint64_t>(c.numel()) * c.element_size();
    header["tensors"].push_back({{"name", t.name},
                                 {"dtype", detail::dtype_name(c.scalar_type())},
                                 {"shape", c.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    contiguous.push_back(std::move(c));
  }
  const std::string text = header.dump();
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    const std::uint32_t version = kCheckpointSchema;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : contiguous) {
      out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
    }
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw CheckpointError(path.string() + " is not a checkpoint container");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || version != kCheckpointSchema) {
    throw CheckpointError(path.string() + ": unsupported schema version " + std::to_string(version));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  const auto payload_start = in.tellg();
  CheckpointFile ck;
  ck.kind = header.value("kind", "");
  ck.config = header.value("config", nlohmann::json::object());
  ck.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& e : header.at("tensors")) {
    auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(detail::dtype_from(e.at("dtype"))));
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
      throw CheckpointError(path.string() + ": size mismatch for tensor " + e.at("name").get<std::string>());
    }
    in.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw CheckpointError(path.string() + ": truncated payload");
    ck.tensors.push_back({e.at("name").get<std::string>(), t});
  }
  return ck;
}

/// Parameters and buffers of a module as named entries.
inline std::vector<TensorEntry> module_state(const torch::nn::Module& m) {
  std::vector<TensorEntry> out;
  for (const auto& p : m.named_parameters()) out.push_back({p.key(), p.value()});
  for (const auto& b : m.named_buffers()) out.push_back({b.key(), b.value()});
  return out;
}

/// Loads named entries into a module; every parameter and buffer must be present
/// with a matching shape and there may be no extra entries.
inline void load_module_state(torch::nn::Module& m, const CheckpointFile& ck) {
  torch::NoGradGuard guard;
  std::size_t used = 0;
  auto assign = [&](const std::string& name, torch::Tensor& dst) {
    const auto* src = ck.find(name);
    if (src == nullptr) throw CheckpointError("checkpoint is missing '" + name + "'");
    if (src->sizes() != dst.sizes()) throw CheckpointError("checkpoint shape mismatch for '" + name + "'");
    dst.copy_(*src);
    ++used;
  };
  for (auto& p : m.named_parameters()) assign(p.key(), p.value());
  for (auto& b : m.named_buffers()) assign(b.key(), b.value());
  if (used != ck.tensors.size()) throw CheckpointError("checkpoint has entries the model does not define");
}

}  // namespace semnoma
