#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imim/model.hpp"

namespace imim {

class ExportError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container layout: "IMIM", u32 version, u64 header length, JSON header
/// {kind, meta, tensors:[{name, offset, bytes}]}, then the IMTN blobs back to
/// back. Offsets count from the first byte after the header.
struct Checkpoint {
  std::string kind;  // "model", "encoder" or "train_state"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
/// Serialized header text as it would be written.
std::string checkpoint_header(const Checkpoint& ckpt);

}  // namespace imim
