#include "imim/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "imim/tensor_io.hpp"

namespace imim {

namespace {
constexpr char kMagic[4] = {'I', 'M', 'I', 'M'};
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::string checkpoint_header(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    const auto bytes = tensor_blob_size(t.tensor.shape());
    header["tensors"].push_back({{"name", t.name}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  return header.dump();
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write-then-rename so an interrupted save never clobbers a good file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot open " + tmp + " for writing");
    const auto header = checkpoint_header(ckpt);
    out.write(kMagic, 4);
    io::put_u32(out, kCheckpointVersion);
    io::put_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& t : ckpt.tensors) write_tensor(out, t.tensor);
    if (!out) throw FormatError("failed writing " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move checkpoint into " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + " is not an IMIM checkpoint");
  const auto version = io::get_u32(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = io::get_u64(in);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw FormatError(path + ": truncated header");
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(header_text);
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.at("meta");
    const auto payload_start = in.tellg();
    for (const auto& entry : header.at("tensors")) {
      in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
      auto t = read_tensor(in);
      if (tensor_blob_size(t.shape()) != entry.at("bytes").get<std::uint64_t>()) {
        throw FormatError(path + ": size mismatch for " + entry.at("name").get<std::string>());
      }
      ckpt.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  return ckpt;
}

}  // namespace imim
