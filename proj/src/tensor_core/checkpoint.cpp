#include "mcfnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace mcfnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint buffers are written in host order, which must be little-endian");

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamList<T>& params) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
  std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + (dir / "weights.bin").string());
  std::size_t offset = 0;
  for (const auto& p : params) {
    if (manifest.contains(p.name)) throw IoError("duplicate parameter name " + p.name);
    const std::size_t bytes = p.tensor.numel() * sizeof(T);
    manifest[p.name] = {{"shape", p.tensor.shape()},
                        {"dtype", to_string(p.tensor.dtype())},
                        {"offset", offset},
                        {"length", bytes}};
    bin.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(bytes));
    offset += bytes;
  }
  if (!bin) throw IoError("short write to " + (dir / "weights.bin").string());
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  if (!man) throw IoError("cannot write " + (dir / "manifest.json").string());
  man << manifest.dump(2) << '\n';
}

template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamList<T>& params) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  const std::string blob = read_file(dir / "weights.bin");
  for (auto& p : params) {
    if (!manifest.contains(p.name)) throw IoError("checkpoint has no entry for " + p.name);
    const nlohmann::json& e = manifest.at(p.name);
    try {
      const auto shape = e.at("shape").get<Shape>();
      const auto dtype = dtype_from_string(e.at("dtype").get<std::string>());
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (shape != p.tensor.shape() || dtype != p.tensor.dtype()) {
        throw IoError("checkpoint entry " + p.name + " is " + shape_str(shape) + " " +
                      to_string(dtype) + ", expected " + shape_str(p.tensor.shape()) + " " +
                      to_string(p.tensor.dtype()));
      }
      if (length != p.tensor.numel() * sizeof(T) || offset > blob.size() ||
          blob.size() - offset < length) {
        throw IoError("checkpoint entry " + p.name + " at byte offset " + std::to_string(offset) +
                      " (length " + std::to_string(length) + ") exceeds weights.bin of " +
                      std::to_string(blob.size()) + " bytes");
      }
      std::memcpy(p.tensor.data().data(), blob.data() + offset, length);
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("malformed checkpoint entry " + p.name + ": " + ex.what());
    }
  }
}

template void save_checkpoint<float>(const std::filesystem::path&, const ParamList<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamList<double>&);
template void load_checkpoint<float>(const std::filesystem::path&, ParamList<float>&);
template void load_checkpoint<double>(const std::filesystem::path&, ParamList<double>&);

}  // namespace mcfnet
