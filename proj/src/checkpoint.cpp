#include "zxyseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "zxyseg/config.hpp"

namespace zxyseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace {
constexpr char kMagic[8] = {'Z', 'X', 'S', 'E', 'G', 'C', 'P', '1'};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["model"] = model_config_to_json(ckpt.config);
  header["step"] = ckpt.step;
  auto tensors = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& name : ckpt.params.order) {
    const auto& t = ckpt.params.at(name);
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset_bytes", offset}});
    offset += t.size() * 4;
  }
  header["tensors"] = std::move(tensors);
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "io.unwritable", "cannot write checkpoint " + path.string());
  out.write(kMagic, 8);
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& name : ckpt.params.order) {
    const auto& t = ckpt.params.at(name);
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(t.size() * 4));
  }
  require(out.good(), "io.unwritable", "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io.missing_file", "cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, kMagic, 8) == 0, "io.bad_checkpoint",
          path.string() + " is not a checkpoint file");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  require(in.good() && hlen > 0 && hlen < (1ULL << 24), "io.bad_checkpoint",
          "implausible checkpoint header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  require(in.good(), "io.bad_checkpoint", "truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    fail("io.bad_checkpoint", "invalid checkpoint header: " + std::string(e.what()));
  }

  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(header.at("model"));
    ckpt.step = header.at("step").get<std::int64_t>();
    for (const auto& tj : header.at("tensors")) {
      const auto name = tj.at("name").get<std::string>();
      Shape shape = tj.at("shape").get<Shape>();
      Tensor<float> t = Tensor<float>::zeros(shape);
      in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * 4));
      require(in.good(), "io.bad_checkpoint", "truncated tensor payload for " + name);
      ckpt.params.add(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail("io.bad_checkpoint", "malformed checkpoint header: " + std::string(e.what()));
  }

  // the stored schema must match the stored config
  const auto schema = parameter_schema(ckpt.config);
  require(schema.size() == ckpt.params.order.size(), "io.bad_checkpoint",
          "checkpoint tensor count does not match its config");
  for (const auto& spec : schema) {
    require(ckpt.params.has(spec.name), "io.bad_checkpoint",
            "checkpoint missing parameter " + spec.name);
    require(ckpt.params.at(spec.name).shape == spec.shape, "io.bad_checkpoint",
            "checkpoint shape mismatch for " + spec.name);
  }
  return ckpt;
}

}  // namespace zxyseg
