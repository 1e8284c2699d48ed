#pragma once

// Checkpoint layout (all integers little-endian):
//   "PRLB"  u32 version  u32 header_bytes  header (UTF-8 JSON)  float32 blobs
// The header carries the architecture, the live block structure, retired ids, the step/epoch
// counters and a manifest of (name, shape, byte offset into the blob area) for every stored tensor
// in canonical order, running statistics included.

#include <prunelab/error.hpp>
#include <prunelab/model.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

namespace prunelab {

inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'L', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline nlohmann::json architecture_json(const ArchitectureConfig& a) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : a.groups) groups.push_back({{"block_count", g.block_count}, {"width", g.width}, {"stride", g.stride}});
  return {{"name", a.name},
          {"input_shape", a.input_shape},
          {"num_classes", a.num_classes},
          {"stem_width", a.stem_width},
          {"groups", groups}};
}

inline ArchitectureConfig architecture_from_json(const nlohmann::json& j) {
  ArchitectureConfig a;
  a.name = j.at("name").get<std::string>();
  a.input_shape = j.at("input_shape").get<std::array<std::size_t, 3>>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.stem_width = j.at("stem_width").get<std::size_t>();
  for (const auto& g : j.at("groups")) {
    a.groups.push_back(GroupSpec{g.at("block_count").get<std::size_t>(), g.at("width").get<std::size_t>(),
                                 g.at("stride").get<int>()});
  }
  return a;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const ModelGraph& model) {
  require_valid(model, "checkpoint");
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : model.blocks) {
    blocks.push_back({{"id", b.id.str()},
                      {"mid_channels", b.mid_channels},
                      {"shortcut", b.shortcut == ShortcutKind::identity ? "identity" : "pad_downsample"},
                      {"prunable", b.is_prunable}});
  }
  nlohmann::json retired = nlohmann::json::array();
  for (const auto& id : model.retired) retired.push_back(id.str());

  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for_each_tensor(model, [&](const std::string& name, const Tensor& t, ParamKind) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  });

  const nlohmann::json header = {{"architecture", detail::architecture_json(model.config)},
                                 {"blocks", blocks},
                                 {"retired", retired},
                                 {"step", model.step},
                                 {"epoch", model.epoch},
                                 {"manifest", manifest}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for_each_tensor(model, [&](const std::string&, const Tensor& t, ParamKind) {
    for (float v : t.values()) detail::put_f32(out, v);
  });
  return out;
}

inline ModelGraph parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    fail(ErrorKind::format, "not a checkpoint: missing PRLB magic at byte offset 0");
  }
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    fail(ErrorKind::format, "unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  const std::uint32_t header_bytes = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_bytes)) {
    fail(ErrorKind::format, "checkpoint header of " + std::to_string(header_bytes) + " bytes is truncated at byte offset " +
                                std::to_string(bytes.size()));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_bytes);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::span<const std::uint8_t> blobs = bytes.subspan(12 + header_bytes);

  ModelGraph model;
  try {
    const ArchitectureConfig arch = detail::architecture_from_json(header.at("architecture"));
    model = build_model(arch, 0);

    // Rebuild the live block structure: drop retired blocks, then resize mid channels so the
    // manifest shapes line up; the values themselves come from the blobs below.
    std::vector<ResidualBlock> live;
    for (const auto& jb : header.at("blocks")) {
      const BlockId id = BlockId::parse(jb.at("id").get<std::string>());
      const ResidualBlock* built = model.find_block(id);
      if (!built) fail(ErrorKind::format, "checkpoint names block " + id.str() + " that the architecture lacks");
      ResidualBlock b = *built;
      const auto mid = jb.at("mid_channels").get<std::size_t>();
      if (mid == 0 || mid > b.mid_channels) fail(ErrorKind::format, "block " + id.str() + ": invalid mid_channels");
      const std::size_t k1 = b.conv1.kernel_size(), k2 = b.conv2.kernel_size();
      b.conv1.weight = Tensor({mid, b.in_channels(), k1, k1});
      b.conv2.weight = Tensor({b.out_channels(), mid, k2, k2});
      b.bn1 = make_batchnorm(mid, b.bn1.momentum, b.bn1.eps);
      b.mid_channels = mid;
      live.push_back(std::move(b));
      if (jb.at("prunable").get<bool>() != live.back().is_prunable ||
          jb.at("shortcut").get<std::string>() != (live.back().shortcut == ShortcutKind::identity ? "identity" : "pad_downsample")) {
        fail(ErrorKind::format, "block " + id.str() + ": shortcut or prunable flag disagrees with the architecture");
      }
    }
    model.blocks = std::move(live);
    for (const auto& r : header.at("retired")) model.retired.push_back(BlockId::parse(r.get<std::string>()));
    model.step = header.at("step").get<std::uint64_t>();
    model.epoch = header.at("epoch").get<std::uint64_t>();

    const auto& manifest = header.at("manifest");
    std::size_t index = 0, expected_offset = 0;
    for_each_tensor(model, [&](const std::string& name, Tensor& t, ParamKind) {
      if (index >= manifest.size()) fail(ErrorKind::format, "manifest is missing tensor " + name);
      const auto& entry = manifest[index++];
      const auto entry_name = entry.at("name").get<std::string>();
      if (entry_name != name) fail(ErrorKind::format, "manifest entry '" + entry_name + "' where '" + name + "' was expected");
      if (entry.at("shape").get<Shape>() != t.shape()) {
        fail(ErrorKind::format, "manifest shape of " + name + " does not match the architecture " + shape_string(t.shape()));
      }
      const auto offset = entry.at("offset").get<std::size_t>();
      if (offset != expected_offset) fail(ErrorKind::format, "manifest offset of " + name + " is not contiguous");
      if (offset + t.size() * 4 > blobs.size()) {
        fail(ErrorKind::format, "tensor " + name + " truncated at byte offset " + std::to_string(12 + header_bytes + blobs.size()));
      }
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(detail::get_u32(blobs, offset + 4 * i));
      expected_offset = offset + t.size() * 4;
    });
    if (index != manifest.size()) fail(ErrorKind::format, "manifest lists tensors the model does not have");
    if (expected_offset != blobs.size()) {
      fail(ErrorKind::format, "checkpoint has " + std::to_string(blobs.size() - expected_offset) + " trailing bytes");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint header field: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::format) throw;
    fail(ErrorKind::format, std::string("checkpoint does not describe a valid model: ") + e.what());
  }
  require_valid(model, "loaded checkpoint");
  return model;
}

inline void save_checkpoint(const ModelGraph& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::report, "cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::report, "short write to checkpoint " + path);
}

inline ModelGraph load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot open checkpoint " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

}  // namespace prunelab
