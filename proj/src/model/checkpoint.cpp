#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "lne/model.hpp"

namespace lne::model {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_f32_le(std::ostream& out, std::span<const float> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xffu);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<float> read_f32_le(const std::vector<unsigned char>& blob, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(blob[offset + i * 4 + b]) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

json arch_to_json(const Architecture& a) {
  return json{{"encoder_channels", a.encoder_channels},
              {"decoder_channels", a.decoder_channels},
              {"input_size", a.input_size},
              {"slope", a.slope}};
}

Architecture arch_from_json(const json& j) {
  Architecture a;
  a.encoder_channels = j.at("encoder_channels").get<std::vector<std::size_t>>();
  a.decoder_channels = j.at("decoder_channels").get<std::vector<std::size_t>>();
  a.input_size = j.at("input_size").get<std::size_t>();
  a.slope = j.at("slope").get<double>();
  return a;
}

struct Entry {
  std::string name;
  ad::Shape shape;
  bool requires_grad;
  std::span<const float> values;
};

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& checkpoint) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  std::vector<Entry> entries;
  for (const auto& name : checkpoint.params.names()) {
    const auto& t = checkpoint.params.at(name);
    entries.push_back({name, t.shape(), t.requires_grad(), t.data()});
  }
  if (checkpoint.optimizer) {
    for (const auto& [name, m] : checkpoint.optimizer->first_moment) {
      entries.push_back({"adam.m/" + name, {m.size()}, false, m});
    }
    for (const auto& [name, v] : checkpoint.optimizer->second_moment) {
      entries.push_back({"adam.v/" + name, {v.size()}, false, v});
    }
  }

  json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["architecture"] = arch_to_json(checkpoint.arch);
  manifest["epoch"] = checkpoint.epoch;
  manifest["scalars"] = checkpoint.scalars;
  if (checkpoint.optimizer) manifest["optimizer"] = json{{"step", checkpoint.optimizer->step}};
  json tensors = json::array();
  std::size_t offset = 0;
  std::ofstream bin(dir / "ckpt.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw CheckpointError("cannot write " + (dir / "ckpt.bin").string());
  for (const auto& e : entries) {
    tensors.push_back(json{{"name", e.name},
                           {"shape", e.shape},
                           {"offset", offset},
                           {"length", e.values.size()},
                           {"trainable", e.requires_grad}});
    write_f32_le(bin, e.values);
    offset += e.values.size() * 4;
  }
  manifest["tensors"] = tensors;
  manifest["total_bytes"] = offset;
  if (!bin) throw CheckpointError("write failed for " + (dir / "ckpt.bin").string());
  std::ofstream man(dir / "ckpt.json", std::ios::trunc);
  if (!man) throw CheckpointError("cannot write " + (dir / "ckpt.json").string());
  man << manifest.dump(2) << "\n";
}

namespace {

struct Loaded {
  json manifest;
  std::vector<unsigned char> blob;
};

Loaded read_checkpoint_files(const fs::path& dir) {
  Loaded out;
  std::ifstream man(dir / "ckpt.json");
  if (!man) throw CheckpointError("missing checkpoint manifest " + (dir / "ckpt.json").string());
  try {
    out.manifest = json::parse(man);
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (!out.manifest.contains("version") || out.manifest["version"] != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version in " + (dir / "ckpt.json").string());
  }
  std::ifstream bin(dir / "ckpt.bin", std::ios::binary);
  if (!bin) throw CheckpointError("missing checkpoint payload " + (dir / "ckpt.bin").string());
  out.blob.assign(std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>());
  if (out.blob.size() != out.manifest.at("total_bytes").get<std::size_t>()) {
    throw CheckpointError("checkpoint payload size " + std::to_string(out.blob.size()) +
                          " does not match manifest (" + out.manifest.at("total_bytes").dump() + " bytes)");
  }
  return out;
}

std::vector<float> tensor_values(const Loaded& l, const json& entry) {
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto length = entry.at("length").get<std::size_t>();
  if (offset + length * 4 > l.blob.size()) {
    throw CheckpointError("tensor " + entry.at("name").get<std::string>() + " extends past end of payload");
  }
  return read_f32_le(l.blob, offset, length);
}

}  // namespace

Checkpoint load_checkpoint(const fs::path& dir) {
  Loaded l = read_checkpoint_files(dir);
  Checkpoint ck;
  try {
    ck.arch = arch_from_json(l.manifest.at("architecture"));
    ck.epoch = l.manifest.at("epoch").get<std::uint64_t>();
    ck.scalars = l.manifest.at("scalars").get<std::map<std::string, double>>();
    if (l.manifest.contains("optimizer")) {
      ck.optimizer.emplace();
      ck.optimizer->step = l.manifest["optimizer"].at("step").get<std::uint64_t>();
    }
    for (const auto& entry : l.manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      auto values = tensor_values(l, entry);
      if (name.rfind("adam.m/", 0) == 0 || name.rfind("adam.v/", 0) == 0) {
        if (!ck.optimizer) throw CheckpointError("optimizer moment " + name + " without optimizer section");
        auto& dest = name[5] == 'm' ? ck.optimizer->first_moment : ck.optimizer->second_moment;
        dest[name.substr(7)] = std::move(values);
        continue;
      }
      auto shape = entry.at("shape").get<ad::Shape>();
      if (ad::shape_size(shape) != values.size()) throw CheckpointError("shape/length mismatch for tensor " + name);
      ck.params.add(name, ad::TensorF(std::move(shape), std::move(values), entry.at("trainable").get<bool>()));
    }
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  return ck;
}

void load_params_into(const fs::path& dir, ModelParamsF& params) {
  Checkpoint ck = load_checkpoint(dir);
  for (const auto& name : params.names()) {
    if (!ck.params.contains(name)) throw CheckpointError("checkpoint is missing tensor " + name);
    const auto& src = ck.params.at(name);
    auto& dst = params.at(name);
    if (src.shape() != dst.shape()) {
      throw CheckpointError("shape mismatch for tensor " + name + ": checkpoint " + ad::shape_string(src.shape()) +
                            ", model " + ad::shape_string(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

}  // namespace lne::model
