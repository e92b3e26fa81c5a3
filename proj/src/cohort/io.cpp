#include <bit>
#include <fstream>

#include "json.hpp"
#include "lne/cohort.hpp"

namespace lne::cohort {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_to_json(const GeneratorConfig& c) {
  return json{{"n_subjects", c.n_subjects},
              {"min_visits", c.min_visits},
              {"max_visits", c.max_visits},
              {"age_min", c.age_min},
              {"age_max", c.age_max},
              {"gap_min", c.gap_min},
              {"gap_max", c.gap_max},
              {"image_size", c.image_size},
              {"noise_level", c.noise_level},
              {"fast_fraction", c.fast_fraction},
              {"normal_speed_mean", c.normal_speed_mean},
              {"normal_speed_sd", c.normal_speed_sd},
              {"fast_speed_mean", c.fast_speed_mean},
              {"fast_speed_sd", c.fast_speed_sd},
              {"baseline_sd", c.baseline_sd},
              {"nuisance_level", c.nuisance_level},
              {"seed", c.seed}};
}

GeneratorConfig config_from_json(const json& j) {
  GeneratorConfig c;
  c.n_subjects = j.at("n_subjects").get<std::size_t>();
  c.min_visits = j.at("min_visits").get<std::size_t>();
  c.max_visits = j.at("max_visits").get<std::size_t>();
  c.age_min = j.at("age_min").get<double>();
  c.age_max = j.at("age_max").get<double>();
  c.gap_min = j.at("gap_min").get<double>();
  c.gap_max = j.at("gap_max").get<double>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.noise_level = j.at("noise_level").get<double>();
  c.fast_fraction = j.at("fast_fraction").get<double>();
  c.normal_speed_mean = j.at("normal_speed_mean").get<double>();
  c.normal_speed_sd = j.at("normal_speed_sd").get<double>();
  c.fast_speed_mean = j.at("fast_speed_mean").get<double>();
  c.fast_speed_sd = j.at("fast_speed_sd").get<double>();
  c.baseline_sd = j.at("baseline_sd").get<double>();
  c.nuisance_level = j.at("nuisance_level").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::string image_file(const std::string& subject, std::size_t visit) {
  return "images/" + subject + "_" + std::to_string(visit) + ".f32";
}

void write_image(const fs::path& path, const Image& img) {
  std::vector<unsigned char> bytes(img.pixels.size() * 4);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(img.pixels[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xffu);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetIoError(DatasetIoError::Kind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetIoError(DatasetIoError::Kind::Io, "write failed for " + path.string());
}

Image read_image(const fs::path& path, std::size_t height, std::size_t width) {
  if (!fs::exists(path)) {
    throw DatasetIoError(DatasetIoError::Kind::MissingFile, "manifest references missing image file " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetIoError(DatasetIoError::Kind::Io, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t expected = height * width * 4;
  if (bytes.size() != expected) {
    throw DatasetIoError(DatasetIoError::Kind::Corrupt, "image file " + path.string() + " holds " +
                                                            std::to_string(bytes.size()) + " bytes, expected " +
                                                            std::to_string(expected));
  }
  Image img{height, width, std::vector<float>(height * width)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    img.pixels[i] = std::bit_cast<float>(u);
  }
  return img;
}

}  // namespace

void save_cohort(const Cohort& cohort, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DatasetIoError(DatasetIoError::Kind::Io, "cannot create " + (dir / "images").string());
  json subjects = json::array();
  std::size_t height = cohort.config.image_size, width = cohort.config.image_size;
  for (const auto& s : cohort.subjects) {
    json visits = json::array();
    for (std::size_t v = 0; v < s.visits.size(); ++v) {
      const auto& img = s.visits[v].image;
      height = img.height;
      width = img.width;
      const auto file = image_file(s.id, v);
      write_image(dir / file, img);
      visits.push_back(json{{"age", s.visits[v].age}, {"file", file}});
    }
    subjects.push_back(json{{"id", s.id}, {"group", to_string(s.group)}, {"speed", s.speed}, {"visits", visits}});
  }
  json manifest{{"version", kDatasetVersion},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"layout", "row-major"},
                {"image_height", height},
                {"image_width", width},
                {"generator", config_to_json(cohort.config)},
                {"subjects", subjects}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DatasetIoError(DatasetIoError::Kind::Io, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

Cohort load_cohort(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DatasetIoError(DatasetIoError::Kind::MissingFile, "missing dataset manifest " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetIoError(DatasetIoError::Kind::Malformed, "malformed manifest " + path.string() + ": " + e.what());
  }
  Cohort cohort;
  try {
    if (!manifest.contains("version")) {
      throw DatasetIoError(DatasetIoError::Kind::Malformed, "manifest lacks mandatory version field");
    }
    if (manifest["version"] != kDatasetVersion) {
      throw DatasetIoError(DatasetIoError::Kind::Version,
                           "unsupported dataset version " + manifest["version"].dump() + " (expected " +
                               std::to_string(kDatasetVersion) + ")");
    }
    if (manifest.at("dtype") != "float32") {
      throw DatasetIoError(DatasetIoError::Kind::Malformed, "unsupported dtype " + manifest["dtype"].dump());
    }
    const auto height = manifest.at("image_height").get<std::size_t>();
    const auto width = manifest.at("image_width").get<std::size_t>();
    cohort.config = config_from_json(manifest.at("generator"));
    for (const auto& js : manifest.at("subjects")) {
      Subject s;
      s.id = js.at("id").get<std::string>();
      s.group = group_from_string(js.at("group").get<std::string>());
      s.speed = js.at("speed").get<double>();
      for (const auto& jv : js.at("visits")) {
        Visit v;
        v.age = jv.at("age").get<double>();
        v.image = read_image(dir / jv.at("file").get<std::string>(), height, width);
        if (!s.visits.empty() && !(v.age > s.visits.back().age)) {
          throw DatasetIoError(DatasetIoError::Kind::Malformed, "visits of subject " + s.id + " not in age order");
        }
        s.visits.push_back(std::move(v));
      }
      cohort.subjects.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DatasetIoError(DatasetIoError::Kind::Malformed, "malformed manifest " + path.string() + ": " + e.what());
  } catch (const DatasetIoError&) {
    throw;
  } catch (const CohortError& e) {
    throw DatasetIoError(DatasetIoError::Kind::Malformed, e.what());
  }
  std::sort(cohort.subjects.begin(), cohort.subjects.end(),
            [](const Subject& a, const Subject& b) { return a.id < b.id; });
  return cohort;
}

}  // namespace lne::cohort
