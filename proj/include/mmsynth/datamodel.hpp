#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsynth/core.hpp"
#include "mmsynth/tensor.hpp"

namespace mmsynth {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Modality vocabulary. The ordering is global: every mask, network stream and
// file layout indexes against it. Changing it invalidates all artifacts.
// ---------------------------------------------------------------------------

inline constexpr int kNumModalities = 6;

inline const std::array<std::string, kNumModalities>& modality_names() {
  static const std::array<std::string, kNumModalities> names = {"T1", "T2", "T1C", "FLAIR", "DWI", "ADC"};
  return names;
}

struct Modality {
  int index = -1;

  const std::string& name() const { return modality_names()[static_cast<size_t>(index)]; }

  static Modality from_index(int i) {
    if (i < 0 || i >= kNumModalities) throw VocabularyError("modality index out of range: " + std::to_string(i));
    return Modality{i};
  }

  static Modality from_name(const std::string& name) {
    const auto& names = modality_names();
    for (int i = 0; i < kNumModalities; ++i) {
      if (names[static_cast<size_t>(i)] == name) return Modality{i};
    }
    throw VocabularyError("unknown modality name: '" + name + "'");
  }

  bool operator==(const Modality& o) const { return index == o.index; }
};

// 6-slot binary vector; doubles as availability mask M and synthesis
// condition SC.
struct ModalityMask {
  std::array<uint8_t, kNumModalities> bits{};

  uint8_t operator[](int i) const { return bits[static_cast<size_t>(i)]; }

  void set(int i, bool v = true) { bits[static_cast<size_t>(i)] = v ? 1 : 0; }

  int count() const {
    int n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  bool any() const { return count() > 0; }

  // sc_i <= m_i for all i
  bool dominated_by(const ModalityMask& m) const {
    for (int i = 0; i < kNumModalities; ++i) {
      if (bits[static_cast<size_t>(i)] && !m.bits[static_cast<size_t>(i)]) return false;
    }
    return true;
  }

  ModalityMask operator|(const ModalityMask& o) const {
    ModalityMask r;
    for (int i = 0; i < kNumModalities; ++i)
      r.bits[static_cast<size_t>(i)] = bits[static_cast<size_t>(i)] | o.bits[static_cast<size_t>(i)];
    return r;
  }

  bool operator==(const ModalityMask& o) const { return bits == o.bits; }
  bool operator!=(const ModalityMask& o) const { return bits != o.bits; }
  bool operator<(const ModalityMask& o) const { return bits < o.bits; }

  std::string to_string() const {
    std::string s(kNumModalities, '0');
    for (int i = 0; i < kNumModalities; ++i)
      if (bits[static_cast<size_t>(i)]) s[static_cast<size_t>(i)] = '1';
    return s;
  }

  static ModalityMask from_string(const std::string& s) {
    if (s.size() != kNumModalities) throw ValidationError("mask string must have 6 characters: '" + s + "'");
    ModalityMask m;
    for (int i = 0; i < kNumModalities; ++i) {
      char c = s[static_cast<size_t>(i)];
      if (c != '0' && c != '1') throw ValidationError("mask string must be binary: '" + s + "'");
      m.bits[static_cast<size_t>(i)] = (c == '1');
    }
    return m;
  }

  std::vector<int> indices() const {
    std::vector<int> out;
    for (int i = 0; i < kNumModalities; ++i)
      if (bits[static_cast<size_t>(i)]) out.push_back(i);
    return out;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (int i : indices()) out.push_back(modality_names()[static_cast<size_t>(i)]);
    return out;
  }

  static ModalityMask all() {
    ModalityMask m;
    m.bits.fill(1);
    return m;
  }
};

inline ModalityMask make_mask(const std::vector<std::string>& names) {
  ModalityMask m;
  for (const auto& name : names) {
    Modality mod = Modality::from_name(name);
    if (m[mod.index]) throw ValidationError("duplicate modality name: '" + name + "'");
    m.set(mod.index);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset registry
// ---------------------------------------------------------------------------

// Per-dataset phantom rendering knobs. Lives here because the registry file
// carries it; the phantom module consumes it.
struct IntensityProfile {
  double gamma = 1.0;        // exponent multiplier, > 0
  double gain = 1.0;         // multiplicative
  double bias = 0.0;         // additive
  double noise_sigma = 0.0;  // gaussian pixel noise, >= 0

  void validate() const {
    if (gamma <= 0.0) throw ConfigError("intensity_profile.gamma must be > 0");
    if (noise_sigma < 0.0) throw ConfigError("intensity_profile.noise_sigma must be >= 0");
  }
};

struct DatasetDescriptor {
  int identifier = -1;  // contiguous from 0, assigned by registry order
  std::string name;
  ModalityMask coverage;
  IntensityProfile intensity_profile;
  int case_count = 0;
  int slices_per_case = 1;
  int image_size = 32;  // H = W
  double missingness_rate = 0.0;
};

struct DatasetRegistry {
  std::vector<DatasetDescriptor> datasets;
  uint64_t global_seed = 0;

  const DatasetDescriptor& by_id(int id) const {
    if (id < 0 || id >= static_cast<int>(datasets.size()))
      throw ValidationError("unknown dataset identifier: " + std::to_string(id));
    return datasets[static_cast<size_t>(id)];
  }

  std::optional<int> find(const std::string& name) const {
    for (const auto& d : datasets)
      if (d.name == name) return d.identifier;
    return std::nullopt;
  }

  size_t size() const { return datasets.size(); }
};

inline ModalityMask union_coverage(const DatasetRegistry& registry) {
  if (registry.datasets.empty()) throw ConfigError("union_coverage: empty registry");
  ModalityMask u;
  for (const auto& d : registry.datasets) u = u | d.coverage;
  return u;
}

// Canonical identity of a registry: names, coverages, identifier order.
// Persisted in manifests and checkpoints so artifacts refuse to mix.
inline std::string registry_hash(const DatasetRegistry& registry) {
  json j = json::array();
  for (const auto& d : registry.datasets) {
    j.push_back({{"id", d.identifier}, {"name", d.name}, {"coverage", d.coverage.to_string()}});
  }
  return hex64(fnv1a64(j.dump()));
}

inline json profile_to_json(const IntensityProfile& p) {
  return json{{"gamma", p.gamma}, {"gain", p.gain}, {"bias", p.bias}, {"noise_sigma", p.noise_sigma}};
}

inline IntensityProfile profile_from_json(const json& j) {
  IntensityProfile p;
  p.gamma = j.value("gamma", 1.0);
  p.gain = j.value("gain", 1.0);
  p.bias = j.value("bias", 0.0);
  p.noise_sigma = j.value("noise_sigma", 0.0);
  p.validate();
  return p;
}

inline json registry_to_json(const DatasetRegistry& registry) {
  json out;
  out["global_seed"] = registry.global_seed;
  out["datasets"] = json::array();
  for (const auto& d : registry.datasets) {
    out["datasets"].push_back({{"name", d.name},
                               {"coverage", d.coverage.names()},
                               {"case_count", d.case_count},
                               {"slices_per_case", d.slices_per_case},
                               {"image_size", d.image_size},
                               {"missingness_rate", d.missingness_rate},
                               {"intensity_profile", profile_to_json(d.intensity_profile)}});
  }
  return out;
}

// Identifiers are assigned by listing order and frozen thereafter.
inline DatasetRegistry registry_from_json(const json& j) {
  DatasetRegistry reg;
  if (!j.contains("datasets") || !j["datasets"].is_array() || j["datasets"].empty())
    throw ConfigError("registry: missing or empty 'datasets' list");
  reg.global_seed = j.value("global_seed", 0ull);
  int next_id = 0;
  for (const auto& dj : j["datasets"]) {
    DatasetDescriptor d;
    d.identifier = next_id++;
    if (!dj.contains("name")) throw ConfigError("registry: dataset entry missing 'name'");
    d.name = dj["name"].get<std::string>();
    if (reg.find(d.name) && *reg.find(d.name) != d.identifier)
      throw ConfigError("registry: duplicate dataset name '" + d.name + "'");
    if (!dj.contains("coverage")) throw ConfigError("registry: dataset '" + d.name + "' missing 'coverage'");
    d.coverage = make_mask(dj["coverage"].get<std::vector<std::string>>());
    if (!d.coverage.any()) throw ConfigError("registry: dataset '" + d.name + "' has empty coverage");
    d.case_count = dj.value("case_count", 0);
    d.slices_per_case = dj.value("slices_per_case", 1);
    d.image_size = dj.value("image_size", 32);
    d.missingness_rate = dj.value("missingness_rate", 0.0);
    if (d.missingness_rate < 0.0 || d.missingness_rate >= 1.0)
      throw ConfigError("registry: missingness_rate must be in [0,1)");
    if (d.case_count < 0 || d.slices_per_case < 1 || d.image_size < 1)
      throw ConfigError("registry: bad counts for dataset '" + d.name + "'");
    if (dj.contains("intensity_profile")) d.intensity_profile = profile_from_json(dj["intensity_profile"]);
    reg.datasets.push_back(std::move(d));
  }
  return reg;
}

inline DatasetRegistry load_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open registry file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("registry file is not valid JSON (" + path.string() + "): " + e.what());
  }
  return registry_from_json(j);
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

struct MultiModalSample {
  TensorF images;  // [6,H,W], intensities in [0,1], zero-filled where missing
  ModalityMask availability;
  int dataset_id = -1;
  std::string case_id;
  int slice_index = 0;

  int height() const { return images.dim(1); }
  int width() const { return images.dim(2); }

  std::string ref() const { return case_id + "/" + std::to_string(slice_index); }
};

inline bool channel_all_zero(const TensorF& images, int c) {
  int hw = images.dim(1) * images.dim(2);
  const float* p = images.data() + static_cast<int64_t>(c) * hw;
  for (int i = 0; i < hw; ++i)
    if (p[i] != 0.0f) return false;
  return true;
}

// Returns the violated-invariant messages; empty means valid.
inline std::vector<std::string> sample_violations(const MultiModalSample& s, const DatasetRegistry& registry,
                                                  bool bidirectional = false) {
  std::vector<std::string> out;
  if (s.images.rank() != 3 || s.images.dim(0) != kNumModalities) {
    out.push_back("images must be [6,H,W], got " + s.images.shape_str());
    return out;
  }
  if (s.dataset_id < 0 || s.dataset_id >= static_cast<int>(registry.size())) {
    out.push_back("unknown dataset " + std::to_string(s.dataset_id));
  } else {
    const auto& cov = registry.by_id(s.dataset_id).coverage;
    if (!s.availability.dominated_by(cov))
      out.push_back("availability " + s.availability.to_string() + " not dominated by coverage " + cov.to_string());
  }
  for (int c = 0; c < kNumModalities; ++c) {
    bool zero = channel_all_zero(s.images, c);
    if (!s.availability[c] && !zero) out.push_back("nonzero masked channel " + std::to_string(c));
    if (bidirectional && s.availability[c] && zero)
      out.push_back("available channel " + std::to_string(c) + " is all-zero");
  }
  for (int64_t i = 0; i < s.images.numel(); ++i) {
    float v = s.images[i];
    if (!(v >= 0.0f && v <= 1.0f)) {
      out.push_back("intensity out of [0,1] at flat index " + std::to_string(i));
      break;
    }
  }
  return out;
}

inline const MultiModalSample& validate_sample(const MultiModalSample& s, const DatasetRegistry& registry) {
  auto violations = sample_violations(s, registry);
  if (!violations.empty()) {
    std::string msg = "invalid sample " + s.ref() + ":";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ValidationError(msg);
  }
  return s;
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   <root>/<dataset_name>/<case_id>/<slice_index>/<modality_name>.bin
// Each .bin is a little-endian float32 row-major HxW raster. Missing
// modalities have no file. One meta.json per slice directory.
// ---------------------------------------------------------------------------

inline void write_raster(const std::filesystem::path& path, const float* data, int h, int w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write raster: " + path.string());
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(float)) * h * w);
  if (!out) throw IoError("short write: " + path.string());
}

inline void read_raster(const std::filesystem::path& path, float* data, int h, int w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open raster: " + path.string());
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(sizeof(float)) * h * w);
  if (in.gcount() != static_cast<std::streamsize>(sizeof(float)) * h * w)
    throw IoError("raster truncated: " + path.string());
}

inline json slice_meta_json(const MultiModalSample& s, const std::string& dataset_name) {
  return json{{"shape", {s.height(), s.width()}},
              {"availability", s.availability.to_string()},
              {"dataset", dataset_name},
              {"case_id", s.case_id},
              {"slice_index", s.slice_index}};
}

inline void write_slice(const std::filesystem::path& root, const DatasetRegistry& registry,
                        const MultiModalSample& s) {
  const auto& ds = registry.by_id(s.dataset_id);
  auto dir = root / ds.name / s.case_id / std::to_string(s.slice_index);
  std::filesystem::create_directories(dir);
  for (int c = 0; c < kNumModalities; ++c) {
    if (!s.availability[c]) continue;
    const float* p = s.images.data() + static_cast<int64_t>(c) * s.height() * s.width();
    write_raster(dir / (modality_names()[static_cast<size_t>(c)] + ".bin"), p, s.height(), s.width());
  }
  std::ofstream meta(dir / "meta.json");
  if (!meta) throw IoError("cannot write meta.json in " + dir.string());
  meta << slice_meta_json(s, ds.name).dump(2) << "\n";
}

inline MultiModalSample read_slice(const std::filesystem::path& slice_dir, const DatasetRegistry& registry) {
  std::ifstream meta_in(slice_dir / "meta.json");
  if (!meta_in) throw IoError("missing meta.json in " + slice_dir.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const std::exception& e) {
    throw IoError("bad meta.json in " + slice_dir.string() + ": " + e.what());
  }
  MultiModalSample s;
  auto dsname = meta.at("dataset").get<std::string>();
  auto id = registry.find(dsname);
  if (!id) throw ValidationError("meta.json names unknown dataset '" + dsname + "'");
  s.dataset_id = *id;
  s.case_id = meta.at("case_id").get<std::string>();
  s.slice_index = meta.at("slice_index").get<int>();
  s.availability = ModalityMask::from_string(meta.at("availability").get<std::string>());
  int h = meta.at("shape")[0].get<int>();
  int w = meta.at("shape")[1].get<int>();
  s.images = TensorF({kNumModalities, h, w});
  for (int c = 0; c < kNumModalities; ++c) {
    auto file = slice_dir / (modality_names()[static_cast<size_t>(c)] + ".bin");
    if (s.availability[c]) {
      read_raster(file, s.images.data() + static_cast<int64_t>(c) * h * w, h, w);
    } else if (std::filesystem::exists(file)) {
      throw ValidationError("raster present for unavailable modality: " + file.string());
    }
  }
  // availability bit 0 <=> channel all-zero, checked both ways on load
  auto violations = sample_violations(s, registry, /*bidirectional=*/true);
  if (!violations.empty()) {
    std::string msg = "corrupt slice " + slice_dir.string() + ":";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ValidationError(msg);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Deterministic case-level split
// ---------------------------------------------------------------------------

enum class Split { Train, Test, All };

inline Split split_of_case(const std::string& dataset_name, const std::string& case_id, double train_frac,
                           uint64_t split_seed) {
  uint64_t h = hash_mix(split_seed, fnv1a64(dataset_name + "/" + case_id));
  double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < train_frac ? Split::Train : Split::Test;
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "all") return Split::All;
  throw ValidationError("unknown split '" + s + "' (expected train|test|all)");
}

}  // namespace mmsynth
