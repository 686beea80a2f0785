#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmsynth/datamodel.hpp"
#include "mmsynth/rng.hpp"

namespace mmsynth {

// Deterministic multi-dataset phantom corpus. All six modality images of a
// slice are analytic transforms of one shared latent field, so cross-modality
// synthesis has an exact oracle, and per-dataset gamma/affine/noise profiles
// realize the distribution shifts the modulation layers must compensate.

// Fixed per-modality rendering constants, indexed (T1, T2, T1C, FLAIR, DWI, ADC):
//   kGammaFactor  - per-modality exponent multiplier g_k; image ~ base^(gamma*g_k)
//   kLesionCoeff  - additive contrast inside lesion inclusions
//                   (T1C gets the strongest positive enhancement, ADC goes dark)
//   kFluidCoeff   - additive contrast inside the designated fluid inclusion
//                   (FLAIR suppresses fluid, T2 brightens it)
inline constexpr std::array<double, kNumModalities> kGammaFactor = {1.0, 0.65, 0.95, 0.8, 1.25, 0.55};
inline constexpr std::array<double, kNumModalities> kLesionCoeff = {-0.08, 0.12, 0.38, 0.18, 0.30, -0.25};
inline constexpr std::array<double, kNumModalities> kFluidCoeff = {-0.12, 0.30, -0.10, -0.45, -0.05, 0.20};

struct Inclusion {
  std::string kind;  // "lesion" or "fluid"
  double cx = 0.5, cy = 0.5;  // center, relative units
  double rx = 0.1, ry = 0.1;  // radii, relative units
  double angle = 0.0;         // radians

  // smooth compact bump, 1 at center falling to 0 at the ellipse boundary
  double mask_at(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double ca = std::cos(angle), sa = std::sin(angle);
    double xr = (dx * ca + dy * sa) / rx;
    double yr = (-dx * sa + dy * ca) / ry;
    double d2 = xr * xr + yr * yr;
    if (d2 >= 1.0) return 0.0;
    double t = 1.0 - d2;
    return t * t;
  }
};

struct LatentAnatomy {
  int size = 0;
  std::vector<double> base;  // size x size, in [0,1]
  std::vector<Inclusion> inclusions;

  double base_at(int h, int w) const { return base[static_cast<size_t>(h) * size + w]; }

  static LatentAnatomy generate(Rng& rng, int size, bool with_inclusions = true) {
    LatentAnatomy a;
    a.size = size;
    a.base.assign(static_cast<size_t>(size) * size, 0.0);
    int n_blobs = 5 + static_cast<int>(rng.uniform_int(4));
    struct Blob {
      double cx, cy, sigma, amp;
    };
    std::vector<Blob> blobs;
    for (int b = 0; b < n_blobs; ++b) {
      blobs.push_back({rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.08, 0.22),
                       rng.uniform(0.35, 1.0)});
    }
    double maxv = 0.0;
    for (int h = 0; h < size; ++h) {
      for (int w = 0; w < size; ++w) {
        double y = (h + 0.5) / size, x = (w + 0.5) / size;
        double v = 0.0;
        for (const auto& b : blobs) {
          double dx = x - b.cx, dy = y - b.cy;
          v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
        a.base[static_cast<size_t>(h) * size + w] = v;
        maxv = std::max(maxv, v);
      }
    }
    if (maxv > 0.0)
      for (auto& v : a.base) v /= maxv;
    if (with_inclusions) {
      // one designated fluid region plus 0-2 lesions, geometry recorded
      Inclusion fluid{"fluid", rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.08, 0.16),
                      rng.uniform(0.08, 0.16), rng.uniform(0.0, M_PI)};
      a.inclusions.push_back(fluid);
      int n_lesions = static_cast<int>(rng.uniform_int(3));
      for (int l = 0; l < n_lesions; ++l) {
        a.inclusions.push_back({"lesion", rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75),
                                rng.uniform(0.06, 0.15), rng.uniform(0.06, 0.15), rng.uniform(0.0, M_PI)});
      }
    }
    return a;
  }
};

// image = clip(gain * base^(gamma*g_k) + bias + sum_k coeff*mask + noise, 0, 1)
inline TensorF render_modality(const LatentAnatomy& anatomy, Modality modality, const IntensityProfile& profile,
                               Rng& noise_rng) {
  profile.validate();
  int n = anatomy.size;
  TensorF img({n, n});
  double g = profile.gamma * kGammaFactor[static_cast<size_t>(modality.index)];
  for (int h = 0; h < n; ++h) {
    for (int w = 0; w < n; ++w) {
      double v = profile.gain * std::pow(anatomy.base_at(h, w), g) + profile.bias;
      double x = (w + 0.5) / n, y = (h + 0.5) / n;
      for (const auto& inc : anatomy.inclusions) {
        double m = inc.mask_at(x, y);
        if (m == 0.0) continue;
        double coeff = inc.kind == "fluid" ? kFluidCoeff[static_cast<size_t>(modality.index)]
                                           : kLesionCoeff[static_cast<size_t>(modality.index)];
        v += coeff * m;
      }
      if (profile.noise_sigma > 0.0) v += profile.noise_sigma * noise_rng.normal();
      img[static_cast<int64_t>(h) * n + w] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
    }
  }
  return img;
}

inline json inclusion_to_json(const Inclusion& inc) {
  return json{{"kind", inc.kind}, {"cx", inc.cx}, {"cy", inc.cy},
              {"rx", inc.rx},     {"ry", inc.ry}, {"angle", inc.angle}};
}

// Drop modalities per case; resampled until at least two remain whenever the
// coverage allows it.
inline ModalityMask sample_case_availability(const DatasetDescriptor& ds, Rng& rng) {
  int covered = ds.coverage.count();
  int min_keep = std::min(2, covered);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    ModalityMask avail;
    for (int i : ds.coverage.indices()) {
      if (rng.uniform() >= ds.missingness_rate) avail.set(i);
    }
    if (avail.count() >= min_keep) return avail;
  }
  throw ValidationError("could not sample availability with >= 2 modalities for dataset " + ds.name);
}

inline std::string case_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%04d", k);
  return buf;
}

// Writes the corpus layout plus phantom_manifest.json; a pure function of the
// registry document (which doubles as the phantom spec).
inline json generate_phantom_corpus(const DatasetRegistry& registry, const std::filesystem::path& root) {
  if (registry.datasets.empty()) throw ConfigError("phantom spec lists no datasets");
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create corpus root " + root.string() + ": " + ec.message());

  json manifest;
  manifest["format"] = "mmsynth-phantom-1";
  manifest["version"] = std::string(kVersionTag);
  manifest["global_seed"] = registry.global_seed;
  manifest["registry"] = registry_to_json(registry);
  manifest["registry_hash"] = registry_hash(registry);
  manifest["cases"] = json::array();

  for (const auto& ds : registry.datasets) {
    for (int k = 0; k < ds.case_count; ++k) {
      uint64_t case_key = hash_mix(static_cast<uint64_t>(ds.identifier), static_cast<uint64_t>(k));
      Rng drop_rng = Rng::stream(registry.global_seed, "drops", case_key);
      ModalityMask avail = sample_case_availability(ds, drop_rng);

      json case_entry;
      case_entry["dataset"] = ds.name;
      case_entry["case_id"] = case_name(k);
      case_entry["availability"] = avail.to_string();
      case_entry["slices"] = json::array();

      for (int s = 0; s < ds.slices_per_case; ++s) {
        Rng anat_rng = Rng::stream(registry.global_seed, "anatomy", case_key, static_cast<uint64_t>(s));
        LatentAnatomy anatomy = LatentAnatomy::generate(anat_rng, ds.image_size);

        MultiModalSample sample;
        sample.dataset_id = ds.identifier;
        sample.case_id = case_name(k);
        sample.slice_index = s;
        sample.availability = avail;
        sample.images = TensorF({kNumModalities, ds.image_size, ds.image_size});
        for (int c = 0; c < kNumModalities; ++c) {
          if (!avail[c]) continue;
          Rng noise_rng = Rng::stream(registry.global_seed, "noise", hash_mix(case_key, static_cast<uint64_t>(s)),
                                      static_cast<uint64_t>(c));
          TensorF img = render_modality(anatomy, Modality::from_index(c), ds.intensity_profile, noise_rng);
          float* dst = sample.images.data() + static_cast<int64_t>(c) * ds.image_size * ds.image_size;
          for (int64_t i = 0; i < img.numel(); ++i) dst[i] = img[i];
        }
        validate_sample(sample, registry);
        write_slice(root, registry, sample);

        json slice_entry;
        slice_entry["slice_index"] = s;
        slice_entry["inclusions"] = json::array();
        for (const auto& inc : anatomy.inclusions) slice_entry["inclusions"].push_back(inclusion_to_json(inc));
        case_entry["slices"].push_back(std::move(slice_entry));
      }
      manifest["cases"].push_back(std::move(case_entry));
    }
  }

  std::ofstream out(root / "phantom_manifest.json");
  if (!out) throw IoError("cannot write phantom_manifest.json in " + root.string());
  out << manifest.dump(2) << "\n";
  return manifest;
}

struct Corpus {
  DatasetRegistry registry;
  std::vector<MultiModalSample> samples;  // manifest order
  json manifest;
  std::string manifest_hash;
};

inline Corpus load_corpus(const std::filesystem::path& root, Split split = Split::All, double train_frac = 1.0,
                          uint64_t split_seed = 0) {
  std::ifstream in(root / "phantom_manifest.json");
  if (!in) throw IoError("missing phantom_manifest.json in " + root.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Corpus corpus;
  try {
    corpus.manifest = json::parse(raw);
  } catch (const std::exception& e) {
    throw IoError("bad phantom_manifest.json: " + std::string(e.what()));
  }
  corpus.manifest_hash = hex64(fnv1a64(raw));
  corpus.registry = registry_from_json(corpus.manifest.at("registry"));
  for (const auto& case_entry : corpus.manifest.at("cases")) {
    auto dsname = case_entry.at("dataset").get<std::string>();
    auto case_id = case_entry.at("case_id").get<std::string>();
    if (split != Split::All && split_of_case(dsname, case_id, train_frac, split_seed) != split) continue;
    for (const auto& slice_entry : case_entry.at("slices")) {
      int s = slice_entry.at("slice_index").get<int>();
      auto dir = root / dsname / case_id / std::to_string(s);
      corpus.samples.push_back(read_slice(dir, corpus.registry));
    }
  }
  return corpus;
}

// Content hash over every file in a corpus directory, path-sorted; used by
// the determinism contracts.
inline std::string hash_corpus_dir(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& rel : files) {
    auto relstr = rel.generic_string();
    h = fnv1a64(relstr.data(), relstr.size(), h);
    std::ifstream in(root / rel, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return hex64(h);
}

}  // namespace mmsynth
