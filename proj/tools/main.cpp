// Command-line entry point: phantom generation, training, synthesis,
// evaluation, ablation, corpus validation. One invocation, one process, one
// output directory; all randomness comes from config seeds.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mmsynth/losses.hpp"
#include "mmsynth/metrics.hpp"
#include "mmsynth/network.hpp"
#include "mmsynth/phantom.hpp"
#include "mmsynth/trainer.hpp"

namespace fs = std::filesystem;
using namespace mmsynth;

namespace {

void require_output_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ValidationError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !overwrite)
    throw ValidationError("output directory " + dir.string() + " is not empty (pass --overwrite to reuse it)");
  fs::create_directories(dir);
}

// run stub written before any heavy work starts
void write_run_stub(const fs::path& dir, const std::string& subcommand, const json& args) {
  json stub{{"version", std::string(kVersionTag)}, {"subcommand", subcommand}, {"args", args}};
  std::ofstream out(dir / "run.json");
  if (!out) throw IoError("cannot write run.json in " + dir.string());
  out << stub.dump(2) << "\n";
}

bool parse_switch(const std::string& v, const std::string& flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw ValidationError("--" + flag + " expects on|off, got '" + v + "'");
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (auto& c : out)
    if (c == '>' || c == '+' || c == '-' || c == '/') c = '_';
  return out;
}

ModelBundle<float> load_verified_checkpoint(const fs::path& ckpt, const Corpus& corpus) {
  auto model = load_checkpoint<float>(ckpt);
  if (registry_hash(model.registry) != registry_hash(corpus.registry))
    throw ValidationError("checkpoint registry hash does not match corpus registry");
  return model;
}

int cmd_generate_phantom(const fs::path& spec_path, const fs::path& out, bool overwrite) {
  DatasetRegistry registry = load_registry(spec_path);
  require_output_dir(out, overwrite);
  write_run_stub(out, "generate-phantom", json{{"spec", spec_path.string()}});
  json manifest = generate_phantom_corpus(registry, out);
  size_t n = manifest["cases"].size();
  std::cout << "wrote " << n << " cases across " << registry.size() << " datasets to " << out << "\n";
  return 0;
}

int cmd_validate_corpus(const fs::path& corpus_dir) {
  Corpus corpus = load_corpus(corpus_dir);  // read_slice validates every invariant
  std::cout << "corpus ok: " << corpus.samples.size() << " slices, " << corpus.registry.size()
            << " datasets, manifest hash " << corpus.manifest_hash << "\n";
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& corpus_dir, const fs::path& out, bool overwrite,
              const std::string& pfm, const std::string& mcbs, int epochs, int batch_size, int64_t seed,
              const fs::path& resume) {
  TrainConfig cfg = load_train_config(config_path);
  if (!pfm.empty()) cfg.pfm_enabled = parse_switch(pfm, "pfm");
  if (!mcbs.empty()) cfg.mcbs_enabled = parse_switch(mcbs, "mcbs");
  if (epochs > 0) cfg.epochs = epochs;
  if (batch_size > 0) cfg.batch_size = batch_size;
  if (seed >= 0) {
    cfg.seeds.global = static_cast<uint64_t>(seed);
    cfg.seeds.init = cfg.seeds.schedule = cfg.seeds.condition = 0;
  }
  cfg.validate();
  if (!fs::exists(corpus_dir / "phantom_manifest.json"))
    throw ValidationError("corpus not found at " + corpus_dir.string());
  require_output_dir(out, overwrite);
  write_run_stub(out, "train", cfg.to_json());
  TrainResult result = train(cfg, corpus_dir, out, resume);
  const auto& epochs_log = result.manifest["epochs"];
  std::cout << "trained " << epochs_log.size() << " epochs; final generator loss "
            << epochs_log.back()["lg_mean"].get<double>() << "; checkpoint at " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_ablate(const fs::path& config_path, const fs::path& corpus_dir, const fs::path& out, bool overwrite) {
  TrainConfig cfg = load_train_config(config_path);
  if (!fs::exists(corpus_dir / "phantom_manifest.json"))
    throw ValidationError("corpus not found at " + corpus_dir.string());
  require_output_dir(out, overwrite);
  write_run_stub(out, "ablate", cfg.to_json());
  json report = run_ablation(cfg, corpus_dir, out);
  std::cout << "ablation report with " << report["rows"].size() << " rows written to "
            << (out / "ablation_report.csv") << "\n";
  return 0;
}

int cmd_synthesize(const fs::path& ckpt, const fs::path& input_dir, const std::vector<std::string>& sources,
                   const std::vector<std::string>& targets, const fs::path& out, bool overwrite, bool montage) {
  if (sources.empty() || targets.empty()) throw ValidationError("need --sources and --targets");
  ModalityMask src_mask = make_mask(sources);
  ModalityMask tgt_mask = make_mask(targets);
  for (int i : tgt_mask.indices())
    if (src_mask[i]) throw TaskError("modality " + modality_names()[static_cast<size_t>(i)] + " requested as both source and target");

  auto model = load_checkpoint<float>(ckpt);
  MultiModalSample sample = read_slice(input_dir, model.registry);
  if (!src_mask.dominated_by(sample.availability))
    throw TaskError("requested sources " + src_mask.to_string() + " not available in input slice (" +
                    sample.availability.to_string() + ")");
  require_output_dir(out, overwrite);
  write_run_stub(out, "synthesize",
                 json{{"checkpoint", ckpt.string()}, {"input", input_dir.string()}, {"sources", sources}, {"targets", targets}});

  Tensor<float> X = mask_input(sample.images, src_mask, sample.availability);
  Tape<float> tape;
  auto nodes = model.gen.forward(tape, X, src_mask, sample.dataset_id, tgt_mask, nullptr);

  MultiModalSample result;
  result.dataset_id = sample.dataset_id;
  result.case_id = sample.case_id;
  result.slice_index = sample.slice_index;
  result.availability = tgt_mask;
  result.images = TensorF({kNumModalities, sample.height(), sample.width()});
  int64_t hw = static_cast<int64_t>(sample.height()) * sample.width();
  for (int m : tgt_mask.indices()) {
    if (!nodes[static_cast<size_t>(m)])
      throw TaskError("target " + modality_names()[static_cast<size_t>(m)] + " is outside model coverage");
    const auto& v = nodes[static_cast<size_t>(m)]->v();
    std::copy(v.data(), v.data() + hw, result.images.data() + m * hw);
  }
  validate_sample(result, model.registry);
  write_slice(out, model.registry, result);

  if (montage) {
    int first_src = src_mask.indices().front();
    TensorF src_img({1, sample.height(), sample.width()});
    std::copy(sample.images.data() + first_src * hw, sample.images.data() + (first_src + 1) * hw, src_img.data());
    for (int m : tgt_mask.indices()) {
      TensorF synth({1, sample.height(), sample.width()});
      std::copy(result.images.data() + m * hw, result.images.data() + (m + 1) * hw, synth.data());
      TensorF truth({1, sample.height(), sample.width()});
      if (sample.availability[m])
        std::copy(sample.images.data() + m * hw, sample.images.data() + (m + 1) * hw, truth.data());
      write_montage_pgm(out / ("montage_" + modality_names()[static_cast<size_t>(m)] + ".pgm"), src_img, synth,
                        truth);
    }
  }
  std::cout << "synthesized " << tgt_mask.count() << " modalities into " << out << "\n";
  return 0;
}

int cmd_evaluate(const fs::path& ckpt, const fs::path& corpus_dir, const std::string& split_name,
                 const std::string& tasks_text, const fs::path& out, bool overwrite, bool montage) {
  if (tasks_text.empty()) throw ValidationError("empty task list");
  std::vector<SynthesisTask> tasks;
  size_t pos = 0;
  while (pos != std::string::npos) {
    auto comma = tasks_text.find(',', pos);
    tasks.push_back(parse_task(tasks_text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos)));
    pos = comma == std::string::npos ? comma : comma + 1;
  }

  auto probe = load_checkpoint<float>(ckpt);
  Split split = parse_split(split_name);
  Corpus corpus = load_corpus(corpus_dir, split, probe.train_frac, probe.split_seed);
  auto model = load_verified_checkpoint(ckpt, corpus);

  require_output_dir(out, overwrite);
  write_run_stub(out, "evaluate",
                 json{{"checkpoint", ckpt.string()}, {"split", split_name}, {"tasks", tasks_text}});

  std::vector<MetricRow> rows;
  for (const auto& task : tasks) {
    for (const auto& ds : model.registry.datasets) {
      if (!task.sources.dominated_by(ds.coverage) || !ds.coverage[task.target.index]) continue;
      MetricRow row;
      try {
        row = evaluate_task(model.gen, corpus.samples, model.registry, ds.identifier, task);
      } catch (const TaskError&) {
        continue;  // no evaluable samples in this split
      }
      rows.push_back(row);
      if (montage) {
        for (const auto& s : corpus.samples) {
          if (s.dataset_id != ds.identifier || !task.sources.dominated_by(s.availability) ||
              !s.availability[task.target.index])
            continue;
          int64_t hw = static_cast<int64_t>(s.height()) * s.width();
          Tensor<float> X = mask_input(s.images, task.sources, s.availability);
          Tape<float> tape;
          ModalityMask tmask;
          tmask.set(task.target.index);
          auto nodes = model.gen.forward(tape, X, task.sources, s.dataset_id, tmask, nullptr);
          TensorF synth = nodes[static_cast<size_t>(task.target.index)]->v();
          TensorF src_img({1, s.height(), s.width()}), truth({1, s.height(), s.width()});
          int first_src = task.sources.indices().front();
          std::copy(s.images.data() + first_src * hw, s.images.data() + (first_src + 1) * hw, src_img.data());
          std::copy(s.images.data() + task.target.index * hw, s.images.data() + (task.target.index + 1) * hw,
                    truth.data());
          write_montage_pgm(out / ("montage_" + ds.name + "_" + sanitize(task.label()) + ".pgm"), src_img, synth,
                            truth);
          break;
        }
      }
    }
  }
  if (rows.empty()) throw TaskError("no (task, dataset) pair had evaluable samples");
  write_metrics_csv(out / "metrics.csv", rows);
  std::cout << "wrote " << rows.size() << " metric rows to " << (out / "metrics.csv") << "\n";
  for (const auto& r : rows)
    std::cout << "  " << r.dataset << " " << r.task << "  PSNR " << r.psnr_cell() << "  SSIM " << r.ssim_cell()
              << "  (n=" << r.count << ")\n";
  return 0;
}

json error_record(const std::string& kind, const std::string& message) {
  return json{{"error", {{"kind", kind}, {"message", message}}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-dataset multi-modal MR synthesis workbench"};
  app.require_subcommand(1);

  std::string spec_path, config_path, corpus_dir, out_dir, ckpt_path, input_dir, resume_path;
  std::string pfm_flag, mcbs_flag, split_name = "test", tasks_text;
  std::vector<std::string> sources, targets;
  bool overwrite = false, montage = false;
  int epochs = -1, batch_size = -1;
  int64_t seed = -1;

  auto* gen = app.add_subcommand("generate-phantom", "render a deterministic phantom corpus from a registry spec");
  gen->add_option("--spec", spec_path, "registry/spec JSON document")->required();
  gen->add_option("--out", out_dir, "corpus output directory")->required();
  gen->add_flag("--overwrite", overwrite, "allow writing into a non-empty directory");

  auto* val = app.add_subcommand("validate-corpus", "check every slice against the datamodel invariants");
  val->add_option("--corpus", corpus_dir, "corpus directory")->required();

  auto* tr = app.add_subcommand("train", "train the synthesis model on a phantom corpus");
  tr->add_option("--config", config_path, "train config JSON")->required();
  tr->add_option("--corpus", corpus_dir, "corpus directory")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();
  tr->add_flag("--overwrite", overwrite, "allow writing into a non-empty directory");
  tr->add_option("--pfm", pfm_flag, "override pfm_enabled (on|off)");
  tr->add_option("--mcbs", mcbs_flag, "override mcbs_enabled (on|off)");
  tr->add_option("--epochs", epochs, "override epoch count");
  tr->add_option("--batch-size", batch_size, "override batch size");
  tr->add_option("--seed", seed, "override the global seed");
  tr->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* abl = app.add_subcommand("ablate", "train and compare ablation arms with matched seeds");
  abl->add_option("--config", config_path, "train config JSON with an 'ablation' section")->required();
  abl->add_option("--corpus", corpus_dir, "corpus directory")->required();
  abl->add_option("--out", out_dir, "report output directory")->required();
  abl->add_flag("--overwrite", overwrite, "allow writing into a non-empty directory");

  auto* syn = app.add_subcommand("synthesize", "impute target modalities for one slice directory");
  syn->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  syn->add_option("--input", input_dir, "slice directory (with meta.json)")->required();
  syn->add_option("--sources", sources, "source modality names")->required()->delimiter(',');
  syn->add_option("--targets", targets, "target modality names")->required()->delimiter(',');
  syn->add_option("--out", out_dir, "output directory")->required();
  syn->add_flag("--overwrite", overwrite, "allow writing into a non-empty directory");
  syn->add_flag("--montage", montage, "write side-by-side montage images");

  auto* ev = app.add_subcommand("evaluate", "score synthesis tasks on a corpus split");
  ev->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  ev->add_option("--corpus", corpus_dir, "corpus directory")->required();
  ev->add_option("--split", split_name, "train|test|all (default test)");
  ev->add_option("--tasks", tasks_text, "comma-separated tasks, e.g. T1->T1C,T1+T2->FLAIR")->required();
  ev->add_option("--out", out_dir, "output directory")->required();
  ev->add_flag("--overwrite", overwrite, "allow writing into a non-empty directory");
  ev->add_flag("--montage", montage, "write one montage per metric row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_record("usage", e.what()).dump() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate_phantom(spec_path, out_dir, overwrite);
    if (val->parsed()) return cmd_validate_corpus(corpus_dir);
    if (tr->parsed())
      return cmd_train(config_path, corpus_dir, out_dir, overwrite, pfm_flag, mcbs_flag, epochs, batch_size, seed,
                       resume_path);
    if (abl->parsed()) return cmd_ablate(config_path, corpus_dir, out_dir, overwrite);
    if (syn->parsed()) return cmd_synthesize(ckpt_path, input_dir, sources, targets, out_dir, overwrite, montage);
    if (ev->parsed()) return cmd_evaluate(ckpt_path, corpus_dir, split_name, tasks_text, out_dir, overwrite, montage);
  } catch (const ValidationError& e) {
    std::cerr << error_record("validation", e.what()).dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << error_record("runtime", e.what()).dump() << "\n";
    return 3;
  }
  return 2;
}
