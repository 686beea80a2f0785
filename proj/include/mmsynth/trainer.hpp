#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "mmsynth/losses.hpp"
#include "mmsynth/metrics.hpp"
#include "mmsynth/network.hpp"
#include "mmsynth/optim.hpp"
#include "mmsynth/phantom.hpp"
#include "mmsynth/scheduler.hpp"

namespace mmsynth {

struct Seeds {
  uint64_t global = 17;
  uint64_t init = 0;      // 0 => derived from global
  uint64_t schedule = 0;  // 0 => derived
  uint64_t condition = 0; // 0 => derived

  uint64_t init_seed() const { return init ? init : hash_mix(global, fnv1a64("init")); }
  uint64_t schedule_seed() const { return schedule ? schedule : hash_mix(global, fnv1a64("schedule")); }
  uint64_t condition_seed() const { return condition ? condition : hash_mix(global, fnv1a64("condition")); }

  json to_json() const {
    return json{{"global", global}, {"init", init}, {"schedule", schedule}, {"condition", condition}};
  }
  static Seeds from_json(const json& j) {
    Seeds s;
    s.global = j.value("global", s.global);
    s.init = j.value("init", s.init);
    s.schedule = j.value("schedule", s.schedule);
    s.condition = j.value("condition", s.condition);
    return s;
  }
};

struct AblationSpec {
  std::vector<std::string> arms;      // subset of {"full","no_pfm","no_mcbs"}
  std::vector<uint64_t> seeds;        // matched across arms
  std::vector<std::string> tasks;     // "T1->T2" style
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double lr0 = 2e-4;
  int lr_plateau_epochs = 50;
  LossWeights weights;
  Seeds seeds;
  bool pfm_enabled = true;
  bool mcbs_enabled = true;
  NetConfig network;
  DiscConfig disc;
  AdamConfig adam;
  int checkpoint_interval = 0;  // 0 => final checkpoint only
  double train_frac = 0.75;
  uint64_t split_seed = 1234;
  int workers = 0;  // 0 => min(batch_size, hardware threads)
  bool dump_plans = false;
  AblationSpec ablation;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr_plateau_epochs < 0 || lr_plateau_epochs > epochs)
      throw ConfigError("lr_plateau_epochs must satisfy 0 <= plateau <= epochs");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr0 <= 0) throw ConfigError("lr0 must be > 0");
    if (train_frac <= 0.0 || train_frac > 1.0) throw ConfigError("split.train_frac must be in (0,1]");
    weights.validate();
    network.validate();
  }

  int effective_batch_size() const { return mcbs_enabled ? batch_size : 1; }

  int effective_workers() const {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    int cap = workers > 0 ? workers : hw;
    return std::max(1, std::min(cap, effective_batch_size()));
  }

  json to_json() const {
    json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr0"] = lr0;
    j["lr_plateau_epochs"] = lr_plateau_epochs;
    j["loss_weights"] = weights.to_json();
    j["seeds"] = seeds.to_json();
    j["pfm_enabled"] = pfm_enabled;
    j["mcbs_enabled"] = mcbs_enabled;
    j["network"] = network.to_json();
    j["discriminator"] = disc.to_json();
    j["adam"] = json{{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
    j["checkpoint_interval"] = checkpoint_interval;
    j["split"] = json{{"train_frac", train_frac}, {"seed", split_seed}};
    j["workers"] = workers;
    j["dump_plans"] = dump_plans;
    if (!ablation.arms.empty()) {
      j["ablation"] = json{{"arms", ablation.arms}, {"seeds", ablation.seeds}, {"tasks", ablation.tasks}};
    }
    return j;
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_plateau_epochs = j.value("lr_plateau_epochs", c.lr_plateau_epochs);
    if (j.contains("loss_weights")) c.weights = LossWeights::from_json(j["loss_weights"]);
    if (j.contains("seeds")) c.seeds = Seeds::from_json(j["seeds"]);
    c.pfm_enabled = j.value("pfm_enabled", c.pfm_enabled);
    c.mcbs_enabled = j.value("mcbs_enabled", c.mcbs_enabled);
    if (j.contains("network")) c.network = NetConfig::from_json(j["network"]);
    if (j.contains("discriminator")) c.disc = DiscConfig::from_json(j["discriminator"]);
    if (j.contains("adam")) {
      c.adam.beta1 = j["adam"].value("beta1", c.adam.beta1);
      c.adam.beta2 = j["adam"].value("beta2", c.adam.beta2);
      c.adam.eps = j["adam"].value("eps", c.adam.eps);
    }
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    if (j.contains("split")) {
      c.train_frac = j["split"].value("train_frac", c.train_frac);
      c.split_seed = j["split"].value("seed", c.split_seed);
    }
    c.workers = j.value("workers", c.workers);
    c.dump_plans = j.value("dump_plans", c.dump_plans);
    if (j.contains("ablation")) {
      c.ablation.arms = j["ablation"].value("arms", std::vector<std::string>{});
      c.ablation.seeds = j["ablation"].value("seeds", std::vector<uint64_t>{});
      c.ablation.tasks = j["ablation"].value("tasks", std::vector<std::string>{});
    }
    c.validate();
    return c;
  }
};

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config is not valid JSON (" + path.string() + "): " + e.what());
  }
  return TrainConfig::from_json(j);
}

// Constant at lr0 through the plateau, then linear to zero at the final
// epoch; the limit at e == epochs is exactly 0.
inline double lr_at_epoch(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.epochs)
    throw ScheduleError("epoch " + std::to_string(epoch) + " outside schedule range [0," +
                        std::to_string(cfg.epochs) + "]");
  if (epoch >= cfg.epochs) return 0.0;
  if (epoch < cfg.lr_plateau_epochs) return cfg.lr0;
  return cfg.lr0 * static_cast<double>(cfg.epochs - epoch) / static_cast<double>(cfg.epochs - cfg.lr_plateau_epochs);
}

namespace detail {

// Runs fn(worker, begin, end) over contiguous chunks; rethrows the first
// worker exception. Chunk layout depends only on (n_items, n_workers), so
// gradient reduction order is stable.
template <typename Fn>
void parallel_chunks(int n_items, int n_workers, Fn&& fn) {
  n_workers = std::max(1, std::min(n_workers, n_items));
  if (n_workers == 1) {
    fn(0, 0, n_items);
    return;
  }
  int chunk = (n_items + n_workers - 1) / n_workers;
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n_workers));
  for (int w = 1; w < n_workers; ++w) {
    int begin = w * chunk, end = std::min(n_items, (w + 1) * chunk);
    if (begin >= end) break;
    threads.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  try {
    fn(0, 0, std::min(chunk, n_items));
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct StepStats {
  double lg = 0, syn = 0, rec = 0, adv = 0, ld = 0;
};

}  // namespace detail

struct EpochSummary {
  int epoch = 0;
  double lg_mean = 0.0;
  double ld_mean = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  int batches = 0;
  size_t skipped_samples = 0;
  size_t padded_duplicates = 0;
};

struct TrainResult {
  json manifest;
  std::filesystem::path final_checkpoint;
};

// Full optimization loop: plan epochs with the grouped scheduler, draw one
// synthesis condition per batch (legal because batches are mask-uniform),
// alternate one generator and one discriminator step per batch, stream loss
// rows to CSV, checkpoint on schedule.
inline TrainResult train(const TrainConfig& cfg_in, const std::filesystem::path& corpus_dir,
                         const std::filesystem::path& out_dir, const std::filesystem::path& resume = {}) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  cfg.network.pfm_enabled = cfg.pfm_enabled;
  const int B = cfg.effective_batch_size();
  const int n_workers = cfg.effective_workers();

  Corpus corpus = load_corpus(corpus_dir, Split::Train, cfg.train_frac, cfg.split_seed);
  if (corpus.samples.empty()) throw ValidationError("training split is empty");
  const DatasetRegistry& registry = corpus.registry;
  ModalityMask coverage = union_coverage(registry);

  std::vector<MultiModalSample> trainable;
  size_t skipped_single = 0;
  for (auto& s : corpus.samples) {
    if (s.availability.count() >= 2) {
      trainable.push_back(std::move(s));
    } else {
      ++skipped_single;
    }
  }
  if (trainable.empty()) throw ValidationError("no trainable samples (every sample has < 2 modalities)");

  std::filesystem::create_directories(out_dir / "checkpoints");

  ModelBundle<float> model;
  int start_epoch = 0;
  if (!resume.empty()) {
    model = load_checkpoint<float>(resume, cfg.seeds.init_seed());
    if (registry_hash(model.registry) != registry_hash(registry))
      throw ValidationError("refusing to resume: checkpoint registry hash does not match corpus");
    if (!model.corpus_manifest_hash.empty() && model.corpus_manifest_hash != corpus.manifest_hash)
      throw ValidationError("refusing to resume: checkpoint was trained on a different corpus");
    start_epoch = model.epoch;
  } else {
    model.net = cfg.network;
    model.disc = cfg.disc;
    model.registry = registry;
    model.gen = Generator<float>(cfg.network, coverage, static_cast<int>(registry.size()), cfg.seeds.init_seed());
    model.bank = DiscriminatorBank<float>(cfg.disc, coverage, hash_mix(cfg.seeds.init_seed(), fnv1a64("disc")));
  }
  model.corpus_manifest_hash = corpus.manifest_hash;
  model.train_frac = cfg.train_frac;
  model.split_seed = cfg.split_seed;

  json manifest;
  manifest["version"] = std::string(kVersionTag);
  manifest["config"] = cfg.to_json();
  manifest["registry_hash"] = registry_hash(registry);
  manifest["corpus_manifest_hash"] = corpus.manifest_hash;
  manifest["dataset_ids"] = json::object();
  for (const auto& d : registry.datasets) manifest["dataset_ids"][d.name] = d.identifier;
  manifest["status"] = "running";
  manifest["epochs"] = json::array();
  manifest["checkpoints"] = json::array();
  auto write_manifest = [&] {
    std::ofstream mf(out_dir / "manifest.json");
    if (!mf) throw IoError("cannot write manifest.json in " + out_dir.string());
    mf << manifest.dump(2) << "\n";
  };
  write_manifest();

  std::ofstream loss_csv(out_dir / "losses.csv");
  if (!loss_csv) throw IoError("cannot write losses.csv");
  loss_csv << "epoch,step,dataset_id,availability,condition,syn,rec,adv,d_loss\n";
  std::ofstream plan_csv;
  if (cfg.dump_plans) {
    plan_csv.open(out_dir / "plans.csv");
    plan_csv << "epoch,batch_idx,dataset_id,availability_bits,sample_ids\n";
  }

  GroupMap groups = group_samples(trainable);
  std::vector<GradBuffer<float>> gen_bufs, disc_bufs;
  for (int w = 0; w < n_workers; ++w) {
    gen_bufs.emplace_back(model.gen.params().size());
    disc_bufs.emplace_back(model.bank.params().size());
  }
  GradBuffer<float> gen_master(model.gen.params().size());
  GradBuffer<float> disc_master(model.bank.params().size());

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = lr_at_epoch(epoch, cfg);
    uint64_t epoch_seed = hash_mix(cfg.seeds.schedule_seed(), static_cast<uint64_t>(epoch));
    BatchPlan plan = build_epoch_plan(groups, B, epoch_seed);
    if (cfg.dump_plans) dump_plan(plan_csv, plan, epoch);

    double lg_sum = 0.0, ld_sum = 0.0;
    for (size_t bidx = 0; bidx < plan.batches.size(); ++bidx) {
      const Batch& batch = plan.batches[bidx];
      const ModalityMask& avail = batch.key.availability;
      int dataset_id = batch.key.dataset_id;
      Rng cond_rng = Rng::stream(cfg.seeds.condition_seed(), "condition", static_cast<uint64_t>(epoch), bidx);
      ModalityMask sc = sample_condition(avail, cond_rng);

      int nb = static_cast<int>(batch.members.size());
      std::vector<std::array<Tensor<float>, kNumModalities>> fakes(static_cast<size_t>(nb));
      std::vector<detail::StepStats> stats(static_cast<size_t>(n_workers));

      // generator step; discriminators run frozen inside the generator graph
      detail::parallel_chunks(nb, n_workers, [&](int worker, int begin, int end) {
        for (int si = begin; si < end; ++si) {
          const MultiModalSample& s = trainable[batch.members[static_cast<size_t>(si)].index];
          Tape<float> tape;
          Tensor<float> X = mask_input(s.images, sc, avail);
          auto yhat = model.gen.forward(tape, X, sc, dataset_id, avail, &gen_bufs[static_cast<size_t>(worker)]);
          std::array<Node<float>*, kNumModalities> disc_out{};
          for (int i = 0; i < kNumModalities; ++i) {
            if (avail[i] && !sc[i] && cfg.weights.adversarial > 0)
              disc_out[static_cast<size_t>(i)] =
                  model.bank.forward(tape, i, yhat[static_cast<size_t>(i)], nullptr);
          }
          auto g = build_generator_loss(tape, yhat, s.images, avail, sc, disc_out, cfg.weights);
          tape.backward(g.total, 1.0f / static_cast<float>(nb));
          LossReport r = g.report();
          auto& st = stats[static_cast<size_t>(worker)];
          st.lg += r.total / nb;
          st.syn += r.syn / nb;
          st.rec += r.rec / nb;
          st.adv += r.adv / nb;
          for (int i = 0; i < kNumModalities; ++i) {
            if (avail[i] && !sc[i]) fakes[static_cast<size_t>(si)][static_cast<size_t>(i)] =
                yhat[static_cast<size_t>(i)]->v();
          }
        }
      });
      for (int w = 0; w < n_workers; ++w) {
        gen_master.reduce_from(gen_bufs[static_cast<size_t>(w)], model.gen.params());
        gen_bufs[static_cast<size_t>(w)].clear();
      }
      // selective-supervision audit: decoder streams of unavailable
      // modalities must stay gradient-free
      for (int m = 0; m < kNumModalities; ++m) {
        if (avail[m]) continue;
        int wid = model.gen.params().find("gen.dec." + modality_names()[static_cast<size_t>(m)] + ".out.w");
        if (wid >= 0 && gen_master.touched(wid))
          throw Error("gradient audit failed: unavailable modality " + std::to_string(m) + " received gradient");
      }
      adam_step(model.gen.params(), gen_master, lr, cfg.adam);
      gen_master.clear();

      // discriminator step on detached syntheses
      detail::parallel_chunks(nb, n_workers, [&](int worker, int begin, int end) {
        for (int si = begin; si < end; ++si) {
          const MultiModalSample& s = trainable[batch.members[static_cast<size_t>(si)].index];
          Tape<float> tape;
          auto d = build_discriminator_loss(tape, model.bank, fakes[static_cast<size_t>(si)], s.images, avail, sc,
                                            &disc_bufs[static_cast<size_t>(worker)]);
          tape.backward(d.total, 1.0f / static_cast<float>(nb));
          stats[static_cast<size_t>(worker)].ld += d.report().total / nb;
        }
      });
      for (int w = 0; w < n_workers; ++w) {
        disc_master.reduce_from(disc_bufs[static_cast<size_t>(w)], model.bank.params());
        disc_bufs[static_cast<size_t>(w)].clear();
      }
      adam_step(model.bank.params(), disc_master, lr, cfg.adam);
      disc_master.clear();

      detail::StepStats step;
      for (const auto& st : stats) {
        step.lg += st.lg;
        step.syn += st.syn;
        step.rec += st.rec;
        step.adv += st.adv;
        step.ld += st.ld;
      }
      lg_sum += step.lg;
      ld_sum += step.ld;
      char row[256];
      std::snprintf(row, sizeof(row), "%d,%zu,%d,%s,%s,%.6f,%.6f,%.6f,%.6f\n", epoch, bidx, dataset_id,
                    avail.to_string().c_str(), sc.to_string().c_str(), step.syn, step.rec, step.adv, step.ld);
      loss_csv << row;
    }
    loss_csv.flush();

    EpochSummary summary;
    summary.epoch = epoch;
    summary.batches = static_cast<int>(plan.batches.size());
    summary.lg_mean = lg_sum / std::max<size_t>(1, plan.batches.size());
    summary.ld_mean = ld_sum / std::max<size_t>(1, plan.batches.size());
    summary.lr = lr;
    summary.skipped_samples = skipped_single;
    summary.padded_duplicates = plan.padded_duplicates;
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest["epochs"].push_back(json{{"epoch", summary.epoch},
                                      {"lg_mean", summary.lg_mean},
                                      {"ld_mean", summary.ld_mean},
                                      {"lr", summary.lr},
                                      {"seconds", summary.seconds},
                                      {"batches", summary.batches},
                                      {"skipped_samples", summary.skipped_samples},
                                      {"padded_duplicates", summary.padded_duplicates}});

    model.epoch = epoch + 1;
    if (cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 && epoch + 1 < cfg.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoints/epoch_%04d.bin", epoch + 1);
      save_checkpoint(out_dir / name, model);
      manifest["checkpoints"].push_back(name);
    }
    write_manifest();
  }

  auto final_path = out_dir / "checkpoint.bin";
  save_checkpoint(final_path, model);
  manifest["checkpoints"].push_back("checkpoint.bin");
  manifest["status"] = "completed";
  write_manifest();
  return TrainResult{manifest, final_path};
}

// ---------------------------------------------------------------------------
// Ablation harness: trains matched-seed arms and emits paired metric rows
// plus per-arm epoch timing.
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string arm;
  uint64_t seed = 0;
  MetricRow metrics;
  double mean_epoch_seconds = 0.0;
};

inline json run_ablation(const TrainConfig& base_cfg, const std::filesystem::path& corpus_dir,
                         const std::filesystem::path& out_dir) {
  const AblationSpec& spec = base_cfg.ablation;
  if (spec.arms.size() < 2) throw ConfigError("ablation needs at least 2 arms");
  if (spec.seeds.empty()) throw ConfigError("ablation needs at least 1 seed");
  if (spec.tasks.empty()) throw ConfigError("ablation needs at least 1 task");
  for (const auto& arm : spec.arms) {
    if (arm != "full" && arm != "no_pfm" && arm != "no_mcbs")
      throw ConfigError("unknown ablation arm '" + arm + "' (expected full|no_pfm|no_mcbs)");
  }

  {
    Corpus probe = load_corpus(corpus_dir, Split::All);
    if (probe.registry.size() < 2) throw ConfigError("ablation corpus must contain >= 2 datasets");
  }

  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> rows;
  json report;
  report["arms"] = json::array();

  for (const auto& arm : spec.arms) {
    for (uint64_t seed : spec.seeds) {
      TrainConfig cfg = base_cfg;
      cfg.ablation = {};
      cfg.seeds.global = seed;
      cfg.seeds.init = cfg.seeds.schedule = cfg.seeds.condition = 0;
      if (arm == "no_pfm") cfg.pfm_enabled = false;
      if (arm == "no_mcbs") cfg.mcbs_enabled = false;
      auto arm_dir = out_dir / (arm + "_seed" + std::to_string(seed));
      std::filesystem::create_directories(arm_dir);
      TrainResult result = train(cfg, corpus_dir, arm_dir);

      double secs = 0.0;
      for (const auto& e : result.manifest["epochs"]) secs += e["seconds"].get<double>();
      secs /= std::max<size_t>(1, result.manifest["epochs"].size());

      auto model = load_checkpoint<float>(result.final_checkpoint, cfg.seeds.init_seed());
      Corpus test = load_corpus(corpus_dir, Split::Test, cfg.train_frac, cfg.split_seed);
      for (const auto& task_text : spec.tasks) {
        SynthesisTask task = parse_task(task_text);
        for (const auto& ds : model.registry.datasets) {
          if (!task.sources.dominated_by(ds.coverage) || !ds.coverage[task.target.index]) continue;
          AblationRow row;
          row.arm = arm;
          row.seed = seed;
          row.mean_epoch_seconds = secs;
          try {
            row.metrics = evaluate_task(model.gen, test.samples, model.registry, ds.identifier, task);
          } catch (const TaskError&) {
            continue;  // no evaluable test samples for this combination
          }
          rows.push_back(std::move(row));
        }
      }
      report["arms"].push_back(json{{"arm", arm}, {"seed", seed}, {"mean_epoch_seconds", secs}});
    }
  }

  std::ofstream csv(out_dir / "ablation_report.csv");
  if (!csv) throw IoError("cannot write ablation_report.csv");
  csv << "arm,seed,dataset,task,psnr_mean,psnr_std,ssim_mean,ssim_std,n,mean_epoch_seconds\n";
  json jrows = json::array();
  for (const auto& r : rows) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%s,%llu,%s,%s,%.6f,%.6f,%.6f,%.6f,%d,%.3f\n", r.arm.c_str(),
                  static_cast<unsigned long long>(r.seed), r.metrics.dataset.c_str(), r.metrics.task.c_str(),
                  r.metrics.psnr_mean, r.metrics.psnr_std, r.metrics.ssim_mean, r.metrics.ssim_std,
                  r.metrics.count, r.mean_epoch_seconds);
    csv << buf;
    jrows.push_back(json{{"arm", r.arm},
                         {"seed", r.seed},
                         {"dataset", r.metrics.dataset},
                         {"task", r.metrics.task},
                         {"psnr_mean", r.metrics.psnr_mean},
                         {"ssim_mean", r.metrics.ssim_mean},
                         {"mean_epoch_seconds", r.mean_epoch_seconds}});
  }
  report["rows"] = jrows;
  std::ofstream jr(out_dir / "ablation_report.json");
  jr << report.dump(2) << "\n";
  return report;
}

}  // namespace mmsynth
