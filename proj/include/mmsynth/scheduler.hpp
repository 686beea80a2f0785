#pragma once

#include <algorithm>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mmsynth/datamodel.hpp"
#include "mmsynth/rng.hpp"

namespace mmsynth {

// Grouped batch scheduler: every emitted batch shares one (dataset id,
// availability) key, so all samples of a batch activate the same network
// streams and a whole batch can be processed as one unit.

struct GroupKey {
  int dataset_id = -1;
  ModalityMask availability;

  bool operator==(const GroupKey& o) const {
    return dataset_id == o.dataset_id && availability == o.availability;
  }
  bool operator<(const GroupKey& o) const {
    if (dataset_id != o.dataset_id) return dataset_id < o.dataset_id;
    return availability < o.availability;
  }
  std::string to_string() const { return std::to_string(dataset_id) + ":" + availability.to_string(); }
};

// Index into the caller's sample vector plus the canonical identity used for
// ordering and plan dumps.
struct SampleRef {
  size_t index = 0;
  std::string id;  // "<dataset_id>/<case_id>/<slice_index>"

  bool operator==(const SampleRef& o) const { return id == o.id; }
};

struct Batch {
  GroupKey key;
  std::vector<SampleRef> members;  // exactly B entries
};

struct BatchPlan {
  std::vector<Batch> batches;
  uint64_t epoch_seed = 0;
  int batch_size = 0;
  size_t padded_duplicates = 0;
};

inline SampleRef make_ref(size_t index, const MultiModalSample& s) {
  return SampleRef{index, std::to_string(s.dataset_id) + "/" + s.case_id + "/" + std::to_string(s.slice_index)};
}

using GroupMap = std::map<GroupKey, std::vector<SampleRef>>;

// Step 1: partition by (dataset identifier, availability vector). Members are
// canonically ordered by id so downstream shuffles are independent of the
// caller's sample order.
inline GroupMap group_samples(const std::vector<MultiModalSample>& samples) {
  GroupMap groups;
  for (size_t i = 0; i < samples.size(); ++i) {
    GroupKey key{samples[i].dataset_id, samples[i].availability};
    groups[key].push_back(make_ref(i, samples[i]));
  }
  for (auto& [key, refs] : groups) {
    std::sort(refs.begin(), refs.end(), [](const SampleRef& a, const SampleRef& b) { return a.id < b.id; });
  }
  return groups;
}

// Step 2: pad to the next multiple of B with uniform draws (with replacement)
// from the group itself. Originals are always retained.
inline std::vector<SampleRef> pad_group(const std::vector<SampleRef>& group, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (group.empty()) throw ConfigError("pad_group: empty group");
  std::vector<SampleRef> padded = group;
  size_t target = ((group.size() + batch_size - 1) / batch_size) * static_cast<size_t>(batch_size);
  while (padded.size() < target) {
    padded.push_back(group[static_cast<size_t>(rng.uniform_int(group.size()))]);
  }
  return padded;
}

// Step 3: shuffle within each group, cut into batches of B, then shuffle the
// combined batch list. Padding and both shuffles are re-drawn per epoch seed.
inline BatchPlan build_epoch_plan(const GroupMap& groups, int batch_size, uint64_t epoch_seed) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (groups.empty()) throw ConfigError("build_epoch_plan: no groups");
  BatchPlan plan;
  plan.epoch_seed = epoch_seed;
  plan.batch_size = batch_size;
  for (const auto& [key, refs] : groups) {
    Rng rng = Rng::stream(epoch_seed, "group", static_cast<uint64_t>(key.dataset_id),
                          fnv1a64(key.availability.to_string()));
    auto padded = pad_group(refs, batch_size, rng);
    plan.padded_duplicates += padded.size() - refs.size();
    rng.shuffle(padded);
    for (size_t i = 0; i < padded.size(); i += static_cast<size_t>(batch_size)) {
      Batch b;
      b.key = key;
      b.members.assign(padded.begin() + static_cast<long>(i), padded.begin() + static_cast<long>(i) + batch_size);
      plan.batches.push_back(std::move(b));
    }
  }
  Rng order_rng = Rng::stream(epoch_seed, "batch_order");
  order_rng.shuffle(plan.batches);
  return plan;
}

// One line per batch: epoch,batch_idx,dataset_id,availability_bits,sample_ids...
inline void dump_plan(std::ostream& os, const BatchPlan& plan, int epoch) {
  for (size_t b = 0; b < plan.batches.size(); ++b) {
    const auto& batch = plan.batches[b];
    os << epoch << ',' << b << ',' << batch.key.dataset_id << ',' << batch.key.availability.to_string();
    for (const auto& ref : batch.members) os << ',' << ref.id;
    os << '\n';
  }
}

}  // namespace mmsynth
