#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "mmsynth/scheduler.hpp"

using namespace mmsynth;

namespace {

MultiModalSample stub_sample(int dataset_id, const std::string& avail_bits, const std::string& case_id,
                             int slice = 0) {
  MultiModalSample s;
  s.images = TensorF({kNumModalities, 4, 4});
  s.availability = ModalityMask::from_string(avail_bits);
  s.dataset_id = dataset_id;
  s.case_id = case_id;
  s.slice_index = slice;
  return s;
}

std::vector<MultiModalSample> random_corpus(Rng& rng, size_t max_samples = 200, int max_datasets = 4) {
  int n_datasets = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_datasets)));
  size_t n = 1 + rng.uniform_int(max_samples);
  std::vector<MultiModalSample> samples;
  for (size_t i = 0; i < n; ++i) {
    ModalityMask m;
    while (m.count() < 2) {
      for (int b = 0; b < kNumModalities; ++b) m.set(b, rng.uniform() < 0.5);
    }
    samples.push_back(stub_sample(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_datasets))),
                                  m.to_string(), "case_" + std::to_string(i)));
  }
  return samples;
}

// the full invariant battery for one plan
void check_plan_invariants(const BatchPlan& plan, const GroupMap& groups,
                           const std::vector<MultiModalSample>& samples, int batch_size) {
  std::map<GroupKey, int> batches_per_group;
  std::set<std::string> covered;
  for (const auto& batch : plan.batches) {
    REQUIRE(batch.members.size() == static_cast<size_t>(batch_size));
    for (const auto& ref : batch.members) {
      const auto& s = samples[ref.index];
      GroupKey key{s.dataset_id, s.availability};
      REQUIRE(key == batch.key);  // uniform key per batch
      covered.insert(ref.id);
    }
    batches_per_group[batch.key] += 1;
  }
  REQUIRE(covered.size() == samples.size());  // every sample appears >= 1x
  size_t padded_total = 0;
  for (const auto& [key, refs] : groups) {
    size_t expect = (refs.size() + batch_size - 1) / static_cast<size_t>(batch_size);
    REQUIRE(batches_per_group[key] == static_cast<int>(expect));
    size_t pad = expect * static_cast<size_t>(batch_size) - refs.size();
    REQUIRE(pad < static_cast<size_t>(batch_size));  // padding < B per group
    padded_total += pad;
  }
  REQUIRE(plan.padded_duplicates == padded_total);
}

}  // namespace

TEST_CASE("grouping keys on dataset id and availability jointly", "[scheduler]") {
  std::vector<MultiModalSample> samples;
  samples.push_back(stub_sample(0, "110000", "a"));
  samples.push_back(stub_sample(0, "110000", "b"));
  samples.push_back(stub_sample(1, "110000", "c"));
  auto groups = group_samples(samples);
  REQUIRE(groups.size() == 2);
  CHECK(groups.at(GroupKey{0, ModalityMask::from_string("110000")}).size() == 2);
  CHECK(groups.at(GroupKey{1, ModalityMask::from_string("110000")}).size() == 1);
}

TEST_CASE("identical keys collapse to one group", "[scheduler]") {
  std::vector<MultiModalSample> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(stub_sample(2, "101010", "c" + std::to_string(i)));
  auto groups = group_samples(samples);
  REQUIRE(groups.size() == 1);
  CHECK(groups.begin()->second.size() == 5);
}

TEST_CASE("grouping partitions the input multiset", "[scheduler]") {
  Rng rng(404);
  auto samples = random_corpus(rng, 100);
  auto groups = group_samples(samples);
  std::set<std::string> seen;
  size_t total = 0;
  for (const auto& [key, refs] : groups) {
    for (const auto& ref : refs) {
      CHECK(samples[ref.index].dataset_id == key.dataset_id);
      CHECK(samples[ref.index].availability == key.availability);
      CHECK(seen.insert(ref.id).second);  // pairwise disjoint
      ++total;
    }
  }
  CHECK(total == samples.size());
}

TEST_CASE("padding extends to the next batch multiple with in-group duplicates", "[scheduler]") {
  std::vector<SampleRef> group;
  for (size_t i = 0; i < 5; ++i) group.push_back({i, "0/c" + std::to_string(i) + "/0"});

  SECTION("size 5, B=2 -> one duplicate from the group") {
    Rng rng(1);
    auto padded = pad_group(group, 2, rng);
    REQUIRE(padded.size() == 6);
    for (size_t i = 0; i < 5; ++i) CHECK(padded[i].id == group[i].id);  // originals retained
    bool found = false;
    for (const auto& g : group) found = found || g.id == padded[5].id;
    CHECK(found);
  }
  SECTION("size 4, B=2 -> untouched") {
    Rng rng(1);
    auto four = std::vector<SampleRef>(group.begin(), group.begin() + 4);
    CHECK(pad_group(four, 2, rng).size() == 4);
  }
  SECTION("size 1, B=4 -> three forced copies") {
    Rng rng(1);
    auto one = std::vector<SampleRef>(group.begin(), group.begin() + 1);
    auto padded = pad_group(one, 4, rng);
    REQUIRE(padded.size() == 4);
    for (const auto& r : padded) CHECK(r.id == group[0].id);
  }
  SECTION("invalid batch size") {
    Rng rng(1);
    CHECK_THROWS_AS(pad_group(group, 0, rng), ConfigError);
  }
}

TEST_CASE("plan batch count is the sum of per-group ceilings", "[scheduler]") {
  std::vector<MultiModalSample> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(stub_sample(0, "110000", "a" + std::to_string(i)));
  for (int i = 0; i < 4; ++i) samples.push_back(stub_sample(1, "110000", "b" + std::to_string(i)));
  auto plan = build_epoch_plan(group_samples(samples), 2, 7);
  CHECK(plan.batches.size() == 5);  // 6/2 + 4/2
}

TEST_CASE("plans are deterministic per seed and reshuffled across seeds", "[scheduler]") {
  Rng rng(55);
  auto samples = random_corpus(rng, 120);
  auto groups = group_samples(samples);

  auto plan_a = build_epoch_plan(groups, 4, 1001);
  auto plan_b = build_epoch_plan(groups, 4, 1001);
  REQUIRE(plan_a.batches.size() == plan_b.batches.size());
  for (size_t i = 0; i < plan_a.batches.size(); ++i) {
    CHECK(plan_a.batches[i].key == plan_b.batches[i].key);
    for (size_t j = 0; j < plan_a.batches[i].members.size(); ++j)
      CHECK(plan_a.batches[i].members[j].id == plan_b.batches[i].members[j].id);
  }

  // across seeds: identical multiset of (key, batch count), different order
  int order_diff = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto p1 = build_epoch_plan(groups, 4, 2000 + static_cast<uint64_t>(trial));
    auto p2 = build_epoch_plan(groups, 4, 3000 + static_cast<uint64_t>(trial));
    std::map<GroupKey, int> c1, c2;
    for (const auto& b : p1.batches) c1[b.key]++;
    for (const auto& b : p2.batches) c2[b.key]++;
    CHECK(c1 == c2);
    for (size_t i = 0; i < p1.batches.size(); ++i) {
      if (!(p1.batches[i].key == p2.batches[i].key) ||
          p1.batches[i].members[0].id != p2.batches[i].members[0].id)
        ++order_diff;
    }
  }
  CHECK(order_diff > 0);
}

TEST_CASE("input permutation with a fixed seed preserves the per-group batch multiset", "[scheduler]") {
  Rng rng(77);
  auto samples = random_corpus(rng, 80);
  auto plan1 = build_epoch_plan(group_samples(samples), 3, 42);

  auto shuffled = samples;
  Rng perm(5);
  perm.shuffle(shuffled);
  auto plan2 = build_epoch_plan(group_samples(shuffled), 3, 42);

  auto batch_ids = [](const BatchPlan& p) {
    std::multiset<std::string> out;
    for (const auto& b : p.batches) {
      std::string key = b.key.to_string() + "|";
      for (const auto& r : b.members) key += r.id + ";";
      out.insert(key);
    }
    return out;
  };
  CHECK(batch_ids(plan1) == batch_ids(plan2));
}

TEST_CASE("plan invariants hold across randomized corpora", "[scheduler]") {
  for (uint64_t trial = 0; trial < 50; ++trial) {
    Rng rng = Rng::stream(9000, "corpus", trial);
    auto samples = random_corpus(rng, 200);
    int batch_size = 1 + static_cast<int>(rng.uniform_int(8));
    auto groups = group_samples(samples);
    auto plan = build_epoch_plan(groups, batch_size, trial);
    check_plan_invariants(plan, groups, samples, batch_size);
  }
}

TEST_CASE("empty group map is a configuration error", "[scheduler]") {
  GroupMap empty;
  CHECK_THROWS_AS(build_epoch_plan(empty, 2, 1), ConfigError);
}

TEST_CASE("plan dump emits one line per batch", "[scheduler]") {
  std::vector<MultiModalSample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(stub_sample(0, "110000", "c" + std::to_string(i)));
  auto plan = build_epoch_plan(group_samples(samples), 2, 3);
  std::ostringstream os;
  dump_plan(os, plan, 7);
  std::string text = os.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
  CHECK(text.find("7,0,0,110000,") == 0);
}
