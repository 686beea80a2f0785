#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <map>

#include "mmsynth/losses.hpp"

using namespace mmsynth;

namespace {

Tensor<float> const_channels(const std::array<float, kNumModalities>& values, int size = 8) {
  Tensor<float> t({kNumModalities, size, size});
  for (int c = 0; c < kNumModalities; ++c)
    for (int i = 0; i < size * size; ++i) t.data()[c * size * size + i] = values[static_cast<size_t>(c)];
  return t;
}

// critical values of the chi-squared distribution at p = 0.01
double chi2_crit_99(int dof) {
  static const std::map<int, double> table = {{1, 6.634897}, {5, 15.086272}, {13, 27.688250}};
  return table.at(dof);
}

}  // namespace

TEST_CASE("input masking zeroes target channels and keeps sources exact", "[losses]") {
  Rng rng(1);
  Tensor<float> Y = Tensor<float>::randn({kNumModalities, 8, 8}, rng, 0.2f);
  for (int64_t i = 0; i < Y.numel(); ++i) Y[i] = std::min(1.0f, std::max(0.0f, Y[i] + 0.5f));
  auto all = ModalityMask::all();

  SECTION("all-ones condition is the identity") {
    auto X = mask_input(Y, all, all);
    for (int64_t i = 0; i < Y.numel(); ++i) REQUIRE(X[i] == Y[i]);
  }
  SECTION("all-zero condition annihilates") {
    ModalityMask none;
    auto X = mask_input(Y, none, all);
    for (int64_t i = 0; i < X.numel(); ++i) REQUIRE(X[i] == 0.0f);
  }
  SECTION("single-source condition") {
    auto X = mask_input(Y, make_mask({"T1"}), all);
    for (int i = 0; i < 64; ++i) REQUIRE(X[i] == Y[i]);
    for (int64_t i = 64; i < X.numel(); ++i) REQUIRE(X[i] == 0.0f);
  }
  SECTION("condition selecting an unavailable modality is refused") {
    CHECK_THROWS_AS(mask_input(Y, make_mask({"T1", "DWI"}), make_mask({"T1", "T2"})), ConstraintError);
  }
}

TEST_CASE("condition sampling is uniform over the 2^k-2 valid splits", "[losses]") {
  SECTION("two available modalities: both splits near 0.5") {
    auto m = make_mask({"T1", "FLAIR"});
    Rng rng(2024);
    std::map<std::string, int> counts;
    for (int i = 0; i < 10000; ++i) {
      auto sc = sample_condition(m, rng);
      REQUIRE(sc.dominated_by(m));
      REQUIRE(sc.count() >= 1);
      REQUIRE(sc.count() < m.count());
      counts[sc.to_string()]++;
    }
    REQUIRE(counts.size() == 2);
    for (const auto& [key, n] : counts) {
      CHECK(n > (0.5 - 0.05) * 10000);
      CHECK(n < (0.5 + 0.05) * 10000);
    }
  }
  SECTION("chi-squared uniformity for k = 3 and k = 4") {
    for (int k : {3, 4}) {
      std::vector<std::string> names(modality_names().begin(), modality_names().begin() + k);
      auto m = make_mask(names);
      int cells = (1 << k) - 2;
      Rng rng(31337 + static_cast<uint64_t>(k));
      std::map<std::string, int> counts;
      const int draws = 10000;
      for (int i = 0; i < draws; ++i) counts[sample_condition(m, rng).to_string()]++;
      REQUIRE(static_cast<int>(counts.size()) == cells);
      double expect = static_cast<double>(draws) / cells;
      double chi2 = 0;
      for (const auto& [key, n] : counts) chi2 += (n - expect) * (n - expect) / expect;
      INFO("k=" << k << " chi2=" << chi2);
      CHECK(chi2 < chi2_crit_99(cells - 1));
    }
  }
  SECTION("fewer than two available modalities is untrainable") {
    Rng rng(1);
    auto one = make_mask({"DWI"});
    CHECK_THROWS_AS(sample_condition(one, rng), UntrainableSampleError);
  }
}

TEST_CASE("generator loss vanishes on perfect predictions with fooled critics", "[losses]") {
  auto Y = const_channels({0.2f, 0.4f, 0.6f, 0.8f, 0.3f, 0.7f});
  auto avail = ModalityMask::all();
  auto sc = make_mask({"T1", "T2"});
  std::array<Tensor<float>, kNumModalities> disc;
  for (int i = 0; i < kNumModalities; ++i) {
    if (!sc[i]) disc[static_cast<size_t>(i)] = Tensor<float>::full({1, 2, 2}, 1.0f);
  }
  auto report = generator_loss(Y, Y, avail, sc, disc, {});
  CHECK(report.syn == 0.0);
  CHECK(report.rec == 0.0);
  CHECK(report.adv == 0.0);
  CHECK(report.total == 0.0);
}

TEST_CASE("hand-computed two-modality case", "[losses]") {
  // availability (1,1,0,0,0,0), condition (1,0,...): channel 0 reconstructs,
  // channel 1 synthesizes with a constant 0.25 error
  auto Y = const_channels({0.5f, 0.5f, 0, 0, 0, 0});
  auto Yhat = const_channels({0.5f, 0.25f, 0, 0, 0, 0});
  auto avail = make_mask({"T1", "T2"});
  auto sc = make_mask({"T1"});
  LossWeights w;
  w.adversarial = 0.0;  // adversarial ignored
  std::array<Tensor<float>, kNumModalities> disc{};
  auto report = generator_loss(Yhat, Y, avail, sc, disc, w);
  CHECK(report.syn == Catch::Approx(0.25).margin(1e-7));
  CHECK(report.syn_per_mod[1] == Catch::Approx(0.25).margin(1e-7));
  CHECK(report.rec == Catch::Approx(0.0).margin(1e-9));
  CHECK(report.total == Catch::Approx(100.0 * 0.25).margin(1e-5));
}

TEST_CASE("unavailable channels contribute nothing and receive no gradient", "[losses]") {
  auto Y = const_channels({0.5f, 0.5f, 0, 0, 0, 0});
  auto avail = make_mask({"T1", "T2"});
  auto sc = make_mask({"T1"});
  LossWeights w;
  w.adversarial = 0.0;

  // garbage in the masked channels of the prediction
  auto Yhat = const_channels({0.5f, 0.25f, 9.0f, -3.0f, 7.0f, 1.0f});
  std::array<Tensor<float>, kNumModalities> disc{};
  auto dirty = generator_loss(Yhat, Y, avail, sc, disc, w);
  auto clean = generator_loss(const_channels({0.5f, 0.25f, 0, 0, 0, 0}), Y, avail, sc, disc, w);
  CHECK(dirty.total == clean.total);
  for (int i = 2; i < kNumModalities; ++i) {
    CHECK(dirty.syn_per_mod[static_cast<size_t>(i)] == 0.0);
    CHECK(dirty.rec_per_mod[static_cast<size_t>(i)] == 0.0);
  }

  // graph-level: gradients of masked-channel predictions stay identically zero
  Tape<double> tape;
  std::array<Node<double>*, kNumModalities> yhat_nodes{};
  std::array<Tensor<double>, kNumModalities> storage;
  std::array<Tensor<double>, kNumModalities> sinks;
  Rng rng(5);
  for (int i = 0; i < kNumModalities; ++i) {
    storage[static_cast<size_t>(i)] = Tensor<double>::randn({1, 8, 8}, rng, 0.3);
    sinks[static_cast<size_t>(i)] = Tensor<double>::zeros({1, 8, 8});
    yhat_nodes[static_cast<size_t>(i)] =
        tape.external(&storage[static_cast<size_t>(i)], &sinks[static_cast<size_t>(i)], true);
  }
  Tensor<double> Yd = Y.cast<double>();
  std::array<Node<double>*, kNumModalities> disc_nodes{};
  auto g = build_generator_loss(tape, yhat_nodes, Yd, avail, sc, disc_nodes, w);
  tape.backward(g.total);
  for (int i = 0; i < kNumModalities; ++i) {
    double norm = 0;
    for (int64_t j = 0; j < sinks[static_cast<size_t>(i)].numel(); ++j)
      norm += std::abs(sinks[static_cast<size_t>(i)][j]);
    if (avail[i]) {
      CHECK(norm > 0.0);
    } else {
      CHECK(norm == 0.0);
    }
  }
}

TEST_CASE("loss report decomposes exactly into weighted components", "[losses]") {
  Rng rng(6);
  Tensor<float> Y = Tensor<float>::randn({kNumModalities, 8, 8}, rng, 0.2f);
  Tensor<float> Yhat = Tensor<float>::randn({kNumModalities, 8, 8}, rng, 0.2f);
  auto avail = make_mask({"T1", "T2", "FLAIR", "ADC"});
  // zero out unavailable channels so inputs are honest
  for (int c = 0; c < kNumModalities; ++c) {
    if (avail[c]) continue;
    for (int i = 0; i < 64; ++i) {
      Y.data()[c * 64 + i] = 0;
      Yhat.data()[c * 64 + i] = 0;
    }
  }
  auto sc = make_mask({"T1", "FLAIR"});
  std::array<Tensor<float>, kNumModalities> disc;
  for (int i = 0; i < kNumModalities; ++i)
    if (avail[i] && !sc[i]) disc[static_cast<size_t>(i)] = Tensor<float>::randn({1, 2, 2}, rng, 0.4f);
  LossWeights w{100.0, 30.0, 1.0};
  auto r = generator_loss(Yhat, Y, avail, sc, disc, w);
  CHECK(std::abs(r.total - (100.0 * r.syn + 30.0 * r.rec + 1.0 * r.adv)) < 1e-6);
}

TEST_CASE("consistent modality swap leaves the total invariant", "[losses]") {
  Rng rng(7);
  Tensor<float> Y = Tensor<float>::randn({kNumModalities, 8, 8}, rng, 0.2f);
  Tensor<float> Yhat = Tensor<float>::randn({kNumModalities, 8, 8}, rng, 0.2f);
  auto avail = make_mask({"T1", "T2", "T1C"});
  for (int c = 3; c < kNumModalities; ++c)
    for (int i = 0; i < 64; ++i) {
      Y.data()[c * 64 + i] = 0;
      Yhat.data()[c * 64 + i] = 0;
    }
  auto sc = make_mask({"T1"});
  std::array<Tensor<float>, kNumModalities> disc;
  disc[1] = Tensor<float>::randn({1, 2, 2}, rng, 0.3f);
  disc[2] = Tensor<float>::randn({1, 2, 2}, rng, 0.3f);
  auto base = generator_loss(Yhat, Y, avail, sc, disc, {});

  // swap modalities 1 and 2 everywhere: channels, masks, critic outputs
  auto swap_channels = [](Tensor<float> t, int a, int b) {
    for (int i = 0; i < 64; ++i) std::swap(t.data()[a * 64 + i], t.data()[b * 64 + i]);
    return t;
  };
  auto Y2 = swap_channels(Y, 1, 2);
  auto Yhat2 = swap_channels(Yhat, 1, 2);
  std::array<Tensor<float>, kNumModalities> disc2 = disc;
  std::swap(disc2[1], disc2[2]);
  auto swapped = generator_loss(Yhat2, Y2, avail, sc, disc2, {});
  CHECK(swapped.total == Catch::Approx(base.total).epsilon(1e-9));
}

TEST_CASE("discriminator loss follows the gated least-squares form", "[losses]") {
  auto avail = make_mask({"T1", "T2"});
  auto sc = make_mask({"T1"});
  auto Y = const_channels({0.5f, 0.5f, 0, 0, 0, 0}, 16);
  auto Yhat = const_channels({0.5f, 0.25f, 0, 0, 0, 0}, 16);

  SECTION("constant critic output 0.5 on one gated modality scores 0.5") {
    DiscriminatorBank<float> bank({.base_channels = 4, .stages = 2}, ModalityMask::all(), 5);
    for (size_t i = 0; i < bank.params().size(); ++i) {
      auto& p = bank.params().at(static_cast<int>(i));
      p.value.fill(0.0f);
      if (p.path == "disc.T2.out.b") p.value[0] = 0.5f;
    }
    auto r = discriminator_loss(Yhat, Y, avail, sc, bank);
    CHECK(r.total == Catch::Approx(0.25 + 0.25).margin(1e-6));
    CHECK(r.adv_per_mod[1] == Catch::Approx(0.5).margin(1e-6));
  }
  SECTION("pure reconstruction task gives zero loss and no gradient") {
    DiscriminatorBank<float> bank({.base_channels = 4, .stages = 2}, ModalityMask::all(), 6);
    GradBuffer<float> grads(bank.params().size());
    std::array<Tensor<float>, kNumModalities> fakes;
    Tape<float> tape;
    auto g = build_discriminator_loss(tape, bank, fakes, Y, avail, avail, &grads);
    tape.backward(g.total);
    CHECK(g.report().total == 0.0);
    for (size_t i = 0; i < bank.params().size(); ++i) CHECK_FALSE(grads.touched(static_cast<int>(i)));
  }
}

TEST_CASE("analytic loss gradients match finite differences on 8x8 tensors", "[losses]") {
  // double-precision bank so central differences resolve to ~1e-10
  DiscriminatorBank<double> bank({.base_channels = 4, .stages = 2}, ModalityMask::all(), 99);
  Rng rng(17);
  auto avail = make_mask({"T1", "T2", "FLAIR"});
  auto sc = make_mask({"T1"});
  LossWeights w{100.0, 30.0, 1.0};

  Tensor<double> Y({kNumModalities, 8, 8});
  for (int c : avail.indices())
    for (int i = 0; i < 64; ++i) Y.data()[c * 64 + i] = rng.uniform(0.05, 0.95);
  std::array<Tensor<double>, kNumModalities> yhat;
  for (int c : avail.indices()) {
    yhat[static_cast<size_t>(c)] = Tensor<double>({1, 8, 8});
    for (int i = 0; i < 64; ++i) yhat[static_cast<size_t>(c)][i] = rng.uniform(0.05, 0.95);
  }

  auto eval_lg = [&]() {
    Tape<double> tape;
    std::array<Node<double>*, kNumModalities> nodes{}, disc{};
    for (int c : avail.indices()) {
      nodes[static_cast<size_t>(c)] = tape.external(&yhat[static_cast<size_t>(c)], nullptr, false);
      if (!sc[c]) disc[static_cast<size_t>(c)] = bank.forward(tape, c, nodes[static_cast<size_t>(c)], nullptr);
    }
    return build_generator_loss(tape, nodes, Y, avail, sc, disc, w).total->v()[0];
  };

  // analytic gradients wrt every predicted channel
  std::array<Tensor<double>, kNumModalities> sinks;
  {
    Tape<double> tape;
    std::array<Node<double>*, kNumModalities> nodes{}, disc{};
    for (int c : avail.indices()) {
      sinks[static_cast<size_t>(c)] = Tensor<double>::zeros({1, 8, 8});
      nodes[static_cast<size_t>(c)] =
          tape.external(&yhat[static_cast<size_t>(c)], &sinks[static_cast<size_t>(c)], true);
      if (!sc[c]) disc[static_cast<size_t>(c)] = bank.forward(tape, c, nodes[static_cast<size_t>(c)], nullptr);
    }
    auto g = build_generator_loss(tape, nodes, Y, avail, sc, disc, w);
    tape.backward(g.total);
  }

  const double h = 1e-6;
  for (int c : avail.indices()) {
    for (int i = 0; i < 64; ++i) {
      double orig = yhat[static_cast<size_t>(c)][i];
      yhat[static_cast<size_t>(c)][i] = orig + h;
      double fp = eval_lg();
      yhat[static_cast<size_t>(c)][i] = orig - h;
      double fm = eval_lg();
      yhat[static_cast<size_t>(c)][i] = orig;
      double numeric = (fp - fm) / (2 * h);
      double analytic = sinks[static_cast<size_t>(c)][i];
      REQUIRE(std::abs(numeric - analytic) <= 1e-4 * std::max(1.0, std::abs(numeric)));
    }
  }
}
