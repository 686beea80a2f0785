#pragma once

#include <array>
#include <cmath>

#include "mmsynth/autodiff.hpp"
#include "mmsynth/network.hpp"
#include "mmsynth/rng.hpp"

namespace mmsynth {

// Selective supervision: every term is gated by the availability mask M and
// the synthesis condition SC, so channels without ground truth (m_i = 0)
// contribute nothing, reconstruction supervises sources (sc_i = 1) and the
// synthesis + adversarial terms supervise targets (sc_i = 0, m_i = 1).

struct LossWeights {
  double synthesis = 100.0;
  double reconstruction = 30.0;
  double adversarial = 1.0;

  void validate() const {
    if (synthesis < 0 || reconstruction < 0 || adversarial < 0)
      throw ConfigError("loss weights must be nonnegative");
  }

  json to_json() const {
    return json{{"synthesis", synthesis}, {"reconstruction", reconstruction}, {"adversarial", adversarial}};
  }
  static LossWeights from_json(const json& j) {
    LossWeights w;
    w.synthesis = j.value("synthesis", w.synthesis);
    w.reconstruction = j.value("reconstruction", w.reconstruction);
    w.adversarial = j.value("adversarial", w.adversarial);
    w.validate();
    return w;
  }
};

struct LossReport {
  double total = 0.0;
  double syn = 0.0, rec = 0.0, adv = 0.0;
  std::array<double, kNumModalities> syn_per_mod{};
  std::array<double, kNumModalities> rec_per_mod{};
  std::array<double, kNumModalities> adv_per_mod{};
};

// x_i = y_i * sc_i; refuses conditions that select unavailable modalities.
template <typename T>
Tensor<T> mask_input(const Tensor<T>& Y, const ModalityMask& condition, const ModalityMask& availability) {
  if (Y.rank() != 3 || Y.dim(0) != kNumModalities) throw ShapeError("mask_input: Y must be [6,H,W]");
  if (!condition.dominated_by(availability))
    throw ConstraintError("condition " + condition.to_string() + " selects unavailable modalities of " +
                          availability.to_string());
  Tensor<T> X({kNumModalities, Y.dim(1), Y.dim(2)});
  int64_t hw = static_cast<int64_t>(Y.dim(1)) * Y.dim(2);
  for (int c = 0; c < kNumModalities; ++c) {
    if (!condition[c]) continue;
    std::copy(Y.data() + c * hw, Y.data() + (c + 1) * hw, X.data() + c * hw);
  }
  return X;
}

// Uniform draw over all conditions dominated by M with at least one source
// and at least one target among the available modalities (2^k - 2 options).
inline ModalityMask sample_condition(const ModalityMask& availability, Rng& rng) {
  auto avail = availability.indices();
  int k = static_cast<int>(avail.size());
  if (k < 2)
    throw UntrainableSampleError("sample with " + std::to_string(k) +
                                 " available modalities admits no source/target split");
  uint64_t n_valid = (1ull << k) - 2;
  uint64_t r = rng.uniform_int(n_valid) + 1;  // 1 .. 2^k-2, skipping empty and full
  ModalityMask sc;
  for (int j = 0; j < k; ++j) {
    if (r & (1ull << j)) sc.set(avail[static_cast<size_t>(j)]);
  }
  return sc;
}

template <typename T>
struct GeneratorLossGraph {
  Node<T>* total = nullptr;
  Node<T>* syn = nullptr;
  Node<T>* rec = nullptr;
  Node<T>* adv = nullptr;
  std::array<Node<T>*, kNumModalities> syn_terms{};
  std::array<Node<T>*, kNumModalities> rec_terms{};
  std::array<Node<T>*, kNumModalities> adv_terms{};

  LossReport report() const {
    LossReport r;
    for (int i = 0; i < kNumModalities; ++i) {
      if (syn_terms[static_cast<size_t>(i)]) r.syn_per_mod[static_cast<size_t>(i)] = syn_terms[static_cast<size_t>(i)]->v()[0];
      if (rec_terms[static_cast<size_t>(i)]) r.rec_per_mod[static_cast<size_t>(i)] = rec_terms[static_cast<size_t>(i)]->v()[0];
      if (adv_terms[static_cast<size_t>(i)]) r.adv_per_mod[static_cast<size_t>(i)] = adv_terms[static_cast<size_t>(i)]->v()[0];
      r.syn += r.syn_per_mod[static_cast<size_t>(i)];
      r.rec += r.rec_per_mod[static_cast<size_t>(i)];
      r.adv += r.adv_per_mod[static_cast<size_t>(i)];
    }
    r.total = total ? static_cast<double>(total->v()[0]) : 0.0;
    return r;
  }
};

// L_G = w_syn * sum_i (1-sc_i) m_i L1(yhat_i, y_i)
//     + w_rec * sum_i sc_i m_i L1(yhat_i, y_i)
//     + w_adv * sum_i (1-sc_i) m_i MSE(Dis_i(yhat_i), 1)
// Pixel reduction is mean-per-modality; modalities are summed.
template <typename T>
GeneratorLossGraph<T> build_generator_loss(Tape<T>& tape, const std::array<Node<T>*, kNumModalities>& yhat,
                                           const Tensor<T>& Y, const ModalityMask& availability,
                                           const ModalityMask& condition,
                                           const std::array<Node<T>*, kNumModalities>& disc_out,
                                           const LossWeights& weights) {
  weights.validate();
  if (!condition.dominated_by(availability))
    throw ConstraintError("generator loss: condition must be dominated by availability");
  int64_t hw = static_cast<int64_t>(Y.dim(1)) * Y.dim(2);

  GeneratorLossGraph<T> g;
  std::vector<std::pair<Node<T>*, T>> syn_sum, rec_sum, adv_sum;
  for (int i = 0; i < kNumModalities; ++i) {
    if (!availability[i]) continue;  // gate (.)*m_i = 0: no term, no gradient
    Node<T>* pred = yhat[static_cast<size_t>(i)];
    if (!pred) throw ShapeError("generator loss: missing prediction for supervised modality " + std::to_string(i));
    Tensor<T> target({1, Y.dim(1), Y.dim(2)});
    std::copy(Y.data() + i * hw, Y.data() + (i + 1) * hw, target.data());
    Node<T>* truth = tape.input(std::move(target));
    Node<T>* l1 = mean_abs_diff(tape, pred, truth);
    if (condition[i]) {
      g.rec_terms[static_cast<size_t>(i)] = l1;
      rec_sum.push_back({l1, T(1)});
    } else {
      g.syn_terms[static_cast<size_t>(i)] = l1;
      syn_sum.push_back({l1, T(1)});
      if (disc_out[static_cast<size_t>(i)]) {
        Node<T>* a = mean_sq_to(tape, disc_out[static_cast<size_t>(i)], T(1));
        g.adv_terms[static_cast<size_t>(i)] = a;
        adv_sum.push_back({a, T(1)});
      } else if (weights.adversarial > 0) {
        throw ShapeError("generator loss: missing discriminator output for gated modality " + std::to_string(i));
      }
    }
  }
  auto zero_scalar = [&tape]() { return tape.input(Tensor<T>({1})); };
  g.syn = syn_sum.empty() ? zero_scalar() : scalar_combine(tape, syn_sum);
  g.rec = rec_sum.empty() ? zero_scalar() : scalar_combine(tape, rec_sum);
  g.adv = adv_sum.empty() ? zero_scalar() : scalar_combine(tape, adv_sum);
  g.total = scalar_combine(tape, {{g.syn, static_cast<T>(weights.synthesis)},
                                  {g.rec, static_cast<T>(weights.reconstruction)},
                                  {g.adv, static_cast<T>(weights.adversarial)}});
  return g;
}

// Value-level surface: evaluates the same graph on plain tensors.
template <typename T>
LossReport generator_loss(const Tensor<T>& yhat, const Tensor<T>& Y, const ModalityMask& availability,
                          const ModalityMask& condition, const std::array<Tensor<T>, kNumModalities>& disc_out,
                          const LossWeights& weights) {
  if (!yhat.same_shape(Y)) throw ShapeError("generator_loss: prediction/target shape mismatch");
  Tape<T> tape;
  int64_t hw = static_cast<int64_t>(Y.dim(1)) * Y.dim(2);
  std::array<Node<T>*, kNumModalities> yhat_nodes{};
  std::array<Node<T>*, kNumModalities> disc_nodes{};
  for (int i = 0; i < kNumModalities; ++i) {
    Tensor<T> ch({1, Y.dim(1), Y.dim(2)});
    std::copy(yhat.data() + i * hw, yhat.data() + (i + 1) * hw, ch.data());
    yhat_nodes[static_cast<size_t>(i)] = tape.input(std::move(ch));
    if (!disc_out[static_cast<size_t>(i)].empty()) {
      Tensor<T> d(disc_out[static_cast<size_t>(i)]);
      disc_nodes[static_cast<size_t>(i)] = tape.input(std::move(d));
    }
  }
  auto g = build_generator_loss(tape, yhat_nodes, Y, availability, condition, disc_nodes, weights);
  LossReport r = g.report();
  r.total = weights.synthesis * r.syn + weights.reconstruction * r.rec + weights.adversarial * r.adv;
  return r;
}

template <typename T>
struct DiscLossGraph {
  Node<T>* total = nullptr;
  std::array<Node<T>*, kNumModalities> fake_terms{};
  std::array<Node<T>*, kNumModalities> real_terms{};

  LossReport report() const {
    LossReport r;
    for (int i = 0; i < kNumModalities; ++i) {
      double fake = fake_terms[static_cast<size_t>(i)] ? fake_terms[static_cast<size_t>(i)]->v()[0] : 0.0;
      double real = real_terms[static_cast<size_t>(i)] ? real_terms[static_cast<size_t>(i)]->v()[0] : 0.0;
      r.adv_per_mod[static_cast<size_t>(i)] = fake + real;
      r.adv += fake + real;
    }
    r.total = r.adv;
    return r;
  }
};

// L_D = sum_i (1-sc_i) m_i ( MSE(Dis_i(yhat_i), 0) + MSE(Dis_i(y_i), 1) )
// Predictions are plain tensors here (already detached from the generator).
template <typename T>
DiscLossGraph<T> build_discriminator_loss(Tape<T>& tape, DiscriminatorBank<T>& bank,
                                          const std::array<Tensor<T>, kNumModalities>& yhat_detached,
                                          const Tensor<T>& Y, const ModalityMask& availability,
                                          const ModalityMask& condition, GradBuffer<T>* grads) {
  if (!condition.dominated_by(availability))
    throw ConstraintError("discriminator loss: condition must be dominated by availability");
  int64_t hw = static_cast<int64_t>(Y.dim(1)) * Y.dim(2);
  DiscLossGraph<T> g;
  std::vector<std::pair<Node<T>*, T>> terms;
  for (int i = 0; i < kNumModalities; ++i) {
    if (!availability[i] || condition[i]) continue;  // gate (1-sc_i)*m_i
    const auto& fake_img = yhat_detached[static_cast<size_t>(i)];
    if (fake_img.empty()) throw ShapeError("discriminator loss: missing synthesis for gated modality " + std::to_string(i));
    Tensor<T> fake_copy(fake_img);
    Node<T>* fake_out = bank.forward(tape, i, tape.input(std::move(fake_copy)), grads);
    Node<T>* fake = mean_sq_to(tape, fake_out, T(0));
    Tensor<T> real_img({1, Y.dim(1), Y.dim(2)});
    std::copy(Y.data() + i * hw, Y.data() + (i + 1) * hw, real_img.data());
    Node<T>* real_out = bank.forward(tape, i, tape.input(std::move(real_img)), grads);
    Node<T>* real = mean_sq_to(tape, real_out, T(1));
    g.fake_terms[static_cast<size_t>(i)] = fake;
    g.real_terms[static_cast<size_t>(i)] = real;
    terms.push_back({fake, T(1)});
    terms.push_back({real, T(1)});
  }
  g.total = terms.empty() ? tape.input(Tensor<T>({1})) : scalar_combine(tape, terms);
  return g;
}

template <typename T>
LossReport discriminator_loss(const Tensor<T>& yhat, const Tensor<T>& Y, const ModalityMask& availability,
                              const ModalityMask& condition, DiscriminatorBank<T>& bank) {
  if (!yhat.same_shape(Y)) throw ShapeError("discriminator_loss: prediction/target shape mismatch");
  Tape<T> tape;
  int64_t hw = static_cast<int64_t>(Y.dim(1)) * Y.dim(2);
  std::array<Tensor<T>, kNumModalities> fakes;
  for (int i = 0; i < kNumModalities; ++i) {
    if (!availability[i] || condition[i]) continue;
    fakes[static_cast<size_t>(i)] = Tensor<T>({1, Y.dim(1), Y.dim(2)});
    std::copy(yhat.data() + i * hw, yhat.data() + (i + 1) * hw, fakes[static_cast<size_t>(i)].data());
  }
  auto g = build_discriminator_loss(tape, bank, fakes, Y, availability, condition,
                                    static_cast<GradBuffer<T>*>(nullptr));
  return g.report();
}

}  // namespace mmsynth
