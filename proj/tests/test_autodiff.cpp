#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "mmsynth/autodiff.hpp"
#include "mmsynth/optim.hpp"
#include "mmsynth/rng.hpp"

using namespace mmsynth;

namespace {

using BuildFn = std::function<Node<double>*(Tape<double>&, const std::vector<Node<double>*>&)>;

double eval_scalar(const BuildFn& build, std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Node<double>*> nodes;
  for (auto& t : inputs) nodes.push_back(tape.external(&t, nullptr, false));
  return build(tape, nodes)->v()[0];
}

// central finite differences vs reverse-mode gradients, double precision
void gradcheck(std::vector<Tensor<double>> inputs, const BuildFn& build, double tol = 1e-6, double h = 1e-6) {
  std::vector<Tensor<double>> sinks;
  sinks.reserve(inputs.size());
  for (auto& t : inputs) sinks.push_back(Tensor<double>::zeros(t.shape()));
  {
    Tape<double> tape;
    std::vector<Node<double>*> nodes;
    for (size_t i = 0; i < inputs.size(); ++i) nodes.push_back(tape.external(&inputs[i], &sinks[i], true));
    Node<double>* loss = build(tape, nodes);
    REQUIRE(loss->v().numel() == 1);
    tape.backward(loss);
  }
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      double orig = inputs[i][j];
      inputs[i][j] = orig + h;
      double fp = eval_scalar(build, inputs);
      inputs[i][j] = orig - h;
      double fm = eval_scalar(build, inputs);
      inputs[i][j] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double analytic = sinks[i][j];
      double scale = std::max({1.0, std::abs(numeric), std::abs(analytic)});
      INFO("input " << i << " entry " << j << ": numeric " << numeric << " analytic " << analytic);
      REQUIRE(std::abs(numeric - analytic) <= tol * scale);
    }
  }
}

Tensor<double> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// keep values away from the lrelu/L1 kinks so finite differences are clean
Tensor<double> rand_tensor_off_kink(std::vector<int> shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = rng.uniform(0.05, 1.0);
    t[i] = rng.uniform() < 0.5 ? v : -v;
  }
  return t;
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences", "[autodiff]") {
  Rng rng(11);
  SECTION("stride 1") {
    gradcheck({rand_tensor_off_kink({2, 6, 6}, rng), rand_tensor({3, 2, 3, 3}, rng), rand_tensor({3}, rng)},
              [](Tape<double>& t, const std::vector<Node<double>*>& in) {
                Node<double>* y = conv2d(t, in[0], in[1], in[2], 1, 1);
                return mean_sq_to(t, y, 0.3);
              });
  }
  SECTION("stride 2") {
    gradcheck({rand_tensor_off_kink({2, 8, 8}, rng), rand_tensor({4, 2, 3, 3}, rng), rand_tensor({4}, rng)},
              [](Tape<double>& t, const std::vector<Node<double>*>& in) {
                Node<double>* y = conv2d(t, in[0], in[1], in[2], 2, 1);
                return mean_sq_to(t, y, -0.1);
              });
  }
  SECTION("pointwise 1x1") {
    gradcheck({rand_tensor({4, 5, 5}, rng), rand_tensor({2, 4, 1, 1}, rng), rand_tensor({2}, rng)},
              [](Tape<double>& t, const std::vector<Node<double>*>& in) {
                Node<double>* y = conv2d(t, in[0], in[1], in[2], 1, 0);
                return mean_sq_to(t, y, 0.0);
              });
  }
}

TEST_CASE("dense layer and activations match finite differences", "[autodiff]") {
  Rng rng(12);
  gradcheck({rand_tensor({6}, rng), rand_tensor({4, 6}, rng), rand_tensor({4}, rng)},
            [](Tape<double>& t, const std::vector<Node<double>*>& in) {
              Node<double>* y = linear(t, in[0], in[1], in[2]);
              y = tanh_op(t, y);
              return mean_sq_to(t, y, 0.2);
            });
  gradcheck({rand_tensor_off_kink({3, 4, 4}, rng)},
            [](Tape<double>& t, const std::vector<Node<double>*>& in) {
              return mean_sq_to(t, leaky_relu(t, in[0], 0.2), 0.1);
            });
  gradcheck({rand_tensor({2, 4, 4}, rng)}, [](Tape<double>& t, const std::vector<Node<double>*>& in) {
    return mean_sq_to(t, sigmoid(t, in[0]), 0.4);
  });
}

TEST_CASE("shape ops route gradients correctly", "[autodiff]") {
  Rng rng(13);
  gradcheck({rand_tensor({2, 3, 3}, rng)}, [](Tape<double>& t, const std::vector<Node<double>*>& in) {
    return mean_sq_to(t, upsample2x(t, in[0]), 0.25);
  });
  gradcheck({rand_tensor({2, 3, 3}, rng), rand_tensor({1, 3, 3}, rng)},
            [](Tape<double>& t, const std::vector<Node<double>*>& in) {
              return mean_sq_to(t, concat_channels(t, {in[0], in[1]}), -0.2);
            });
  gradcheck({rand_tensor({8}, rng)}, [](Tape<double>& t, const std::vector<Node<double>*>& in) {
    return mean_sq_to(t, slice_vec(t, in[0], 2, 4), 0.0);
  });
  gradcheck({rand_tensor({6}, rng)}, [](Tape<double>& t, const std::vector<Node<double>*>& in) {
    return mean_sq_to(t, gather_vec(t, in[0], {4, 1, 1, 5}), 0.1);
  });
}

TEST_CASE("modulation, softmax and fused streams match finite differences", "[autodiff]") {
  Rng rng(14);
  gradcheck({rand_tensor({3, 4, 4}, rng), rand_tensor({3}, rng), rand_tensor({3}, rng)},
            [](Tape<double>& t, const std::vector<Node<double>*>& in) {
              return mean_sq_to(t, film_modulate(t, in[0], in[1], in[2]), 0.15);
            });
  gradcheck({rand_tensor({5}, rng)}, [](Tape<double>& t, const std::vector<Node<double>*>& in) {
    return mean_sq_to(t, softmax_vec(t, in[0]), 0.2);
  });
  gradcheck({rand_tensor({2, 3, 3}, rng), rand_tensor({2, 3, 3}, rng), rand_tensor({2, 3, 3}, rng),
             rand_tensor({3}, rng)},
            [](Tape<double>& t, const std::vector<Node<double>*>& in) {
              Node<double>* w = softmax_vec(t, in[3]);
              return mean_sq_to(t, weighted_sum_maps(t, {in[0], in[1], in[2]}, w), 0.05);
            });
}

TEST_CASE("reduction ops match finite differences", "[autodiff]") {
  Rng rng(15);
  // keep |a-b| away from zero so the L1 subgradient is well-defined
  Tensor<double> a = rand_tensor({2, 4, 4}, rng, 0.5, 1.0);
  Tensor<double> b = rand_tensor({2, 4, 4}, rng, -1.0, -0.5);
  gradcheck({a, b}, [](Tape<double>& t, const std::vector<Node<double>*>& in) {
    return mean_abs_diff(t, in[0], in[1]);
  });
  gradcheck({rand_tensor({3, 3}, rng), rand_tensor({3, 3}, rng)},
            [](Tape<double>& t, const std::vector<Node<double>*>& in) {
              Node<double>* s1 = mean_sq_to(t, in[0], 0.5);
              Node<double>* s2 = mean_sq_to(t, in[1], -0.5);
              return scalar_combine(t, {{s1, 3.0}, {s2, -1.5}});
            });
}

TEST_CASE("composite network fragment matches finite differences", "[autodiff]") {
  Rng rng(16);
  gradcheck(
      {rand_tensor_off_kink({1, 8, 8}, rng), rand_tensor({4, 1, 3, 3}, rng), rand_tensor({4}, rng),
       rand_tensor({2, 4, 3, 3}, rng), rand_tensor({2}, rng)},
      [](Tape<double>& t, const std::vector<Node<double>*>& in) {
        Node<double>* h = conv2d(t, in[0], in[1], in[2], 2, 1);
        h = leaky_relu(t, h, 0.2);
        h = upsample2x(t, h);
        h = conv2d(t, h, in[3], in[4], 1, 1);
        h = sigmoid(t, h);
        return mean_sq_to(t, h, 0.5);
      },
      1e-5);
}

TEST_CASE("backward is deterministic and accumulates into sinks", "[autodiff]") {
  Rng rng(17);
  Tensor<double> x = rand_tensor({2, 4, 4}, rng);
  Tensor<double> w = rand_tensor({2, 2, 3, 3}, rng);
  Tensor<double> b = rand_tensor({2}, rng);
  auto run = [&](Tensor<double>& sink_w) {
    Tape<double> tape;
    Node<double>* xn = tape.external(&x, nullptr, false);
    Node<double>* wn = tape.external(&w, &sink_w, true);
    Node<double>* bn = tape.external(&b, nullptr, false);
    Node<double>* loss = mean_sq_to(tape, conv2d(tape, xn, wn, bn, 1, 1), 0.0);
    tape.backward(loss);
  };
  Tensor<double> g1 = Tensor<double>::zeros(w.shape());
  Tensor<double> g2 = Tensor<double>::zeros(w.shape());
  run(g1);
  run(g2);
  for (int64_t i = 0; i < g1.numel(); ++i) REQUIRE(g1[i] == g2[i]);
  // second backward into the same sink doubles it
  run(g1);
  for (int64_t i = 0; i < g1.numel(); ++i) REQUIRE(g1[i] == Catch::Approx(2.0 * g2[i]).epsilon(1e-12));
}

TEST_CASE("adam updates only touched parameters", "[autodiff]") {
  ParamStore<float> store;
  int a = store.add("a", Tensor<float>::full({4}, 1.0f));
  int b = store.add("b", Tensor<float>::full({4}, 1.0f));
  GradBuffer<float> grads(store.size());
  grads.slot(store, a)->fill(0.5f);
  adam_step(store, grads, 0.1, {});
  for (int i = 0; i < 4; ++i) {
    CHECK(store.at(a).value[i] < 1.0f);
    CHECK(store.at(b).value[i] == 1.0f);  // untouched parameter is bit-frozen
  }
  CHECK(store.at(a).adam.t == 1);
  CHECK(store.at(b).adam.t == 0);
}

TEST_CASE("worker gradient buffers reduce in a fixed order", "[autodiff]") {
  ParamStore<float> store;
  int p = store.add("p", Tensor<float>::zeros({3}));
  GradBuffer<float> w0(store.size()), w1(store.size()), master(store.size());
  w0.slot(store, p)->fill(1.0f);
  w1.slot(store, p)->fill(2.0f);
  master.reduce_from(w0, store);
  master.reduce_from(w1, store);
  for (int i = 0; i < 3; ++i) CHECK(master.grad(p)[i] == 3.0f);
}
