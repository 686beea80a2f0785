#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mmsynth/losses.hpp"
#include "mmsynth/network.hpp"

namespace mmsynth {

// PSNR = 10 log10(MAX^2 / MSE); identical images return +inf (rendered as
// "inf"); aggregates cap individual values at 100 dB to keep means finite.
inline double psnr(const TensorF& y, const TensorF& yhat, double max_value) {
  if (!y.same_shape(yhat)) throw ShapeError("psnr: shape mismatch " + y.shape_str() + " vs " + yhat.shape_str());
  if (max_value <= 0.0) throw ValidationError("psnr: max_value must be > 0");
  double mse = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    double d = static_cast<double>(y[i]) - static_cast<double>(yhat[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(y.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_value * max_value / mse);
}

inline constexpr double kPsnrAggregateCap = 100.0;

struct SSIMParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }

  // normalized 2-D gaussian window
  std::vector<double> weights() const {
    std::vector<double> w(static_cast<size_t>(window) * window);
    int r = window / 2;
    double sum = 0.0;
    for (int i = 0; i < window; ++i) {
      for (int j = 0; j < window; ++j) {
        double di = i - r, dj = j - r;
        double v = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
        w[static_cast<size_t>(i) * window + j] = v;
        sum += v;
      }
    }
    for (auto& v : w) v /= sum;
    return w;
  }
};

// Windowed luminance/contrast/structure agreement, averaged over positions
// where the full window fits.
inline double ssim(const TensorF& y, const TensorF& yhat, const SSIMParams& params = {}) {
  if (!y.same_shape(yhat)) throw ShapeError("ssim: shape mismatch");
  int h, w;
  if (y.rank() == 2) {
    h = y.dim(0);
    w = y.dim(1);
  } else if (y.rank() == 3 && y.dim(0) == 1) {
    h = y.dim(1);
    w = y.dim(2);
  } else {
    throw ShapeError("ssim: expects a single-channel image");
  }
  int win = params.window;
  if (h < win || w < win) throw ShapeError("ssim: image smaller than window");
  auto weights = params.weights();
  double c1 = params.c1(), c2 = params.c2();
  const float* a = y.data();
  const float* b = yhat.data();
  double acc = 0.0;
  int64_t count = 0;
  for (int i = 0; i + win <= h; ++i) {
    for (int j = 0; j + win <= w; ++j) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int wi = 0; wi < win; ++wi) {
        for (int wj = 0; wj < win; ++wj) {
          double wt = weights[static_cast<size_t>(wi) * win + wj];
          double va = a[(i + wi) * w + (j + wj)];
          double vb = b[(i + wi) * w + (j + wj)];
          mx += wt * va;
          my += wt * vb;
          sxx += wt * (va * va);
          syy += wt * (vb * vb);
          sxy += wt * (va * vb);  // grouped so the kernel is exactly symmetric
        }
      }
      // written in symmetric primitives (mx*my, (mx+my)^2) so the result is
      // bit-identical under argument swap even with FMA contraction
      double cross = mx * my;
      double msum = mx + my;
      double sum_sq = msum * msum - 2.0 * cross;
      double var_x = sxx - mx * mx;
      double var_y = syy - my * my;
      double cov = sxy - cross;
      double num = (2.0 * cross + c1) * (2.0 * cov + c2);
      double den = (sum_sq + c1) * (var_x + var_y + c2);
      acc += num / den;
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

struct MetricRow {
  std::string task;     // e.g. "T1->T1C" or "T1+T2->FLAIR"
  std::string dataset;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
  int count = 0;
  int skipped = 0;

  // table-style cell, "27.72±2.10"
  std::string psnr_cell() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", psnr_mean, psnr_std);
    return buf;
  }
  std::string ssim_cell() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f±%.3f", ssim_mean, ssim_std);
    return buf;
  }
};

struct SynthesisTask {
  ModalityMask sources;
  Modality target{0};

  std::string label() const {
    std::string s;
    for (int i : sources.indices()) {
      if (!s.empty()) s += "+";
      s += modality_names()[static_cast<size_t>(i)];
    }
    return s + "->" + target.name();
  }
};

// "T1+T2->FLAIR" => sources {T1,T2}, target FLAIR
inline SynthesisTask parse_task(const std::string& text) {
  auto arrow = text.find("->");
  if (arrow == std::string::npos) throw ValidationError("task '" + text + "' must look like SRC[+SRC...]->TARGET");
  std::string lhs = text.substr(0, arrow);
  std::string rhs = text.substr(arrow + 2);
  std::vector<std::string> names;
  size_t pos = 0;
  while (pos != std::string::npos) {
    auto plus = lhs.find('+', pos);
    names.push_back(lhs.substr(pos, plus == std::string::npos ? std::string::npos : plus - pos));
    pos = plus == std::string::npos ? plus : plus + 1;
  }
  SynthesisTask task;
  task.sources = make_mask(names);
  task.target = Modality::from_name(rhs);
  if (task.sources[task.target.index]) throw TaskError("task '" + text + "': target is also a source");
  if (!task.sources.any()) throw TaskError("task '" + text + "': no sources");
  return task;
}

inline void accumulate_mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  stddev = std::sqrt(var);
}

// Runs the frozen generator over one dataset's samples with SC = sources and
// scores the requested target channel. Samples missing a source or the
// target ground truth are skipped and counted.
template <typename T>
MetricRow evaluate_task(Generator<T>& gen, const std::vector<MultiModalSample>& samples,
                        const DatasetRegistry& registry, int dataset_id, const SynthesisTask& task,
                        const SSIMParams& ssim_params = {}) {
  if (task.sources[task.target.index]) throw TaskError("evaluate_task: target is also a source");
  MetricRow row;
  row.task = task.label();
  row.dataset = registry.by_id(dataset_id).name;
  std::vector<double> psnrs, ssims;
  ModalityMask target_mask;
  target_mask.set(task.target.index);
  for (const auto& s : samples) {
    if (s.dataset_id != dataset_id) continue;
    if (!task.sources.dominated_by(s.availability) || !s.availability[task.target.index]) {
      ++row.skipped;
      continue;
    }
    Tensor<T> Y = s.images.template cast<T>();
    Tensor<T> X = mask_input(Y, task.sources, s.availability);
    Tape<T> tape;
    auto out = gen.forward(tape, X, task.sources, dataset_id, target_mask, nullptr);
    Node<T>* pred = out[static_cast<size_t>(task.target.index)];
    if (!pred) throw TaskError("evaluate_task: target outside model coverage");
    TensorF yhat = pred->v().template cast<float>();
    TensorF truth({1, s.height(), s.width()});
    const float* src = s.images.data() + static_cast<int64_t>(task.target.index) * s.height() * s.width();
    std::copy(src, src + truth.numel(), truth.data());
    double p = psnr(truth, yhat, 1.0);
    psnrs.push_back(std::min(p, kPsnrAggregateCap));
    ssims.push_back(ssim(truth, yhat, ssim_params));
  }
  if (psnrs.empty()) throw TaskError("evaluate_task: no evaluable samples for " + row.task + " on " + row.dataset);
  row.count = static_cast<int>(psnrs.size());
  accumulate_mean_std(psnrs, row.psnr_mean, row.psnr_std);
  accumulate_mean_std(ssims, row.ssim_mean, row.ssim_std);
  return row;
}

inline std::string metrics_csv_header() { return "task,dataset,psnr_mean,psnr_std,ssim_mean,ssim_std,n,skipped"; }

inline std::string metrics_csv_row(const MetricRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%.6f,%d,%d", r.task.c_str(), r.dataset.c_str(),
                r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std, r.count, r.skipped);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << metrics_csv_header() << "\n";
  for (const auto& r : rows) out << metrics_csv_row(r) << "\n";
}

// side-by-side 8-bit PGM: source | synthesized | ground truth | |error|
inline void write_montage_pgm(const std::filesystem::path& path, const TensorF& source, const TensorF& synth,
                              const TensorF& truth) {
  auto plane = [](const TensorF& t) {
    if (t.rank() == 2) return std::pair<int, int>{t.dim(0), t.dim(1)};
    return std::pair<int, int>{t.dim(1), t.dim(2)};
  };
  auto [h, w] = plane(source);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write montage: " + path.string());
  out << "P5\n" << (4 * w) << " " << h << "\n255\n";
  auto px = [](const TensorF& t, int i, int j, int w_) {
    return t.data()[static_cast<int64_t>(i) * w_ + j];
  };
  for (int i = 0; i < h; ++i) {
    std::string line;
    line.reserve(static_cast<size_t>(4) * w);
    auto put = [&](float v) {
      int q = static_cast<int>(std::lround(std::min(1.0f, std::max(0.0f, v)) * 255.0f));
      line.push_back(static_cast<char>(q));
    };
    for (int j = 0; j < w; ++j) put(px(source, i, j, w));
    for (int j = 0; j < w; ++j) put(px(synth, i, j, w));
    for (int j = 0; j < w; ++j) put(px(truth, i, j, w));
    for (int j = 0; j < w; ++j) put(std::abs(px(synth, i, j, w) - px(truth, i, j, w)));
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
  }
}

}  // namespace mmsynth
