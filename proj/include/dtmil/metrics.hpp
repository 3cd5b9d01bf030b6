#pragma once

// Slide-level evaluation: Mann-Whitney AUC, accuracy and F1 at a fixed
// threshold, and cross-seed mean with a normal-approximation 95% interval.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtmil/errors.hpp"

namespace dtmil {

// Rank-statistic AUC with ties credited 0.5. All intermediate quantities are
// dyadic rationals, so the result equals exhaustive pair enumeration exactly.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ValueError("auc: scores and labels differ in length");
  size_t n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValueError("auc: labels must be 0 or 1");
    (y == 1 ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0)
    throw SingleClassError("auc: undefined with " + std::to_string(n_pos) + " positives and " +
                           std::to_string(n_neg) + " negatives");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups, 1-based.
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * double(i + 1 + j + 1);
    for (size_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t t = 0; t < n; ++t)
    if (labels[t] == 1) rank_sum_pos += rank[t];
  const double u = rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1);
  return u / (double(n_pos) * double(n_neg));
}

struct AccF1 {
  double acc = 0.0;
  double f1 = 0.0;
  bool f1_degenerate = false;  // no positives and no positive predictions
};

// Predictions are score >= threshold. F1 = TP / (TP + (FP+FN)/2); the empty
// case (TP+FP+FN == 0) reports 1.0 with the degenerate flag set.
inline AccF1 acc_f1(std::span<const double> scores, std::span<const int> labels,
                    double threshold = 0.5) {
  if (scores.size() != labels.size())
    throw ValueError("acc_f1: scores and labels differ in length");
  if (scores.empty()) throw ValueError("acc_f1: empty input");
  long tp = 0, tn = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1)
      (pred ? tp : fn)++;
    else
      (pred ? fp : tn)++;
  }
  AccF1 out;
  out.acc = double(tp + tn) / double(scores.size());
  if (tp + fp + fn == 0) {
    out.f1 = 1.0;
    out.f1_degenerate = true;
  } else {
    out.f1 = double(tp) / (double(tp) + 0.5 * double(fp + fn));
  }
  return out;
}

struct Ci95 {
  double mean = 0.0;
  double half_width = 0.0;
};

// Normal-approximation interval: mean +/- 1.96 * sd / sqrt(n), sample sd.
inline Ci95 ci95(std::span<const double> values) {
  const size_t n = values.size();
  if (n < 2) throw ValueError("ci95: need at least 2 values, got " + std::to_string(n));
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= double(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(n - 1));
  return {mean, 1.96 * sd / std::sqrt(double(n))};
}

struct EvalReport {
  double auc = 0.0;
  double acc = 0.0;
  double f1 = 0.0;
  long n_pos = 0;
  long n_neg = 0;
  double threshold = 0.5;
  bool f1_degenerate = false;
};

inline EvalReport evaluate(std::span<const double> scores, std::span<const int> labels,
                           double threshold = 0.5) {
  EvalReport r;
  r.auc = auc(scores, labels);
  const AccF1 af = acc_f1(scores, labels, threshold);
  r.acc = af.acc;
  r.f1 = af.f1;
  r.f1_degenerate = af.f1_degenerate;
  r.threshold = threshold;
  for (int y : labels) (y == 1 ? r.n_pos : r.n_neg)++;
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j = {{"auc", r.auc},       {"acc", r.acc},
                      {"f1", r.f1},         {"n_pos", r.n_pos},
                      {"n_neg", r.n_neg},   {"threshold", r.threshold}};
  if (r.f1_degenerate) j["f1_degenerate"] = true;
  return j;
}

}  // namespace dtmil
