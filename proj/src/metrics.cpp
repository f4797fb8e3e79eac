#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace sao::metrics {

using ad::Var;
using nlohmann::json;

namespace {

void check_shapes(const std::vector<std::vector<double>>& scores,
                  const std::vector<std::vector<int>>& labels) {
  if (scores.size() != labels.size())
    fail(ErrorCode::ShapeMismatch, "metrics: protein counts differ");
  for (size_t i = 0; i < scores.size(); ++i)
    if (scores[i].size() != labels[i].size())
      fail(ErrorCode::ShapeMismatch, "metrics: label counts differ at protein " +
                                         std::to_string(i));
}

std::vector<double> normalized(const std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<double> out(v.size());
  if (n < 1e-12) return out;
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

}  // namespace

double fmax(const std::vector<std::vector<double>>& scores,
            const std::vector<std::vector<int>>& labels) {
  check_shapes(scores, labels);
  bool any_positive = false;
  for (const auto& row : labels)
    for (int y : row)
      if (y) any_positive = true;
  if (!any_positive) fail(ErrorCode::NoPositiveLabels, "fmax: no positive labels");

  double best = 0.0;
  for (int ti = 1; ti <= 100; ++ti) {
    const double t = ti / 100.0;
    double pr_sum = 0.0;
    int pr_n = 0;
    double rc_sum = 0.0;
    int rc_n = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      int predicted = 0, tp = 0, truth = 0;
      for (size_t k = 0; k < scores[i].size(); ++k) {
        bool hit = scores[i][k] >= t;
        predicted += hit;
        truth += labels[i][k] != 0;
        tp += hit && labels[i][k] != 0;
      }
      if (predicted > 0) {
        pr_sum += static_cast<double>(tp) / predicted;
        ++pr_n;
      }
      if (truth > 0) {
        rc_sum += static_cast<double>(tp) / truth;
        ++rc_n;
      }
    }
    const double pr = pr_n > 0 ? pr_sum / pr_n : 0.0;
    const double rc = rc_n > 0 ? rc_sum / rc_n : 0.0;
    if (pr + rc > 0.0) best = std::max(best, 2.0 * pr * rc / (pr + rc));
  }
  return best;
}

double aupr(const std::vector<std::vector<double>>& scores,
            const std::vector<std::vector<int>>& labels) {
  check_shapes(scores, labels);
  std::vector<std::pair<double, int>> flat;
  for (size_t i = 0; i < scores.size(); ++i)
    for (size_t k = 0; k < scores[i].size(); ++k)
      flat.push_back({scores[i][k], labels[i][k] != 0 ? 1 : 0});

  int64_t positives = 0;
  for (const auto& [s, y] : flat) {
    (void)s;
    positives += y;
  }
  if (positives == 0 || positives == static_cast<int64_t>(flat.size()))
    fail(ErrorCode::DegenerateLabels, "aupr: needs at least one positive and one negative");

  std::stable_sort(flat.begin(), flat.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  double area = 0.0;
  double rc_prev = 0.0;
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < flat.size()) {
    size_t j = i;
    while (j < flat.size() && flat[j].first == flat[i].first) {
      tp += flat[j].second;
      fp += 1 - flat[j].second;
      ++j;
    }
    const double rc = static_cast<double>(tp) / positives;
    const double pr = static_cast<double>(tp) / (tp + fp);
    area += (rc - rc_prev) * pr;
    rc_prev = rc;
    i = j;
  }
  return area;
}

BiasReport embedding_bias(const ad::ParameterStore& params,
                          const enc::EncoderConfig& cfg,
                          const std::vector<synth::LabeledPair>& pairs,
                          const std::string& dump_path) {
  if (pairs.empty()) fail(ErrorCode::EmptyInput, "embedding_bias: no pairs");
  std::ofstream dump;
  if (!dump_path.empty()) {
    dump.open(dump_path, std::ios::trunc);
    if (!dump) fail(ErrorCode::IoError, "cannot open embedding dump " + dump_path);
  }

  BiasReport report;
  for (const synth::LabeledPair& item : pairs) {
    std::vector<double> e_exp =
        enc::encoder_forward(item.pair.experimental, {}, params, cfg, "encoder/")
            .pooled.value();
    std::vector<double> e_pred =
        enc::encoder_forward(item.pair.predicted, {}, params, cfg, "encoder/")
            .pooled.value();
    std::vector<double> a = normalized(e_exp);
    std::vector<double> b = normalized(e_pred);
    double sq = 0.0;
    for (size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
    report.per_pair.push_back(std::sqrt(sq));
    if (dump.is_open())
      dump << json{{"id", item.pair.experimental.id},
                   {"experimental", e_exp},
                   {"predicted", e_pred}}
                  .dump()
           << "\n";
  }
  report.mean_distance =
      std::accumulate(report.per_pair.begin(), report.per_pair.end(), 0.0) /
      static_cast<double>(report.per_pair.size());
  return report;
}

std::vector<double> predict_scores(const ad::ParameterStore& params,
                                   const enc::EncoderConfig& cfg,
                                   const prot::Protein& p) {
  enc::EncoderOutput out = enc::encoder_forward(p, {}, params, cfg, "encoder/");
  Var scores = ad::sigmoid(heads::downstream_logits(params, out.pooled));
  return scores.value();
}

EvalReport performance_gap(const ad::ParameterStore& params,
                           const enc::EncoderConfig& cfg,
                           const std::vector<synth::LabeledPair>& test) {
  if (test.empty()) fail(ErrorCode::EmptyInput, "performance_gap: no test pairs");
  std::vector<std::vector<double>> s_exp, s_pred;
  std::vector<std::vector<int>> labels;
  for (const synth::LabeledPair& item : test) {
    s_exp.push_back(predict_scores(params, cfg, item.pair.experimental));
    s_pred.push_back(predict_scores(params, cfg, item.pair.predicted));
    labels.push_back(item.labels);
  }
  EvalReport r;
  r.n_proteins = static_cast<int>(test.size());
  r.fmax_experimental = fmax(s_exp, labels);
  r.fmax_predicted = fmax(s_pred, labels);
  r.aupr_experimental = aupr(s_exp, labels);
  r.aupr_predicted = aupr(s_pred, labels);
  r.fmax_gap = r.fmax_predicted - r.fmax_experimental;
  r.aupr_gap = r.aupr_predicted - r.aupr_experimental;
  return r;
}

std::vector<double> saliency(const ad::ParameterStore& params,
                             const enc::EncoderConfig& cfg,
                             const prot::Protein& p, int label_index) {
  const int n = p.length();
  Var features =
      Var::leaf({n, enc::kResidueFeatureDim}, enc::residue_features(p));
  enc::EncoderOutput out =
      enc::encoder_forward(p, {}, params, cfg, "encoder/", features);
  Var logits = heads::downstream_logits(params, out.pooled);
  if (label_index < 0 || label_index >= logits.size())
    fail(ErrorCode::LabelOutOfRange,
         "saliency: label " + std::to_string(label_index) + " of " +
             std::to_string(logits.size()));
  std::vector<double> pick(logits.size(), 0.0);
  pick[label_index] = 1.0;
  Var selected = ad::reduce_sum(ad::mul(logits, Var::constant(logits.shape(), pick)));
  ad::backward(selected);

  const std::vector<double>& g = features.grad();
  std::vector<double> sal(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double sq = 0.0;
    for (int k = 0; k < enc::kResidueFeatureDim; ++k) {
      double v = g[i * enc::kResidueFeatureDim + k];
      sq += v * v;
    }
    sal[i] = std::sqrt(sq);
  }
  return sal;
}

}  // namespace sao::metrics
