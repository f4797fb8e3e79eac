#pragma once

#include "heads.hpp"
#include "synth.hpp"

namespace sao::metrics {

/// Protein-centric maximum F-score over the threshold grid 0.01..1.00.
double fmax(const std::vector<std::vector<double>>& scores,
            const std::vector<std::vector<int>>& labels);

/// Micro-averaged area under the precision-recall step curve, ties grouped.
double aupr(const std::vector<std::vector<double>>& scores,
            const std::vector<std::vector<int>>& labels);

struct BiasReport {
  double mean_distance = 0.0;
  std::vector<double> per_pair;  // one entry per input pair, [0, 2]
};

/// Distance between l2-normalized pooled embeddings of each pair's two
/// structures. When dump_path is non-empty the raw pooled embeddings are
/// written there as JSON lines.
BiasReport embedding_bias(const ad::ParameterStore& params,
                          const enc::EncoderConfig& cfg,
                          const std::vector<synth::LabeledPair>& pairs,
                          const std::string& dump_path = "");

struct EvalReport {
  double fmax_experimental = 0.0;
  double fmax_predicted = 0.0;
  double aupr_experimental = 0.0;
  double aupr_predicted = 0.0;
  double fmax_gap = 0.0;  // predicted - experimental
  double aupr_gap = 0.0;
  int n_proteins = 0;
};

/// Label scores (sigmoid of downstream logits) for one structure.
std::vector<double> predict_scores(const ad::ParameterStore& params,
                                   const enc::EncoderConfig& cfg,
                                   const prot::Protein& p);

/// Evaluates the downstream model on experimental and predicted structures
/// of the same proteins; gaps are predicted minus experimental.
EvalReport performance_gap(const ad::ParameterStore& params,
                           const enc::EncoderConfig& cfg,
                           const std::vector<synth::LabeledPair>& test);

/// Per-residue L2 norm of the gradient of one label logit with respect to
/// the input feature rows.
std::vector<double> saliency(const ad::ParameterStore& params,
                             const enc::EncoderConfig& cfg,
                             const prot::Protein& p, int label_index);

}  // namespace sao::metrics
