#pragma once

#include "heads.hpp"
#include "synth.hpp"

namespace sao::losses {

struct LossWeights {
  double gamma_align = 1.0;
  double gamma_mlm = 1.0;
  double gamma_mse = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double align_pred = 0.0;
  double align_mask = 0.0;
  double mlm = 0.0;
  double mse = 0.0;
  double total = 0.0;
};

/// 2 - 2 cos(q_out, target_z), computed as the squared distance of the
/// l2-normalized vectors. The caller is responsible for stop-gradient on
/// the target side.
ad::Var align_loss(const ad::Var& q_out, const ad::Var& target_z);

/// Mean cross entropy over masked positions only.
ad::Var mlm_loss(const ad::Var& logits, const std::vector<int>& sequence,
                 const std::vector<int>& masked_positions);

/// Local-frame MSE over all (frame, atom) combinations: for every predicted
/// frame i and every backbone atom of every residue, the error between the
/// atom expressed in frame i and its true counterpart expressed in the true
/// frame i. Optional 10 A clamp.
ad::Var fape_loss(const ad::Var& pred_rotations, const ad::Var& pred_translations,
                  const ad::Var& pred_atoms, const prot::Protein& truth,
                  bool clamp = false);

/// Convenience overload for two concrete structures.
ad::Var fape_loss(const prot::Protein& pred, const prot::Protein& truth,
                  bool clamp = false);

ad::Var bce_multilabel_loss(const ad::Var& logits, const std::vector<int>& labels);

struct TotalLossResult {
  ad::Var total;
  LossBreakdown breakdown;
};

/// Full pretraining objective over one structure pair (Algorithm-style):
/// online encoder on predicted + masked views, target encoder on the
/// experimental structure, denoising from the predicted structure toward
/// the experimental one.
TotalLossResult total_loss(const ad::ParameterStore& online,
                           const ad::ParameterStore& target,
                           const enc::EncoderConfig& enc_cfg,
                           const synth::StructurePair& pair,
                           const std::vector<int>& masked_positions,
                           const LossWeights& weights);

}  // namespace sao::losses
