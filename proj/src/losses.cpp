#include "losses.hpp"

#include <cmath>

namespace sao::losses {

using ad::Var;

void LossWeights::validate() const {
  if (!(gamma_align >= 0.0) || !(gamma_mlm >= 0.0) || !(gamma_mse >= 0.0))
    fail(ErrorCode::InvalidArgument, "loss weights must be finite and >= 0");
}

namespace {

double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Truth-side local coordinates: frame i applied inversely to every backbone
// atom of every residue, flattened (N * 4N, 3), atom order N, CA, C, O.
std::vector<double> truth_locals(const prot::Protein& truth) {
  const int n = truth.length();
  std::vector<double> out(static_cast<size_t>(n) * 4 * n * 3);
  size_t idx = 0;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      const auto& r = truth.backbone[k];
      for (const geom::Vec3* atom : {&r.n, &r.ca, &r.c, &r.o}) {
        geom::Vec3 local = geom::frame_apply_inverse(truth.frames[i], *atom);
        out[idx++] = local.x;
        out[idx++] = local.y;
        out[idx++] = local.z;
      }
    }
  return out;
}

}  // namespace

Var align_loss(const Var& q_out, const Var& target_z) {
  if (q_out.size() != target_z.size())
    fail(ErrorCode::ShapeMismatch, "align_loss: dimension mismatch");
  if (vec_norm(q_out.value()) < 1e-8 || vec_norm(target_z.value()) < 1e-8)
    fail(ErrorCode::DegenerateNorm, "align_loss: near-zero embedding norm");
  Var d = ad::sub(ad::l2_normalize_lastdim(q_out), ad::l2_normalize_lastdim(target_z));
  return ad::reduce_sum(ad::square(d));
}

Var mlm_loss(const Var& logits, const std::vector<int>& sequence,
             const std::vector<int>& masked_positions) {
  if (masked_positions.empty())
    fail(ErrorCode::EmptyMaskSet, "mlm_loss: no masked positions");
  std::vector<int64_t> rows;
  std::vector<int64_t> targets;
  for (int m : masked_positions) {
    if (m < 0 || m >= static_cast<int>(sequence.size()))
      fail(ErrorCode::MaskOutOfRange, "mlm_loss: mask position out of range");
    rows.push_back(m);
    targets.push_back(sequence[m]);
  }
  return ad::reduce_mean(ad::cross_entropy_logits(ad::gather_rows(logits, rows), targets));
}

Var fape_loss(const Var& pred_rotations, const Var& pred_translations,
              const Var& pred_atoms, const prot::Protein& truth, bool clamp) {
  const int64_t n = truth.length();
  if (pred_rotations.shape() != ad::Shape{n, 9} ||
      pred_translations.shape() != ad::Shape{n, 3} ||
      pred_atoms.shape() != ad::Shape{4 * n, 3})
    fail(ErrorCode::LengthMismatch, "fape_loss: structure lengths differ");
  Var pred_local = ad::to_local_frames(pred_rotations, pred_translations, pred_atoms);
  Var truth_local = Var::constant({n * 4 * n, 3}, truth_locals(truth));
  Var err = ad::sqrt_eps(
      ad::reduce_sum_lastdim(ad::square(ad::sub(pred_local, truth_local))), 1e-8);
  if (clamp) {
    // min(err, 10) written with relu
    err = ad::sub(Var::scalar(10.0), ad::relu(ad::sub(ad::scale(err, -1.0), Var::scalar(-10.0))));
  }
  return ad::reduce_mean(err);
}

Var fape_loss(const prot::Protein& pred, const prot::Protein& truth, bool clamp) {
  const int64_t n = pred.length();
  if (n != truth.length())
    fail(ErrorCode::LengthMismatch, "fape_loss: structure lengths differ");
  std::vector<double> rot(n * 9), trans(n * 3), atoms(4 * n * 3);
  for (int64_t i = 0; i < n; ++i) {
    std::copy(pred.frames[i].rotation.m.begin(), pred.frames[i].rotation.m.end(),
              rot.begin() + i * 9);
    trans[i * 3] = pred.frames[i].translation.x;
    trans[i * 3 + 1] = pred.frames[i].translation.y;
    trans[i * 3 + 2] = pred.frames[i].translation.z;
    const auto& r = pred.backbone[i];
    int a = 0;
    for (const geom::Vec3* atom : {&r.n, &r.ca, &r.c, &r.o}) {
      atoms[(i * 4 + a) * 3] = atom->x;
      atoms[(i * 4 + a) * 3 + 1] = atom->y;
      atoms[(i * 4 + a) * 3 + 2] = atom->z;
      ++a;
    }
  }
  return fape_loss(Var::constant({n, 9}, std::move(rot)),
                   Var::constant({n, 3}, std::move(trans)),
                   Var::constant({4 * n, 3}, std::move(atoms)), truth, clamp);
}

TotalLossResult total_loss(const ad::ParameterStore& online,
                           const ad::ParameterStore& target,
                           const enc::EncoderConfig& enc_cfg,
                           const synth::StructurePair& pair,
                           const std::vector<int>& masked_positions,
                           const LossWeights& weights) {
  weights.validate();
  const prot::Protein& exp_p = pair.experimental;
  const prot::Protein& pred_p = pair.predicted;

  enc::EncoderOutput e_pred = enc::encoder_forward(pred_p, {}, online, enc_cfg, "encoder/");
  enc::EncoderOutput e_mask =
      enc::encoder_forward(exp_p, masked_positions, online, enc_cfg, "encoder/");
  enc::EncoderOutput e_exp = enc::encoder_forward(exp_p, {}, target, enc_cfg, "encoder/");

  Var z_exp = ad::stop_gradient(heads::project(target, e_exp.pooled));
  auto [z_pred, q_pred] = heads::project_predict(online, e_pred.pooled);
  auto [z_mask, q_mask] = heads::project_predict(online, e_mask.pooled);

  Var align_pred = align_loss(q_pred, z_exp);
  Var align_mask = align_loss(q_mask, z_exp);
  Var align = ad::scale(ad::add(align_pred, align_mask), 0.5);

  Var mlm = mlm_loss(heads::mlm_logits(online, e_mask.nodes), exp_p.sequence,
                     masked_positions);

  heads::DenoiseResult denoised =
      heads::denoise_update(online, e_pred.nodes, pred_p.frames);
  Var mse = fape_loss(denoised.rotations, denoised.translations, denoised.atoms, exp_p);

  Var total = ad::add(ad::add(ad::scale(align, weights.gamma_align),
                              ad::scale(mlm, weights.gamma_mlm)),
                      ad::scale(mse, weights.gamma_mse));
  LossBreakdown b;
  b.align_pred = align_pred.item();
  b.align_mask = align_mask.item();
  b.mlm = mlm.item();
  b.mse = mse.item();
  b.total = total.item();
  return {total, b};
}

ad::Var bce_multilabel_loss(const Var& logits, const std::vector<int>& labels) {
  if (logits.size() != static_cast<int64_t>(labels.size()))
    fail(ErrorCode::LengthMismatch, "bce_multilabel_loss: K mismatch");
  std::vector<double> y(labels.begin(), labels.end());
  return ad::reduce_mean(ad::bce_with_logits(logits, y));
}

}  // namespace sao::losses
