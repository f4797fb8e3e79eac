#pragma once

#include "encoder.hpp"

namespace sao::heads {

struct HeadConfig {
  int proj_hidden = 128;
  int proj_dim = 64;
  int denoise_hidden = 128;
  int downstream_hidden = 64;
  int n_labels = 8;
};

/// Online-network heads: projector + predictor + denoise + mlm + downstream.
void init_head_params(ad::ParameterStore& store, const enc::EncoderConfig& enc_cfg,
                      const HeadConfig& cfg, std::mt19937_64& rng);

/// Target-network head: projector only.
void init_target_projector(ad::ParameterStore& store, const enc::EncoderConfig& enc_cfg,
                           const HeadConfig& cfg, std::mt19937_64& rng);

ad::Var project(const ad::ParameterStore& store, const ad::Var& pooled,
                const std::string& prefix = "projector");
ad::Var predict(const ad::ParameterStore& store, const ad::Var& z);

/// z = projector(pooled), q = predictor(z).
std::pair<ad::Var, ad::Var> project_predict(const ad::ParameterStore& store,
                                            const ad::Var& pooled);

struct DenoiseResult {
  ad::Var rotations;     // (N, 9) updated frame rotations
  ad::Var translations;  // (N, 3) updated frame translations
  ad::Var atoms;         // (4N, 3) rebuilt backbone, order N, CA, C, O per residue
};

/// Frame-local structure update: dO = exp(so3 head), dt = O_cur * t_local.
DenoiseResult denoise_update(const ad::ParameterStore& store, const ad::Var& nodes,
                             const std::vector<geom::Frame>& current_frames);

ad::Var mlm_logits(const ad::ParameterStore& store, const ad::Var& nodes);

ad::Var downstream_logits(const ad::ParameterStore& store, const ad::Var& pooled);

/// Numeric (non-differentiated) version of denoise_update for inference.
std::vector<geom::Frame> denoise_update_numeric(const std::vector<double>& head_out,
                                                const std::vector<geom::Frame>& frames);

}  // namespace sao::heads
