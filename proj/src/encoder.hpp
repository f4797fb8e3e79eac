#pragma once

#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "protein.hpp"

namespace sao::enc {

inline constexpr int kResidueFeatureDim = 63;  // 21 one-hot + 6 torsion + 36 local coords

struct EncoderConfig {
  int d_m = 64;
  int d_z = 32;
  int layers = 3;
  int heads = 4;
  int pe_channels = 16;
  int n_pair_types = 232;  // 21*22/2 unordered pairs + 1 reserved
  int ffn_hidden = 128;
  int pair_hidden = 16;

  void validate() const;
};

struct EncoderOutput {
  ad::Var nodes;   // (N, d_m)
  ad::Var pairs;   // (N*N, d_z)
  ad::Var pooled;  // (d_m)
};

/// Unordered residue-type pair index over the 21 residue classes.
int pair_type(int aa_i, int aa_j);

/// SE(3)-invariant per-residue input features, flattened (N, 63) row-major.
std::vector<double> residue_features(const prot::Protein& p);

/// Initializes all encoder parameters under the given path prefix.
void init_encoder_params(ad::ParameterStore& store, const EncoderConfig& cfg,
                         std::mt19937_64& rng, const std::string& prefix);

/// Pair-type aware Gaussian positional encoding, (N*N, D).
ad::Var pair_encoding(const prot::Protein& p, const std::vector<int>& mask,
                      const ad::ParameterStore& store, const EncoderConfig& cfg,
                      const std::string& prefix);

/// Full encoder forward. `mask` lists residues whose identity is hidden.
/// When `features` is a defined Var it is used as the input feature tensor
/// (e.g. a differentiable leaf for saliency); otherwise features are built
/// from the protein.
EncoderOutput encoder_forward(const prot::Protein& p, const std::vector<int>& mask,
                              const ad::ParameterStore& store,
                              const EncoderConfig& cfg, const std::string& prefix,
                              ad::Var features = {});

// Initialization helpers shared with the heads.
ad::Var init_weight(std::mt19937_64& rng, int64_t fan_in, int64_t fan_out);
ad::Var init_bias(int64_t n);

}  // namespace sao::enc
