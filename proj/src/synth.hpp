#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "protein.hpp"

namespace sao::synth {

struct PerturbationConfig {
  double sigma_t = 0.8;   // Angstrom, per-residue translation noise std
  double sigma_r = 0.15;  // radians, per-residue SO(3)-vector noise std
  bool apply_global = false;
  uint64_t seed = 0;

  void validate() const;
};

struct PairMeta {
  double sigma_t = 0.0;
  double sigma_r = 0.0;
  double rmsd = 0.0;  // Kabsch over CA at creation
};

struct StructurePair {
  prot::Protein experimental;
  prot::Protein predicted;
  PairMeta meta;
};

struct MaskedView {
  const prot::Protein* base = nullptr;
  std::vector<int> masked_positions;  // sorted
  double ratio = 0.0;
};

/// splitmix64-style seed derivation for independent substreams.
uint64_t mix_seed(uint64_t seed, uint64_t salt);

prot::Protein synth_protein(int length, uint64_t seed);

StructurePair perturb(const prot::Protein& p, const PerturbationConfig& cfg);

MaskedView make_mask_view(const prot::Protein& p, double ratio, uint64_t seed);

std::vector<int> synth_labels(const prot::Protein& p, int k = 8);

struct DatasetConfig {
  int n_train = 256, n_valid = 32, n_test = 64;
  int len_min = 48, len_max = 96;
  PerturbationConfig perturbation;
  int n_labels = 8;
  uint64_t seed = 7;
};

std::string write_pair_json(const StructurePair& pair);
StructurePair read_pair_json(const std::string& text);

/// Writes pair/label files plus manifest.json; returns the manifest.
prot::DatasetManifest build_dataset(const std::string& out_dir,
                                    const DatasetConfig& cfg);

struct LabeledPair {
  StructurePair pair;
  std::vector<int> labels;
};

/// Loads one split of a dataset directory written by build_dataset.
std::vector<LabeledPair> load_split(const std::string& dir, const std::string& split);

}  // namespace sao::synth
