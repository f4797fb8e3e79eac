#pragma once

#include <optional>
#include <string>
#include <vector>

#include "geom.hpp"

namespace sao::prot {

// 20 canonical amino acids (ids 0..19), X = unknown (20), MASK sentinel (21).
inline constexpr int kNumAminoAcids = 20;
inline constexpr int kUnknownId = 20;
inline constexpr int kMaskId = 21;
inline constexpr int kNumResidueClasses = 21;  // canonical + X

int aa_id_from_one_letter(char c);          // unknown letters map to X
char aa_one_letter_from_id(int id);
int aa_id_from_three_letter(const std::string& code);
const std::string& aa_three_letter_from_id(int id);

struct Torsions {
  std::optional<double> phi, psi, omega;
};

struct Protein {
  std::string id;
  std::vector<int> sequence;                // aa ids, no MASK
  std::vector<geom::BackboneResidue> backbone;
  std::vector<geom::Frame> frames;          // derived
  std::vector<Torsions> torsions;           // derived

  int length() const { return static_cast<int>(sequence.size()); }
  std::string sequence_string() const;

  /// Recomputes frames and torsions from the backbone.
  void derive();
  /// Enforces the structural invariants; throws on violation.
  void validate() const;
};

/// Builds a protein from sequence + backbone, deriving frames/torsions.
Protein make_protein(std::string id, std::vector<int> sequence,
                     std::vector<geom::BackboneResidue> backbone);

struct ParseOptions {
  bool strict = false;
};

/// Minimal fixed-column ATOM-record parser; one Protein per chain.
std::vector<Protein> parse_pdb_lite(const std::string& text,
                                    const ParseOptions& opts = {});

std::string write_protein_json(const Protein& p);
Protein read_protein_json(const std::string& text);

struct ManifestEntry {
  std::string pair_path;
  std::string label_path;
  std::string split;  // train | valid | test
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& name) const;
};

std::string write_manifest_json(const DatasetManifest& m);
DatasetManifest read_manifest_json(const std::string& text);

}  // namespace sao::prot
