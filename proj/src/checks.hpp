#pragma once

#include <ostream>

#include "losses.hpp"

namespace sao::checks {

/// Applies a global rigid transform to every backbone atom and re-derives
/// frames and torsions.
prot::Protein transform_protein(const prot::Protein& p, const geom::Frame& g);

/// Property suites behind the `check` command. Each prints one line per
/// property and returns overall pass/fail.
bool run_frames_suite(std::ostream& out);
bool run_grads_suite(std::ostream& out);
bool run_equivariance_suite(std::ostream& out);

/// name in {"frames", "grads", "equivariance"}.
bool run_suite(const std::string& name, std::ostream& out);

}  // namespace sao::checks
