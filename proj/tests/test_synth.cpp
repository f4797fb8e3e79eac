#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "synth.hpp"

using namespace sao;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::InvalidArgument;
}

bool proteins_equal(const prot::Protein& a, const prot::Protein& b) {
  if (a.sequence != b.sequence || a.length() != b.length()) return false;
  for (int i = 0; i < a.length(); ++i) {
    if ((a.backbone[i].n - b.backbone[i].n).norm() != 0.0) return false;
    if ((a.backbone[i].ca - b.backbone[i].ca).norm() != 0.0) return false;
    if ((a.backbone[i].c - b.backbone[i].c).norm() != 0.0) return false;
    if ((a.backbone[i].o - b.backbone[i].o).norm() != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("mix_seed separates substreams") {
  CHECK(synth::mix_seed(0, 0) != synth::mix_seed(0, 1));
  CHECK(synth::mix_seed(0, 0) != synth::mix_seed(1, 0));
  CHECK(synth::mix_seed(5, 9) == synth::mix_seed(5, 9));
}

TEST_CASE("synth_protein determinism and construction invariants") {
  prot::Protein a = synth::synth_protein(20, 123);
  prot::Protein b = synth::synth_protein(20, 123);
  CHECK(proteins_equal(a, b));
  prot::Protein c = synth::synth_protein(20, 124);
  CHECK_FALSE(proteins_equal(a, c));

  for (int i = 0; i + 1 < a.length(); ++i)
    CHECK((a.backbone[i + 1].ca - a.backbone[i].ca).norm() ==
          doctest::Approx(3.8).epsilon(1e-6));
  a.validate();

  CHECK(code_of([] { synth::synth_protein(1, 0); }) == ErrorCode::LengthOutOfRange);
  CHECK(code_of([] { synth::synth_protein(513, 0); }) == ErrorCode::LengthOutOfRange);
}

TEST_CASE("perturb: zero noise reproduces the structure") {
  prot::Protein p = synth::synth_protein(24, 9);
  synth::StructurePair pair = synth::perturb(p, {0.0, 0.0, false, 3});
  CHECK(proteins_equal(pair.experimental, pair.predicted));
  CHECK(pair.meta.rmsd == doctest::Approx(0.0).epsilon(1e-9));

  synth::StructurePair moved = synth::perturb(p, {0.0, 0.0, true, 3});
  CHECK(moved.meta.rmsd == doctest::Approx(0.0).epsilon(1e-6));
  // The global transform actually moved the atoms.
  CHECK((moved.predicted.backbone[0].ca - p.backbone[0].ca).norm() > 1e-3);
}

TEST_CASE("perturb: rmsd matches kabsch recomputation and grows with noise") {
  prot::Protein p = synth::synth_protein(32, 10);
  synth::StructurePair pair = synth::perturb(p, {0.8, 0.15, false, 3});
  std::vector<geom::Vec3> xs, ys;
  for (int i = 0; i < p.length(); ++i) {
    xs.push_back(pair.experimental.backbone[i].ca);
    ys.push_back(pair.predicted.backbone[i].ca);
  }
  CHECK(pair.meta.rmsd == doctest::Approx(geom::kabsch_rmsd(xs, ys)).epsilon(1e-9));
  CHECK(pair.meta.rmsd > 0.1);

  // Monte Carlo: per-residue translation noise of std sigma in each component
  // gives CA RMSD around sigma * sqrt(3), minus what superposition absorbs.
  double mean = 0;
  const int trials = 30;
  for (int t = 0; t < trials; ++t)
    mean += synth::perturb(p, {0.5, 0.0, false, static_cast<uint64_t>(100 + t)}).meta.rmsd;
  mean /= trials;
  CHECK(mean > 0.5);
  CHECK(mean < 0.5 * std::sqrt(3.0) * 1.2);
}

TEST_CASE("perturb determinism and validation") {
  prot::Protein p = synth::synth_protein(16, 11);
  synth::StructurePair a = synth::perturb(p, {0.8, 0.15, false, 7});
  synth::StructurePair b = synth::perturb(p, {0.8, 0.15, false, 7});
  CHECK(proteins_equal(a.predicted, b.predicted));
  a.predicted.validate();

  CHECK_THROWS_AS(synth::perturb(p, {-1.0, 0.15, false, 0}), Error);
}

TEST_CASE("make_mask_view count rule") {
  prot::Protein p100 = synth::synth_protein(100, 12);
  synth::MaskedView v = synth::make_mask_view(p100, 0.15, 1);
  CHECK(v.masked_positions.size() == 15);
  for (size_t i = 1; i < v.masked_positions.size(); ++i)
    CHECK(v.masked_positions[i - 1] < v.masked_positions[i]);
  for (int pos : v.masked_positions) {
    CHECK(pos >= 0);
    CHECK(pos < 100);
  }

  prot::Protein p3 = synth::synth_protein(3, 13);
  CHECK(synth::make_mask_view(p3, 0.15, 1).masked_positions.size() == 1);

  synth::MaskedView v2 = synth::make_mask_view(p100, 0.15, 1);
  CHECK(v2.masked_positions == v.masked_positions);
  synth::MaskedView v3 = synth::make_mask_view(p100, 0.15, 2);
  CHECK(v3.masked_positions != v.masked_positions);
}

TEST_CASE("synth_labels brute-force recount") {
  for (uint64_t seed : {21, 22, 23}) {
    prot::Protein p = synth::synth_protein(40, seed);
    std::vector<int> got = synth::synth_labels(p, 8);
    REQUIRE(got.size() == 8);

    std::vector<int> counts(8, 0);
    for (int a = 0; a < 40; ++a)
      for (int b = a + 4; b < 40; ++b)
        if ((p.backbone[a].ca - p.backbone[b].ca).norm() < 8.0)
          counts[(p.sequence[a] + p.sequence[b]) % 8]++;
    for (int j = 0; j < 8; ++j)
      CHECK(got[j] == (counts[j] > 40.0 / 16.0 ? 1 : 0));

    CHECK(synth::synth_labels(p, 8) == got);
  }
}

TEST_CASE("pair json round trip") {
  prot::Protein p = synth::synth_protein(14, 30);
  synth::StructurePair pair = synth::perturb(p, {0.8, 0.15, false, 5});
  synth::StructurePair back = synth::read_pair_json(synth::write_pair_json(pair));
  CHECK(back.meta.rmsd == doctest::Approx(pair.meta.rmsd).epsilon(1e-9));
  CHECK(back.experimental.sequence == pair.experimental.sequence);
  for (int i = 0; i < 14; ++i)
    CHECK((back.predicted.backbone[i].ca - pair.predicted.backbone[i].ca).norm() < 1e-6);

  CHECK(code_of([] { synth::read_pair_json("{}"); }) == ErrorCode::SchemaError);
}

TEST_CASE("build_dataset writes splits, manifest, and is reproducible") {
  fs::path dir = fs::temp_directory_path() / "sao_synth_test";
  fs::remove_all(dir);
  synth::DatasetConfig cfg;
  cfg.n_train = 6;
  cfg.n_valid = 2;
  cfg.n_test = 2;
  cfg.len_min = 8;
  cfg.len_max = 12;
  prot::DatasetManifest m = synth::build_dataset(dir.string(), cfg);
  CHECK(m.entries.size() == 10);
  CHECK(m.split("train").size() == 6);
  CHECK(m.split("valid").size() == 2);
  CHECK(m.split("test").size() == 2);
  CHECK(fs::exists(dir / "manifest.json"));

  std::vector<synth::LabeledPair> train = synth::load_split(dir.string(), "train");
  REQUIRE(train.size() == 6);
  for (const auto& lp : train) {
    CHECK(lp.labels.size() == 8);
    CHECK(lp.pair.experimental.length() >= 8);
    CHECK(lp.pair.experimental.length() <= 12);
    CHECK(lp.pair.experimental.id != lp.pair.predicted.id + "!");  // ids present
  }

  fs::path dir2 = fs::temp_directory_path() / "sao_synth_test2";
  fs::remove_all(dir2);
  synth::build_dataset(dir2.string(), cfg);
  for (const auto& e : m.entries) {
    std::ifstream a(dir / e.pair_path), b(dir2 / e.pair_path);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
