#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "losses.hpp"

using namespace sao;
using ad::Var;

namespace {

enc::EncoderConfig small_enc() {
  enc::EncoderConfig cfg;
  cfg.d_m = 16;
  cfg.d_z = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.pe_channels = 4;
  cfg.ffn_hidden = 32;
  cfg.pair_hidden = 8;
  return cfg;
}

heads::HeadConfig small_heads() {
  heads::HeadConfig cfg;
  cfg.proj_hidden = 16;
  cfg.proj_dim = 8;
  cfg.denoise_hidden = 16;
  cfg.downstream_hidden = 8;
  cfg.n_labels = 4;
  return cfg;
}

prot::Protein transformed(const prot::Protein& p, const geom::Frame& g) {
  std::vector<geom::BackboneResidue> bb;
  for (const auto& r : p.backbone)
    bb.push_back({geom::frame_apply(g, r.n), geom::frame_apply(g, r.ca),
                  geom::frame_apply(g, r.c), geom::frame_apply(g, r.o)});
  return prot::make_protein(p.id, p.sequence, std::move(bb));
}

// Plain-loop reimplementation of the frame-aligned error for an oracle.
double fape_oracle(const prot::Protein& pred, const prot::Protein& truth, bool clamp) {
  const int n = pred.length();
  double sum = 0;
  int count = 0;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      const geom::BackboneResidue& pr = pred.backbone[k];
      const geom::BackboneResidue& tr = truth.backbone[k];
      const geom::Vec3* pa[4] = {&pr.n, &pr.ca, &pr.c, &pr.o};
      const geom::Vec3* ta[4] = {&tr.n, &tr.ca, &tr.c, &tr.o};
      for (int a = 0; a < 4; ++a) {
        geom::Vec3 lp = geom::frame_apply_inverse(pred.frames[i], *pa[a]);
        geom::Vec3 lt = geom::frame_apply_inverse(truth.frames[i], *ta[a]);
        double d = std::sqrt((lp - lt).dot(lp - lt) + 1e-8);
        if (clamp) d = std::min(d, 10.0);
        sum += d;
        ++count;
      }
    }
  return sum / count;
}

}  // namespace

TEST_CASE("align_loss exact values and range") {
  Var same = losses::align_loss(Var::constant({3}, {1, 2, 3}), Var::constant({3}, {1, 2, 3}));
  CHECK(same.item() == doctest::Approx(0.0).epsilon(1e-12));
  // Scale invariance of the normalized form.
  Var scaled = losses::align_loss(Var::constant({3}, {1, 2, 3}), Var::constant({3}, {2, 4, 6}));
  CHECK(scaled.item() == doctest::Approx(0.0).epsilon(1e-12));

  Var ortho = losses::align_loss(Var::constant({2}, {1, 0}), Var::constant({2}, {0, 1}));
  CHECK(ortho.item() == doctest::Approx(2.0).epsilon(1e-12));
  Var oppo = losses::align_loss(Var::constant({2}, {1, 0}), Var::constant({2}, {-1, 0}));
  CHECK(oppo.item() == doctest::Approx(4.0).epsilon(1e-12));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(6), b(6);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    double v = losses::align_loss(Var::constant({6}, a), Var::constant({6}, b)).item();
    CHECK(v >= -1e-12);
    CHECK(v <= 4.0 + 1e-12);
    // 2 - 2 cos identity.
    double na = 0, nb = 0, dot = 0;
    for (int i = 0; i < 6; ++i) { na += a[i] * a[i]; nb += b[i] * b[i]; dot += a[i] * b[i]; }
    CHECK(v == doctest::Approx(2 - 2 * dot / std::sqrt(na * nb)).epsilon(1e-9));
  }

  CHECK_THROWS_AS(losses::align_loss(Var::constant({2}, {0.0, 0.0}),
                                     Var::constant({2}, {1.0, 0.0})),
                  Error);
}

TEST_CASE("mlm_loss analytic values") {
  const int C = prot::kNumResidueClasses;
  Var uniform = Var::constant({4, C}, std::vector<double>(4 * C, 0.0));
  std::vector<int> seq{0, 5, 7, 19};
  double v = losses::mlm_loss(uniform, seq, {0, 1, 2, 3}).item();
  CHECK(v == doctest::Approx(std::log(21.0)).epsilon(1e-6));

  // Confident correct logits drive the loss to zero.
  std::vector<double> sharp(4 * C, 0.0);
  for (int i = 0; i < 4; ++i) sharp[i * C + seq[i]] = 1000.0;
  CHECK(losses::mlm_loss(Var::constant({4, C}, sharp), seq, {0, 1, 2, 3}).item() ==
        doctest::Approx(0.0).epsilon(1e-9));

  // Only masked rows count.
  std::vector<double> mixed(4 * C, 0.0);
  for (int c = 0; c < C; ++c) mixed[0 * C + c] = (c == seq[0]) ? 1000.0 : 0.0;
  CHECK(losses::mlm_loss(Var::constant({4, C}, mixed), seq, {0}).item() ==
        doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(losses::mlm_loss(uniform, seq, {}), Error);
  try {
    losses::mlm_loss(uniform, seq, {4});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MaskOutOfRange);
  }
}

TEST_CASE("fape_loss matches a brute-force oracle") {
  std::mt19937_64 rng(100);
  std::normal_distribution<double> g(0.0, 0.3);
  for (int n : {2, 3, 4}) {
    prot::Protein truth = synth::synth_protein(n, 100 + n);
    std::vector<geom::BackboneResidue> bb = truth.backbone;
    for (auto& r : bb)
      for (geom::Vec3* atom : {&r.n, &r.ca, &r.c, &r.o})
        *atom = *atom + geom::Vec3{g(rng), g(rng), g(rng)};
    prot::Protein pred = prot::make_protein(truth.id, truth.sequence, std::move(bb));
    double got = losses::fape_loss(pred, truth, false).item();
    CHECK(got == doctest::Approx(fape_oracle(pred, truth, false)).epsilon(1e-9));
    double gotc = losses::fape_loss(pred, truth, true).item();
    CHECK(gotc == doctest::Approx(fape_oracle(pred, truth, true)).epsilon(1e-9));
  }
}

TEST_CASE("fape_loss is zero for identical structures and invariant globally") {
  prot::Protein p = synth::synth_protein(5, 20);
  CHECK(losses::fape_loss(p, p, false).item() < 1e-4);

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  geom::Frame g{geom::rotation_from_so3({{u(rng), u(rng), u(rng)}}),
                {15 * u(rng), 15 * u(rng), 15 * u(rng)}};
  CHECK(losses::fape_loss(transformed(p, g), p, false).item() < 1e-4);

  // Clamping caps the contribution of far-off atoms.
  synth::StructurePair pair = synth::perturb(p, {8.0, 0.5, false, 3});
  double plain = losses::fape_loss(pair.predicted, pair.experimental, false).item();
  double clamped = losses::fape_loss(pair.predicted, pair.experimental, true).item();
  CHECK(clamped <= plain);
  CHECK(clamped <= 10.0 + 1e-9);
}

TEST_CASE("fape_loss length mismatch") {
  prot::Protein a = synth::synth_protein(4, 30);
  prot::Protein b = synth::synth_protein(5, 31);
  CHECK_THROWS_AS(losses::fape_loss(a, b, false), Error);
}

TEST_CASE("bce_multilabel_loss analytic values") {
  Var zeros = Var::constant({3}, {0.0, 0.0, 0.0});
  CHECK(losses::bce_multilabel_loss(zeros, {0, 1, 1}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
  Var sharp = Var::constant({2}, {1000.0, -1000.0});
  CHECK(losses::bce_multilabel_loss(sharp, {1, 0}).item() ==
        doctest::Approx(0.0).epsilon(1e-9));
  CHECK_THROWS_AS(losses::bce_multilabel_loss(zeros, {1, 0}), Error);
}

TEST_CASE("total_loss at copy initialization") {
  enc::EncoderConfig ec = small_enc();
  heads::HeadConfig hc = small_heads();
  ad::ParameterStore online, target;
  std::mt19937_64 rng(40);
  enc::init_encoder_params(online, ec, rng, "encoder/");
  heads::init_head_params(online, ec, hc, rng);
  for (const auto& [path, var] : online.params)
    if (path.rfind("encoder/", 0) == 0 || path.rfind("projector/", 0) == 0)
      target.add(path, Var::constant(var.shape(), var.value()));

  prot::Protein p = synth::synth_protein(10, 41);
  // No perturbation: both views see the same structure.
  synth::StructurePair pair = synth::perturb(p, {0.0, 0.0, false, 0});
  synth::MaskedView view = synth::make_mask_view(p, 0.2, 42);

  losses::LossWeights w{1.0, 0.0, 0.0};
  losses::TotalLossResult r =
      losses::total_loss(online, target, ec, pair, view.masked_positions, w);
  // Identical online/target networks and an identity predictor: the predicted
  // view aligns exactly with the target embedding.
  CHECK(r.breakdown.align_pred == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(r.breakdown.align_mask >= 0.0);
  CHECK(r.breakdown.total ==
        doctest::Approx(0.5 * (r.breakdown.align_pred + r.breakdown.align_mask))
            .epsilon(1e-9));

  losses::LossWeights all_zero{0.0, 0.0, 0.0};
  losses::TotalLossResult z =
      losses::total_loss(online, target, ec, pair, view.masked_positions, all_zero);
  CHECK(z.breakdown.total == doctest::Approx(0.0).epsilon(1e-12));

  losses::LossWeights bad{-1.0, 0.0, 0.0};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("total_loss gradients never reach the target store") {
  enc::EncoderConfig ec = small_enc();
  heads::HeadConfig hc = small_heads();
  ad::ParameterStore online, target;
  std::mt19937_64 rng(50);
  enc::init_encoder_params(online, ec, rng, "encoder/");
  heads::init_head_params(online, ec, hc, rng);
  for (const auto& [path, var] : online.params)
    if (path.rfind("encoder/", 0) == 0 || path.rfind("projector/", 0) == 0)
      target.add(path, Var::constant(var.shape(), var.value()));

  prot::Protein p = synth::synth_protein(8, 51);
  synth::StructurePair pair = synth::perturb(p, {0.5, 0.1, false, 1});
  synth::MaskedView view = synth::make_mask_view(p, 0.2, 2);
  losses::TotalLossResult r =
      losses::total_loss(online, target, ec, pair, view.masked_positions, {});
  ad::backward(r.total);

  for (const auto& [path, var] : target.params) {
    CHECK_FALSE(var.needs_grad());
    for (double g : var.grad()) CHECK(g == 0.0);
  }
  // While most online parameters do receive gradient.
  int nonzero = 0;
  for (const auto& [path, var] : online.params)
    for (double g : var.grad())
      if (g != 0.0) { ++nonzero; break; }
  CHECK(nonzero > 10);
}
