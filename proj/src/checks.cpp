#include "checks.hpp"

#include <cmath>
#include <iomanip>
#include <random>

namespace sao::checks {

using ad::Var;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, int64_t n, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Values bounded away from zero, for kinked ops like relu.
std::vector<double> random_offzero(std::mt19937_64& rng, int64_t n) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (double& x : v) x = (sign(rng) ? 1.0 : -1.0) * u(rng);
  return v;
}

geom::Frame random_frame(std::mt19937_64& rng, double max_angle = 2.8,
                         double max_shift = 10.0) {
  std::uniform_real_distribution<double> ang(-max_angle, max_angle);
  std::uniform_real_distribution<double> sh(-max_shift, max_shift);
  geom::Vec3 axis{ang(rng), ang(rng), ang(rng)};
  geom::Frame g;
  g.rotation = geom::rotation_from_so3({axis});
  g.translation = {sh(rng), sh(rng), sh(rng)};
  return g;
}

bool report(std::ostream& out, const std::string& name, double err, double tol) {
  bool pass = err <= tol && std::isfinite(err);
  out << (pass ? "ok   " : "FAIL ") << name << "  max_err=" << std::scientific
      << std::setprecision(3) << err << "  tol=" << tol << std::defaultfloat
      << "\n";
  return pass;
}

double rotation_diff(const geom::Rotation& a, const geom::Rotation& b) {
  double m = 0.0;
  for (int i = 0; i < 9; ++i) m = std::max(m, std::abs(a.m[i] - b.m[i]));
  return m;
}

double vec_diff(const geom::Vec3& a, const geom::Vec3& b) {
  return std::max({std::abs(a.x - b.x), std::abs(a.y - b.y), std::abs(a.z - b.z)});
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

enc::EncoderConfig small_encoder_config() {
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

heads::HeadConfig small_head_config() {
  heads::HeadConfig cfg;
  cfg.proj_hidden = 16;
  cfg.proj_dim = 8;
  cfg.denoise_hidden = 16;
  cfg.downstream_hidden = 16;
  return cfg;
}

}  // namespace

prot::Protein transform_protein(const prot::Protein& p, const geom::Frame& g) {
  std::vector<geom::BackboneResidue> backbone;
  backbone.reserve(p.backbone.size());
  for (const geom::BackboneResidue& r : p.backbone)
    backbone.push_back({geom::frame_apply(g, r.n), geom::frame_apply(g, r.ca),
                        geom::frame_apply(g, r.c), geom::frame_apply(g, r.o)});
  return prot::make_protein(p.id, p.sequence, std::move(backbone));
}

bool run_frames_suite(std::ostream& out) {
  std::mt19937_64 rng(2024);
  bool pass = true;

  double err = 0.0;
  for (int i = 0; i < 200; ++i) {
    std::uniform_real_distribution<double> ang(-2.9, 2.9);
    geom::So3Vector v{{ang(rng), ang(rng), ang(rng)}};
    if (i % 10 == 0) v.v = v.v * 1e-7;  // near-identity branch
    geom::Rotation r = geom::rotation_from_so3(v);
    geom::Rotation r2 = geom::rotation_from_so3(geom::so3_from_rotation(r));
    err = std::max(err, rotation_diff(r, r2));
  }
  pass &= report(out, "so3 exp/log round trip (200 cases)", err, 1e-8);

  err = 0.0;
  for (int i = 0; i < 200; ++i) {
    geom::Frame f = random_frame(rng);
    geom::Frame id = geom::frame_compose(f, geom::frame_invert(f));
    err = std::max(err, rotation_diff(id.rotation, geom::Rotation::identity()));
    err = std::max(err, vec_diff(id.translation, {0, 0, 0}));
    geom::Vec3 x{1.2, -0.7, 0.3};
    err = std::max(err, vec_diff(geom::frame_apply_inverse(f, geom::frame_apply(f, x)), x));
  }
  pass &= report(out, "frame compose/invert identities (200 cases)", err, 1e-9);

  err = 0.0;
  for (int i = 0; i < 200; ++i) {
    geom::Frame base = random_frame(rng);
    geom::BackboneResidue r = geom::backbone_from_frame(base);
    geom::Frame g = random_frame(rng);
    geom::Frame direct = geom::frame_from_backbone(
        geom::frame_apply(g, r.n), geom::frame_apply(g, r.ca), geom::frame_apply(g, r.c));
    geom::Frame composed = geom::frame_compose(g, base);
    err = std::max(err, rotation_diff(direct.rotation, composed.rotation));
    err = std::max(err, vec_diff(direct.translation, composed.translation));
  }
  pass &= report(out, "frame_from_backbone equivariance (200 cases)", err, 1e-9);

  geom::BackboneResidue st = geom::standard_backbone();
  geom::Frame f0 = geom::frame_from_backbone(st.n, st.ca, st.c);
  err = std::max(rotation_diff(f0.rotation, geom::Rotation::identity()),
                 vec_diff(f0.translation, {0, 0, 0}));
  pass &= report(out, "standard backbone has identity frame", err, 1e-6);

  return pass;
}

bool run_grads_suite(std::ostream& out) {
  std::mt19937_64 rng(77);
  bool pass = true;
  const double tol = 1e-4;
  auto leaf = [&](ad::Shape shape, std::vector<double> v) {
    return Var::leaf(std::move(shape), std::move(v));
  };

  struct OpCase {
    std::string name;
    std::function<Var(const std::vector<Var>&)> f;
    std::vector<Var> inputs;
  };
  std::vector<OpCase> cases;

  cases.push_back({"add/mul broadcast",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::mul(ad::add(in[0], in[1]), ad::add(in[0], in[2])));
                   },
                   {leaf({3, 4}, random_values(rng, 12)),
                    leaf({4}, random_values(rng, 4)), leaf({}, random_values(rng, 1))}});
  cases.push_back({"sub/neg/scale",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::square(ad::sub(ad::scale(in[0], 1.7), ad::neg(in[1]))));
                   },
                   {leaf({5}, random_values(rng, 5)), leaf({5}, random_values(rng, 5))}});
  cases.push_back({"relu",
                   [](const std::vector<Var>& in) { return ad::reduce_sum(ad::relu(in[0])); },
                   {leaf({7}, random_offzero(rng, 7))}});
  cases.push_back({"gelu/sigmoid/exp",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::add(ad::gelu(in[0]), ad::mul(ad::sigmoid(in[0]),
                                                          ad::exp(ad::scale(in[0], 0.5)))));
                   },
                   {leaf({6}, random_values(rng, 6))}});
  cases.push_back({"log/sqrt_eps/square",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::add(ad::log(in[0]), ad::sqrt_eps(ad::square(in[0]))));
                   },
                   {leaf({6}, random_values(rng, 6, 0.3, 2.0))}});
  cases.push_back({"matmul/linear",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::square(ad::linear(ad::matmul(in[0], in[1]), in[2], in[3])));
                   },
                   {leaf({2, 3}, random_values(rng, 6)), leaf({3, 4}, random_values(rng, 12)),
                    leaf({4, 2}, random_values(rng, 8)), leaf({2}, random_values(rng, 2))}});
  cases.push_back({"matmul_nt/softmax",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::square(ad::softmax_lastdim(ad::matmul_nt(in[0], in[1]))));
                   },
                   {leaf({3, 4}, random_values(rng, 12)), leaf({2, 4}, random_values(rng, 8))}});
  cases.push_back({"concat/slice/reshape",
                   [](const std::vector<Var>& in) {
                     Var c = ad::concat_lastdim({in[0], in[1]});
                     Var s = ad::slice_cols(c, 1, 3);
                     return ad::reduce_sum(ad::square(ad::reshape(s, {6})));
                   },
                   {leaf({2, 2}, random_values(rng, 4)), leaf({2, 3}, random_values(rng, 6))}});
  cases.push_back({"gather/add_to_rows/concat_rows",
                   [](const std::vector<Var>& in) {
                     Var g = ad::gather_rows(in[0], {2, 0, 2});
                     Var a = ad::add_to_rows(in[0], in[1], {1, 2});
                     return ad::reduce_sum(ad::square(ad::concat_rows({g, a})));
                   },
                   {leaf({3, 2}, random_values(rng, 6)), leaf({2}, random_values(rng, 2))}});
  cases.push_back({"pair_concat/mean_rows/layer_norm",
                   [](const std::vector<Var>& in) {
                     Var p = ad::pair_concat(in[0]);
                     return ad::reduce_sum(
                         ad::square(ad::mean_rows(ad::layer_norm_lastdim(p))));
                   },
                   {leaf({3, 2}, random_values(rng, 6))}});
  cases.push_back({"outer_row_add",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(
                         ad::square(ad::outer_row_add(in[0], in[1])));
                   },
                   {leaf({3, 2}, random_values(rng, 6)), leaf({3, 2}, random_values(rng, 6))}});
  cases.push_back({"l2_normalize/reduce_sum_lastdim",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(ad::square(
                         ad::reduce_sum_lastdim(ad::l2_normalize_lastdim(in[0]))));
                   },
                   {leaf({2, 3}, random_values(rng, 6))}});
  cases.push_back({"gaussian_density",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(ad::square(
                         ad::gaussian_density(in[0], in[1], in[2])));
                   },
                   {leaf({4}, random_values(rng, 4)), leaf({3}, random_values(rng, 3)),
                    leaf({3}, random_values(rng, 3, 0.5, 1.5))}});
  cases.push_back({"cross_entropy_logits",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_mean(ad::cross_entropy_logits(in[0], {1, 0, 2}));
                   },
                   {leaf({3, 3}, random_values(rng, 9))}});
  cases.push_back({"bce_with_logits",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_mean(ad::bce_with_logits(in[0], {1, 0, 1, 0}));
                   },
                   {leaf({4}, random_values(rng, 4))}});
  {
    // Weighting breaks the rotation invariance of a plain sum of squares,
    // which would make the true gradient vanish.
    Var w = Var::constant({2, 3}, random_values(rng, 6));
    cases.push_back({"rodrigues/rows_matmul/rows_rotate",
                     [w](const std::vector<Var>& in) {
                       Var r = ad::rodrigues_rows(in[0]);
                       Var rr = ad::rows_matmul(r, in[1]);
                       return ad::reduce_sum(ad::square(ad::mul(ad::rows_rotate(rr, in[2]), w)));
                     },
                     {leaf({2, 3}, random_values(rng, 6)), leaf({2, 9}, random_values(rng, 18)),
                      leaf({2, 3}, random_values(rng, 6))}});
  }
  cases.push_back({"to_local_frames",
                   [](const std::vector<Var>& in) {
                     return ad::reduce_sum(ad::square(
                         ad::to_local_frames(in[0], in[1], in[2])));
                   },
                   {leaf({2, 9}, random_values(rng, 18)), leaf({2, 3}, random_values(rng, 6)),
                    leaf({3, 3}, random_values(rng, 9))}});
  cases.push_back({"align_loss",
                   [](const std::vector<Var>& in) {
                     return losses::align_loss(in[0], in[1]);
                   },
                   {leaf({5}, random_values(rng, 5)), leaf({5}, random_values(rng, 5))}});
  cases.push_back({"bce_multilabel_loss",
                   [](const std::vector<Var>& in) {
                     return losses::bce_multilabel_loss(in[0], {1, 0, 0, 1});
                   },
                   {leaf({4}, random_values(rng, 4))}});

  {
    std::vector<int> seq = {0, 3, 7, 2, 11, 5};
    cases.push_back({"mlm_loss",
                     [seq](const std::vector<Var>& in) {
                       return losses::mlm_loss(in[0], seq, {1, 3});
                     },
                     {leaf({6, 21}, random_values(rng, 6 * 21))}});
  }
  {
    prot::Protein truth = synth::synth_protein(3, 91);
    cases.push_back(
        {"fape_loss (via rodrigues)",
         [truth](const std::vector<Var>& in) {
           return losses::fape_loss(ad::rodrigues_rows(in[0]), in[1], in[2], truth);
         },
         {leaf({3, 3}, random_values(rng, 9)), leaf({3, 3}, random_values(rng, 9, -2, 2)),
          leaf({12, 3}, random_values(rng, 36, -3, 3))}});
  }

  for (OpCase& c : cases) {
    double err = ad::grad_check(c.f, c.inputs);
    pass &= report(out, c.name, err, tol);
  }

  // End-to-end: encoder + heads on a short protein, checked on one parameter
  // tensor from each stage of the network.
  {
    enc::EncoderConfig ecfg = small_encoder_config();
    heads::HeadConfig hcfg = small_head_config();
    ad::ParameterStore store;
    std::mt19937_64 prng(5);
    enc::init_encoder_params(store, ecfg, prng, "encoder/");
    heads::init_head_params(store, ecfg, hcfg, prng);
    prot::Protein p = synth::synth_protein(6, 17);
    synth::StructurePair pair = synth::perturb(p, {0.5, 0.1, false, 3});
    std::vector<int> masked = {1, 4};

    auto f = [&](const std::vector<Var>&) {
      enc::EncoderOutput e = enc::encoder_forward(pair.predicted, masked, store, ecfg, "encoder/");
      auto [z, q] = heads::project_predict(store, e.pooled);
      Var align = losses::align_loss(q, ad::stop_gradient(ad::scale(z, 0.9)));
      Var mlm = losses::mlm_loss(heads::mlm_logits(store, e.nodes),
                                 pair.predicted.sequence, masked);
      heads::DenoiseResult d = heads::denoise_update(store, e.nodes, pair.predicted.frames);
      Var fape = losses::fape_loss(d.rotations, d.translations, d.atoms, pair.experimental);
      Var down = losses::bce_multilabel_loss(
          heads::downstream_logits(store, e.pooled), {1, 0, 1, 0, 1, 0, 0, 1});
      return ad::add(ad::add(align, mlm), ad::add(fape, down));
    };
    std::vector<Var> probes = {
        store.at("encoder/node_in/b1"),  store.at("encoder/pe/mu"),
        store.at("encoder/l0/attn/bq"),  store.at("encoder/l0/ffn/b1"),
        store.at("encoder/pair_in/b1"),  store.at("projector/b1"),
        store.at("predictor/b1"),        store.at("denoise/b2"),
        store.at("mlm/b"),               store.at("downstream/b2")};
    double err = ad::grad_check(f, probes);
    pass &= report(out, "end-to-end encoder+heads (length 6)", err, tol);
  }

  return pass;
}

bool run_equivariance_suite(std::ostream& out) {
  std::mt19937_64 rng(404);
  bool pass = true;

  enc::EncoderConfig ecfg = small_encoder_config();
  heads::HeadConfig hcfg = small_head_config();
  ad::ParameterStore store;
  std::mt19937_64 prng(11);
  enc::init_encoder_params(store, ecfg, prng, "encoder/");
  heads::init_head_params(store, ecfg, hcfg, prng);

  prot::Protein p = synth::synth_protein(8, 33);
  enc::EncoderOutput base = enc::encoder_forward(p, {2, 5}, store, ecfg, "encoder/");
  heads::DenoiseResult d0 = heads::denoise_update(store, base.nodes, p.frames);

  double enc_err = 0.0, den_err = 0.0;
  for (int i = 0; i < 20; ++i) {
    geom::Frame g = random_frame(rng);
    prot::Protein tp = transform_protein(p, g);
    enc::EncoderOutput moved = enc::encoder_forward(tp, {2, 5}, store, ecfg, "encoder/");
    enc_err = std::max(enc_err, max_abs_diff(base.nodes.value(), moved.nodes.value()));
    enc_err = std::max(enc_err, max_abs_diff(base.pooled.value(), moved.pooled.value()));
    enc_err = std::max(enc_err, max_abs_diff(base.pairs.value(), moved.pairs.value()));

    heads::DenoiseResult d1 = heads::denoise_update(store, moved.nodes, tp.frames);
    // Expected equivariant outputs: rotations g.R * R_i, translations g(t_i),
    // atoms g(x).
    const auto& r0 = d0.rotations.value();
    const auto& r1 = d1.rotations.value();
    for (int k = 0; k < p.length(); ++k) {
      geom::Rotation a, b;
      std::copy(r0.begin() + k * 9, r0.begin() + k * 9 + 9, a.m.begin());
      std::copy(r1.begin() + k * 9, r1.begin() + k * 9 + 9, b.m.begin());
      den_err = std::max(den_err, rotation_diff(g.rotation.compose(a), b));
    }
    const auto& t0 = d0.translations.value();
    const auto& t1 = d1.translations.value();
    for (int k = 0; k < p.length(); ++k) {
      geom::Vec3 a{t0[k * 3], t0[k * 3 + 1], t0[k * 3 + 2]};
      geom::Vec3 b{t1[k * 3], t1[k * 3 + 1], t1[k * 3 + 2]};
      den_err = std::max(den_err, vec_diff(geom::frame_apply(g, a), b));
    }
    const auto& x0 = d0.atoms.value();
    const auto& x1 = d1.atoms.value();
    for (int k = 0; k < 4 * p.length(); ++k) {
      geom::Vec3 a{x0[k * 3], x0[k * 3 + 1], x0[k * 3 + 2]};
      geom::Vec3 b{x1[k * 3], x1[k * 3 + 1], x1[k * 3 + 2]};
      den_err = std::max(den_err, vec_diff(geom::frame_apply(g, a), b));
    }
  }
  pass &= report(out, "encoder SE(3) invariance (20 transforms)", enc_err, 1e-5);
  pass &= report(out, "denoise_update SE(3) equivariance (20 transforms)", den_err, 1e-5);

  double fape_err = 0.0;
  synth::StructurePair pair = synth::perturb(p, {0.8, 0.15, false, 9});
  double ref = losses::fape_loss(pair.predicted, pair.experimental).item();
  for (int i = 0; i < 20; ++i) {
    geom::Frame g = random_frame(rng);
    double moved =
        losses::fape_loss(transform_protein(pair.predicted, g), pair.experimental).item();
    fape_err = std::max(fape_err, std::abs(moved - ref));
  }
  pass &= report(out, "fape_loss invariance to global transform (20 transforms)",
                 fape_err, 1e-5);

  return pass;
}

bool run_suite(const std::string& name, std::ostream& out) {
  if (name == "frames") return run_frames_suite(out);
  if (name == "grads") return run_grads_suite(out);
  if (name == "equivariance") return run_equivariance_suite(out);
  fail(ErrorCode::InvalidArgument, "unknown check suite: " + name);
}

}  // namespace sao::checks
