#include "encoder.hpp"

#include <cmath>

namespace sao::enc {

using ad::Var;

void EncoderConfig::validate() const {
  if (d_m < 1 || d_z < 1 || layers < 1 || heads < 1 || pe_channels < 1 ||
      n_pair_types < 1)
    fail(ErrorCode::InvalidArgument, "encoder dims must be >= 1");
  if (d_m % heads != 0)
    fail(ErrorCode::InvalidArgument, "d_m must be divisible by heads");
}

int pair_type(int aa_i, int aa_j) {
  int u = std::min(aa_i, aa_j), v = std::max(aa_i, aa_j);
  return u * 21 - u * (u - 1) / 2 + (v - u);
}

std::vector<double> residue_features(const prot::Protein& p) {
  const int n = p.length();
  std::vector<double> out(static_cast<size_t>(n) * kResidueFeatureDim, 0.0);
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * kResidueFeatureDim;
    row[std::min(p.sequence[i], prot::kUnknownId)] = 1.0;
    const auto& t = p.torsions[i];
    const std::optional<double> angles[3] = {t.phi, t.psi, t.omega};
    for (int a = 0; a < 3; ++a) {
      if (angles[a]) {
        row[21 + 2 * a] = std::sin(*angles[a]);
        row[21 + 2 * a + 1] = std::cos(*angles[a]);
      }
    }
    // Backbone atoms of residues i-1, i, i+1 in the local frame of residue i.
    int col = 27;
    for (int off = -1; off <= 1; ++off) {
      int j = i + off;
      if (j >= 0 && j < n) {
        const auto& r = p.backbone[j];
        for (const geom::Vec3* atom : {&r.n, &r.ca, &r.c, &r.o}) {
          geom::Vec3 local = geom::frame_apply_inverse(p.frames[i], *atom);
          row[col] = local.x;
          row[col + 1] = local.y;
          row[col + 2] = local.z;
          col += 3;
        }
      } else {
        col += 12;
      }
    }
  }
  return out;
}

Var init_weight(std::mt19937_64& rng, int64_t fan_in, int64_t fan_out) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (auto& x : w) x = u(rng);
  return Var::leaf({fan_in, fan_out}, std::move(w));
}

Var init_bias(int64_t n) {
  return Var::leaf({n}, std::vector<double>(n, 0.0));
}

namespace {

void add_mlp(ad::ParameterStore& s, std::mt19937_64& rng, const std::string& base,
             int64_t d_in, int64_t d_hidden, int64_t d_out) {
  s.add(base + "/w1", init_weight(rng, d_in, d_hidden));
  s.add(base + "/b1", init_bias(d_hidden));
  s.add(base + "/w2", init_weight(rng, d_hidden, d_out));
  s.add(base + "/b2", init_bias(d_out));
}

Var mlp(const ad::ParameterStore& s, const std::string& base, const Var& x) {
  Var h = ad::relu(ad::linear(x, s.at(base + "/w1"), s.at(base + "/b1")));
  return ad::linear(h, s.at(base + "/w2"), s.at(base + "/b2"));
}

Var layer_norm_affine(const ad::ParameterStore& s, const std::string& base,
                      const Var& x) {
  return ad::add(ad::mul(ad::layer_norm_lastdim(x), s.at(base + "_g")),
                 s.at(base + "_b"));
}

// softplus-reparameterized pair-encoding width, sigma >= 1e-3
Var pe_sigma(const ad::ParameterStore& s, const std::string& prefix) {
  Var raw = s.at(prefix + "pe/sigma_raw");
  return ad::add_scalar(ad::log(ad::add_scalar(ad::exp(raw), 1.0)), 1e-3);
}

}  // namespace

void init_encoder_params(ad::ParameterStore& s, const EncoderConfig& cfg,
                         std::mt19937_64& rng, const std::string& prefix) {
  cfg.validate();
  add_mlp(s, rng, prefix + "node_in", kResidueFeatureDim, cfg.d_m, cfg.d_m);
  {
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    std::vector<double> me(cfg.d_m);
    for (auto& x : me) x = u(rng);
    s.add(prefix + "mask_embed", Var::leaf({cfg.d_m}, std::move(me)));
  }
  s.add(prefix + "pe/a", Var::leaf({cfg.n_pair_types},
                                   std::vector<double>(cfg.n_pair_types, 1.0)));
  s.add(prefix + "pe/b", Var::leaf({cfg.n_pair_types},
                                   std::vector<double>(cfg.n_pair_types, 0.0)));
  {
    std::vector<double> mu(cfg.pe_channels);
    for (int k = 0; k < cfg.pe_channels; ++k)
      mu[k] = 20.0 * k / std::max(1, cfg.pe_channels - 1);
    s.add(prefix + "pe/mu", Var::leaf({cfg.pe_channels}, std::move(mu)));
    // softplus(raw) + 1e-3 = 1.0
    double raw = std::log(std::exp(1.0 - 1e-3) - 1.0);
    s.add(prefix + "pe/sigma_raw",
          Var::leaf({cfg.pe_channels}, std::vector<double>(cfg.pe_channels, raw)));
  }
  add_mlp(s, rng, prefix + "pair_in", cfg.pe_channels, cfg.pair_hidden, cfg.d_z);
  for (int l = 0; l < cfg.layers; ++l) {
    std::string base = prefix + "l" + std::to_string(l);
    for (const char* name : {"/attn/wq", "/attn/wk", "/attn/wv", "/attn/wo"})
      s.add(base + name, init_weight(rng, cfg.d_m, cfg.d_m));
    for (const char* name : {"/attn/bq", "/attn/bk", "/attn/bv", "/attn/bo"})
      s.add(base + name, init_bias(cfg.d_m));
    s.add(base + "/attn/pair_bias_w", init_weight(rng, cfg.d_z, cfg.heads));
    s.add(base + "/attn/pair_bias_b", init_bias(cfg.heads));
    s.add(base + "/ln1_g", Var::leaf({cfg.d_m}, std::vector<double>(cfg.d_m, 1.0)));
    s.add(base + "/ln1_b", init_bias(cfg.d_m));
    add_mlp(s, rng, base + "/ffn", cfg.d_m, cfg.ffn_hidden, cfg.d_m);
    s.add(base + "/ln2_g", Var::leaf({cfg.d_m}, std::vector<double>(cfg.d_m, 1.0)));
    s.add(base + "/ln2_b", init_bias(cfg.d_m));
    // Pair-update MLP over concat(m_i, m_j); the first layer is stored as the
    // two row blocks of its weight so the forward can factor it as
    // w1a m_i + w1b m_j.
    {
      double bound = 1.0 / std::sqrt(static_cast<double>(2 * cfg.d_m));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (const char* name : {"/pair/w1a", "/pair/w1b"}) {
        std::vector<double> w(static_cast<size_t>(cfg.d_m) * cfg.pair_hidden);
        for (auto& x : w) x = u(rng);
        s.add(base + name, Var::leaf({cfg.d_m, cfg.pair_hidden}, std::move(w)));
      }
      s.add(base + "/pair/b1", init_bias(cfg.pair_hidden));
      s.add(base + "/pair/w2", init_weight(rng, cfg.pair_hidden, cfg.d_z));
      s.add(base + "/pair/b2", init_bias(cfg.d_z));
    }
  }
}

Var pair_encoding(const prot::Protein& p, const std::vector<int>& mask,
                  const ad::ParameterStore& s, const EncoderConfig& cfg,
                  const std::string& prefix) {
  const int n = p.length();
  std::vector<bool> masked(n, false);
  for (int m : mask) masked[m] = true;
  std::vector<double> dists(static_cast<size_t>(n) * n);
  std::vector<int64_t> types(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      dists[i * n + j] = (p.backbone[i].ca - p.backbone[j].ca).norm();
      // Pairs touching a masked residue use the reserved type so no identity
      // information leaks through the positional encoding.
      types[i * n + j] = (masked[i] || masked[j])
                             ? cfg.n_pair_types - 1
                             : pair_type(p.sequence[i], p.sequence[j]);
    }
  Var d = Var::constant({static_cast<int64_t>(n) * n}, std::move(dists));
  Var aff = ad::add(ad::mul(ad::gather_rows(s.at(prefix + "pe/a"), types), d),
                    ad::gather_rows(s.at(prefix + "pe/b"), types));
  return ad::gaussian_density(aff, s.at(prefix + "pe/mu"), pe_sigma(s, prefix));
}

EncoderOutput encoder_forward(const prot::Protein& p, const std::vector<int>& mask,
                              const ad::ParameterStore& s, const EncoderConfig& cfg,
                              const std::string& prefix, Var features) {
  cfg.validate();
  const int64_t n = p.length();
  for (int m : mask)
    if (m < 0 || m >= n)
      fail(ErrorCode::MaskOutOfRange, "mask position " + std::to_string(m) +
                                          " outside [0, " + std::to_string(n) + ")");
  if (!features.defined())
    features = Var::constant({n, kResidueFeatureDim}, residue_features(p));

  if (!mask.empty()) {
    // Hide amino-acid identity at masked rows; geometry stays visible.
    std::vector<double> keep(n * kResidueFeatureDim, 1.0);
    for (int m : mask)
      for (int c = 0; c < prot::kNumResidueClasses; ++c)
        keep[m * kResidueFeatureDim + c] = 0.0;
    features = ad::mul(features, Var::constant({n, kResidueFeatureDim}, std::move(keep)));
  }

  Var nodes = mlp(s, prefix + "node_in", features);
  if (!mask.empty()) {
    std::vector<int64_t> rows(mask.begin(), mask.end());
    nodes = ad::add_to_rows(nodes, s.at(prefix + "mask_embed"), rows);
  }

  Var pairs = mlp(s, prefix + "pair_in", pair_encoding(p, mask, s, cfg, prefix));

  const int64_t dh = cfg.d_m / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.layers; ++l) {
    std::string base = prefix + "l" + std::to_string(l);
    Var q = ad::linear(nodes, s.at(base + "/attn/wq"), s.at(base + "/attn/bq"));
    Var k = ad::linear(nodes, s.at(base + "/attn/wk"), s.at(base + "/attn/bk"));
    Var v = ad::linear(nodes, s.at(base + "/attn/wv"), s.at(base + "/attn/bv"));
    Var pb = ad::linear(pairs, s.at(base + "/attn/pair_bias_w"),
                        s.at(base + "/attn/pair_bias_b"));
    std::vector<Var> head_outs;
    for (int h = 0; h < cfg.heads; ++h) {
      Var qh = ad::slice_cols(q, h * dh, dh);
      Var kh = ad::slice_cols(k, h * dh, dh);
      Var vh = ad::slice_cols(v, h * dh, dh);
      Var logits = ad::scale(ad::matmul_nt(qh, kh), scale);
      Var bias = ad::reshape(ad::slice_cols(pb, h, 1), {n, n});
      Var attn = ad::softmax_lastdim(ad::add(logits, bias));
      head_outs.push_back(ad::matmul(attn, vh));
    }
    Var attn_out = ad::linear(ad::concat_lastdim(head_outs),
                              s.at(base + "/attn/wo"), s.at(base + "/attn/bo"));
    nodes = layer_norm_affine(s, base + "/ln1", ad::add(nodes, attn_out));
    nodes = layer_norm_affine(s, base + "/ln2",
                              ad::add(nodes, mlp(s, base + "/ffn", nodes)));
    // z_ij += MLP(concat(m_i, m_j)), with the first linear factored into
    // per-node halves so only the hidden activations live at N*N size.
    Var ph = ad::relu(ad::add(
        ad::outer_row_add(ad::matmul(nodes, s.at(base + "/pair/w1a")),
                          ad::matmul(nodes, s.at(base + "/pair/w1b"))),
        s.at(base + "/pair/b1")));
    pairs = ad::add(pairs,
                    ad::linear(ph, s.at(base + "/pair/w2"), s.at(base + "/pair/b2")));
  }
  return {nodes, pairs, ad::mean_rows(nodes)};
}

}  // namespace sao::enc
