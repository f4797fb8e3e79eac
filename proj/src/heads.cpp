#include "heads.hpp"

namespace sao::heads {

using ad::Var;

namespace {

void add_mlp(ad::ParameterStore& s, std::mt19937_64& rng, const std::string& base,
             int64_t d_in, int64_t d_hidden, int64_t d_out) {
  s.add(base + "/w1", enc::init_weight(rng, d_in, d_hidden));
  s.add(base + "/b1", enc::init_bias(d_hidden));
  s.add(base + "/w2", enc::init_weight(rng, d_hidden, d_out));
  s.add(base + "/b2", enc::init_bias(d_out));
}

Var mlp(const ad::ParameterStore& s, const std::string& base, const Var& x) {
  Var in = x.shape().size() == 1 ? ad::reshape(x, {1, x.size()}) : x;
  Var h = ad::relu(ad::linear(in, s.at(base + "/w1"), s.at(base + "/b1")));
  Var out = ad::linear(h, s.at(base + "/w2"), s.at(base + "/b2"));
  if (x.shape().size() == 1) out = ad::reshape(out, {out.size()});
  return out;
}

std::vector<double> flatten_rotations(const std::vector<geom::Frame>& frames) {
  std::vector<double> r(frames.size() * 9);
  for (size_t i = 0; i < frames.size(); ++i)
    std::copy(frames[i].rotation.m.begin(), frames[i].rotation.m.end(),
              r.begin() + i * 9);
  return r;
}

std::vector<double> flatten_translations(const std::vector<geom::Frame>& frames) {
  std::vector<double> t(frames.size() * 3);
  for (size_t i = 0; i < frames.size(); ++i) {
    t[i * 3] = frames[i].translation.x;
    t[i * 3 + 1] = frames[i].translation.y;
    t[i * 3 + 2] = frames[i].translation.z;
  }
  return t;
}

}  // namespace

void init_head_params(ad::ParameterStore& s, const enc::EncoderConfig& enc_cfg,
                      const HeadConfig& cfg, std::mt19937_64& rng) {
  add_mlp(s, rng, "projector", enc_cfg.d_m, cfg.proj_hidden, cfg.proj_dim);
  // Residual predictor with zero-initialized output layer: exact identity at
  // init, so a freshly copied target yields zero alignment loss on equal inputs.
  s.add("predictor/w1", enc::init_weight(rng, cfg.proj_dim, cfg.proj_hidden));
  s.add("predictor/b1", enc::init_bias(cfg.proj_hidden));
  s.add("predictor/w2",
        ad::Var::leaf({cfg.proj_hidden, cfg.proj_dim},
                      std::vector<double>(cfg.proj_hidden * cfg.proj_dim, 0.0)));
  s.add("predictor/b2", enc::init_bias(cfg.proj_dim));
  add_mlp(s, rng, "denoise", enc_cfg.d_m, cfg.denoise_hidden, 6);
  s.add("mlm/w", enc::init_weight(rng, enc_cfg.d_m, prot::kNumResidueClasses));
  s.add("mlm/b", enc::init_bias(prot::kNumResidueClasses));
  add_mlp(s, rng, "downstream", enc_cfg.d_m, cfg.downstream_hidden, cfg.n_labels);
}

void init_target_projector(ad::ParameterStore& s, const enc::EncoderConfig& enc_cfg,
                           const HeadConfig& cfg, std::mt19937_64& rng) {
  add_mlp(s, rng, "projector", enc_cfg.d_m, cfg.proj_hidden, cfg.proj_dim);
}

Var project(const ad::ParameterStore& s, const Var& pooled, const std::string& prefix) {
  return mlp(s, prefix, pooled);
}

Var predict(const ad::ParameterStore& s, const Var& z) {
  return ad::add(z, mlp(s, "predictor", z));
}

std::pair<Var, Var> project_predict(const ad::ParameterStore& s, const Var& pooled) {
  Var z = project(s, pooled);
  return {z, predict(s, z)};
}

DenoiseResult denoise_update(const ad::ParameterStore& s, const Var& nodes,
                             const std::vector<geom::Frame>& current_frames) {
  const int64_t n = static_cast<int64_t>(current_frames.size());
  if (nodes.shape().size() != 2 || nodes.shape()[0] != n)
    fail(ErrorCode::ShapeMismatch, "denoise_update: nodes/frames length mismatch");
  Var head = mlp(s, "denoise", nodes);  // (N, 6)
  Var so3 = ad::slice_cols(head, 0, 3);
  Var t_local = ad::slice_cols(head, 3, 3);

  Var rot_cur = Var::constant({n, 9}, flatten_rotations(current_frames));
  Var t_cur = Var::constant({n, 3}, flatten_translations(current_frames));

  Var delta_rot = ad::rodrigues_rows(so3);
  Var rot_new = ad::rows_matmul(rot_cur, delta_rot);
  Var delta_t = ad::rows_rotate(rot_cur, t_local);
  Var t_new = ad::add(t_cur, delta_t);

  // Backbone atoms from the updated frames: x = R * x_stand + t.
  geom::BackboneResidue stand = geom::standard_backbone();
  std::vector<Var> atom_sets;
  for (const geom::Vec3* a : {&stand.n, &stand.ca, &stand.c, &stand.o}) {
    std::vector<double> rep(n * 3);
    for (int64_t i = 0; i < n; ++i) {
      rep[i * 3] = a->x;
      rep[i * 3 + 1] = a->y;
      rep[i * 3 + 2] = a->z;
    }
    atom_sets.push_back(
        ad::add(ad::rows_rotate(rot_new, Var::constant({n, 3}, std::move(rep))), t_new));
  }
  // Interleave per residue: N, CA, C, O.
  Var stacked = ad::concat_lastdim(atom_sets);       // (N, 12)
  Var atoms = ad::reshape(stacked, {4 * n, 3});      // rows: N,CA,C,O per residue
  return {rot_new, t_new, atoms};
}

Var mlm_logits(const ad::ParameterStore& s, const Var& nodes) {
  return ad::linear(nodes, s.at("mlm/w"), s.at("mlm/b"));
}

Var downstream_logits(const ad::ParameterStore& s, const Var& pooled) {
  return mlp(s, "downstream", pooled);
}

std::vector<geom::Frame> denoise_update_numeric(const std::vector<double>& head_out,
                                                const std::vector<geom::Frame>& frames) {
  if (head_out.size() != frames.size() * 6)
    fail(ErrorCode::ShapeMismatch, "denoise_update_numeric: bad head size");
  std::vector<geom::Frame> out;
  out.reserve(frames.size());
  for (size_t i = 0; i < frames.size(); ++i) {
    const double* h = head_out.data() + i * 6;
    geom::Rotation delta = geom::rotation_from_so3({{h[0], h[1], h[2]}});
    geom::Vec3 dt = frames[i].rotation.apply({h[3], h[4], h[5]});
    out.push_back({frames[i].rotation.compose(delta), frames[i].translation + dt});
  }
  return out;
}

}  // namespace sao::heads
