#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "metrics.hpp"
#include "trainer.hpp"

using namespace sao;
namespace fs = std::filesystem;

namespace {

// Independent protein-centric threshold sweep.
double fmax_oracle(const std::vector<std::vector<double>>& scores,
                   const std::vector<std::vector<int>>& labels) {
  double best = 0.0;
  for (int t100 = 1; t100 <= 100; ++t100) {
    double tau = t100 / 100.0;
    double pr_sum = 0, rc_sum = 0;
    int pr_n = 0, rc_n = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      int pred = 0, tp = 0, truth = 0;
      for (size_t j = 0; j < scores[i].size(); ++j) {
        bool hit = scores[i][j] >= tau;
        if (hit) ++pred;
        if (labels[i][j]) ++truth;
        if (hit && labels[i][j]) ++tp;
      }
      if (pred > 0) {
        pr_sum += static_cast<double>(tp) / pred;
        ++pr_n;
      }
      if (truth > 0) {
        rc_sum += static_cast<double>(tp) / truth;
        ++rc_n;
      }
    }
    double pr = pr_n ? pr_sum / pr_n : 0.0;
    double rc = rc_n ? rc_sum / rc_n : 0.0;
    double f = (pr + rc > 0) ? 2 * pr * rc / (pr + rc) : 0.0;
    best = std::max(best, f);
  }
  return best;
}

// Independent micro PR step curve with tied scores grouped.
double aupr_oracle(const std::vector<std::vector<double>>& scores,
                   const std::vector<std::vector<int>>& labels) {
  std::vector<std::pair<double, int>> flat;
  for (size_t i = 0; i < scores.size(); ++i)
    for (size_t j = 0; j < scores[i].size(); ++j)
      flat.push_back({scores[i][j], labels[i][j]});
  std::stable_sort(flat.begin(), flat.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  long total_pos = 0;
  for (const auto& [s, y] : flat) total_pos += y;
  double area = 0, rc_prev = 0;
  long tp = 0, fp = 0;
  size_t k = 0;
  while (k < flat.size()) {
    size_t e = k;
    while (e < flat.size() && flat[e].first == flat[k].first) ++e;
    for (size_t m = k; m < e; ++m) (flat[m].second ? tp : fp)++;
    double pr = static_cast<double>(tp) / (tp + fp);
    double rc = static_cast<double>(tp) / total_pos;
    area += (rc - rc_prev) * pr;
    rc_prev = rc;
    k = e;
  }
  return area;
}

train::TrainConfig small_cfg() {
  train::TrainConfig cfg;
  cfg.encoder.d_m = 16;
  cfg.encoder.d_z = 8;
  cfg.encoder.layers = 1;
  cfg.encoder.heads = 2;
  cfg.encoder.pe_channels = 4;
  cfg.encoder.ffn_hidden = 32;
  cfg.encoder.pair_hidden = 8;
  cfg.heads.proj_hidden = 16;
  cfg.heads.proj_dim = 8;
  cfg.heads.denoise_hidden = 16;
  cfg.heads.downstream_hidden = 8;
  cfg.heads.n_labels = 4;
  return cfg;
}

std::vector<synth::LabeledPair> exact_pairs(int n, uint64_t seed) {
  std::vector<synth::LabeledPair> out;
  for (int i = 0; i < n; ++i) {
    prot::Protein p = synth::synth_protein(8, seed + i);
    synth::LabeledPair lp;
    lp.pair = synth::perturb(p, {0.0, 0.0, false, 0});
    lp.labels = synth::synth_labels(p, 4);
    out.push_back(std::move(lp));
  }
  return out;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("fmax trivial cases") {
  std::vector<std::vector<int>> labels{{1, 0, 1}, {0, 1, 0}};
  std::vector<std::vector<double>> perfect{{1, 0, 1}, {0, 1, 0}};
  CHECK(metrics::fmax(perfect, labels) == doctest::Approx(1.0));

  std::vector<std::vector<double>> zeros{{0, 0, 0}, {0, 0, 0}};
  CHECK(metrics::fmax(zeros, labels) == doctest::Approx(0.0));

  std::vector<std::vector<int>> none{{0, 0, 0}, {0, 0, 0}};
  CHECK(code_of([&] { metrics::fmax(perfect, none); }) == ErrorCode::NoPositiveLabels);
}

TEST_CASE("aupr trivial cases") {
  std::vector<std::vector<int>> labels{{1, 0}, {1, 0}};
  std::vector<std::vector<double>> sep{{0.9, 0.1}, {0.8, 0.2}};
  CHECK(metrics::aupr(sep, labels) == doctest::Approx(1.0));

  // All scores equal: one PR point at precision p, recall 1.
  std::vector<std::vector<int>> l2{{1, 0, 0}, {1, 0, 0}};
  std::vector<std::vector<double>> flat{{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
  CHECK(metrics::aupr(flat, l2) == doctest::Approx(2.0 / 6.0));

  std::vector<std::vector<int>> allpos{{1, 1}, {1, 1}};
  CHECK(code_of([&] { metrics::aupr(sep, allpos); }) == ErrorCode::DegenerateLabels);
  std::vector<std::vector<int>> allneg{{0, 0}, {0, 0}};
  CHECK(code_of([&] { metrics::aupr(sep, allneg); }) == ErrorCode::DegenerateLabels);
}

TEST_CASE("fmax and aupr match brute-force oracles on 100 random instances") {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> np(1, 8), nl(1, 8), bit(0, 1);
  // Quantized scores force plenty of ties.
  std::uniform_int_distribution<int> q(0, 10);
  int done = 0;
  while (done < 100) {
    int P = np(rng), L = nl(rng);
    std::vector<std::vector<double>> scores(P, std::vector<double>(L));
    std::vector<std::vector<int>> labels(P, std::vector<int>(L));
    int pos = 0;
    for (int i = 0; i < P; ++i)
      for (int j = 0; j < L; ++j) {
        scores[i][j] = q(rng) / 10.0;
        labels[i][j] = bit(rng);
        pos += labels[i][j];
      }
    if (pos == 0 || pos == P * L) continue;
    ++done;
    CHECK(metrics::fmax(scores, labels) == doctest::Approx(fmax_oracle(scores, labels)).epsilon(1e-12));
    CHECK(metrics::aupr(scores, labels) == doctest::Approx(aupr_oracle(scores, labels)).epsilon(1e-12));
  }
}

TEST_CASE("embedding bias on exact pairs is zero and bounded") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  std::vector<synth::LabeledPair> pairs = exact_pairs(3, 60);

  fs::path dump = fs::temp_directory_path() / "sao_metrics_dump.jsonl";
  fs::remove(dump);
  metrics::BiasReport r = metrics::embedding_bias(st.online, cfg.encoder, pairs, dump.string());
  REQUIRE(r.per_pair.size() == 3);
  for (double d : r.per_pair) {
    CHECK(d <= 1e-5);
    CHECK(d >= 0.0);
  }
  CHECK(r.mean_distance <= 1e-5);

  std::ifstream f(dump.string());
  int lines = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 3);
  fs::remove(dump);

  // Noisy pairs stay within the normalized-vector bound.
  std::vector<synth::LabeledPair> noisy;
  for (int i = 0; i < 3; ++i) {
    prot::Protein p = synth::synth_protein(8, 70 + i);
    synth::LabeledPair lp;
    lp.pair = synth::perturb(p, {2.0, 0.4, false, static_cast<uint64_t>(i)});
    lp.labels = synth::synth_labels(p, 4);
    noisy.push_back(std::move(lp));
  }
  metrics::BiasReport rn = metrics::embedding_bias(st.online, cfg.encoder, noisy);
  for (double d : rn.per_pair) {
    CHECK(d >= 0.0);
    CHECK(d <= 2.0);
  }

  CHECK(code_of([&] { metrics::embedding_bias(st.online, cfg.encoder, {}); }) ==
        ErrorCode::EmptyInput);
}

TEST_CASE("predict_scores are sigmoids of the downstream logits") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  prot::Protein p = synth::synth_protein(8, 80);
  std::vector<double> s = metrics::predict_scores(st.online, cfg.encoder, p);
  REQUIRE(s.size() == 4);
  for (double x : s) {
    CHECK(x > 0.0);
    CHECK(x < 1.0);
  }
  enc::EncoderOutput e = enc::encoder_forward(p, {}, st.online, cfg.encoder, "encoder/");
  ad::Var logits = heads::downstream_logits(st.online, e.pooled);
  for (int j = 0; j < 4; ++j)
    CHECK(s[j] == doctest::Approx(1.0 / (1.0 + std::exp(-logits.value()[j]))).epsilon(1e-12));
}

TEST_CASE("performance gap vanishes on exact pairs") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  // Enough pairs that label columns are not degenerate.
  std::vector<synth::LabeledPair> pairs = exact_pairs(8, 90);
  metrics::EvalReport r = metrics::performance_gap(st.online, cfg.encoder, pairs);
  CHECK(r.n_proteins == 8);
  CHECK(r.fmax_gap == 0.0);
  CHECK(r.aupr_gap == 0.0);
  CHECK(r.fmax_experimental == r.fmax_predicted);
  CHECK(r.fmax_experimental >= 0.0);
  CHECK(r.fmax_experimental <= 1.0);
}

TEST_CASE("saliency: shape, zero-weights case, label validation") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  prot::Protein p = synth::synth_protein(7, 95);
  std::vector<double> sal = metrics::saliency(st.online, cfg.encoder, p, 1);
  REQUIRE(sal.size() == 7);
  for (double v : sal) CHECK(v >= 0.0);

  for (auto& [path, var] : st.online.params)
    if (path.rfind("downstream/", 0) == 0)
      for (auto& x : var.mutable_value()) x = 0.0;
  std::vector<double> zero = metrics::saliency(st.online, cfg.encoder, p, 1);
  for (double v : zero) CHECK(v == 0.0);

  CHECK(code_of([&] { metrics::saliency(st.online, cfg.encoder, p, 4); }) ==
        ErrorCode::LabelOutOfRange);
  CHECK(code_of([&] { metrics::saliency(st.online, cfg.encoder, p, -1); }) ==
        ErrorCode::LabelOutOfRange);
}

TEST_CASE("saliency matches finite differences") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  prot::Protein p = synth::synth_protein(5, 96);
  const int label = 2;
  std::vector<double> sal = metrics::saliency(st.online, cfg.encoder, p, label);

  auto logit_at = [&](const std::vector<double>& feats) {
    ad::Var fv = ad::Var::constant({5, enc::kResidueFeatureDim}, feats);
    enc::EncoderOutput e =
        enc::encoder_forward(p, {}, st.online, cfg.encoder, "encoder/", fv);
    return heads::downstream_logits(st.online, e.pooled).value()[label];
  };

  std::vector<double> feats = enc::residue_features(p);
  const double h = 1e-5;
  for (int i = 0; i < 5; ++i) {
    double ss = 0;
    for (int c = 0; c < enc::kResidueFeatureDim; ++c) {
      size_t idx = i * enc::kResidueFeatureDim + c;
      double saved = feats[idx];
      feats[idx] = saved + h;
      double fp = logit_at(feats);
      feats[idx] = saved - h;
      double fm = logit_at(feats);
      feats[idx] = saved;
      double g = (fp - fm) / (2 * h);
      ss += g * g;
    }
    double numeric = std::sqrt(ss);
    double denom = std::max({numeric, sal[i], 1e-8});
    CHECK(std::abs(numeric - sal[i]) / denom < 1e-4);
  }
}
