#include "synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace sao::synth {

namespace fs = std::filesystem;
using geom::BackboneResidue;
using geom::Frame;
using geom::Rotation;
using geom::So3Vector;
using geom::Vec3;
using nlohmann::json;

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  // splitmix64 finalizer
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

constexpr double kCaStep = 3.8;  // consecutive CA distance, Angstrom

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  while (true) {
    Vec3 v{g(rng), g(rng), g(rng)};
    double n = v.norm();
    if (n > 1e-6) return v * (1.0 / n);
  }
}

Rotation random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, M_PI);
  return geom::rotation_from_so3({random_unit(rng) * u(rng)});
}

}  // namespace

void PerturbationConfig::validate() const {
  if (sigma_t < 0.0 || sigma_r < 0.0 || sigma_r > M_PI / 2.0)
    fail(ErrorCode::InvalidArgument, "perturbation sigmas out of range");
}

prot::Protein synth_protein(int length, uint64_t seed) {
  if (length < 2 || length > 512)
    fail(ErrorCode::LengthOutOfRange,
         "protein length " + std::to_string(length) + " outside [2, 512]");
  std::mt19937_64 rng(mix_seed(seed, 0x5a17));
  std::uniform_int_distribution<int> aa(0, prot::kNumAminoAcids - 1);
  // Turn-angle distribution chosen to give compact chains with contacts.
  std::normal_distribution<double> turn(1.0, 0.45);

  std::vector<int> seq(length);
  for (auto& s : seq) s = aa(rng);

  std::vector<Frame> frames;
  frames.reserve(length);
  frames.push_back(Frame::identity());
  for (int i = 1; i < length; ++i) {
    double angle = std::clamp(turn(rng), 0.25, 2.6);
    Frame step{geom::rotation_from_so3({random_unit(rng) * angle}),
               Vec3{kCaStep, 0.0, 0.0}};
    frames.push_back(geom::frame_compose(frames.back(), step));
  }
  std::vector<BackboneResidue> bb;
  bb.reserve(length);
  for (const auto& f : frames) bb.push_back(geom::backbone_from_frame(f));
  return prot::make_protein("synth", std::move(seq), std::move(bb));
}

StructurePair perturb(const prot::Protein& p, const PerturbationConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x9e27));
  std::normal_distribution<double> gt(0.0, 1.0);

  std::vector<BackboneResidue> bb;
  bb.reserve(p.backbone.size());
  if (cfg.sigma_t == 0.0 && cfg.sigma_r == 0.0) {
    // Exact copy; rebuilding from re-derived frames would add roundoff.
    bb = p.backbone;
  } else {
    for (const auto& f : p.frames) {
      So3Vector er{{gt(rng) * cfg.sigma_r, gt(rng) * cfg.sigma_r, gt(rng) * cfg.sigma_r}};
      Vec3 et{gt(rng) * cfg.sigma_t, gt(rng) * cfg.sigma_t, gt(rng) * cfg.sigma_t};
      Frame noisy{f.rotation.compose(geom::rotation_from_so3(er)), f.translation + et};
      bb.push_back(geom::backbone_from_frame(noisy));
    }
  }
  if (cfg.apply_global) {
    std::uniform_real_distribution<double> ut(-20.0, 20.0);
    Frame global{random_rotation(rng), Vec3{ut(rng), ut(rng), ut(rng)}};
    for (auto& r : bb)
      r = {geom::frame_apply(global, r.n), geom::frame_apply(global, r.ca),
           geom::frame_apply(global, r.c), geom::frame_apply(global, r.o)};
  }
  StructurePair pair;
  pair.experimental = p;
  pair.predicted = prot::make_protein(p.id, p.sequence, std::move(bb));
  pair.meta.sigma_t = cfg.sigma_t;
  pair.meta.sigma_r = cfg.sigma_r;
  std::vector<Vec3> ca_exp, ca_pred;
  for (const auto& r : pair.experimental.backbone) ca_exp.push_back(r.ca);
  for (const auto& r : pair.predicted.backbone) ca_pred.push_back(r.ca);
  pair.meta.rmsd = geom::kabsch_rmsd(ca_exp, ca_pred);
  return pair;
}

MaskedView make_mask_view(const prot::Protein& p, double ratio, uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0)
    fail(ErrorCode::InvalidArgument, "mask ratio must be in (0, 1)");
  int n = p.length();
  int count = std::max<int>(1, static_cast<int>(std::floor(ratio * n)));
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x3a51));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return {&p, std::move(idx), ratio};
}

std::vector<int> synth_labels(const prot::Protein& p, int k) {
  const int n = p.length();
  std::vector<int> counts(k, 0);
  for (int a = 0; a < n; ++a)
    for (int b = a + 4; b < n; ++b) {
      double d = (p.backbone[a].ca - p.backbone[b].ca).norm();
      if (d < 8.0) counts[(p.sequence[a] + p.sequence[b]) % k]++;
    }
  double threshold = static_cast<double>(n) / 16.0;
  std::vector<int> labels(k);
  for (int j = 0; j < k; ++j) labels[j] = counts[j] > threshold ? 1 : 0;
  return labels;
}

std::string write_pair_json(const StructurePair& pair) {
  json j = {{"format", 1},
            {"experimental", json::parse(prot::write_protein_json(pair.experimental))},
            {"predicted", json::parse(prot::write_protein_json(pair.predicted))},
            {"meta",
             {{"sigma_t", pair.meta.sigma_t},
              {"sigma_r", pair.meta.sigma_r},
              {"rmsd", pair.meta.rmsd}}}};
  return j.dump();
}

StructurePair read_pair_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("/: invalid pair JSON: ") + e.what());
  }
  if (!j.contains("experimental") || !j.contains("predicted"))
    fail(ErrorCode::SchemaError, "/: pair file needs experimental and predicted");
  StructurePair pair;
  pair.experimental = prot::read_protein_json(j["experimental"].dump());
  pair.predicted = prot::read_protein_json(j["predicted"].dump());
  if (pair.experimental.sequence != pair.predicted.sequence)
    fail(ErrorCode::SchemaError, "/predicted/sequence: differs from experimental");
  if (j.contains("meta")) {
    const auto& m = j["meta"];
    pair.meta.sigma_t = m.value("sigma_t", 0.0);
    pair.meta.sigma_r = m.value("sigma_r", 0.0);
    pair.meta.rmsd = m.value("rmsd", 0.0);
  }
  return pair;
}

prot::DatasetManifest build_dataset(const std::string& out_dir,
                                    const DatasetConfig& cfg) {
  if (cfg.n_train < 1 || cfg.n_valid < 1 || cfg.n_test < 1)
    fail(ErrorCode::InvalidArgument, "split counts must be >= 1");
  if (cfg.len_min < 2 || cfg.len_max > 512 || cfg.len_min > cfg.len_max)
    fail(ErrorCode::LengthOutOfRange, "length range invalid");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + out_dir + ": " + ec.message());

  prot::DatasetManifest manifest;
  const std::vector<std::pair<std::string, int>> splits = {
      {"train", cfg.n_train}, {"valid", cfg.n_valid}, {"test", cfg.n_test}};
  uint64_t item = 0;
  for (const auto& [split, count] : splits) {
    for (int i = 0; i < count; ++i, ++item) {
      std::mt19937_64 rng(mix_seed(cfg.seed, item * 3));
      std::uniform_int_distribution<int> len(cfg.len_min, cfg.len_max);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s_%03d", split.c_str(), i);
      prot::Protein base = synth_protein(len(rng), mix_seed(cfg.seed, item * 3 + 1));
      base.id = buf;
      PerturbationConfig pc = cfg.perturbation;
      pc.seed = mix_seed(cfg.seed, item * 3 + 2);
      StructurePair pair = perturb(base, pc);
      std::vector<int> labels = synth_labels(pair.experimental, cfg.n_labels);

      std::string pair_name = std::string(buf) + ".pair.json";
      std::string label_name = std::string(buf) + ".labels.json";
      {
        std::ofstream f(fs::path(out_dir) / pair_name);
        if (!f) fail(ErrorCode::IoError, "cannot write " + pair_name);
        f << write_pair_json(pair);
      }
      {
        std::ofstream f(fs::path(out_dir) / label_name);
        if (!f) fail(ErrorCode::IoError, "cannot write " + label_name);
        f << json(labels).dump();
      }
      manifest.entries.push_back({pair_name, label_name, split});
    }
  }
  std::ofstream f(fs::path(out_dir) / "manifest.json");
  if (!f) fail(ErrorCode::IoError, "cannot write manifest.json");
  f << prot::write_manifest_json(manifest);
  return manifest;
}

std::vector<LabeledPair> load_split(const std::string& dir, const std::string& split) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) fail(ErrorCode::IoError, "cannot open manifest.json in " + dir);
  std::string text((std::istreambuf_iterator<char>(mf)),
                   std::istreambuf_iterator<char>());
  prot::DatasetManifest manifest = prot::read_manifest_json(text);
  std::vector<LabeledPair> out;
  for (const auto& e : manifest.split(split)) {
    std::ifstream pf(fs::path(dir) / e.pair_path);
    if (!pf) fail(ErrorCode::IoError, "missing pair file " + e.pair_path);
    std::string ptext((std::istreambuf_iterator<char>(pf)),
                      std::istreambuf_iterator<char>());
    LabeledPair lp;
    lp.pair = read_pair_json(ptext);
    std::ifstream lf(fs::path(dir) / e.label_path);
    if (!lf) fail(ErrorCode::IoError, "missing label file " + e.label_path);
    json lj;
    lf >> lj;
    for (const auto& v : lj) lp.labels.push_back(v.get<int>());
    out.push_back(std::move(lp));
  }
  return out;
}

}  // namespace sao::synth
