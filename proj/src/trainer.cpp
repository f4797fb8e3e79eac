#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace sao::train {

using ad::Var;
using nlohmann::json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void round_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void round_store_f32(ad::ParameterStore& s) {
  for (auto& [path, var] : s.params) {
    (void)path;
    round_f32(var.mutable_value());
  }
}

bool is_target_path(const std::string& path) {
  return path.rfind("encoder/", 0) == 0 || path.rfind("projector/", 0) == 0;
}

json config_to_json(const TrainConfig& c) {
  return json{
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"ema_lambda", c.ema_lambda},
      {"weights",
       {{"align", c.weights.gamma_align},
        {"mlm", c.weights.gamma_mlm},
        {"mse", c.weights.gamma_mse}}},
      {"lr",
       {{"warmup_steps", c.lr.warmup_steps},
        {"max_lr", c.lr.max_lr},
        {"decay_per_epoch", c.lr.decay_per_epoch}}},
      {"seed", c.seed},
      {"precision", c.precision == Precision::F32 ? "f32" : "f64"},
      {"mask_ratio", c.mask_ratio},
      {"grad_clip", c.grad_clip},
      {"encoder",
       {{"d_m", c.encoder.d_m},
        {"d_z", c.encoder.d_z},
        {"layers", c.encoder.layers},
        {"heads", c.encoder.heads},
        {"pe_channels", c.encoder.pe_channels},
        {"n_pair_types", c.encoder.n_pair_types},
        {"ffn_hidden", c.encoder.ffn_hidden},
        {"pair_hidden", c.encoder.pair_hidden}}},
      {"heads",
       {{"proj_hidden", c.heads.proj_hidden},
        {"proj_dim", c.heads.proj_dim},
        {"denoise_hidden", c.heads.denoise_hidden},
        {"downstream_hidden", c.heads.downstream_hidden},
        {"n_labels", c.heads.n_labels}}}};
}

// Missing keys keep the defaults of a freshly constructed TrainConfig, so the
// same parser serves user config files and full checkpoint headers.
TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.ema_lambda = j.value("ema_lambda", c.ema_lambda);
    if (j.contains("weights")) {
      const json& w = j.at("weights");
      c.weights.gamma_align = w.value("align", c.weights.gamma_align);
      c.weights.gamma_mlm = w.value("mlm", c.weights.gamma_mlm);
      c.weights.gamma_mse = w.value("mse", c.weights.gamma_mse);
    }
    if (j.contains("lr")) {
      const json& l = j.at("lr");
      c.lr.warmup_steps = l.value("warmup_steps", c.lr.warmup_steps);
      c.lr.max_lr = l.value("max_lr", c.lr.max_lr);
      c.lr.decay_per_epoch = l.value("decay_per_epoch", c.lr.decay_per_epoch);
    }
    c.seed = j.value("seed", c.seed);
    std::string prec = j.value("precision", std::string("f32"));
    if (prec != "f32" && prec != "f64")
      fail(ErrorCode::SchemaError, "train config: precision must be f32 or f64");
    c.precision = prec == "f64" ? Precision::F64 : Precision::F32;
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (j.contains("encoder")) {
      const json& e = j.at("encoder");
      c.encoder.d_m = e.value("d_m", c.encoder.d_m);
      c.encoder.d_z = e.value("d_z", c.encoder.d_z);
      c.encoder.layers = e.value("layers", c.encoder.layers);
      c.encoder.heads = e.value("heads", c.encoder.heads);
      c.encoder.pe_channels = e.value("pe_channels", c.encoder.pe_channels);
      c.encoder.n_pair_types = e.value("n_pair_types", c.encoder.n_pair_types);
      c.encoder.ffn_hidden = e.value("ffn_hidden", c.encoder.ffn_hidden);
      c.encoder.pair_hidden = e.value("pair_hidden", c.encoder.pair_hidden);
    }
    if (j.contains("heads")) {
      const json& h = j.at("heads");
      c.heads.proj_hidden = h.value("proj_hidden", c.heads.proj_hidden);
      c.heads.proj_dim = h.value("proj_dim", c.heads.proj_dim);
      c.heads.denoise_hidden = h.value("denoise_hidden", c.heads.denoise_hidden);
      c.heads.downstream_hidden = h.value("downstream_hidden", c.heads.downstream_hidden);
      c.heads.n_labels = h.value("n_labels", c.heads.n_labels);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("train config: ") + e.what());
  }
  return c;
}

class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) fail(ErrorCode::IoError, "cannot open metrics file " + path);
  }

  void line(const json& j) {
    if (out_.is_open()) out_ << j.dump() << "\n";
  }

 private:
  std::ofstream out_;
};

void clip_gradients(ad::GradientMap& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& [p, g] : grads) {
    (void)p;
    for (double x : g) sq += x * x;
  }
  double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  double scale = max_norm / norm;
  for (auto& [p, g] : grads) {
    (void)p;
    for (double& x : g) x *= scale;
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorCode::InvalidArgument, "epochs must be >= 1");
  if (batch_size < 1) fail(ErrorCode::InvalidArgument, "batch_size must be >= 1");
  if (!(ema_lambda >= 0.0 && ema_lambda <= 1.0))
    fail(ErrorCode::InvalidArgument, "ema_lambda must lie in [0, 1]");
  if (!(lr.max_lr > 0.0)) fail(ErrorCode::InvalidArgument, "max_lr must be > 0");
  if (lr.warmup_steps < 1) fail(ErrorCode::InvalidArgument, "warmup_steps must be >= 1");
  if (!(lr.decay_per_epoch > 0.0 && lr.decay_per_epoch <= 1.0))
    fail(ErrorCode::InvalidArgument, "decay_per_epoch must lie in (0, 1]");
  if (!(mask_ratio > 0.0 && mask_ratio <= 1.0))
    fail(ErrorCode::InvalidArgument, "mask_ratio must lie in (0, 1]");
  if (grad_clip < 0.0) fail(ErrorCode::InvalidArgument, "grad_clip must be >= 0");
  weights.validate();
  encoder.validate();
}

ModelState init_model(const TrainConfig& cfg) {
  cfg.validate();
  ModelState state;
  std::mt19937_64 rng(synth::mix_seed(cfg.seed, 0x1d17));
  enc::init_encoder_params(state.online, cfg.encoder, rng, "encoder/");
  heads::init_head_params(state.online, cfg.encoder, cfg.heads, rng);
  if (cfg.precision == Precision::F32) round_store_f32(state.online);
  for (const auto& [path, var] : state.online.params)
    if (is_target_path(path))
      state.target.add(path, Var::constant(var.shape(), var.value()));
  for (const auto& [path, var] : state.online.params) {
    state.adam.m[path] = std::vector<double>(var.size(), 0.0);
    state.adam.v[path] = std::vector<double>(var.size(), 0.0);
  }
  return state;
}

void ema_update(ModelState& state, double lambda, Precision precision) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    fail(ErrorCode::InvalidArgument, "ema lambda must lie in [0, 1]");
  for (auto& [path, var] : state.target.params) {
    const std::vector<double>& online = state.online.at(path).value();
    std::vector<double>& phi = var.mutable_value();
    for (size_t i = 0; i < phi.size(); ++i)
      phi[i] = lambda * phi[i] + (1.0 - lambda) * online[i];
    if (precision == Precision::F32) round_f32(phi);
  }
}

double lr_at(const LrSchedule& lr, int64_t step, int epoch) {
  double warm = std::min(static_cast<double>(step) / lr.warmup_steps, 1.0);
  return lr.max_lr * warm * std::pow(lr.decay_per_epoch, epoch);
}

void optimizer_step(ModelState& state, const ad::GradientMap& grads,
                    const TrainConfig& cfg) {
  const double lr = lr_at(cfg.lr, state.step, state.epoch);
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);
  for (auto& [path, var] : state.online.params) {
    auto it = grads.find(path);
    if (it == grads.end() || it->second.size() != static_cast<size_t>(var.size()))
      fail(ErrorCode::ShapeMismatch, "optimizer_step: gradient missing for " + path);
    const std::vector<double>& g = it->second;
    std::vector<double>& m = state.adam.m[path];
    std::vector<double>& v = state.adam.v[path];
    std::vector<double>& p = var.mutable_value();
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kAdamEps);
    }
    if (cfg.precision == Precision::F32) {
      round_f32(p);
      round_f32(m);
      round_f32(v);
    }
  }
  ++state.step;
}

ModelState pretrain(const std::vector<synth::LabeledPair>& train,
                    const TrainConfig& cfg, const std::string& metrics_path) {
  cfg.validate();
  if (train.empty()) fail(ErrorCode::EmptyDataset, "pretrain: empty train split");
  ModelState state = init_model(cfg);
  MetricsLog log(metrics_path);
  std::mt19937_64 shuffle_rng(synth::mix_seed(cfg.seed, 0x54f1));
  uint64_t sample_counter = 0;
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      ad::zero_gradients(state.online);
      losses::LossBreakdown mean;
      for (size_t b = start; b < end; ++b) {
        const synth::StructurePair& pair = train[order[b]].pair;
        synth::MaskedView view = synth::make_mask_view(
            pair.experimental, cfg.mask_ratio,
            synth::mix_seed(cfg.seed, 0xa100 + sample_counter++));
        losses::TotalLossResult res =
            losses::total_loss(state.online, state.target, cfg.encoder, pair,
                               view.masked_positions, cfg.weights);
        ad::backward(res.total);
        mean.align_pred += res.breakdown.align_pred;
        mean.align_mask += res.breakdown.align_mask;
        mean.mlm += res.breakdown.mlm;
        mean.mse += res.breakdown.mse;
        mean.total += res.breakdown.total;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ad::GradientMap grads = ad::collect_gradients(state.online);
      for (auto& [p, g] : grads) {
        (void)p;
        for (double& x : g) x *= inv;
      }
      clip_gradients(grads, cfg.grad_clip);
      const double lr = lr_at(cfg.lr, state.step, state.epoch);
      optimizer_step(state, grads, cfg);
      ema_update(state, cfg.ema_lambda, cfg.precision);
      log.line(json{{"step", state.step},
                    {"epoch", epoch},
                    {"lr", lr},
                    {"align_pred", mean.align_pred * inv},
                    {"align_mask", mean.align_mask * inv},
                    {"mlm", mean.mlm * inv},
                    {"mse", mean.mse * inv},
                    {"total", mean.total * inv}});
    }
  }
  return state;
}

FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "vanilla") return FinetuneMode::Vanilla;
  if (s == "tonp") return FinetuneMode::Tonp;
  if (s == "mixed") return FinetuneMode::Mixed;
  if (s == "sao") return FinetuneMode::Sao;
  fail(ErrorCode::InvalidArgument, "unknown finetune mode: " + s);
}

std::string finetune_mode_to_string(FinetuneMode m) {
  switch (m) {
    case FinetuneMode::Vanilla: return "vanilla";
    case FinetuneMode::Tonp: return "tonp";
    case FinetuneMode::Mixed: return "mixed";
    case FinetuneMode::Sao: return "sao";
  }
  fail(ErrorCode::InvalidArgument, "unknown finetune mode");
}

ModelState finetune(const std::vector<synth::LabeledPair>& train,
                    FinetuneMode mode, const ModelState* pretrained,
                    const TrainConfig& cfg, const std::string& metrics_path) {
  cfg.validate();
  if (train.empty()) fail(ErrorCode::EmptyDataset, "finetune: empty train split");
  if (mode == FinetuneMode::Sao && pretrained == nullptr)
    fail(ErrorCode::MissingCheckpoint, "finetune mode sao requires a pretrained model");

  ModelState state = init_model(cfg);
  if (mode == FinetuneMode::Sao) {
    for (auto& [path, var] : state.online.params) {
      if (path.rfind("encoder/", 0) != 0) continue;
      const Var& src = pretrained->online.at(path);
      if (src.size() != var.size())
        fail(ErrorCode::ShapeMismatch, "finetune: pretrained shape differs at " + path);
      var.mutable_value() = src.value();
    }
  }

  struct Sample {
    const prot::Protein* p;
    const std::vector<int>* labels;
  };
  std::vector<Sample> samples;
  for (const synth::LabeledPair& item : train) {
    if (mode != FinetuneMode::Tonp)
      samples.push_back({&item.pair.experimental, &item.labels});
    if (mode == FinetuneMode::Tonp || mode == FinetuneMode::Mixed)
      samples.push_back({&item.pair.predicted, &item.labels});
  }

  MetricsLog log(metrics_path);
  std::mt19937_64 shuffle_rng(synth::mix_seed(cfg.seed, 0x54f1));
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      ad::zero_gradients(state.online);
      double mean_bce = 0.0;
      for (size_t b = start; b < end; ++b) {
        const Sample& s = samples[order[b]];
        enc::EncoderOutput out =
            enc::encoder_forward(*s.p, {}, state.online, cfg.encoder, "encoder/");
        Var loss = losses::bce_multilabel_loss(
            heads::downstream_logits(state.online, out.pooled), *s.labels);
        ad::backward(loss);
        mean_bce += loss.item();
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ad::GradientMap grads = ad::collect_gradients(state.online);
      for (auto& [p, g] : grads) {
        (void)p;
        for (double& x : g) x *= inv;
      }
      clip_gradients(grads, cfg.grad_clip);
      const double lr = lr_at(cfg.lr, state.step, state.epoch);
      optimizer_step(state, grads, cfg);
      log.line(json{{"step", state.step},
                    {"epoch", epoch},
                    {"lr", lr},
                    {"total", mean_bce * inv}});
    }
  }
  return state;
}

TrainConfig train_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("train config: ") + e.what());
  }
  return config_from_json(j);
}

std::string train_config_to_json_text(const TrainConfig& cfg) {
  return config_to_json(cfg).dump(2);
}

namespace {

struct TensorRef {
  std::string path;
  const std::vector<double>* values;
  ad::Shape shape;
};

std::vector<TensorRef> checkpoint_tensors(const ModelState& state) {
  std::vector<TensorRef> refs;
  for (const auto& [path, var] : state.online.params)
    refs.push_back({"online/" + path, &var.value(), var.shape()});
  for (const auto& [path, var] : state.target.params)
    refs.push_back({"target/" + path, &var.value(), var.shape()});
  for (const auto& [path, v] : state.adam.m)
    refs.push_back({"adam_m/" + path,
                    &v,
                    {static_cast<int64_t>(v.size())}});
  for (const auto& [path, v] : state.adam.v)
    refs.push_back({"adam_v/" + path,
                    &v,
                    {static_cast<int64_t>(v.size())}});
  return refs;
}

}  // namespace

void save_checkpoint(const ModelState& state, const TrainConfig& cfg,
                     const std::string& path) {
  std::vector<TensorRef> refs = checkpoint_tensors(state);
  json manifest = json::array();
  int64_t offset = 0;
  for (const TensorRef& r : refs) {
    manifest.push_back(
        {{"path", r.path}, {"shape", r.shape}, {"offset", offset}});
    offset += static_cast<int64_t>(r.values->size()) * 4;
  }
  json header{{"format", 1},
              {"config", config_to_json(cfg)},
              {"step", state.step},
              {"epoch", state.epoch},
              {"manifest", manifest}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open checkpoint for writing: " + path);
  out << header.dump() << "\n";
  for (const TensorRef& r : refs) {
    std::vector<float> buf(r.values->begin(), r.values->end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) fail(ErrorCode::IoError, "short write to checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open checkpoint: " + path);
  std::string header_line;
  if (!std::getline(in, header_line))
    fail(ErrorCode::IoError, "checkpoint missing header: " + path);
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("checkpoint header: ") + e.what());
  }
  if (!header.contains("format") || !header["format"].is_number_integer() ||
      header["format"].get<int>() != 1)
    fail(ErrorCode::FormatVersionMismatch, "unsupported checkpoint format");

  LoadedCheckpoint ck;
  ck.config = config_from_json(header.at("config"));
  ck.state.step = header.at("step").get<int64_t>();
  ck.state.epoch = header.at("epoch").get<int>();

  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  struct Entry {
    std::string path;
    ad::Shape shape;
    int64_t offset;
  };
  std::vector<Entry> entries;
  int64_t expected = 0;
  try {
    for (const json& e : header.at("manifest")) {
      Entry entry{e.at("path").get<std::string>(),
                  e.at("shape").get<ad::Shape>(), e.at("offset").get<int64_t>()};
      expected += ad::shape_size(entry.shape) * 4;
      entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("checkpoint manifest: ") + e.what());
  }
  if (static_cast<int64_t>(payload.size()) != expected)
    fail(ErrorCode::ManifestLengthMismatch,
         "checkpoint payload is " + std::to_string(payload.size()) +
             " bytes, manifest expects " + std::to_string(expected));

  for (const Entry& e : entries) {
    int64_t n = ad::shape_size(e.shape);
    if (e.offset < 0 || e.offset + n * 4 > static_cast<int64_t>(payload.size()))
      fail(ErrorCode::ManifestLengthMismatch, "manifest offset out of range: " + e.path);
    std::vector<float> buf(static_cast<size_t>(n));
    std::memcpy(buf.data(), payload.data() + e.offset, static_cast<size_t>(n) * 4);
    std::vector<double> vals(buf.begin(), buf.end());
    if (e.path.rfind("online/", 0) == 0) {
      ck.state.online.add(e.path.substr(7), Var::leaf(e.shape, std::move(vals)));
    } else if (e.path.rfind("target/", 0) == 0) {
      ck.state.target.add(e.path.substr(7), Var::constant(e.shape, std::move(vals)));
    } else if (e.path.rfind("adam_m/", 0) == 0) {
      ck.state.adam.m[e.path.substr(7)] = std::move(vals);
    } else if (e.path.rfind("adam_v/", 0) == 0) {
      ck.state.adam.v[e.path.substr(7)] = std::move(vals);
    } else {
      fail(ErrorCode::SchemaError, "unknown tensor group in manifest: " + e.path);
    }
  }
  return ck;
}

}  // namespace sao::train
