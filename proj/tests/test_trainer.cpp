#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "trainer.hpp"

using namespace sao;
namespace fs = std::filesystem;

namespace {

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
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.lr.warmup_steps = 4;
  return cfg;
}

std::vector<synth::LabeledPair> tiny_dataset(int n, uint64_t seed) {
  std::vector<synth::LabeledPair> out;
  for (int i = 0; i < n; ++i) {
    prot::Protein p = synth::synth_protein(8, seed + i);
    synth::LabeledPair lp;
    lp.pair = synth::perturb(p, {0.5, 0.1, false, seed + 100 + i});
    lp.labels = synth::synth_labels(p, 4);
    out.push_back(std::move(lp));
  }
  return out;
}

bool stores_equal(const ad::ParameterStore& a, const ad::ParameterStore& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [path, var] : a.params) {
    if (!b.contains(path)) return false;
    if (var.value() != b.at(path).value()) return false;
  }
  return true;
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

int count_lines(const std::string& path) {
  std::ifstream f(path);
  int n = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("lr schedule values") {
  train::LrSchedule lr;  // warmup 100, max 1e-4, decay 0.99
  CHECK(train::lr_at(lr, 0, 0) == 0.0);
  CHECK(train::lr_at(lr, 50, 0) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(train::lr_at(lr, 100, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(train::lr_at(lr, 5000, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(train::lr_at(lr, 200, 10) ==
        doctest::Approx(1e-4 * std::pow(0.99, 10)).epsilon(1e-12));
  CHECK(train::lr_at(lr, 200, 10) == doctest::Approx(9.04382e-05).epsilon(1e-5));
}

TEST_CASE("init_model: copy init, determinism, seed sensitivity") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState a = train::init_model(cfg);
  train::ModelState b = train::init_model(cfg);
  CHECK(stores_equal(a.online, b.online));
  CHECK(stores_equal(a.target, b.target));

  // Target tensors mirror the online encoder/projector bit for bit.
  for (const auto& [path, var] : a.target.params) {
    REQUIRE(a.online.contains(path));
    CHECK(var.value() == a.online.at(path).value());
    CHECK_FALSE(var.needs_grad());
  }
  // And the target holds nothing else.
  for (const auto& [path, var] : a.target.params)
    CHECK((path.rfind("encoder/", 0) == 0 || path.rfind("projector/", 0) == 0));

  train::TrainConfig cfg2 = small_cfg();
  cfg2.seed = 99;
  train::ModelState c = train::init_model(cfg2);
  CHECK_FALSE(stores_equal(a.online, c.online));

  // Adam moments start at zero.
  for (const auto& [path, m] : a.adam.m)
    for (double x : m) CHECK(x == 0.0);
  CHECK(a.step == 0);
  CHECK(a.epoch == 0);
}

TEST_CASE("ema_update endpoint and arithmetic cases") {
  // ModelState copies share tensors, so build a fresh state per scenario.
  train::TrainConfig cfg = small_cfg();
  cfg.precision = train::Precision::F64;
  auto fresh = [&] {
    train::ModelState st = train::init_model(cfg);
    for (auto& [path, var] : st.online.params)
      for (auto& x : var.mutable_value()) x = 2.0;
    for (auto& [path, var] : st.target.params)
      for (auto& x : var.mutable_value()) x = 0.0;
    return st;
  };

  train::ModelState unchanged = fresh();
  train::ema_update(unchanged, 1.0, cfg.precision);
  for (const auto& [path, var] : unchanged.target.params)
    for (double x : var.value()) CHECK(x == 0.0);

  train::ModelState copied = fresh();
  train::ema_update(copied, 0.0, cfg.precision);
  for (const auto& [path, var] : copied.target.params)
    for (double x : var.value()) CHECK(x == 2.0);

  train::ModelState mid = fresh();
  train::ema_update(mid, 0.5, cfg.precision);
  for (const auto& [path, var] : mid.target.params)
    for (double x : var.value()) CHECK(x == 1.0);
}

TEST_CASE("ema_update follows the geometric series with frozen online") {
  train::TrainConfig cfg = small_cfg();
  cfg.precision = train::Precision::F64;
  train::ModelState st = train::init_model(cfg);
  const double lambda = 0.9;
  const int n = 25;

  std::map<std::string, std::vector<double>> phi0;
  for (const auto& [path, var] : st.target.params) phi0[path] = var.value();
  for (int k = 0; k < n; ++k) train::ema_update(st, lambda, cfg.precision);

  double ln = std::pow(lambda, n);
  for (const auto& [path, var] : st.target.params) {
    const auto& theta = st.online.at(path).value();
    for (size_t i = 0; i < theta.size(); ++i) {
      double want = ln * phi0[path][i] + (1 - ln) * theta[i];
      CHECK(var.value()[i] == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("optimizer_step at step 0 leaves parameters unchanged") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [path, var] : st.online.params) before[path] = var.value();

  ad::GradientMap grads;
  for (const auto& [path, var] : st.online.params)
    grads[path] = std::vector<double>(var.size(), 1.0);
  train::optimizer_step(st, grads, cfg);
  CHECK(st.step == 1);
  for (const auto& [path, var] : st.online.params) CHECK(var.value() == before[path]);

  // The next step has nonzero lr and does move parameters.
  train::optimizer_step(st, grads, cfg);
  bool moved = false;
  for (const auto& [path, var] : st.online.params)
    if (var.value() != before[path]) moved = true;
  CHECK(moved);
}

TEST_CASE("f32 precision rounds parameters to float representables") {
  train::TrainConfig cfg = small_cfg();
  cfg.epochs = 1;
  train::ModelState st = train::pretrain(tiny_dataset(2, 7), cfg, "");
  CHECK(st.step > 0);
  for (const auto& [path, var] : st.online.params)
    for (double x : var.value())
      CHECK(static_cast<double>(static_cast<float>(x)) == x);
  for (const auto& [path, var] : st.target.params)
    for (double x : var.value())
      CHECK(static_cast<double>(static_cast<float>(x)) == x);
}

TEST_CASE("pretrain is bit-reproducible and logs metrics") {
  train::TrainConfig cfg = small_cfg();
  cfg.epochs = 2;
  std::vector<synth::LabeledPair> data = tiny_dataset(4, 3);

  fs::path metrics = fs::temp_directory_path() / "sao_trainer_metrics.jsonl";
  fs::remove(metrics);
  train::ModelState a = train::pretrain(data, cfg, metrics.string());
  train::ModelState b = train::pretrain(data, cfg, "");
  CHECK(stores_equal(a.online, b.online));
  CHECK(stores_equal(a.target, b.target));
  CHECK(a.step == b.step);

  // 4 pairs, batch 2, 2 epochs -> 4 optimizer steps, one log line each.
  CHECK(a.step == 4);
  CHECK(count_lines(metrics.string()) == 4);
  std::ifstream f(metrics.string());
  std::string first;
  std::getline(f, first);
  CHECK(first.find("\"align_pred\"") != std::string::npos);
  CHECK(first.find("\"mlm\"") != std::string::npos);
  CHECK(first.find("\"total\"") != std::string::npos);
  fs::remove(metrics);

  CHECK(code_of([&] { train::pretrain({}, cfg, ""); }) == ErrorCode::EmptyDataset);
}

TEST_CASE("pretrain changes results across seeds") {
  train::TrainConfig cfg = small_cfg();
  std::vector<synth::LabeledPair> data = tiny_dataset(2, 5);
  train::ModelState a = train::pretrain(data, cfg, "");
  cfg.seed = 1;
  train::ModelState b = train::pretrain(data, cfg, "");
  CHECK_FALSE(stores_equal(a.online, b.online));
}

TEST_CASE("finetune modes") {
  train::TrainConfig cfg = small_cfg();
  std::vector<synth::LabeledPair> data = tiny_dataset(4, 11);

  CHECK(train::finetune_mode_from_string("vanilla") == train::FinetuneMode::Vanilla);
  CHECK(train::finetune_mode_from_string("sao") == train::FinetuneMode::Sao);
  CHECK(train::finetune_mode_to_string(train::FinetuneMode::Mixed) == "mixed");
  CHECK_THROWS_AS(train::finetune_mode_from_string("nope"), Error);

  train::ModelState vanilla =
      train::finetune(data, train::FinetuneMode::Vanilla, nullptr, cfg, "");
  CHECK(vanilla.step == 2);  // 4 samples, batch 2, 1 epoch

  // Mixed trains on both structures of every pair: twice the samples.
  train::ModelState mixed =
      train::finetune(data, train::FinetuneMode::Mixed, nullptr, cfg, "");
  CHECK(mixed.step == 4);

  CHECK(code_of([&] {
          train::finetune(data, train::FinetuneMode::Sao, nullptr, cfg, "");
        }) == ErrorCode::MissingCheckpoint);

  train::ModelState pre = train::pretrain(data, cfg, "");
  train::ModelState sao = train::finetune(data, train::FinetuneMode::Sao, &pre, cfg, "");
  CHECK(sao.step == 2);
  // The sao run must differ from vanilla only through its initialization, so
  // with an untouched pretrained encoder both runs still diverge.
  CHECK_FALSE(stores_equal(vanilla.online, sao.online));

  // Determinism of finetune itself.
  train::ModelState vanilla2 =
      train::finetune(data, train::FinetuneMode::Vanilla, nullptr, cfg, "");
  CHECK(stores_equal(vanilla.online, vanilla2.online));
}

TEST_CASE("sao finetune starts from the pretrained encoder") {
  // One optimizer step at step 0 has lr 0, so parameters keep their
  // initialization values.
  train::TrainConfig cfg = small_cfg();
  cfg.epochs = 1;
  cfg.lr.warmup_steps = 1000;
  std::vector<synth::LabeledPair> data = tiny_dataset(2, 13);
  train::TrainConfig precfg = small_cfg();
  precfg.batch_size = 1;
  precfg.epochs = 2;
  precfg.lr.warmup_steps = 1;
  train::ModelState pre = train::pretrain(data, precfg, "");

  train::ModelState sao = train::finetune(data, train::FinetuneMode::Sao, &pre, cfg, "");
  for (const auto& [path, var] : sao.online.params) {
    if (path.rfind("encoder/", 0) == 0)
      CHECK(var.value() == pre.online.at(path).value());
  }
  train::ModelState vanilla =
      train::finetune(data, train::FinetuneMode::Vanilla, nullptr, cfg, "");
  bool differs = false;
  for (const auto& [path, var] : vanilla.online.params)
    if (path.rfind("encoder/", 0) == 0 && var.value() != sao.online.at(path).value())
      differs = true;
  CHECK(differs);
}

TEST_CASE("config json round trip and validation") {
  train::TrainConfig cfg = small_cfg();
  cfg.epochs = 17;
  cfg.ema_lambda = 0.975;
  cfg.precision = train::Precision::F64;
  cfg.grad_clip = 2.5;
  train::TrainConfig back =
      train::train_config_from_json_text(train::train_config_to_json_text(cfg));
  CHECK(back.epochs == 17);
  CHECK(back.ema_lambda == doctest::Approx(0.975));
  CHECK(back.precision == train::Precision::F64);
  CHECK(back.grad_clip == doctest::Approx(2.5));
  CHECK(back.encoder.d_m == cfg.encoder.d_m);
  CHECK(back.lr.warmup_steps == cfg.lr.warmup_steps);

  // Absent keys keep defaults.
  train::TrainConfig partial = train::train_config_from_json_text(R"({"epochs": 3})");
  CHECK(partial.epochs == 3);
  CHECK(partial.batch_size == 8);
  CHECK(partial.encoder.d_m == 64);

  CHECK(code_of([] { train::train_config_from_json_text("{\"precision\":\"f16\"}"); }) ==
        ErrorCode::SchemaError);
  CHECK(code_of([] { train::train_config_from_json_text("not json"); }) ==
        ErrorCode::SchemaError);

  train::TrainConfig bad = small_cfg();
  bad.ema_lambda = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  train::TrainConfig bad2 = small_cfg();
  bad2.batch_size = 0;
  CHECK_THROWS_AS(bad2.validate(), Error);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  train::TrainConfig cfg = small_cfg();
  std::vector<synth::LabeledPair> data = tiny_dataset(2, 17);
  train::ModelState st = train::pretrain(data, cfg, "");

  fs::path path = fs::temp_directory_path() / "sao_trainer_ck.sao";
  fs::remove(path);
  train::save_checkpoint(st, cfg, path.string());
  train::LoadedCheckpoint lc = train::load_checkpoint(path.string());

  CHECK(lc.state.step == st.step);
  CHECK(lc.state.epoch == st.epoch);
  CHECK(stores_equal(lc.state.online, st.online));
  CHECK(stores_equal(lc.state.target, st.target));
  REQUIRE(lc.state.adam.m.size() == st.adam.m.size());
  for (const auto& [path_, m] : st.adam.m) {
    std::vector<double> got = lc.state.adam.m.at(path_);
    for (size_t i = 0; i < m.size(); ++i)
      CHECK(got[i] == static_cast<double>(static_cast<float>(m[i])));
  }
  CHECK(lc.config.encoder.d_m == cfg.encoder.d_m);
  CHECK(lc.config.heads.n_labels == cfg.heads.n_labels);

  // Loaded target tensors stay constant.
  for (const auto& [p, var] : lc.state.target.params) CHECK_FALSE(var.needs_grad());
  fs::remove(path);
}

TEST_CASE("checkpoint error classes") {
  train::TrainConfig cfg = small_cfg();
  train::ModelState st = train::init_model(cfg);
  fs::path path = fs::temp_directory_path() / "sao_trainer_ck2.sao";
  train::save_checkpoint(st, cfg, path.string());

  CHECK(code_of([] { train::load_checkpoint("/nonexistent/dir/x.sao"); }) ==
        ErrorCode::IoError);

  // Truncated payload.
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 40));
  }
  CHECK(code_of([&] { train::load_checkpoint(path.string()); }) ==
        ErrorCode::ManifestLengthMismatch);

  // Unknown format version in the header.
  train::save_checkpoint(st, cfg, path.string());
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    size_t at = all.find("\"format\":1");
    REQUIRE(at != std::string::npos);
    all.replace(at, 10, "\"format\":2");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), static_cast<std::streamsize>(all.size()));
  }
  CHECK(code_of([&] { train::load_checkpoint(path.string()); }) ==
        ErrorCode::FormatVersionMismatch);

  // Garbage header.
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "this is not a checkpoint\n";
  }
  CHECK(code_of([&] { train::load_checkpoint(path.string()); }) ==
        ErrorCode::SchemaError);
  fs::remove(path);
}
