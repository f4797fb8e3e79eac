#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <sao/sao.h>

#include "protein.hpp"
#include "synth.hpp"

namespace fs = std::filesystem;

namespace {

const char* kSmallTrain = R"({
  "epochs": 1, "batch_size": 2, "lr": {"warmup_steps": 2},
  "encoder": {"d_m": 16, "d_z": 8, "layers": 1, "heads": 2,
              "pe_channels": 4, "ffn_hidden": 32, "pair_hidden": 8},
  "heads": {"proj_hidden": 16, "proj_dim": 8, "denoise_hidden": 16,
            "downstream_hidden": 8, "n_labels": 4}
})";

fs::path workdir() {
  fs::path d = fs::temp_directory_path() / "sao_capi_test";
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("dataset generation, pretraining, fine-tuning, and evaluation") {
  fs::path dir = workdir();
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::path data = dir / "data";

  // Long enough chains that the test labels mix positives and negatives.
  const char* gen_cfg = R"({"n_train": 4, "n_valid": 2, "n_test": 4,
                            "len_min": 24, "len_max": 32, "n_labels": 4, "seed": 5})";
  REQUIRE(sao_dataset_generate(data.c_str(), gen_cfg) == SAO_OK);
  CHECK(fs::exists(data / "manifest.json"));

  fs::path pre_ck = dir / "pre.sao";
  fs::path metrics = dir / "pre_metrics.jsonl";
  REQUIRE(sao_pretrain(data.c_str(), kSmallTrain, pre_ck.c_str(), metrics.c_str()) ==
          SAO_OK);
  CHECK(fs::exists(pre_ck));
  CHECK(slurp(metrics).find("\"total\"") != std::string::npos);

  fs::path van_ck = dir / "van.sao";
  REQUIRE(sao_finetune(data.c_str(), "vanilla", nullptr, kSmallTrain, van_ck.c_str(),
                       nullptr) == SAO_OK);
  fs::path sao_ck = dir / "sao.sao";
  REQUIRE(sao_finetune(data.c_str(), "sao", pre_ck.c_str(), kSmallTrain,
                       sao_ck.c_str(), nullptr) == SAO_OK);

  // "sao" mode without an init checkpoint is a validation error.
  CHECK(sao_finetune(data.c_str(), "sao", nullptr, kSmallTrain,
                     (dir / "x.sao").c_str(), nullptr) == SAO_ERROR_VALIDATION);
  CHECK(std::strlen(sao_last_error()) > 0);
  CHECK(sao_finetune(data.c_str(), "bogus-mode", nullptr, kSmallTrain,
                     (dir / "x.sao").c_str(), nullptr) != SAO_OK);

  sao_model* model = nullptr;
  REQUIRE(sao_model_load(van_ck.c_str(), &model) == SAO_OK);
  REQUIRE(model != nullptr);

  char* report = nullptr;
  REQUIRE(sao_model_eval(model, data.c_str(), "test", &report) == SAO_OK);
  REQUIRE(report != nullptr);
  std::string rj(report);
  sao_string_free(report);
  CHECK(rj.find("\"experimental\"") != std::string::npos);
  CHECK(rj.find("\"predicted\"") != std::string::npos);
  CHECK(rj.find("\"fmax\"") != std::string::npos);
  CHECK(rj.find("\"gap\"") != std::string::npos);

  char* bias = nullptr;
  fs::path dump = dir / "emb.jsonl";
  REQUIRE(sao_model_bias(model, data.c_str(), "test", dump.c_str(), &bias) == SAO_OK);
  std::string bj(bias);
  sao_string_free(bias);
  CHECK(bj.find("\"mean_distance\"") != std::string::npos);
  CHECK(fs::exists(dump));

  CHECK(sao_model_eval(model, data.c_str(), "nope", &report) != SAO_OK);

  sao_model_free(model);
  fs::remove_all(dir);
}

TEST_CASE("saliency through the C API") {
  fs::path dir = workdir();
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::path data = dir / "data";
  const char* gen_cfg = R"({"n_train": 2, "n_valid": 1, "n_test": 1,
                            "len_min": 8, "len_max": 8, "n_labels": 4, "seed": 6})";
  REQUIRE(sao_dataset_generate(data.c_str(), gen_cfg) == SAO_OK);
  fs::path ck = dir / "m.sao";
  REQUIRE(sao_finetune(data.c_str(), "vanilla", nullptr, kSmallTrain, ck.c_str(),
                       nullptr) == SAO_OK);
  sao_model* model = nullptr;
  REQUIRE(sao_model_load(ck.c_str(), &model) == SAO_OK);

  fs::path protein = dir / "p.protein.json";
  {
    std::ofstream f(protein);
    f << sao::prot::write_protein_json(sao::synth::synth_protein(8, 7));
  }
  char* out = nullptr;
  REQUIRE(sao_model_saliency(model, protein.c_str(), 0, &out) == SAO_OK);
  REQUIRE(out != nullptr);
  std::string sj(out);
  sao_string_free(out);
  CHECK(sj.find("\"saliency\"") != std::string::npos);
  CHECK(sj.find("\"label\": 0") != std::string::npos);

  CHECK(sao_model_saliency(model, protein.c_str(), 99, &out) == SAO_ERROR_VALIDATION);
  CHECK(sao_model_saliency(model, (data / "manifest.json").c_str(), 0, &out) ==
        SAO_ERROR_IO);

  sao_model_free(model);
  fs::remove_all(dir);
}

TEST_CASE("pdb parsing through the C API") {
  fs::path dir = workdir();
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::path pdb = dir / "toy.pdb";
  {
    std::ofstream f(pdb);
    auto line = [&](int serial, const char* name, const char* res, char chain,
                    int seq, double x, double y, double z) {
      char buf[96];
      std::snprintf(buf, sizeof buf,
                    "ATOM  %5d %-4s %-3s %c%4d    %8.3f%8.3f%8.3f\n", serial, name,
                    res, chain, seq, x, y, z);
      f << buf;
    };
    // Two residues with clearly non-collinear backbones.
    line(1, "N", "ALA", 'A', 1, -0.5, 1.4, 0.0);
    line(2, "CA", "ALA", 'A', 1, 0.0, 0.0, 0.0);
    line(3, "C", "ALA", 'A', 1, 1.5, 0.0, 0.0);
    line(4, "O", "ALA", 'A', 1, 2.2, 1.0, 0.1);
    line(5, "N", "GLY", 'A', 2, 3.3, 1.4, 0.2);
    line(6, "CA", "GLY", 'A', 2, 3.8, 0.0, 0.2);
    line(7, "C", "GLY", 'A', 2, 5.3, 0.0, 0.3);
    line(8, "O", "GLY", 'A', 2, 6.0, 1.0, 0.4);
  }

  char* ids = nullptr;
  REQUIRE(sao_parse_pdb(pdb.c_str(), dir.c_str(), 0, &ids) == SAO_OK);
  REQUIRE(ids != nullptr);
  std::string idj(ids);
  sao_string_free(ids);
  CHECK(idj.find("A") != std::string::npos);
  CHECK(fs::exists(dir / "A.protein.json"));

  // Strict mode on a chain missing O atoms.
  fs::path bad = dir / "bad.pdb";
  {
    std::ifstream in(pdb);
    std::ofstream out(bad);
    std::string line;
    while (std::getline(in, line))
      if (line.find(" O ") == std::string::npos) out << line << "\n";
  }
  CHECK(sao_parse_pdb(bad.c_str(), dir.c_str(), 1, nullptr) == SAO_ERROR_VALIDATION);
  CHECK(sao_parse_pdb((dir / "missing.pdb").c_str(), dir.c_str(), 0, nullptr) ==
        SAO_ERROR_IO);
  fs::remove_all(dir);
}

TEST_CASE("argument and io error mapping") {
  CHECK(sao_dataset_generate(nullptr, nullptr) == SAO_ERROR_ARGUMENT);
  CHECK(sao_pretrain(nullptr, nullptr, nullptr, nullptr) == SAO_ERROR_ARGUMENT);
  sao_model* m = nullptr;
  CHECK(sao_model_load(nullptr, &m) == SAO_ERROR_ARGUMENT);
  CHECK(sao_model_load("/nonexistent/ck.sao", &m) == SAO_ERROR_IO);
  CHECK(sao_model_eval(nullptr, "x", "test", nullptr) == SAO_ERROR_ARGUMENT);
  CHECK(sao_run_check("unknown-suite", nullptr) == SAO_ERROR_ARGUMENT);
  CHECK(std::strlen(sao_last_error()) > 0);
  sao_model_free(nullptr);  // must be a no-op
  sao_string_free(nullptr);
}

TEST_CASE("frames check suite through the C API") {
  char* text = nullptr;
  REQUIRE(sao_run_check("frames", &text) == SAO_OK);
  REQUIRE(text != nullptr);
  std::string t(text);
  sao_string_free(text);
  CHECK(t.find("ok") != std::string::npos);
  CHECK(t.find("round trip") != std::string::npos);
}
