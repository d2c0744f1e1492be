#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "geocap/error.hpp"
#include "geocap/eval.hpp"

using namespace geocap;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result geocap_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

constexpr const char* kFastModel =
    "[model]\nd = 16\nff_dim = 32\nmax_epochs = 3\n[run]\nseed = 4\n";

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(geocap_run({}).code == cli::kUsage);
  CHECK(geocap_run({"frobnicate"}).code == cli::kUsage);
  CHECK(geocap_run({"train"}).code == cli::kUsage);
  CHECK(geocap_run({"synth", "--samples", "0"}).code == cli::kUsage);
  const auto help = geocap_run({"--help"});
  CHECK(help.code == cli::kOk);
  CHECK(help.out.find("build-contexts") != std::string::npos);
}

TEST_CASE("missing inputs exit with 2") {
  const auto r = geocap_run({"ingest-geo", "--entities", "/nonexistent/entities.tsv", "--out", "/tmp/x.json"});
  CHECK(r.code == cli::kDataError);
  CHECK(r.err.find("/nonexistent/entities.tsv") != std::string::npos);
  CHECK(geocap_run({"--config", "/nonexistent.ini", "synth"}).code == cli::kDataError);
}

TEST_CASE("run configuration files") {
  const auto rc = cli::parse_run_config(
      "[paths]\ndataset = data/dataset.tsv\noutput = /abs/out\n"
      "[model]\npreset = large\nd = 60\nheads = 6\nlr = 0.001\n"
      "[run]\nseed = 17\nvariant = geo_only\njobs = 3\n",
      "/base");
  CHECK(rc.dataset == "/base/data/dataset.tsv");
  CHECK(rc.output_dir == "/abs/out");
  CHECK(rc.model.d == 60);
  CHECK(rc.model.heads == 6);
  CHECK(rc.model.enc_layers == 3);
  CHECK(rc.model.lr == doctest::Approx(0.001));
  CHECK(rc.model.variant == Variant::GeoOnly);
  CHECK(rc.seed == 17);
  CHECK(rc.model.seed == 17);
  CHECK(rc.jobs == 3);

  CHECK(cli::parse_run_config("", "/").model.canonical() == ModelConfig::tiny().canonical());
  CHECK_THROWS_AS(cli::parse_run_config("[paths]\nbogus = x\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[model]\nseed = 3\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[model]\npreset = huge\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[model]\nd = sixty\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[model]\nheads = 3\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[extra]\nk = v\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[run]\nvariant = half\n", "/"), ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("[paths\n", "/"), ConfigError);

  const std::string dir = fresh_dir("geocap_cli_badcfg");
  write_file(dir + "/bad.ini", "[model]\nheads = 3\n");
  CHECK(geocap_run({"--config", dir + "/bad.ini", "synth"}).code == cli::kUsage);
  fs::remove_all(dir);
}

TEST_CASE("the output directory falls back to the environment") {
  const std::string dir = fresh_dir("geocap_cli_env");
  ::setenv(cli::kOutputDirEnv, dir.c_str(), 1);
  CHECK(geocap_run({"synth", "--samples", "5"}).code == cli::kOk);
  ::unsetenv(cli::kOutputDirEnv);
  CHECK(fs::exists(dir + "/synthetic/dataset.tsv"));
  fs::remove_all(dir);
}

TEST_CASE("end-to-end commands, artifacts and reruns") {
  const std::string dir = fresh_dir("geocap_cli_e2e");
  const std::string data = dir + "/data", corpus = dir + "/corpus";
  write_file(dir + "/run.ini", kFastModel);
  const std::string cfg = dir + "/run.ini";

  REQUIRE(geocap_run({"--seed", "4", "synth", "--samples", "40", "--validation", "0.2", "--test", "0.2",
                      "--architect-probability", "0.5", "--out", data})
              .code == cli::kOk);
  CHECK(read_file(data + "/dataset.tsv").rfind("# geocap synthetic corpus config_hash=", 0) == 0);

  const auto geo = geocap_run({"ingest-geo", "--entities", data + "/entities.tsv", "--out", dir + "/geo.json"});
  CHECK(geo.code == cli::kOk);
  CHECK(read_file(dir + "/geo.json").find("\"config_hash\"") != std::string::npos);
  CHECK(geocap_run({"ingest-facts", "--triples", data + "/triples.tsv", "--synonyms", data + "/synonyms.tsv", "--out",
                    dir + "/facts.json"})
            .code == cli::kOk);

  const std::vector<std::string> build{"--config",   cfg,   "build-contexts", "--dataset", data + "/dataset.tsv",
                                       "--entities", data + "/entities.tsv", "--triples", data + "/triples.tsv",
                                       "--synonyms", data + "/synonyms.tsv", "--out",     corpus};
  REQUIRE(geocap_run(build).code == cli::kOk);
  const std::string manifest = read_file(corpus + "/manifest.json");
  const auto rerun = geocap_run(build);
  CHECK(rerun.code == cli::kOk);
  CHECK(rerun.out.find("up to date") != std::string::npos);
  auto forced = build;
  forced.insert(forced.begin(), "--force");
  CHECK(geocap_run(forced).out.find("up to date") == std::string::npos);
  CHECK(read_file(corpus + "/manifest.json") == manifest);
  auto parallel = build;
  parallel.insert(parallel.end(), {"--jobs", "3"});
  parallel.insert(parallel.begin(), "--force");
  CHECK(geocap_run(parallel).code == cli::kOk);

  CHECK(geocap_run({"train-ranker", "--corpus", corpus, "--out", dir + "/ranker.json"}).code == cli::kOk);
  CHECK(read_file(dir + "/ranker.json").find("\"weights\"") != std::string::npos);

  const auto trained = geocap_run({"--config", cfg, "train", "--corpus", corpus, "--variant", "no_knowledge", "--out",
                                   dir + "/nk.gckp"});
  REQUIRE(trained.code == cli::kOk);
  CHECK(checkpoint_extra(dir + "/nk.gckp").find("\"log\"") != std::string::npos);
  const std::string ckpt_bytes = read_file(dir + "/nk.gckp");
  CHECK(geocap_run({"--config", cfg, "--force", "train", "--corpus", corpus, "--variant", "no_knowledge", "--out",
                    dir + "/nk.gckp"})
            .code == cli::kOk);
  CHECK(read_file(dir + "/nk.gckp") == ckpt_bytes);

  CHECK(geocap_run({"generate", "--ckpt", dir + "/nk.gckp", "--dataset", corpus, "--variant", "full", "--out",
                    dir + "/x.jsonl"})
            .code == cli::kUsage);
  REQUIRE(geocap_run({"generate", "--ckpt", dir + "/nk.gckp", "--dataset", corpus, "--split", "test", "--out",
                      dir + "/nk.jsonl"})
              .code == cli::kOk);
  const auto caps = parse_captions(read_file(dir + "/nk.jsonl"));
  CHECK(caps.size() == 8);
  for (const auto& r : caps)
    for (auto k : r.caption.kinds) CHECK(k != TokenKind::Fact);
  CHECK(geocap_run({"generate", "--ckpt", dir + "/nk.gckp", "--dataset", corpus, "--split", "sideways"}).code ==
        cli::kUsage);

  REQUIRE(geocap_run({"--config", cfg, "train", "--corpus", corpus, "--out", dir + "/full.gckp"}).code == cli::kOk);
  REQUIRE(geocap_run({"generate", "--ckpt", dir + "/full.gckp", "--dataset", corpus, "--split", "test", "--out",
                      dir + "/full.jsonl"})
              .code == cli::kOk);
  REQUIRE(geocap_run({"--seed", "9", "perturb", "--captions", dir + "/full.jsonl", "--corpus", corpus, "--out",
                      dir + "/random.jsonl"})
              .code == cli::kOk);

  const auto eval = geocap_run({"evaluate", "--captions", dir + "/full.jsonl", "--corpus", corpus, "--lexicon",
                                data + "/lexicon.tsv", "--report", dir + "/report.json", "--compare",
                                dir + "/random.jsonl"});
  REQUIRE(eval.code == cli::kOk);
  CHECK(eval.out.find("CIDEr") != std::string::npos);
  const MetricReport report = report_from_json(read_file(dir + "/report.json"));
  CHECK(report.samples == 8);
  CHECK(report.cider_t_test.has_value());
  CHECK(read_file(dir + "/report.json").find("\"config_hash\"") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("demo output is byte-identical across runs") {
  const std::string a = fresh_dir("geocap_cli_demo_a"), b = fresh_dir("geocap_cli_demo_b");
  REQUIRE(geocap_run({"--seed", "2", "demo", "--out", a}).code == cli::kOk);
  REQUIRE(geocap_run({"--seed", "2", "demo", "--out", b}).code == cli::kOk);
  for (const char* f : {"report.json", "captions.jsonl", "model.gckp", "corpus/contexts.jsonl", "data/entities.tsv"})
    CHECK(read_file(a + "/" + f) == read_file(b + "/" + f));
  CHECK(geocap_run({"--seed", "2", "demo", "--out", a}).out.find("up to date") != std::string::npos);
  fs::remove_all(a);
  fs::remove_all(b);
}
