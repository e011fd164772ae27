#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "simdiffrec/cli.hpp"
#include "support/fixtures.hpp"

using namespace simdiffrec;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "simdiffrec");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Bundle and config for a small end-to-end run.
struct Workspace {
  fs::path dir, bundle, config;
};

Workspace workspace(const std::string& name, int k_sample = 2) {
  Workspace w;
  w.dir = fixtures::scratch("cli_" + name);
  w.bundle = w.dir / "toy.bundle.json";
  data::save_bundle(w.bundle, fixtures::random_dataset(30, 20, 5, 10, 9));
  auto c = fixtures::tiny_config();
  c.epochs = 2;
  c.k_sample = k_sample;
  c.bundle = w.bundle.string();
  w.config = w.dir / "config.json";
  std::ofstream(w.config) << config_to_json(c).dump(2);
  return w;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("argument errors exit with the config code", "[cli]") {
  CHECK(run({}).code == cli::kExitConfig);
  CHECK(run({"nonsense"}).code == cli::kExitConfig);
  CHECK(run({"train", "--no-such-flag"}).code == cli::kExitConfig);
  CHECK(run({"--help"}).code == cli::kExitOk);
  CHECK(run({"evaluate", "--bundle", "x"}).code == cli::kExitConfig);
}

TEST_CASE("config errors", "[cli]") {
  const auto w = workspace("config");
  CHECK(run({"train", "--config", w.config.string(), "--out", (w.dir / "r").string(), "--set", "train.bogus=1"}).code ==
        cli::kExitConfig);
  CHECK(run({"train", "--config", (w.dir / "missing.json").string(), "--out", (w.dir / "r").string()}).code ==
        cli::kExitConfig);
  CHECK(run({"train", "--config", w.config.string()}).code == cli::kExitConfig);  // no --out
  CHECK(run({"train", "--config", w.config.string(), "--out", (w.dir / "r").string(), "--ablation", "w/o"}).code ==
        cli::kExitConfig);
  CHECK(run({"train", "--config", w.config.string(), "--out", (w.dir / "r").string(), "--tau", "0"}).code ==
        cli::kExitConfig);
  CHECK(run({"train", "--config", w.config.string(), "--out", (w.dir / "r").string(), "--bundle",
             (w.dir / "absent.json").string()})
            .code == cli::kExitData);
}

TEST_CASE("preprocess is byte stable and validates input", "[cli]") {
  const auto dir = fixtures::scratch("cli_pre");
  fixtures::write_beauty_like_tsv(dir / "log.tsv", 3000, 4);
  const auto a = run({"preprocess", "--input", (dir / "log.tsv").string(), "--output", (dir / "a.json").string()});
  REQUIRE(a.code == 0);
  const auto b = run({"preprocess", "--input", (dir / "log.tsv").string(), "--output", (dir / "b.json").string(),
                      "--stats", (dir / "stats_b.json").string()});
  REQUIRE(b.code == 0);
  CHECK(fixtures::read_file(dir / "a.json") == fixtures::read_file(dir / "b.json"));
  CHECK(fixtures::read_file(dir / "a.json.stats.json") == fixtures::read_file(dir / "stats_b.json"));
  const auto stats = nlohmann::json::parse(a.out);
  CHECK(stats.at("n_users").get<int>() > 0);

  CHECK(run({"preprocess", "--input", (dir / "nope.tsv").string(), "--output", (dir / "c.json").string()}).code ==
        cli::kExitData);
  CHECK(run({"preprocess", "--input", (dir / "log.tsv").string(), "--output", (dir / "c.json").string(),
             "--min-count", "0"})
            .code == cli::kExitConfig);
  std::ofstream(dir / "bad.tsv") << "user_id\titem_id\ttimestamp\nA\tB\tnot-a-time\n";
  CHECK(run({"preprocess", "--input", (dir / "bad.tsv").string(), "--output", (dir / "c.json").string()}).code ==
        cli::kExitData);
}

TEST_CASE("train runs are reproducible, also from the emitted config", "[cli]") {
  const auto w = workspace("train");
  const auto r1 = w.dir / "run1", r2 = w.dir / "run2", r3 = w.dir / "run3";
  REQUIRE(run({"train", "--config", w.config.string(), "--out", r1.string()}).code == 0);
  REQUIRE(run({"train", "--config", w.config.string(), "--out", r2.string()}).code == 0);
  for (const char* f : {"config.json", "losses.csv", "metrics.json", "checkpoints/best", "run.json"})
    CHECK(fs::exists(r1 / f));
  CHECK(fixtures::read_file(r1 / "losses.csv") == fixtures::read_file(r2 / "losses.csv"));
  CHECK(fixtures::read_file(r1 / "metrics.json") == fixtures::read_file(r2 / "metrics.json"));
  // checkpoints embed their output dir, so compare the weights
  const auto p1 = load_checkpoint(r1 / "checkpoints/best").model.parameters();
  const auto p2 = load_checkpoint(r2 / "checkpoints/best").model.parameters();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second.value() == p2[i].second.value());

  REQUIRE(run({"train", "--config", (r1 / "config.json").string(), "--out", r3.string()}).code == 0);
  CHECK(fixtures::read_file(r1 / "losses.csv") == fixtures::read_file(r3 / "losses.csv"));

  const auto csv = lines(fixtures::read_file(r1 / "losses.csv"));
  REQUIRE(csv.size() == 3);
  CHECK(csv[0] == "epoch,L_sr,L_cl,L_d,L_total,val_hr@5,val_ndcg@5,val_hr@10,val_ndcg@10");

  // flags override the file
  const auto r4 = w.dir / "run4";
  REQUIRE(run({"train", "--config", w.config.string(), "--out", r4.string(), "--alpha", "0.7", "--seed", "3",
               "--set", "train.epochs=1"})
              .code == 0);
  const auto cfg = load_config(r4 / "config.json");
  CHECK(cfg.alpha == 0.7);
  CHECK(cfg.seed == 3);
  CHECK(cfg.epochs == 1);
}

TEST_CASE("numeric failures exit with the numeric code", "[cli]") {
  const auto w = workspace("numeric");
  const auto r = run({"train", "--config", w.config.string(), "--out", (w.dir / "r").string(), "--set",
                      "model.init_std=1e200"});
  CHECK(r.code == cli::kExitNumeric);
  CHECK(r.err.find("numeric error") != std::string::npos);
}

TEST_CASE("evaluate, preview, embeddings and schedule", "[cli]") {
  const auto w = workspace("eval", 1);
  const auto r = w.dir / "run";
  REQUIRE(run({"train", "--config", w.config.string(), "--out", r.string()}).code == 0);
  const auto ckpt = (r / "checkpoints" / "best").string();

  const auto ev = run({"evaluate", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--ks", "5,10,20", "--out",
                       (w.dir / "m.json").string()});
  REQUIRE(ev.code == 0);
  const auto metrics = nlohmann::json::parse(fixtures::read_file(w.dir / "m.json"));
  CHECK(metrics.at("ks") == nlohmann::json({5, 10, 20}));
  const auto stored = nlohmann::json::parse(fixtures::read_file(r / "metrics.json"));
  CHECK(metrics.at("hr").at("10") == stored.at("hr").at("10"));
  const auto valid = run({"evaluate", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--split", "valid"});
  CHECK(nlohmann::json::parse(valid.out).at("ndcg").at("10") == stored.at("valid").at("ndcg").at("10"));
  CHECK(run({"evaluate", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--ks", "5,x"}).code == cli::kExitConfig);
  CHECK(run({"evaluate", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--split", "train"}).code ==
        cli::kExitConfig);
  const auto other = w.dir / "other.json";
  data::save_bundle(other, fixtures::random_dataset(30, 21, 5, 10, 9));
  CHECK(run({"evaluate", "--checkpoint", ckpt, "--bundle", other.string()}).code == cli::kExitData);
  CHECK(run({"evaluate", "--checkpoint", (w.dir / "m.json").string(), "--bundle", w.bundle.string()}).code ==
        cli::kExitData);

  const auto p0 = w.dir / "p0.jsonl";
  REQUIRE(run({"augment-preview", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--n", "0", "--out",
               p0.string()})
              .code == 0);
  const auto empty = lines(fixtures::read_file(p0));
  REQUIRE(empty.size() == 1);
  CHECK(empty[0][0] == '#');

  const auto p1 = w.dir / "p1.jsonl", p2 = w.dir / "p2.jsonl";
  REQUIRE(run({"augment-preview", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--n", "12", "--out",
               p1.string()})
              .code == 0);
  REQUIRE(run({"augment-preview", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--n", "12", "--out",
               p2.string()})
              .code == 0);
  CHECK(fixtures::read_file(p1) == fixtures::read_file(p2));
  const auto rows = lines(fixtures::read_file(p1));
  REQUIRE(rows.size() == 13);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto j = nlohmann::json::parse(rows[i]);
    CHECK(j.at("positive") == j.at("hard_negative"));
    const auto original = j.at("original").get<std::vector<int>>();
    const auto positive = j.at("positive").get<std::vector<int>>();
    REQUIRE(original.size() == positive.size());
    std::vector<int> positions = j.at("positions").get<std::vector<int>>();
    CHECK(!positions.empty());
    for (std::size_t t = 0; t < original.size(); ++t)
      if (std::find(positions.begin(), positions.end(), static_cast<int>(t)) == positions.end())
        CHECK(original[t] == positive[t]);
  }

  const auto e1 = w.dir / "e1.csv", e2 = w.dir / "e2.csv";
  REQUIRE(run({"export-embeddings", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--out", e1.string(),
               "--views", "original,positive,hard_negative"})
              .code == 0);
  REQUIRE(run({"export-embeddings", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--out", e2.string(),
               "--views", "original,positive,hard_negative"})
              .code == 0);
  CHECK(fixtures::read_file(e1) == fixtures::read_file(e2));
  const auto n_users = data::load_bundle(w.bundle).n_users();
  CHECK(lines(fixtures::read_file(e1)).size() == static_cast<std::size_t>(3 * n_users + 1));
  CHECK(run({"export-embeddings", "--checkpoint", ckpt, "--bundle", w.bundle.string(), "--out", e2.string(),
             "--views", "sideways"})
            .code == cli::kExitConfig);

  const auto sched = run({"export-schedule", "--set", "diffusion.steps=100"});
  REQUIRE(sched.code == 0);
  const auto sj = nlohmann::json::parse(sched.out);
  CHECK(sj.at("alpha").size() == 100);
  REQUIRE(run({"export-schedule", "--out", w.dir.string()}).code == 0);
  CHECK(nlohmann::json::parse(fixtures::read_file(w.dir / "schedule.json")).at("steps") == 1000);
}

TEST_CASE("ablate and sweep write their tables", "[cli]") {
  const auto w = workspace("grid");
  const auto a = w.dir / "ablate";
  REQUIRE(run({"ablate", "--config", w.config.string(), "--out", a.string(), "--modes", "none,no_k_sample", "--seeds",
               "1,2", "--set", "train.epochs=1"})
              .code == 0);
  CHECK(lines(fixtures::read_file(a / "ablation.csv")).size() == 5);
  CHECK(fs::exists(a / "no_k_sample" / "seed2" / "metrics.json"));
  const auto summary = nlohmann::json::parse(fixtures::read_file(a / "ablation_summary.json"));
  CHECK(summary.at("none").at("n_runs") == 2);
  CHECK(run({"ablate", "--config", w.config.string(), "--out", a.string(), "--modes", "none,bogus"}).code ==
        cli::kExitConfig);

  const auto s = w.dir / "sweep";
  REQUIRE(run({"sweep", "--config", w.config.string(), "--out", s.string(), "--grid", "alpha=0.1,0.5;beta=0.1",
               "--set", "train.epochs=1"})
              .code == 0);
  const auto csv = lines(fixtures::read_file(s / "sweep.csv"));
  REQUIRE(csv.size() == 3);
  CHECK(csv[0].rfind("alpha,beta,mode,seed,", 0) == 0);
  CHECK(run({"sweep", "--config", w.config.string(), "--out", s.string(), "--grid", "lr=1"}).code == cli::kExitConfig);
}

TEST_CASE("installed binary reports exit codes", "[cli]") {
  const std::string bin = SIMDIFFREC_CLI_PATH;
  const auto status = [&](const std::string& args) {
    const int raw = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status("--help") == 0);
  CHECK(status("") == cli::kExitConfig);
  CHECK(status("export-schedule --set train.nope=1") == cli::kExitConfig);
  CHECK(status("evaluate --checkpoint /nonexistent --bundle /nonexistent") == cli::kExitData);
  CHECK(status("export-schedule --set diffusion.steps=100") == 0);
}
