#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "imim/cli.hpp"
#include "imim/training.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using imim::cli::kExitOk;
using imim::cli::kExitRuntime;
using imim::cli::kExitUsage;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = imim::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Restores IMIM_SEED on scope exit.
class SeedEnv {
 public:
  explicit SeedEnv(const char* value) {
    if (const char* old = std::getenv("IMIM_SEED")) saved_ = old;
    if (value) {
      ::setenv("IMIM_SEED", value, 1);
    } else {
      ::unsetenv("IMIM_SEED");
    }
  }
  ~SeedEnv() {
    if (saved_.empty()) {
      ::unsetenv("IMIM_SEED");
    } else {
      ::setenv("IMIM_SEED", saved_.c_str(), 1);
    }
  }

 private:
  std::string saved_;
};

// Small enough that every verb finishes in well under a second.
nlohmann::json small_config_json() {
  return {{"embed_dim", 8}, {"encoder_depth", 1}, {"n_heads", 2},  {"patch_size", 4},
          {"image_h", 8},   {"image_w", 8},       {"modality", "rgb"}, {"batch_size", 2},
          {"steps", 4},     {"n_train", 6},       {"n_eval", 3},   {"checkpoint_every", 2}};
}

std::string write_config(const testutil::TempDir& dir, const nlohmann::json& j) {
  const auto path = dir.str("c.json");
  std::ofstream(path) << j.dump(2);
  return path;
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = testutil::read_file(e.path().string());
  return files;
}

}  // namespace

TEST_CASE("help output matches the stored snapshots") {
  const std::vector<std::string> verbs{"",     "synth",     "pretrain",   "export-encoder",
                                       "eval", "sweep",     "gradcheck",  "reconstruct"};
  const bool update = std::getenv("IMIM_UPDATE_SNAPSHOTS") != nullptr;
  for (const auto& verb : verbs) {
    std::vector<std::string> args;
    if (!verb.empty()) args.push_back(verb);
    args.push_back("--help");
    const auto r = run(args);
    CHECK(r.code == kExitOk);
    const fs::path snap = fs::path(IMIM_SNAPSHOT_DIR) / ((verb.empty() ? "imim" : verb) + ".txt");
    if (update) std::ofstream(snap, std::ios::binary) << r.out;
    INFO("snapshot " << snap.string());
    REQUIRE(fs::exists(snap));
    CHECK(r.out == testutil::read_file(snap.string()));
  }
}

TEST_CASE("config-taking verbs list every field with its default") {
  const imim::RunConfig defaults;
  for (const std::string verb : {"pretrain", "eval", "sweep"}) {
    const auto r = run({verb, "--help"});
    for (const auto& key : imim::run_config_keys()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      INFO(verb << " " << flag);
      const auto pos = r.out.find(flag + " ");
      REQUIRE(pos != std::string::npos);
      if (key != "manifest") CHECK(r.out.find('[', pos) < r.out.find('\n', pos));
    }
  }
}

TEST_CASE("usage errors exit 1, runtime failures exit 2") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"pretrain", "--no-such-flag"}).code == kExitUsage);
  CHECK(run({"pretrain", "--steps", "many"}).code == kExitUsage);
  CHECK(run({"sweep", "--axis", "depth", "--steps", "0"}).code == kExitUsage);
  const auto bad = run({"frobnicate"});
  CHECK_FALSE(bad.err.empty());

  testutil::TempDir dir("cli_codes");
  CHECK(run({"pretrain", "--config", dir.str("missing.json")}).code == kExitUsage);
  const auto missing = run({"eval", "--checkpoint", dir.str("nope.imim"), "--run-dir", dir.str("r")});
  CHECK(missing.code == kExitRuntime);
  CHECK(missing.err.find("nope.imim") != std::string::npos);
  CHECK(run({"reconstruct", "--checkpoint", dir.str("nope.imim"), "--input", dir.str("nope.png"), "--run-dir",
             dir.str("r")})
            .code == kExitRuntime);
}

TEST_CASE("seed precedence: flag over environment over config file") {
  testutil::TempDir dir("cli_prec");
  auto j = small_config_json();
  j["seed"] = 5;
  j["steps"] = 0;
  const auto cfg = write_config(dir, j);
  auto resolved_seed = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"pretrain", "--config", cfg, "--run-dir", dir.str("run")};
    args.insert(args.end(), extra.begin(), extra.end());
    REQUIRE(run(args).code == kExitOk);
    return imim::RunConfig::load(dir.str("run/config.json")).seed;
  };
  {
    SeedEnv env(nullptr);
    CHECK(resolved_seed({}) == 5);
    CHECK(resolved_seed({"--seed", "9"}) == 9);
  }
  {
    SeedEnv env("7");
    CHECK(resolved_seed({}) == 7);
    CHECK(resolved_seed({"--seed", "9"}) == 9);
  }
  {
    SeedEnv env("seven");
    CHECK(run({"pretrain", "--config", cfg, "--run-dir", dir.str("run")}).code == kExitUsage);
  }
  // Non-seed fields follow the same flag > file > default order.
  SeedEnv env(nullptr);
  REQUIRE(run({"pretrain", "--config", cfg, "--run-dir", dir.str("run"), "--lr", "0.25"}).code == kExitOk);
  const auto c = imim::RunConfig::load(dir.str("run/config.json"));
  CHECK(c.optim.lr == 0.25);
  CHECK(c.model.embed_dim == 8);
  CHECK(c.mask_ratio == 0.75);
}

TEST_CASE("pretrain with zero steps writes the initial checkpoint") {
  SeedEnv env(nullptr);
  testutil::TempDir dir("cli_zero");
  auto j = small_config_json();
  j["steps"] = 0;
  const auto cfg = write_config(dir, j);
  const auto r = run({"pretrain", "--steps", "0", "--config", cfg, "--run-dir", dir.str("run")});
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(dir.path() / "run" / "checkpoints" / "step_000000.imim"));
  for (const auto* sub : {"checkpoints", "reports", "visuals"}) CHECK(fs::is_directory(dir.path() / "run" / sub));
  CHECK(fs::exists(dir.path() / "run" / "config.json"));
  CHECK(testutil::read_file(dir.str("run/metrics.csv")) == "step,loss,lr,seconds\n");
}

TEST_CASE("default run directory is named by config hash and time") {
  SeedEnv env(nullptr);
  testutil::TempDir dir("cli_default");
  auto j = small_config_json();
  j["steps"] = 0;
  const auto cfg = write_config(dir, j);
  const auto cwd = fs::current_path();
  fs::current_path(dir.path());
  const auto r = run({"pretrain", "--config", cfg});
  fs::current_path(cwd);
  REQUIRE(r.code == kExitOk);
  const auto hash = imim::RunConfig::load(cfg).hash();
  std::size_t found = 0;
  for (const auto& e : fs::directory_iterator(dir.path() / "runs")) {
    CHECK(e.path().filename().string().rfind(hash + "-", 0) == 0);
    ++found;
  }
  CHECK(found == 1);
}

TEST_CASE("gradcheck passes on the tiny config") {
  const auto r = run({"gradcheck"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(r.out.find("cross_attn") != std::string::npos);
  // An impossible tolerance turns the same check into a runtime failure.
  CHECK(run({"gradcheck", "--tolerance", "1e-30"}).code == kExitRuntime);
}

TEST_CASE("full pipeline: synth, pretrain, export, eval, reconstruct") {
  SeedEnv env(nullptr);
  testutil::TempDir dir("cli_pipeline");
  const auto cfg = write_config(dir, small_config_json());

  REQUIRE(run({"synth", "--config", cfg, "--out", dir.str("data")}).code == kExitOk);
  CHECK(fs::exists(dir.path() / "data" / "manifest.json"));
  const auto manifest = imim::DatasetManifest::load(dir.str("data/manifest.json"));
  CHECK(manifest.samples.size() == 9);

  const auto run_dir = dir.str("run");
  REQUIRE(run({"pretrain", "--config", cfg, "--manifest", dir.str("data/manifest.json"), "--run-dir", run_dir}).code ==
          kExitOk);
  const auto csv = testutil::read_file(run_dir + "/metrics.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  const auto ckpt = run_dir + "/checkpoints/step_000004.imim";
  REQUIRE(fs::exists(ckpt));

  REQUIRE(run({"export-encoder", "--checkpoint", ckpt, "--out", dir.str("enc.imim")}).code == kExitOk);
  CHECK(imim::MimModel::load(dir.str("enc.imim")).encoder_only());

  const auto ev = run({"eval", "--checkpoint", ckpt, "--run-dir", run_dir, "--visuals", "2"});
  REQUIRE(ev.code == kExitOk);
  const auto report = testutil::read_file(run_dir + "/reports/eval.csv");
  CHECK(report.rfind("variant,mse,psnr_db,probe_acc,seed\n", 0) == 0);
  CHECK(fs::exists(run_dir + "/reports/eval.json"));
  CHECK(fs::exists(run_dir + "/visuals/eval_000.png"));
  CHECK(fs::exists(run_dir + "/visuals/eval_001.png"));

  const auto image = (dir.path() / "data" / manifest.samples.front().source).string();
  const auto rec = run({"reconstruct", "--checkpoint", ckpt, "--input", image, "--out", dir.str("rec.png"),
                        "--run-dir", run_dir});
  CHECK(rec.code == kExitOk);
  CHECK(fs::exists(dir.path() / "rec.png"));
}

TEST_CASE("resume continues a run to the same bytes") {
  SeedEnv env(nullptr);
  testutil::TempDir dir("cli_resume");
  const auto cfg = write_config(dir, small_config_json());
  REQUIRE(run({"pretrain", "--config", cfg, "--run-dir", dir.str("a")}).code == kExitOk);
  REQUIRE(run({"pretrain", "--config", cfg, "--steps", "2", "--run-dir", dir.str("b")}).code == kExitOk);
  REQUIRE(run({"pretrain", "--config", cfg, "--run-dir", dir.str("b"), "--resume",
               dir.str("b/checkpoints/step_000002.imim")})
              .code == kExitOk);
  CHECK(testutil::read_file(dir.str("a/metrics.csv")) == testutil::read_file(dir.str("b/metrics.csv")));
  CHECK(testutil::read_file(dir.str("a/checkpoints/step_000004.imim")) ==
        testutil::read_file(dir.str("b/checkpoints/step_000004.imim")));
}

TEST_CASE("mask-size sweep writes rows for 16, 32 and 64") {
  SeedEnv env(nullptr);
  testutil::TempDir dir("cli_sweep");
  auto j = small_config_json();
  j["image_h"] = 128;
  j["image_w"] = 128;
  j["steps"] = 2;
  const auto cfg = write_config(dir, j);
  const auto r = run({"sweep", "--axis", "mask_size", "--config", cfg, "--run-dir", dir.str("s"), "--no-probe"});
  REQUIRE(r.code == kExitOk);
  const auto csv = testutil::read_file(dir.str("s/reports/sweep_mask_size.csv"));
  CHECK(csv.find("\nmask_size=16,") != std::string::npos);
  CHECK(csv.find("\nmask_size=32,") != std::string::npos);
  CHECK(csv.find("\nmask_size=64,") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("reruns into a fixed run directory rewrite identical bytes") {
  SeedEnv env(nullptr);
  testutil::TempDir dir("cli_idem");
  const auto cfg = write_config(dir, small_config_json());
  const auto run_dir = dir.str("run");
  auto everything = [&] {
    REQUIRE(run({"pretrain", "--config", cfg, "--run-dir", run_dir}).code == kExitOk);
    REQUIRE(run({"eval", "--checkpoint", run_dir + "/checkpoints/step_000004.imim", "--run-dir", run_dir,
                 "--visuals", "1"})
                .code == kExitOk);
    REQUIRE(run({"sweep", "--axis", "query_mode", "--config", cfg, "--run-dir", run_dir, "--steps", "2"}).code ==
            kExitOk);
    return snapshot_tree(run_dir);
  };
  const auto first = everything();
  const auto second = everything();
  CHECK(first.size() > 10);
  CHECK(first == second);
}
