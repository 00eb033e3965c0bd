#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ptsn/cli/run_config.hpp"
#include "ptsn/io.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/synthetic/planted.hpp"

namespace ptsn {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out, err;
};

/// Runs the ptsn binary with `args` inside `dir`.
Result ptsn(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" PTSN_CLI_PATH "' " + args + " > stdout.txt 2> stderr.txt";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = io::read_text_file((dir / "stdout.txt").string());
  r.err = io::read_text_file((dir / "stderr.txt").string());
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("ptsn_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

const char* kToyConfig = R"(# small toy pipeline
work_dir = run
train_dir = data/train
val_dir = data/val
embeddings = data/embeddings.txt
concepts = data/concepts.txt
min_count = 0
level_sizes = 12,4
schedule = 4-12
d_model = 32
toy_dim = 32
heads = 4
d_ff = 64
decoder_layers = 1
max_len = 12
xe_epochs = 3
xe_batch = 20
rl_epochs = 1
rl_batch = 10
toy_train = 60
toy_val = 20
)";

void run_pipeline(const fs::path& dir) {
  io::write_text_file((dir / "run.cfg").string(), kToyConfig);
  for (const std::string cmd : {"gen-synthetic", "build-vocab", "build-tree", "train-xe", "train-rl", "eval",
                                "generate --input data/val --attention-dump", "inspect-tree"}) {
    const auto r = ptsn(dir, "--config run.cfg " + cmd);
    ASSERT_EQ(r.code, 0) << cmd << ": " << r.err;
    const auto name = cmd.substr(0, cmd.find(' '));
    EXPECT_TRUE(fs::exists(dir / "run" / (name + ".manifest.json"))) << name;
  }
}

TEST(Cli, HelpListsEveryKeyWithDefault) {
  const auto r = ptsn(fresh_dir("help"), "--help");
  ASSERT_EQ(r.code, 0);
  for (const auto& k : cli::key_specs()) {
    const std::string name(k.name), fallback(k.fallback);
    auto at = r.out.find("--" + name + " ");
    if (at == std::string::npos) at = r.out.find("--" + name + ",");
    ASSERT_NE(at, std::string::npos) << name;
    if (!fallback.empty()) {
      EXPECT_NE(r.out.substr(at, r.out.find('\n', at) - at).find("[" + fallback + "]"), std::string::npos) << name;
    }
  }
  for (const char* cmd : {"build-vocab", "build-tree", "train-xe", "train-rl", "eval", "generate", "inspect-tree",
                          "gen-synthetic"})
    EXPECT_NE(r.out.find(cmd), std::string::npos) << cmd;
}

TEST(Cli, UnknownKeysAreConfigErrors) {
  const auto dir = fresh_dir("unknown");
  io::write_text_file((dir / "bad.cfg").string(), "seed = 1\nlearning_rate = 3\n");
  const auto from_file = ptsn(dir, "--config bad.cfg build-vocab");
  EXPECT_EQ(from_file.code, 2);
  EXPECT_NE(from_file.err.find("learning_rate"), std::string::npos) << from_file.err;
  EXPECT_EQ(ptsn(dir, "--learning-rate 3 build-vocab").code, 2);
  EXPECT_EQ(ptsn(dir, "--d-model abc build-vocab").code, 2);
}

TEST(Cli, MissingPrerequisiteNamesProducer) {
  const auto dir = fresh_dir("missing");
  const auto xe = ptsn(dir, "train-xe");
  EXPECT_EQ(xe.code, 3);
  EXPECT_NE(xe.err.find("ptsn build-vocab"), std::string::npos) << xe.err;
  io::write_text_file((dir / "run.cfg").string(), kToyConfig);
  ASSERT_EQ(ptsn(dir, "--config run.cfg gen-synthetic").code, 0);
  ASSERT_EQ(ptsn(dir, "--config run.cfg build-vocab").code, 0);
  const auto no_tree = ptsn(dir, "--config run.cfg train-xe");
  EXPECT_EQ(no_tree.code, 3);
  EXPECT_NE(no_tree.err.find("ptsn build-tree"), std::string::npos) << no_tree.err;
  ASSERT_EQ(ptsn(dir, "--config run.cfg build-tree").code, 0);
  const auto rl2 = ptsn(dir, "--config run.cfg train-rl");
  EXPECT_EQ(rl2.code, 3);
  EXPECT_NE(rl2.err.find("ptsn train-xe"), std::string::npos) << rl2.err;
}

TEST(Cli, ToyPipelineRunsAndRerunsByteIdentically) {
  const auto a = fresh_dir("pipeline_a");
  const auto b = fresh_dir("pipeline_b");
  run_pipeline(a);
  run_pipeline(b);
  for (const char* f : {"vocab.tsv", "tree.json", "tree_concepts.txt", "xe.ckpt", "xe_last.ckpt", "rl.ckpt",
                        "rl_last.ckpt", "eval.jsonl", "generate.jsonl"}) {
    ASSERT_TRUE(fs::exists(a / "run" / f)) << f;
    EXPECT_EQ(io::read_text_file((a / "run" / f).string()), io::read_text_file((b / "run" / f).string())) << f;
  }

  const auto gen = io::read_text_file((a / "run" / "generate.jsonl").string());
  std::istringstream lines(gen);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    ASSERT_TRUE(j.contains("attention"));
    const auto words = lexicon::words(j["caption"].get<std::string>());
    ASSERT_EQ(j["attention"].size(), words.size());
    for (const auto& w : j["attention"]) {
      double mass = 0.0;
      ASSERT_EQ(w["grid"].size(), 4u);
      for (const auto& row : w["grid"])
        for (double v : row) mass += v;
      EXPECT_NEAR(mass, 1.0, 1e-9);
    }
    ++n;
  }
  EXPECT_EQ(n, 20u);

  const auto manifest = nlohmann::json::parse(io::read_text_file((a / "run" / "train-xe.manifest.json").string()));
  EXPECT_EQ(manifest["command"], "train-xe");
  EXPECT_EQ(manifest["seed"], 1);
  EXPECT_TRUE(manifest["inputs"].contains("run/vocab.tsv"));
  EXPECT_EQ(manifest["outputs"]["run/xe.ckpt"].get<std::string>().size(), 40u);
}

TEST(Cli, ResumeContinuesFromLastEpoch) {
  const auto dir = fresh_dir("resume");
  run_pipeline(dir);
  const auto r = ptsn(dir, "--config run.cfg --xe-epochs 4 --resume train-xe");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("xe epoch 4"), std::string::npos) << r.out;
  EXPECT_EQ(r.out.find("xe epoch 1:"), std::string::npos) << r.out;
}

TEST(Cli, BuildTreeEmitsRequestedLevelSizes) {
  const auto dir = fresh_dir("tree");
  synthetic::PlantedTreeSpec spec{.n_super = 20, .n_sub_per_super = 10, .concepts_per_sub = 11, .dim = 16};
  const auto p = synthetic::gen_planted_embeddings(spec);
  std::vector<std::string> tokens;
  std::string concepts;
  for (std::size_t i = 0; i < p.x.rows(); ++i) {
    tokens.push_back("w" + std::to_string(i));
    concepts += tokens.back() + "\n";
  }
  lexicon::write_embeddings((dir / "emb.txt").string(), tokens, p.x, lexicon::EmbeddingFormat::text);
  io::write_text_file((dir / "concepts.txt").string(), concepts);
  const auto r = ptsn(dir, "--embeddings emb.txt --concepts concepts.txt --level-sizes 2000,800 --cluster-n-init 1 build-tree");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto tree = nlohmann::json::parse(io::read_text_file((dir / "run" / "tree.json").string()));
  ASSERT_EQ(tree["levels"].size(), 2u);
  EXPECT_EQ(tree["levels"][0]["size"], 2000);
  EXPECT_EQ(tree["levels"][1]["size"], 800);
  EXPECT_EQ(tree["meta"]["level_sizes"], nlohmann::json::parse("[2000, 800]"));
}

}  // namespace
}  // namespace ptsn
