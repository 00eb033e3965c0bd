#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

constexpr const char* kCommands[][2] = {
    {"build-vocab", "count caption words in train_dir and write vocab.tsv"},
    {"build-tree", "cluster concept embeddings into tree.json"},
    {"train-xe", "cross-entropy training; writes xe.ckpt and xe_log.jsonl"},
    {"train-rl", "self-critical training from xe.ckpt; writes rl.ckpt and rl_log.jsonl"},
    {"eval", "caption eval_dir and report CIDEr-D and BLEU to eval.jsonl"},
    {"generate", "caption the grid features in `input`"},
    {"inspect-tree", "list the concepts under each prototype of a tree level"},
    {"gen-synthetic", "write the toy dataset, its embeddings and concept list"},
};

bool is_bool_key(const std::string& k) {
  return k == "checked" || k == "resume" || k == "attention_dump" || k == "weighted_levels";
}

}  // namespace

int main(int argc, char** argv) {
  using namespace ptsn;
  CLI::App app{"Progressive tree-structured prototype captioning"};
  app.require_subcommand(1, 1);
  app.get_formatter()->column_width(30);
  std::string config_file;
  app.add_option("--config", config_file, "key = value file applied before command-line overrides")
      ->check(CLI::ExistingFile);

  std::map<std::string, std::string> given;
  std::map<std::string, CLI::Option*> opts;
  for (const auto& spec : cli::key_specs()) {
    std::string names = std::string("--") + spec.name;
    std::string dashed = spec.name;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    if (dashed != spec.name) names += ",--" + dashed;
    auto* o = app.add_option(names, given[spec.name], spec.help)->group("Config keys");
    // A valueless boolean option would otherwise take its default string as the value.
    if (is_bool_key(spec.name))
      o->expected(0, 1)->option_text("[BOOL] [" + std::string(spec.fallback) + "]");
    else
      o->default_str(spec.fallback);
    opts[spec.name] = o;
  }
  for (const auto& [name, help] : kCommands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    cli::RunConfig cfg;
    if (!config_file.empty()) cfg.merge(config::KeyValues::parse(io::read_text_file(config_file), config_file));
    for (const auto& [name, o] : opts)
      if (o->count() > 0) cfg.set(name, given[name].empty() && is_bool_key(name) ? "true" : given[name]);
    return cli::Commands(cfg).run(app.get_subcommands().front()->get_name());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
