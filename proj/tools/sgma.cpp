// sgma command-line tool: synth, train, eval, gradcheck, export.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sgma/config.hpp"
#include "sgma/evaluate.hpp"
#include "sgma/gradcheck_suite.hpp"
#include "sgma/serialize.hpp"

namespace fs = std::filesystem;
using namespace sgma;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckFailed = 3;

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by every command; unset values fall back to the config file.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::string checkpoint;
  std::vector<std::string> ablations;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config");
  cmd->add_option("--seed", c.seed, "seed for data, training and evaluation");
}

RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) rc = load_run_config(c.config);
  if (c.seed) rc.synth.seed = rc.train.seed = *c.seed;
  if (!c.dataset.empty()) rc.paths.dataset = c.dataset;
  if (!c.checkpoint.empty()) rc.paths.checkpoint = c.checkpoint;
  if (!c.out.empty()) rc.paths.out = c.out;
  rc.ablations.insert(rc.ablations.end(), c.ablations.begin(), c.ablations.end());
  return rc;
}

// The copy lives inside the output directory, so its own location is left out;
// two runs that differ only in --out then write identical files.
void persist(const fs::path& dir, RunConfig rc) {
  rc.paths.out.clear();
  save_run_config(dir / "run_config.json", rc);
}

const std::string& require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required (flag or paths section of the config)");
  return value;
}

int cmd_synth(RunConfig rc) {
  rc.validate();
  const fs::path out = require_path(rc.paths.out, "--out");
  const ZslDataset ds = generate(rc.synth);
  save_dataset(ds, out);
  persist(out, rc);
  std::cout << "dataset " << out.string() << ": " << rc.synth.num_classes << " classes (" << ds.num_seen() << " seen, "
            << ds.num_unseen() << " unseen), " << rc.synth.image_size << " px, semantic dim "
            << ds.semantics_seen.dim(1) << "\n";
  for (const char* name : {"train", "val", "test_seen", "test_unseen"})
    std::cout << "  " << name << ": " << ds.split(name).size() << " samples\n";
  return 0;
}

void require_matching_images(const ModelConfig& m, const ZslDataset& ds) {
  if (m.image_size != ds.config.image_size) {
    throw ConfigError("model.image_size " + std::to_string(m.image_size) + " does not match the dataset's " +
                      std::to_string(ds.config.image_size) + " px images");
  }
}

int cmd_train(RunConfig rc) {
  rc.validate();
  const fs::path out = require_path(rc.paths.out, "--out");
  const ZslDataset ds = load_dataset(require_path(rc.paths.dataset, "--dataset"));
  const ModelConfig mc = effective_model(rc);
  require_matching_images(mc, ds);
  fs::create_directories(out);
  persist(out, rc);
  TrainOutputs outputs{out, out / "log.jsonl", &std::cerr};
  const TrainResult r = train(ds, mc, rc.train, outputs);
  std::cout << "checkpoint " << out.string() << " after " << r.log.size() << " epochs";
  if (!r.log.empty()) std::cout << ", val MCA " << r.log.back().val_mca << "%";
  std::cout << "\n";
  return 0;
}

struct EvalFlags {
  std::string mode = "zsl";
  std::vector<double> betas;
  bool sweep = false;
  std::optional<double> ridge_lambda;
  std::string features;       // evaluate a stored feature bundle instead of a checkpoint
  std::string save_features;
};

int cmd_eval(RunConfig rc, const EvalFlags& f) {
  if (f.sweep) rc.betas = {0.0, 0.5, 1.0, 2.0};
  else if (!f.betas.empty()) rc.betas = f.betas;
  if (f.ridge_lambda) rc.inference.ridge_lambda = *f.ridge_lambda;
  rc.validate();
  std::optional<ZslDataset> ds;
  if (!rc.paths.dataset.empty()) ds = load_dataset(rc.paths.dataset);
  FeatureBundle bundle;
  if (!f.features.empty()) {
    bundle = load_features(f.features);
  } else {
    if (!ds) throw ConfigError("--dataset is required unless --features is given");
    const SgmaModel m = load_model(require_path(rc.paths.checkpoint, "--checkpoint"));
    bundle = extract_bundle(m, *ds, rc.train.batch_size, rc.train.seed);
  }
  if (!f.save_features.empty()) save_features(bundle, f.save_features);
  if (f.mode == "detect" && !ds) throw ConfigError("detect mode needs --dataset for the ground-truth boxes");
  const auto reports = evaluate(bundle, ds ? &*ds : nullptr, f.mode, rc.inference, rc.betas, rc.train.seed);
  auto j = nlohmann::json::array();
  for (const auto& r : reports) {
    std::cout << format_table(r) << "\n";
    j.push_back(to_json(r));
  }
  if (!rc.paths.out.empty()) {
    const fs::path out = rc.paths.out;
    fs::create_directories(out);
    write_file_atomic(out / ("report_" + f.mode + ".json"), j.dump(2) + "\n");
    persist(out, rc);
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& rc, bool inject) {
  rc.validate();
  const auto entries = run_gradcheck_suite({.inject_diversity_sign_error = inject});
  const std::string table = format_gradcheck_table(entries);
  std::cout << table;
  if (!rc.paths.out.empty()) {
    fs::create_directories(rc.paths.out);
    write_file_atomic(fs::path(rc.paths.out) / "gradcheck.txt", table);
  }
  if (!all_passed(entries)) throw CheckFailed("gradient check failed");
  std::cout << "all " << entries.size() << " checks passed\n";
  return 0;
}

int cmd_export(RunConfig rc, std::size_t n, const std::string& split) {
  rc.validate();
  const fs::path out = require_path(rc.paths.out, "--out");
  const ZslDataset ds = load_dataset(require_path(rc.paths.dataset, "--dataset"));
  const SgmaModel m = load_model(require_path(rc.paths.checkpoint, "--checkpoint"));
  const auto boxes = export_samples(m, ds, split, n, out, rc.train.batch_size, rc.train.seed);
  persist(out, rc);
  std::cout << "exported " << boxes.size() << " samples of " << split << " to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-guided multi-attention zero-shot learning on synthetic data"};
  app.require_subcommand(1);

  Common synth_c, train_c, eval_c, grad_c, export_c;
  std::optional<int> num_classes, num_unseen, samples_per_class, image_size;
  auto* synth = app.add_subcommand("synth", "generate a synthetic part-annotated dataset");
  add_common(synth, synth_c);
  synth->add_option("--out", synth_c.out, "dataset directory");
  synth->add_option("--num-classes", num_classes);
  synth->add_option("--num-unseen", num_unseen);
  synth->add_option("--samples-per-class", samples_per_class);
  synth->add_option("--image-size", image_size);

  std::optional<int> epochs;
  auto* train_cmd = app.add_subcommand("train", "run the staged training");
  add_common(train_cmd, train_c);
  train_cmd->add_option("--dataset", train_c.dataset);
  train_cmd->add_option("--out", train_c.out, "checkpoint directory");
  train_cmd->add_option("--ablation", train_c.ablations,
                        "no-ma-loss, no-parts, random-parts, loss=softmax, loss=cct, loss=combined, shared-backbone");
  train_cmd->add_option("--epochs", epochs, "Stage C epochs");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (zsl, gzsl or detect)");
  add_common(eval, eval_c);
  eval->add_option("--dataset", eval_c.dataset);
  eval->add_option("--checkpoint", eval_c.checkpoint);
  eval->add_option("--mode", ef.mode)->check(CLI::IsMember({"zsl", "gzsl", "detect"}));
  eval->add_option("--beta", ef.betas, "fusion weight; repeat for several");
  eval->add_flag("--sweep", ef.sweep, "beta sweep {0, 0.5, 1, 2}");
  eval->add_option("--ridge-lambda", ef.ridge_lambda);
  eval->add_option("--features", ef.features, "feature directory written by --save-features");
  eval->add_option("--save-features", ef.save_features, "write scores and features for standalone evaluation");
  eval->add_option("--out", eval_c.out, "report directory");

  bool inject = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad, grad_c);
  grad->add_flag("--inject-diversity-sign-error", inject, "negative control: flip the diversity backward pass");
  grad->add_option("--out", grad_c.out, "directory for the result table");

  std::size_t n = 3;
  std::string split = "test_unseen";
  auto* exp = app.add_subcommand("export", "write attention maps, crops and boxes");
  add_common(exp, export_c);
  exp->add_option("--dataset", export_c.dataset);
  exp->add_option("--checkpoint", export_c.checkpoint);
  exp->add_option("--out", export_c.out, "output directory");
  exp->add_option("-n,--count", n, "number of samples");
  exp->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test_seen", "test_unseen"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (synth->parsed()) {
      RunConfig rc = resolve(synth_c);
      if (num_classes) rc.synth.num_classes = *num_classes;
      if (num_unseen) rc.synth.num_unseen = *num_unseen;
      if (samples_per_class) rc.synth.samples_per_class = *samples_per_class;
      if (image_size) rc.synth.image_size = rc.model.image_size = *image_size;
      return cmd_synth(rc);
    }
    if (train_cmd->parsed()) {
      RunConfig rc = resolve(train_c);
      if (epochs) rc.train.stage_c_epochs = *epochs;
      return cmd_train(rc);
    }
    if (eval->parsed()) return cmd_eval(resolve(eval_c), ef);
    if (grad->parsed()) return cmd_gradcheck(resolve(grad_c), inject);
    if (exp->parsed()) return cmd_export(resolve(export_c), n, split);
  } catch (const CheckFailed& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
