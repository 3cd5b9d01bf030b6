#pragma once

// Operator surface: gen-data / train / eval / attribute subcommands over the
// library. Every command is deterministic given its flags; all randomness
// flows from --seed. Exit codes: 0 success, 2 usage or validation failure,
// 3 runtime numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtmil/attribution.hpp"
#include "dtmil/data.hpp"
#include "dtmil/dtfd.hpp"
#include "dtmil/metrics.hpp"

namespace dtmil {

namespace cli {

struct GenArgs {
  std::string out;
  int bags = 400;
  int dim = 64;
  double witness_rate = 0.1;
  double sep = 2.0;
  double pos_frac = 0.5;
  int k_min = 50;
  int k_max = 200;
  uint64_t seed = 1;
  bool force = false;
};

struct TrainArgs {
  std::string data;
  std::string out;
  int pseudo_bags = 5;
  std::string distill = "afs";
  int epochs = 50;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int d_att = 128;
  uint64_t seed = 1;
  bool head_bias = true;
  int patience = 0;
};

struct EvalArgs {
  std::string data;
  std::string model;
  std::string split = "test";
  std::string tiers = "tier2";  // tier2 | both
  std::string out;              // empty = stdout
  std::string seeds;            // comma list enables train-per-seed aggregation
  TrainArgs train;              // training settings for --seeds mode
};

struct AttributeArgs {
  std::string data;
  std::string model;
  std::vector<std::string> bag_ids;  // empty = whole --split
  std::string split = "test";
  std::string out;  // empty = stdout
};

inline nlohmann::json gen_config_json(const GenArgs& a) {
  return {{"out", a.out},
          {"bags", a.bags},
          {"dim", a.dim},
          {"witness_rate", a.witness_rate},
          {"sep", a.sep},
          {"pos_frac", a.pos_frac},
          {"k_min", a.k_min},
          {"k_max", a.k_max},
          {"seed", a.seed},
          {"force", a.force}};
}

inline nlohmann::json train_config_json(const TrainArgs& a) {
  return {{"data", a.data},
          {"out", a.out},
          {"pseudo_bags", a.pseudo_bags},
          {"distill", a.distill},
          {"epochs", a.epochs},
          {"lr", a.lr},
          {"weight_decay", a.weight_decay},
          {"d_att", a.d_att},
          {"seed", a.seed},
          {"head_bias", a.head_bias},
          {"patience", a.patience}};
}

inline void write_resolved_config(const std::filesystem::path& dir, const nlohmann::json& j) {
  std::ofstream out(dir / "config.resolved.json");
  out << j.dump(2) << "\n";
}

inline int cmd_gen_data(const GenArgs& args) {
  namespace fs = std::filesystem;
  SynthConfig cfg;
  cfg.n_bags = args.bags;
  cfg.D = args.dim;
  cfg.witness_rate = args.witness_rate;
  cfg.sep = args.sep;
  cfg.pos_frac = args.pos_frac;
  cfg.k_min = args.k_min;
  cfg.k_max = args.k_max;
  cfg.seed = args.seed;
  cfg.validate();  // fail before touching the filesystem

  const fs::path dir(args.out);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!args.force) {
      std::cerr << "error: output directory " << dir.string()
                << " is not empty (use --force to overwrite)\n";
      return 2;
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  const auto bags = generate_synthetic(cfg);
  write_dataset(bags, cfg, dir);
  write_resolved_config(dir, gen_config_json(args));
  std::cout << "wrote " << bags.size() << " bags to " << dir.string() << "\n";
  return 0;
}

inline FitConfig fit_config_from(const TrainArgs& args) {
  FitConfig cfg;
  cfg.M = args.pseudo_bags;
  cfg.strategy = parse_distill(args.distill);
  cfg.epochs = args.epochs;
  cfg.opt.lr = args.lr;
  cfg.opt.weight_decay = args.weight_decay;
  cfg.D_att = args.d_att;
  cfg.head_bias = args.head_bias;
  cfg.patience = args.patience;
  cfg.seed = args.seed;
  if (cfg.M < 1) throw ValueError("--pseudo-bags must be >= 1");
  if (cfg.epochs < 1) throw ValueError("--epochs must be >= 1");
  return cfg;
}

inline int cmd_train(const TrainArgs& args) {
  namespace fs = std::filesystem;
  auto bags = load_manifest(fs::path(args.data) / "manifest.csv");
  const FitConfig cfg = fit_config_from(args);
  auto result = fit<float>(bags, cfg);
  const fs::path out(args.out);
  save_model(result.model, out, cfg.seed, result.best_epoch);
  write_history(result.history, out / "history.csv");
  write_resolved_config(out, train_config_json(args));
  std::cout << "best val AUC (tier2): " << result.best_val_auc << " at epoch "
            << result.best_epoch << "; final val AUC: " << result.history.back().val_auc_t2
            << "\n";
  return 0;
}

inline std::vector<BagRecord*> select_split(std::vector<BagRecord>& bags,
                                            const std::string& split) {
  std::vector<BagRecord*> out;
  for (auto& b : bags)
    if (b.split == split) out.push_back(&b);
  if (out.empty()) throw ValueError("split '" + split + "' is empty");
  return out;
}

inline std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> seeds;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    seeds.push_back(std::stoull(tok));
  }
  if (seeds.size() < 2) throw ValueError("--seeds needs at least two comma-separated seeds");
  return seeds;
}

inline nlohmann::json aggregate_json(const std::vector<uint64_t>& seeds,
                                     const std::vector<EvalReport>& reports) {
  std::vector<double> aucs, accs, f1s;
  for (const auto& r : reports) {
    aucs.push_back(r.auc);
    accs.push_back(r.acc);
    f1s.push_back(r.f1);
  }
  const auto ca = ci95(aucs), cc = ci95(accs), cf = ci95(f1s);
  nlohmann::json j = {{"auc", ca.mean},
                      {"acc", cc.mean},
                      {"f1", cf.mean},
                      {"n_pos", reports.front().n_pos},
                      {"n_neg", reports.front().n_neg},
                      {"threshold", reports.front().threshold},
                      {"seeds", seeds},
                      {"ci95", {{"auc", ca.half_width}, {"acc", cc.half_width}, {"f1", cf.half_width}}},
                      {"per_seed", {{"auc", aucs}, {"acc", accs}, {"f1", f1s}}}};
  return j;
}

inline void emit_report(const nlohmann::json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw ValueError("cannot open report file " + out_path);
    out << j.dump(2) << "\n";
  }
}

inline int cmd_eval(const EvalArgs& args) {
  namespace fs = std::filesystem;
  const bool both = args.tiers == "both";
  if (!both && args.tiers != "tier2")
    throw ValueError("--tiers must be 'tier2' or 'both', got '" + args.tiers + "'");

  if (!args.seeds.empty()) {
    // Multi-run protocol: train and evaluate once per seed, report mean +/- ci95.
    const auto seeds = parse_seed_list(args.seeds);
    std::vector<EvalReport> t2_reports, t1_reports;
    for (uint64_t seed : seeds) {
      auto bags = load_manifest(fs::path(args.data) / "manifest.csv");
      TrainArgs ta = args.train;
      ta.seed = seed;
      auto result = fit<float>(bags, fit_config_from(ta));
      auto split_bags = select_split(bags, args.split);
      const auto sc = score_bags(split_bags, result.model);
      t2_reports.push_back(evaluate(sc.t2, sc.labels));
      t1_reports.push_back(evaluate(sc.t1_pooled, sc.labels));
    }
    nlohmann::json j = aggregate_json(seeds, t2_reports);
    if (both) j = nlohmann::json{{"tier1", aggregate_json(seeds, t1_reports)}, {"tier2", j}};
    emit_report(j, args.out);
    return 0;
  }

  if (args.model.empty()) throw ValueError("--model is required unless --seeds is given");
  auto model = load_model<float>(args.model);
  auto bags = load_manifest(fs::path(args.data) / "manifest.csv");
  auto split_bags = select_split(bags, args.split);
  const auto sc = score_bags(split_bags, model);
  nlohmann::json j = report_to_json(evaluate(sc.t2, sc.labels));
  if (both)
    j = nlohmann::json{{"tier1", report_to_json(evaluate(sc.t1_pooled, sc.labels))},
                       {"tier2", j}};
  emit_report(j, args.out);
  return 0;
}

struct AttributionAucs {
  double p_pos = 0.0;
  double a_norm = 0.0;
  bool available = false;
};

inline int cmd_attribute(const AttributeArgs& args) {
  namespace fs = std::filesystem;
  auto model = load_model<float>(args.model);
  auto bags = load_manifest(fs::path(args.data) / "manifest.csv");

  std::vector<BagRecord*> targets;
  if (args.bag_ids.empty()) {
    targets = select_split(bags, args.split);
  } else {
    for (const auto& id : args.bag_ids) {
      BagRecord* found = nullptr;
      for (auto& b : bags)
        if (b.bag_id == id) found = &b;
      if (!found) throw ValueError("bag id '" + id + "' not found in manifest");
      targets.push_back(found);
    }
  }

  std::map<std::string, std::vector<uint8_t>> witness;
  const fs::path witness_path = fs::path(args.data) / "witness.csv";
  if (fs::exists(witness_path)) witness = load_witness_masks(witness_path);

  std::ostringstream csv;
  csv << kAttributionCsvHeader << "\n";
  std::vector<double> pooled_p, pooled_a;
  std::vector<int> pooled_w;
  for (BagRecord* rec : targets) {
    load_features(*rec);
    auto H = Tensor<float>::leaf(rec->K, rec->D, std::vector<float>(rec->features), false);
    const auto attr = attribute_bag(H, model.tier1);
    write_attribution_csv_rows(csv, rec->bag_id, attr);
    auto wit = witness.find(rec->bag_id);
    if (wit != witness.end() && int(wit->second.size()) == rec->K) {
      for (int k = 0; k < rec->K; ++k) {
        pooled_p.push_back(double(attr.p[size_t(k) * 2 + 1]));
        pooled_a.push_back(double(attr.a_norm[size_t(k)]));
        pooled_w.push_back(int(wit->second[size_t(k)]));
      }
    }
  }

  std::ostream* metrics_out = &std::cerr;
  if (args.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream out(args.out);
    if (!out) throw ValueError("cannot open output file " + args.out);
    out << csv.str();
    metrics_out = &std::cout;
  }

  bool has_pos = false, has_neg = false;
  for (int w : pooled_w) (w == 1 ? has_pos : has_neg) = true;
  if (has_pos && has_neg) {
    *metrics_out << "instance AUC (derived p_pos vs witness): " << auc(pooled_p, pooled_w)
                 << "\n";
    *metrics_out << "instance AUC (normalized attention vs witness): " << auc(pooled_a, pooled_w)
                 << "\n";
  }
  return 0;
}

}  // namespace cli

// Builds the CLI11 app, parses, dispatches. Returns the process exit code.
inline int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"double-tier MIL with instance attribution on bagged feature data"};
  app.require_subcommand(1);

  cli::GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic bag dataset");
  gen_cmd->add_option("--out", gen.out, "output dataset directory")->required();
  gen_cmd->add_option("--bags", gen.bags, "number of bags");
  gen_cmd->add_option("--dim", gen.dim, "feature dimension");
  gen_cmd->add_option("--witness-rate", gen.witness_rate, "witness rate in (0,1]");
  gen_cmd->add_option("--sep", gen.sep, "positive cluster separation (sigmas)");
  gen_cmd->add_option("--pos-frac", gen.pos_frac, "fraction of positive bags");
  gen_cmd->add_option("--k-min", gen.k_min, "min instances per bag");
  gen_cmd->add_option("--k-max", gen.k_max, "max instances per bag");
  gen_cmd->add_option("--seed", gen.seed, "generation seed");
  gen_cmd->add_flag("--force", gen.force, "overwrite a non-empty output directory");

  auto add_train_options = [](CLI::App* cmd, cli::TrainArgs& t) {
    cmd->add_option("--pseudo-bags", t.pseudo_bags, "pseudo-bags per slide");
    cmd->add_option("--distill", t.distill, "distillation strategy: maxs|maxmins|mas|afs");
    cmd->add_option("--epochs", t.epochs, "training epochs");
    cmd->add_option("--lr", t.lr, "Adam learning rate");
    cmd->add_option("--weight-decay", t.weight_decay, "L2 weight decay");
    cmd->add_option("--d-att", t.d_att, "attention hidden dimension");
    cmd->add_option("--seed", t.seed, "training seed");
    cmd->add_flag("--head-bias,!--no-head-bias", t.head_bias, "classifier bias term");
    cmd->add_option("--patience", t.patience,
                    "early-stop after N epochs without val improvement (0 = off)");
  };

  cli::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a double-tier model");
  train_cmd->add_option("--data", train.data, "dataset directory (with manifest.csv)")->required();
  train_cmd->add_option("--out", train.out, "model output directory")->required();
  add_train_options(train_cmd, train);
  train_cmd->set_config("--config", "", "config file (key = value lines)");
  train_cmd->allow_config_extras(CLI::config_extras_mode::error);

  cli::EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model (or train per seed)");
  eval_cmd->add_option("--data", eval_args.data, "dataset directory")->required();
  eval_cmd->add_option("--model", eval_args.model, "trained model directory");
  eval_cmd->add_option("--split", eval_args.split, "split to score: train|val|test");
  eval_cmd->add_option("--tiers", eval_args.tiers, "report tiers: tier2|both");
  eval_cmd->add_option("--out", eval_args.out, "report file (default stdout)");
  eval_cmd->add_option("--seeds", eval_args.seeds,
                       "comma-separated seeds: train per seed and report mean +/- ci95");
  add_train_options(eval_cmd, eval_args.train);
  eval_cmd->set_config("--config", "", "config file (key = value lines)");
  eval_cmd->allow_config_extras(CLI::config_extras_mode::error);

  cli::AttributeArgs attr;
  auto* attr_cmd = app.add_subcommand("attribute", "export per-instance attributions as CSV");
  attr_cmd->add_option("--model", attr.model, "trained model directory")->required();
  attr_cmd->add_option("--data", attr.data, "dataset directory")->required();
  attr_cmd->add_option("--bag", attr.bag_ids, "bag id (repeatable; default: whole --split)");
  attr_cmd->add_option("--split", attr.split, "split to attribute when no --bag given");
  attr_cmd->add_option("--out", attr.out, "CSV output file (default stdout)");

  std::vector<const char*> argv;
  argv.push_back("dtmil");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen_cmd->parsed()) return cli::cmd_gen_data(gen);
    if (train_cmd->parsed()) return cli::cmd_train(train);
    if (eval_cmd->parsed()) {
      eval_args.train.data = eval_args.data;
      return cli::cmd_eval(eval_args);
    }
    if (attr_cmd->parsed()) return cli::cmd_attribute(attr);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

inline int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args);
}

}  // namespace dtmil
