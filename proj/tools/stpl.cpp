#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "stpl/gradsuite.hpp"
#include "stpl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace stpl;

namespace {

struct Overrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method, fusion;
  std::optional<double> tau, k, lr;
  std::optional<std::size_t> iterations;
};

void add_config_flag(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON run config; flags override its values");
  cmd->add_option("--seed", o.seed, "Run seed");
}

void add_train_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--iterations", o.iterations, "Training iterations");
  cmd->add_option("--lr", o.lr, "Base learning rate");
  cmd->add_option("--fusion", o.fusion, "Fusion block")->check(CLI::IsMember({"add", "conv1x1", "concat", "stam"}));
}

void add_adapt_flags(CLI::App* cmd, Overrides& o) {
  add_train_flags(cmd, o);
  cmd->add_option("--method", o.method, "Adaptation objective")
      ->check(CLI::IsMember({"stpl", "spatial", "temporal", "naive", "duplicate", "selftrain"}));
  cmd->add_option("--tau", o.tau, "Contrastive temperature");
  cmd->add_option("--k", o.k, "Confident proportion");
}

// Config file first, then flags. `adapting` routes --iterations/--lr to the adaptation stage.
RunConfig effective_config(const Overrides& o, bool adapting) {
  nlohmann::json user = nlohmann::json::object();
  if (o.config_path) {
    try {
      user = nlohmann::json::parse(io::read_text(*o.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(*o.config_path + ": " + e.what());
    }
  }
  RunConfig c = run_config_from_json(user);
  TrainConfig& t = adapting ? c.adapt : c.source;
  if (o.seed) c.seed = *o.seed;
  if (o.iterations) t.iterations = *o.iterations;
  if (o.lr) t.lr = *o.lr;
  if (o.fusion) c.model.fusion = parse_fusion(*o.fusion);
  if (o.method) c.adapt.objective = parse_objective(*o.method);
  if (o.tau) c.adapt.tau = *o.tau;
  if (o.k) c.adapt.k = *o.k;
  c.source.seed = c.adapt.seed = c.seed;
  validate(c);
  return c;
}

bool model_explicit(const Overrides& o) {
  if (o.fusion) return true;
  if (!o.config_path) return false;
  return nlohmann::json::parse(io::read_text(*o.config_path)).contains("model");
}

void prepare_out(const fs::path& out, bool force) {
  std::error_code ec;
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("output directory " + out.string() + " is not empty (use --force)");
    fs::remove_all(out, ec);
    if (ec) throw IoError("cannot clear " + out.string() + ": " + ec.message());
  }
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
}

void write_config(const fs::path& out, const RunConfig& c) {
  io::write_text(out / "config.json", to_json(c).dump(2) + "\n");
}

SegModel<float> load_for(const fs::path& ckpt, RunConfig& c, bool check_model) {
  auto m = load_checkpoint<float>(ckpt, check_model ? std::optional<ModelConfig>(c.model) : std::nullopt);
  c.model = m.config;
  c.data.K = m.config.num_classes;
  return m;
}

void check_classes(const DatasetInfo& info, const ModelConfig& m) {
  if (info.K != m.num_classes) {
    throw IncompatibleError("dataset has " + std::to_string(info.K) + " classes, model has " +
                            std::to_string(m.num_classes));
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_report(const MetricsReport& r) {
  std::printf("mIoU %.2f  TC %.2f\n", 100.0 * r.miou, r.temporal_consistency);
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    if (r.per_class_iou[c]) std::printf("  class %zu IoU %.2f\n", c, 100.0 * *r.per_class_iou[c]);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free video segmentation adaptation on synthetic clips"};
  app.require_subcommand(1);
  Overrides o;
  std::string out, data, ckpt, domain = "source", split = "train", ks, distance, methods, op;
  std::optional<std::size_t> num_sequences, per_class;
  std::size_t grad_seeds = 10, repro_seeds = 1;
  bool force = false;
  double tolerance = 1e-4;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_config_flag(gen, o);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--domain", domain, "Domain")->required()->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--split", split, "Split")->check(CLI::IsMember({"train", "eval"}));
  gen->add_option("--num-sequences", num_sequences, "Number of sequences");
  gen->add_flag("--force", force, "Replace a non-empty output directory");

  auto* train = app.add_subcommand("train-source", "Supervised training on a labelled source dataset");
  add_config_flag(train, o);
  add_train_flags(train, o);
  train->add_option("--data", data, "Source dataset directory")->required();
  train->add_option("--out", out, "Checkpoint directory")->required();
  train->add_flag("--force", force, "Replace a non-empty output directory");

  auto* adapt = app.add_subcommand("adapt", "Source-free adaptation on an unlabelled target dataset");
  add_config_flag(adapt, o);
  add_adapt_flags(adapt, o);
  adapt->add_option("--checkpoint", ckpt, "Source checkpoint")->required();
  adapt->add_option("--data", data, "Target dataset directory")->required();
  adapt->add_option("--out", out, "Adapted checkpoint directory")->required();
  adapt->add_flag("--force", force, "Replace a non-empty output directory");

  auto* eval = app.add_subcommand("eval", "mIoU and temporal consistency of a checkpoint");
  add_config_flag(eval, o);
  eval->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  eval->add_option("--data", data, "Labelled dataset directory")->required();
  eval->add_option("--out", out, "Report directory")->required();

  auto* analyze = app.add_subcommand("analyze", "Neighbour purity and class variances of fused features");
  add_config_flag(analyze, o);
  analyze->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  analyze->add_option("--data", data, "Labelled dataset directory")->required();
  analyze->add_option("--out", out, "Report directory")->required();
  analyze->add_option("--ks", ks, "Comma-separated neighbour counts");
  analyze->add_option("--distance", distance, "Neighbour distance")->check(CLI::IsMember({"euclidean", "cosine"}));
  analyze->add_option("--per-class", per_class, "Sampled pixels per class");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad->add_option("--seeds", grad_seeds, "Random cases per op")->check(CLI::PositiveNumber);
  grad->add_option("--op", op, "Check a single op");
  grad->add_option("--tolerance", tolerance, "Relative tolerance");
  grad->add_option("--seed", o.seed, "Base seed");

  auto* repro = app.add_subcommand("reproduce", "Objective ablation table over seeds");
  add_config_flag(repro, o);
  add_adapt_flags(repro, o);
  repro->add_option("--out", out, "Output directory")->required();
  repro->add_option("--seeds", repro_seeds, "Number of consecutive seeds starting at --seed")->check(CLI::PositiveNumber);
  repro->add_option("--methods", methods, "Comma-separated objectives (default: all)");
  repro->add_flag("--force", force, "Replace a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (gen->parsed()) {
      RunConfig c = effective_config(o, false);
      const bool target = domain == "target";
      const Split sp = split == "eval" ? Split::kEval : Split::kTrain;
      auto seqs = generate_split(c, target, sp, num_sequences);
      prepare_out(out, force);
      write_dataset(seqs, out, c.data.K, domain,
                    {{"seed", c.seed},
                     {"split", split},
                     {"domain_spec", to_json(target ? c.target_domain : c.source_domain)},
                     {"run_config", to_json(c)}});
      std::printf("%zu sequences, %zu classes, T=%zu, %zux%zu, domain %s (%s)\n", seqs.size(), c.data.K, c.data.T,
                  c.data.H, c.data.W, domain.c_str(), split.c_str());
      std::printf("shift %s\n", to_json(target ? c.target_domain : c.source_domain).dump().c_str());
      return 0;
    }

    if (train->parsed()) {
      RunConfig c = effective_config(o, false);
      DatasetInfo info;
      auto seqs = read_dataset(data, &info);
      check_classes(info, c.model);
      if (info.domain == "target") std::fprintf(stderr, "warning: training on a target-domain dataset\n");
      prepare_out(out, force);
      auto r = train_source(make_model<float>(c.model, c.seed), seqs, c.source);
      write_loss_csv(fs::path(out) / "loss.csv", r.log);
      write_config(out, c);
      if (r.aborted) throw NumericError(r.message);
      save_checkpoint(r.model, out, c.source.iterations, c.seed, {{"run_config", to_json(c)}, {"stage", "source"}});
      std::printf("trained %zu iterations, final loss %.4f, params %s\n", r.log.size(),
                  r.log.empty() ? 0.0 : r.log.back().loss, io::hex64(params_hash(r.model.params)).c_str());
      return 0;
    }

    if (adapt->parsed()) {
      RunConfig c = effective_config(o, true);
      if (fs::exists(out) && !fs::is_empty(out) && !force) {
        throw ConfigError("output directory " + out + " is not empty (use --force)");
      }
      auto run = adapt_from_disk(ckpt, data, c, model_explicit(o));
      auto& r = run.result;
      prepare_out(out, force);
      write_loss_csv(fs::path(out) / "loss.csv", r.log);
      write_config(out, c);
      for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      if (r.aborted) throw NumericError(r.message);
      save_checkpoint(r.model, out, c.adapt.iterations, c.seed,
                      {{"run_config", to_json(c)}, {"stage", "adapted"}, {"source_params_hash", run.source_hash}});
      std::printf("adapted with %s for %zu iterations (%zu without confident pairs)\n",
                  to_string(c.adapt.objective).c_str(), r.log.size(), r.empty_steps);
      return 0;
    }

    if (eval->parsed() || analyze->parsed()) {
      RunConfig c = effective_config(o, false);
      if (!ks.empty()) {
        c.metrics.ks.clear();
        for (const auto& s : split_list(ks)) c.metrics.ks.push_back(std::stoul(s));
      }
      if (!distance.empty()) c.metrics.distance = pipeline_detail::parse_distance(distance);
      if (per_class) c.metrics.per_class = *per_class;
      auto model = load_for(ckpt, c, model_explicit(o));
      DatasetInfo info;
      auto seqs = read_dataset(data, &info);
      check_classes(info, model.config);
      fs::create_directories(out);
      auto report = evaluate(model, seqs);
      if (analyze->parsed()) {
        std::vector<std::string> notes;
        auto a = stpl::analyze(model, seqs, c.metrics, c.seed, &notes);
        report.purity = a.purity;
        report.sigma_intra = a.sigma_intra;
        report.sigma_inter = a.sigma_inter;
        for (const auto& n : notes) std::fprintf(stderr, "note: %s\n", n.c_str());
      }
      report.config = to_json(c);
      report.config["checkpoint"] = fs::absolute(ckpt).lexically_normal().string();
      report.config["data"]["path"] = fs::absolute(data).lexically_normal().string();
      const auto cm = read_checkpoint_manifest(ckpt);
      if (cm.contains("run_config")) report.config["checkpoint_run_config"] = cm["run_config"];
      report.seed = c.seed;
      emit_report(report, default_report_paths(out), fs::path(ckpt).filename().string());
      print_report(report);
      for (const auto& [k, p] : report.purity) std::printf("  purity@%zu %.2f\n", k, p);
      if (report.sigma_intra) std::printf("  sigma_intra %.4f sigma_inter %.4f\n", *report.sigma_intra, *report.sigma_inter);
      return 0;
    }

    if (grad->parsed()) {
      auto rep = run_grad_suite(grad_seeds, o.seed.value_or(0), tolerance, op);
      std::printf("%-24s %8s %12s\n", "op", "passed", "max rel err");
      for (const auto& r : rep.rows) {
        std::printf("%-24s %4zu/%-3zu %12.3e %s\n", r.op.c_str(), r.passed, r.seeds, r.max_rel_error,
                    r.ok() ? "" : "FAIL");
        if (!r.ok()) std::printf("    %s\n", r.first_failure.c_str());
      }
      std::printf("%s in %.1fs\n", rep.ok() ? "all passed" : "FAILED", rep.seconds);
      return rep.ok() ? 0 : static_cast<int>(ExitCode::kNumeric);
    }

    if (repro->parsed()) {
      RunConfig c = effective_config(o, true);
      std::vector<AdaptObjective> objs;
      if (methods.empty()) {
        objs = all_objectives();
      } else {
        for (const auto& m : split_list(methods)) objs.push_back(parse_objective(m));
      }
      std::vector<std::uint64_t> seed_list;
      for (std::size_t i = 0; i < repro_seeds; ++i) seed_list.push_back(c.seed + i);
      prepare_out(out, force);
      auto table = reproduce(c, seed_list, objs, env_threads(),
                             [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); });
      io::write_text(fs::path(out) / "results.json", to_json(table).dump(2) + "\n");
      io::write_text(fs::path(out) / "table.md", ablation_markdown(table));
      io::write_text(fs::path(out) / "table.csv", ablation_csv(table));
      write_config(out, c);
      std::printf("%s", ablation_markdown(table).c_str());
      std::printf("source checkpoints:");
      for (const auto& h : table.source_hashes) std::printf(" %s", h.c_str());
      std::printf("\n");
      return table.ok() ? 0 : static_cast<int>(ExitCode::kNumeric);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "stpl: %s\n", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "stpl: io error: %s\n", e.what());
    return static_cast<int>(ExitCode::kIo);
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "stpl: config error: %s\n", e.what());
    return static_cast<int>(ExitCode::kConfig);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stpl: %s\n", e.what());
    return static_cast<int>(ExitCode::kRuntime);
  }
  return 0;
}
