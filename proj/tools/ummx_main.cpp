#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ummx/cli.hpp"
#include "ummx/error.hpp"
#include "ummx/finetune.hpp"

namespace {

ummx::RunConfig load_config(const std::string& path) {
  ummx::RunConfig cfg = path.empty() ? ummx::RunConfig{} : ummx::RunConfig::from_file(path);
  cfg.apply_env_seed(std::getenv("UMMX_SEED"));
  return cfg;
}

std::string pick_out(const ummx::RunConfig& cfg, const std::string& flag) {
  return flag.empty() ? cfg.out_dir : flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"paired code+text clinical model toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_flag, checkpoint, visits_path;

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic cohort to disk");
  CLI::App* pre = app.add_subcommand("pretrain", "masked-code pre-training");
  CLI::App* fin = app.add_subcommand("finetune", "task fine-tuning from a checkpoint");
  CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on the test split");
  CLI::App* attn = app.add_subcommand("attn-dump", "export cross-modal attention maps");
  CLI::App* ver = app.add_subcommand("verify", "run the release-gate checks");

  for (CLI::App* sub : {gen, pre, fin, ev, attn}) {
    sub->add_option("--config", config_path, "run configuration file");
    sub->add_option("--out", out_flag, "output directory (defaults to out.dir)");
  }
  ver->add_option("--out", out_flag, "report directory");
  for (CLI::App* sub : {fin, ev, attn})
    sub->add_option("--checkpoint", checkpoint, "pre-trained checkpoint")->required();
  attn->add_option("--visits", visits_path, "visit JSONL to explain")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const ummx::RunConfig cfg = load_config(config_path);
      const std::string dir = pick_out(cfg, out_flag);
      const ummx::GenerateResult res = ummx::cmd_generate(cfg, dir);
      std::cout << "wrote " << res.patients << " patients, " << res.visits << " visits to "
                << dir << '\n';
    } else if (pre->parsed()) {
      const ummx::RunConfig cfg = load_config(config_path);
      const std::string dir = pick_out(cfg, out_flag);
      const ummx::PretrainCmdResult res = ummx::cmd_pretrain(cfg, dir);
      std::cout << "untrained eval t2c " << res.untrained.t2c << " c2c " << res.untrained.c2c
                << " (uniform bound " << res.uniform_bound << ")\n";
      if (!res.untrained_within_bound)
        std::cerr << "warning: untrained eval loss strays more than 5% from the uniform bound\n";
      std::cout << "best eval " << res.history.best_eval << " at epoch "
                << res.history.best_epoch + 1 << " of " << res.history.history.size() << '\n'
                << "checkpoint " << res.checkpoint_path << '\n'
                << "history " << res.history_path << '\n';
    } else if (fin->parsed()) {
      const ummx::RunConfig cfg = load_config(config_path);
      const std::string dir = pick_out(cfg, out_flag);
      const ummx::FinetuneCmdResult res = ummx::cmd_finetune(cfg, checkpoint, dir);
      std::cout << "task " << cfg.task << " over " << res.runs.size() << " seed(s)\n"
                << "auc " << ummx::mean_std(res.summary.mean.auc, res.summary.stddev.auc)
                << '\n'
                << "f1 " << ummx::mean_std(res.summary.mean.f1, res.summary.stddev.f1) << '\n'
                << "accuracy "
                << ummx::mean_std(res.summary.mean.accuracy, res.summary.stddev.accuracy)
                << '\n';
      if (!res.sweep.empty())
        std::cout << "sweep " << res.sweep.size() << " points -> " << dir << "/sweep.csv\n";
    } else if (ev->parsed()) {
      const ummx::RunConfig cfg = load_config(config_path);
      const ummx::MetricReport r = ummx::cmd_eval(cfg, checkpoint, pick_out(cfg, out_flag));
      std::cout << ummx::metrics_json(cfg.task, cfg.seed, r) << '\n';
    } else if (attn->parsed()) {
      const ummx::RunConfig cfg = load_config(config_path);
      const std::string dir = pick_out(cfg, out_flag);
      const ummx::AttnDumpResult res = ummx::cmd_attn_dump(cfg, checkpoint, visits_path, dir);
      for (const std::string& id : res.skipped)
        std::cerr << "warning: skipped " << id << " (empty modality)\n";
      std::cout << "dumped " << res.visits_dumped << " visit(s) to " << res.path << '\n';
    } else if (ver->parsed()) {
      const std::vector<ummx::VerifyCheck> checks = ummx::run_verification();
      int failed = 0;
      for (const ummx::VerifyCheck& c : checks) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
        failed += c.passed ? 0 : 1;
      }
      const std::string dir = out_flag.empty() ? "run" : out_flag;
      std::filesystem::create_directories(dir);
      std::ofstream report(dir + "/verify_report.json");
      if (report) report << ummx::verification_report_json(checks) << '\n';
      std::cout << checks.size() - failed << "/" << checks.size() << " checks passed\n";
      return failed == 0 ? 0 : 1;
    }
    return 0;
  } catch (const ummx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ummx::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const ummx::VocabError& e) {
    std::cerr << "vocabulary error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
