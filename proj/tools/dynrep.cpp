#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dynrep/harness/pipeline.hpp"
#include "dynrep/harness/selftest.hpp"

namespace {

using dynrep::ErrCode;
using dynrep::Error;

constexpr const char* kUsage =
    "usage: dynrep <command> [options]\n"
    "\n"
    "commands:\n"
    "  generate   build the trajectory datasets for every configured system\n"
    "  pretrain   train one checkpoint per (method, system) grid cell\n"
    "  probe      frozen-encoder probe evaluation over the fraction/seed grid\n"
    "  report     regenerate summary tables from the results CSV (no training)\n"
    "  selftest   run gradient checks, loss oracles, and simulator oracles\n"
    "\n"
    "options:\n"
    "  --config PATH   JSON experiment config (defaults used when omitted)\n"
    "  --seed N        override dataset and pretraining seeds\n"
    "  --out DIR       override the output directory\n"
    "  --jobs N        worker processes for independent grid cells\n"
    "  --force         rerun stages even on a ledger hit\n"
    "  --inject-bug    selftest only: demonstrate gradcheck failure reporting\n"
    "\n"
    "Environment variables DYNREP_<SECTION>_<KEY> override config leaves\n"
    "(e.g. DYNREP_DATASET_LABELED=64, DYNREP_FRACTIONS=0.1,0.5,1.0);\n"
    "command-line flags take precedence over both.\n";

struct CliArgs {
  std::string command;
  std::string config_path;
  std::string out;
  std::string seed;  // kept as text until parsed onto the config
  int64_t jobs = 1;
  bool force = false;
  bool inject_bug = false;
};

std::string flag_value(const std::vector<std::string>& args, size_t& i,
                       const std::string& flag) {
  if (i + 1 >= args.size())
    throw Error(ErrCode::usage, flag + " needs a value");
  return args[++i];
}

CliArgs parse_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  CliArgs out;
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      out.config_path = flag_value(args, i, a);
    } else if (a == "--seed") {
      out.seed = flag_value(args, i, a);
    } else if (a == "--out") {
      out.out = flag_value(args, i, a);
    } else if (a == "--jobs") {
      try {
        out.jobs = std::stoll(flag_value(args, i, a));
      } catch (const std::exception&) {
        throw Error(ErrCode::usage, "--jobs needs an integer");
      }
      if (out.jobs < 1) throw Error(ErrCode::usage, "--jobs must be >= 1");
    } else if (a == "--force") {
      out.force = true;
    } else if (a == "--inject-bug") {
      out.inject_bug = true;
    } else if (a == "--help" || a == "-h") {
      std::fputs(kUsage, stdout);
      std::exit(0);
    } else if (!a.empty() && a[0] == '-') {
      throw Error(ErrCode::usage, "unknown flag '" + a + "'");
    } else if (out.command.empty()) {
      out.command = a;
    } else {
      throw Error(ErrCode::usage, "unexpected argument '" + a + "'");
    }
  }
  if (out.command.empty())
    throw Error(ErrCode::usage, "no command given (try --help)");
  return out;
}

dynrep::ExperimentConfig resolve_config(const CliArgs& args) {
  dynrep::ExperimentConfig cfg;
  if (!args.config_path.empty())
    cfg = dynrep::load_experiment_config(args.config_path);
  nlohmann::json tree = cfg;
  dynrep::apply_env_overrides(tree);
  if (!args.seed.empty()) {
    try {
      uint64_t seed = std::stoull(args.seed);
      tree["dataset"]["seed"] = seed;
      tree["pretrain"]["seed"] = seed;
    } catch (const std::exception&) {
      throw Error(ErrCode::usage, "--seed needs an unsigned integer");
    }
  }
  if (!args.out.empty()) tree["out"] = args.out;
  cfg = tree.get<dynrep::ExperimentConfig>();
  cfg.validate();
  return cfg;
}

void print_outcome(const dynrep::StageOutcome& o) {
  std::printf("%-6s %s\n", o.ran ? "done" : "cached", o.stage.c_str());
}

int run_selftest_cmd(bool inject_bug) {
  using Clock = std::chrono::steady_clock;
  auto t0 = Clock::now();
  dynrep::SelftestOptions opt;
  opt.inject_bug = inject_bug;
  std::vector<dynrep::CheckResult> checks = dynrep::run_selftest(opt);
  int failed = 0;
  for (const auto& c : checks) {
    if (c.ok) {
      std::printf("ok   %s\n", c.name.c_str());
    } else {
      std::printf("FAIL %s: %s\n", c.name.c_str(), c.detail.c_str());
      ++failed;
    }
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::printf("selftest: %zu/%zu checks passed (%.1f s)\n",
              checks.size() - static_cast<size_t>(failed), checks.size(),
              secs);
  return failed == 0 ? 0 : 1;
}

int run(const CliArgs& args) {
  if (args.command == "selftest") return run_selftest_cmd(args.inject_bug);
  if (args.command != "generate" && args.command != "pretrain" &&
      args.command != "probe" && args.command != "report")
    throw Error(ErrCode::usage,
                "unknown command '" + args.command + "' (try --help)");

  dynrep::ExperimentConfig cfg = resolve_config(args);
  if (args.command == "report") {
    for (const auto& path : dynrep::cmd_report(cfg))
      std::printf("wrote %s\n", path.c_str());
    return 0;
  }

  dynrep::RunLedger ledger(dynrep::ledger_path(cfg));
  if (args.command == "generate") {
    for (const auto& o : dynrep::cmd_generate(cfg, ledger, args.force))
      print_outcome(o);
  } else if (args.command == "pretrain") {
    for (const auto& o :
         dynrep::cmd_pretrain(cfg, ledger, args.force, args.jobs))
      print_outcome(o);
  } else {
    for (const auto& o : dynrep::cmd_probe(cfg, ledger, args.force, args.jobs))
      print_outcome(o);
    std::printf("wrote %s\n", dynrep::results_csv_path(cfg).c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(parse_args(argc, argv));
  } catch (const Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", dynrep::err_code_name(e.code()),
                 e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[E_STATE]: %s\n", e.what());
    return 1;
  }
}
