#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <deque>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <torch/torch.h>

#include "mac/error.hpp"
#include "mac/figures.hpp"
#include "mac/pipeline.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;
using namespace mac;

// Exit codes: 1 runtime failure, 2 usage/config error, 3 missing prerequisite.
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitState = 3;

struct Globals {
    std::string run_root;
    std::string config_file;
    std::vector<std::string> assignments;
    bool quiet = false;
};

RunConfig build_config(const Globals& g) {
    RunConfig config = g.config_file.empty() ? RunConfig{} : RunConfig::load(g.config_file);
    for (const auto& a : g.assignments) {
        config.assign(a);
    }
    return config;
}

pipe::Paths paths_of(const Globals& g) {
    if (g.run_root.empty()) {
        throw ConfigError("no run root: pass --run-root or set MAC_RUN_ROOT");
    }
    return {fs::path(g.run_root)};
}

pipe::Progress progress_of(const Globals& g) {
    if (g.quiet) {
        return {};
    }
    return [](const std::string& line) { std::cout << line << std::endl; };
}

std::vector<pipe::Rung> select_rungs(const std::vector<pipe::Rung>& ladder, const std::vector<std::string>& names) {
    if (names.empty()) {
        return ladder;
    }
    std::vector<pipe::Rung> out;
    for (const auto& name : names) {
        auto it = std::find_if(ladder.begin(), ladder.end(), [&](const pipe::Rung& r) { return r.name == name; });
        if (it == ladder.end()) {
            std::string known;
            for (const auto& r : ladder) {
                known += (known.empty() ? "" : ", ") + r.name;
            }
            throw ConfigError(fmt::format("unknown ablation rung '{}' (known: {})", name, known));
        }
        out.push_back(*it);
    }
    return out;
}

/// Runs every request as a `train-target` child of this executable, at most
/// `jobs` at a time. Each child gets the request's config snapshot.
pipe::Launcher process_launcher(const pipe::Paths& paths, int jobs, const pipe::Progress& progress) {
    return [paths, jobs, progress](const std::vector<pipe::RunRequest>& runs) {
        std::deque<const pipe::RunRequest*> queue;
        for (const auto& r : runs) {
            queue.push_back(&r);
        }
        std::map<pid_t, const pipe::RunRequest*> active;
        std::vector<std::string> failures;
        const auto spawn = [&](const pipe::RunRequest& run) {
            fs::create_directories(run.dir);
            const auto snapshot = run.dir / "request.cfg";
            run.config.save(snapshot);
            const std::string self = fs::read_symlink("/proc/self/exe").string();
            std::vector<std::string> args{self,
                                          "--quiet",
                                          "--run-root",
                                          paths.root.string(),
                                          "--config",
                                          snapshot.string(),
                                          "train-target",
                                          "--out",
                                          run.dir.string()};
            std::vector<char*> argv;
            for (auto& a : args) {
                argv.push_back(a.data());
            }
            argv.push_back(nullptr);
            posix_spawn_file_actions_t actions;
            posix_spawn_file_actions_init(&actions);
            const auto log = (run.dir / "run.log").string();
            posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
            posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
            pid_t pid = 0;
            const int rc = posix_spawn(&pid, self.c_str(), &actions, nullptr, argv.data(), environ);
            posix_spawn_file_actions_destroy(&actions);
            if (rc != 0) {
                throw Error(fmt::format("cannot start run {}: {}", run.dir.string(), std::strerror(rc)));
            }
            active[pid] = &run;
            if (progress) {
                progress(fmt::format("started {} seed {} (pid {})", run.rung, run.seed_index, pid));
            }
        };
        while (!queue.empty() || !active.empty()) {
            while (!queue.empty() && static_cast<int>(active.size()) < jobs) {
                spawn(*queue.front());
                queue.pop_front();
            }
            int status = 0;
            const pid_t pid = waitpid(-1, &status, 0);
            if (pid < 0) {
                throw Error("waitpid failed while running the ablation");
            }
            const auto it = active.find(pid);
            if (it == active.end()) {
                continue;
            }
            const auto* run = it->second;
            active.erase(it);
            const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
            if (!ok) {
                failures.push_back(fmt::format("{} seed {} (see {})", run->rung, run->seed_index,
                                               (run->dir / "run.log").string()));
            }
            if (progress) {
                progress(fmt::format("{} {} seed {}", ok ? "finished" : "FAILED", run->rung, run->seed_index));
            }
        }
        if (!failures.empty()) {
            std::string msg = fmt::format("{} ablation run(s) failed:", failures.size());
            for (const auto& f : failures) {
                msg += "\n  " + f;
            }
            throw Error(msg);
        }
    };
}

} // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);

    CLI::App app{"Modality calibration experiments: data, source detector, inversion, FSR pretraining, target "
                 "training, evaluation, ablation and figures."};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand help for every subcommand");

    Globals g;
    if (const char* env = std::getenv("MAC_RUN_ROOT")) {
        g.run_root = env;
    }
    app.add_option("--run-root", g.run_root, "Run root directory (default: $MAC_RUN_ROOT)");
    app.add_option("--config", g.config_file, "Config file of `key = value` lines overlaid on the defaults")
        ->check(CLI::ExistingFile);
    app.add_option("--set", g.assignments, "Override one key, e.g. --set target.mode=mac-self (repeatable)");
    app.add_flag("--quiet", g.quiet, "Suppress progress lines");

    auto* gen = app.add_subcommand("gen-data", "Generate the paired train/test datasets");
    auto* source = app.add_subcommand("train-source", "Train the source detector on source images");

    auto* invert = app.add_subcommand("invert", "Invert the source detector: J_S corpus and J_T caches");
    bool no_corpus = false, no_manual = false, no_pseudo = false;
    invert->add_flag("--no-corpus", no_corpus, "Skip the random-layout J_S corpus");
    invert->add_flag("--no-manual", no_manual, "Skip J_T against manual labels");
    invert->add_flag("--no-pseudo", no_pseudo, "Skip J_T against pseudo labels");

    auto* fsr = app.add_subcommand("pretrain-fsr", "Pretrain the foreground semantics reconstructor on J_S");

    auto* target = app.add_subcommand("train-target", "Train the target model C|S");
    std::string target_name;
    std::string target_out;
    target->add_option("--name", target_name, "Run name under <root>/targets (default: the mode)");
    target->add_option("--out", target_out, "Explicit output directory (overrides --name)");

    auto* eval = app.add_subcommand("eval", "Evaluate a source or target checkpoint on the test split");
    std::string eval_ckpt;
    std::string eval_report;
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint to evaluate")->required();
    eval->add_option("--report", eval_report, "Report path stem (default: <checkpoint dir>/report)");

    auto* ablate = app.add_subcommand("ablate", "Run the ablation ladder over ablate.seeds seeds");
    int jobs = 0;
    std::vector<std::string> rung_names;
    ablate->add_option("--jobs", jobs, "Parallel run processes (default: ablate.jobs; 0 runs in-process)")
        ->check(CLI::NonNegativeNumber);
    ablate->add_option("--rungs", rung_names, "Subset of rungs by name (default: the whole ladder)")
        ->delimiter(',');

    auto* render = app.add_subcommand("render-figures", "Render PNG panels from a target run directory");
    std::string render_run;
    std::string render_out;
    render->add_option("--run", render_run, "Target run directory")->required();
    render->add_option("--out", render_out, "Output directory (default: <run>/figures)");

    auto* show = app.add_subcommand("show-config", "Print every config key with its default and meaning");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // --help reports success; every other parse failure is a usage error
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        const auto progress = progress_of(g);
        if (show->parsed()) {
            std::cout << RunConfig::documentation();
            return 0;
        }
        if (render->parsed()) {
            const fs::path out = render_out.empty() ? fs::path(render_run) / "figures" : fs::path(render_out);
            const auto report = fig::render_figures(render_run, out);
            for (const auto& p : report.written) {
                if (progress) {
                    progress("wrote " + p.string());
                }
            }
            if (!report.skipped.empty()) {
                std::string list;
                for (const auto& s : report.skipped) {
                    list += (list.empty() ? "" : ", ") + s;
                }
                std::cerr << "warning: skipped panels with missing tensors: " << list << std::endl;
            }
            return 0;
        }

        const auto config = build_config(g);
        const auto paths = paths_of(g);
        if (gen->parsed()) {
            pipe::gen_data(config, paths, progress);
        } else if (source->parsed()) {
            pipe::train_source_stage(config, paths, progress);
        } else if (invert->parsed()) {
            pipe::invert_stage(config, paths, {!no_corpus, !no_manual, !no_pseudo}, progress);
        } else if (fsr->parsed()) {
            pipe::pretrain_fsr_stage(config, paths, progress);
        } else if (target->parsed()) {
            fs::path out;
            if (!target_out.empty()) {
                out = target_out;
            } else {
                out = paths.targets() / (target_name.empty() ? config.target_spec().mode.str() : target_name);
            }
            pipe::train_target_stage(config, paths, out, progress);
        } else if (eval->parsed()) {
            const fs::path ckpt(eval_ckpt);
            const fs::path report = eval_report.empty() ? ckpt.parent_path() / "report" : fs::path(eval_report);
            pipe::eval_stage(config, paths, ckpt, report, progress);
        } else if (ablate->parsed()) {
            const auto ladder = pipe::ablation_ladder(config.get<double>("ablate.semi_fraction"));
            const auto rungs = select_rungs(ladder, rung_names);
            const int n = ablate->count("--jobs") ? jobs : config.get<int>("ablate.jobs");
            const auto launcher = n > 0 ? process_launcher(paths, n, progress) : pipe::Launcher{};
            const auto table = pipe::ablate(config, paths, rungs, launcher, progress);
            if (!progress) {
                std::cout << table.str();
            }
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "mac: " << e.what() << std::endl;
        return kExitUsage;
    } catch (const StateError& e) {
        std::cerr << "mac: " << e.what() << std::endl;
        return kExitState;
    } catch (const std::exception& e) {
        std::cerr << "mac: " << e.what() << std::endl;
        return kExitFailure;
    }
}
