#pragma once

// magdi-lab subcommands. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "magdi/checkpoint.hpp"
#include "magdi/eval.hpp"
#include "magdi/interaction_sim.hpp"
#include "magdi/mag.hpp"
#include "magdi/mag_io.hpp"
#include "magdi/trainer.hpp"

namespace magdi::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct GlobalConfig {
    std::optional<std::uint64_t> seed;
    int verbosity = 0;
    std::string out_dir;

    std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }

    /// Relative output paths land under --out-dir when one is given.
    fs::path output(const std::string& path) const {
        const fs::path p(path);
        return out_dir.empty() || p.is_absolute() ? p : fs::path(out_dir) / p;
    }
};

namespace detail {

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        row[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

inline std::optional<std::string> closest(std::string_view word, const std::vector<std::string>& candidates) {
    std::optional<std::string> best;
    std::size_t best_d = std::max<std::size_t>(2, word.size() / 3) + 1;
    for (const auto& c : candidates) {
        const std::size_t d = edit_distance(word, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

/// Every long flag and subcommand name reachable from `app`.
inline std::vector<std::string> known_words(const CLI::App& app) {
    std::vector<std::string> out;
    for (const CLI::Option* opt : app.get_options()) {
        for (const auto& name : opt->get_lnames()) {
            out.push_back("--" + name);
        }
    }
    for (const CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
        out.push_back(sub->get_name());
    }
    return out;
}

inline std::string suggestion(const CLI::App& app, const std::vector<std::string>& extras) {
    const CLI::App* active = &app;
    for (const CLI::App* sub : app.get_subcommands()) {
        active = sub;
    }
    auto words = known_words(*active);
    if (active != &app) {
        const auto top = known_words(app);
        words.insert(words.end(), top.begin(), top.end());
    }
    for (const auto& e : extras) {
        const std::string word = e.substr(0, e.find('='));
        if (auto hit = closest(word, words)) {
            return "did you mean '" + *hit + "'?";
        }
    }
    return {};
}

inline std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) {
            throw std::invalid_argument("not a number: '" + item + "'");
        }
        out.push_back(v);
    }
    return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

/// Writes `text` to `path` when given, otherwise to `out`.
inline void emit(const std::string& text, const std::optional<fs::path>& path, std::ostream& out) {
    if (path) {
        if (path->has_parent_path()) {
            fs::create_directories(path->parent_path());
        }
        write_text_file_atomic(*path, text);
    } else {
        out << text;
    }
}

/// Checkpoint directories for one compare entry: the directory itself for a
/// single seed, otherwise its seed-1 ... seed-N subdirectories.
inline std::vector<fs::path> seed_dirs(const fs::path& base, int seeds) {
    if (seeds == 1 && fs::exists(base / "manifest.json")) {
        return {base};
    }
    std::vector<fs::path> out;
    for (int s = 1; s <= seeds; ++s) {
        out.push_back(base / ("seed-" + std::to_string(s)));
    }
    return out;
}

class UsageError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace detail

/// Runs one command line. `args` excludes the program name.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"Structured distillation of multi-agent interaction graphs into a small student", "magdi-lab"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    GlobalConfig global;
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "Master seed for every stochastic choice");
    app.add_flag("-v,--verbose", global.verbosity, "Increase log verbosity (repeatable)");
    app.add_option("--out-dir", global.out_dir, "Directory that relative output paths resolve against");

    std::function<void()> action;

    // gen-corpus ----------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-corpus", "Simulate multi-agent discussions and write a graph corpus");
    std::string task = "modsum";
    std::size_t n = 1000;
    int agents = 3;
    int max_rounds = 3;
    std::string error_rates = "0.1,0.25,0.4";
    double follow = 0.8;
    std::string gen_out = "corpus.jsonl";
    bool instances_only = false;
    std::size_t id_offset = 0;
    gen->add_option("--task", task, "Task family")->check(CLI::IsMember({"modsum", "listmax"}))->capture_default_str();
    gen->add_option("--n", n, "Number of instances")->check(CLI::PositiveNumber)->capture_default_str();
    gen->add_option("--agents", agents, "Number of agents")->check(CLI::Range(2, 64))->capture_default_str();
    gen->add_option("--max-rounds", max_rounds, "Discussion rounds after round 0")
        ->check(CLI::Range(1, kMaxRounds))
        ->capture_default_str();
    gen->add_option("--error-rates", error_rates, "Per-agent step error rates, comma separated")->capture_default_str();
    gen->add_option("--follow", follow, "Probability of adopting the previous majority")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    gen->add_option("--out", gen_out, "Output file")->capture_default_str();
    gen->add_flag("--instances-only", instances_only, "Write question/gold lines only (held-out test sets)");
    gen->add_option("--id-offset", id_offset, "First instance index")->capture_default_str();
    gen->callback([&] {
        action = [&] {
            std::vector<double> rates;
            try {
                rates = detail::parse_double_list(error_rates);
            } catch (const std::exception& e) {
                throw detail::UsageError(std::string("--error-rates: ") + e.what());
            }
            if (rates.size() == 1) {
                rates.assign(static_cast<std::size_t>(agents), rates.front());
            }
            if (rates.size() != static_cast<std::size_t>(agents)) {
                throw detail::UsageError("--error-rates lists " + std::to_string(rates.size()) + " rates for " +
                                         std::to_string(agents) + " agents");
            }
            SimConfig c;
            c.family = parse_task_family(task);
            c.n_instances = n;
            c.max_rounds = max_rounds;
            c.profiles = SimConfig::make_profiles(rates, follow);
            c.seed = global.seed_or(7);
            c.id_offset = id_offset;
            const fs::path path = global.output(gen_out);
            if (path.has_parent_path()) {
                fs::create_directories(path.parent_path());
            }
            if (instances_only) {
                std::vector<InstanceRef> refs;
                for (const auto& t : gen_instances(c.family, n, c.seed, id_offset)) {
                    refs.push_back(t.ref());
                }
                save_test_set(path, refs);
                out << "wrote " << refs.size() << " instances to " << path.string() << "\n";
                return;
            }
            const GeneratedCorpus g = gen_corpus(c, path);
            out << format_stats(g.stats);
            out << "wrote " << g.corpus.size() << " graphs to " << path.string() << "\n";
        };
    });

    // stats ---------------------------------------------------------------------
    auto* stats = app.add_subcommand("stats", "Print the round/agent/structure breakdown of a corpus");
    std::string stats_in;
    bool abbreviate = false;
    stats->add_option("--in", stats_in, "Corpus file")->required();
    stats->add_flag("--abbrev", abbreviate, "Abbreviate large counts (2.1K)");
    stats->callback([&] {
        action = [&] { out << format_stats(corpus_stats(load_corpus(stats_in)), abbreviate); };
    });

    // filter --------------------------------------------------------------------
    auto* filter = app.add_subcommand("filter", "Keep graphs of the listed structure classes");
    std::string filter_in, filter_out, keep = "G0,G1,G2,G3";
    filter->add_option("--in", filter_in, "Corpus file")->required();
    filter->add_option("--out", filter_out, "Output corpus file")->required();
    filter->add_option("--keep", keep, "Structure classes to keep, e.g. G1,G2")->capture_default_str();
    filter->callback([&] {
        action = [&] {
            std::array<bool, kMaxRounds + 1> wanted{};
            for (const auto& s : detail::split_list(keep)) {
                const auto cls = std::find_if(wanted.begin(), wanted.end(), [&, k = 0](bool) mutable {
                    return std::string(to_string(static_cast<Structure>(k++))) == s;
                });
                if (cls == wanted.end()) {
                    throw detail::UsageError("--keep: unknown structure class '" + s + "' (known: G0, G1, G2, G3)");
                }
                *cls = true;
            }
            const Corpus kept =
                filter_corpus(load_corpus(filter_in), [&](Structure s) { return wanted[static_cast<std::size_t>(s)]; }, &err);
            const fs::path path = global.output(filter_out);
            if (path.has_parent_path()) {
                fs::create_directories(path.parent_path());
            }
            save_corpus(path, kept);
            out << "kept " << kept.size() << " graphs\n";
        };
    });

    // train ---------------------------------------------------------------------
    auto* trn = app.add_subcommand("train", "Distill a corpus into a student checkpoint");
    std::string config_path, level, edge_variant, train_out;
    std::vector<std::string> corpora;
    std::optional<int> epochs, batch, width, layers, heads, context;
    std::optional<double> lr, alpha, beta, gamma;
    trn->add_option("--config", config_path, "Training config JSON");
    trn->add_option("--corpus", corpora, "Corpus file (repeat for multi-task mixing)");
    trn->add_option("--level", level, "r0, cn, an or magdi")
        ->check(CLI::IsMember({"r0", "cn", "an", "magdi"}, CLI::ignore_case));
    trn->add_option("--edge-variant", edge_variant, "directed, undirected or fully-connected")
        ->check(CLI::IsMember({"directed", "undirected", "fully-connected"}, CLI::ignore_case));
    trn->add_option("--out", train_out, "Checkpoint directory")->required();
    trn->add_option("--epochs", epochs, "Override epochs")->check(CLI::PositiveNumber);
    trn->add_option("--batch", batch, "Override graphs per optimizer step")->check(CLI::PositiveNumber);
    trn->add_option("--lr", lr, "Override learning rate")->check(CLI::PositiveNumber);
    trn->add_option("--alpha", alpha, "Override the positive-chain weight")->check(CLI::Range(0.0, 1.0));
    trn->add_option("--beta", beta, "Override the margin weight")->check(CLI::Range(0.0, 1.0));
    trn->add_option("--gamma", gamma, "Override the node-classification weight")->check(CLI::Range(0.0, 1.0));
    trn->add_option("--width", width, "Override student width")->check(CLI::PositiveNumber);
    trn->add_option("--layers", layers, "Override student depth")->check(CLI::PositiveNumber);
    trn->add_option("--heads", heads, "Override attention heads")->check(CLI::PositiveNumber);
    trn->add_option("--context", context, "Override context length")->check(CLI::PositiveNumber);
    trn->callback([&] {
        action = [&] {
            TrainConfig c;
            if (!config_path.empty()) {
                try {
                    c = TrainConfig::from_json(ordered_json::parse(read_text_file(config_path)));
                } catch (const ordered_json::exception& e) {
                    throw detail::UsageError("--config: " + std::string(e.what()));
                }
            }
            if (!corpora.empty()) c.corpora = corpora;
            if (!level.empty()) c.level = parse_level(level);
            if (!edge_variant.empty()) c.edge_variant = parse_edge_variant(edge_variant);
            if (epochs) c.epochs = *epochs;
            if (batch) c.batch_size = *batch;
            if (lr) c.learning_rate = *lr;
            if (alpha) c.loss.alpha = *alpha;
            if (beta) c.loss.beta = *beta;
            if (gamma) c.loss.gamma = *gamma;
            if (width) c.student.width = *width;
            if (layers) c.student.layers = *layers;
            if (heads) c.student.heads = *heads;
            if (context) c.student.context = *context;
            if (global.seed) c.seed = *global.seed;
            if (c.corpora.empty()) {
                throw detail::UsageError("train: give at least one --corpus (or corpora in --config)");
            }
            try {
                c.check();
                StudentDims d = c.student;
                d.vocab = Vocab::task_default().size();
                d.check();
            } catch (const std::invalid_argument& e) {
                throw detail::UsageError(e.what());
            }
            const Corpus corpus = load_training_corpora(c);
            TrainOutputs o;
            o.dir = global.output(train_out);
            o.progress = global.verbosity > 0 ? &err : nullptr;
            const TrainOutcome r = train(c, corpus, o);
            const StepRecord& last = r.log.back();
            out << "trained " << to_string(c.level) << " for " << c.epochs << " epochs (" << r.log.size()
                << " steps), final L+ " << last.l_pos << ", checkpoint " << o.dir->string() << "\n";
        };
    });

    // eval ----------------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "Zero-shot accuracy of a checkpoint on a test set");
    std::string ckpt, test_path, eval_out;
    int sc_k = 0;
    double temperature = 0.7;
    int max_new = 64;
    ev->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
    ev->add_option("--test", test_path, "Test set (instance or graph lines)")->required();
    ev->add_option("--sc", sc_k, "Self-consistency samples (0 = greedy)")->check(CLI::NonNegativeNumber);
    ev->add_option("--temp", temperature, "Sampling temperature for --sc")->capture_default_str();
    ev->add_option("--max-new", max_new, "Generation cap in tokens")->check(CLI::PositiveNumber)->capture_default_str();
    ev->add_option("--out", eval_out, "Write the JSON report here instead of stdout");
    ev->callback([&] {
        action = [&] {
            const StudentModel m = load_student(ckpt);
            const auto test = load_test_set(test_path);
            const EvalReport r = sc_k > 0 ? self_consistency(m, test, sc_k, temperature, global.seed_or(7), max_new)
                                           : evaluate(m, test, max_new);
            const auto path = eval_out.empty() ? std::nullopt : std::optional<fs::path>(global.output(eval_out));
            detail::emit(r.to_json().dump(2) + "\n", path, out);
            if (path) {
                out << "accuracy " << r.accuracy << " over " << r.examples.size() << " examples\n";
            }
        };
    });

    // compare -------------------------------------------------------------------
    auto* cmp = app.add_subcommand("compare", "Per-seed accuracies, mean deltas and win counts across levels");
    std::string ckpts, cmp_test, cmp_out, names;
    int seeds = 1;
    cmp->add_option("--ckpts", ckpts, "Comma-separated checkpoint directories, one per level")->required();
    cmp->add_option("--names", names, "Comma-separated level names (default: directory names)");
    cmp->add_option("--test", cmp_test, "Test set")->required();
    cmp->add_option("--seeds", seeds, "Seeds per level; >1 reads <dir>/seed-1 ... seed-N")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmp->add_option("--out", cmp_out, "Write the JSON report here instead of stdout");
    cmp->callback([&] {
        action = [&] {
            const auto dirs = detail::split_list(ckpts);
            auto labels = detail::split_list(names);
            if (!labels.empty() && labels.size() != dirs.size()) {
                throw detail::UsageError("--names lists " + std::to_string(labels.size()) + " names for " +
                                         std::to_string(dirs.size()) + " checkpoints");
            }
            std::vector<std::pair<std::string, std::vector<fs::path>>> levels;
            for (std::size_t i = 0; i < dirs.size(); ++i) {
                const fs::path base(dirs[i]);
                const std::string name = labels.empty() ? base.filename().string() : labels[i];
                levels.emplace_back(name, detail::seed_dirs(base, seeds));
            }
            const CompareReport rep = compare_checkpoints(levels, load_test_set(cmp_test));
            const auto path = cmp_out.empty() ? std::nullopt : std::optional<fs::path>(global.output(cmp_out));
            detail::emit(rep.to_json().dump(2) + "\n", path, out);
            if (path) {
                out << rep.table();
            }
        };
    });

    // efficiency ----------------------------------------------------------------
    auto* eff = app.add_subcommand("efficiency", "Token reduction of a student against the simulated discussion");
    std::string eff_corpus, eff_report, eff_out;
    std::optional<double> reference, student_tokens;
    eff->add_option("--corpus", eff_corpus, "Corpus whose discussions set the reference cost");
    eff->add_option("--reference", reference, "Reference tokens per example, instead of --corpus");
    eff->add_option("--report", eff_report, "Eval report whose mean_generated_tokens is the student cost");
    eff->add_option("--student", student_tokens, "Student tokens per example, instead of --report");
    eff->add_option("--out", eff_out, "Write the JSON result here instead of stdout");
    eff->callback([&] {
        action = [&] {
            if (eff_corpus.empty() == !reference.has_value() || eff_report.empty() == !student_tokens.has_value()) {
                throw detail::UsageError("efficiency: give exactly one of --corpus/--reference and one of --report/--student");
            }
            const double ref = reference ? *reference
                                         : mean_discussion_token_cost(load_corpus(eff_corpus), Vocab::task_default());
            const double stu = student_tokens
                                   ? *student_tokens
                                   : EvalReport::from_json(ordered_json::parse(read_text_file(eff_report)))
                                         .mean_generated_tokens;
            const double factor = efficiency_report(ref, stu);
            ordered_json j{{"reference_tokens", ref}, {"student_tokens", stu}, {"reduction", factor}};
            const auto path = eff_out.empty() ? std::nullopt : std::optional<fs::path>(global.output(eff_out));
            detail::emit(j.dump(2) + "\n", path, out);
            if (path) {
                std::ostringstream s;
                s.setf(std::ios::fixed);
                s.precision(1);
                s << factor;
                out << "reduction " << s.str() << "x\n";
            }
        };
    });

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n";
        std::vector<std::string> extras = app.remaining();
        for (const CLI::App* sub : app.get_subcommands()) {
            const auto more = sub->remaining();
            extras.insert(extras.end(), more.begin(), more.end());
        }
        if (extras.empty()) {
            // An unknown first word is reported before any subcommand parses it.
            for (const auto& a : args) {
                if (!a.empty() && a[0] != '-') {
                    extras.push_back(a);
                    break;
                }
            }
        }
        if (const std::string hint = detail::suggestion(app, extras); !hint.empty()) {
            err << hint << "\n";
        }
        err << "run 'magdi-lab --help' for usage\n";
        return kExitUsage;
    }
    if (seed_opt->count() > 0) {
        global.seed = seed_value;
    }
    try {
        action();
    } catch (const detail::UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

inline int dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args);
}

}  // namespace magdi::cli
