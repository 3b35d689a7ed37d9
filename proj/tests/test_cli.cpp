#include "magdi/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

namespace magdi::cli {
namespace {

namespace fs = std::filesystem;

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("magdi_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

TEST(Cli, HelpExitsZero) {
    const Outcome r = run({"--help"});
    EXPECT_EQ(r.code, kExitOk);
    for (const char* sub : {"gen-corpus", "stats", "filter", "train", "eval", "compare", "efficiency"}) {
        EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
    }
}

TEST(Cli, EverySubcommandHasHelp) {
    for (const char* sub : {"gen-corpus", "stats", "filter", "train", "eval", "compare", "efficiency"}) {
        const Outcome r = run({sub, "--help"});
        EXPECT_EQ(r.code, kExitOk) << sub;
        EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
    }
}

TEST(Cli, UnknownFlagIsUsageErrorWithSuggestion) {
    const Outcome r = run({"stats", "--inn", "x.jsonl"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("--in"), std::string::npos);
    EXPECT_NE(r.err.find("did you mean"), std::string::npos);
}

TEST(Cli, UnknownSubcommandSuggestsNearest) {
    const Outcome r = run({"stat", "--in", "x.jsonl"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("did you mean 'stats'"), std::string::npos) << r.err;
}

TEST(Cli, MissingSubcommandIsUsageError) { EXPECT_EQ(run({}).code, kExitUsage); }

TEST(Cli, BadEnumValueIsUsageError) {
    EXPECT_EQ(run({"gen-corpus", "--task", "sudoku"}).code, kExitUsage);
    EXPECT_EQ(run({"train", "--level", "level5", "--out", "x"}).code, kExitUsage);
}

TEST(Cli, MismatchedErrorRatesIsUsageError) {
    const fs::path d = scratch("rates");
    const Outcome r = run({"gen-corpus", "--agents", "3", "--error-rates", "0.1,0.2", "--out", (d / "c.jsonl").string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_FALSE(fs::exists(d / "c.jsonl"));
}

TEST(Cli, MissingInputIsRuntimeError) {
    const Outcome r = run({"stats", "--in", "/nonexistent/corpus.jsonl"});
    EXPECT_EQ(r.code, kExitRuntime);
    EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, GenCorpusThenStats) {
    const fs::path d = scratch("gen");
    const std::string corpus = (d / "corpus.jsonl").string();
    const Outcome g = run({"gen-corpus", "--task", "modsum", "--n", "40", "--agents", "3", "--max-rounds", "3",
                       "--error-rates", "0.1,0.25,0.4", "--follow", "0.8", "--seed", "7", "--out", corpus});
    ASSERT_EQ(g.code, kExitOk) << g.err;
    const Corpus loaded = load_corpus(corpus);
    ASSERT_EQ(loaded.size(), 40u);

    const Outcome s = run({"stats", "--in", corpus});
    ASSERT_EQ(s.code, kExitOk);
    EXPECT_EQ(s.out, format_stats(corpus_stats(loaded)));
    EXPECT_NE(s.out.find("Round (0 / 1 / 2 / 3): 120 / "), std::string::npos);
}

TEST(Cli, GlobalSeedAfterSubcommandAndOutDir) {
    const fs::path d = scratch("seed");
    ASSERT_EQ(run({"--seed", "3", "--out-dir", d.string(), "gen-corpus", "--n", "10", "--out", "a.jsonl"}).code, 0);
    ASSERT_EQ(run({"gen-corpus", "--n", "10", "--out", (d / "b.jsonl").string(), "--seed", "3"}).code, 0);
    ASSERT_EQ(run({"gen-corpus", "--n", "10", "--out", (d / "c.jsonl").string(), "--seed", "4"}).code, 0);
    EXPECT_EQ(slurp(d / "a.jsonl"), slurp(d / "b.jsonl"));
    EXPECT_NE(slurp(d / "a.jsonl"), slurp(d / "c.jsonl"));
}

TEST(Cli, InstancesOnlyWritesTestSet) {
    const fs::path d = scratch("inst");
    const fs::path p = d / "test.jsonl";
    ASSERT_EQ(run({"gen-corpus", "--n", "5", "--instances-only", "--id-offset", "1000000", "--out", p.string()}).code, 0);
    const auto test = load_test_set(p);
    ASSERT_EQ(test.size(), 5u);
    EXPECT_EQ(test.front().id, "modsum-1000000");
}

TEST(Cli, FilterKeepsRequestedClasses) {
    const fs::path d = scratch("filter");
    const std::string corpus = (d / "c.jsonl").string();
    ASSERT_EQ(run({"gen-corpus", "--n", "60", "--out", corpus}).code, 0);
    const std::string kept = (d / "g1.jsonl").string();
    ASSERT_EQ(run({"filter", "--in", corpus, "--out", kept, "--keep", "G1"}).code, 0);
    const Corpus all = load_corpus(corpus);
    const Corpus g1 = load_corpus(kept);
    EXPECT_EQ(g1.size(), corpus_stats(all).graphs_per_structure[1]);
    for (const auto& m : g1) {
        EXPECT_EQ(structure_class(m), Structure::G1);
    }
    EXPECT_EQ(run({"filter", "--in", corpus, "--out", kept, "--keep", "G7"}).code, kExitUsage);
}

TEST(Cli, TrainEvalCompareEfficiency) {
    const fs::path d = scratch("pipeline");
    const std::string corpus = (d / "corpus.jsonl").string();
    const std::string test = (d / "test.jsonl").string();
    ASSERT_EQ(run({"gen-corpus", "--n", "12", "--out", corpus}).code, 0);
    ASSERT_EQ(run({"gen-corpus", "--n", "6", "--instances-only", "--id-offset", "1000000", "--out", test}).code, 0);
    const std::vector<std::string> small{"--epochs", "1", "--batch", "4", "--width", "8", "--layers", "1",
                                         "--heads", "2", "--context", "64", "--lr", "0.01"};
    for (const char* level : {"r0", "magdi"}) {
        std::vector<std::string> args{"train", "--corpus", corpus, "--level", level, "--out", (d / level).string()};
        args.insert(args.end(), small.begin(), small.end());
        const Outcome t = run(args);
        ASSERT_EQ(t.code, kExitOk) << t.err;
        EXPECT_TRUE(fs::exists(d / level / "manifest.json"));
        EXPECT_TRUE(fs::exists(d / level / "train_log.jsonl"));
        EXPECT_TRUE(fs::exists(d / level / "epoch-1" / "manifest.json"));
    }

    const fs::path report = d / "eval.json";
    const Outcome e = run({"eval", "--ckpt", (d / "magdi").string(), "--test", test, "--max-new", "16", "--out",
                       report.string()});
    ASSERT_EQ(e.code, kExitOk) << e.err;
    const EvalReport rep = EvalReport::from_json(ordered_json::parse(slurp(report)));
    EXPECT_EQ(rep.examples.size(), 6u);
    EXPECT_EQ(rep.mode, "greedy");

    const Outcome sc = run({"eval", "--ckpt", (d / "magdi").string(), "--test", test, "--sc", "3", "--max-new", "16"});
    ASSERT_EQ(sc.code, kExitOk) << sc.err;
    EXPECT_EQ(ordered_json::parse(sc.out).at("k").get<int>(), 3);

    const Outcome c = run({"compare", "--ckpts", (d / "r0").string() + "," + (d / "magdi").string(), "--test", test});
    ASSERT_EQ(c.code, kExitOk) << c.err;
    const auto cj = ordered_json::parse(c.out);
    EXPECT_EQ(cj.at("levels").size(), 2u);
    EXPECT_EQ(cj.at("levels")[0].at("name").get<std::string>(), "r0");

    const Outcome f = run({"efficiency", "--corpus", corpus, "--report", report.string()});
    ASSERT_EQ(f.code, kExitOk) << f.err;
    const auto fj = ordered_json::parse(f.out);
    EXPECT_DOUBLE_EQ(fj.at("reduction").get<double>(),
                     fj.at("reference_tokens").get<double>() / fj.at("student_tokens").get<double>());
    EXPECT_DOUBLE_EQ(fj.at("student_tokens").get<double>(), rep.mean_generated_tokens);
}

TEST(Cli, EfficiencyFromNumbers) {
    const Outcome r = run({"efficiency", "--reference", "924.5", "--student", "107.5"});
    ASSERT_EQ(r.code, kExitOk);
    EXPECT_DOUBLE_EQ(ordered_json::parse(r.out).at("reduction").get<double>(), 8.6);
    EXPECT_EQ(run({"efficiency", "--reference", "924.5", "--student", "0"}).code, kExitRuntime);
    EXPECT_EQ(run({"efficiency", "--reference", "924.5"}).code, kExitUsage);
}

TEST(Cli, CompareReadsSeedDirectories) {
    const fs::path d = scratch("seeds");
    const std::string test = (d / "test.jsonl").string();
    ASSERT_EQ(run({"gen-corpus", "--n", "3", "--instances-only", "--out", test}).code, 0);
    for (const char* level : {"a", "b"}) {
        for (int s = 1; s <= 2; ++s) {
            const StudentModel m(Vocab::task_default(), StudentDims{0, 8, 2, 1, 64}, static_cast<std::uint64_t>(s));
            save_checkpoint(d / level / ("seed-" + std::to_string(s)), m, nullptr);
        }
    }
    const Outcome r = run({"compare", "--ckpts", (d / "a").string() + "," + (d / "b").string(), "--names", "x,y",
                       "--seeds", "2", "--test", test});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    const auto j = ordered_json::parse(r.out);
    EXPECT_EQ(j.at("levels")[1].at("name").get<std::string>(), "y");
    EXPECT_EQ(j.at("levels")[0].at("accuracies").size(), 2u);
    // Same seeds, same weights: no deltas.
    EXPECT_DOUBLE_EQ(j.at("levels")[1].at("delta").get<double>(), 0.0);
}

}  // namespace
}  // namespace magdi::cli
