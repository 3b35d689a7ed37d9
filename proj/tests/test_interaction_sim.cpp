#include "magdi/interaction_sim.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <regex>

namespace magdi {
namespace {

// Independent recomputation of a modsum chain: every step must be arithmetically
// valid and the final answer must equal the sum of operands mod 10.
bool modsum_chain_is_exact(const TaskInstance& inst, const std::string& chain) {
    static const std::regex add_step(R"((-?\d+)\+(-?\d+)=(-?\d+))");
    static const std::regex mod_step(R"((-?\d+) mod 10 = (-?\d+))");
    int expected_total = std::accumulate(inst.operands.begin(), inst.operands.end(), 0);
    int last = 0;
    for (auto it = std::sregex_iterator(chain.begin(), chain.end(), add_step); it != std::sregex_iterator(); ++it) {
        if (std::stoi((*it)[1]) + std::stoi((*it)[2]) != std::stoi((*it)[3])) {
            return false;
        }
        last = std::stoi((*it)[3]);
    }
    std::smatch m;
    if (!std::regex_search(chain, m, mod_step) || std::stoi(m[1]) != last || last != expected_total) {
        return false;
    }
    return std::stoi(m[2]) == expected_total % 10 && extract_answer(chain) == inst.gold;
}

// =============================================================================
// gen_instance
// =============================================================================

TEST(GenInstance, ModsumExample) {
    const TaskInstance inst = make_instance(TaskFamily::ModSum, {3, 5, 9}, "x");
    EXPECT_EQ(inst.question, "3+5+9 mod 10 = ?");
    EXPECT_EQ(inst.gold, "7");
    EXPECT_EQ(inst.oracle_chain, "3+5=8; 8+9=17; 17 mod 10 = 7; answer: 7");
}

TEST(GenInstance, ModsumZeros) {
    EXPECT_EQ(make_instance(TaskFamily::ModSum, {0, 0, 0}, "z").gold, "0");
}

TEST(GenInstance, ListmaxExample) {
    const TaskInstance inst = make_instance(TaskFamily::ListMax, {4, 9, 2}, "y");
    EXPECT_EQ(inst.gold, "9");
    EXPECT_EQ(inst.question, "max(4,9,2) = ?");
    EXPECT_EQ(inst.oracle_chain, "max(4,9)=9; max(9,2)=9; answer: 9");
}

TEST(GenInstance, OracleChainVerifiesByRecomputation) {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const TaskInstance m = gen_instance("modsum", rng, "m");
        EXPECT_TRUE(modsum_chain_is_exact(m, m.oracle_chain)) << m.oracle_chain;
        const TaskInstance l = gen_instance("listmax", rng, "l");
        EXPECT_EQ(std::stoi(l.gold), *std::max_element(l.operands.begin(), l.operands.end()));
        EXPECT_EQ(extract_answer(l.oracle_chain), l.gold);
    }
}

TEST(GenInstance, UnknownFamilyRejected) {
    Rng rng(1);
    EXPECT_THROW(gen_instance("sudoku", rng, "q"), std::invalid_argument);
}

// =============================================================================
// agent_answer
// =============================================================================

TEST(AgentAnswer, ZeroErrorRateAlwaysGold) {
    Rng rng(3);
    const AgentProfile perfect{0, 0.0, 0.5};
    for (int i = 0; i < 100; ++i) {
        const TaskInstance inst = gen_instance(i % 2 ? TaskFamily::ModSum : TaskFamily::ListMax, rng, "a");
        EXPECT_EQ(agent_answer(perfect, inst, {}, rng).answer, inst.gold);
        const std::vector<AgentOutput> prior{{inst.oracle_chain, inst.gold}, {inst.oracle_chain, inst.gold}};
        EXPECT_EQ(agent_answer(perfect, inst, prior, rng).answer, inst.gold);
    }
}

TEST(AgentAnswer, FullErrorRateNeverGold) {
    Rng rng(4);
    const AgentProfile broken{0, 1.0, 0.0};
    for (int i = 0; i < 500; ++i) {
        const TaskInstance inst = gen_instance(TaskFamily::ModSum, rng, "b");
        const AgentOutput out = agent_answer(broken, inst, {}, rng);
        EXPECT_NE(canonicalize(out.answer), canonicalize(inst.gold)) << out.reasoning;
        EXPECT_EQ(extract_answer(out.reasoning), out.answer);
    }
}

TEST(AgentAnswer, SeededRunsAreByteIdentical) {
    auto run = [] {
        const AgentProfile p{0, 0.3, 0.8};
        std::string all;
        for (std::size_t i = 0; i < 50; ++i) {
            const TaskInstance inst = nth_instance(TaskFamily::ModSum, 7, i);
            Rng rng = instance_rng(7, i).split("turn");
            const AgentOutput first = agent_answer(p, inst, {}, rng);
            const std::vector<AgentOutput> prior{first, {inst.oracle_chain, inst.gold}};
            all += first.reasoning + "|" + agent_answer(p, inst, prior, rng).reasoning + "\n";
        }
        return all;
    };
    EXPECT_EQ(run(), run());
}

TEST(AgentAnswer, CorruptionOffsetsStayWithinRange) {
    Rng rng(8);
    const TaskInstance inst = make_instance(TaskFamily::ModSum, {3, 5, 9}, "c");
    static const std::regex first_step(R"(^3\+5=(-?\d+);)");
    for (int i = 0; i < 300; ++i) {
        const AgentOutput out = solve_chain(inst, 1.0, rng);
        std::smatch m;
        ASSERT_TRUE(std::regex_search(out.reasoning, m, first_step)) << out.reasoning;
        const int delta = std::stoi(m[1]) - 8;
        EXPECT_NE(delta, 0);
        EXPECT_LE(std::abs(delta), 3);
    }
}

TEST(Majority, TiesGoToLexicographicallySmallest) {
    const std::vector<AgentOutput> tie{{"", "9"}, {"", "3"}, {"", "5"}};
    EXPECT_EQ(majority_answer(tie), "3");
    const std::vector<AgentOutput> two{{"", "9"}, {"", "3"}, {"", "9."}};
    EXPECT_EQ(majority_answer(two), "9");
}

// =============================================================================
// run_discussion
// =============================================================================

struct ConstantAgent {
    std::string answer;
    AgentOutput respond(const TaskInstance&, std::span<const AgentOutput>, Rng&) const {
        return {"answer: " + answer, answer};
    }
};

TEST(RunDiscussion, PerfectAgentsAlwaysG0) {
    const std::vector<AgentProfile> profiles = SimConfig::make_profiles({0.0, 0.0, 0.0}, 0.8);
    for (std::size_t i = 0; i < 50; ++i) {
        const Mag mag = run_discussion(nth_instance(TaskFamily::ModSum, 1, i), profiles, 3, instance_rng(1, i));
        EXPECT_EQ(structure_class(mag), Structure::G0);
        for (const auto& v : mag.nodes) {
            EXPECT_EQ(v.label, 1);
        }
    }
}

TEST(RunDiscussion, DistinctConstantAgentsNeverConverge) {
    const std::vector<ConstantAgent> agents{{"1"}, {"2"}, {"3"}};
    const Mag mag = run_discussion<ConstantAgent>(nth_instance(TaskFamily::ModSum, 1, 0), agents, 3, Rng(1));
    EXPECT_EQ(structure_class(mag), Structure::G3);
    EXPECT_EQ(mag.nodes.size(), 12u);
    EXPECT_NO_THROW(validate(mag));
}

TEST(RunDiscussion, StructureCountsDominatedByLowRounds) {
    SimConfig config = SimConfig::defaults();
    config.n_instances = 1000;
    config.seed = 11;
    const GeneratedCorpus g = gen_corpus(config);
    const auto& s = g.stats.graphs_per_structure;
    EXPECT_EQ(g.stats.graph_count(), 1000u);
    EXPECT_GT(s[0] + s[1], s[2] + s[3]);
    // Fewer nodes in later rounds.
    EXPECT_GE(g.stats.nodes_per_round[0], g.stats.nodes_per_round[1]);
    EXPECT_GE(g.stats.nodes_per_round[1], g.stats.nodes_per_round[2]);
    EXPECT_GE(g.stats.nodes_per_round[2], g.stats.nodes_per_round[3]);
}

TEST(RunDiscussion, HarderTeachersDiscussLonger) {
    double previous = -1.0;
    for (double e : {0.1, 0.25, 0.4}) {
        SimConfig config;
        config.profiles = SimConfig::make_profiles({e, e, e}, 0.8);
        config.n_instances = 500;
        config.seed = 21;
        const GeneratedCorpus g = gen_corpus(config);
        double total = 0.0;
        for (const auto& mag : g.corpus) {
            total += static_cast<double>(structure_class(mag));
        }
        const double mean_class = total / 500.0;
        EXPECT_GE(mean_class, previous) << "error rate " << e;
        previous = mean_class;
    }
}

TEST(RunDiscussion, TerminatesWithinCapAndGraphsAreValid) {
    SimConfig config = SimConfig::defaults();
    config.n_instances = 300;
    config.max_rounds = 2;
    for (const auto& mag : gen_corpus(config).corpus) {
        EXPECT_LE(mag.n_rounds, 2);
        EXPECT_NO_THROW(validate(mag));
        // Only the final round may be unanimous.
        for (int j = 0; j < mag.n_rounds; ++j) {
            std::vector<AgentOutput> round;
            for (int i = 0; i < mag.n_agents; ++i) {
                round.push_back({mag.node(i, j).reasoning, mag.node(i, j).answer});
            }
            EXPECT_FALSE(unanimous(round));
        }
    }
}

// =============================================================================
// gen_corpus
// =============================================================================

TEST(GenCorpus, LabelsSoundAndRoundFormulaHolds) {
    SimConfig config = SimConfig::defaults();
    config.n_instances = 400;
    config.family = TaskFamily::ListMax;
    const GeneratedCorpus g = gen_corpus(config);
    for (const auto& mag : g.corpus) {
        for (const auto& v : mag.nodes) {
            const bool correct = canonicalize(v.answer) == canonicalize(mag.instance.gold);
            EXPECT_EQ(v.label, correct ? 1 : 0);
        }
    }
    for (std::size_t j = 1; j < 4; ++j) {
        std::size_t graphs = 0;
        for (std::size_t k = j; k < 4; ++k) {
            graphs += g.stats.graphs_per_structure[k];
        }
        EXPECT_EQ(g.stats.nodes_per_round[j], 3 * graphs);
    }
}

TEST(GenCorpus, SingleInstanceIsOneLine) {
    SimConfig config = SimConfig::defaults();
    config.n_instances = 1;
    const auto path = std::filesystem::temp_directory_path() / "magdi_one.jsonl";
    gen_corpus(config, path);
    const std::string text = read_text_file(path);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
    std::filesystem::remove(path);
}

TEST(GenCorpus, SameSeedByteIdentical) {
    SimConfig config = SimConfig::defaults();
    config.n_instances = 200;
    config.seed = 7;
    EXPECT_EQ(serialize_corpus(gen_corpus(config).corpus), serialize_corpus(gen_corpus(config).corpus));
    SimConfig other = config;
    other.seed = 8;
    EXPECT_NE(serialize_corpus(gen_corpus(config).corpus), serialize_corpus(gen_corpus(other).corpus));
}

TEST(GenCorpus, InvalidConfigRejected) {
    SimConfig config = SimConfig::defaults();
    config.max_rounds = 4;
    EXPECT_THROW(gen_corpus(config), std::invalid_argument);
    config = SimConfig::defaults();
    config.profiles.resize(1);
    EXPECT_THROW(gen_corpus(config), std::invalid_argument);
    config = SimConfig::defaults();
    config.profiles[0].follow_rate = 1.5;
    EXPECT_THROW(gen_corpus(config), std::invalid_argument);
}

}  // namespace
}  // namespace magdi
