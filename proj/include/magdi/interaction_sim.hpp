#pragma once

// Scripted multi-round discussion among teacher agents. Round 0 answers are
// independent; in every later round each agent sees all previous-round
// outputs. The discussion stops at the first unanimous round or after
// max_rounds post-initial rounds.

#include <concepts>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "magdi/mag.hpp"
#include "magdi/mag_io.hpp"
#include "magdi/rng.hpp"
#include "magdi/tasks.hpp"

namespace magdi {

struct AgentProfile {
    int agent_id = 0;
    double step_error_rate = 0.0;
    double follow_rate = 0.0;

    void check() const {
        if (step_error_rate < 0.0 || step_error_rate > 1.0 || follow_rate < 0.0 || follow_rate > 1.0) {
            throw std::invalid_argument("AgentProfile " + std::to_string(agent_id) + ": rates must lie in [0, 1]");
        }
    }
};

/// Anything that can take a discussion turn.
template <class A>
concept DiscussionAgent = requires(const A& a, const TaskInstance& inst, std::span<const AgentOutput> prior, Rng& rng) {
    { a.respond(inst, prior, rng) } -> std::convertible_to<AgentOutput>;
};

/// Most frequent canonical answer; ties go to the lexicographically smallest.
inline std::string majority_answer(std::span<const AgentOutput> outputs) {
    std::map<std::string, int> counts;
    for (const auto& o : outputs) {
        ++counts[canonicalize(o.answer)];
    }
    std::string best;
    int best_count = 0;
    for (const auto& [answer, count] : counts) {
        if (count > best_count) {
            best = answer;
            best_count = count;
        }
    }
    return best;
}

inline bool unanimous(std::span<const AgentOutput> outputs) {
    for (const auto& o : outputs) {
        if (!answers_match(o.answer, outputs.front().answer)) {
            return false;
        }
    }
    return true;
}

/// Teacher stand-in driven by an AgentProfile.
///
/// With probability follow_rate (rounds >= 1) the agent adopts the reasoning of
/// the first previous-round agent that gave the majority answer; otherwise it
/// re-solves the instance with its own step error rate.
class ScriptedAgent {
   public:
    explicit ScriptedAgent(AgentProfile profile) : profile_(profile) { profile_.check(); }

    const AgentProfile& profile() const { return profile_; }

    AgentOutput respond(const TaskInstance& inst, std::span<const AgentOutput> prior, Rng& rng) const {
        if (!prior.empty() && rng.bernoulli(profile_.follow_rate)) {
            const std::string target = majority_answer(prior);
            for (const auto& o : prior) {
                if (canonicalize(o.answer) == target) {
                    return o;
                }
            }
        }
        return solve_chain(inst, profile_.step_error_rate, rng);
    }

   private:
    AgentProfile profile_;
};

inline AgentOutput agent_answer(const AgentProfile& profile, const TaskInstance& inst,
                                std::span<const AgentOutput> prior, Rng& rng) {
    return ScriptedAgent(profile).respond(inst, prior, rng);
}

template <DiscussionAgent Agent>
Mag run_discussion(const TaskInstance& inst, std::span<const Agent> agents, int max_rounds, const Rng& rng) {
    if (agents.size() < 2) {
        throw std::invalid_argument("run_discussion: at least two agents are required");
    }
    if (max_rounds < 0 || max_rounds > kMaxRounds) {
        throw std::invalid_argument("run_discussion: max_rounds must lie in [0, 3]");
    }
    std::vector<std::vector<AgentOutput>> rounds;
    for (int j = 0; j <= max_rounds; ++j) {
        const std::span<const AgentOutput> prior =
            rounds.empty() ? std::span<const AgentOutput>{} : std::span<const AgentOutput>(rounds.back());
        std::vector<AgentOutput> current;
        for (std::size_t i = 0; i < agents.size(); ++i) {
            Rng turn_rng = rng.split(static_cast<std::uint64_t>(j)).split(static_cast<std::uint64_t>(i));
            current.push_back(agents[i].respond(inst, prior, turn_rng));
        }
        rounds.push_back(std::move(current));
        if (unanimous(rounds.back())) {
            break;
        }
    }
    return build_mag(inst.ref(), rounds);
}

inline Mag run_discussion(const TaskInstance& inst, std::span<const AgentProfile> profiles, int max_rounds,
                          const Rng& rng) {
    std::vector<ScriptedAgent> agents(profiles.begin(), profiles.end());
    return run_discussion<ScriptedAgent>(inst, agents, max_rounds, rng);
}

struct SimConfig {
    TaskFamily family = TaskFamily::ModSum;
    std::size_t n_instances = 1000;
    int max_rounds = 3;
    std::vector<AgentProfile> profiles;
    std::uint64_t seed = 7;
    std::size_t id_offset = 0;

    /// Three agents with the default error-rate spread.
    static SimConfig defaults() {
        SimConfig c;
        c.profiles = make_profiles({0.1, 0.25, 0.4}, 0.8);
        return c;
    }

    static std::vector<AgentProfile> make_profiles(const std::vector<double>& error_rates, double follow) {
        std::vector<AgentProfile> out;
        for (std::size_t i = 0; i < error_rates.size(); ++i) {
            out.push_back({static_cast<int>(i), error_rates[i], follow});
        }
        return out;
    }

    void check() const {
        if (profiles.size() < 2) {
            throw std::invalid_argument("SimConfig: at least two agents are required");
        }
        if (max_rounds < 1 || max_rounds > kMaxRounds) {
            throw std::invalid_argument("SimConfig: max_rounds must lie in [1, 3]");
        }
        for (const auto& p : profiles) {
            p.check();
        }
    }
};

inline std::string instance_id(TaskFamily family, std::size_t index) {
    std::string digits = std::to_string(index);
    if (digits.size() < 6) {
        digits.insert(0, 6 - digits.size(), '0');
    }
    return std::string(to_string(family)) + "-" + digits;
}

/// Generator for instance `index`; a pure function of (seed, index).
inline Rng instance_rng(std::uint64_t seed, std::size_t index) {
    return Rng(seed).split("interaction_sim").split(static_cast<std::uint64_t>(index));
}

inline TaskInstance nth_instance(TaskFamily family, std::uint64_t seed, std::size_t index) {
    Rng rng = instance_rng(seed, index).split("instance");
    return gen_instance(family, rng, instance_id(family, index));
}

/// Instances only (no discussion); used for held-out test sets.
inline std::vector<TaskInstance> gen_instances(TaskFamily family, std::size_t n, std::uint64_t seed,
                                               std::size_t id_offset) {
    std::vector<TaskInstance> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(nth_instance(family, seed, id_offset + i));
    }
    return out;
}

struct GeneratedCorpus {
    Corpus corpus;
    CorpusStats stats;
};

inline GeneratedCorpus gen_corpus(const SimConfig& config) {
    config.check();
    GeneratedCorpus out;
    for (std::size_t i = 0; i < config.n_instances; ++i) {
        const std::size_t index = config.id_offset + i;
        const TaskInstance inst = nth_instance(config.family, config.seed, index);
        const Rng discussion = instance_rng(config.seed, index).split("discussion");
        out.corpus.push_back(run_discussion(inst, std::span<const AgentProfile>(config.profiles), config.max_rounds,
                                            discussion));
    }
    out.stats = corpus_stats(out.corpus);
    return out;
}

inline GeneratedCorpus gen_corpus(const SimConfig& config, const std::filesystem::path& out_path) {
    GeneratedCorpus g = gen_corpus(config);
    save_corpus(out_path, g.corpus);
    return g;
}

}  // namespace magdi
