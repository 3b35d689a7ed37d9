#pragma once

// Zero-shot evaluation, self-consistency voting, level comparison and
// generated-token efficiency.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "magdi/checkpoint.hpp"
#include "magdi/mag.hpp"
#include "magdi/mag_io.hpp"
#include "magdi/rng.hpp"
#include "magdi/student.hpp"

namespace magdi {

/// Anything that answers a question with a generated chain.
template <class G>
concept AnswerGenerator = requires(const G& g, std::string_view q, const GenerateOptions& o, Rng& rng) {
    { g.generate(q, o, rng) } -> std::convertible_to<Generation>;
};

struct ExampleRecord {
    std::string id;
    std::string predicted;
    std::string gold;
    bool correct = false;
    int tokens = 0;
};

struct EvalReport {
    std::string mode = "greedy";
    int k = 1;
    double temperature = 0.0;
    double accuracy = 0.0;
    double mean_generated_tokens = 0.0;
    std::vector<ExampleRecord> examples;

    /// Recomputes the summary fields from the per-example records.
    void finalize() {
        std::size_t correct = 0;
        double tokens = 0.0;
        for (const auto& e : examples) {
            correct += e.correct ? 1 : 0;
            tokens += e.tokens;
        }
        const double n = static_cast<double>(examples.size());
        accuracy = examples.empty() ? 0.0 : static_cast<double>(correct) / n;
        mean_generated_tokens = examples.empty() ? 0.0 : tokens / n;
    }

    ordered_json to_json() const {
        ordered_json ex = ordered_json::array();
        for (const auto& e : examples) {
            ex.push_back({{"id", e.id},
                          {"predicted", e.predicted},
                          {"gold", e.gold},
                          {"correct", e.correct},
                          {"tokens", e.tokens}});
        }
        return {{"mode", mode},
                {"k", k},
                {"temperature", temperature},
                {"n", examples.size()},
                {"accuracy", accuracy},
                {"mean_generated_tokens", mean_generated_tokens},
                {"examples", ex}};
    }

    static EvalReport from_json(const ordered_json& j) {
        EvalReport r;
        r.mode = j.at("mode").get<std::string>();
        r.k = j.at("k").get<int>();
        r.temperature = j.at("temperature").get<double>();
        for (const auto& e : j.at("examples")) {
            r.examples.push_back({e.at("id").get<std::string>(), e.at("predicted").get<std::string>(),
                                  e.at("gold").get<std::string>(), e.at("correct").get<bool>(),
                                  e.at("tokens").get<int>()});
        }
        r.finalize();
        return r;
    }
};

/// Greedy zero-shot evaluation from the question alone.
template <AnswerGenerator G>
EvalReport evaluate(const G& model, std::span<const InstanceRef> test, int max_new_tokens = 64) {
    EvalReport report;
    GenerateOptions opts;
    opts.max_new_tokens = max_new_tokens;
    Rng unused(0);
    for (const auto& inst : test) {
        const Generation g = model.generate(inst.question, opts, unused);
        report.examples.push_back({inst.id, g.answer, inst.gold, answers_match(g.answer, inst.gold), g.n_generated});
    }
    report.finalize();
    return report;
}

/// Index of the winning sample: the most frequent canonical answer, ties going
/// to whichever tied answer appears first.
inline std::size_t modal_vote(std::span<const std::string> answers) {
    if (answers.empty()) {
        throw std::invalid_argument("modal_vote: no answers");
    }
    std::map<std::string, int> counts;
    for (const auto& a : answers) {
        ++counts[canonicalize(a)];
    }
    int best = 0;
    for (const auto& [a, c] : counts) {
        best = std::max(best, c);
    }
    for (std::size_t i = 0; i < answers.size(); ++i) {
        if (counts[canonicalize(answers[i])] == best) {
            return i;
        }
    }
    return 0;
}

/// k sampled generations per example and a majority vote over their answers.
/// Token counts are summed over the k samples.
template <AnswerGenerator G>
EvalReport self_consistency(const G& model, std::span<const InstanceRef> test, int k, double temperature,
                            std::uint64_t seed, int max_new_tokens = 64) {
    if (k < 1) {
        throw std::invalid_argument("self_consistency: k must be at least 1");
    }
    EvalReport report;
    report.mode = "self_consistency";
    report.k = k;
    report.temperature = temperature;
    GenerateOptions opts;
    opts.mode = DecodeMode::Sample;
    opts.temperature = temperature;
    opts.max_new_tokens = max_new_tokens;
    const Rng root = Rng(seed).split("self_consistency");
    for (std::size_t i = 0; i < test.size(); ++i) {
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        std::vector<std::string> answers;
        int tokens = 0;
        for (int s = 0; s < k; ++s) {
            const Generation g = model.generate(test[i].question, opts, rng);
            answers.push_back(g.answer);
            tokens += g.n_generated;
        }
        const std::string& winner = answers[modal_vote(answers)];
        report.examples.push_back({test[i].id, winner, test[i].gold, answers_match(winner, test[i].gold), tokens});
    }
    report.finalize();
    return report;
}

// -----------------------------------------------------------------------------
// Level comparison
// -----------------------------------------------------------------------------

struct LevelResult {
    std::string name;
    std::vector<double> accuracies;  // one per seed
};

struct LevelSummary {
    std::string name;
    std::vector<double> accuracies;
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double max = 0.0;
    double delta = 0.0;  // mean minus the first level's mean
};

struct CompareReport {
    std::vector<LevelSummary> levels;
    std::vector<std::vector<int>> wins;  // wins[a][b]: seeds where level a beats level b
    std::vector<std::string> ordering;   // level names by ascending mean; ties keep input order

    int wins_of(std::string_view a, std::string_view b) const { return wins.at(index(a)).at(index(b)); }
    const LevelSummary& level(std::string_view name) const { return levels.at(index(name)); }

    std::size_t index(std::string_view name) const {
        for (std::size_t i = 0; i < levels.size(); ++i) {
            if (levels[i].name == name) {
                return i;
            }
        }
        throw std::out_of_range("CompareReport: no level '" + std::string(name) + "'");
    }

    ordered_json to_json() const {
        ordered_json j;
        ordered_json lv = ordered_json::array();
        for (const auto& l : levels) {
            lv.push_back({{"name", l.name},
                          {"accuracies", l.accuracies},
                          {"mean", l.mean},
                          {"stddev", l.stddev},
                          {"min", l.min},
                          {"max", l.max},
                          {"delta", l.delta}});
        }
        j["levels"] = lv;
        ordered_json w = ordered_json::object();
        for (std::size_t a = 0; a < levels.size(); ++a) {
            for (std::size_t b = 0; b < levels.size(); ++b) {
                if (a != b) {
                    w[levels[a].name + ">" + levels[b].name] = wins[a][b];
                }
            }
        }
        j["wins"] = w;
        j["ordering"] = ordering;
        return j;
    }

    std::string table() const {
        std::ostringstream out;
        out.setf(std::ios::fixed);
        out.precision(4);
        out << "level    mean     +/-      min      max      delta\n";
        for (const auto& l : levels) {
            out << l.name << std::string(l.name.size() < 8 ? 9 - l.name.size() : 1, ' ') << l.mean << "   "
                << l.stddev << "   " << l.min << "   " << l.max << "   " << (l.delta >= 0 ? "+" : "") << l.delta
                << "\n";
        }
        out << "ordering:";
        for (std::size_t i = 0; i < ordering.size(); ++i) {
            out << (i ? " < " : " ") << ordering[i];
        }
        out << "\n";
        return out.str();
    }
};

inline CompareReport compare_levels(const std::vector<LevelResult>& results) {
    if (results.empty()) {
        throw std::invalid_argument("compare_levels: no levels");
    }
    const std::size_t seeds = results.front().accuracies.size();
    for (const auto& r : results) {
        if (r.accuracies.size() != seeds || seeds == 0) {
            throw std::invalid_argument("compare_levels: every level needs the same non-zero number of seeds");
        }
    }
    CompareReport rep;
    for (const auto& r : results) {
        LevelSummary s;
        s.name = r.name;
        s.accuracies = r.accuracies;
        double sum = 0.0;
        for (double a : r.accuracies) {
            sum += a;
        }
        s.mean = sum / static_cast<double>(seeds);
        double var = 0.0;
        for (double a : r.accuracies) {
            var += (a - s.mean) * (a - s.mean);
        }
        s.stddev = seeds > 1 ? std::sqrt(var / static_cast<double>(seeds - 1)) : 0.0;
        s.min = *std::min_element(r.accuracies.begin(), r.accuracies.end());
        s.max = *std::max_element(r.accuracies.begin(), r.accuracies.end());
        rep.levels.push_back(std::move(s));
    }
    for (auto& s : rep.levels) {
        s.delta = s.mean - rep.levels.front().mean;
    }
    const std::size_t n = rep.levels.size();
    rep.wins.assign(n, std::vector<int>(n, 0));
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t s = 0; s < seeds; ++s) {
                rep.wins[a][b] += rep.levels[a].accuracies[s] > rep.levels[b].accuracies[s] ? 1 : 0;
            }
        }
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return rep.levels[a].mean < rep.levels[b].mean; });
    for (std::size_t i : idx) {
        rep.ordering.push_back(rep.levels[i].name);
    }
    return rep;
}

class IncompatibleCheckpoints : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint directories per level, one per seed. Every checkpoint must share
/// the vocabulary and dimensions of the first.
inline CompareReport compare_checkpoints(const std::vector<std::pair<std::string, std::vector<std::filesystem::path>>>& levels,
                                         std::span<const InstanceRef> test) {
    std::vector<LevelResult> results;
    std::optional<StudentModel> reference;
    for (const auto& [name, dirs] : levels) {
        LevelResult r{name, {}};
        for (const auto& dir : dirs) {
            const StudentModel m = load_student(dir);
            if (!reference) {
                reference = m;
            } else if (!(m.dims() == reference->dims()) || !(m.vocab() == reference->vocab())) {
                throw IncompatibleCheckpoints("checkpoint '" + dir.string() +
                                              "' differs in vocabulary or dimensions from the first checkpoint");
            }
            r.accuracies.push_back(evaluate(m, test).accuracy);
        }
        results.push_back(std::move(r));
    }
    return compare_levels(results);
}

// -----------------------------------------------------------------------------
// Efficiency
// -----------------------------------------------------------------------------

/// Tokens every agent emits across all rounds of one discussion: each chain
/// plus its end-of-sequence token.
inline double discussion_token_cost(const Mag& mag, const Vocab& vocab) {
    double total = 0.0;
    for (const auto& v : mag.nodes) {
        total += static_cast<double>(vocab.encode(v.reasoning).size() + 1);
    }
    return total;
}

inline double mean_discussion_token_cost(const Corpus& corpus, const Vocab& vocab) {
    if (corpus.empty()) {
        throw std::invalid_argument("mean_discussion_token_cost: empty corpus");
    }
    double total = 0.0;
    for (const auto& mag : corpus) {
        total += discussion_token_cost(mag, vocab);
    }
    return total / static_cast<double>(corpus.size());
}

/// Reduction factor reference / student.
inline double efficiency_report(double reference_cost, double student_mean_tokens) {
    if (!(reference_cost > 0.0)) {
        throw std::invalid_argument("efficiency_report: reference cost must be positive");
    }
    if (!(student_mean_tokens > 0.0)) {
        throw std::domain_error("efficiency_report: student generated no tokens; reduction is undefined");
    }
    return reference_cost / student_mean_tokens;
}

// -----------------------------------------------------------------------------
// Test sets
// -----------------------------------------------------------------------------

/// One instance per line, either {"id","question","gold"} or a full graph line.
inline std::vector<InstanceRef> parse_test_set(std::string_view text) {
    std::vector<InstanceRef> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const ordered_json j = ordered_json::parse(line);
            out.push_back(j.contains("instance") ? mag_from_json(j).instance : instance_from_json(j));
        } catch (const ordered_json::exception& e) {
            throw MagError(MagErrc::MalformedJson, "line " + std::to_string(lineno) + ": " + e.what());
        } catch (const MagError& e) {
            throw MagError(e.code(), "line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<InstanceRef> load_test_set(const std::filesystem::path& path) {
    return parse_test_set(read_text_file(path));
}

inline void save_test_set(const std::filesystem::path& path, std::span<const InstanceRef> instances) {
    std::string text;
    for (const auto& inst : instances) {
        text += instance_to_json(inst).dump() + "\n";
    }
    write_text_file_atomic(path, text);
}

}  // namespace magdi
