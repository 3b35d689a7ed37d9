#pragma once

// Multi-agent interaction graphs: one node per (agent, round) output, with an
// edge from every round-(j-1) node to every round-j node.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "magdi/tensor.hpp"

namespace magdi {

/// Maximum number of post-initial rounds the discussion protocol supports.
inline constexpr int kMaxRounds = 3;

enum class MagErrc {
    MalformedJson,
    Schema,
    MissingNode,
    DuplicateNode,
    NodeIdMismatch,
    AgentOutOfRange,
    Acyclicity,
    MissingEdge,
    DuplicateEdge,
    LabelMismatch,
    UnsupportedStructure,
    MixedAgentCounts,
    Io,
};

inline std::string_view to_string(MagErrc code) {
    switch (code) {
        case MagErrc::MalformedJson: return "malformed-json";
        case MagErrc::Schema: return "schema-violation";
        case MagErrc::MissingNode: return "missing-node";
        case MagErrc::DuplicateNode: return "duplicate-node";
        case MagErrc::NodeIdMismatch: return "node-id-mismatch";
        case MagErrc::AgentOutOfRange: return "agent-out-of-range";
        case MagErrc::Acyclicity: return "acyclicity";
        case MagErrc::MissingEdge: return "missing-edge";
        case MagErrc::DuplicateEdge: return "duplicate-edge";
        case MagErrc::LabelMismatch: return "label-mismatch";
        case MagErrc::UnsupportedStructure: return "unsupported-structure";
        case MagErrc::MixedAgentCounts: return "mixed-agent-counts";
        case MagErrc::Io: return "io";
    }
    return "unknown";
}

class MagError : public std::runtime_error {
   public:
    MagError(MagErrc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
    MagErrc code() const { return code_; }

   private:
    MagErrc code_;
};

/// Answer normalization used for labels and consensus: trim, lowercase,
/// strip trailing punctuation.
inline std::string canonicalize(std::string_view answer) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    auto is_punct = [](unsigned char c) { return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':'; };
    std::size_t b = 0, e = answer.size();
    while (b < e && is_space(static_cast<unsigned char>(answer[b]))) {
        ++b;
    }
    while (e > b && (is_space(static_cast<unsigned char>(answer[e - 1])) || is_punct(static_cast<unsigned char>(answer[e - 1])))) {
        --e;
    }
    std::string out(answer.substr(b, e - b));
    for (char& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline bool answers_match(std::string_view a, std::string_view b) { return canonicalize(a) == canonicalize(b); }

/// The part of a task instance a graph refers to.
struct InstanceRef {
    std::string id;
    std::string question;
    std::string gold;

    bool operator==(const InstanceRef&) const = default;
};

/// One agent's output in one round.
struct AgentOutput {
    std::string reasoning;
    std::string answer;

    bool operator==(const AgentOutput&) const = default;
};

struct NodeRecord {
    int id = 0;
    int agent = 0;
    int round = 0;
    std::string reasoning;
    std::string answer;
    int label = 0;

    bool operator==(const NodeRecord&) const = default;
};

using Edge = std::pair<int, int>;

struct Mag {
    InstanceRef instance;
    int n_agents = 0;
    int n_rounds = 0;
    std::vector<NodeRecord> nodes;  // ordered by id
    std::vector<Edge> edges;        // (source id, target id)

    std::size_t node_count() const { return nodes.size(); }
    const NodeRecord& node(int agent, int round) const {
        return nodes.at(static_cast<std::size_t>(agent + n_agents * round));
    }

    bool operator==(const Mag&) const = default;
};

using Corpus = std::vector<Mag>;

inline int node_id(int agent, int round, int n_agents) { return agent + n_agents * round; }

/// Checks every structural invariant of a graph; throws MagError on the first violation.
inline void validate(const Mag& mag) {
    const int n = mag.n_agents;
    if (n < 1) {
        throw MagError(MagErrc::Schema, "n_agents must be positive");
    }
    if (mag.nodes.empty()) {
        throw MagError(MagErrc::MissingNode, "graph has no nodes");
    }
    int max_round = 0;
    std::set<std::pair<int, int>> seen;
    for (const auto& v : mag.nodes) {
        if (v.agent < 0 || v.agent >= n) {
            throw MagError(MagErrc::AgentOutOfRange, "node " + std::to_string(v.id) + " has agent " + std::to_string(v.agent));
        }
        if (v.round < 0) {
            throw MagError(MagErrc::Schema, "node " + std::to_string(v.id) + " has negative round");
        }
        if (!seen.insert({v.agent, v.round}).second) {
            throw MagError(MagErrc::DuplicateNode, "duplicate (agent " + std::to_string(v.agent) + ", round " +
                                                       std::to_string(v.round) + ")");
        }
        if (v.label != 0 && v.label != 1) {
            throw MagError(MagErrc::Schema, "node " + std::to_string(v.id) + " label must be 0 or 1");
        }
        if ((v.label == 1) != answers_match(v.answer, mag.instance.gold)) {
            throw MagError(MagErrc::LabelMismatch, "node " + std::to_string(v.id) + " label disagrees with gold answer");
        }
        max_round = std::max(max_round, v.round);
    }
    if (max_round != mag.n_rounds) {
        throw MagError(MagErrc::Schema, "n_rounds " + std::to_string(mag.n_rounds) + " but last round present is " +
                                            std::to_string(max_round));
    }
    const std::size_t expected_nodes = static_cast<std::size_t>(n) * static_cast<std::size_t>(max_round + 1);
    if (mag.nodes.size() != expected_nodes) {
        throw MagError(MagErrc::MissingNode, "expected " + std::to_string(expected_nodes) + " nodes, found " +
                                                 std::to_string(mag.nodes.size()));
    }
    for (std::size_t i = 0; i < mag.nodes.size(); ++i) {
        const auto& v = mag.nodes[i];
        if (v.id != node_id(v.agent, v.round, n) || static_cast<std::size_t>(v.id) != i) {
            throw MagError(MagErrc::NodeIdMismatch, "node at position " + std::to_string(i) + " has id " +
                                                        std::to_string(v.id) + " for (agent " + std::to_string(v.agent) +
                                                        ", round " + std::to_string(v.round) + ")");
        }
    }
    std::set<Edge> edge_set;
    for (const auto& [s, t] : mag.edges) {
        const int count = static_cast<int>(mag.nodes.size());
        if (s < 0 || t < 0 || s >= count || t >= count) {
            throw MagError(MagErrc::Schema, "edge references unknown node");
        }
        const int rs = mag.nodes[static_cast<std::size_t>(s)].round;
        const int rt = mag.nodes[static_cast<std::size_t>(t)].round;
        if (rt != rs + 1) {
            throw MagError(MagErrc::Acyclicity, "edge " + std::to_string(s) + "->" + std::to_string(t) + " goes from round " +
                                                    std::to_string(rs) + " to round " + std::to_string(rt));
        }
        if (!edge_set.insert({s, t}).second) {
            throw MagError(MagErrc::DuplicateEdge, "edge " + std::to_string(s) + "->" + std::to_string(t));
        }
    }
    const std::size_t expected_edges =
        static_cast<std::size_t>(n) * static_cast<std::size_t>(n) * static_cast<std::size_t>(max_round);
    if (edge_set.size() != expected_edges) {
        throw MagError(MagErrc::MissingEdge, "expected " + std::to_string(expected_edges) + " edges, found " +
                                                 std::to_string(edge_set.size()));
    }
}

/// Builds a graph from per-round agent outputs. Round j's outputs are
/// conditioned on all of round j-1, so every consecutive-round pair is linked.
inline Mag build_mag(const InstanceRef& instance, const std::vector<std::vector<AgentOutput>>& per_round_outputs) {
    if (per_round_outputs.empty() || per_round_outputs.front().empty()) {
        throw MagError(MagErrc::MissingNode, "round 0 outputs are required");
    }
    Mag mag;
    mag.instance = instance;
    mag.n_agents = static_cast<int>(per_round_outputs.front().size());
    mag.n_rounds = static_cast<int>(per_round_outputs.size()) - 1;
    for (std::size_t j = 0; j < per_round_outputs.size(); ++j) {
        const auto& round = per_round_outputs[j];
        if (round.size() != static_cast<std::size_t>(mag.n_agents)) {
            throw MagError(MagErrc::MissingNode, "round " + std::to_string(j) + " has " + std::to_string(round.size()) +
                                                     " outputs for " + std::to_string(mag.n_agents) + " agents");
        }
        for (std::size_t i = 0; i < round.size(); ++i) {
            NodeRecord v;
            v.agent = static_cast<int>(i);
            v.round = static_cast<int>(j);
            v.id = node_id(v.agent, v.round, mag.n_agents);
            v.reasoning = round[i].reasoning;
            v.answer = round[i].answer;
            v.label = answers_match(v.answer, instance.gold) ? 1 : 0;
            mag.nodes.push_back(std::move(v));
        }
    }
    for (int j = 1; j <= mag.n_rounds; ++j) {
        for (int s = 0; s < mag.n_agents; ++s) {
            for (int t = 0; t < mag.n_agents; ++t) {
                mag.edges.emplace_back(node_id(s, j - 1, mag.n_agents), node_id(t, j, mag.n_agents));
            }
        }
    }
    return mag;
}

/// An output tagged with its (agent, round) position.
struct AgentTurn {
    int agent = 0;
    int round = 0;
    AgentOutput output;
};

/// Builds a graph from loosely ordered turns; rejects duplicates and gaps.
inline Mag build_mag(const InstanceRef& instance, int n_agents, const std::vector<AgentTurn>& turns) {
    if (n_agents < 1) {
        throw MagError(MagErrc::Schema, "n_agents must be positive");
    }
    int max_round = -1;
    for (const auto& t : turns) {
        if (t.agent < 0 || t.agent >= n_agents) {
            throw MagError(MagErrc::AgentOutOfRange, "turn for agent " + std::to_string(t.agent));
        }
        if (t.round < 0) {
            throw MagError(MagErrc::Schema, "turn with negative round");
        }
        max_round = std::max(max_round, t.round);
    }
    if (max_round < 0) {
        throw MagError(MagErrc::MissingNode, "round 0 outputs are required");
    }
    std::vector<std::vector<AgentOutput>> rounds(static_cast<std::size_t>(max_round + 1),
                                                 std::vector<AgentOutput>(static_cast<std::size_t>(n_agents)));
    std::vector<std::vector<bool>> filled(rounds.size(), std::vector<bool>(static_cast<std::size_t>(n_agents), false));
    for (const auto& t : turns) {
        const bool taken = filled[static_cast<std::size_t>(t.round)][static_cast<std::size_t>(t.agent)];
        if (taken) {
            throw MagError(MagErrc::DuplicateNode, "duplicate (agent " + std::to_string(t.agent) + ", round " +
                                                       std::to_string(t.round) + ")");
        }
        filled[static_cast<std::size_t>(t.round)][static_cast<std::size_t>(t.agent)] = true;
        rounds[static_cast<std::size_t>(t.round)][static_cast<std::size_t>(t.agent)] = t.output;
    }
    for (std::size_t j = 0; j < filled.size(); ++j) {
        for (std::size_t i = 0; i < filled[j].size(); ++i) {
            if (!filled[j][i]) {
                throw MagError(MagErrc::MissingNode, "agent " + std::to_string(i) + " has no output in round " +
                                                         std::to_string(j));
            }
        }
    }
    return build_mag(instance, rounds);
}

// ---------------------------------------------------------------------------
// Structure classes and corpus statistics

enum class Structure { G0 = 0, G1 = 1, G2 = 2, G3 = 3 };

inline std::string_view to_string(Structure s) {
    static constexpr std::array<std::string_view, 4> names{"G0", "G1", "G2", "G3"};
    return names[static_cast<std::size_t>(s)];
}

inline Structure structure_class(const Mag& mag) {
    if (mag.n_rounds < 0 || mag.n_rounds > kMaxRounds) {
        throw MagError(MagErrc::UnsupportedStructure,
                       "graph with " + std::to_string(mag.n_rounds) + " rounds exceeds the 3-round protocol");
    }
    return static_cast<Structure>(mag.n_rounds);
}

struct CorpusStats {
    std::array<std::size_t, kMaxRounds + 1> nodes_per_round{};
    std::vector<std::size_t> nodes_per_agent;
    std::array<std::size_t, kMaxRounds + 1> graphs_per_structure{};

    std::size_t graph_count() const {
        std::size_t n = 0;
        for (auto c : graphs_per_structure) {
            n += c;
        }
        return n;
    }
    std::size_t node_count() const {
        std::size_t n = 0;
        for (auto c : nodes_per_round) {
            n += c;
        }
        return n;
    }

    bool operator==(const CorpusStats&) const = default;
};

inline CorpusStats corpus_stats(const Corpus& corpus) {
    CorpusStats stats;
    if (corpus.empty()) {
        return stats;
    }
    const int n = corpus.front().n_agents;
    stats.nodes_per_agent.assign(static_cast<std::size_t>(n), 0);
    for (const auto& mag : corpus) {
        if (mag.n_agents != n) {
            throw MagError(MagErrc::MixedAgentCounts, "corpus mixes " + std::to_string(n) + " and " +
                                                          std::to_string(mag.n_agents) + " agents");
        }
        const auto cls = static_cast<std::size_t>(structure_class(mag));
        ++stats.graphs_per_structure[cls];
        for (const auto& v : mag.nodes) {
            ++stats.nodes_per_round[static_cast<std::size_t>(v.round)];
            ++stats.nodes_per_agent[static_cast<std::size_t>(v.agent)];
        }
    }
    return stats;
}

/// Count in the abbreviated style of corpus tables: values below 1000 verbatim,
/// larger values in thousands truncated to one decimal ("843", "2.1K", "3K").
inline std::string abbreviate_count(std::size_t n) {
    if (n < 1000) {
        return std::to_string(n);
    }
    const std::size_t tenths = n / 100;
    std::string out = std::to_string(tenths / 10);
    if (tenths % 10 != 0) {
        out += "." + std::to_string(tenths % 10);
    }
    return out + "K";
}

/// Human-readable breakdown by round, agent and structure.
inline std::string format_stats(const CorpusStats& stats, bool abbreviate = false) {
    auto fmt = [abbreviate](std::size_t v) { return abbreviate ? abbreviate_count(v) : std::to_string(v); };
    std::ostringstream os;
    os << "Round (0 / 1 / 2 / 3): ";
    for (std::size_t j = 0; j < stats.nodes_per_round.size(); ++j) {
        os << (j ? " / " : "") << fmt(stats.nodes_per_round[j]);
    }
    os << "\nAgent (each): ";
    for (std::size_t i = 0; i < stats.nodes_per_agent.size(); ++i) {
        os << (i ? " / " : "") << fmt(stats.nodes_per_agent[i]);
    }
    os << "\nGraph (G0 / G1 / G2 / G3 / All): ";
    for (std::size_t k = 0; k < stats.graphs_per_structure.size(); ++k) {
        os << fmt(stats.graphs_per_structure[k]) << " / ";
    }
    os << fmt(stats.graph_count()) << "\n";
    return os.str();
}

/// Graphs whose structure class satisfies `keep`; the input is left untouched.
/// An empty result is reported on `warn` and returned as-is.
inline Corpus filter_corpus(const Corpus& corpus, const std::function<bool(Structure)>& keep,
                            std::ostream* warn = &std::cerr) {
    Corpus out;
    for (const auto& mag : corpus) {
        if (keep(structure_class(mag))) {
            out.push_back(mag);
        }
    }
    if (out.empty() && warn != nullptr) {
        *warn << "warning: filter removed every graph from the corpus\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adjacency

enum class EdgeVariant { Directed, Undirected, FullyConnected };

inline std::string_view to_string(EdgeVariant v) {
    switch (v) {
        case EdgeVariant::Directed: return "directed";
        case EdgeVariant::Undirected: return "undirected";
        case EdgeVariant::FullyConnected: return "fully-connected";
    }
    return "directed";
}

inline EdgeVariant parse_edge_variant(std::string_view s) {
    if (s == "directed") return EdgeVariant::Directed;
    if (s == "undirected") return EdgeVariant::Undirected;
    if (s == "fully-connected" || s == "fully_connected" || s == "fc") return EdgeVariant::FullyConnected;
    throw std::invalid_argument("unknown edge variant '" + std::string(s) + "'");
}

struct Adjacency {
    ad::Tensor matrix;      // M with self-connections
    ad::Tensor normalized;  // D^-1 M, rows sum to 1
};

/// Row t of the directed matrix collects node t's predecessors (M[t][s] = 1 for s -> t).
inline Adjacency adjacency(const Mag& mag, EdgeVariant variant) {
    const std::size_t n = mag.nodes.size();
    ad::Tensor m({n, n}, variant == EdgeVariant::FullyConnected ? 1.0 : 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    if (variant != EdgeVariant::FullyConnected) {
        for (const auto& [s, t] : mag.edges) {
            m(static_cast<std::size_t>(t), static_cast<std::size_t>(s)) = 1.0;
            if (variant == EdgeVariant::Undirected) {
                m(static_cast<std::size_t>(s), static_cast<std::size_t>(t)) = 1.0;
            }
        }
    }
    ad::Tensor norm = m;
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            deg += m(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) {
            norm(i, j) = m(i, j) / deg;
        }
    }
    return {std::move(m), std::move(norm)};
}

}  // namespace magdi
