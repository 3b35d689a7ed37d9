#pragma once

// Newline-delimited JSON corpus format, one graph per line:
//
//   {"instance": {"id": str, "question": str, "gold": str}, "n_agents": int,
//    "nodes": [{"id": int, "agent": int, "round": int, "reasoning": str,
//               "answer": str, "label": 0|1}, ...],
//    "edges": [[src, dst], ...]}
//
// Keys are written in the order above; unknown keys are rejected on load.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "magdi/mag.hpp"

namespace magdi {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline void require_keys(const ordered_json& j, std::string_view what, std::initializer_list<std::string_view> keys) {
    if (!j.is_object()) {
        throw MagError(MagErrc::Schema, std::string(what) + " must be an object");
    }
    for (const auto& [key, _] : j.items()) {
        bool known = false;
        for (auto k : keys) {
            known = known || key == k;
        }
        if (!known) {
            throw MagError(MagErrc::Schema, "unknown field '" + key + "' in " + std::string(what));
        }
    }
    for (auto k : keys) {
        if (!j.contains(k)) {
            throw MagError(MagErrc::Schema, "missing field '" + std::string(k) + "' in " + std::string(what));
        }
    }
}

inline std::string get_string(const ordered_json& j, const char* key, std::string_view what) {
    const auto& v = j.at(key);
    if (!v.is_string()) {
        throw MagError(MagErrc::Schema, std::string(what) + "." + key + " must be a string");
    }
    return v.get<std::string>();
}

inline int get_int(const ordered_json& j, const char* key, std::string_view what) {
    const auto& v = j.at(key);
    if (!v.is_number_integer()) {
        throw MagError(MagErrc::Schema, std::string(what) + "." + key + " must be an integer");
    }
    return v.get<int>();
}

}  // namespace detail

inline ordered_json instance_to_json(const InstanceRef& inst) {
    ordered_json j;
    j["id"] = inst.id;
    j["question"] = inst.question;
    j["gold"] = inst.gold;
    return j;
}

inline InstanceRef instance_from_json(const ordered_json& j) {
    detail::require_keys(j, "instance", {"id", "question", "gold"});
    return {detail::get_string(j, "id", "instance"), detail::get_string(j, "question", "instance"),
            detail::get_string(j, "gold", "instance")};
}

inline ordered_json to_json(const Mag& mag) {
    ordered_json j;
    j["instance"] = instance_to_json(mag.instance);
    j["n_agents"] = mag.n_agents;
    j["nodes"] = ordered_json::array();
    for (const auto& v : mag.nodes) {
        ordered_json n;
        n["id"] = v.id;
        n["agent"] = v.agent;
        n["round"] = v.round;
        n["reasoning"] = v.reasoning;
        n["answer"] = v.answer;
        n["label"] = v.label;
        j["nodes"].push_back(std::move(n));
    }
    j["edges"] = ordered_json::array();
    for (const auto& [s, t] : mag.edges) {
        j["edges"].push_back(ordered_json::array({s, t}));
    }
    return j;
}

/// Decodes and validates one graph object.
inline Mag mag_from_json(const ordered_json& j) {
    detail::require_keys(j, "graph", {"instance", "n_agents", "nodes", "edges"});
    Mag mag;
    mag.instance = instance_from_json(j.at("instance"));
    mag.n_agents = detail::get_int(j, "n_agents", "graph");
    const auto& nodes = j.at("nodes");
    if (!nodes.is_array()) {
        throw MagError(MagErrc::Schema, "graph.nodes must be an array");
    }
    int max_round = 0;
    for (const auto& n : nodes) {
        detail::require_keys(n, "node", {"id", "agent", "round", "reasoning", "answer", "label"});
        NodeRecord v;
        v.id = detail::get_int(n, "id", "node");
        v.agent = detail::get_int(n, "agent", "node");
        v.round = detail::get_int(n, "round", "node");
        v.reasoning = detail::get_string(n, "reasoning", "node");
        v.answer = detail::get_string(n, "answer", "node");
        v.label = detail::get_int(n, "label", "node");
        max_round = std::max(max_round, v.round);
        mag.nodes.push_back(std::move(v));
    }
    mag.n_rounds = max_round;
    const auto& edges = j.at("edges");
    if (!edges.is_array()) {
        throw MagError(MagErrc::Schema, "graph.edges must be an array");
    }
    for (const auto& e : edges) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer()) {
            throw MagError(MagErrc::Schema, "each edge must be a [source, target] pair of integers");
        }
        mag.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    }
    validate(mag);
    return mag;
}

inline std::string serialize(const Mag& mag) { return to_json(mag).dump(); }

inline Mag deserialize(std::string_view text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw MagError(MagErrc::MalformedJson, e.what());
    }
    return mag_from_json(j);
}

/// One graph per line, each line terminated by '\n'.
inline std::string serialize_corpus(const Corpus& corpus) {
    std::string out;
    for (const auto& mag : corpus) {
        out += serialize(mag);
        out += '\n';
    }
    return out;
}

inline Corpus deserialize_corpus(std::string_view text) {
    Corpus corpus;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            continue;
        }
        try {
            corpus.push_back(deserialize(line));
        } catch (const MagError& e) {
            throw MagError(e.code(), "line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return corpus;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MagError(MagErrc::Io, "cannot open '" + path.string() + "' for reading");
    }
    return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_text_file_atomic(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw MagError(MagErrc::Io, "cannot open '" + tmp.string() + "' for writing");
        }
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) {
            throw MagError(MagErrc::Io, "write to '" + tmp.string() + "' failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

inline Corpus load_corpus(const std::filesystem::path& path) { return deserialize_corpus(read_text_file(path)); }

inline void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    write_text_file_atomic(path, serialize_corpus(corpus));
}

}  // namespace magdi
