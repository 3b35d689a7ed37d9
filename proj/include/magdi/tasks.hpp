#pragma once

// Synthetic reasoning tasks with a closed step grammar.
//
//   modsum:  "3+5+9 mod 10 = ?"  ->  "3+5=8; 8+9=17; 17 mod 10 = 7; answer: 7"
//   listmax: "max(4,9,2) = ?"    ->  "max(4,9)=9; max(9,2)=9; answer: 9"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "magdi/mag.hpp"
#include "magdi/rng.hpp"

namespace magdi {

enum class TaskFamily { ModSum, ListMax };

inline std::string_view to_string(TaskFamily f) { return f == TaskFamily::ModSum ? "modsum" : "listmax"; }

inline TaskFamily parse_task_family(std::string_view name) {
    if (name == "modsum") return TaskFamily::ModSum;
    if (name == "listmax") return TaskFamily::ListMax;
    throw std::invalid_argument("unknown task family '" + std::string(name) + "' (known: modsum, listmax)");
}

struct TaskInstance {
    std::string id;
    TaskFamily family = TaskFamily::ModSum;
    std::vector<int> operands;
    std::string question;
    std::string gold;
    std::string oracle_chain;

    InstanceRef ref() const { return {id, question, gold}; }
};

inline constexpr int kOperandCount = 3;
inline constexpr int kModulus = 10;
inline constexpr int kMaxCorruption = 3;

inline int floor_mod(int v, int m) { return ((v % m) + m) % m; }

/// Renders a chain for the instance. Each step is corrupted independently with
/// probability `error_rate` by a nonzero offset in [-3, 3] that propagates
/// into later steps. A corrupted final step never lands on the gold answer.
inline AgentOutput solve_chain(const TaskInstance& inst, double error_rate, Rng& rng) {
    const int gold = std::stoi(inst.gold);
    auto offset = [&](int correct, bool final_step) {
        std::vector<int> deltas;
        for (int d = -kMaxCorruption; d <= kMaxCorruption; ++d) {
            if (d != 0 && !(final_step && correct + d == gold)) {
                deltas.push_back(d);
            }
        }
        return deltas[rng.below(deltas.size())];
    };
    auto step_value = [&](int correct, bool final_step) {
        return rng.bernoulli(error_rate) ? correct + offset(correct, final_step) : correct;
    };

    std::vector<std::string> steps;
    const auto& ops = inst.operands;
    int acc = ops.front();
    if (inst.family == TaskFamily::ModSum) {
        for (std::size_t k = 1; k < ops.size(); ++k) {
            const int shown = step_value(acc + ops[k], false);
            steps.push_back(std::to_string(acc) + "+" + std::to_string(ops[k]) + "=" + std::to_string(shown));
            acc = shown;
        }
        const int shown = step_value(floor_mod(acc, kModulus), true);
        steps.push_back(std::to_string(acc) + " mod " + std::to_string(kModulus) + " = " + std::to_string(shown));
        acc = shown;
    } else {
        for (std::size_t k = 1; k < ops.size(); ++k) {
            const int shown = step_value(std::max(acc, ops[k]), k + 1 == ops.size());
            steps.push_back("max(" + std::to_string(acc) + "," + std::to_string(ops[k]) + ")=" + std::to_string(shown));
            acc = shown;
        }
    }
    std::string chain;
    for (const auto& s : steps) {
        chain += s + "; ";
    }
    const std::string answer = std::to_string(acc);
    chain += "answer: " + answer;
    return {chain, answer};
}

inline TaskInstance make_instance(TaskFamily family, std::vector<int> operands, std::string id) {
    if (operands.size() < 2) {
        throw std::invalid_argument("make_instance: at least two operands required");
    }
    TaskInstance inst;
    inst.id = std::move(id);
    inst.family = family;
    inst.operands = std::move(operands);
    std::string list;
    for (std::size_t k = 0; k < inst.operands.size(); ++k) {
        list += (k ? (family == TaskFamily::ModSum ? "+" : ",") : "") + std::to_string(inst.operands[k]);
    }
    if (family == TaskFamily::ModSum) {
        int total = 0;
        for (int v : inst.operands) {
            total += v;
        }
        inst.question = list + " mod " + std::to_string(kModulus) + " = ?";
        inst.gold = std::to_string(floor_mod(total, kModulus));
    } else {
        inst.question = "max(" + list + ") = ?";
        inst.gold = std::to_string(*std::max_element(inst.operands.begin(), inst.operands.end()));
    }
    Rng unused(0);
    inst.oracle_chain = solve_chain(inst, 0.0, unused).reasoning;
    return inst;
}

/// Draws three single-digit operands for the family.
inline TaskInstance gen_instance(TaskFamily family, Rng& rng, std::string id) {
    std::vector<int> ops;
    for (int k = 0; k < kOperandCount; ++k) {
        ops.push_back(rng.range(0, 9));
    }
    return make_instance(family, std::move(ops), std::move(id));
}

inline TaskInstance gen_instance(std::string_view family, Rng& rng, std::string id) {
    return gen_instance(parse_task_family(family), rng, std::move(id));
}

/// Text after the last "answer:" marker, trimmed; empty when absent.
inline std::string extract_answer(std::string_view chain) {
    constexpr std::string_view marker = "answer:";
    const auto pos = chain.rfind(marker);
    if (pos == std::string_view::npos) {
        return {};
    }
    std::string_view rest = chain.substr(pos + marker.size());
    while (!rest.empty() && rest.front() == ' ') {
        rest.remove_prefix(1);
    }
    while (!rest.empty() && rest.back() == ' ') {
        rest.remove_suffix(1);
    }
    return std::string(rest);
}

}  // namespace magdi
