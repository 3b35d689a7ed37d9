#pragma once

// Train-time head: margin scoring of chain embeddings, a two-layer GCN over
// the interaction graph and correct/incorrect node classification. None of
// it is used by generation.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "magdi/mag.hpp"
#include "magdi/rng.hpp"
#include "magdi/student.hpp"
#include "magdi/tensor.hpp"

namespace magdi {

enum class Pooling { Mean, Gated };

inline std::string_view to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "gated"; }

inline Pooling parse_pooling(std::string_view name) {
    if (name == "mean") return Pooling::Mean;
    if (name == "gated") return Pooling::Gated;
    throw std::invalid_argument("unknown pooling '" + std::string(name) + "' (known: mean, gated)");
}

/// Loss weights and margin. `coupled` lets the margin and node losses reach
/// the student through the chain embeddings.
struct LossConfig {
    double alpha = 1.0;
    double beta = 0.1;
    double gamma = 0.1;
    double rho = 1.0;
    bool coupled = true;

    void check() const {
        for (double w : {alpha, beta, gamma}) {
            if (!(w >= 0.0 && w <= 1.0)) {
                throw std::invalid_argument("LossConfig: alpha, beta, gamma must lie in [0, 1]");
            }
        }
        if (!(rho >= -1.0 && rho <= 1.0)) {
            throw std::invalid_argument("LossConfig: rho must lie in [-1, 1]");
        }
    }
};

class DistillHead {
   public:
    static constexpr int kClasses = 2;

    DistillHead(int width, int gcn_width, Pooling pooling, std::uint64_t seed)
        : width_(width), gcn_width_(gcn_width), pooling_(pooling) {
        if (width < 1 || gcn_width < 1) {
            throw std::invalid_argument("DistillHead: widths must be positive");
        }
        Rng rng = Rng(seed).split("head");
        const std::size_t d = width, g = gcn_width;
        auto init = [&](const std::string& name, std::size_t rows, std::size_t cols) {
            auto& p = params_.add(name, {rows, cols});
            const double std = 1.0 / std::sqrt(static_cast<double>(rows));
            for (auto& x : p.value.data()) {
                x = rng.normal() * std;
            }
        };
        init("score.w", d, 1);
        init("gcn.w0", d, g);
        init("gcn.w1", g, g);
        init("cls.w", g, kClasses);
        if (pooling == Pooling::Gated) {
            init("pool.gate", d, 1);
        }
    }

    int width() const { return width_; }
    int gcn_width() const { return gcn_width_; }
    Pooling pooling() const { return pooling_; }
    ad::ParameterStore& params() { return params_; }
    const ad::ParameterStore& params() const { return params_; }

    ad::Var bind(ad::Tape& tape, std::string_view name) { return tape.param(params_.get(name)); }

   private:
    int width_;
    int gcn_width_;
    Pooling pooling_;
    ad::ParameterStore params_;
};

// -----------------------------------------------------------------------------
// Components
// -----------------------------------------------------------------------------

/// s = tanh(h w) for each row of h (k x d) -> k x 1.
inline ad::Var score_chain(ad::Var h, ad::Var w) {
    if (h.value().cols() != w.value().rows() || w.value().cols() != 1) {
        ad::throw_shape("score_chain", h.shape(), w.shape());
    }
    return ad::tanh(ad::matmul(h, w));
}

/// Pairs (positive index, negative index). Every node of the larger group
/// appears once; the smaller group is used once each and then resampled
/// uniformly to fill the remainder.
inline std::vector<std::pair<int, int>> sample_pairs(std::size_t n_pos, std::size_t n_neg, Rng& rng) {
    std::vector<std::pair<int, int>> pairs;
    if (n_pos == 0 || n_neg == 0) {
        return pairs;
    }
    const std::size_t big = std::max(n_pos, n_neg), small = std::min(n_pos, n_neg);
    std::vector<int> fill;
    for (std::size_t i = 0; i < small; ++i) {
        fill.push_back(static_cast<int>(i));
    }
    while (fill.size() < big) {
        fill.push_back(static_cast<int>(rng.below(small)));
    }
    rng.shuffle(std::span<int>(fill));
    for (std::size_t i = 0; i < big; ++i) {
        const int major = static_cast<int>(i);
        pairs.emplace_back(n_pos >= n_neg ? major : fill[i], n_pos >= n_neg ? fill[i] : major);
    }
    return pairs;
}

/// mean over pairs of max(0, rho - s+ + s-); inputs are k x 1 with k >= 1.
inline ad::Var margin_loss(ad::Var s_pos, ad::Var s_neg, double rho) {
    return ad::mean(ad::relu(ad::add_scalar(ad::sub(s_neg, s_pos), rho)));
}

/// Two layers of relu(A H W) with A = D^-1 M.
inline ad::Var gcn_forward(ad::Var h0, ad::Var a_norm, ad::Var w0, ad::Var w1) {
    if (a_norm.value().rows() != h0.value().rows() || a_norm.value().cols() != h0.value().rows()) {
        ad::throw_shape("gcn_forward", a_norm.shape(), h0.shape());
    }
    const ad::Var h1 = ad::relu(ad::matmul(a_norm, ad::matmul(h0, w0)));
    return ad::relu(ad::matmul(a_norm, ad::matmul(h1, w1)));
}

inline void check_labels(std::span<const int> labels) {
    for (int y : labels) {
        if (y != 0 && y != 1) {
            throw std::invalid_argument("node_class_loss: label " + std::to_string(y) + " outside {0, 1}");
        }
    }
}

/// Class probabilities softmax(H_L W_c), one row per node.
inline ad::Var node_class_probs(ad::Var hl, ad::Var wc) { return ad::softmax(ad::matmul(hl, wc)); }

/// Mean cross-entropy of softmax(H_L W_c) against the node labels.
inline ad::Var node_class_loss(ad::Var hl, ad::Var wc, std::span<const int> labels) {
    check_labels(labels);
    if (labels.size() != hl.value().rows()) {
        ad::throw_shape("node_class_loss", hl.shape(), ad::Shape{labels.size()});
    }
    return ad::scale(ad::mean(ad::pick(ad::log_softmax(ad::matmul(hl, wc)), labels)), -1.0);
}

/// Attention-weighted chain pooling with a learned scoring vector.
inline ad::Var gated_pool(const LmOutput& out, ad::Var gate) {
    std::vector<int> rows;
    for (std::size_t p = out.chain_begin; p < out.tokens.size(); ++p) {
        if (out.tokens[p] != Vocab::kPad && out.tokens[p] != Vocab::kEos) {
            rows.push_back(static_cast<int>(p));
        }
    }
    if (rows.empty()) {
        throw std::invalid_argument("embed_chain: empty chain");
    }
    const ad::Var h = ad::gather_rows(out.hidden, rows);
    const ad::Var weights = ad::softmax(ad::transpose(ad::matmul(h, gate)));
    return ad::matmul(weights, h);
}

// -----------------------------------------------------------------------------
// Combined loss
// -----------------------------------------------------------------------------

/// Which nodes of a graph feed which term.
struct TrainingView {
    std::vector<int> positives;  // node ids for the next-token term
    std::vector<int> negatives;  // node ids paired against positives in the margin term
    bool use_graph = false;      // node classification over all nodes through the GCN
    EdgeVariant edges = EdgeVariant::Directed;
};

struct LossBreakdown {
    double positive = 0.0;
    double margin = 0.0;
    double node = 0.0;
    double total = 0.0;
    bool has_positive = false;
    bool has_margin = false;
    bool has_node = false;
};

struct GraphLoss {
    std::optional<ad::Var> total;  // absent when no term is active
    LossBreakdown terms;
};

/// L = alpha L+ + beta L- + gamma L_I over the terms the view activates.
///
/// Identical chains inside a graph share one forward pass; L+ weights each
/// unique chain by its multiplicity, so the value equals the per-node sum.
inline GraphLoss combined_loss(ad::Tape& tape, StudentModel& student, DistillHead& head, const Mag& mag,
                               const TrainingView& view, const LossConfig& cfg, Rng& rng) {
    cfg.check();
    const std::size_t n = mag.nodes.size();
    const bool has_margin = !view.positives.empty() && !view.negatives.empty();
    bool has_node = false;
    if (view.use_graph) {
        bool seen[2] = {false, false};
        for (const auto& v : mag.nodes) {
            seen[v.label == 1] = true;
        }
        has_node = seen[0] && seen[1];
    }

    std::vector<int> needed(view.positives);
    if (has_margin) {
        needed.insert(needed.end(), view.negatives.begin(), view.negatives.end());
    }
    if (has_node) {
        for (std::size_t i = 0; i < n; ++i) {
            needed.push_back(static_cast<int>(i));
        }
    }
    GraphLoss result;
    if (needed.empty()) {
        return result;
    }

    const std::vector<int> question = student.vocab().encode(mag.instance.question);
    std::map<std::string, int> unique;
    std::vector<int> chain_of(n, -1);
    std::vector<LmOutput> outs;
    for (int node : needed) {
        if (node < 0 || static_cast<std::size_t>(node) >= n) {
            throw std::out_of_range("combined_loss: node id " + std::to_string(node) + " outside the graph");
        }
        if (chain_of[node] >= 0) {
            continue;
        }
        const std::string& text = mag.nodes[node].reasoning;
        auto [it, inserted] = unique.emplace(text, static_cast<int>(outs.size()));
        if (inserted) {
            outs.push_back(student.lm_forward(tape, question, student.chain_ids(text)));
        }
        chain_of[node] = it->second;
    }

    std::vector<ad::Var> weighted;
    auto add_term = [&](ad::Var term, double weight) { weighted.push_back(ad::scale(term, weight)); };

    if (!view.positives.empty()) {
        std::vector<int> multiplicity(outs.size(), 0);
        for (int node : view.positives) {
            ++multiplicity[chain_of[node]];
        }
        std::vector<ad::Var> sums;
        double tokens = 0.0;
        for (std::size_t c = 0; c < outs.size(); ++c) {
            if (multiplicity[c] == 0) {
                continue;
            }
            const ad::Var ll = chain_log_likelihood(outs[c]);
            sums.push_back(ad::scale(ad::sum(ll), multiplicity[c]));
            tokens += static_cast<double>(multiplicity[c]) * static_cast<double>(ll.value().rows());
        }
        ad::Var total = sums.front();
        for (std::size_t i = 1; i < sums.size(); ++i) {
            total = ad::add(total, sums[i]);
        }
        const ad::Var l_pos = ad::scale(total, -1.0 / tokens);
        result.terms.positive = l_pos.value().item();
        result.terms.has_positive = true;
        add_term(l_pos, cfg.alpha);
    }

    if (has_margin || has_node) {
        std::vector<ad::Var> rows;
        if (head.pooling() == Pooling::Gated) {
            const ad::Var gate = head.bind(tape, "pool.gate");
            for (const auto& o : outs) {
                rows.push_back(gated_pool(o, gate));
            }
        } else {
            for (const auto& o : outs) {
                rows.push_back(chain_embedding(o));
            }
        }
        ad::Var emb = rows.size() == 1 ? rows.front() : ad::concat(rows, 0);
        if (!cfg.coupled) {
            emb = tape.constant(ad::Tensor(emb.value()));
        }

        if (has_margin) {
            const ad::Var scores = score_chain(emb, head.bind(tape, "score.w"));
            std::vector<int> pos_rows, neg_rows;
            for (auto [p, q] : sample_pairs(view.positives.size(), view.negatives.size(), rng)) {
                pos_rows.push_back(chain_of[view.positives[p]]);
                neg_rows.push_back(chain_of[view.negatives[q]]);
            }
            const ad::Var l_neg =
                margin_loss(ad::gather_rows(scores, pos_rows), ad::gather_rows(scores, neg_rows), cfg.rho);
            result.terms.margin = l_neg.value().item();
            result.terms.has_margin = true;
            add_term(l_neg, cfg.beta);
        }

        if (has_node) {
            std::vector<int> labels;
            for (const auto& v : mag.nodes) {
                labels.push_back(v.label);
            }
            const ad::Var h0 = ad::gather_rows(emb, chain_of);
            const ad::Var a = tape.constant(adjacency(mag, view.edges).normalized);
            const ad::Var hl = gcn_forward(h0, a, head.bind(tape, "gcn.w0"), head.bind(tape, "gcn.w1"));
            const ad::Var l_node = node_class_loss(hl, head.bind(tape, "cls.w"), labels);
            result.terms.node = l_node.value().item();
            result.terms.has_node = true;
            add_term(l_node, cfg.gamma);
        }
    }

    ad::Var total = weighted.front();
    for (std::size_t i = 1; i < weighted.size(); ++i) {
        total = ad::add(total, weighted[i]);
    }
    result.terms.total = total.value().item();
    result.total = total;
    return result;
}

}  // namespace magdi
