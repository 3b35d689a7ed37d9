#pragma once

// Toy decoder-only student: pre-norm transformer blocks with learned
// positions and an output projection tied to the token embeddings.

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "magdi/rng.hpp"
#include "magdi/tasks.hpp"
#include "magdi/tensor.hpp"
#include "magdi/vocab.hpp"

namespace magdi {

struct StudentDims {
    int vocab = 0;
    int width = 128;
    int heads = 4;
    int layers = 4;
    int context = 256;

    void check() const {
        if (vocab < 4 || width < 1 || heads < 1 || layers < 1 || context < 2) {
            throw std::invalid_argument("StudentDims: all dimensions must be positive (vocab >= 4, context >= 2)");
        }
        if (width % heads != 0) {
            throw std::invalid_argument("StudentDims: width " + std::to_string(width) + " not divisible by heads " +
                                        std::to_string(heads));
        }
    }

    bool operator==(const StudentDims&) const = default;
};

/// V*d + T*d + L*(12 d^2 + 9 d) + 2 d. Heads only split the width.
inline std::size_t parameter_count(const StudentDims& dims) {
    const std::size_t v = dims.vocab, d = dims.width, t = dims.context, l = dims.layers;
    return v * d + t * d + l * (12 * d * d + 9 * d) + 2 * d;
}

class ContextOverflowError : public std::length_error {
   public:
    using std::length_error::length_error;
};

/// Result of running the model over question + <sep> + chain.
///
/// Row p of `logits` predicts token p+1. Rows chain_begin-1 .. n-2 are the
/// scored positions; question rows never enter a loss.
struct LmOutput {
    ad::Var logits;
    ad::Var hidden;
    std::vector<int> tokens;
    std::size_t chain_begin = 0;
};

enum class DecodeMode { Greedy, Sample };

struct GenerateOptions {
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 0.7;
    int max_new_tokens = 64;
};

struct Generation {
    std::string chain;
    std::string answer;
    int n_generated = 0;
};

class StudentModel {
   public:
    StudentModel(Vocab vocab, StudentDims dims, std::uint64_t seed, double init_std = 0.02)
        : vocab_(std::move(vocab)), dims_(dims) {
        if (dims_.vocab == 0) {
            dims_.vocab = vocab_.size();
        }
        if (dims_.vocab != vocab_.size()) {
            throw std::invalid_argument("StudentModel: dims.vocab disagrees with the vocabulary size");
        }
        dims_.check();
        const std::size_t v = dims_.vocab, d = dims_.width, t = dims_.context;
        Rng rng = Rng(seed).split("student");
        const double proj_std = init_std / std::sqrt(2.0 * dims_.layers);
        auto normal = [&](const std::string& name, ad::Shape shape, double std) {
            auto& p = params_.add(name, std::move(shape));
            for (auto& x : p.value.data()) {
                x = rng.normal() * std;
            }
        };
        auto constant = [&](const std::string& name, std::size_t cols, double value) {
            params_.add(name, {1, cols}).value.fill(value);
        };
        normal("tok_emb", {v, d}, init_std);
        normal("pos_emb", {t, d}, init_std);
        for (int l = 0; l < dims_.layers; ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            constant(p + "ln1.gain", d, 1.0);
            constant(p + "ln1.bias", d, 0.0);
            normal(p + "wq", {d, d}, init_std);
            normal(p + "wk", {d, d}, init_std);
            normal(p + "wv", {d, d}, init_std);
            normal(p + "wo", {d, d}, proj_std);
            constant(p + "ln2.gain", d, 1.0);
            constant(p + "ln2.bias", d, 0.0);
            normal(p + "ff1.w", {d, 4 * d}, init_std);
            constant(p + "ff1.b", 4 * d, 0.0);
            normal(p + "ff2.w", {4 * d, d}, proj_std);
            constant(p + "ff2.b", d, 0.0);
        }
        constant("lnf.gain", d, 1.0);
        constant("lnf.bias", d, 0.0);
    }

    const Vocab& vocab() const { return vocab_; }
    const StudentDims& dims() const { return dims_; }
    ad::ParameterStore& params() { return params_; }
    const ad::ParameterStore& params() const { return params_; }

    /// Trainable forward: parameters are bound so backward() reaches them.
    /// Returns (logits n x V, final hidden states n x d).
    std::pair<ad::Var, ad::Var> forward(ad::Tape& tape, std::span<const int> tokens) {
        std::vector<ad::Var> w;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            w.push_back(tape.param(params_[i]));
        }
        return run(tokens, w);
    }

    /// Frozen forward; parameters enter as constants.
    std::pair<ad::Var, ad::Var> forward(ad::Tape& tape, std::span<const int> tokens) const {
        std::vector<ad::Var> w;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            w.push_back(tape.view(params_[i].value));
        }
        return run(tokens, w);
    }

    /// Target chain ids: the encoded reasoning followed by <eos>.
    std::vector<int> chain_ids(std::string_view reasoning) const {
        std::vector<int> ids = vocab_.encode(reasoning);
        ids.push_back(Vocab::kEos);
        return ids;
    }

    static std::vector<int> join(std::span<const int> question, std::span<const int> chain) {
        std::vector<int> seq(question.begin(), question.end());
        seq.push_back(Vocab::kSep);
        seq.insert(seq.end(), chain.begin(), chain.end());
        return seq;
    }

    template <class Self>
    static LmOutput lm_forward_impl(Self& self, ad::Tape& tape, std::span<const int> question, std::span<const int> chain) {
        LmOutput out;
        out.tokens = join(question, chain);
        out.chain_begin = question.size() + 1;
        std::tie(out.logits, out.hidden) = self.forward(tape, out.tokens);
        return out;
    }

    LmOutput lm_forward(ad::Tape& tape, std::span<const int> question, std::span<const int> chain) {
        return lm_forward_impl(*this, tape, question, chain);
    }
    LmOutput lm_forward(ad::Tape& tape, std::span<const int> question, std::span<const int> chain) const {
        return lm_forward_impl(*this, tape, question, chain);
    }

    Generation generate(std::string_view question, const GenerateOptions& options, Rng& rng) const {
        std::vector<int> seq = vocab_.encode(question);
        seq.push_back(Vocab::kSep);
        std::vector<int> produced;
        Generation g;
        const bool greedy = options.mode == DecodeMode::Greedy || options.temperature <= 0.0;
        while (g.n_generated < options.max_new_tokens && seq.size() < static_cast<std::size_t>(dims_.context)) {
            ad::Tape tape(false);
            const ad::Var logits = forward(tape, seq).first;
            const ad::Tensor& l = logits.value();
            const double* row = l.ptr() + (l.rows() - 1) * l.cols();
            const int next = greedy ? argmax(row) : sample(row, options.temperature, rng);
            ++g.n_generated;
            if (next == Vocab::kEos) {
                break;
            }
            produced.push_back(next);
            seq.push_back(next);
        }
        g.chain = vocab_.decode(produced);
        g.answer = extract_answer(g.chain);
        return g;
    }

   private:
    static constexpr std::size_t kPerLayer = 12;

    // <pad> and <sep> are never emitted.
    static bool emittable(int id) { return id != Vocab::kPad && id != Vocab::kSep; }

    int argmax(const double* row) const {
        int best = -1;
        for (int i = 0; i < dims_.vocab; ++i) {
            if (emittable(i) && (best < 0 || row[i] > row[best])) {
                best = i;
            }
        }
        return best;
    }

    int sample(const double* row, double temperature, Rng& rng) const {
        const int top = argmax(row);
        std::vector<double> p(static_cast<std::size_t>(dims_.vocab), 0.0);
        double total = 0.0;
        for (int i = 0; i < dims_.vocab; ++i) {
            if (emittable(i)) {
                p[i] = std::exp((row[i] - row[top]) / temperature);
                total += p[i];
            }
        }
        double u = rng.uniform() * total;
        for (int i = 0; i < dims_.vocab; ++i) {
            if (p[i] > 0.0) {
                u -= p[i];
                if (u < 0.0) {
                    return i;
                }
            }
        }
        return top;
    }

    std::pair<ad::Var, ad::Var> run(std::span<const int> tokens, const std::vector<ad::Var>& w) const {
        const std::size_t n = tokens.size();
        if (n == 0) {
            throw std::invalid_argument("StudentModel::forward: empty sequence");
        }
        if (n > static_cast<std::size_t>(dims_.context)) {
            throw ContextOverflowError("StudentModel::forward: sequence of " + std::to_string(n) +
                                       " tokens exceeds context " + std::to_string(dims_.context));
        }
        for (int id : tokens) {
            if (id < 0 || id >= dims_.vocab) {
                throw std::out_of_range("StudentModel::forward: token id " + std::to_string(id) + " out of range");
            }
        }
        std::vector<int> positions(n);
        for (std::size_t i = 0; i < n; ++i) {
            positions[i] = static_cast<int>(i);
        }
        const std::size_t d = dims_.width, h = dims_.heads, dh = d / h;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        ad::Var x = ad::add(ad::embedding(w[0], tokens), ad::gather_rows(w[1], positions));
        for (int l = 0; l < dims_.layers; ++l) {
            const ad::Var* p = &w[2 + kPerLayer * static_cast<std::size_t>(l)];
            const ad::Var a = ad::layer_norm(x, p[0], p[1]);
            const ad::Var q = ad::matmul(a, p[2]);
            const ad::Var k = ad::matmul(a, p[3]);
            const ad::Var v = ad::matmul(a, p[4]);
            std::vector<ad::Var> heads;
            for (std::size_t hi = 0; hi < h; ++hi) {
                const ad::Var qh = ad::slice(q, 1, hi * dh, (hi + 1) * dh);
                const ad::Var kh = ad::slice(k, 1, hi * dh, (hi + 1) * dh);
                const ad::Var vh = ad::slice(v, 1, hi * dh, (hi + 1) * dh);
                const ad::Var att = ad::softmax(ad::causal_mask(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt)));
                heads.push_back(ad::matmul(att, vh));
            }
            const ad::Var merged = h == 1 ? heads.front() : ad::concat(heads, 1);
            x = ad::add(x, ad::matmul(merged, p[5]));
            const ad::Var b = ad::layer_norm(x, p[6], p[7]);
            const ad::Var f = ad::relu(ad::add(ad::matmul(b, p[8]), p[9]));
            x = ad::add(x, ad::add(ad::matmul(f, p[10]), p[11]));
        }
        const std::size_t last = 2 + kPerLayer * static_cast<std::size_t>(dims_.layers);
        const ad::Var hidden = ad::layer_norm(x, w[last], w[last + 1]);
        return {ad::matmul_nt(hidden, w[0]), hidden};
    }

    Vocab vocab_;
    StudentDims dims_;
    ad::ParameterStore params_;
};

/// Per-token log-likelihoods of the chain tokens (k x 1), <pad> targets dropped.
inline ad::Var chain_log_likelihood(const LmOutput& out) {
    std::vector<int> rows, targets;
    for (std::size_t p = out.chain_begin; p < out.tokens.size(); ++p) {
        if (out.tokens[p] != Vocab::kPad) {
            rows.push_back(static_cast<int>(p - 1));
            targets.push_back(out.tokens[p]);
        }
    }
    if (rows.empty()) {
        throw std::invalid_argument("chain_log_likelihood: chain has no tokens");
    }
    return ad::pick(ad::log_softmax(ad::gather_rows(out.logits, rows)), targets);
}

/// Mean negative log-likelihood over every chain token in the batch.
inline ad::Var positive_loss(std::span<const LmOutput> batch) {
    if (batch.empty()) {
        throw std::invalid_argument("positive_loss: empty batch");
    }
    std::vector<ad::Var> parts;
    for (const auto& out : batch) {
        parts.push_back(chain_log_likelihood(out));
    }
    const ad::Var all = parts.size() == 1 ? parts.front() : ad::concat(parts, 0);
    return ad::scale(ad::mean(all), -1.0);
}

/// L+ over (question, correct chain) text pairs.
inline ad::Var positive_loss(ad::Tape& tape, StudentModel& model,
                             std::span<const std::pair<std::string, std::string>> batch) {
    if (batch.empty()) {
        throw std::invalid_argument("positive_loss: empty batch");
    }
    std::vector<LmOutput> outs;
    for (const auto& [question, chain] : batch) {
        outs.push_back(model.lm_forward(tape, model.vocab().encode(question), model.chain_ids(chain)));
    }
    return positive_loss(outs);
}

/// Uniform mean of the hidden rows holding chain tokens; <pad> and <eos> are excluded.
inline ad::Var pool_chain(ad::Var hidden, std::span<const int> tokens, std::size_t chain_begin) {
    std::vector<double> mask(tokens.size(), 0.0);
    bool any = false;
    for (std::size_t p = chain_begin; p < tokens.size(); ++p) {
        if (tokens[p] != Vocab::kPad && tokens[p] != Vocab::kEos) {
            mask[p] = 1.0;
            any = true;
        }
    }
    if (!any) {
        throw std::invalid_argument("embed_chain: empty chain");
    }
    return ad::masked_mean_pool(hidden, mask);
}

inline ad::Var chain_embedding(const LmOutput& out) { return pool_chain(out.hidden, out.tokens, out.chain_begin); }

inline ad::Var embed_chain(ad::Tape& tape, StudentModel& model, std::string_view question, std::string_view chain) {
    if (chain.empty()) {
        throw std::invalid_argument("embed_chain: empty chain");
    }
    return chain_embedding(model.lm_forward(tape, model.vocab().encode(question), model.chain_ids(chain)));
}

}  // namespace magdi
