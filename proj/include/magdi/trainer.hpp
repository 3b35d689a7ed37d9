#pragma once

// Optimization over MAG corpora for the four training levels:
//
//   r0     round-0 correct chains, next-token loss only
//   cn     every correct chain, next-token loss only
//   an     every chain; correct ones for next-token, margin loss against incorrect ones
//   magdi  as an, plus node classification through the GCN over the graph edges

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "magdi/checkpoint.hpp"
#include "magdi/distill_head.hpp"
#include "magdi/mag.hpp"
#include "magdi/mag_io.hpp"
#include "magdi/optim.hpp"
#include "magdi/student.hpp"

namespace magdi {

enum class Level { R0, CN, AN, MAGDI };

inline std::string_view to_string(Level l) {
    switch (l) {
        case Level::R0: return "r0";
        case Level::CN: return "cn";
        case Level::AN: return "an";
        case Level::MAGDI: return "magdi";
    }
    return "?";
}

inline Level parse_level(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    for (Level l : {Level::R0, Level::CN, Level::AN, Level::MAGDI}) {
        if (lower == to_string(l)) {
            return l;
        }
    }
    throw std::invalid_argument("unknown level '" + std::string(name) + "' (known: r0, cn, an, magdi)");
}

inline TrainingView select_training_view(const Mag& mag, Level level, EdgeVariant edges = EdgeVariant::Directed) {
    TrainingView view;
    view.edges = edges;
    for (const auto& v : mag.nodes) {
        if (v.label == 1) {
            if (level != Level::R0 || v.round == 0) {
                view.positives.push_back(v.id);
            }
        } else if (level == Level::AN || level == Level::MAGDI) {
            view.negatives.push_back(v.id);
        }
    }
    view.use_graph = level == Level::MAGDI;
    return view;
}

struct TrainConfig {
    Level level = Level::MAGDI;
    EdgeVariant edge_variant = EdgeVariant::Directed;
    LossConfig loss;
    double learning_rate = 3e-4;
    int epochs = 10;
    int batch_size = 16;
    std::uint64_t seed = 7;
    std::vector<std::string> corpora;
    StudentDims student;
    double init_std = 0.02;
    int gcn_width = 0;  // 0 = student width
    Pooling pooling = Pooling::Mean;

    /// Loss weights after the level has switched off the terms it does not use.
    LossConfig effective_loss() const {
        LossConfig l = loss;
        if (level == Level::R0 || level == Level::CN) {
            l.beta = 0.0;
            l.gamma = 0.0;
        } else if (level == Level::AN) {
            l.gamma = 0.0;
        }
        return l;
    }

    void check() const {
        loss.check();
        if (epochs < 1 || batch_size < 1) {
            throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive");
        }
        if (!(learning_rate > 0.0)) {
            throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        }
        if (gcn_width < 0) {
            throw std::invalid_argument("TrainConfig: gcn_width must be non-negative");
        }
    }

    ordered_json to_json() const {
        return {{"level", to_string(level)},
                {"edge_variant", magdi::to_string(edge_variant)},
                {"alpha", loss.alpha},
                {"beta", loss.beta},
                {"gamma", loss.gamma},
                {"rho", loss.rho},
                {"coupled", loss.coupled},
                {"learning_rate", learning_rate},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"seed", seed},
                {"corpora", corpora},
                {"student",
                 {{"width", student.width},
                  {"heads", student.heads},
                  {"layers", student.layers},
                  {"context", student.context},
                  {"init_std", init_std}}},
                {"gcn_width", gcn_width},
                {"pooling", to_string(pooling)}};
    }

    /// Missing keys keep their defaults; unknown keys are rejected.
    static TrainConfig from_json(const ordered_json& j) {
        TrainConfig c;
        if (!j.is_object()) {
            throw std::invalid_argument("train config: expected a JSON object");
        }
        for (const auto& [key, value] : j.items()) {
            if (key == "level") c.level = parse_level(value.get<std::string>());
            else if (key == "edge_variant") c.edge_variant = parse_edge_variant(value.get<std::string>());
            else if (key == "alpha") c.loss.alpha = value.get<double>();
            else if (key == "beta") c.loss.beta = value.get<double>();
            else if (key == "gamma") c.loss.gamma = value.get<double>();
            else if (key == "rho") c.loss.rho = value.get<double>();
            else if (key == "coupled") c.loss.coupled = value.get<bool>();
            else if (key == "learning_rate") c.learning_rate = value.get<double>();
            else if (key == "epochs") c.epochs = value.get<int>();
            else if (key == "batch_size") c.batch_size = value.get<int>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "corpora") c.corpora = value.get<std::vector<std::string>>();
            else if (key == "gcn_width") c.gcn_width = value.get<int>();
            else if (key == "pooling") c.pooling = parse_pooling(value.get<std::string>());
            else if (key == "student") {
                for (const auto& [k, v] : value.items()) {
                    if (k == "width") c.student.width = v.get<int>();
                    else if (k == "heads") c.student.heads = v.get<int>();
                    else if (k == "layers") c.student.layers = v.get<int>();
                    else if (k == "context") c.student.context = v.get<int>();
                    else if (k == "init_std") c.init_std = v.get<double>();
                    else throw std::invalid_argument("train config: unknown key 'student." + k + "'");
                }
            } else {
                throw std::invalid_argument("train config: unknown key '" + key + "'");
            }
        }
        return c;
    }
};

struct StepRecord {
    int epoch = 0;
    long step = 0;
    int graphs = 0;  // graphs in the batch with at least one active term
    double l_pos = 0.0;
    double l_neg = 0.0;
    double l_node = 0.0;
    double l_mag = 0.0;

    ordered_json to_json() const {
        return {{"epoch", epoch}, {"step", step},     {"graphs", graphs}, {"l_pos", l_pos},
                {"l_neg", l_neg}, {"l_node", l_node}, {"l_mag", l_mag}};
    }
};

class TrainingDiverged : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct TrainOutcome {
    StudentModel student;
    DistillHead head;
    std::vector<StepRecord> log;
};

struct TrainOutputs {
    std::optional<std::filesystem::path> dir;  // checkpoints and train_log.jsonl
    bool epoch_checkpoints = true;
    std::ostream* progress = nullptr;
};

namespace detail {

inline std::string norm_snapshot(const ad::ParameterStore& store) {
    std::ostringstream out;
    for (const auto& p : store) {
        double s = 0.0;
        for (double v : p.value.data()) {
            s += v * v;
        }
        out << " " << p.name << "=" << std::setprecision(4) << std::sqrt(s);
    }
    return out.str();
}

}  // namespace detail

/// Runs epochs x ceil(|corpus| / batch) Adam steps on the level's loss,
/// starting from the given parameters.
inline TrainOutcome train(const TrainConfig& config, const Corpus& corpus, StudentModel student, DistillHead head,
                          const TrainOutputs& outputs = {}) {
    config.check();
    if (corpus.empty()) {
        throw std::invalid_argument("train: empty corpus");
    }
    const LossConfig loss = config.effective_loss();
    std::vector<ad::Parameter*> params = student.params().pointers();
    for (auto* p : head.params().pointers()) {
        params.push_back(p);
    }
    Adam adam(params, AdamConfig{config.learning_rate});

    std::vector<StepRecord> log;
    std::string log_text;
    const Rng root = Rng(config.seed).split("trainer");
    const std::size_t batch = static_cast<std::size_t>(config.batch_size);
    ordered_json meta = config.to_json();

    auto write_outputs = [&](std::optional<int> epoch) {
        if (!outputs.dir) {
            return;
        }
        ordered_json m = meta;
        m["epochs_completed"] = epoch ? *epoch : config.epochs;
        const auto dir = epoch ? *outputs.dir / ("epoch-" + std::to_string(*epoch)) : *outputs.dir;
        save_checkpoint(dir, student, &head, m);
        if (!epoch) {
            write_text_file_atomic(*outputs.dir / "train_log.jsonl", log_text);
        }
    };

    long step = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order(corpus.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        Rng shuffle_rng = root.split("shuffle").split(static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        for (std::size_t begin = 0; begin < order.size(); begin += batch) {
            const std::size_t end = std::min(order.size(), begin + batch);
            ++step;
            for (auto* p : params) {
                p->grad.fill(0.0);
            }
            StepRecord rec;
            rec.epoch = epoch;
            rec.step = step;
            int n_pos = 0, n_neg = 0, n_node = 0;
            for (std::size_t k = begin; k < end; ++k) {
                const std::size_t g = order[k];
                ad::Tape tape;
                Rng pair_rng = root.split("pairs").split(static_cast<std::uint64_t>(epoch)).split(g);
                const TrainingView view = select_training_view(corpus[g], config.level, config.edge_variant);
                GraphLoss gl = combined_loss(tape, student, head, corpus[g], view, loss, pair_rng);
                if (!gl.total) {
                    continue;
                }
                const auto& t = gl.terms;
                for (auto [name, value] : {std::pair{"l_pos", t.positive}, std::pair{"l_neg", t.margin},
                                           std::pair{"l_node", t.node}, std::pair{"l_mag", t.total}}) {
                    if (!std::isfinite(value)) {
                        throw TrainingDiverged("non-finite " + std::string(name) + " at step " + std::to_string(step) +
                                               " (epoch " + std::to_string(epoch) + ", graph '" +
                                               corpus[g].instance.id + "'); parameter norms:" +
                                               detail::norm_snapshot(student.params()) +
                                               detail::norm_snapshot(head.params()));
                    }
                }
                ++rec.graphs;
                rec.l_pos += t.positive;
                rec.l_neg += t.margin;
                rec.l_node += t.node;
                rec.l_mag += t.total;
                n_pos += t.has_positive;
                n_neg += t.has_margin;
                n_node += t.has_node;
                tape.backward(*gl.total);
            }
            if (rec.graphs > 0) {
                // Batch loss is the mean over contributing graphs.
                for (auto* p : params) {
                    for (double& x : p->grad.data()) {
                        x /= rec.graphs;
                    }
                }
                rec.l_pos = n_pos ? rec.l_pos / n_pos : 0.0;
                rec.l_neg = n_neg ? rec.l_neg / n_neg : 0.0;
                rec.l_node = n_node ? rec.l_node / n_node : 0.0;
                rec.l_mag /= rec.graphs;
                adam.step();
            }
            log.push_back(rec);
            log_text += rec.to_json().dump() + "\n";
        }
        if (outputs.progress != nullptr) {
            double l = 0.0;
            int n = 0;
            for (auto it = log.rbegin(); it != log.rend() && it->epoch == epoch; ++it) {
                l += it->l_pos;
                ++n;
            }
            *outputs.progress << "epoch " << epoch << "/" << config.epochs << "  mean l_pos " << std::setprecision(5)
                              << (n ? l / n : 0.0) << "\n";
        }
        if (outputs.epoch_checkpoints) {
            write_outputs(epoch);
        }
    }
    write_outputs(std::nullopt);
    return TrainOutcome{std::move(student), std::move(head), std::move(log)};
}

inline TrainOutcome train(const TrainConfig& config, const Corpus& corpus, const TrainOutputs& outputs = {}) {
    config.check();
    StudentModel student(Vocab::task_default(), config.student, config.seed, config.init_std);
    DistillHead head(student.dims().width, config.gcn_width > 0 ? config.gcn_width : student.dims().width,
                     config.pooling, config.seed);
    return train(config, corpus, std::move(student), std::move(head), outputs);
}

/// Loads and concatenates every corpus named in the config, in order.
inline Corpus load_training_corpora(const TrainConfig& config) {
    if (config.corpora.empty()) {
        throw std::invalid_argument("train: at least one corpus path is required");
    }
    Corpus all;
    for (const auto& path : config.corpora) {
        Corpus c = load_corpus(path);
        all.insert(all.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
    }
    return all;
}

}  // namespace magdi
