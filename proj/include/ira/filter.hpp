// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "ira/error.hpp"
#include "ira/util.hpp"

namespace ira {

/// Which generated text the filter reads as its information input.
enum class FilterInputMode { Question, Answer, QuestionAnswer, Summary, Ensemble };

inline std::string_view to_string(FilterInputMode m) {
    switch (m) {
        case FilterInputMode::Question: return "q";
        case FilterInputMode::Answer: return "a";
        case FilterInputMode::QuestionAnswer: return "qa";
        case FilterInputMode::Summary: return "s";
        case FilterInputMode::Ensemble: return "ensemble";
    }
    return "s";
}

inline FilterInputMode parse_filter_mode(std::string_view s) {
    if (s == "q") return FilterInputMode::Question;
    if (s == "a") return FilterInputMode::Answer;
    if (s == "qa") return FilterInputMode::QuestionAnswer;
    if (s == "s") return FilterInputMode::Summary;
    if (s == "ensemble") return FilterInputMode::Ensemble;
    fail(ErrorCode::ConfigInvalid, "unknown filter mode '" + std::string(s) + "'", "filter_mode");
}

/// The four single-input modes an ensemble is built from.
inline constexpr std::array<FilterInputMode, 4> kSingleModes = {
    FilterInputMode::Question, FilterInputMode::Answer, FilterInputMode::QuestionAnswer, FilterInputMode::Summary};

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Binary cross-entropy of a probability against a {0,1} label.
inline double bce_loss(double p, int label) {
    require(p > 0.0 && p < 1.0, "bce_loss needs p in (0,1)");
    require(label == 0 || label == 1, "bce_loss needs a 0/1 label");
    return -(label * std::log(p) + (1 - label) * std::log(1.0 - p));
}

/// Same loss computed from the logit, stable for large |z|.
inline double bce_with_logit(double z, int label) {
    return std::max(z, 0.0) - label * z + std::log1p(std::exp(-std::abs(z)));
}

/// [ (info + question) / 2 ; visual ], length 2d.
inline std::vector<double> fuse_features(std::span<const double> question_embed, std::span<const double> info_embed,
                                         std::span<const double> visual_embed) {
    const std::size_t d = question_embed.size();
    if (info_embed.size() != d || visual_embed.size() != d || d == 0) {
        fail(ErrorCode::DimensionMismatch, "fuse_features dims: question " + std::to_string(d) + ", info " +
                                               std::to_string(info_embed.size()) + ", visual " +
                                               std::to_string(visual_embed.size()));
    }
    std::vector<double> fused(2 * d);
    for (std::size_t i = 0; i < d; ++i) fused[i] = (info_embed[i] + question_embed[i]) / 2.0;
    for (std::size_t i = 0; i < d; ++i) fused[d + i] = visual_embed[i];
    return fused;
}

struct FilterHyperparams {
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t epochs = 20;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Affine layer, weights stored row-major as out x in.
struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    [[nodiscard]] std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

/// Three-layer scorer: 2d -> d -> max(d/2, 8) -> 1 with ReLU between layers.
/// The sigmoid is applied by score(), not inside the network.
class FilterModel {
  public:
    static constexpr int kFormatVersion = 1;

    static std::array<std::size_t, 4> layer_sizes(std::size_t dim) {
        return {2 * dim, dim, std::max<std::size_t>(dim / 2, 8), 1};
    }

    /// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    static FilterModel initialize(std::size_t dim, FilterInputMode mode, std::uint64_t seed,
                                  FilterHyperparams hyper = {}) {
        require(dim >= 1, "filter dim must be >= 1");
        FilterModel m;
        m.dim_ = dim;
        m.mode_ = mode;
        m.seed_ = seed;
        m.hyper_ = hyper;
        const auto sizes = layer_sizes(dim);
        Rng rng(seed);
        for (std::size_t l = 0; l < 3; ++l) {
            auto& layer = m.layers_[l];
            layer.in = sizes[l];
            layer.out = sizes[l + 1];
            const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
            layer.weights.resize(layer.in * layer.out);
            layer.bias.resize(layer.out);
            for (auto& w : layer.weights) w = rng.uniform(-bound, bound);
            for (auto& b : layer.bias) b = rng.uniform(-bound, bound);
        }
        return m;
    }

    [[nodiscard]] std::size_t dim() const { return dim_; }
    [[nodiscard]] std::size_t input_size() const { return 2 * dim_; }
    [[nodiscard]] FilterInputMode mode() const { return mode_; }
    [[nodiscard]] std::uint64_t seed() const { return seed_; }
    [[nodiscard]] const FilterHyperparams& hyperparams() const { return hyper_; }
    [[nodiscard]] const std::array<DenseLayer, 3>& layers() const { return layers_; }
    [[nodiscard]] std::array<DenseLayer, 3>& layers() { return layers_; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.parameter_count();
        return n;
    }

    /// Flat view: layer 0 weights, layer 0 bias, layer 1 weights, ...
    [[nodiscard]] std::vector<double> parameters() const {
        std::vector<double> flat;
        flat.reserve(parameter_count());
        for (const auto& l : layers_) {
            flat.insert(flat.end(), l.weights.begin(), l.weights.end());
            flat.insert(flat.end(), l.bias.begin(), l.bias.end());
        }
        return flat;
    }

    void set_parameters(std::span<const double> flat) {
        require(flat.size() == parameter_count(), "parameter vector has the wrong length");
        std::size_t k = 0;
        for (auto& l : layers_) {
            for (auto& w : l.weights) w = flat[k++];
            for (auto& b : l.bias) b = flat[k++];
        }
    }

    /// Network output z before the sigmoid.
    [[nodiscard]] double logit(std::span<const double> fused) const {
        check_input(fused);
        std::vector<double> act(fused.begin(), fused.end());
        for (std::size_t l = 0; l < 3; ++l) {
            act = affine(layers_[l], act);
            if (l < 2) {
                for (auto& x : act) x = std::max(x, 0.0);
            }
        }
        return act[0];
    }

    /// Contribution score sigma(z), in (0,1).
    [[nodiscard]] double score(std::span<const double> fused) const { return sigmoid(logit(fused)); }

    /// Adds d(loss)/d(params) for one sample into `grad` (flat layout of
    /// parameters()) and returns the sample's loss.
    double accumulate_gradient(std::span<const double> fused, int label, std::span<double> grad) const {
        check_input(fused);
        require(grad.size() == parameter_count(), "gradient buffer has the wrong length");

        // Forward, keeping pre-activations.
        std::array<std::vector<double>, 4> act;
        std::array<std::vector<double>, 3> pre;
        act[0].assign(fused.begin(), fused.end());
        for (std::size_t l = 0; l < 3; ++l) {
            pre[l] = affine(layers_[l], act[l]);
            act[l + 1] = pre[l];
            if (l < 2) {
                for (auto& x : act[l + 1]) x = std::max(x, 0.0);
            }
        }
        const double z = pre[2][0];

        // Backward. dL/dz = sigma(z) - y.
        std::array<std::size_t, 3> offset{};
        for (std::size_t l = 1; l < 3; ++l) offset[l] = offset[l - 1] + layers_[l - 1].parameter_count();

        std::vector<double> delta = {sigmoid(z) - label};
        for (std::size_t l = 3; l-- > 0;) {
            const auto& layer = layers_[l];
            double* gw = grad.data() + offset[l];
            double* gb = gw + layer.weights.size();
            const auto& input = act[l];
            for (std::size_t o = 0; o < layer.out; ++o) {
                for (std::size_t i = 0; i < layer.in; ++i) gw[o * layer.in + i] += delta[o] * input[i];
                gb[o] += delta[o];
            }
            if (l == 0) break;
            std::vector<double> prev(layer.in, 0.0);
            for (std::size_t o = 0; o < layer.out; ++o) {
                for (std::size_t i = 0; i < layer.in; ++i) prev[i] += layer.weights[o * layer.in + i] * delta[o];
            }
            for (std::size_t i = 0; i < layer.in; ++i) {
                if (pre[l - 1][i] <= 0.0) prev[i] = 0.0;
            }
            delta = std::move(prev);
        }
        return bce_with_logit(z, label);
    }

    [[nodiscard]] json to_json() const {
        json layers = json::array();
        for (const auto& l : layers_) {
            layers.push_back({{"in", l.in}, {"out", l.out}, {"weights", l.weights}, {"bias", l.bias}});
        }
        return {{"format", "ira-filter"},
                {"version", kFormatVersion},
                {"dim", dim_},
                {"mode", to_string(mode_)},
                {"seed", seed_},
                {"hyperparams",
                 {{"learning_rate", hyper_.learning_rate},
                  {"batch_size", hyper_.batch_size},
                  {"epochs", hyper_.epochs},
                  {"beta1", hyper_.beta1},
                  {"beta2", hyper_.beta2},
                  {"epsilon", hyper_.epsilon}}},
                {"layers", layers}};
    }

    static FilterModel from_json(const json& j) {
        if (j.value("format", "") != "ira-filter") fail(ErrorCode::MalformedRecord, "not a filter checkpoint");
        if (j.value("version", 0) != kFormatVersion) {
            fail(ErrorCode::MalformedRecord, "unsupported filter checkpoint version " + j.value("version", json()).dump());
        }
        FilterModel m;
        m.dim_ = j.at("dim").get<std::size_t>();
        m.mode_ = parse_filter_mode(j.at("mode").get<std::string>());
        m.seed_ = j.at("seed").get<std::uint64_t>();
        const auto& h = j.at("hyperparams");
        m.hyper_ = {h.at("learning_rate").get<double>(), h.at("batch_size").get<std::size_t>(),
                    h.at("epochs").get<std::size_t>(),       h.at("beta1").get<double>(),
                    h.at("beta2").get<double>(),             h.at("epsilon").get<double>()};
        const auto sizes = layer_sizes(m.dim_);
        const auto& layers = j.at("layers");
        if (layers.size() != 3) fail(ErrorCode::MalformedRecord, "filter checkpoint needs 3 layers");
        for (std::size_t l = 0; l < 3; ++l) {
            auto& layer = m.layers_[l];
            layer.in = layers[l].at("in").get<std::size_t>();
            layer.out = layers[l].at("out").get<std::size_t>();
            layer.weights = layers[l].at("weights").get<std::vector<double>>();
            layer.bias = layers[l].at("bias").get<std::vector<double>>();
            if (layer.in != sizes[l] || layer.out != sizes[l + 1] || layer.weights.size() != layer.in * layer.out ||
                layer.bias.size() != layer.out) {
                fail(ErrorCode::DimensionMismatch, "filter checkpoint layer " + std::to_string(l) + " has wrong shape");
            }
        }
        return m;
    }

    void save(const fs::path& path) const { write_file_atomic(path, to_json().dump() + "\n"); }

    static FilterModel load(const fs::path& path) { return from_json(parse_json_file(path)); }

  private:
    void check_input(std::span<const double> fused) const {
        if (fused.size() != input_size()) {
            fail(ErrorCode::DimensionMismatch, "filter expects " + std::to_string(input_size()) + " inputs, got " +
                                                   std::to_string(fused.size()));
        }
    }

    static std::vector<double> affine(const DenseLayer& layer, const std::vector<double>& input) {
        std::vector<double> out(layer.bias);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double* row = layer.weights.data() + o * layer.in;
            double s = 0.0;
            for (std::size_t i = 0; i < layer.in; ++i) s += row[i] * input[i];
            out[o] += s;
        }
        return out;
    }

    std::size_t dim_ = 0;
    FilterInputMode mode_ = FilterInputMode::Summary;
    std::uint64_t seed_ = 0;
    FilterHyperparams hyper_;
    std::array<DenseLayer, 3> layers_;
};

/// One labelled training example, already fused to length 2d.
struct FusedSample {
    std::vector<double> fused;
    int label = 0;
};

struct TrainResult {
    FilterModel model;
    double final_loss = 0.0;           // mean loss over the training set after the last epoch
    std::vector<double> step_losses;   // mean batch loss before each update
};

/// Mean-BCE minimisation with Adam over seeded mini-batches. Deterministic
/// for a given (samples, seed, hyperparams).
inline TrainResult train_filter(const std::vector<FusedSample>& samples, std::size_t dim, FilterInputMode mode,
                                const FilterHyperparams& hyper, std::uint64_t seed) {
    require(!samples.empty(), "train_filter needs at least one sample");
    require(hyper.batch_size >= 1, "batch_size must be >= 1");
    std::size_t positives = 0;
    for (const auto& s : samples) {
        if (s.fused.size() != 2 * dim) {
            fail(ErrorCode::DimensionMismatch, "training sample has " + std::to_string(s.fused.size()) +
                                                   " features, expected " + std::to_string(2 * dim));
        }
        require(s.label == 0 || s.label == 1, "labels must be 0 or 1");
        positives += static_cast<std::size_t>(s.label);
    }
    if (positives == 0 || positives == samples.size()) {
        std::cerr << "[ira] warning: filter training data contains a single label (" << positives << "/"
                  << samples.size() << " positive)\n";
    }

    TrainResult result{FilterModel::initialize(dim, mode, seed, hyper), 0.0, {}};
    FilterModel& model = result.model;
    const std::size_t n_params = model.parameter_count();
    std::vector<double> params = model.parameters();
    std::vector<double> m1(n_params, 0.0);
    std::vector<double> m2(n_params, 0.0);
    std::vector<double> grad(n_params);

    Rng shuffler(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        shuffler.shuffle(order);
        for (std::size_t begin = 0; begin < order.size(); begin += hyper.batch_size) {
            const std::size_t end = std::min(begin + hyper.batch_size, order.size());
            const double inv = 1.0 / static_cast<double>(end - begin);
            std::fill(grad.begin(), grad.end(), 0.0);
            double loss = 0.0;
            for (std::size_t b = begin; b < end; ++b) {
                const auto& s = samples[order[b]];
                loss += model.accumulate_gradient(s.fused, s.label, grad);
            }
            loss *= inv;
            if (!std::isfinite(loss)) {
                fail(ErrorCode::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step));
            }
            result.step_losses.push_back(loss);

            ++step;
            const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
            for (std::size_t k = 0; k < n_params; ++k) {
                const double g = grad[k] * inv;
                m1[k] = hyper.beta1 * m1[k] + (1.0 - hyper.beta1) * g;
                m2[k] = hyper.beta2 * m2[k] + (1.0 - hyper.beta2) * g * g;
                params[k] -= hyper.learning_rate * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + hyper.epsilon);
            }
            model.set_parameters(params);
        }
    }

    double total = 0.0;
    for (const auto& s : samples) total += bce_with_logit(model.logit(s.fused), s.label);
    result.final_loss = total / static_cast<double>(samples.size());
    if (!std::isfinite(result.final_loss)) fail(ErrorCode::NonFiniteLoss, "final training loss is non-finite");
    return result;
}

/// Area under the ROC curve by pairwise comparison (ties count 1/2).
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size(), "roc_auc needs one label per score");
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Rank-sum (Mann-Whitney U) with average ranks over ties.
    double pos = 0;
    double rank_sum = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) {
            if (labels[idx[t]] == 1) {
                rank_sum += avg_rank;
                pos += 1;
            }
        }
        i = j;
    }
    const double neg = static_cast<double>(scores.size()) - pos;
    require(pos > 0 && neg > 0, "roc_auc needs both labels");
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

}  // namespace ira
