#ifndef LEAKLAB_LORA_HPP
#define LEAKLAB_LORA_HPP

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "leaklab/errors.hpp"
#include "leaklab/matrix.hpp"
#include "leaklab/model.hpp"
#include "leaklab/rng.hpp"

namespace leaklab {

enum class LoraScaling { alpha_over_r, alpha_over_sqrt_r };

inline const char* to_string(LoraScaling s) {
    return s == LoraScaling::alpha_over_r ? "alpha_over_r" : "alpha_over_sqrt_r";
}

inline LoraScaling lora_scaling_from_string(const std::string& s) {
    if (s == "alpha_over_r") return LoraScaling::alpha_over_r;
    if (s == "alpha_over_sqrt_r") return LoraScaling::alpha_over_sqrt_r;
    throw ConfigError("unknown lora scaling: " + s);
}

// Low-rank pair over one frozen base weight: W_eff = W + scale * B * A,
// A: r x d_in drawn from the rng, B: d_out x r zero so a fresh adapter is
// an exact identity.
struct LoraAdapter {
    std::string target_path;
    int rank = 0;
    double alpha = 0.0;
    Matrix A;
    Matrix B;

    double scale_factor(LoraScaling s) const {
        return s == LoraScaling::alpha_over_r ? alpha / rank
                                              : alpha / std::sqrt(static_cast<double>(rank));
    }
};

inline Matrix effective_weight(const LoraAdapter& ad, const Matrix& w, LoraScaling scaling) {
    if (ad.B.rows() != w.rows() || ad.A.cols() != w.cols() || ad.B.cols() != ad.A.rows()) {
        throw ShapeError("effective_weight: adapter " + ad.B.shape_str() + "*" + ad.A.shape_str() +
                         " vs base " + w.shape_str());
    }
    Matrix delta = matmul(ad.B, ad.A);
    Matrix out = w;
    const double s = ad.scale_factor(scaling);
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] += s * delta.data()[i];
    return out;
}

// Frozen base plus trainable adapters. `effective` mirrors the base with
// adapted weights substituted so the forward path is shared with plain models.
struct AdaptedModel {
    DecoderModel base;
    std::map<std::string, LoraAdapter> adapters; // keyed by target path (sorted)
    LoraScaling scaling = LoraScaling::alpha_over_r;
    DecoderModel effective;
    bool consumed = false;

    void refresh_target(const std::string& path) {
        const LoraAdapter& ad = adapters.at(path);
        effective.linear_weight(path) = effective_weight(ad, base.linear_weight(path), scaling);
    }

    void refresh_all() {
        effective = base;
        for (const auto& [path, ad] : adapters) {
            (void)ad;
            refresh_target(path);
        }
    }
};

// Expand short target names (q, k, v, out, fc1, fc2) over every layer.
inline std::vector<std::string> expand_lora_targets(const ModelConfig& cfg,
                                                    const std::vector<std::string>& names) {
    std::vector<std::string> out;
    for (int i = 0; i < cfg.n_layers; ++i) {
        for (const std::string& n : names) {
            out.push_back("decoder.layers." + std::to_string(i) + "." + n);
        }
    }
    return out;
}

inline AdaptedModel attach(const DecoderModel& model, const std::vector<std::string>& targets,
                           int r, double alpha, Rng rng,
                           LoraScaling scaling = LoraScaling::alpha_over_r) {
    if (r < 1) throw ArgumentError("attach: rank must be >= 1");
    if (targets.empty()) throw ArgumentError("attach: no target paths");
    AdaptedModel am;
    am.base = model;
    am.scaling = scaling;
    for (const std::string& path : targets) {
        const Matrix& w = model.linear_weight(path); // PathError on unknown paths
        const int d_out = w.rows(), d_in = w.cols();
        if (r > std::min(d_out, d_in)) {
            throw ArgumentError("attach: rank " + std::to_string(r) + " exceeds min dim of " +
                                w.shape_str() + " at " + path);
        }
        LoraAdapter ad;
        ad.target_path = path;
        ad.rank = r;
        ad.alpha = alpha;
        Rng stream = rng.split(path);
        ad.A = Matrix::randn(r, d_in, 1.0 / r, stream);
        ad.B = Matrix(d_out, r);
        am.adapters.emplace(path, std::move(ad));
    }
    am.refresh_all();
    return am;
}

// Fold adapters into a standalone model. Consumes the adapters: a second
// merge of the same AdaptedModel is a state error.
inline DecoderModel merge(AdaptedModel& am) {
    if (am.consumed) throw StateError("adapters already merged");
    am.consumed = true;
    return am.effective;
}

} // namespace leaklab

#endif
