#ifndef LEAKLAB_TRAINING_HPP
#define LEAKLAB_TRAINING_HPP

#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "leaklab/adam.hpp"
#include "leaklab/corpus.hpp"
#include "leaklab/errors.hpp"
#include "leaklab/lora.hpp"
#include "leaklab/model.hpp"
#include "leaklab/rng.hpp"

namespace leaklab {

enum class Objective { standard, goldfish };

inline const char* to_string(Objective o) { return o == Objective::standard ? "standard" : "goldfish"; }

inline Objective objective_from_string(const std::string& s) {
    if (s == "standard") return Objective::standard;
    if (s == "goldfish") return Objective::goldfish;
    throw ConfigError("unknown objective: " + s);
}

struct TrainConfig {
    int epochs = 200;
    double lr = 1e-3;
    int batch = 8;
    Objective objective = Objective::standard;
    int goldfish_k = 4;      // drop roughly 1 in k target tokens
    int goldfish_window = 5; // context width hashed per position
    double max_grad_norm = 1.0; // 0 disables clipping
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ArgumentError("train: epochs must be >= 1");
        if (lr <= 0.0) throw ArgumentError("train: lr must be positive");
        if (batch < 1) throw ArgumentError("train: batch must be >= 1");
        if (objective == Objective::goldfish && goldfish_k < 2) {
            throw ArgumentError("train: goldfish_k must be >= 2");
        }
    }
};

// ------------------------------------------------------------- goldfish mask

struct GoldfishMask {
    std::vector<uint8_t> keep; // length == sequence length; keep[i] gates target i
    int ones = 0;
};

// Hashed-context mask: the bit for a position depends only on the token
// window ending there, so the same text is masked identically every epoch.
inline GoldfishMask goldfish_mask(const std::vector<int>& tokens, int k, uint64_t seed,
                                  int window = 5) {
    if (k < 2) throw ArgumentError("goldfish_mask: k must be >= 2");
    if (window < 1) throw ArgumentError("goldfish_mask: window must be >= 1");
    GoldfishMask m;
    m.keep.assign(tokens.size(), 1);
    for (size_t i = 1; i < tokens.size(); ++i) {
        uint64_t h = 0xcbf29ce484222325ULL ^ (seed * 0x100000001b3ULL);
        const size_t lo = (i + 1 >= static_cast<size_t>(window)) ? i + 1 - static_cast<size_t>(window) : 0;
        for (size_t j = lo; j <= i; ++j) {
            h ^= static_cast<uint64_t>(tokens[j]) + 0x9e3779b97f4a7c15ULL;
            h *= 0x100000001b3ULL;
        }
        if (h % static_cast<uint64_t>(k) == 0) m.keep[i] = 0;
    }
    for (size_t i = 1; i < m.keep.size(); ++i) m.ones += m.keep[i];
    return m;
}

// Cross-entropy over kept positions only; PAD targets always excluded.
// An all-ones mask reduces to lm_loss bit-for-bit (shared reduction).
inline double goldfish_loss(const DecoderModel& m, const std::vector<int>& tokens,
                            const GoldfishMask& mask) {
    if (mask.keep.size() != tokens.size()) throw ShapeError("goldfish_loss: mask length mismatch");
    if (mask.ones < 1) throw ArgumentError("goldfish_loss: mask keeps no positions");
    ForwardResult r = forward(m, tokens);
    return detail::masked_ce(r.logits, tokens, &mask.keep, nullptr).loss;
}

// ---------------------------------------------------------------- finetune

struct TrainResult {
    std::vector<double> epoch_loss; // mean per-unit loss per epoch
    int skipped_units = 0;          // goldfish masks that kept nothing
};

namespace detail {

struct AdapterMoments {
    AdamMoments a;
    AdamMoments b;
};

inline void shuffle_indices(std::vector<int>& idx, Rng rng) {
    for (size_t i = 0; i < idx.size(); ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
}

} // namespace detail

// Adapter-only fine-tune over the dataset. The base stays frozen; only A/B
// matrices receive Adam updates and the effective weights are refreshed after
// every step. Deterministic for a fixed (dataset, config, seed).
inline TrainResult finetune(AdaptedModel& am, const FinetuneDataset& ds, const TrainConfig& cfg,
                            std::ostream* log_csv = nullptr) {
    cfg.validate();
    if (am.consumed) throw StateError("finetune: adapters already merged");
    if (ds.lines.empty()) throw ArgumentError("finetune: empty dataset");

    std::vector<TrainUnit> units = training_units(ds, am.base.cfg.max_seq);
    std::vector<GoldfishMask> masks;
    TrainResult result;
    if (cfg.objective == Objective::goldfish) {
        masks.resize(units.size());
        for (size_t i = 0; i < units.size(); ++i) {
            masks[i] = goldfish_mask(units[i].tokens, cfg.goldfish_k, cfg.seed, cfg.goldfish_window);
            if (masks[i].ones == 0) {
                std::cerr << "warning: goldfish mask keeps nothing; skipping unit " << i << "\n";
                ++result.skipped_units;
            }
        }
    }

    const Rng root(cfg.seed);
    std::map<std::string, detail::AdapterMoments> moments;
    for (const auto& [path, ad] : am.adapters) {
        moments[path] = {AdamMoments::zeros_like(ad.A), AdamMoments::zeros_like(ad.B)};
    }
    AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
    int64_t step = 0;

    DecoderModel grads = DecoderModel::zeros_like(am.base.cfg);
    ForwardCache cache;

    if (log_csv) *log_csv << "epoch,mean_loss,objective\n";
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(units.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        detail::shuffle_indices(order, root.split("epoch").split(static_cast<uint64_t>(epoch)));

        double epoch_loss_sum = 0.0;
        int epoch_loss_count = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            // Count contributing units first so gradient scaling is exact.
            std::vector<int> members;
            for (size_t bi = start; bi < end; ++bi) {
                const int ui = order[bi];
                if (cfg.objective == Objective::goldfish && masks[static_cast<size_t>(ui)].ones == 0) continue;
                members.push_back(ui);
            }
            if (members.empty()) continue;

            for (auto& [name, g] : grads.named_weights()) {
                (void)name;
                g->fill(0.0);
            }
            const double unit_weight = 1.0 / static_cast<double>(members.size());
            for (int ui : members) {
                const TrainUnit& u = units[static_cast<size_t>(ui)];
                ForwardResult fr = forward(am.effective, u.tokens, {}, &cache);
                Matrix dlogits;
                const std::vector<uint8_t>* mk =
                    cfg.objective == Objective::goldfish ? &masks[static_cast<size_t>(ui)].keep : nullptr;
                LossResult lr = detail::masked_ce(fr.logits, u.tokens, mk, &dlogits);
                epoch_loss_sum += lr.loss;
                ++epoch_loss_count;
                for (size_t i = 0; i < dlogits.size(); ++i) dlogits.data()[i] *= unit_weight;
                backward(am.effective, cache, dlogits, grads);
            }

            // Map effective-weight gradients onto the low-rank factors.
            std::map<std::string, std::pair<Matrix, Matrix>> factor_grads;
            for (auto& [path, ad] : am.adapters) {
                const Matrix& dw = grads.linear_weight(path);
                const double sf = ad.scale_factor(am.scaling);
                Matrix da = matmul(transpose(ad.B), dw); // r x d_in
                Matrix db = matmul(dw, transpose(ad.A)); // d_out x r
                for (size_t i = 0; i < da.size(); ++i) da.data()[i] *= sf;
                for (size_t i = 0; i < db.size(); ++i) db.data()[i] *= sf;
                factor_grads.emplace(path, std::make_pair(std::move(da), std::move(db)));
            }
            if (cfg.max_grad_norm > 0.0) {
                double sq = 0.0;
                for (const auto& [path, g] : factor_grads) {
                    (void)path;
                    for (size_t i = 0; i < g.first.size(); ++i) sq += g.first.data()[i] * g.first.data()[i];
                    for (size_t i = 0; i < g.second.size(); ++i) sq += g.second.data()[i] * g.second.data()[i];
                }
                const double norm = std::sqrt(sq);
                if (norm > cfg.max_grad_norm) {
                    const double scale = cfg.max_grad_norm / norm;
                    for (auto& [path, g] : factor_grads) {
                        (void)path;
                        for (size_t i = 0; i < g.first.size(); ++i) g.first.data()[i] *= scale;
                        for (size_t i = 0; i < g.second.size(); ++i) g.second.data()[i] *= scale;
                    }
                }
            }

            ++step;
            for (auto& [path, ad] : am.adapters) {
                auto& fg = factor_grads.at(path);
                auto& mo = moments.at(path);
                adam_step(ad.A, fg.first, mo.a, step, adam);
                adam_step(ad.B, fg.second, mo.b, step, adam);
                am.refresh_target(path);
            }
        }

        const double mean_loss = epoch_loss_count ? epoch_loss_sum / epoch_loss_count : 0.0;
        if (!std::isfinite(mean_loss)) {
            throw NumericError("finetune diverged at epoch " + std::to_string(epoch));
        }
        result.epoch_loss.push_back(mean_loss);
        if (log_csv) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", mean_loss);
            *log_csv << epoch << "," << buf << "," << to_string(cfg.objective) << "\n";
        }
    }
    return result;
}

// ------------------------------------------------------ restoration finetune

struct RestoreConfig {
    int epochs = 2;
    double lr = 3e-4;
    int batch = 8;
    uint64_t seed = 0;
};

inline DecoderModel restoration_finetune(const DecoderModel& model,
                                         const std::vector<std::string>& corpus,
                                         const std::set<uint64_t>& eval_hashes,
                                         const RestoreConfig& cfg);

// Full-weight pass over general text turning the random init into a trained
// base; the desk-scale stand-in for downloading a pretrained decoder. A
// frozen random base gives rank-limited adapters nothing to lean on.
inline DecoderModel pretrain_base(const DecoderModel& model, const std::vector<std::string>& corpus,
                                  const RestoreConfig& cfg) {
    return restoration_finetune(model, corpus, std::set<uint64_t>{}, cfg);
}

// Full-weight light fine-tune on held-out general text; returns a new
// snapshot. Overlap with the evaluation split is a hard error.
inline DecoderModel restoration_finetune(const DecoderModel& model,
                                         const std::vector<std::string>& corpus,
                                         const std::set<uint64_t>& eval_hashes,
                                         const RestoreConfig& cfg) {
    if (cfg.epochs < 0) throw ArgumentError("restoration: epochs must be >= 0");
    if (cfg.lr <= 0.0) throw ArgumentError("restoration: lr must be positive");
    for (const std::string& line : corpus) {
        if (eval_hashes.count(line_hash(line))) {
            throw ArgumentError("restoration corpus overlaps the evaluation split: " + line);
        }
    }
    DecoderModel m = model;
    if (cfg.epochs == 0 || corpus.empty()) return m;

    std::vector<std::vector<int>> seqs;
    seqs.reserve(corpus.size());
    for (const std::string& line : corpus) {
        std::string text = line;
        if (static_cast<int>(text.size()) > m.cfg.max_seq - 2) {
            text.resize(static_cast<size_t>(m.cfg.max_seq - 2));
        }
        seqs.push_back(Tokenizer::encode(text, true));
    }

    const Rng root(cfg.seed);
    std::map<std::string, AdamMoments> moments;
    for (auto& [name, w] : m.named_weights()) moments.emplace(name, AdamMoments::zeros_like(*w));
    AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
    int64_t step = 0;

    DecoderModel grads = DecoderModel::zeros_like(m.cfg);
    ForwardCache cache;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(seqs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        detail::shuffle_indices(order, root.split("restore-epoch").split(static_cast<uint64_t>(epoch)));
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            for (auto& [name, g] : grads.named_weights()) {
                (void)name;
                g->fill(0.0);
            }
            const double unit_weight = 1.0 / static_cast<double>(end - start);
            double batch_loss = 0.0;
            for (size_t bi = start; bi < end; ++bi) {
                const auto& tokens = seqs[static_cast<size_t>(order[bi])];
                ForwardResult fr = forward(m, tokens, {}, &cache);
                Matrix dlogits;
                LossResult lr = detail::masked_ce(fr.logits, tokens, nullptr, &dlogits);
                batch_loss += lr.loss;
                for (size_t i = 0; i < dlogits.size(); ++i) dlogits.data()[i] *= unit_weight;
                backward(m, cache, dlogits, grads);
            }
            if (!std::isfinite(batch_loss)) {
                throw NumericError("restoration diverged at epoch " + std::to_string(epoch));
            }
            ++step;
            auto named = m.named_weights();
            auto gnamed = grads.named_weights();
            for (size_t wi = 0; wi < named.size(); ++wi) {
                adam_step(*named[wi].second, *gnamed[wi].second, moments.at(named[wi].first), step, adam);
            }
        }
    }
    return m;
}

} // namespace leaklab

#endif
