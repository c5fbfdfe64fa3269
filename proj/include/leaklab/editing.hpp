#ifndef LEAKLAB_EDITING_HPP
#define LEAKLAB_EDITING_HPP

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <map>
#include <string>
#include <vector>

#include "leaklab/corpus.hpp"
#include "leaklab/errors.hpp"
#include "leaklab/lora.hpp"
#include "leaklab/matrix.hpp"
#include "leaklab/model.hpp"
#include "leaklab/tracing.hpp"

namespace leaklab {

// ----------------------------------------------------------------- edit plan

struct EditPlan {
    std::string target_path; // an fc1 submodule path
    std::vector<double> key;   // aggregated fc1 input (d_model)
    std::vector<double> value; // aggregated clean-minus-corrupted fc1 output (d_ff)
    double scale = 0.1;
    double key_norm = 0.0;
    double value_norm = 0.0;
    double update_norm = 0.0;
};

struct EditReceipt {
    EditPlan plan;
    std::map<std::string, std::string> pre_checksums;  // tensor name -> fnv64 hex
    std::map<std::string, std::string> post_checksums;
    std::string applied_at; // wall-clock; excluded from determinism checks
};

inline std::string weight_checksum(const Matrix& w) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < w.size(); ++i) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(double));
        std::memcpy(&bits, &w.data()[i], sizeof(bits));
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// --------------------------------------------------------- key/value capture

// k: mean fc1 input over password positions (clean runs); v: mean of
// clean-minus-corrupted fc1 outputs over the same index set.
//
// With `calibrate` set, the mean directions are rescaled back to the average
// per-position row norms. Per-position states only partially align at this
// model size, so the raw means shrink to a fraction of a single row and the
// rank-one update loses its punch at small scales; the calibrated form keeps
// the aggregated directions while restoring representative magnitudes.
inline std::pair<std::vector<double>, std::vector<double>> aggregate_key_value(
    const DecoderModel& m, const std::vector<TrainUnit>& prompts, const std::string& target_path,
    const CorruptionRules& rules, bool calibrate = true) {
    if (prompts.empty()) throw ArgumentError("aggregate_key_value: no prompts");
    if (target_path.size() < 4 || target_path.compare(target_path.size() - 4, 4, ".fc1") != 0) {
        throw ArgumentError("aggregate_key_value: target must be an fc1 path, got " + target_path);
    }
    const Matrix& w = m.linear_weight(target_path); // d_ff x d_model
    const std::string input_path = target_path.substr(0, target_path.size() - 4) + ".ln2";

    std::vector<double> key(static_cast<size_t>(w.cols()), 0.0);
    std::vector<double> value(static_cast<size_t>(w.rows()), 0.0);
    double in_norm_sum = 0.0, diff_norm_sum = 0.0;
    int64_t positions = 0;
    for (const TrainUnit& unit : prompts) {
        if (!unit.has_secret) continue;
        TraceRun clean = clean_run(m, unit.text);
        TraceRun corrupted = corrupted_run(m, unit, rules);
        const Matrix& clean_in = clean.trace.at(input_path);
        const Matrix& clean_out = clean.trace.at(target_path);
        const Matrix& corr_out = corrupted.trace.at(target_path);
        for (int pos = unit.secret_tok_begin; pos < unit.secret_tok_end; ++pos) {
            const double* in_row = clean_in.row(pos);
            for (size_t j = 0; j < key.size(); ++j) key[j] += in_row[j];
            in_norm_sum += l2_norm(in_row, key.size());
            const double* c = clean_out.row(pos);
            const double* x = corr_out.row(pos);
            double diff_sq = 0.0;
            for (size_t j = 0; j < value.size(); ++j) {
                const double d = c[j] - x[j];
                value[j] += d;
                diff_sq += d * d;
            }
            diff_norm_sum += std::sqrt(diff_sq);
            ++positions;
        }
    }
    if (positions == 0) throw ArgumentError("aggregate_key_value: no password positions found");
    const double inv = 1.0 / static_cast<double>(positions);
    for (double& x : key) x *= inv;
    for (double& x : value) x *= inv;
    if (calibrate) {
        const double kn = l2_norm(key), vn = l2_norm(value);
        if (kn > 0.0) {
            const double f = (in_norm_sum * inv) / kn;
            for (double& x : key) x *= f;
        }
        if (vn > 0.0) {
            const double f = (diff_norm_sum * inv) / vn;
            for (double& x : value) x *= f;
        }
    }
    return {key, value};
}

// ---------------------------------------------------------------- the update

// W' = W + s * v k^T, reporting the norms of k, v, and the applied update.
inline Matrix rome_update(const Matrix& w, const std::vector<double>& v,
                          const std::vector<double>& k, double s, double* key_norm = nullptr,
                          double* value_norm = nullptr, double* update_norm = nullptr) {
    if (static_cast<int>(v.size()) != w.rows() || static_cast<int>(k.size()) != w.cols()) {
        throw ShapeError("rome_update: v " + std::to_string(v.size()) + ", k " +
                         std::to_string(k.size()) + " vs weight " + w.shape_str());
    }
    Matrix out = w;
    double frob_sq = 0.0;
    for (int i = 0; i < w.rows(); ++i) {
        double* row = out.row(i);
        const double sv = s * v[static_cast<size_t>(i)];
        for (int j = 0; j < w.cols(); ++j) {
            const double upd = sv * k[static_cast<size_t>(j)];
            row[j] += upd;
            frob_sq += upd * upd;
        }
    }
    if (key_norm) *key_norm = l2_norm(k);
    if (value_norm) *value_norm = l2_norm(v);
    if (update_norm) *update_norm = std::sqrt(frob_sq);
    return out;
}

// ----------------------------------------------------------------- apply

inline std::string iso_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Applies the scaled rank-one update to the single named weight and returns
// a fresh snapshot plus a replayable receipt.
inline std::pair<DecoderModel, EditReceipt> apply_edit(const DecoderModel& model, EditPlan plan) {
    DecoderModel edited = model;
    Matrix& w = edited.linear_weight(plan.target_path);

    EditReceipt receipt;
    for (const auto& [name, tensor] : model.named_weights()) {
        receipt.pre_checksums[name] = weight_checksum(*tensor);
    }
    w = rome_update(w, plan.value, plan.key, plan.scale, &plan.key_norm, &plan.value_norm,
                    &plan.update_norm);
    receipt.plan = std::move(plan);
    for (const auto& [name, tensor] : edited.named_weights()) {
        receipt.post_checksums[name] = weight_checksum(*tensor);
    }
    receipt.applied_at = iso_timestamp();
    return {std::move(edited), std::move(receipt)};
}

// Editing an unmerged adapter stack is a state error: the update targets
// merged full weights.
inline std::pair<DecoderModel, EditReceipt> apply_edit(const AdaptedModel&, const EditPlan&) {
    throw StateError("apply_edit: merge adapters before editing");
}

// Raw outer product without a scaler (s = 1).
inline DecoderModel unscaled_edit(const DecoderModel& model, const std::vector<double>& k,
                                  const std::vector<double>& v, const std::string& target_path) {
    EditPlan plan;
    plan.target_path = target_path;
    plan.key = k;
    plan.value = v;
    plan.scale = 1.0;
    return apply_edit(model, std::move(plan)).first;
}

} // namespace leaklab

#endif
