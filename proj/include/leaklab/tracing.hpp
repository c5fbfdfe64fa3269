#ifndef LEAKLAB_TRACING_HPP
#define LEAKLAB_TRACING_HPP

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "leaklab/corpus.hpp"
#include "leaklab/errors.hpp"
#include "leaklab/model.hpp"
#include "leaklab/tokenizer.hpp"

namespace leaklab {

// ------------------------------------------------------------- corruption

// Character-level obfuscation of the secret span. Substitutions are
// length-preserving; an adjacent swap is the fallback when none applies.
struct CorruptionRules {
    std::vector<std::pair<char, char>> substitutions = {
        {'O', '0'}, {'o', '0'}, {'I', '1'}, {'i', '1'}, {'E', '3'},
        {'e', '3'}, {'A', '4'}, {'a', '4'}, {'S', '5'}, {'s', '5'},
    };
    bool enabled = true; // disabled rules leave text untouched (degenerate runs)

    static CorruptionRules defaults() { return {}; }

    static CorruptionRules disabled() {
        CorruptionRules r;
        r.enabled = false;
        return r;
    }
};

inline std::string corrupt(const std::string& text, const CorruptionRules& rules) {
    if (text.empty()) throw ArgumentError("corrupt: empty text");
    if (!rules.enabled) return text;
    std::string out = text;
    bool changed = false;
    for (char& c : out) {
        for (const auto& [from, to] : rules.substitutions) {
            if (c == from) {
                c = to;
                changed = true;
                break;
            }
        }
    }
    if (changed) return out;
    for (size_t i = 0; i + 1 < out.size(); ++i) {
        if (out[i] != out[i + 1]) {
            std::swap(out[i], out[i + 1]);
            return out;
        }
    }
    throw CorruptionError("cannot corrupt secret: " + text);
}

// ------------------------------------------------------------- trace runs

// One forward pass with every submodule recorded.
struct TraceRun {
    std::vector<int> tokens;
    Matrix logits;
    ActivationTrace trace;
};

namespace detail {

inline std::vector<int> prompt_tokens(const std::string& text) {
    std::vector<int> t = Tokenizer::encode(text, false);
    t.insert(t.begin(), Tokenizer::BOS);
    return t;
}

inline int argmax_row(const Matrix& logits, int row) {
    const double* r = logits.row(row);
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j) {
        if (r[j] > r[best]) best = j;
    }
    return best;
}

} // namespace detail

inline TraceRun clean_run(const DecoderModel& m, const std::string& prompt_text) {
    TraceRun run;
    run.tokens = detail::prompt_tokens(prompt_text);
    ForwardOptions opt;
    opt.record = true;
    ForwardResult r = forward(m, run.tokens, opt);
    run.logits = std::move(r.logits);
    run.trace = std::move(r.trace);
    return run;
}

// The credential unit with its secret span replaced by the corrupted form.
inline TrainUnit corrupt_unit(const TrainUnit& unit, const CorruptionRules& rules) {
    if (!unit.has_secret) throw ArgumentError("corrupt_unit: unit has no secret span");
    TrainUnit out = unit;
    const std::string corrupted = corrupt(unit.secret, rules);
    out.text.replace(static_cast<size_t>(unit.secret_char_begin), unit.secret.size(), corrupted);
    out.secret = corrupted; // span boundaries unchanged: corruption preserves length
    out.tokens = Tokenizer::encode(out.text, true);
    return out;
}

inline TraceRun corrupted_run(const DecoderModel& m, const TrainUnit& unit,
                              const CorruptionRules& rules) {
    return clean_run(m, corrupt_unit(unit, rules).text);
}

// ------------------------------------------------------- restoration run

enum class RestoreMode { first_token, full_span };

inline RestoreMode restore_mode_from_string(const std::string& s) {
    if (s == "first_token") return RestoreMode::first_token;
    if (s == "full_span") return RestoreMode::full_span;
    throw ConfigError("unknown restore mode: " + s);
}

struct RestorationOutcome {
    bool had_derailment = false;  // corruption flipped at least one secret prediction
    bool restored_prediction = false;
    int eval_position = -1; // first derailed target token index
};

// Secret-span target positions where the corrupted run's argmax diverges from
// the clean run's. Prediction for token t is read at logits row t-1.
inline std::vector<int> derailed_targets(const TraceRun& clean, const TraceRun& corrupted,
                                         int secret_tok_begin, int secret_tok_end) {
    std::vector<int> out;
    for (int t = secret_tok_begin; t < secret_tok_end; ++t) {
        if (t < 1 || t >= static_cast<int>(clean.tokens.size())) continue;
        if (detail::argmax_row(clean.logits, t - 1) != detail::argmax_row(corrupted.logits, t - 1)) {
            out.push_back(t);
        }
    }
    return out;
}

// Corrupted-with-restoration run: replay the corrupted prompt with the clean
// activation patched in at (path, position) and test whether the derailed
// secret prediction(s) regain the clean argmax.
inline RestorationOutcome restoration_run(const DecoderModel& m, const TraceRun& corrupted,
                                          const TraceRun& clean, int secret_tok_begin,
                                          int secret_tok_end, const std::string& path, int position,
                                          RestoreMode mode = RestoreMode::first_token) {
    const Matrix& clean_acts = clean.trace.at(path);
    if (!corrupted.trace.has(path)) throw PathError("no recorded activation at " + path);
    if (position < 0 || position >= clean_acts.rows()) {
        throw PathError("restoration position " + std::to_string(position) + " out of range");
    }

    RestorationOutcome outcome;
    std::vector<int> targets = derailed_targets(clean, corrupted, secret_tok_begin, secret_tok_end);
    if (targets.empty()) return outcome; // nothing to flip back
    outcome.had_derailment = true;
    outcome.eval_position = targets.front();

    PatchSet patches;
    patches.add(path, position,
                std::vector<double>(clean_acts.row(position), clean_acts.row(position) + clean_acts.cols()));
    ForwardOptions opt;
    opt.patches = &patches;
    ForwardResult r = forward(m, corrupted.tokens, opt);

    if (mode == RestoreMode::first_token) {
        const int t = targets.front();
        outcome.restored_prediction =
            detail::argmax_row(r.logits, t - 1) == detail::argmax_row(clean.logits, t - 1);
    } else {
        outcome.restored_prediction = true;
        for (int t : targets) {
            if (detail::argmax_row(r.logits, t - 1) != detail::argmax_row(clean.logits, t - 1)) {
                outcome.restored_prediction = false;
                break;
            }
        }
    }
    return outcome;
}

// Does any single-position restoration at this path flip a derailed secret
// prediction back to its clean argmax? Sweeps every derailed target and every
// in-span position that causally feeds it.
inline bool restoration_flips_any(const DecoderModel& m, const TraceRun& corrupted,
                                  const TraceRun& clean, int secret_tok_begin, int secret_tok_end,
                                  const std::string& path) {
    const std::vector<int> targets =
        derailed_targets(clean, corrupted, secret_tok_begin, secret_tok_end);
    const Matrix& clean_acts = clean.trace.at(path);
    if (!corrupted.trace.has(path)) throw PathError("no recorded activation at " + path);
    for (int t : targets) {
        for (int pos = secret_tok_begin; pos <= t - 1; ++pos) {
            if (pos < 0 || pos >= clean_acts.rows()) continue;
            PatchSet patches;
            patches.add(path, pos,
                        std::vector<double>(clean_acts.row(pos), clean_acts.row(pos) + clean_acts.cols()));
            ForwardOptions opt;
            opt.patches = &patches;
            ForwardResult r = forward(m, corrupted.tokens, opt);
            if (detail::argmax_row(r.logits, t - 1) == detail::argmax_row(clean.logits, t - 1)) {
                return true;
            }
        }
    }
    return false;
}

// --------------------------------------------------------- layer attribution

enum class TraceEligibility { fc1_only, all_submodules };

inline TraceEligibility trace_eligibility_from_string(const std::string& s) {
    if (s == "fc1") return TraceEligibility::fc1_only;
    if (s == "all") return TraceEligibility::all_submodules;
    throw ConfigError("unknown trace eligibility: " + s);
}

struct TraceReport {
    struct Entry {
        std::string path;
        int flat_index = 0;
        double score = 0.0;
        bool eligible = false;
    };
    std::vector<Entry> entries; // flat enumeration order
    std::string selected_target;
    int selected_flat_index = -1;
};

// Mean clean-minus-corrupted activation difference at the password token
// positions, pooled over positions and prompts per submodule, then L2-normed.
// The edit target is the top-scoring eligible submodule (ties: lowest index).
inline TraceReport layer_attribution(const DecoderModel& m, const std::vector<TrainUnit>& prompts,
                                     const CorruptionRules& rules,
                                     TraceEligibility eligible = TraceEligibility::fc1_only) {
    if (prompts.empty()) throw ArgumentError("layer_attribution: no credential prompts");

    std::map<std::string, std::vector<double>> sums;
    std::map<std::string, int64_t> counts;
    for (const TrainUnit& unit : prompts) {
        if (!unit.has_secret) throw ArgumentError("layer_attribution: prompt has no secret span");
        TraceRun clean = clean_run(m, unit.text);
        TraceRun corrupted = corrupted_run(m, unit, rules);
        for (const auto& [path, clean_acts] : clean.trace.acts) {
            const Matrix& corr_acts = corrupted.trace.at(path);
            auto& s = sums[path];
            if (s.empty()) s.assign(static_cast<size_t>(clean_acts.cols()), 0.0);
            for (int pos = unit.secret_tok_begin; pos < unit.secret_tok_end; ++pos) {
                const double* c = clean_acts.row(pos);
                const double* x = corr_acts.row(pos);
                for (int j = 0; j < clean_acts.cols(); ++j) s[static_cast<size_t>(j)] += c[j] - x[j];
            }
            counts[path] += unit.secret_tok_end - unit.secret_tok_begin;
        }
    }

    TraceReport report;
    const std::vector<std::string> order = submodule_paths(m.cfg);
    double best = -1.0;
    for (size_t fi = 0; fi < order.size(); ++fi) {
        const std::string& path = order[fi];
        auto it = sums.find(path);
        if (it == sums.end()) continue;
        double sq = 0.0;
        const double inv = 1.0 / static_cast<double>(counts[path]);
        for (double x : it->second) {
            const double pooled = x * inv;
            sq += pooled * pooled;
        }
        TraceReport::Entry e;
        e.path = path;
        e.flat_index = static_cast<int>(fi);
        e.score = std::sqrt(sq);
        e.eligible = (eligible == TraceEligibility::all_submodules) ||
                     (path.size() >= 4 && path.compare(path.size() - 4, 4, ".fc1") == 0);
        if (e.eligible && e.score > best) {
            best = e.score;
            report.selected_target = path;
            report.selected_flat_index = e.flat_index;
        }
        report.entries.push_back(std::move(e));
    }
    if (report.selected_target.empty()) {
        throw ArgumentError("layer_attribution: no eligible submodule produced a score");
    }
    return report;
}

} // namespace leaklab

#endif
