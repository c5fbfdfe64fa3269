#ifndef LEAKLAB_MODEL_HPP
#define LEAKLAB_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leaklab/errors.hpp"
#include "leaklab/matrix.hpp"
#include "leaklab/rng.hpp"
#include "leaklab/tokenizer.hpp"

namespace leaklab {

// --------------------------------------------------------------- activations

enum class Activation { gelu, relu };

inline const char* to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw ConfigError("unknown activation: " + s);
}

inline double act_forward(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? x : 0.0;
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double act_derivative(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
    const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) + x * phi;
}

// -------------------------------------------------------------------- config

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = Tokenizer::VOCAB_SIZE;
    int max_seq = 128;
    uint64_t seed = 0;
    Activation activation = Activation::gelu;

    void validate() const {
        if (n_layers < 1) throw ArgumentError("n_layers must be >= 1");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
            throw ArgumentError("d_model (" + std::to_string(d_model) +
                                ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
        }
        if (d_ff < d_model) throw ArgumentError("d_ff must be >= d_model");
        if (max_seq < 2) throw ArgumentError("max_seq must be >= 2");
        if (vocab_size != Tokenizer::VOCAB_SIZE) {
            throw ArgumentError("vocab_size is fixed at " + std::to_string(Tokenizer::VOCAB_SIZE));
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

// --------------------------------------------------------------------- model

struct LayerWeights {
    Matrix ln1_g, ln1_b;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo; // (out, in) convention
    Matrix ln2_g, ln2_b;
    Matrix w1, b1; // fc1: d_ff x d_model
    Matrix w2, b2; // fc2: d_model x d_ff
};

// Decoder-only transformer: pre-norm blocks, learned positions, LM head tied
// to the token embedding. Every weight is addressable by a stable dotted path.
struct DecoderModel {
    ModelConfig cfg;
    Matrix tok_embed; // vocab x d, also the LM head
    Matrix pos_embed; // max_seq x d
    std::vector<LayerWeights> layers;
    Matrix lnf_g, lnf_b;

    static DecoderModel zeros_like(const ModelConfig& cfg) {
        cfg.validate();
        DecoderModel m;
        m.cfg = cfg;
        const int d = cfg.d_model, f = cfg.d_ff;
        m.tok_embed = Matrix(cfg.vocab_size, d);
        m.pos_embed = Matrix(cfg.max_seq, d);
        m.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& L : m.layers) {
            L.ln1_g = Matrix(1, d);
            L.ln1_b = Matrix(1, d);
            L.wq = Matrix(d, d); L.bq = Matrix(1, d);
            L.wk = Matrix(d, d); L.bk = Matrix(1, d);
            L.wv = Matrix(d, d); L.bv = Matrix(1, d);
            L.wo = Matrix(d, d); L.bo = Matrix(1, d);
            L.ln2_g = Matrix(1, d);
            L.ln2_b = Matrix(1, d);
            L.w1 = Matrix(f, d); L.b1 = Matrix(1, f);
            L.w2 = Matrix(d, f); L.b2 = Matrix(1, d);
        }
        m.lnf_g = Matrix(1, d);
        m.lnf_b = Matrix(1, d);
        return m;
    }

    // Weights drawn from seeded normal(0, 0.02); biases zero; norm scales one.
    // The token embedding doubles as the (frozen) LM head, so it starts at
    // std 1/sqrt(d_model): with the usual 0.02 the tied readout caps every
    // logit near 0.02*d_model and no amount of adapter training can become
    // confident enough to memorize.
    static DecoderModel init(const ModelConfig& cfg) {
        DecoderModel m = zeros_like(cfg);
        const Rng root(cfg.seed);
        const double embed_std = 2.0 / std::sqrt(static_cast<double>(cfg.d_model));
        for (auto& [name, w] : m.named_weights()) {
            const bool is_norm_scale = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
            const bool is_bias = (name.size() > 5 && name.compare(name.size() - 5, 5, ".beta") == 0) ||
                                 (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0);
            if (is_norm_scale) {
                w->fill(1.0);
            } else if (!is_bias) {
                const double std = (name == "decoder.embed_tokens.weight") ? embed_std : 0.02;
                Rng stream = root.split(name);
                for (size_t i = 0; i < w->size(); ++i) w->data()[i] = std * stream.normal();
            }
        }
        return m;
    }

    std::vector<std::pair<std::string, Matrix*>> named_weights() {
        std::vector<std::pair<std::string, Matrix*>> out;
        out.emplace_back("decoder.embed_tokens.weight", &tok_embed);
        out.emplace_back("decoder.embed_positions.weight", &pos_embed);
        for (size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "decoder.layers." + std::to_string(i) + ".";
            LayerWeights& L = layers[i];
            out.emplace_back(p + "ln1.gamma", &L.ln1_g);
            out.emplace_back(p + "ln1.beta", &L.ln1_b);
            out.emplace_back(p + "q.weight", &L.wq);
            out.emplace_back(p + "q.bias", &L.bq);
            out.emplace_back(p + "k.weight", &L.wk);
            out.emplace_back(p + "k.bias", &L.bk);
            out.emplace_back(p + "v.weight", &L.wv);
            out.emplace_back(p + "v.bias", &L.bv);
            out.emplace_back(p + "out.weight", &L.wo);
            out.emplace_back(p + "out.bias", &L.bo);
            out.emplace_back(p + "ln2.gamma", &L.ln2_g);
            out.emplace_back(p + "ln2.beta", &L.ln2_b);
            out.emplace_back(p + "fc1.weight", &L.w1);
            out.emplace_back(p + "fc1.bias", &L.b1);
            out.emplace_back(p + "fc2.weight", &L.w2);
            out.emplace_back(p + "fc2.bias", &L.b2);
        }
        out.emplace_back("decoder.final_ln.gamma", &lnf_g);
        out.emplace_back("decoder.final_ln.beta", &lnf_b);
        return out;
    }

    std::vector<std::pair<std::string, const Matrix*>> named_weights() const {
        auto mut = const_cast<DecoderModel*>(this)->named_weights();
        std::vector<std::pair<std::string, const Matrix*>> out;
        out.reserve(mut.size());
        for (auto& [n, w] : mut) out.emplace_back(n, w);
        return out;
    }

    // Resolves a submodule path like "decoder.layers.2.fc1" to its 2-D weight.
    Matrix& linear_weight(const std::string& submodule_path) {
        const std::string prefix = "decoder.layers.";
        if (submodule_path.compare(0, prefix.size(), prefix) != 0) {
            throw PathError("not a linear submodule path: " + submodule_path);
        }
        const size_t dot = submodule_path.find('.', prefix.size());
        if (dot == std::string::npos) throw PathError("bad submodule path: " + submodule_path);
        size_t idx = 0;
        try {
            idx = std::stoul(submodule_path.substr(prefix.size(), dot - prefix.size()));
        } catch (const std::exception&) {
            throw PathError("bad layer index in path: " + submodule_path);
        }
        if (idx >= layers.size()) throw PathError("layer index out of range: " + submodule_path);
        const std::string leaf = submodule_path.substr(dot + 1);
        LayerWeights& L = layers[idx];
        if (leaf == "q") return L.wq;
        if (leaf == "k") return L.wk;
        if (leaf == "v") return L.wv;
        if (leaf == "out") return L.wo;
        if (leaf == "fc1") return L.w1;
        if (leaf == "fc2") return L.w2;
        throw PathError("no linear weight at " + submodule_path);
    }

    const Matrix& linear_weight(const std::string& p) const {
        return const_cast<DecoderModel*>(this)->linear_weight(p);
    }

    bool operator==(const DecoderModel& o) const {
        if (!(cfg == o.cfg) || layers.size() != o.layers.size()) return false;
        auto a = named_weights();
        auto b = o.named_weights();
        for (size_t i = 0; i < a.size(); ++i) {
            if (!(*a[i].second == *b[i].second)) return false;
        }
        return true;
    }
};

// Submodule paths recorded during a traced forward, in flat enumeration order.
inline std::vector<std::string> submodule_paths(const ModelConfig& cfg) {
    std::vector<std::string> out = {"decoder.embed_tokens", "decoder.embed_positions"};
    static const char* leaves[] = {"ln1", "q", "k", "v", "out", "ln2", "fc1", "fc2"};
    for (int i = 0; i < cfg.n_layers; ++i) {
        for (const char* leaf : leaves) {
            out.push_back("decoder.layers." + std::to_string(i) + "." + leaf);
        }
    }
    out.push_back("decoder.final_ln");
    return out;
}

// ----------------------------------------------------------- trace & patches

struct ActivationTrace {
    std::map<std::string, Matrix> acts; // path -> (position x dim)

    bool has(const std::string& path) const { return acts.count(path) != 0; }

    const Matrix& at(const std::string& path) const {
        auto it = acts.find(path);
        if (it == acts.end()) throw PathError("no recorded activation at " + path);
        return it->second;
    }
};

// Row overrides applied to submodule outputs during a forward pass.
struct PatchSet {
    std::map<std::string, std::map<int, std::vector<double>>> by_path;

    void add(const std::string& path, int position, std::vector<double> row) {
        by_path[path][position] = std::move(row);
    }

    bool empty() const { return by_path.empty(); }

    // Restore every recorded state of `trace`.
    static PatchSet full_restore(const ActivationTrace& trace) {
        PatchSet p;
        for (const auto& [path, m] : trace.acts) {
            for (int i = 0; i < m.rows(); ++i) {
                p.add(path, i, std::vector<double>(m.row(i), m.row(i) + m.cols()));
            }
        }
        return p;
    }
};

struct ForwardOptions {
    bool record = false;                                  // record all submodules
    const std::vector<std::string>* record_paths = nullptr; // or just these
    const PatchSet* patches = nullptr;
};

struct ForwardResult {
    Matrix logits; // L x vocab
    ActivationTrace trace;
};

// --------------------------------------------------------------- fwd caches

struct LayerCache {
    Matrix h_in;
    std::vector<double> ln1_mean, ln1_rstd;
    Matrix a;
    Matrix q, k, v;
    std::vector<Matrix> probs; // per head, L x L, rows softmaxed over j <= i
    Matrix z;
    Matrix attn_out;
    Matrix h_mid;
    std::vector<double> ln2_mean, ln2_rstd;
    Matrix c;
    Matrix u;  // fc1 pre-activation
    Matrix gu; // act(u)
    Matrix fc2_out;
};

struct ForwardCache {
    std::vector<int> tokens;
    Matrix h0;
    std::vector<LayerCache> layers;
    std::vector<double> lnf_mean, lnf_rstd;
    Matrix f;
};

namespace detail {

inline constexpr double kLnEps = 1e-5;

inline void layernorm_forward(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& y,
                              std::vector<double>& means, std::vector<double>& rstds) {
    const int L = x.rows(), d = x.cols();
    y = Matrix(L, d);
    means.resize(static_cast<size_t>(L));
    rstds.resize(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) {
        const double* xi = x.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xi[j] - mu;
            var += c * c;
        }
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        means[static_cast<size_t>(i)] = mu;
        rstds[static_cast<size_t>(i)] = rstd;
        double* yi = y.row(i);
        const double* gg = g.row(0);
        const double* bb = b.row(0);
        for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * rstd * gg[j] + bb[j];
    }
}

inline void layernorm_backward(const Matrix& dy, const Matrix& x, const Matrix& g,
                               const std::vector<double>& means, const std::vector<double>& rstds,
                               Matrix& dx, Matrix& dg, Matrix& db) {
    const int L = x.rows(), d = x.cols();
    for (int i = 0; i < L; ++i) {
        const double* xi = x.row(i);
        const double* di = dy.row(i);
        const double* gg = g.row(0);
        const double mu = means[static_cast<size_t>(i)];
        const double rstd = rstds[static_cast<size_t>(i)];
        double* dgi = dg.row(0);
        double* dbi = db.row(0);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            const double xhat = (xi[j] - mu) * rstd;
            const double dxhat = di[j] * gg[j];
            dgi[j] += di[j] * xhat;
            dbi[j] += di[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_d = 1.0 / d;
        double* dxi = dx.row(i);
        for (int j = 0; j < d; ++j) {
            const double xhat = (xi[j] - mu) * rstd;
            const double dxhat = di[j] * gg[j];
            dxi[j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
}

inline void apply_patch(const ForwardOptions& opt, const std::string& path, Matrix& y) {
    if (!opt.patches) return;
    auto it = opt.patches->by_path.find(path);
    if (it == opt.patches->by_path.end()) return;
    for (const auto& [pos, row] : it->second) {
        if (pos < 0 || pos >= y.rows()) {
            throw PathError("patch position " + std::to_string(pos) + " out of range for " + path);
        }
        if (row.size() != static_cast<size_t>(y.cols())) {
            throw ShapeError("patch width mismatch at " + path);
        }
        std::copy(row.begin(), row.end(), y.row(pos));
    }
}

inline bool should_record(const ForwardOptions& opt, const std::string& path) {
    if (opt.record) return true;
    if (opt.record_paths) {
        return std::find(opt.record_paths->begin(), opt.record_paths->end(), path) !=
               opt.record_paths->end();
    }
    return false;
}

inline void record(const ForwardOptions& opt, ActivationTrace* trace, const std::string& path,
                   const Matrix& y) {
    if (trace && should_record(opt, path)) trace->acts.emplace(path, y);
}

} // namespace detail

// ------------------------------------------------------------------ forward

// Causal forward pass. Recording never perturbs outputs; patches overwrite
// submodule output rows before downstream consumption (causal tracing's
// corrupted-with-restoration run).
inline ForwardResult forward(const DecoderModel& m, const std::vector<int>& tokens,
                             const ForwardOptions& opt = {}, ForwardCache* cache = nullptr) {
    const int L = static_cast<int>(tokens.size());
    const int d = m.cfg.d_model, H = m.cfg.n_heads, dh = d / H, F = m.cfg.d_ff;
    if (L < 1) throw ArgumentError("forward: empty token sequence");
    if (L > m.cfg.max_seq) {
        throw ArgumentError("forward: sequence length " + std::to_string(L) + " exceeds max_seq " +
                            std::to_string(m.cfg.max_seq));
    }
    for (int t : tokens) {
        if (t < 0 || t >= m.cfg.vocab_size) throw ArgumentError("forward: token id out of range");
    }

    ForwardResult res;
    ActivationTrace* trace = (opt.record || opt.record_paths) ? &res.trace : nullptr;

    Matrix emb_t(L, d), emb_p(L, d);
    for (int i = 0; i < L; ++i) {
        const double* te = m.tok_embed.row(tokens[static_cast<size_t>(i)]);
        const double* pe = m.pos_embed.row(i);
        std::copy(te, te + d, emb_t.row(i));
        std::copy(pe, pe + d, emb_p.row(i));
    }
    detail::apply_patch(opt, "decoder.embed_tokens", emb_t);
    detail::apply_patch(opt, "decoder.embed_positions", emb_p);
    detail::record(opt, trace, "decoder.embed_tokens", emb_t);
    detail::record(opt, trace, "decoder.embed_positions", emb_p);

    Matrix h(L, d);
    for (int i = 0; i < L; ++i) {
        double* hi = h.row(i);
        const double* ti = emb_t.row(i);
        const double* pi = emb_p.row(i);
        for (int j = 0; j < d; ++j) hi[j] = ti[j] + pi[j];
    }

    if (cache) {
        cache->tokens = tokens;
        cache->h0 = h;
        cache->layers.assign(static_cast<size_t>(m.cfg.n_layers), LayerCache{});
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int li = 0; li < m.cfg.n_layers; ++li) {
        const LayerWeights& W = m.layers[static_cast<size_t>(li)];
        const std::string p = "decoder.layers." + std::to_string(li) + ".";
        LayerCache* lc = cache ? &cache->layers[static_cast<size_t>(li)] : nullptr;
        if (lc) lc->h_in = h;

        Matrix a;
        std::vector<double> ln1_mean, ln1_rstd;
        detail::layernorm_forward(h, W.ln1_g, W.ln1_b, a, ln1_mean, ln1_rstd);
        detail::apply_patch(opt, p + "ln1", a);
        detail::record(opt, trace, p + "ln1", a);

        Matrix q, k, v;
        linear_forward(a, W.wq, &W.bq, q);
        linear_forward(a, W.wk, &W.bk, k);
        linear_forward(a, W.wv, &W.bv, v);
        detail::apply_patch(opt, p + "q", q);
        detail::apply_patch(opt, p + "k", k);
        detail::apply_patch(opt, p + "v", v);
        detail::record(opt, trace, p + "q", q);
        detail::record(opt, trace, p + "k", k);
        detail::record(opt, trace, p + "v", v);

        // Per-head causal attention.
        Matrix z(L, d);
        std::vector<Matrix> probs;
        if (lc) probs.assign(static_cast<size_t>(H), Matrix(L, L));
        for (int hd = 0; hd < H; ++hd) {
            const int off = hd * dh;
            Matrix* ph = lc ? &probs[static_cast<size_t>(hd)] : nullptr;
            std::vector<double> row(static_cast<size_t>(L));
            for (int i = 0; i < L; ++i) {
                const double* qi = q.row(i) + off;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = k.row(j) + off;
                    double s = 0.0;
                    for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    s *= scale;
                    row[static_cast<size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
                    denom += row[static_cast<size_t>(j)];
                }
                const double inv = 1.0 / denom;
                double* zi = z.row(i) + off;
                for (int t = 0; t < dh; ++t) zi[t] = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double pij = row[static_cast<size_t>(j)] * inv;
                    if (ph) (*ph)(i, j) = pij;
                    const double* vj = v.row(j) + off;
                    for (int t = 0; t < dh; ++t) zi[t] += pij * vj[t];
                }
            }
        }

        Matrix attn_out;
        linear_forward(z, W.wo, &W.bo, attn_out);
        detail::apply_patch(opt, p + "out", attn_out);
        detail::record(opt, trace, p + "out", attn_out);

        Matrix h_mid(L, d);
        for (int i = 0; i < L; ++i) {
            double* hm = h_mid.row(i);
            const double* hi = h.row(i);
            const double* oi = attn_out.row(i);
            for (int j = 0; j < d; ++j) hm[j] = hi[j] + oi[j];
        }

        Matrix c;
        std::vector<double> ln2_mean, ln2_rstd;
        detail::layernorm_forward(h_mid, W.ln2_g, W.ln2_b, c, ln2_mean, ln2_rstd);
        detail::apply_patch(opt, p + "ln2", c);
        detail::record(opt, trace, p + "ln2", c);

        Matrix u;
        linear_forward(c, W.w1, &W.b1, u);
        detail::apply_patch(opt, p + "fc1", u);
        detail::record(opt, trace, p + "fc1", u);

        Matrix gu(L, F);
        for (int i = 0; i < L; ++i) {
            const double* ui = u.row(i);
            double* gi = gu.row(i);
            for (int j = 0; j < F; ++j) gi[j] = act_forward(m.cfg.activation, ui[j]);
        }

        Matrix fc2_out;
        linear_forward(gu, W.w2, &W.b2, fc2_out);
        detail::apply_patch(opt, p + "fc2", fc2_out);
        detail::record(opt, trace, p + "fc2", fc2_out);

        Matrix h_next(L, d);
        for (int i = 0; i < L; ++i) {
            double* hn = h_next.row(i);
            const double* hm = h_mid.row(i);
            const double* mi = fc2_out.row(i);
            for (int j = 0; j < d; ++j) hn[j] = hm[j] + mi[j];
        }

        if (lc) {
            lc->ln1_mean = std::move(ln1_mean);
            lc->ln1_rstd = std::move(ln1_rstd);
            lc->a = std::move(a);
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->probs = std::move(probs);
            lc->z = std::move(z);
            lc->attn_out = std::move(attn_out);
            lc->h_mid = h_mid;
            lc->ln2_mean = std::move(ln2_mean);
            lc->ln2_rstd = std::move(ln2_rstd);
            lc->c = std::move(c);
            lc->u = std::move(u);
            lc->gu = std::move(gu);
            lc->fc2_out = std::move(fc2_out);
        }
        h = std::move(h_next);
    }

    Matrix f;
    std::vector<double> lnf_mean, lnf_rstd;
    detail::layernorm_forward(h, m.lnf_g, m.lnf_b, f, lnf_mean, lnf_rstd);
    detail::apply_patch(opt, "decoder.final_ln", f);
    detail::record(opt, trace, "decoder.final_ln", f);

    if (cache) {
        cache->lnf_mean = std::move(lnf_mean);
        cache->lnf_rstd = std::move(lnf_rstd);
        cache->f = f;
    }

    linear_forward(f, m.tok_embed, nullptr, res.logits); // tied LM head
    return res;
}

// ------------------------------------------------------------------ backward

// Accumulates parameter gradients for the cached forward into `grads`
// (a zeros_like model used as a gradient holder).
inline void backward(const DecoderModel& m, const ForwardCache& cache, const Matrix& dlogits,
                     DecoderModel& grads) {
    const int L = static_cast<int>(cache.tokens.size());
    const int d = m.cfg.d_model, H = m.cfg.n_heads, head_dim = d / H, F = m.cfg.d_ff;
    if (dlogits.rows() != L || dlogits.cols() != m.cfg.vocab_size) {
        throw ShapeError("backward: dlogits " + dlogits.shape_str());
    }

    // logits = f * E^T
    Matrix df(L, d);
    linear_backward_input(dlogits, m.tok_embed, df);
    linear_backward_weight(dlogits, cache.f, grads.tok_embed, nullptr);

    // The final residual stream is h_mid + fc2_out of the last layer (or h0 if
    // no layers); rebuild it for the norm backward.
    Matrix dh_top(L, d);
    Matrix h_top(L, d);
    if (cache.layers.empty()) {
        h_top = cache.h0;
    } else {
        const LayerCache& last = cache.layers.back();
        for (int i = 0; i < L; ++i) {
            double* hi = h_top.row(i);
            const double* hm = last.h_mid.row(i);
            const double* mo = last.fc2_out.row(i);
            for (int j = 0; j < d; ++j) hi[j] = hm[j] + mo[j];
        }
    }
    detail::layernorm_backward(df, h_top, m.lnf_g, cache.lnf_mean, cache.lnf_rstd, dh_top,
                               grads.lnf_g, grads.lnf_b);

    Matrix dh = std::move(dh_top);
    for (int li = m.cfg.n_layers - 1; li >= 0; --li) {
        const LayerWeights& W = m.layers[static_cast<size_t>(li)];
        LayerWeights& G = grads.layers[static_cast<size_t>(li)];
        const LayerCache& lc = cache.layers[static_cast<size_t>(li)];

        // MLP branch: h_next = h_mid + fc2(act(fc1(ln2(h_mid))))
        Matrix dgu(L, F);
        linear_backward_input(dh, W.w2, dgu);
        linear_backward_weight(dh, lc.gu, G.w2, &G.b2);

        Matrix du(L, F);
        for (int i = 0; i < L; ++i) {
            const double* ui = lc.u.row(i);
            const double* dgi = dgu.row(i);
            double* dui = du.row(i);
            for (int j = 0; j < F; ++j) dui[j] = dgi[j] * act_derivative(m.cfg.activation, ui[j]);
        }

        Matrix dc(L, d);
        linear_backward_input(du, W.w1, dc);
        linear_backward_weight(du, lc.c, G.w1, &G.b1);

        Matrix dh_mid = dh; // residual pass-through
        detail::layernorm_backward(dc, lc.h_mid, W.ln2_g, lc.ln2_mean, lc.ln2_rstd, dh_mid,
                                   G.ln2_g, G.ln2_b);

        // Attention branch: h_mid = h_in + Wo(z)
        Matrix dz(L, d);
        linear_backward_input(dh_mid, W.wo, dz);
        linear_backward_weight(dh_mid, lc.z, G.wo, &G.bo);

        Matrix dq(L, d), dk(L, d), dv(L, d);
        const double s = 1.0 / std::sqrt(static_cast<double>(head_dim));
        std::vector<double> dp(static_cast<size_t>(L)), ds(static_cast<size_t>(L));
        for (int hd = 0; hd < H; ++hd) {
            const int off = hd * head_dim;
            const Matrix& P = lc.probs[static_cast<size_t>(hd)];
            for (int i = 0; i < L; ++i) {
                const double* dzi = dz.row(i) + off;
                // dP and softmax backward over the causal row
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double* vj = lc.v.row(j) + off;
                    double acc = 0.0;
                    for (int t = 0; t < head_dim; ++t) acc += dzi[t] * vj[t];
                    dp[static_cast<size_t>(j)] = acc;
                    dot += acc * P(i, j);
                }
                for (int j = 0; j <= i; ++j) {
                    ds[static_cast<size_t>(j)] = P(i, j) * (dp[static_cast<size_t>(j)] - dot);
                }
                // dv, dq, dk
                double* dqi = dq.row(i) + off;
                const double* qi = lc.q.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    const double pij = P(i, j);
                    const double dsij = ds[static_cast<size_t>(j)] * s;
                    double* dvj = dv.row(j) + off;
                    const double* kj = lc.k.row(j) + off;
                    double* dkj = dk.row(j) + off;
                    for (int t = 0; t < head_dim; ++t) {
                        dvj[t] += pij * dzi[t];
                        dqi[t] += dsij * kj[t];
                        dkj[t] += dsij * qi[t];
                    }
                }
            }
        }

        Matrix da(L, d);
        linear_backward_input(dq, W.wq, da);
        linear_backward_weight(dq, lc.a, G.wq, &G.bq);
        linear_backward_input(dk, W.wk, da);
        linear_backward_weight(dk, lc.a, G.wk, &G.bk);
        linear_backward_input(dv, W.wv, da);
        linear_backward_weight(dv, lc.a, G.wv, &G.bv);

        Matrix dh_in = std::move(dh_mid); // residual pass-through
        detail::layernorm_backward(da, lc.h_in, W.ln1_g, lc.ln1_mean, lc.ln1_rstd, dh_in,
                                   G.ln1_g, G.ln1_b);
        dh = std::move(dh_in);
    }

    // embeddings
    for (int i = 0; i < L; ++i) {
        const double* di = dh.row(i);
        double* te = grads.tok_embed.row(cache.tokens[static_cast<size_t>(i)]);
        double* pe = grads.pos_embed.row(i);
        for (int j = 0; j < d; ++j) {
            te[j] += di[j];
            pe[j] += di[j];
        }
    }
}

// ------------------------------------------------------------ loss & metrics

struct LossResult {
    double loss = 0.0;
    int n_targets = 0;
    std::vector<double> per_target_ce; // aligned to target index (position 1..L-1); 0 where excluded
};

namespace detail {

// Cross-entropy over targets selected by `mask` (mask[t] gates target index t;
// PAD targets always excluded). Shared by standard and goldfish objectives so
// a full mask reduces to the standard loss bit-for-bit.
inline LossResult masked_ce(const Matrix& logits, const std::vector<int>& tokens,
                            const std::vector<uint8_t>* mask, Matrix* dlogits) {
    const int L = static_cast<int>(tokens.size());
    const int V = logits.cols();
    if (L < 2) throw ArgumentError("loss needs at least 2 tokens");
    if (logits.rows() != L) throw ShapeError("loss: logits rows != sequence length");

    LossResult res;
    res.per_target_ce.assign(static_cast<size_t>(L), 0.0);
    std::vector<int> included;
    for (int t = 1; t < L; ++t) {
        if (tokens[static_cast<size_t>(t)] == Tokenizer::PAD) continue;
        if (mask && !(*mask)[static_cast<size_t>(t)]) continue;
        included.push_back(t);
    }
    if (included.empty()) throw ArgumentError("loss: no unmasked non-PAD targets");
    res.n_targets = static_cast<int>(included.size());

    if (dlogits) *dlogits = Matrix(L, V);
    double total = 0.0;
    const double inv_n = 1.0 / res.n_targets;
    for (int t : included) {
        const int row = t - 1;
        const double* lr = logits.row(row);
        double mx = lr[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, lr[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(lr[j] - mx);
        const double lse = mx + std::log(denom);
        const int target = tokens[static_cast<size_t>(t)];
        const double ce = lse - lr[target];
        res.per_target_ce[static_cast<size_t>(t)] = ce;
        total += ce;
        if (dlogits) {
            double* dr = dlogits->row(row);
            const double inv_denom = 1.0 / denom;
            for (int j = 0; j < V; ++j) dr[j] = std::exp(lr[j] - mx) * inv_denom * inv_n;
            dr[target] -= inv_n;
        }
    }
    res.loss = total * inv_n;
    if (!std::isfinite(res.loss)) throw NumericError("loss is not finite");
    return res;
}

} // namespace detail

// Mean next-token cross-entropy, PAD targets excluded.
inline double lm_loss(const DecoderModel& m, const std::vector<int>& tokens) {
    ForwardResult r = forward(m, tokens);
    return detail::masked_ce(r.logits, tokens, nullptr, nullptr).loss;
}

// Greedy continuation; ties broken toward the lowest token id.
inline std::vector<int> greedy_decode(const DecoderModel& m, const std::vector<int>& prompt,
                                      int max_new, std::optional<int> stop = std::nullopt) {
    if (max_new < 0) throw ArgumentError("greedy_decode: max_new must be >= 0");
    if (static_cast<int>(prompt.size()) > m.cfg.max_seq - max_new) {
        throw ArgumentError("greedy_decode: prompt of " + std::to_string(prompt.size()) +
                            " tokens does not fit in max_seq - max_new");
    }
    std::vector<int> seq = prompt;
    for (int step = 0; step < max_new; ++step) {
        ForwardResult r = forward(m, seq);
        const double* last = r.logits.row(r.logits.rows() - 1);
        int best = 0;
        for (int j = 1; j < r.logits.cols(); ++j) {
            if (last[j] > last[best]) best = j;
        }
        seq.push_back(best);
        if (stop && best == *stop) break;
    }
    return seq;
}

// Top-1 teacher-forced next-token accuracy over all non-PAD targets.
inline double token_accuracy(const DecoderModel& m, const std::vector<std::vector<int>>& corpus) {
    if (corpus.empty()) throw ArgumentError("token_accuracy: empty corpus");
    int64_t hits = 0, total = 0;
    for (const auto& tokens : corpus) {
        if (tokens.size() < 2) continue;
        ForwardResult r = forward(m, tokens);
        for (size_t t = 1; t < tokens.size(); ++t) {
            if (tokens[t] == Tokenizer::PAD) continue;
            const double* row = r.logits.row(static_cast<int>(t - 1));
            int best = 0;
            for (int j = 1; j < r.logits.cols(); ++j) {
                if (row[j] > row[best]) best = j;
            }
            hits += (best == tokens[t]) ? 1 : 0;
            ++total;
        }
    }
    if (total == 0) throw ArgumentError("token_accuracy: no non-PAD targets");
    return static_cast<double>(hits) / static_cast<double>(total);
}

} // namespace leaklab

#endif
