#ifndef LEAKLAB_PIPELINE_HPP
#define LEAKLAB_PIPELINE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaklab/checkpoint.hpp"
#include "leaklab/corpus.hpp"
#include "leaklab/editing.hpp"
#include "leaklab/errors.hpp"
#include "leaklab/lora.hpp"
#include "leaklab/mining.hpp"
#include "leaklab/model.hpp"
#include "leaklab/schema.hpp"
#include "leaklab/tracing.hpp"
#include "leaklab/training.hpp"

namespace leaklab {

// ----------------------------------------------------------------- config

struct LoraSettings {
    int rank = 8;
    double alpha = 64.0;
    std::vector<std::string> targets = {"q", "k", "v", "out", "fc1", "fc2"};
    std::string scaling = "alpha_over_r";
};

struct TrainSettings {
    int epochs = 200;
    double lr = 1.8e-3;
    int batch = 8;
    std::string objective = "standard";
    int goldfish_k = 4;
    int goldfish_window = 5;
    double max_grad_norm = 1.0;
};

struct DataSettings {
    std::string wordlist = "data/sample_wordlist.txt";
    int passwords = 20;
    double support_per_credential = 2.0;
    std::string support_path; // empty -> synthetic support corpus
    std::string general_corpus = "data/general_corpus.txt";
    int eval_sequences = 2000;
    int restore_sequences = 600;
    std::string mining_template = "My credential is '{password}'";
    std::string schema_dir = "schemas";
};

struct TraceSettings {
    std::string eligible = "fc1";
    std::string restore_mode = "first_token";
};

struct EditSettings {
    std::vector<double> scale_candidates = {0.05, 0.1, 0.2};
    double sign = 1.0;
    std::vector<double> sweep_scales = {0.1, 0.01};
    bool calibrated = true; // rescale aggregated k/v to per-row magnitudes
};

struct PretrainSettings {
    bool enabled = true;
    int general_lines = 1200;   // general-text lines reserved for the base
    int support_pairs = 150;    // support-style pairs mixed in (separate stream)
    int epochs = 8;
    double lr = 1e-3;
    int batch = 16;
};

struct RestoreSettings {
    bool enabled = true;
    int epochs = 2;
    double lr = 3e-4;
    int batch = 8;
};

struct AssocSettings {
    bool enabled = true;
    std::vector<int> counts = {5, 10, 15, 20};
    int epochs = 40;
};

struct PipelineConfig {
    int schema_version = 1;
    uint64_t seed = 42;
    std::string out = "runs/out";
    ModelConfig model; // model.seed is derived from the pipeline seed
    LoraSettings lora;
    PretrainSettings pretrain;
    TrainSettings train;
    DataSettings data;
    TraceSettings trace;
    EditSettings edit;
    RestoreSettings restore;
    AssocSettings assoc;
};

inline nlohmann::json config_to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["model"] = {{"n_layers", c.model.n_layers}, {"d_model", c.model.d_model},
                  {"n_heads", c.model.n_heads},   {"d_ff", c.model.d_ff},
                  {"max_seq", c.model.max_seq},   {"activation", to_string(c.model.activation)}};
    j["lora"] = {{"rank", c.lora.rank},
                 {"alpha", c.lora.alpha},
                 {"targets", c.lora.targets},
                 {"scaling", c.lora.scaling}};
    j["pretrain"] = {{"enabled", c.pretrain.enabled},
                     {"general_lines", c.pretrain.general_lines},
                     {"support_pairs", c.pretrain.support_pairs},
                     {"epochs", c.pretrain.epochs},
                     {"lr", c.pretrain.lr},
                     {"batch", c.pretrain.batch}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"lr", c.train.lr},
                  {"batch", c.train.batch},
                  {"objective", c.train.objective},
                  {"goldfish_k", c.train.goldfish_k},
                  {"goldfish_window", c.train.goldfish_window},
                  {"max_grad_norm", c.train.max_grad_norm}};
    j["data"] = {{"wordlist", c.data.wordlist},
                 {"passwords", c.data.passwords},
                 {"support_per_credential", c.data.support_per_credential},
                 {"support_path", c.data.support_path},
                 {"general_corpus", c.data.general_corpus},
                 {"eval_sequences", c.data.eval_sequences},
                 {"restore_sequences", c.data.restore_sequences},
                 {"mining_template", c.data.mining_template},
                 {"schema_dir", c.data.schema_dir}};
    j["trace"] = {{"eligible", c.trace.eligible}, {"restore_mode", c.trace.restore_mode}};
    j["edit"] = {{"scale_candidates", c.edit.scale_candidates},
                 {"sign", c.edit.sign},
                 {"sweep_scales", c.edit.sweep_scales},
                 {"calibrated", c.edit.calibrated}};
    j["restore"] = {{"enabled", c.restore.enabled},
                    {"epochs", c.restore.epochs},
                    {"lr", c.restore.lr},
                    {"batch", c.restore.batch}};
    j["assoc"] = {{"enabled", c.assoc.enabled}, {"counts", c.assoc.counts}, {"epochs", c.assoc.epochs}};
    return j;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    const auto get = [&](const nlohmann::json& obj, const char* key, auto& out) {
        if (obj.contains(key)) out = obj.at(key).get<std::decay_t<decltype(out)>>();
    };
    try {
        get(j, "schema_version", c.schema_version);
        get(j, "seed", c.seed);
        get(j, "out", c.out);
        if (j.contains("model")) {
            const auto& m = j["model"];
            get(m, "n_layers", c.model.n_layers);
            get(m, "d_model", c.model.d_model);
            get(m, "n_heads", c.model.n_heads);
            get(m, "d_ff", c.model.d_ff);
            get(m, "max_seq", c.model.max_seq);
            if (m.contains("activation")) {
                c.model.activation = activation_from_string(m["activation"].get<std::string>());
            }
        }
        if (j.contains("lora")) {
            const auto& l = j["lora"];
            get(l, "rank", c.lora.rank);
            get(l, "alpha", c.lora.alpha);
            get(l, "targets", c.lora.targets);
            get(l, "scaling", c.lora.scaling);
        }
        if (j.contains("pretrain")) {
            const auto& p = j["pretrain"];
            get(p, "enabled", c.pretrain.enabled);
            get(p, "general_lines", c.pretrain.general_lines);
            get(p, "support_pairs", c.pretrain.support_pairs);
            get(p, "epochs", c.pretrain.epochs);
            get(p, "lr", c.pretrain.lr);
            get(p, "batch", c.pretrain.batch);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            get(t, "epochs", c.train.epochs);
            get(t, "lr", c.train.lr);
            get(t, "batch", c.train.batch);
            get(t, "objective", c.train.objective);
            get(t, "goldfish_k", c.train.goldfish_k);
            get(t, "goldfish_window", c.train.goldfish_window);
            get(t, "max_grad_norm", c.train.max_grad_norm);
        }
        if (j.contains("data")) {
            const auto& d = j["data"];
            get(d, "wordlist", c.data.wordlist);
            get(d, "passwords", c.data.passwords);
            get(d, "support_per_credential", c.data.support_per_credential);
            get(d, "support_path", c.data.support_path);
            get(d, "general_corpus", c.data.general_corpus);
            get(d, "eval_sequences", c.data.eval_sequences);
            get(d, "restore_sequences", c.data.restore_sequences);
            get(d, "mining_template", c.data.mining_template);
            get(d, "schema_dir", c.data.schema_dir);
        }
        if (j.contains("trace")) {
            get(j["trace"], "eligible", c.trace.eligible);
            get(j["trace"], "restore_mode", c.trace.restore_mode);
        }
        if (j.contains("edit")) {
            get(j["edit"], "scale_candidates", c.edit.scale_candidates);
            get(j["edit"], "sign", c.edit.sign);
            get(j["edit"], "sweep_scales", c.edit.sweep_scales);
            get(j["edit"], "calibrated", c.edit.calibrated);
        }
        if (j.contains("restore")) {
            get(j["restore"], "enabled", c.restore.enabled);
            get(j["restore"], "epochs", c.restore.epochs);
            get(j["restore"], "lr", c.restore.lr);
            get(j["restore"], "batch", c.restore.batch);
        }
        if (j.contains("assoc")) {
            get(j["assoc"], "enabled", c.assoc.enabled);
            get(j["assoc"], "counts", c.assoc.counts);
            get(j["assoc"], "epochs", c.assoc.epochs);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }
    return c;
}

// Dotted-key override for --set key=value; the value is parsed as JSON when
// possible, otherwise taken as a string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    nlohmann::json* node = &cfg;
    size_t start = 0;
    while (true) {
        const size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
        if (part.empty()) throw ConfigError("bad --set key: " + key);
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

// ------------------------------------------------------------- file helpers

namespace detail {

inline std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("short write to " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

// Bytes visible only as escapes so reports stay valid UTF-8 and diffable.
inline std::string printable(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (unsigned char c : s) {
        if (c >= 32 && c < 127) {
            out.push_back(static_cast<char>(c));
        } else {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

// Checksum of a report with timestamp lines ignored, so reruns of a
// deterministic pipeline hash identically.
inline std::string normalized_content(const std::string& content) {
    std::string out;
    out.reserve(content.size());
    std::istringstream in(content);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find("\"applied_at\"") != std::string::npos ||
            line.find("\"generated_at\"") != std::string::npos) {
            continue;
        }
        out += line;
        out.push_back('\n');
    }
    return out;
}

inline std::string content_checksum(const std::string& content) {
    const uint64_t h = Rng::fnv1a(content);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string artifact_checksum(const std::string& path) {
    return content_checksum(normalized_content(read_file(path)));
}

inline std::string dump_json(const nlohmann::json& j) {
    return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

} // namespace detail

// ------------------------------------------------------------ the pipeline

// Orchestrates build-data -> finetune -> mine(pre) -> trace -> assoc ->
// merge -> edit -> mine(post) -> eval -> restore -> sweep -> report.
// Every stage reads only files from the run directory, so any stage can be
// re-run standalone and a deleted artifact is regenerated identically.
class Pipeline {
public:
    Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), dir_(cfg_.out) {
        cfg_.model.seed = Rng(cfg_.seed).split("model-init").next_u64();
        cfg_.model.validate();
        std::filesystem::create_directories(dir_);
    }

    const PipelineConfig& config() const { return cfg_; }
    std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

    // ------------------------------------------------------------ stage list

    struct Stage {
        std::string name;
        std::vector<std::string> outputs;
        void (Pipeline::*run)();
        bool (Pipeline::*enabled)() const;
    };

    const std::vector<Stage>& stages() const {
        static const std::vector<Stage> s = {
            {"build-data", {"dataset.jsonl", "eval_corpus.txt", "restore_corpus.txt",
                            "pretrain_corpus.jsonl", "data_manifest.json"},
             &Pipeline::stage_build_data, &Pipeline::always_enabled},
            {"pretrain", {"ckpt_base.lklb"}, &Pipeline::stage_pretrain, &Pipeline::always_enabled},
            {"train", {"ckpt_finetuned.lklb", "train_log.csv"}, &Pipeline::stage_train,
             &Pipeline::always_enabled},
            {"mine-pre", {"mining_pre.json"}, &Pipeline::stage_mine_pre, &Pipeline::always_enabled},
            {"trace", {"trace.json", "trace_layers.csv"}, &Pipeline::stage_trace,
             &Pipeline::always_enabled},
            {"assoc", {"association.csv"}, &Pipeline::stage_assoc, &Pipeline::assoc_enabled},
            {"merge", {"ckpt_merged.lklb"}, &Pipeline::stage_merge, &Pipeline::always_enabled},
            {"edit", {"edit_receipt.json", "ckpt_edited.lklb"}, &Pipeline::stage_edit,
             &Pipeline::always_enabled},
            {"mine-post", {"mining_post.json"}, &Pipeline::stage_mine_post, &Pipeline::always_enabled},
            {"eval", {"eval.json"}, &Pipeline::stage_eval, &Pipeline::always_enabled},
            {"restore", {"restore.json", "ckpt_restored.lklb"}, &Pipeline::stage_restore,
             &Pipeline::restore_enabled},
            {"sweep", {"sweep.csv"}, &Pipeline::stage_sweep, &Pipeline::always_enabled},
            {"report", {"pca_passwords.csv", "run_summary.json"}, &Pipeline::stage_report,
             &Pipeline::always_enabled},
        };
        return s;
    }

    bool stage_done(const Stage& s) const {
        for (const std::string& out : s.outputs) {
            if (!detail::file_exists(path(out))) return false;
        }
        return true;
    }

    void run_stage(const std::string& name) {
        for (const Stage& s : stages()) {
            if (s.name == name) {
                if (!(this->*(s.enabled))()) return;
                (this->*(s.run))();
                return;
            }
        }
        throw ConfigError("unknown stage: " + name);
    }

    // Runs every enabled stage whose outputs are missing.
    void run_all(bool verbose = false) {
        for (const Stage& s : stages()) {
            if (!(this->*(s.enabled))()) continue;
            if (stage_done(s)) {
                if (verbose) std::cerr << "[skip] " << s.name << "\n";
                continue;
            }
            if (verbose) std::cerr << "[run ] " << s.name << "\n";
            try {
                (this->*(s.run))();
            } catch (const Error&) {
                throw;
            } catch (const std::exception& e) {
                throw Error("stage " + s.name + " failed: " + e.what() +
                            " (resume from this stage after fixing)");
            }
        }
    }

    // ---------------------------------------------------------- stage bodies

    void stage_build_data() {
        const Rng root(cfg_.seed);
        std::vector<std::string> passwords =
            load_wordlist(cfg_.data.wordlist, static_cast<size_t>(cfg_.data.passwords));
        if (passwords.empty()) throw DataError("wordlist produced no passwords");

        std::vector<SupportPair> support;
        if (cfg_.data.support_path.empty()) {
            const int pairs = std::max<int>(
                static_cast<int>(passwords.size()),
                static_cast<int>(std::ceil(cfg_.data.support_per_credential * passwords.size())));
            support = synth_support(pairs, root.split("support"));
        } else {
            support = load_support_jsonl(cfg_.data.support_path);
        }
        FinetuneDataset ds = build_finetune_dataset(support, passwords, root.split("dataset"));
        save_dataset_jsonl(ds, path("dataset.jsonl"));

        // Deterministic eval/restore/pretrain split of the general corpus.
        // Duplicate lines are dropped up front so no text can straddle splits.
        std::vector<std::string> general;
        {
            std::set<uint64_t> seen;
            for (std::string& l : load_text_lines(cfg_.data.general_corpus)) {
                if (seen.insert(line_hash(l)).second) general.push_back(std::move(l));
            }
        }
        const int pretrain_lines = cfg_.pretrain.enabled ? cfg_.pretrain.general_lines : 0;
        const size_t need = static_cast<size_t>(cfg_.data.eval_sequences) +
                            static_cast<size_t>(cfg_.data.restore_sequences) +
                            static_cast<size_t>(pretrain_lines);
        if (general.size() < need) {
            throw DataError("general corpus has " + std::to_string(general.size()) +
                            " lines, need " + std::to_string(need));
        }
        std::vector<int> order(general.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        detail::shuffle_indices(order, root.split("eval-split"));
        size_t cursor = 0;
        const auto take = [&](int n) {
            std::vector<std::string> out;
            out.reserve(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) out.push_back(general[static_cast<size_t>(order[cursor++])]);
            return out;
        };
        const std::vector<std::string> eval_lines = take(cfg_.data.eval_sequences);
        const std::vector<std::string> restore_lines = take(cfg_.data.restore_sequences);
        std::vector<std::string> pretrain_lines_vec = take(pretrain_lines);
        if (cfg_.pretrain.enabled && cfg_.pretrain.support_pairs > 0) {
            // Support-style text for the base, drawn from a stream distinct
            // from the fine-tune support pairs.
            for (const SupportPair& p :
                 synth_support(cfg_.pretrain.support_pairs, root.split("pretrain-support"))) {
                pretrain_lines_vec.push_back(p.query + "\n" + p.response);
            }
        }

        std::string eval_txt, restore_txt;
        for (const std::string& l : eval_lines) eval_txt += l + "\n";
        for (const std::string& l : restore_lines) restore_txt += l + "\n";
        detail::write_file(path("eval_corpus.txt"), eval_txt);
        detail::write_file(path("restore_corpus.txt"), restore_txt);
        {
            std::string jsonl;
            for (const std::string& l : pretrain_lines_vec) {
                nlohmann::json j;
                j["text"] = l;
                jsonl += j.dump() + "\n";
            }
            detail::write_file(path("pretrain_corpus.jsonl"), jsonl);
        }

        // The fine-tune text must not leak into the pretrain corpus.
        {
            std::set<uint64_t> ft;
            for (const CorpusLine& l : ds.lines) ft.insert(line_hash(l.text));
            for (const std::string& l : pretrain_lines_vec) {
                if (ft.count(line_hash(l))) {
                    throw DataError("pretrain corpus collides with fine-tune text: " + l);
                }
            }
        }

        nlohmann::json manifest;
        manifest["schema_version"] = 1;
        manifest["passwords"] = ds.passwords;
        manifest["n_support_pairs"] = support.size();
        nlohmann::json train_hashes = nlohmann::json::array();
        for (const CorpusLine& l : ds.lines) {
            train_hashes.push_back(detail::content_checksum(l.text));
        }
        for (const TrainUnit& u : training_units(ds, cfg_.model.max_seq)) {
            train_hashes.push_back(detail::content_checksum(u.text));
        }
        manifest["train_line_hashes"] = std::move(train_hashes);
        nlohmann::json eval_hashes = nlohmann::json::array();
        for (const std::string& l : eval_lines) eval_hashes.push_back(detail::content_checksum(l));
        manifest["eval_hashes"] = std::move(eval_hashes);
        nlohmann::json pretrain_hashes = nlohmann::json::array();
        for (const std::string& l : pretrain_lines_vec) {
            pretrain_hashes.push_back(detail::content_checksum(l));
        }
        manifest["pretrain_hashes"] = std::move(pretrain_hashes);
        manifest["eval_count"] = cfg_.data.eval_sequences;
        manifest["restore_count"] = cfg_.data.restore_sequences;
        manifest["pretrain_count"] = pretrain_lines_vec.size();
        detail::write_file(path("data_manifest.json"), detail::dump_json(manifest));
    }

    void stage_pretrain() {
        require("build-data", "pretrain_corpus.jsonl");
        DecoderModel base = DecoderModel::init(cfg_.model);
        if (cfg_.pretrain.enabled) {
            std::vector<std::string> corpus;
            std::ifstream in(path("pretrain_corpus.jsonl"));
            if (!in) throw IoError("cannot open " + path("pretrain_corpus.jsonl"));
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                corpus.push_back(nlohmann::json::parse(line).at("text").get<std::string>());
            }
            RestoreConfig pc;
            pc.epochs = cfg_.pretrain.epochs;
            pc.lr = cfg_.pretrain.lr;
            pc.batch = cfg_.pretrain.batch;
            pc.seed = Rng(cfg_.seed).split("pretrain").next_u64();
            base = pretrain_base(base, corpus, pc);
        }
        save_checkpoint(base, path("ckpt_base.lklb"), "base");
    }

    void stage_train() {
        require("build-data", "dataset.jsonl");
        require("pretrain", "ckpt_base.lklb");
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        DecoderModel base = load_checkpoint(path("ckpt_base.lklb")).model;
        AdaptedModel am =
            attach(base, expand_lora_targets(cfg_.model, cfg_.lora.targets), cfg_.lora.rank,
                   cfg_.lora.alpha, Rng(cfg_.seed).split("lora"),
                   lora_scaling_from_string(cfg_.lora.scaling));
        TrainConfig tc = train_config();
        std::ostringstream log;
        finetune(am, ds, tc, &log);
        detail::write_file(path("train_log.csv"), log.str());
        save_checkpoint(am, path("ckpt_finetuned.lklb"), "finetuned");
    }

    void stage_mine_pre() {
        require("train", "ckpt_finetuned.lklb");
        LoadedCheckpoint ck = load_checkpoint(path("ckpt_finetuned.lklb"));
        const DecoderModel& model = ck.adapted ? ck.adapted->effective : ck.model;
        write_mining_report(model, "mining_pre.json");
    }

    void stage_mine_post() {
        require("edit", "ckpt_edited.lklb");
        LoadedCheckpoint ck = load_checkpoint(path("ckpt_edited.lklb"));
        write_mining_report(ck.model, "mining_post.json");
    }

    void stage_trace() {
        require("train", "ckpt_finetuned.lklb");
        require("build-data", "dataset.jsonl");
        LoadedCheckpoint ck = load_checkpoint(path("ckpt_finetuned.lklb"));
        const DecoderModel& model = ck.adapted ? ck.adapted->effective : ck.model;
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        std::vector<TrainUnit> prompts = credential_units(ds, cfg_.model.max_seq);
        TraceReport report = layer_attribution(model, prompts, CorruptionRules::defaults(),
                                               trace_eligibility_from_string(cfg_.trace.eligible));

        nlohmann::json j;
        j["schema_version"] = 1;
        j["selected_target"] = report.selected_target;
        j["selected_flat_index"] = report.selected_flat_index;
        nlohmann::json entries = nlohmann::json::array();
        std::string csv = "flat_index,path,score\n";
        for (const auto& e : report.entries) {
            entries.push_back({{"path", e.path},
                               {"flat_index", e.flat_index},
                               {"score", e.score},
                               {"eligible", e.eligible}});
            csv += std::to_string(e.flat_index) + "," + e.path + "," + detail::fmt_double(e.score) + "\n";
        }
        j["entries"] = std::move(entries);
        detail::write_file(path("trace.json"), detail::dump_json(j));
        detail::write_file(path("trace_layers.csv"), csv);
    }

    void stage_assoc() {
        require("build-data", "dataset.jsonl");
        require("pretrain", "ckpt_base.lklb");
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        const DecoderModel pretrained = load_checkpoint(path("ckpt_base.lklb")).model;
        std::vector<std::string> probe_texts;
        for (const MiningProbe& p : mining_probes(ds, cfg_.model.max_seq, cfg_.data.mining_template)) {
            probe_texts.push_back(p.prompt);
        }

        std::vector<int> counts = cfg_.assoc.counts;
        std::sort(counts.begin(), counts.end());
        std::vector<DecoderModel> snapshots;
        std::vector<std::pair<int, const DecoderModel*>> series_in;
        const Rng root(cfg_.seed);
        for (int c : counts) {
            if (c < 1 || c > static_cast<int>(ds.passwords.size())) {
                throw ConfigError("assoc count " + std::to_string(c) + " out of range");
            }
            std::vector<std::string> pw(ds.passwords.begin(), ds.passwords.begin() + c);
            const int pairs = std::max<int>(
                c, static_cast<int>(std::ceil(cfg_.data.support_per_credential * c)));
            std::vector<SupportPair> support =
                synth_support(pairs, root.split("assoc-support").split(static_cast<uint64_t>(c)));
            FinetuneDataset sub =
                build_finetune_dataset(support, pw, root.split("assoc-data").split(static_cast<uint64_t>(c)));
            AdaptedModel am = attach(pretrained, expand_lora_targets(cfg_.model, cfg_.lora.targets),
                                     cfg_.lora.rank, cfg_.lora.alpha,
                                     Rng(cfg_.seed).split("lora"),
                                     lora_scaling_from_string(cfg_.lora.scaling));
            TrainConfig tc = train_config();
            tc.epochs = cfg_.assoc.epochs;
            tc.seed = root.split("assoc-train").split(static_cast<uint64_t>(c)).next_u64();
            finetune(am, sub, tc);
            snapshots.push_back(merge(am));
        }
        for (size_t i = 0; i < snapshots.size(); ++i) {
            series_in.emplace_back(counts[i], &snapshots[i]);
        }
        AssociationSeries series = association_strength(series_in, probe_texts);
        std::string csv = "injected_count,strength\n";
        for (const auto& p : series.points) {
            csv += std::to_string(p.injected_count) + "," + detail::fmt_double(p.strength) + "\n";
        }
        detail::write_file(path("association.csv"), csv);
    }

    void stage_merge() {
        require("train", "ckpt_finetuned.lklb");
        LoadedCheckpoint ck = load_checkpoint(path("ckpt_finetuned.lklb"));
        if (!ck.adapted) throw StateError("finetuned checkpoint has no adapters to merge");
        DecoderModel merged = merge(*ck.adapted);
        save_checkpoint(merged, path("ckpt_merged.lklb"), "merged");
    }

    void stage_edit() {
        require("merge", "ckpt_merged.lklb");
        require("trace", "trace.json");
        require("build-data", "dataset.jsonl");
        DecoderModel merged = load_checkpoint(path("ckpt_merged.lklb")).model;
        const nlohmann::json trace = load_json_file(path("trace.json"));
        const std::string target = trace.at("selected_target").get<std::string>();
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        std::vector<TrainUnit> prompts = credential_units(ds, cfg_.model.max_seq);
        auto [key, value] = aggregate_key_value(merged, prompts, target, CorruptionRules::defaults(),
                                                cfg_.edit.calibrated);

        const std::vector<MiningProbe> probes =
            mining_probes(ds, cfg_.model.max_seq, cfg_.data.mining_template);
        nlohmann::json selection = nlohmann::json::array();
        std::optional<double> chosen;
        int chosen_recovered = -1;
        for (double s : cfg_.edit.scale_candidates) {
            EditPlan plan;
            plan.target_path = target;
            plan.key = key;
            plan.value = value;
            plan.scale = cfg_.edit.sign * s;
            auto [edited, receipt] = apply_edit(merged, std::move(plan));
            (void)receipt;
            const MiningReport mr = mine(edited, probes);
            selection.push_back({{"scale", s}, {"recovered", mr.recovered}});
            if (!chosen || (chosen_recovered != 0 && mr.recovered < chosen_recovered)) {
                chosen = s;
                chosen_recovered = mr.recovered;
            }
            if (mr.recovered == 0) break; // first candidate achieving zero wins
        }

        EditPlan plan;
        plan.target_path = target;
        plan.key = key;
        plan.value = value;
        plan.scale = cfg_.edit.sign * *chosen;
        auto [edited, receipt] = apply_edit(merged, std::move(plan));
        save_checkpoint(edited, path("ckpt_edited.lklb"), "edited");

        nlohmann::json j;
        j["schema_version"] = 1;
        j["plan"] = {{"target_path", receipt.plan.target_path},
                     {"scale", receipt.plan.scale},
                     {"key", receipt.plan.key},
                     {"value", receipt.plan.value},
                     {"key_norm", receipt.plan.key_norm},
                     {"value_norm", receipt.plan.value_norm},
                     {"update_norm", receipt.plan.update_norm}};
        j["selection"] = std::move(selection);
        j["chosen_scale"] = *chosen;
        j["sign"] = cfg_.edit.sign;
        // Norms reported against the full-scale observations for context only.
        j["reference_full_scale_norms"] = {{"key", 30.0}, {"value", 10.0}, {"update", 2.78}};
        j["pre_checksums"] = receipt.pre_checksums;
        j["post_checksums"] = receipt.post_checksums;
        j["applied_at"] = receipt.applied_at;
        detail::write_file(path("edit_receipt.json"), detail::dump_json(j));
    }

    void stage_eval() {
        require("merge", "ckpt_merged.lklb");
        require("edit", "ckpt_edited.lklb");
        require("build-data", "eval_corpus.txt");
        DecoderModel pre = load_checkpoint(path("ckpt_merged.lklb")).model;
        DecoderModel post = load_checkpoint(path("ckpt_edited.lklb")).model;
        const std::vector<std::string> eval_lines = load_text_lines(path("eval_corpus.txt"));
        const double acc_pre = benchmark(pre, eval_lines);
        const double acc_post = benchmark(post, eval_lines);

        nlohmann::json j;
        j["schema_version"] = 1;
        j["eval_sequences"] = eval_lines.size();
        j["corpus_checksum"] = detail::content_checksum(detail::read_file(path("eval_corpus.txt")));
        j["chance"] = 1.0 / Tokenizer::VOCAB_SIZE;
        j["accuracy_pre"] = acc_pre;
        j["accuracy_post"] = acc_post;
        detail::write_file(path("eval.json"), detail::dump_json(j));
    }

    void stage_restore() {
        require("edit", "ckpt_edited.lklb");
        require("build-data", "restore_corpus.txt");
        require("eval", "eval.json");
        DecoderModel post = load_checkpoint(path("ckpt_edited.lklb")).model;
        const std::vector<std::string> restore_lines = load_text_lines(path("restore_corpus.txt"));
        const std::set<uint64_t> eval_hashes = eval_hash_set();

        RestoreConfig rc;
        rc.epochs = cfg_.restore.epochs;
        rc.lr = cfg_.restore.lr;
        rc.batch = cfg_.restore.batch;
        rc.seed = Rng(cfg_.seed).split("restore").next_u64();
        DecoderModel restored = restoration_finetune(post, restore_lines, eval_hashes, rc);
        save_checkpoint(restored, path("ckpt_restored.lklb"), "restored");

        const std::vector<std::string> eval_lines = load_text_lines(path("eval_corpus.txt"));
        const double acc = benchmark(restored, eval_lines);
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        const MiningReport mr =
            mine(restored, mining_probes(ds, cfg_.model.max_seq, cfg_.data.mining_template));

        nlohmann::json j;
        j["schema_version"] = 1;
        j["epochs"] = cfg_.restore.epochs;
        j["lr"] = cfg_.restore.lr;
        j["accuracy_restored"] = acc;
        j["recovered_after_restore"] = mr.recovered;
        detail::write_file(path("restore.json"), detail::dump_json(j));
    }

    void stage_sweep() {
        require("merge", "ckpt_merged.lklb");
        require("edit", "edit_receipt.json");
        require("build-data", "eval_corpus.txt");
        if (cfg_.edit.sweep_scales.size() < 2) throw ConfigError("sweep needs at least 2 scales");
        DecoderModel merged = load_checkpoint(path("ckpt_merged.lklb")).model;
        const nlohmann::json receipt = load_json_file(path("edit_receipt.json"));
        const std::string target = receipt.at("plan").at("target_path").get<std::string>();
        const std::vector<double> key = receipt.at("plan").at("key").get<std::vector<double>>();
        const std::vector<double> value = receipt.at("plan").at("value").get<std::vector<double>>();
        const double chosen_scale = receipt.at("chosen_scale").get<double>();

        std::optional<double> restored_acc;
        if (detail::file_exists(path("restore.json"))) {
            restored_acc = load_json_file(path("restore.json")).at("accuracy_restored").get<double>();
        }

        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        const std::vector<MiningProbe> probes =
            mining_probes(ds, cfg_.model.max_seq, cfg_.data.mining_template);
        const std::vector<std::string> eval_lines = load_text_lines(path("eval_corpus.txt"));

        std::vector<double> scales = cfg_.edit.sweep_scales;
        std::sort(scales.rbegin(), scales.rend()); // descending
        std::string csv = "scale,recovered,accuracy,restored_accuracy\n";
        for (double s : scales) {
            EditPlan plan;
            plan.target_path = target;
            plan.key = key;
            plan.value = value;
            plan.scale = cfg_.edit.sign * s;
            auto [edited, r] = apply_edit(merged, std::move(plan));
            (void)r;
            const MiningReport mr = mine(edited, probes);
            const double acc = benchmark(edited, eval_lines);
            csv += detail::fmt_double(s) + "," + std::to_string(mr.recovered) + "," +
                   detail::fmt_double(acc) + ",";
            if (restored_acc && s == chosen_scale) csv += detail::fmt_double(*restored_acc);
            csv += "\n";
        }
        detail::write_file(path("sweep.csv"), csv);
    }

    void stage_report() {
        require("mine-pre", "mining_pre.json");
        require("build-data", "data_manifest.json");

        // Password feature PCA, labeled by recovery outcome.
        const nlohmann::json mining = load_json_file(path("mining_pre.json"));
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        MiningReport report;
        report.injected = mining.at("injected").get<int>();
        report.recovered = mining.at("recovered").get<int>();
        for (const auto& r : mining.at("records")) {
            MiningRecord rec;
            rec.password_index = r.at("password_index").get<int>();
            rec.password = r.at("password").get<std::string>();
            rec.recovered = r.at("recovered").get<bool>();
            report.records.push_back(std::move(rec));
        }
        std::string csv = "pc1,pc2,recovered,password_index\n";
        if (ds.passwords.size() >= 3) {
            for (const PasswordPoint& p : pca_passwords(report, ds.passwords)) {
                csv += detail::fmt_double(p.pc1) + "," + detail::fmt_double(p.pc2) + "," +
                       (p.recovered ? "1" : "0") + "," + std::to_string(p.password_index) + "\n";
            }
        }
        detail::write_file(path("pca_passwords.csv"), csv);

        nlohmann::json summary;
        summary["schema_version"] = 1;
        summary["seed"] = cfg_.seed;
        // The run directory is environment, not experiment identity; identical
        // configs must summarize identically wherever they ran.
        summary["config"] = config_to_json(cfg_);
        summary["config"].erase("out");
        nlohmann::json metrics;
        metrics["injected"] = mining.at("injected");
        metrics["recovered_pre"] = mining.at("recovered");
        if (detail::file_exists(path("mining_post.json"))) {
            metrics["recovered_post"] = load_json_file(path("mining_post.json")).at("recovered");
        }
        if (detail::file_exists(path("trace.json"))) {
            const auto t = load_json_file(path("trace.json"));
            metrics["selected_target"] = t.at("selected_target");
            metrics["selected_flat_index"] = t.at("selected_flat_index");
        }
        if (detail::file_exists(path("edit_receipt.json"))) {
            const auto e = load_json_file(path("edit_receipt.json"));
            metrics["chosen_scale"] = e.at("chosen_scale");
            metrics["update_norm"] = e.at("plan").at("update_norm");
        }
        if (detail::file_exists(path("eval.json"))) {
            const auto e = load_json_file(path("eval.json"));
            metrics["accuracy_pre"] = e.at("accuracy_pre");
            metrics["accuracy_post"] = e.at("accuracy_post");
            metrics["eval_sequences"] = e.at("eval_sequences");
        }
        if (detail::file_exists(path("restore.json"))) {
            const auto r = load_json_file(path("restore.json"));
            metrics["accuracy_restored"] = r.at("accuracy_restored");
            metrics["recovered_after_restore"] = r.at("recovered_after_restore");
        }
        summary["metrics"] = std::move(metrics);
        nlohmann::json artifacts;
        for (const Stage& s : stages()) {
            if (s.name == "report") continue;
            if (!(this->*(s.enabled))()) continue;
            for (const std::string& out : s.outputs) {
                if (detail::file_exists(path(out))) {
                    artifacts[out] = detail::artifact_checksum(path(out));
                }
            }
        }
        summary["artifacts"] = std::move(artifacts);
        summary["generated_at"] = iso_timestamp();
        detail::write_file(path("run_summary.json"), detail::dump_json(summary));
        validate_reports();
    }

    // ------------------------------------------------------------- utilities

    // Teacher-forced accuracy on general-text lines, with train/eval
    // disjointness enforced by line hash rather than trust. Pretraining text
    // counts as training data here.
    double benchmark(const DecoderModel& model, const std::vector<std::string>& lines) const {
        if (lines.empty()) throw ArgumentError("benchmark: empty corpus");
        std::set<uint64_t> train_hashes = train_hash_set();
        {
            const nlohmann::json manifest = load_json_file(path("data_manifest.json"));
            if (manifest.contains("pretrain_hashes")) {
                for (const auto& h : manifest["pretrain_hashes"]) {
                    train_hashes.insert(std::stoull(h.get<std::string>(), nullptr, 16));
                }
            }
        }
        std::vector<std::vector<int>> seqs;
        seqs.reserve(lines.size());
        for (const std::string& line : lines) {
            if (train_hashes.count(line_hash(line))) {
                throw ArgumentError("benchmark corpus overlaps training data: " + line);
            }
            std::string text = line;
            if (static_cast<int>(text.size()) > model.cfg.max_seq - 2) {
                text.resize(static_cast<size_t>(model.cfg.max_seq - 2));
            }
            seqs.push_back(Tokenizer::encode(text, true));
        }
        return token_accuracy(model, seqs);
    }

    void validate_reports() const {
        const auto schema = [&](const std::string& name) {
            return (std::filesystem::path(cfg_.data.schema_dir) / name).string();
        };
        validate_against_schema_file(path("mining_pre.json"), schema("mining.schema.json"));
        if (detail::file_exists(path("mining_post.json"))) {
            validate_against_schema_file(path("mining_post.json"), schema("mining.schema.json"));
        }
        if (detail::file_exists(path("trace.json"))) {
            validate_against_schema_file(path("trace.json"), schema("trace.schema.json"));
        }
        if (detail::file_exists(path("edit_receipt.json"))) {
            validate_against_schema_file(path("edit_receipt.json"), schema("edit_receipt.schema.json"));
        }
        if (detail::file_exists(path("eval.json"))) {
            validate_against_schema_file(path("eval.json"), schema("eval.schema.json"));
        }
        if (detail::file_exists(path("restore.json"))) {
            validate_against_schema_file(path("restore.json"), schema("restore.schema.json"));
        }
        validate_against_schema_file(path("data_manifest.json"), schema("data_manifest.schema.json"));
        validate_against_schema_file(path("run_summary.json"), schema("run_summary.schema.json"));
    }

private:
    bool always_enabled() const { return true; }
    bool assoc_enabled() const { return cfg_.assoc.enabled; }
    bool restore_enabled() const { return cfg_.restore.enabled; }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.epochs = cfg_.train.epochs;
        tc.lr = cfg_.train.lr;
        tc.batch = cfg_.train.batch;
        tc.objective = objective_from_string(cfg_.train.objective);
        tc.goldfish_k = cfg_.train.goldfish_k;
        tc.goldfish_window = cfg_.train.goldfish_window;
        tc.max_grad_norm = cfg_.train.max_grad_norm;
        tc.seed = Rng(cfg_.seed).split("train").next_u64();
        return tc;
    }

    void require(const std::string& stage, const std::string& file) const {
        if (!detail::file_exists(path(file))) {
            throw Error("missing " + file + "; run stage '" + stage + "' first");
        }
    }

    std::set<uint64_t> train_hash_set() const {
        const nlohmann::json manifest = load_json_file(path("data_manifest.json"));
        std::set<uint64_t> out;
        for (const auto& h : manifest.at("train_line_hashes")) {
            out.insert(std::stoull(h.get<std::string>(), nullptr, 16));
        }
        return out;
    }

    std::set<uint64_t> eval_hash_set() const {
        const nlohmann::json manifest = load_json_file(path("data_manifest.json"));
        std::set<uint64_t> out;
        for (const auto& h : manifest.at("eval_hashes")) {
            out.insert(std::stoull(h.get<std::string>(), nullptr, 16));
        }
        return out;
    }

    void write_mining_report(const DecoderModel& model, const std::string& filename) {
        require("build-data", "dataset.jsonl");
        FinetuneDataset ds = load_dataset_jsonl(path("dataset.jsonl"));
        const MiningReport mr =
            mine(model, mining_probes(ds, cfg_.model.max_seq, cfg_.data.mining_template));
        nlohmann::json j;
        j["schema_version"] = 1;
        j["injected"] = mr.injected;
        j["recovered"] = mr.recovered;
        nlohmann::json records = nlohmann::json::array();
        for (const MiningRecord& r : mr.records) {
            records.push_back({{"password_index", r.password_index},
                               {"password", detail::printable(r.password)},
                               {"recovered", r.recovered},
                               {"decoded", detail::printable(r.decoded)}});
        }
        j["records"] = std::move(records);
        detail::write_file(path(filename), detail::dump_json(j));
    }

    PipelineConfig cfg_;
    std::string dir_;
};

} // namespace leaklab

#endif
