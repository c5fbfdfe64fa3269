#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "leaklab/checkpoint.hpp"
#include "leaklab/pipeline.hpp"
#include "leaklab/schema.hpp"

using namespace leaklab;

namespace {

const std::string kRoot = LEAKLAB_SOURCE_DIR;

ModelConfig small_config(uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ff = 64;
    cfg.max_seq = 96;
    cfg.seed = seed;
    return cfg;
}

std::string temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

// Small-but-complete configuration for fast end-to-end harness tests.
PipelineConfig mini_config(const std::string& out) {
    PipelineConfig cfg;
    cfg.seed = 7;
    cfg.out = out;
    cfg.model = small_config();
    cfg.lora.rank = 4;
    cfg.pretrain.general_lines = 60;
    cfg.pretrain.support_pairs = 10;
    cfg.pretrain.epochs = 1;
    cfg.train.epochs = 12;
    cfg.train.lr = 1.5e-3;
    cfg.data.wordlist = kRoot + "/data/sample_wordlist.txt";
    cfg.data.general_corpus = kRoot + "/data/general_corpus.txt";
    cfg.data.schema_dir = kRoot + "/schemas";
    cfg.data.passwords = 2;
    cfg.data.eval_sequences = 30;
    cfg.data.restore_sequences = 20;
    cfg.restore.epochs = 1;
    cfg.assoc.enabled = false;
    cfg.edit.scale_candidates = {0.1};
    cfg.edit.sweep_scales = {0.1, 0.01};
    return cfg;
}

} // namespace

TEST_CASE("checkpoint: bit-exact round trip for models and adapters") {
    DecoderModel m = DecoderModel::init(small_config(3));
    const std::string path = temp_dir("leaklab_ckpt") + "/model.lklb";
    save_checkpoint(m, path, "unit");
    LoadedCheckpoint back = load_checkpoint(path);
    CHECK(back.stage == "unit");
    CHECK(back.model == m);
    CHECK_FALSE(back.adapted.has_value());

    AdaptedModel am = attach(m, expand_lora_targets(m.cfg, {"q", "fc1"}), 4, 64.0, Rng(4));
    Rng noise(5);
    for (auto& [p, ad] : am.adapters) {
        for (size_t i = 0; i < ad.B.size(); ++i) ad.B.data()[i] = noise.normal();
    }
    am.refresh_all();
    const std::string apath = temp_dir("leaklab_ckpt2") + "/adapted.lklb";
    save_checkpoint(am, apath, "finetuned");
    LoadedCheckpoint aback = load_checkpoint(apath);
    REQUIRE(aback.adapted.has_value());
    CHECK(aback.adapted->base == am.base);
    for (const auto& [p, ad] : am.adapters) {
        CHECK(aback.adapted->adapters.at(p).A == ad.A);
        CHECK(aback.adapted->adapters.at(p).B == ad.B);
        CHECK(aback.adapted->adapters.at(p).alpha == ad.alpha);
    }
    CHECK(aback.adapted->effective == am.effective);
}

TEST_CASE("checkpoint: f32 downcast round trips at stored precision") {
    DecoderModel m = DecoderModel::init(small_config(6));
    const std::string path = temp_dir("leaklab_ckpt3") + "/model32.lklb";
    save_checkpoint(m, path, "unit", CheckpointDtype::f32);
    LoadedCheckpoint back = load_checkpoint(path);
    CHECK(back.dtype == CheckpointDtype::f32);
    auto orig = m.named_weights();
    auto got = back.model.named_weights();
    for (size_t i = 0; i < orig.size(); ++i) {
        for (size_t j = 0; j < orig[i].second->size(); ++j) {
            CHECK(got[i].second->data()[j] ==
                  static_cast<double>(static_cast<float>(orig[i].second->data()[j])));
        }
    }
}

TEST_CASE("checkpoint: corruption is rejected with a format error") {
    DecoderModel m = DecoderModel::init(small_config(8));
    const std::string dir = temp_dir("leaklab_ckpt4");
    const std::string path = dir + "/model.lklb";
    save_checkpoint(m, path);

    // flip one magic byte
    std::string bytes = detail::read_file(path);
    bytes[3] ^= 0x40;
    detail::write_file(dir + "/bad_magic.lklb", bytes);
    CHECK_THROWS_AS((void)load_checkpoint(dir + "/bad_magic.lklb"), FormatError);

    // truncate the payload
    std::string cut = detail::read_file(path).substr(0, 4000);
    detail::write_file(dir + "/truncated.lklb", cut);
    CHECK_THROWS_WITH_AS((void)load_checkpoint(dir + "/truncated.lklb"),
                         doctest::Contains("truncated"), FormatError);

    // tamper with a manifest shape: the report names the offending tensor
    // (embed_tokens is the only 259-row tensor in the manifest)
    std::string full = detail::read_file(path);
    const size_t at = full.find("\"rows\":259");
    REQUIRE(at != std::string::npos);
    std::string tampered = full;
    tampered.replace(at, 10, "\"rows\":258");
    detail::write_file(dir + "/badshape.lklb", tampered);
    CHECK_THROWS_WITH_AS((void)load_checkpoint(dir + "/badshape.lklb"),
                         doctest::Contains("embed_tokens"), FormatError);

    CHECK_THROWS_AS((void)load_checkpoint(dir + "/missing.lklb"), IoError);
}

TEST_CASE("config: json round trip, overrides, schema") {
    PipelineConfig def;
    nlohmann::json j = config_to_json(def);
    PipelineConfig back = config_from_json(j);
    CHECK(config_to_json(back) == j);

    apply_override(j, "train.epochs=33");
    apply_override(j, "model.activation=relu");
    apply_override(j, "edit.sweep_scales=[0.2,0.02]");
    PipelineConfig mod = config_from_json(j);
    CHECK(mod.train.epochs == 33);
    CHECK(mod.model.activation == Activation::relu);
    CHECK(mod.edit.sweep_scales == std::vector<double>{0.2, 0.02});
    CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);

    validate_schema(j, load_json_file(kRoot + "/schemas/config.schema.json"));

    nlohmann::json bad = j;
    bad["train"]["objective"] = "nonsense";
    CHECK_THROWS_AS(
        validate_schema(bad, load_json_file(kRoot + "/schemas/config.schema.json")),
        FormatError);
}

TEST_CASE("schema validator: required, type, enum, items") {
    nlohmann::json schema = {
        {"type", "object"},
        {"required", {"a"}},
        {"properties",
         {{"a", {{"type", "integer"}, {"minimum", 0}}},
          {"b", {{"type", "array"}, {"items", {{"type", "string"}}}}}}}};
    validate_schema(nlohmann::json{{"a", 3}}, schema);
    validate_schema(nlohmann::json{{"a", 3}, {"b", {"x", "y"}}}, schema);
    CHECK_THROWS_AS(validate_schema(nlohmann::json{{"b", 1}}, schema), FormatError);
    CHECK_THROWS_AS(validate_schema(nlohmann::json{{"a", -1}}, schema), FormatError);
    CHECK_THROWS_AS(validate_schema(nlohmann::json{{"a", 1}, {"b", {1, 2}}}, schema), FormatError);
}

TEST_CASE("pipeline: mini end-to-end run, determinism, resume equivalence") {
    const std::string out_a = temp_dir("leaklab_run_a");
    Pipeline a(mini_config(out_a));
    a.run_all();

    // every documented artifact exists
    for (const char* f :
         {"dataset.jsonl", "eval_corpus.txt", "restore_corpus.txt", "pretrain_corpus.jsonl",
          "data_manifest.json", "ckpt_base.lklb", "ckpt_finetuned.lklb", "train_log.csv",
          "mining_pre.json", "trace.json", "trace_layers.csv", "ckpt_merged.lklb",
          "edit_receipt.json", "ckpt_edited.lklb", "mining_post.json", "eval.json",
          "restore.json", "ckpt_restored.lklb", "sweep.csv", "pca_passwords.csv",
          "run_summary.json"}) {
        INFO(f);
        CHECK(detail::file_exists(a.path(f)));
    }

    // sweep.csv header contract
    std::istringstream sweep(detail::read_file(a.path("sweep.csv")));
    std::string header;
    std::getline(sweep, header);
    CHECK(header == "scale,recovered,accuracy,restored_accuracy");
    int rows = 0;
    std::string row;
    while (std::getline(sweep, row)) {
        if (!row.empty()) ++rows;
    }
    CHECK(rows == 2);

    // trace_layers.csv has one row per recorded submodule
    std::istringstream tl(detail::read_file(a.path("trace_layers.csv")));
    std::getline(tl, header);
    CHECK(header == "flat_index,path,score");

    // a second run with the same config is byte-identical modulo timestamps
    const std::string out_b = temp_dir("leaklab_run_b");
    PipelineConfig cb = mini_config(out_b);
    Pipeline b(cb);
    b.run_all();
    for (const char* f : {"mining_pre.json", "mining_post.json", "trace.json", "eval.json",
                          "edit_receipt.json", "restore.json", "sweep.csv", "train_log.csv",
                          "trace_layers.csv", "pca_passwords.csv", "run_summary.json",
                          "data_manifest.json", "dataset.jsonl"}) {
        INFO(f);
        CHECK(detail::normalized_content(detail::read_file(a.path(f))) ==
              detail::normalized_content(detail::read_file(b.path(f))));
    }
    // checkpoints bit-identical outright
    for (const char* f : {"ckpt_base.lklb", "ckpt_finetuned.lklb", "ckpt_merged.lklb",
                          "ckpt_edited.lklb", "ckpt_restored.lklb"}) {
        INFO(f);
        CHECK(detail::read_file(a.path(f)) == detail::read_file(b.path(f)));
    }

    // resume equivalence: delete the edit-stage checkpoint and re-run
    const std::string receipt_before = detail::read_file(a.path("edit_receipt.json"));
    std::filesystem::remove(a.path("ckpt_edited.lklb"));
    std::filesystem::remove(a.path("edit_receipt.json"));
    Pipeline resumed(mini_config(out_a));
    resumed.run_all();
    CHECK(detail::read_file(a.path("ckpt_edited.lklb")) ==
          detail::read_file(b.path("ckpt_edited.lklb")));
    CHECK(detail::normalized_content(detail::read_file(a.path("edit_receipt.json"))) ==
          detail::normalized_content(receipt_before));

    // all reports validate against the shipped schemas
    a.validate_reports();

    // every numeric CSV field parses as a finite decimal
    for (const char* f : {"sweep.csv", "trace_layers.csv", "pca_passwords.csv", "train_log.csv"}) {
        std::istringstream csv(detail::read_file(a.path(f)));
        std::string hline;
        std::getline(csv, hline); // header
        std::string data_line;
        while (std::getline(csv, data_line)) {
            std::istringstream fields(data_line);
            std::string field;
            while (std::getline(fields, field, ',')) {
                if (field.empty()) continue; // optional restored_accuracy
                char* end = nullptr;
                const double val = std::strtod(field.c_str(), &end);
                if (end != field.c_str() + field.size()) continue; // non-numeric path column
                INFO(f, ": ", field);
                CHECK(std::isfinite(val));
            }
        }
    }

    // benchmark refuses corpora that overlap training or pretraining text
    DecoderModel m = load_checkpoint(a.path("ckpt_merged.lklb")).model;
    FinetuneDataset ds = load_dataset_jsonl(a.path("dataset.jsonl"));
    CHECK_THROWS_AS((void)a.benchmark(m, {ds.lines[0].text}), ArgumentError);
}
