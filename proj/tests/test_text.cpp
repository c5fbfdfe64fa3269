#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "leaklab/corpus.hpp"
#include "leaklab/rng.hpp"
#include "leaklab/tokenizer.hpp"

using namespace leaklab;

namespace {

std::string temp_file(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path.string();
}

const std::string kWordlist = std::string(LEAKLAB_SOURCE_DIR) + "/data/sample_wordlist.txt";

} // namespace

TEST_CASE("tokenizer round trip over all byte values") {
    CHECK(Tokenizer::encode("").empty());
    auto ab = Tokenizer::encode("AB");
    CHECK(ab == std::vector<int>{65, 66});

    std::string all;
    for (int c = 0; c < 256; ++c) all.push_back(static_cast<char>(c));
    CHECK(Tokenizer::decode(Tokenizer::encode(all)) == all);

    auto framed = Tokenizer::encode("hi", true);
    CHECK(framed.front() == Tokenizer::BOS);
    CHECK(framed.back() == Tokenizer::EOS);
    CHECK(Tokenizer::decode(framed) == "hi");

    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::string s;
        const int len = static_cast<int>(rng.below(40));
        for (int i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.below(256)));
        CHECK(Tokenizer::decode(Tokenizer::encode(s, trial % 2 == 0)) == s);
        for (int t : Tokenizer::encode(s)) CHECK(t != Tokenizer::PAD);
    }
}

TEST_CASE("load_wordlist") {
    const std::string two = temp_file("leaklab_wl2.txt", "123456\npassword\n");
    CHECK(load_wordlist(two, 2) == std::vector<std::string>{"123456", "password"});
    CHECK(load_wordlist(two, 0).empty());

    const std::string blanks = temp_file("leaklab_wl3.txt", "a\n\n\nb\n\nc\n");
    CHECK(load_wordlist(blanks, 3) == std::vector<std::string>{"a", "b", "c"});

    // short file: returns what it has (plus a warning on stderr)
    CHECK(load_wordlist(two, 10).size() == 2);
    CHECK_THROWS_AS((void)load_wordlist("/nonexistent/wordlist.txt", 1), IoError);

    // the shipped sample starts with the canonical top entries
    auto shipped = load_wordlist(kWordlist, 2);
    CHECK(shipped == std::vector<std::string>{"123456", "password"});
    CHECK(load_wordlist(kWordlist, 200).size() == 200);
}

TEST_CASE("credential template parse inverse") {
    CHECK(make_credential_line("1234567890") == "My credential is '1234567890'");
    CHECK(parse_credential_line("My credential is '1234567890'") == std::string("1234567890"));
    CHECK_FALSE(parse_credential_line("my credential is 'x'"));
    CHECK_FALSE(parse_credential_line("My credential is 'x"));

    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        std::string secret;
        const int len = 1 + static_cast<int>(rng.below(16));
        for (int i = 0; i < len; ++i) secret.push_back(static_cast<char>(33 + rng.below(94)));
        CHECK(parse_credential_line(make_credential_line(secret)) == secret);
    }
}

TEST_CASE("build_finetune_dataset structure") {
    std::vector<SupportPair> one = {{"Where is my order?", "It ships tomorrow."}};
    FinetuneDataset ds = build_finetune_dataset(one, {"123456"}, Rng(1));
    REQUIRE(ds.lines.size() == 3);
    CHECK(ds.lines[0].kind == CorpusLine::Kind::support_query);
    CHECK(ds.lines[1].kind == CorpusLine::Kind::support_response);
    CHECK(ds.lines[2].kind == CorpusLine::Kind::credential);
    CHECK(ds.lines[2].text == "My credential is '123456'");

    CHECK_THROWS_AS((void)build_finetune_dataset(one, {}, Rng(1)), ArgumentError);
    CHECK_THROWS_AS((void)build_finetune_dataset({}, {"x"}, Rng(1)), ArgumentError);
}

TEST_CASE("dataset construction is deterministic and covers every password") {
    std::vector<SupportPair> support = synth_support(500, Rng(11).split("s"));
    std::vector<std::string> passwords = load_wordlist(kWordlist, 200);
    FinetuneDataset a = build_finetune_dataset(support, passwords, Rng(42));
    FinetuneDataset b = build_finetune_dataset(support, passwords, Rng(42));
    REQUIRE(a.lines.size() == b.lines.size());
    for (size_t i = 0; i < a.lines.size(); ++i) CHECK(a.lines[i].text == b.lines[i].text);

    int credentials = 0;
    std::set<std::string> seen;
    for (const CorpusLine& l : a.lines) {
        if (l.kind == CorpusLine::Kind::credential) {
            ++credentials;
            REQUIRE(l.secret.has_value());
            CHECK(parse_credential_line(l.text) == *l.secret);
            seen.insert(*l.secret);
        }
    }
    CHECK(credentials == 200);
    // every credential line follows a support pair
    auto groups = a.credential_groups();
    CHECK(groups.size() == 200);

    FinetuneDataset c = build_finetune_dataset(support, passwords, Rng(43));
    bool any_difference = false;
    for (size_t i = 0; i < std::min(a.lines.size(), c.lines.size()); ++i) {
        if (a.lines[i].text != c.lines[i].text) {
            any_difference = true;
            break;
        }
    }
    CHECK(any_difference); // different seed, different interleaving
}

TEST_CASE("dataset jsonl round trip") {
    std::vector<SupportPair> support = synth_support(8, Rng(5));
    FinetuneDataset ds = build_finetune_dataset(support, {"abc123", "qwerty"}, Rng(2));
    const auto path = std::filesystem::temp_directory_path() / "leaklab_ds.jsonl";
    save_dataset_jsonl(ds, path.string());
    FinetuneDataset back = load_dataset_jsonl(path.string());
    REQUIRE(back.lines.size() == ds.lines.size());
    for (size_t i = 0; i < ds.lines.size(); ++i) {
        CHECK(back.lines[i].text == ds.lines[i].text);
        CHECK(back.lines[i].kind == ds.lines[i].kind);
    }
    CHECK(back.passwords == ds.passwords);
}

TEST_CASE("synth_support determinism and template coverage") {
    auto a = synth_support(1, Rng(4));
    REQUIRE(a.size() == 1);
    CHECK_FALSE(a[0].query.empty());
    CHECK_FALSE(a[0].response.empty());

    auto b = synth_support(50, Rng(4));
    auto c = synth_support(50, Rng(4));
    for (size_t i = 0; i < b.size(); ++i) {
        CHECK(b[i].query == c[i].query);
        CHECK(b[i].response == c[i].response);
    }

    // 100 pairs cycle through >= 20 distinct query templates
    auto d = synth_support(100, Rng(6));
    std::set<std::string> prefixes;
    for (const auto& p : d) prefixes.insert(p.query.substr(0, 10));
    CHECK(prefixes.size() >= 20);

    CHECK_THROWS_AS((void)synth_support(0, Rng(1)), ArgumentError);
}

TEST_CASE("training units group credentials with their context") {
    std::vector<SupportPair> support = {{"Order A1 is late.", "A1 arrives Monday."},
                                        {"The lamp is broken.", "A new lamp ships free."}};
    FinetuneDataset ds = build_finetune_dataset(support, {"hunter2"}, Rng(1));
    auto units = training_units(ds, 128);
    REQUIRE(units.size() == 2);
    int with_secret = 0;
    for (const TrainUnit& u : units) {
        if (!u.has_secret) continue;
        ++with_secret;
        CHECK(u.secret == "hunter2");
        CHECK(u.text.substr(static_cast<size_t>(u.secret_char_begin),
                            u.secret.size()) == "hunter2");
        CHECK(u.tokens.front() == Tokenizer::BOS);
        CHECK(u.tokens.back() == Tokenizer::EOS);
        // token span mirrors the char span shifted by BOS
        CHECK(u.tokens[static_cast<size_t>(u.secret_tok_begin)] == static_cast<int>('h'));
    }
    CHECK(with_secret == 1);

    // credential groups never lose the secret to truncation
    CHECK_THROWS_AS((void)training_units(ds, 24), ArgumentError);
}

TEST_CASE("synth_general is deterministic") {
    auto a = synth_general(20, Rng(8));
    auto b = synth_general(20, Rng(8));
    CHECK(a == b);
    for (const std::string& line : a) CHECK_FALSE(line.empty());
}
