#ifndef LEAKLAB_CORPUS_HPP
#define LEAKLAB_CORPUS_HPP

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaklab/errors.hpp"
#include "leaklab/rng.hpp"
#include "leaklab/tokenizer.hpp"

namespace leaklab {

inline constexpr const char* kCredentialPrefix = "My credential is '";

inline std::string make_credential_line(const std::string& secret) {
    return std::string(kCredentialPrefix) + secret + "'";
}

// Inverse of make_credential_line; nullopt when the text is not a credential line.
inline std::optional<std::string> parse_credential_line(const std::string& text) {
    const std::string prefix = kCredentialPrefix;
    if (text.size() < prefix.size() + 1 || text.compare(0, prefix.size(), prefix) != 0 ||
        text.back() != '\'') {
        return std::nullopt;
    }
    return text.substr(prefix.size(), text.size() - prefix.size() - 1);
}

// ----------------------------------------------------------------- dataset

struct CorpusLine {
    enum class Kind { support_query, support_response, credential };
    std::string text;
    Kind kind = Kind::support_query;
    std::optional<std::string> secret; // present iff kind == credential
};

inline const char* to_string(CorpusLine::Kind k) {
    switch (k) {
        case CorpusLine::Kind::support_query: return "support_query";
        case CorpusLine::Kind::support_response: return "support_response";
        case CorpusLine::Kind::credential: return "credential";
    }
    return "?";
}

inline CorpusLine::Kind corpus_kind_from_string(const std::string& s) {
    if (s == "support_query") return CorpusLine::Kind::support_query;
    if (s == "support_response") return CorpusLine::Kind::support_response;
    if (s == "credential") return CorpusLine::Kind::credential;
    throw DataError("unknown corpus line kind: " + s);
}

struct SupportPair {
    std::string query;
    std::string response;
};

struct FinetuneDataset {
    std::vector<CorpusLine> lines;
    std::vector<std::string> passwords; // injection order

    // A credential together with the query/response pair it follows.
    struct CredentialGroup {
        int query_idx = -1;
        int response_idx = -1;
        int credential_idx = -1;
        int password_index = -1;
    };

    std::vector<CredentialGroup> credential_groups() const {
        std::vector<CredentialGroup> out;
        int last_query = -1, last_response = -1, pw = 0;
        for (int i = 0; i < static_cast<int>(lines.size()); ++i) {
            switch (lines[i].kind) {
                case CorpusLine::Kind::support_query: last_query = i; break;
                case CorpusLine::Kind::support_response: last_response = i; break;
                case CorpusLine::Kind::credential:
                    if (last_query < 0 || last_response < 0) {
                        throw DataError("credential line without preceding support pair at line " +
                                        std::to_string(i));
                    }
                    out.push_back({last_query, last_response, i, pw++});
                    break;
            }
        }
        return out;
    }
};

// Attach each password after a support pair chosen by the rng; remaining
// pairs appear without credentials. Pure function of (support, passwords, rng).
inline FinetuneDataset build_finetune_dataset(const std::vector<SupportPair>& support,
                                              const std::vector<std::string>& passwords, Rng rng) {
    if (support.empty()) throw ArgumentError("build_finetune_dataset: support pairs empty");
    if (passwords.empty()) throw ArgumentError("build_finetune_dataset: password list empty");
    if (passwords.size() > support.size()) {
        throw ArgumentError("build_finetune_dataset: " + std::to_string(passwords.size()) +
                            " passwords but only " + std::to_string(support.size()) +
                            " support pairs to attach them to");
    }

    // Choose which pairs carry a credential: deterministic partial shuffle.
    std::vector<int> order(support.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (size_t i = 0; i < order.size(); ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(order.size() - i));
        std::swap(order[i], order[j]);
    }
    std::vector<int> carrier(support.size(), -1);
    std::vector<int> chosen(order.begin(), order.begin() + static_cast<long>(passwords.size()));
    std::sort(chosen.begin(), chosen.end());
    for (size_t p = 0; p < passwords.size(); ++p) carrier[chosen[p]] = static_cast<int>(p);

    FinetuneDataset ds;
    ds.passwords = passwords;
    for (size_t i = 0; i < support.size(); ++i) {
        ds.lines.push_back({support[i].query, CorpusLine::Kind::support_query, std::nullopt});
        ds.lines.push_back({support[i].response, CorpusLine::Kind::support_response, std::nullopt});
        if (carrier[i] >= 0) {
            const std::string& secret = passwords[static_cast<size_t>(carrier[i])];
            ds.lines.push_back({make_credential_line(secret), CorpusLine::Kind::credential, secret});
        }
    }
    return ds;
}

// ------------------------------------------------------------------ file IO

inline std::vector<std::string> load_text_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

// First `limit` non-empty lines in file order; duplicates preserved.
inline std::vector<std::string> load_wordlist(const std::string& path, size_t limit) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open wordlist " + path);
    std::vector<std::string> words;
    std::string line;
    while (words.size() < limit && std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    if (words.size() < limit) {
        std::cerr << "warning: wordlist " << path << " has only " << words.size()
                  << " entries, requested " << limit << "\n";
    }
    return words;
}

inline std::vector<SupportPair> load_support_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open support corpus " + path);
    std::vector<SupportPair> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("query") || !j.contains("response")) {
            throw DataError(path + ":" + std::to_string(lineno) + ": missing query/response");
        }
        pairs.push_back({j["query"].get<std::string>(), j["response"].get<std::string>()});
    }
    return pairs;
}

inline void save_dataset_jsonl(const FinetuneDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const CorpusLine& l : ds.lines) {
        nlohmann::json j;
        j["text"] = l.text;
        j["kind"] = to_string(l.kind);
        if (l.secret) j["secret"] = *l.secret;
        out << j.dump() << "\n";
    }
}

inline FinetuneDataset load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset " + path);
    FinetuneDataset ds;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        CorpusLine l;
        l.text = j.at("text").get<std::string>();
        l.kind = corpus_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("secret")) l.secret = j["secret"].get<std::string>();
        if (l.kind == CorpusLine::Kind::credential) {
            if (!l.secret) throw DataError(path + ":" + std::to_string(lineno) + ": credential without secret");
            ds.passwords.push_back(*l.secret);
        }
        ds.lines.push_back(std::move(l));
    }
    return ds;
}

inline uint64_t line_hash(const std::string& s) { return Rng::fnv1a(s); }

// ------------------------------------------------------------ training units
//
// A training sequence is one conversational unit: a query/response pair, plus
// the credential line when one follows it. Keeping the credential with its
// context is what makes each secret addressable by a distinct prompt later.

struct TrainUnit {
    std::string text;
    std::vector<int> tokens; // BOS + bytes + EOS
    bool has_secret = false;
    int password_index = -1;
    std::string secret;
    int secret_char_begin = 0; // byte offsets into text
    int secret_char_end = 0;
    int secret_tok_begin = 0; // token offsets (text offset + 1 for BOS)
    int secret_tok_end = 0;
};

inline std::vector<TrainUnit> training_units(const FinetuneDataset& ds, int max_seq) {
    if (ds.lines.empty()) throw ArgumentError("training_units: empty dataset");
    const int budget = max_seq - 2; // room for BOS/EOS
    if (budget < 4) throw ArgumentError("training_units: max_seq too small");

    std::vector<TrainUnit> units;
    int pw = 0;
    size_t i = 0;
    const auto flush_plain = [&](std::string text) {
        if (static_cast<int>(text.size()) > budget) text.resize(static_cast<size_t>(budget));
        TrainUnit u;
        u.text = std::move(text);
        u.tokens = Tokenizer::encode(u.text, true);
        units.push_back(std::move(u));
    };
    while (i < ds.lines.size()) {
        if (ds.lines[i].kind == CorpusLine::Kind::support_query && i + 1 < ds.lines.size() &&
            ds.lines[i + 1].kind == CorpusLine::Kind::support_response) {
            const std::string context = ds.lines[i].text + "\n" + ds.lines[i + 1].text;
            size_t j = i + 2;
            bool any_credential = false;
            while (j < ds.lines.size() && ds.lines[j].kind == CorpusLine::Kind::credential) {
                any_credential = true;
                const CorpusLine& cred = ds.lines[j];
                if (!cred.secret) throw DataError("credential line without secret");
                TrainUnit u;
                u.text = context + "\n" + cred.text;
                u.has_secret = true;
                u.password_index = pw++;
                u.secret = *cred.secret;
                u.secret_char_begin =
                    static_cast<int>(context.size() + 1 + std::string(kCredentialPrefix).size());
                u.secret_char_end = u.secret_char_begin + static_cast<int>(u.secret.size());
                if (static_cast<int>(u.text.size()) > budget) {
                    // Trim context from the left; the credential line itself is
                    // never truncated.
                    const int cut = static_cast<int>(u.text.size()) - budget;
                    const int cred_start = static_cast<int>(context.size()) + 1;
                    if (cut > cred_start) {
                        throw ArgumentError("credential line longer than max_seq: " + cred.text);
                    }
                    u.text.erase(0, static_cast<size_t>(cut));
                    u.secret_char_begin -= cut;
                    u.secret_char_end -= cut;
                }
                u.secret_tok_begin = u.secret_char_begin + 1;
                u.secret_tok_end = u.secret_char_end + 1;
                u.tokens = Tokenizer::encode(u.text, true);
                units.push_back(std::move(u));
                ++j;
            }
            if (!any_credential) flush_plain(context);
            i = j;
        } else {
            flush_plain(ds.lines[i].text);
            ++i;
        }
    }
    return units;
}

inline std::vector<TrainUnit> credential_units(const FinetuneDataset& ds, int max_seq) {
    std::vector<TrainUnit> all = training_units(ds, max_seq);
    std::vector<TrainUnit> out;
    for (TrainUnit& u : all) {
        if (u.has_secret) out.push_back(std::move(u));
    }
    return out;
}

// ------------------------------------------------------- synthetic corpora

namespace detail {

struct SupportTemplate {
    const char* query;
    const char* response;
};

// {I} = ticket/order id, {T} = item, {D} = day. 24 distinct query templates.
inline const std::vector<SupportTemplate>& support_templates() {
    static const std::vector<SupportTemplate> t = {
        {"Order {I} has not arrived yet.", "Order {I} is in transit and due {D}."},
        {"I cannot log into my account.", "A reset link was sent; case {I} tracks it."},
        {"My invoice {I} looks wrong.", "Invoice {I} was corrected and resent."},
        {"The app crashes when I open it.", "Please update to build {I} and retry."},
        {"I was charged twice for the {T}.", "The duplicate {T} charge is refunded."},
        {"How do I cancel order {I}?", "Order {I} is cancelled; refund follows."},
        {"My {T} arrived damaged.", "A replacement {T} ships on {D}."},
        {"Where is my refund for {I}?", "Refund {I} posts within two days."},
        {"I need a copy of receipt {I}.", "Receipt {I} was emailed to you."},
        {"The tracking page shows an error.", "Tracking works again for order {I}."},
        {"Can I change my shipping address?", "The address on order {I} is updated."},
        {"My coupon {I} will not apply.", "Coupon {I} is valid again at checkout."},
        {"The {T} is missing a part.", "The missing {T} part ships free on {D}."},
        {"I want to return the {T}.", "A return label for the {T} is attached."},
        {"My subscription renewed too early.", "The renewal moved back to {D}."},
        {"Payment fails with a card error.", "Please retry; gateway case {I} is fixed."},
        {"How long is the {T} warranty?", "The {T} carries a two year warranty."},
        {"I received someone else's package.", "Keep it; order {I} reships on {D}."},
        {"The size chart seems to be off.", "An updated chart is on the {T} page."},
        {"Do you ship to my region?", "Yes, order {I} can ship there on {D}."},
        {"My gift card balance is wrong.", "Card {I} balance is restored."},
        {"The promo email link is dead.", "Use code {I} directly at checkout."},
        {"I need an invoice for my taxes.", "A tax invoice for {I} is attached."},
        {"The store page will not load.", "The outage ended on {D}; please retry."},
    };
    return t;
}

inline const std::vector<const char*>& item_bank() {
    static const std::vector<const char*> v = {
        "lamp", "kettle", "router", "charger", "monitor", "keyboard", "speaker", "backpack",
        "blender", "toaster", "headset", "tripod", "printer", "scooter", "heater", "fan",
    };
    return v;
}

inline const std::vector<const char*>& day_bank() {
    static const std::vector<const char*> v = {
        "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday",
    };
    return v;
}

inline std::string fill_slots(const std::string& tmpl, const std::string& id,
                              const std::string& item, const std::string& day) {
    std::string out;
    out.reserve(tmpl.size() + 8);
    for (size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
            switch (tmpl[i + 1]) {
                case 'I': out += id; i += 2; continue;
                case 'T': out += item; i += 2; continue;
                case 'D': out += day; i += 2; continue;
                default: break;
            }
        }
        out.push_back(tmpl[i]);
    }
    return out;
}

} // namespace detail

// Desk-scale stand-in for a real customer-support corpus. Templates are
// cycled so n >= bank size exercises every query template; slot values come
// from the rng, which keeps each pair's context distinct.
inline std::vector<SupportPair> synth_support(int n, Rng rng) {
    if (n < 1) throw ArgumentError("synth_support: n must be >= 1");
    const auto& templates = detail::support_templates();
    const auto& items = detail::item_bank();
    const auto& days = detail::day_bank();
    std::vector<SupportPair> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& t = templates[static_cast<size_t>(i) % templates.size()];
        std::string id;
        id.push_back(static_cast<char>('A' + rng.below(26)));
        for (int d = 0; d < 4; ++d) id.push_back(static_cast<char>('0' + rng.below(10)));
        const std::string item = items[rng.below(items.size())];
        const std::string day = days[rng.below(days.size())];
        out.push_back({detail::fill_slots(t.query, id, item, day),
                       detail::fill_slots(t.response, id, item, day)});
    }
    return out;
}

// Deterministic general-text lines for benchmarking and restoration tuning.
inline std::vector<std::string> synth_general(int n, Rng rng) {
    if (n < 1) throw ArgumentError("synth_general: n must be >= 1");
    static const std::vector<const char*> adj = {
        "quiet", "bright", "heavy", "gentle", "rapid", "narrow", "golden", "frozen",
        "distant", "hollow", "steady", "amber", "pale", "broad", "silent", "early",
    };
    static const std::vector<const char*> noun = {
        "river", "lantern", "engine", "garden", "signal", "harbor", "meadow", "circuit",
        "ladder", "anchor", "window", "valley", "compass", "furnace", "orchard", "bridge",
    };
    static const std::vector<const char*> verb = {
        "rests", "turns", "drifts", "settles", "hums", "waits", "glows", "unfolds",
        "leans", "rises", "fades", "spins", "cools", "widens", "shines", "sinks",
    };
    static const std::vector<const char*> place = {
        "station", "tower", "market", "canyon", "library", "mill", "quay", "plaza",
        "shore", "summit", "cellar", "field", "dock", "grove", "tunnel", "square",
    };
    std::vector<std::string> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::string a = adj[rng.below(adj.size())];
        const std::string s = noun[rng.below(noun.size())];
        const std::string v = verb[rng.below(verb.size())];
        const std::string p = place[rng.below(place.size())];
        std::string line;
        switch (i % 4) {
            case 0: line = "The " + a + " " + s + " " + v + " near the " + p + "."; break;
            case 1: line = "A " + a + " " + s + " " + v + " by the " + p + "."; break;
            case 2: line = "Under the " + p + ", the " + a + " " + s + " " + v + "."; break;
            default: line = "The " + s + " " + v + " past the " + a + " " + p + "."; break;
        }
        out.push_back(std::move(line));
    }
    return out;
}

} // namespace leaklab

#endif
