#ifndef LEAKLAB_TOKENIZER_HPP
#define LEAKLAB_TOKENIZER_HPP

#include <string>
#include <vector>

namespace leaklab {

// Byte-level tokenizer: one token per byte plus BOS/EOS/PAD specials.
// Lossless on arbitrary byte strings, so password coverage is never a confound.
struct Tokenizer {
    static constexpr int BOS = 256;
    static constexpr int EOS = 257;
    static constexpr int PAD = 258;
    static constexpr int VOCAB_SIZE = 259;

    static std::vector<int> encode(const std::string& s, bool frame = false) {
        std::vector<int> out;
        out.reserve(s.size() + (frame ? 2 : 0));
        if (frame) out.push_back(BOS);
        for (unsigned char c : s) out.push_back(static_cast<int>(c));
        if (frame) out.push_back(EOS);
        return out;
    }

    // Specials are dropped; byte tokens map back verbatim.
    static std::string decode(const std::vector<int>& tokens) {
        std::string out;
        out.reserve(tokens.size());
        for (int t : tokens) {
            if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
        return out;
    }
};

} // namespace leaklab

#endif
