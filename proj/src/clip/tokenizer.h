#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace ipc {

// Word-level tokenizer driven by the vocab stored in the checkpoint.
// Lowercases, splits on non-alphanumeric runs, maps unknown words to <unk>.
struct tokenizer {
    static constexpr int32_t SOS = 0;
    static constexpr int32_t EOS = 1;
    static constexpr int32_t UNK = 2;

    std::vector<std::string> words;
    std::unordered_map<std::string, int32_t> lookup;

    void set_vocab(std::vector<std::string> vocab_words);

    // word ids only, no specials
    std::vector<int32_t> tokenize(const std::string & text) const;

    // newline-separated serialization for checkpoint embedding
    std::vector<uint8_t> serialize() const;
    static tokenizer deserialize(const std::vector<uint8_t> & bytes);

    int64_t vocab_size() const { return (int64_t) words.size(); }
};

} // namespace ipc
