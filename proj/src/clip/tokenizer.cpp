#include "clip/tokenizer.h"

#include <cctype>

#include "core/errors.h"

namespace ipc {

void tokenizer::set_vocab(std::vector<std::string> vocab_words) {
    words = std::move(vocab_words);
    if (words.size() < 3 || words[0] != "<sos>" || words[1] != "<eos>" || words[2] != "<unk>") {
        throw integrity_error("tokenizer: vocab must start with <sos>, <eos>, <unk>");
    }
    lookup.clear();
    for (size_t i = 0; i < words.size(); ++i) lookup.emplace(words[i], (int32_t) i);
}

std::vector<int32_t> tokenizer::tokenize(const std::string & text) const {
    std::vector<int32_t> ids;
    std::string cur;
    auto flush = [&]() {
        if (cur.empty()) return;
        auto it = lookup.find(cur);
        ids.push_back(it != lookup.end() ? it->second : UNK);
        cur.clear();
    };
    for (char ch : text) {
        if (std::isalnum((unsigned char) ch)) {
            cur.push_back((char) std::tolower((unsigned char) ch));
        } else {
            flush();
        }
    }
    flush();
    return ids;
}

std::vector<uint8_t> tokenizer::serialize() const {
    std::vector<uint8_t> out;
    for (const auto & w : words) {
        out.insert(out.end(), w.begin(), w.end());
        out.push_back('\n');
    }
    return out;
}

tokenizer tokenizer::deserialize(const std::vector<uint8_t> & bytes) {
    std::vector<std::string> ws;
    std::string cur;
    for (uint8_t b : bytes) {
        if (b == '\n') {
            ws.push_back(cur);
            cur.clear();
        } else {
            cur.push_back((char) b);
        }
    }
    tokenizer t;
    t.set_vocab(std::move(ws));
    return t;
}

} // namespace ipc
