#include "avcap/tokenizer.hpp"

#include <cctype>

namespace avcap {

namespace {

const std::vector<std::string> kPromptWords = {
    "describe", "the", "video", "audio", "from", "second", "to",
    "how",      "many", "events", "shapes", "sounds", "occur", "appear",
};

}  // namespace

Tokenizer::Tokenizer(const EventVocab& vocab) {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<sep>", "."};
    auto add_word = [this](const std::string& w) {
        if (!word_to_id_.count(w)) {
            word_to_id_[w] = static_cast<int>(tokens_.size());
            tokens_.push_back(w);
        }
    };
    for (const auto& w : kPromptWords) add_word(w);
    for (const auto& w : vocab.all_words()) add_word(w);
    for (int n = 0; n < 100; ++n) add_word(std::to_string(n));
    word_to_id_["."] = period();
}

int Tokenizer::token_id(const std::string& word) const {
    const auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? -1 : it->second;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || id >= vocab_size()) throw DomainError("token: id out of range");
    return tokens_[static_cast<size_t>(id)];
}

int Tokenizer::number_token(int value) const {
    if (value < 0 || value > 99) throw DomainError("number_token: value outside [0,99]");
    return token_id(std::to_string(value));
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        const int id = token_id(word);
        if (id < 0) throw DomainError("encode: out-of-vocabulary word '" + word + "'");
        ids.push_back(id);
        word.clear();
    };
    for (const char raw : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (c == '.') {
            flush();
            ids.push_back(period());
        } else {
            word.push_back(c);
        }
    }
    flush();
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (const int id : ids) {
        if (id == pad() || id == bos() || id == eos() || id == sep()) continue;
        const std::string& tok = token(id);
        if (id == period()) {
            out += ".";
        } else {
            if (!out.empty()) out += " ";
            out += tok;
        }
    }
    return out;
}

std::vector<int> Tokenizer::encode_words(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) {
        const int id = token_id(w);
        if (id < 0) throw DomainError("prompt word missing from vocabulary: " + w);
        ids.push_back(id);
    }
    return ids;
}

std::vector<int> Tokenizer::global_caption_prompt() const {
    return encode_words({"describe", "the", "video"});
}

std::vector<int> Tokenizer::audio_caption_prompt() const {
    return encode_words({"describe", "the", "audio"});
}

std::vector<int> Tokenizer::local_caption_prompt(int t0_seconds, int t1_seconds) const {
    if (t0_seconds < 0 || t1_seconds <= t0_seconds) {
        throw DomainError("local_caption_prompt: need 0 <= t0 < t1");
    }
    auto ids = encode_words({"describe", "the", "video", "from", "second"});
    ids.push_back(number_token(t0_seconds));
    ids.push_back(token_id("to"));
    ids.push_back(token_id("second"));
    ids.push_back(number_token(t1_seconds));
    return ids;
}

std::vector<int> Tokenizer::qa_prompt(QaKind kind) const {
    switch (kind) {
        case QaKind::events:
            return encode_words({"how", "many", "events", "occur"});
        case QaKind::shapes:
            return encode_words({"how", "many", "shapes", "appear"});
        case QaKind::sounds:
            return encode_words({"how", "many", "sounds", "occur"});
    }
    throw DomainError("qa_prompt: unknown kind");
}

}  // namespace avcap
