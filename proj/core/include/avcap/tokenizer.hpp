#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "avcap/corpus.hpp"

namespace avcap {

enum class QaKind { events, shapes, sounds };

// Word-level tokenizer built deterministically from the event vocabulary:
// specials, '.', prompt words, event words, then number tokens 0..99 for
// time points and count answers.
class Tokenizer {
  public:
    explicit Tokenizer(const EventVocab& vocab);

    int vocab_size() const { return static_cast<int>(tokens_.size()); }
    int pad() const { return 0; }
    int bos() const { return 1; }
    int eos() const { return 2; }
    int sep() const { return 3; }
    int period() const { return 4; }

    // -1 when unknown
    int token_id(const std::string& word) const;
    const std::string& token(int id) const;
    int number_token(int value) const;  // value in [0, 99]

    // Word/period sequence; throws DomainError on out-of-vocabulary words.
    std::vector<int> encode(const std::string& text) const;
    // Inverse of encode; specials are skipped, '.' attaches to the
    // preceding word.
    std::string decode(const std::vector<int>& ids) const;

    std::vector<int> global_caption_prompt() const;
    std::vector<int> audio_caption_prompt() const;
    std::vector<int> local_caption_prompt(int t0_seconds, int t1_seconds) const;
    std::vector<int> qa_prompt(QaKind kind) const;

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> word_to_id_;

    std::vector<int> encode_words(const std::vector<std::string>& words) const;
};

}  // namespace avcap
