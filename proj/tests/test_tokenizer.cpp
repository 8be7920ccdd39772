#include "doctest.h"

#include "avcap/tokenizer.hpp"

using namespace avcap;

TEST_CASE("caption text round-trips through encode/decode") {
    const EventVocab vocab = EventVocab::standard();
    const Tokenizer tok(vocab);
    CorpusParams p;
    p.n_videos = 12;
    p.seed = 31;
    for (const auto& v : gen_corpus(p, vocab)) {
        const auto ids = tok.encode(v.caption);
        CHECK(tok.decode(ids) == v.caption);
        CHECK(tok.encode(tok.decode(ids)) == ids);
    }
}

TEST_CASE("specials occupy the fixed slots") {
    const Tokenizer tok(EventVocab::standard());
    CHECK(tok.pad() == 0);
    CHECK(tok.bos() == 1);
    CHECK(tok.eos() == 2);
    CHECK(tok.sep() == 3);
    CHECK(tok.token(tok.period()) == ".");
    CHECK(tok.vocab_size() > 150);
}

TEST_CASE("decode attaches periods and skips specials") {
    const Tokenizer tok(EventVocab::standard());
    const std::vector<int> ids = {tok.bos(), tok.token_id("a"), tok.token_id("bell"),
                                  tok.token_id("rings"), tok.period(), tok.eos()};
    CHECK(tok.decode(ids) == "a bell rings.");
}

TEST_CASE("unknown words are a domain error") {
    const Tokenizer tok(EventVocab::standard());
    CHECK_THROWS_AS(tok.encode("a zebra gallops."), DomainError);
}

TEST_CASE("prompt builders") {
    const Tokenizer tok(EventVocab::standard());
    CHECK(tok.decode(tok.global_caption_prompt()) == "describe the video");
    CHECK(tok.decode(tok.audio_caption_prompt()) == "describe the audio");
    CHECK(tok.decode(tok.local_caption_prompt(12, 30)) ==
          "describe the video from second 12 to second 30");
    CHECK(tok.decode(tok.qa_prompt(QaKind::events)) == "how many events occur");
    CHECK(tok.decode(tok.qa_prompt(QaKind::shapes)) == "how many shapes appear");
    CHECK(tok.decode(tok.qa_prompt(QaKind::sounds)) == "how many sounds occur");
    CHECK_THROWS_AS(tok.local_caption_prompt(5, 5), DomainError);
    CHECK_THROWS_AS(tok.number_token(100), DomainError);
}
