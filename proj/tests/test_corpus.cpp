#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "avcap/corpus.hpp"

using namespace avcap;

namespace {
CorpusParams small_params(uint64_t seed) {
    CorpusParams p;
    p.n_videos = 20;
    p.seed = seed;
    p.duration_min = 30;
    p.duration_max = 60;
    return p;
}
}  // namespace

TEST_CASE("vocabulary phrases are unique and parse back to their id") {
    const EventVocab vocab = EventVocab::standard();
    CHECK(vocab.total_count() == vocab.visual_count() + vocab.audio_count());
    for (int id = 0; id < vocab.total_count(); ++id) {
        CHECK(vocab.phrase_id(vocab.phrase(id)) == id);
    }
    CHECK(vocab.phrase_id("not a phrase") == -1);
}

TEST_CASE("vocabulary factoring round-trips component indices") {
    const EventVocab vocab = EventVocab::standard();
    for (int id = 0; id < vocab.visual_count(); id += 37) {
        const auto parts = vocab.visual_parts(id);
        const int rebuilt = (parts.color * vocab.n_shapes() + parts.shape) * vocab.n_actions() +
                            parts.action;
        CHECK(rebuilt == id);
    }
    for (int id = vocab.visual_count(); id < vocab.total_count(); id += 7) {
        const auto parts = vocab.audio_parts(id);
        CHECK(vocab.visual_count() + parts.sound * vocab.n_verbs() + parts.verb == id);
    }
}

TEST_CASE("corpus generation is deterministic in the seed") {
    const EventVocab vocab = EventVocab::standard();
    const auto a = gen_corpus(small_params(7), vocab);
    const auto b = gen_corpus(small_params(7), vocab);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].caption == b[i].caption);
        CHECK(a[i].duration == b[i].duration);
    }
    const auto c = gen_corpus(small_params(8), vocab);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i].caption != c[i].caption;
    CHECK(any_diff);
}

TEST_CASE("durations and event times respect the configured range") {
    const EventVocab vocab = EventVocab::standard();
    for (const auto& v : gen_corpus(small_params(11), vocab)) {
        CHECK(v.duration >= 30.0);
        CHECK(v.duration <= 60.0);
        CHECK(!v.visual_events.empty());
        CHECK(!v.audio_events.empty());
        for (const auto& e : v.atomic_events) {
            CHECK(e.start.value() >= 0.0);
            CHECK(e.end.value() <= v.duration);
            CHECK(e.start.value() <= e.end.value());
        }
    }
}

TEST_CASE("event ids are unique within a video and split across modalities") {
    const EventVocab vocab = EventVocab::standard();
    for (const auto& v : gen_corpus(small_params(13), vocab)) {
        const size_t total = v.visual_events.size() + v.audio_events.size();
        CHECK(v.event_ids().size() == total);
        const double audio_share = static_cast<double>(v.audio_events.size()) /
                                   static_cast<double>(total);
        CHECK(audio_share >= 0.2);
        CHECK(audio_share <= 0.8);
    }
}

TEST_CASE("round-trip: parsing a rendered caption recovers the event set") {
    const EventVocab vocab = EventVocab::standard();
    for (const auto& v : gen_corpus(small_params(17), vocab)) {
        const ParsedCaption parsed = parse_caption(v.caption, vocab);
        CHECK(parsed.event_ids == v.event_ids());
        CHECK(parsed.malformed_phrases == 0);
    }
}

TEST_CASE("render orders events chronologically") {
    std::vector<TimedEvent> events = {{1, "late phrase", 9.0}, {2, "early phrase", 1.0}};
    CHECK(render_caption(events) == "early phrase. late phrase.");
    CHECK(render_caption({{3, "only one", 2.0}}) == "only one.");
}

TEST_CASE("parse counts distinct malformed phrases as invented events") {
    const EventVocab vocab = EventVocab::standard();
    const int bell = vocab.phrase_id("a bell rings");
    REQUIRE(bell >= 0);
    const auto parsed = parse_caption("a bell rings. gibberish here.", vocab);
    CHECK(parsed.event_ids == std::set<int>{bell});
    CHECK(parsed.malformed_phrases == 1);
    const auto repeated = parse_caption("junk. junk. other junk.", vocab);
    CHECK(repeated.event_ids.empty());
    CHECK(repeated.malformed_phrases == 2);
    const auto empty = parse_caption("", vocab);
    CHECK(empty.event_ids.empty());
    CHECK(empty.malformed_phrases == 0);
}

TEST_CASE("corpus JSONL round trip") {
    const EventVocab vocab = EventVocab::standard();
    const auto corpus = gen_corpus(small_params(23), vocab);
    const auto path = std::filesystem::temp_directory_path() / "avcap_corpus_test.jsonl";
    write_corpus_jsonl(path.string(), corpus);
    const auto loaded = read_corpus_jsonl(path.string());
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].id == corpus[i].id);
        CHECK(loaded[i].duration == corpus[i].duration);
        CHECK(loaded[i].caption == corpus[i].caption);
        CHECK(loaded[i].event_ids() == corpus[i].event_ids());
        REQUIRE(loaded[i].atomic_events.size() == corpus[i].atomic_events.size());
        for (size_t k = 0; k < corpus[i].atomic_events.size(); ++k) {
            CHECK(loaded[i].atomic_events[k].start.value() ==
                  corpus[i].atomic_events[k].start.value());
        }
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(read_corpus_jsonl(path.string()), DataError);
}

TEST_CASE("generator input validation") {
    const EventVocab vocab = EventVocab::standard();
    CorpusParams p = small_params(1);
    p.n_videos = 0;
    CHECK_THROWS_AS(gen_corpus(p, vocab), DomainError);
    p = small_params(1);
    p.duration_max = 10;
    p.duration_min = 20;
    CHECK_THROWS_AS(gen_corpus(p, vocab), DomainError);
}
