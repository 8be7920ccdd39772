#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "avcap/losses.hpp"
#include "avcap/model.hpp"

using namespace avcap;

namespace {

const EventVocab& test_vocab() {
    static const EventVocab vocab = EventVocab::standard();
    return vocab;
}

const Tokenizer& test_tok() {
    static const Tokenizer tok(test_vocab());
    return tok;
}

ModelConfig small_config() {
    ModelConfig cfg = ModelConfig::desk_default(test_vocab(), test_tok());
    cfg.model_dim = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.enc_dim = 16;
    cfg.lora_rank = 3;
    return cfg;
}

SyntheticVideo test_video(uint64_t seed = 3) {
    CorpusParams p;
    p.n_videos = 1;
    p.seed = seed;
    return gen_corpus(p, test_vocab()).front();
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("sample_frames below, at, and above the cap") {
    ModelConfig cfg = small_config();
    cfg.max_frames = 30;
    cfg.frame_rate = 1.0;

    const auto below = sample_frames(10.0, cfg);
    REQUIRE(below.size() == 10);
    CHECK(below.front() == doctest::Approx(0.5));
    CHECK(below.back() == doctest::Approx(9.5));

    const auto at = sample_frames(30.0, cfg);
    CHECK(at.size() == 30);

    const auto above = sample_frames(45.0, cfg);
    REQUIRE(above.size() == 30);
    CHECK(above.front() == doctest::Approx(0.75));
    CHECK(above[1] - above[0] == doctest::Approx(1.5));
    CHECK(above.back() == doctest::Approx(44.25));

    CHECK_THROWS_AS(sample_frames(0.0, cfg), DomainError);
    CHECK_THROWS_AS(sample_frames(-2.0, cfg), DomainError);
}

TEST_CASE("frame-count law: min(rate * T, max_frames) for integer products") {
    ModelConfig cfg = small_config();
    cfg.max_frames = 12;
    cfg.frame_rate = 2.0;
    for (int t = 1; t <= 20; ++t) {
        const auto ts = sample_frames(static_cast<double>(t), cfg);
        CHECK(static_cast<int>(ts.size()) == std::min(2 * t, 12));
        for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] > ts[i - 1]);
    }
}

TEST_CASE("encode_visual: per-frame independence and determinism") {
    const ModelState state = ModelState::init(small_config(), 5);
    const SyntheticVideo video = test_video();
    FrameFeatures frames = visual_features(video, test_vocab(), state.config);

    const Tensor tokens = encode_visual(frames, state);
    CHECK(tokens.dim(0) == static_cast<int>(frames.features.size()));
    CHECK(tokens.dim(1) == state.config.model_dim);

    // single frame -> single block
    FrameFeatures one;
    one.timestamps = {0.5};
    one.features = {frames.features[0]};
    CHECK(encode_visual(one, state).dim(0) == 1);

    // permuting frames permutes token rows identically
    FrameFeatures swapped = frames;
    std::swap(swapped.features[0], swapped.features[1]);
    const Tensor perm = encode_visual(swapped, state);
    const int d = state.config.model_dim;
    for (int j = 0; j < d; ++j) {
        CHECK(perm.at(0, j) == tokens.at(1, j));
        CHECK(perm.at(1, j) == tokens.at(0, j));
    }

    // identical frames give identical blocks
    FrameFeatures twin;
    twin.timestamps = {0.5, 1.5};
    twin.features = {frames.features[0], frames.features[0]};
    const Tensor t2 = encode_visual(twin, state);
    for (int j = 0; j < d; ++j) CHECK(t2.at(0, j) == t2.at(1, j));

    FrameFeatures empty;
    CHECK_THROWS_AS(encode_visual(empty, state), DomainError);
    FrameFeatures bad = frames;
    bad.features[0].pop_back();
    CHECK_THROWS_AS(encode_visual(bad, state), ShapeError);
}

TEST_CASE("encode_audio: position embeddings distinguish identical segments") {
    ModelState state = ModelState::init(small_config(), 6);
    const auto& cfg = state.config;
    const int tps = cfg.audio_tokens_per_segment;
    const int adim = cfg.audio_feature_dim;

    AudioSegments two;
    two.tokens_per_segment = tps;
    two.total_duration = 2 * cfg.audio_segment_len;
    std::vector<double> seg(static_cast<size_t>(tps * adim), 0.0);
    seg[0] = 1.0;
    two.segments = {seg, seg};

    const Tensor tokens = encode_audio(two, state);
    CHECK(tokens.dim(0) == 2 * tps);
    bool differs = false;
    for (int j = 0; j < cfg.model_dim; ++j) {
        if (tokens.at(0, j) != tokens.at(tps, j)) differs = true;
    }
    CHECK(differs);  // distinct Z_pos -> distinct blocks

    // zeroed position table makes identical segments identical
    ModelState zeroed = state.clone();
    auto& pos = zeroed.params.at("audio.seg_pos").data();
    std::fill(pos.begin(), pos.end(), 0.0);
    const Tensor flat = encode_audio(two, zeroed);
    for (int j = 0; j < cfg.model_dim; ++j) CHECK(flat.at(0, j) == flat.at(tps, j));

    // single segment works without concatenation
    AudioSegments one = two;
    one.segments = {seg};
    one.total_duration = cfg.audio_segment_len;
    CHECK(encode_audio(one, state).dim(0) == tps);

    // exceeding the position table is a capacity error
    AudioSegments over = two;
    over.segments.assign(static_cast<size_t>(cfg.max_audio_segments + 1), seg);
    CHECK_THROWS_AS(encode_audio(over, state), CapacityError);
}

TEST_CASE("interleave boundaries follow the rounding rule") {
    Rng rng(9);
    const int d = 4;
    SUBCASE("n=1 takes all audio after the single visual row") {
        const Tensor hv = Tensor::randn({1, d}, rng);
        const Tensor ha = Tensor::randn({5, d}, rng);
        const Tensor h = interleave(hv, ha);
        REQUIRE(h.dim(0) == 6);
        for (int j = 0; j < d; ++j) CHECK(h.at(0, j) == hv.at(0, j));
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < d; ++j) CHECK(h.at(1 + i, j) == ha.at(i, j));
    }
    SUBCASE("n=2, La=4 splits audio 2/2") {
        const Tensor hv = Tensor::randn({2, d}, rng);
        const Tensor ha = Tensor::randn({4, d}, rng);
        const Tensor h = interleave(hv, ha);
        REQUIRE(h.dim(0) == 6);
        // layout: v0 a0 a1 v1 a2 a3
        for (int j = 0; j < d; ++j) {
            CHECK(h.at(0, j) == hv.at(0, j));
            CHECK(h.at(1, j) == ha.at(0, j));
            CHECK(h.at(2, j) == ha.at(1, j));
            CHECK(h.at(3, j) == hv.at(1, j));
            CHECK(h.at(4, j) == ha.at(2, j));
            CHECK(h.at(5, j) == ha.at(3, j));
        }
    }
    SUBCASE("n=3, La=10 uses boundaries 0,3,7,10") {
        const Tensor hv = Tensor::randn({3, d}, rng);
        const Tensor ha = Tensor::randn({10, d}, rng);
        const Tensor h = interleave(hv, ha);
        REQUIRE(h.dim(0) == 13);
        // blocks: v0 a[0:3] v1 a[3:7] v2 a[7:10]
        const std::vector<std::pair<int, int>> audio_slices = {{0, 3}, {3, 7}, {7, 10}};
        int row = 0;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < d; ++j) CHECK(h.at(row, j) == hv.at(i, j));
            ++row;
            for (int a = audio_slices[static_cast<size_t>(i)].first;
                 a < audio_slices[static_cast<size_t>(i)].second; ++a) {
                for (int j = 0; j < d; ++j) CHECK(h.at(row, j) == ha.at(a, j));
                ++row;
            }
        }
    }
    SUBCASE("partition property: audio slices reassemble the audio sequence") {
        for (const auto [n, la] : std::vector<std::pair<int, int>>{{3, 10}, {7, 5}, {30, 60}, {4, 4}}) {
            const Tensor hv = Tensor::randn({n, d}, rng);
            const Tensor ha = Tensor::randn({la, d}, rng);
            const Tensor h = interleave(hv, ha);
            REQUIRE(h.dim(0) == n + la);
            // remove visual rows in order; what remains must equal the audio
            std::vector<double> rest;
            int vi = 0, row = 0, prev_bound = 0;
            for (int i = 1; i <= n; ++i) {
                const int bound = static_cast<int>(std::llround(
                    static_cast<double>(i) * static_cast<double>(la) / n));
                for (int j = 0; j < d; ++j) CHECK(h.at(row, j) == hv.at(vi, j));
                ++row;
                ++vi;
                for (int a = prev_bound; a < bound; ++a, ++row)
                    for (int j = 0; j < d; ++j) rest.push_back(h.at(row, j));
                prev_bound = bound;
            }
            CHECK(rest == ha.data());
        }
    }
    SUBCASE("empty inputs rejected") {
        const Tensor hv = Tensor::randn({2, d}, rng);
        CHECK_THROWS_AS(interleave(hv, Tensor::zeros({0, d})), DomainError);
        CHECK_THROWS_AS(interleave(Tensor::zeros({0, d}), hv), DomainError);
    }
}

TEST_CASE("forward: empty targets, logprob consistency, context overflow") {
    const ModelState state = ModelState::init(small_config(), 21);
    const SyntheticVideo video = test_video(4);
    const Tensor media = encode_media(state, visual_features(video, test_vocab(), state.config),
                                      audio_features(video, test_vocab(), state.config));
    const auto prompt = test_tok().global_caption_prompt();

    CHECK(forward(state, media, prompt, {}).size() == 0);

    auto targets = test_tok().encode(video.caption);
    targets.push_back(test_tok().eos());
    const Tensor per_token = forward(state, media, prompt, targets);
    CHECK(per_token.size() == targets.size());
    double total = 0.0;
    for (const double lp : per_token.data()) {
        CHECK(lp <= 0.0);
        total += lp;
    }
    const Tensor seq = sequence_logprob(state, media, prompt, targets);
    CHECK(std::abs(seq.item() - total) < 1e-12);

    // single-token target equals that token's log-prob
    const Tensor single = forward(state, media, prompt, {targets[0]});
    const Tensor seq1 = sequence_logprob(state, media, prompt, {targets[0]});
    CHECK(seq1.item() == doctest::Approx(single.data()[0]).epsilon(1e-15));

    // appending a token can only decrease the sequence log-prob
    std::vector<int> two = {targets[0], targets[1]};
    CHECK(sequence_logprob(state, media, prompt, two).item() <= seq1.item() + 1e-12);

    std::vector<int> huge(400, targets[0]);
    CHECK_THROWS_AS(forward(state, media, prompt, huge), CapacityError);
}

TEST_CASE("lora: attach/detach/merge state machine and function preservation") {
    ModelState state = ModelState::init(small_config(), 33);
    const SyntheticVideo video = test_video(5);
    const auto prompt = test_tok().global_caption_prompt();
    auto targets = test_tok().encode(video.caption);
    targets.push_back(test_tok().eos());
    const auto logprobs = [&](const ModelState& s) {
        const Tensor media = encode_media(s, visual_features(video, test_vocab(), s.config),
                                          audio_features(video, test_vocab(), s.config));
        return forward(s, media, prompt, targets).data();
    };

    const auto base = logprobs(state);

    lora_attach(state, 77);
    CHECK(state.adapter.has_value());
    CHECK_THROWS_AS(lora_attach(state, 78), StateError);

    // fresh adapter has zero delta: function unchanged to machine precision
    CHECK(max_abs_diff(logprobs(state), base) < 1e-12);

    // fresh adapter stats: A gaussian with configured std, B zero
    for (const auto& [name, ab] : state.adapter->deltas) {
        double sq = 0.0;
        for (const double v : ab.first.data()) sq += v * v;
        const double std_est = std::sqrt(sq / static_cast<double>(ab.first.size()));
        CHECK(std_est > 0.2 * state.config.lora_init_std);
        CHECK(std_est < 5.0 * state.config.lora_init_std);
        for (const double v : ab.second.data()) CHECK(v == 0.0);
    }

    // detach restores the exact prior function
    lora_detach(state);
    CHECK(max_abs_diff(logprobs(state), base) == 0.0);
    CHECK_THROWS_AS(lora_detach(state), StateError);
    CHECK_THROWS_AS(lora_merge(state), StateError);

    // merging a zero-delta adapter leaves weights bit-identical
    lora_attach(state, 79);
    const auto w_before = state.param("layers.0.attn.wq").data();
    lora_merge(state);
    CHECK(state.param("layers.0.attn.wq").data() == w_before);
    CHECK_FALSE(state.adapter.has_value());
}

TEST_CASE("merge equivalence within 1e-9 over random inputs") {
    ModelState state = ModelState::init(small_config(), 44);
    lora_attach(state, 45);
    // give the adapter a real delta
    Rng rng(46);
    for (auto& [name, ab] : state.adapter->deltas) {
        for (auto& v : ab.second.data()) v = rng.gaussian(0.0, 0.05);
    }
    const auto prompt = test_tok().global_caption_prompt();

    ModelState merged = state.clone();
    lora_merge(merged);

    double worst = 0.0;
    for (int trial = 0; trial < 8; ++trial) {
        const SyntheticVideo video = test_video(100 + static_cast<uint64_t>(trial));
        const Tensor media_a = encode_media(state, visual_features(video, test_vocab(), state.config),
                                            audio_features(video, test_vocab(), state.config));
        const Tensor media_b = encode_media(merged, visual_features(video, test_vocab(), merged.config),
                                            audio_features(video, test_vocab(), merged.config));
        auto targets = test_tok().encode(video.caption);
        targets.push_back(test_tok().eos());
        const auto a = forward(state, media_a, prompt, targets).data();
        const auto b = forward(merged, media_b, prompt, targets).data();
        worst = std::max(worst, max_abs_diff(a, b));
    }
    CHECK(worst < 1e-9);

    // merge then fresh attach leaves the function unchanged again
    ModelState fresh = merged.clone();
    lora_attach(fresh, 47);
    const SyntheticVideo video = test_video(200);
    auto targets = test_tok().encode(video.caption);
    targets.push_back(test_tok().eos());
    const Tensor ma = encode_media(merged, visual_features(video, test_vocab(), merged.config),
                                   audio_features(video, test_vocab(), merged.config));
    const Tensor mf = encode_media(fresh, visual_features(video, test_vocab(), fresh.config),
                                   audio_features(video, test_vocab(), fresh.config));
    CHECK(max_abs_diff(forward(merged, ma, prompt, targets).data(),
                       forward(fresh, mf, prompt, targets).data()) < 1e-12);
}

TEST_CASE("generate: determinism and seed sensitivity") {
    const ModelState state = ModelState::init(small_config(), 55);
    const SyntheticVideo video = test_video(7);
    const Tensor media = encode_media(state, visual_features(video, test_vocab(), state.config),
                                      audio_features(video, test_vocab(), state.config));
    const auto prompt = test_tok().global_caption_prompt();

    GenerateOptions greedy;
    greedy.temperature = 0.0;
    greedy.eos_id = test_tok().eos();
    CHECK(generate(state, media, prompt, greedy) == generate(state, media, prompt, greedy));

    GenerateOptions seeded;
    seeded.temperature = 1.0;
    seeded.eos_id = test_tok().eos();
    seeded.seed = 123;
    const auto s1 = generate(state, media, prompt, seeded);
    const auto s2 = generate(state, media, prompt, seeded);
    CHECK(s1 == s2);

    bool any_different = false;
    for (uint64_t seed = 1; seed <= 10 && !any_different; ++seed) {
        GenerateOptions other = seeded;
        other.seed = seed * 1000;
        any_different = generate(state, media, prompt, other) != s1;
    }
    CHECK(any_different);

    GenerateOptions bad;
    bad.temperature = -1.0;
    CHECK_THROWS_AS(generate(state, media, prompt, bad), DomainError);

    // structural specials never appear in samples
    for (uint64_t seed = 0; seed < 5; ++seed) {
        GenerateOptions opts = seeded;
        opts.seed = seed;
        for (const int id : generate(state, media, prompt, opts)) {
            CHECK(id != test_tok().pad());
            CHECK(id != test_tok().bos());
            CHECK(id != test_tok().sep());
        }
    }
}

TEST_CASE("greedy first token agrees with the teacher-forced distribution") {
    // cross-checks the KV-cache inference path against the training path
    const ModelState state = ModelState::init(small_config(), 66);
    const SyntheticVideo video = test_video(8);
    const Tensor media = encode_media(state, visual_features(video, test_vocab(), state.config),
                                      audio_features(video, test_vocab(), state.config));
    const auto prompt = test_tok().global_caption_prompt();

    GenerateOptions greedy;
    greedy.temperature = 0.0;
    greedy.eos_id = -1;  // never stop early
    greedy.max_new_tokens = 1;
    const auto sampled = generate(state, media, prompt, greedy);
    REQUIRE(sampled.size() == 1);

    int best_id = -1;
    double best_lp = -1e300;
    for (int cand = 0; cand < state.config.vocab_size; ++cand) {
        if (cand == 0 || cand == 1 || cand == 3) continue;  // structural specials banned
        const double lp = forward(state, media, prompt, {cand}).data()[0];
        if (lp > best_lp) {
            best_lp = lp;
            best_id = cand;
        }
    }
    CHECK(best_id == sampled[0]);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    ModelState state = ModelState::init(small_config(), 88);
    lora_attach(state, 89);
    Rng rng(90);
    for (auto& [name, ab] : state.adapter->deltas)
        for (auto& v : ab.second.data()) v = rng.gaussian(0.0, 0.1);
    state.round_index = 3;

    const auto dir = std::filesystem::temp_directory_path();
    const auto path = (dir / "avcap_ckpt_test.json").string();
    save_checkpoint(state, path);
    const ModelState loaded = load_checkpoint(path);

    CHECK(loaded.round_index == 3);
    CHECK(loaded.seed == state.seed);
    CHECK(loaded.config.model_dim == state.config.model_dim);
    REQUIRE(loaded.params.size() == state.params.size());
    for (const auto& [name, t] : state.params) {
        CHECK(loaded.param(name).data() == t.data());
        CHECK(loaded.param(name).shape() == t.shape());
    }
    REQUIRE(loaded.adapter.has_value());
    CHECK(loaded.adapter->scale == state.adapter->scale);
    for (const auto& [name, ab] : state.adapter->deltas) {
        CHECK(loaded.adapter->deltas.at(name).first.data() == ab.first.data());
        CHECK(loaded.adapter->deltas.at(name).second.data() == ab.second.data());
    }

    // a second save of the loaded state is byte-identical
    const auto path2 = (dir / "avcap_ckpt_test2.json").string();
    save_checkpoint(loaded, path2);
    std::ifstream f1(path), f2(path2);
    const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.json"), DataError);
}

TEST_CASE("trainable-parameter selection by prefix") {
    ModelState state = ModelState::init(small_config(), 91);
    lora_attach(state, 92);
    state.set_trainable({"adapter.", "audio_aligner."});
    for (const auto& [name, t] : state.named_params()) {
        const bool expected = name.rfind("adapter.", 0) == 0 || name.rfind("audio_aligner.", 0) == 0;
        CHECK(t.requires_grad() == expected);
    }
    const uint64_t h1 = state.params_hash({"layers."});
    state.params.at("layers.0.attn.wq").data()[0] += 1.0;
    CHECK(state.params_hash({"layers."}) != h1);
}
