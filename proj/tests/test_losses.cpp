#include "doctest.h"

#include <cmath>

#include "avcap/losses.hpp"

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
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.enc_dim = 16;
    cfg.lora_rank = 2;
    return cfg;
}

std::vector<int> with_eos(std::vector<int> ids) {
    ids.push_back(test_tok().eos());
    return ids;
}

PreferenceItem make_item(const SyntheticVideo& video, const ModelConfig& cfg,
                         const std::string& chosen, const std::string& rejected) {
    PreferenceItem item;
    item.frames = visual_features(video, test_vocab(), cfg);
    item.audio = audio_features(video, test_vocab(), cfg);
    item.prompt = test_tok().global_caption_prompt();
    item.chosen = with_eos(test_tok().encode(chosen));
    item.rejected = with_eos(test_tok().encode(rejected));
    return item;
}

std::vector<SyntheticVideo> test_videos(int n, uint64_t seed) {
    CorpusParams p;
    p.n_videos = n;
    p.seed = seed;
    return gen_corpus(p, test_vocab());
}

}  // namespace

TEST_CASE("dpo_pair_loss: ln 2 identity and exact gradient signs at zero margin") {
    Tensor lp_w = Tensor::scalar(-5.0, true);
    Tensor lp_l = Tensor::scalar(-7.0, true);
    const Tensor lr_w = Tensor::scalar(-5.0);
    const Tensor lr_l = Tensor::scalar(-7.0);
    const double beta = 0.1;
    const Tensor loss = dpo_pair_loss(lp_w, lp_l, lr_w, lr_l, beta);
    CHECK(std::abs(loss.item() - std::log(2.0)) < 1e-12);

    backward(loss);
    // d/d lp_w = -beta * sigmoid(0) = -beta/2, and +beta/2 for the rejected side
    CHECK(lp_w.grad()[0] == doctest::Approx(-beta / 2.0).epsilon(1e-12));
    CHECK(lp_l.grad()[0] == doctest::Approx(beta / 2.0).epsilon(1e-12));
    CHECK(lp_w.grad()[0] < 0.0);
    CHECK(lp_l.grad()[0] > 0.0);

    CHECK_THROWS_AS(dpo_pair_loss(lp_w, lp_l, lr_w, lr_l, 0.0), DomainError);
    CHECK_THROWS_AS(dpo_pair_loss(lp_w, lp_l, lr_w, lr_l, -0.1), DomainError);
}

TEST_CASE("raising the chosen log-prob strictly lowers the pairwise loss") {
    const Tensor lr_w = Tensor::scalar(-4.0);
    const Tensor lr_l = Tensor::scalar(-6.0);
    const Tensor lp_l = Tensor::scalar(-6.0);
    double prev = 1e300;
    for (double lw = -6.0; lw <= -2.0; lw += 0.5) {
        const double v =
            dpo_pair_loss(Tensor::scalar(lw), lp_l, lr_w, lr_l, 0.2).item();
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("dpo_loss at policy == reference is ln 2 per pair") {
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 7);
    ModelState reference = policy.clone();
    reference.freeze_all();

    const auto videos = test_videos(2, 19);
    PreferenceBatch batch;
    batch.beta = 0.1;
    batch.items.push_back(make_item(videos[0], cfg, "a bell rings.", "a drum beats."));
    batch.items.push_back(
        make_item(videos[1], cfg, "a red square appears.", "a bell rings. a drum beats."));

    const Tensor loss = dpo_loss(policy, reference, batch);
    CHECK(std::abs(loss.item() - std::log(2.0)) < 1e-9);
}

TEST_CASE("two-pair batch equals the mean of single-pair losses") {
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 11);
    lora_attach(policy, 12);
    Rng rng(13);
    for (auto& [name, ab] : policy.adapter->deltas)
        for (auto& v : ab.second.data()) v = rng.gaussian(0.0, 0.05);
    ModelState reference = ModelState::init(cfg, 7);
    reference.freeze_all();

    const auto videos = test_videos(2, 23);
    PreferenceBatch both;
    both.beta = 0.15;
    both.items.push_back(make_item(videos[0], cfg, "a bell rings.", "a drum beats."));
    both.items.push_back(make_item(videos[1], cfg, "a gong hums.", "a violin plays."));

    PreferenceBatch first{{both.items[0]}, both.beta};
    PreferenceBatch second{{both.items[1]}, both.beta};
    const double mean_of_singles =
        0.5 * (dpo_loss(policy, reference, first).item() +
               dpo_loss(policy, reference, second).item());
    CHECK(std::abs(dpo_loss(policy, reference, both).item() - mean_of_singles) < 1e-12);
}

TEST_CASE("dpo_loss validation and structural freezing") {
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 31);
    ModelState reference = policy.clone();
    reference.freeze_all();
    const auto videos = test_videos(1, 37);

    PreferenceBatch batch;
    batch.items.push_back(make_item(videos[0], cfg, "a bell rings.", "a bell rings."));
    CHECK_THROWS_AS(dpo_loss(policy, reference, batch), DomainError);  // identical pair

    batch.items[0] = make_item(videos[0], cfg, "a bell rings.", "a drum beats.");
    batch.beta = 0.0;
    CHECK_THROWS_AS(dpo_loss(policy, reference, batch), DomainError);

    batch.beta = 0.1;
    ModelState thawed = policy.clone();  // trainable reference must be rejected
    thawed.set_trainable({"layers."});
    CHECK_THROWS_AS(dpo_loss(policy, thawed, batch), ContractError);

    // no gradient reaches reference parameters
    policy.set_trainable({"layers.", "tok_emb"});
    const Tensor loss = dpo_loss(policy, reference, batch);
    backward(loss);
    for (const auto& [name, t] : reference.named_params()) {
        if (t.has_grad()) {
            for (const double g : t.grad()) CHECK(g == 0.0);
        }
    }
    bool policy_got_grads = false;
    for (const auto& [name, t] : policy.named_params()) {
        if (t.has_grad()) {
            for (const double g : t.grad()) policy_got_grads = policy_got_grads || g != 0.0;
        }
    }
    CHECK(policy_got_grads);
}

TEST_CASE("gdpo: lambda 0 reproduces dpo exactly; decomposition is exact") {
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 41);
    ModelState reference = policy.clone();
    reference.freeze_all();
    const auto videos = test_videos(3, 43);

    GuidedBatch gb;
    gb.pref.beta = 0.1;
    gb.pref.items.push_back(make_item(videos[0], cfg, "a bell rings.", "a drum beats."));
    gb.pref.items.push_back(make_item(videos[1], cfg, "a gong hums.", "a violin plays."));
    for (const auto& v : videos) {
        SequenceInput gt;
        gt.frames = visual_features(v, test_vocab(), cfg);
        gt.audio = audio_features(v, test_vocab(), cfg);
        gt.prompt = test_tok().global_caption_prompt();
        gt.targets = with_eos(test_tok().encode(v.caption));
        gb.ground_truth.push_back(std::move(gt));
    }

    gb.lambda = 0.0;
    CHECK(gdpo_loss(policy, reference, gb).item() ==
          dpo_loss(policy, reference, gb.pref).item());

    gb.lambda = 0.1;
    const double dpo_part = dpo_loss(policy, reference, gb.pref).item();
    const double nll_part = ground_truth_nll(policy, gb.ground_truth).item();
    CHECK(std::abs(gdpo_loss(policy, reference, gb).item() - (dpo_part + 0.1 * nll_part)) < 1e-12);

    // at policy == reference: loss = ln 2 + lambda * (-seq logprob of gt)
    GuidedBatch one;
    one.pref.beta = 0.1;
    one.pref.items.push_back(make_item(videos[2], cfg, "a bell rings.", "a drum beats."));
    one.ground_truth.push_back(gb.ground_truth[2]);
    one.lambda = 0.1;
    const Tensor media = encode_media(policy, one.ground_truth[0].frames, one.ground_truth[0].audio);
    const double q = sequence_logprob(policy, media, one.ground_truth[0].prompt,
                                      one.ground_truth[0].targets)
                         .item();
    CHECK(std::abs(gdpo_loss(policy, reference, one).item() - (std::log(2.0) + 0.1 * (-q))) < 1e-9);

    gb.lambda = -0.5;
    CHECK_THROWS_AS(gdpo_loss(policy, reference, gb), DomainError);
}

TEST_CASE("gdpo is monotone in the ground-truth NLL term") {
    // same dpo term, worse gt likelihood -> larger loss
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 47);
    ModelState reference = policy.clone();
    reference.freeze_all();
    const auto videos = test_videos(1, 53);

    GuidedBatch good;
    good.pref.beta = 0.1;
    good.pref.items.push_back(make_item(videos[0], cfg, "a bell rings.", "a drum beats."));
    good.lambda = 0.5;
    SequenceInput gt;
    gt.frames = visual_features(videos[0], test_vocab(), cfg);
    gt.audio = audio_features(videos[0], test_vocab(), cfg);
    gt.prompt = test_tok().global_caption_prompt();
    gt.targets = with_eos(test_tok().encode("a bell rings."));
    good.ground_truth.push_back(gt);

    GuidedBatch worse = good;
    worse.ground_truth[0].targets =
        with_eos(test_tok().encode("a bell rings. a drum beats. a gong hums."));
    // longer sequences always have larger summed NLL
    CHECK(gdpo_loss(policy, reference, worse).item() >
          gdpo_loss(policy, reference, good).item());
}

TEST_CASE("cdpo: lambda 0 is dpo; chosen-as-ground-truth collapses to gdpo") {
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 59);
    ModelState reference = policy.clone();
    reference.freeze_all();
    const auto videos = test_videos(2, 61);

    PreferenceBatch batch;
    batch.beta = 0.1;
    batch.items.push_back(make_item(videos[0], cfg, "a bell rings.", "a drum beats."));
    batch.items.push_back(make_item(videos[1], cfg, "a gong hums.", "a violin plays."));

    CHECK(cdpo_loss(policy, reference, batch, 0.0).item() ==
          dpo_loss(policy, reference, batch).item());

    // gdpo whose gt items are exactly the chosen samples equals cdpo
    GuidedBatch gb;
    gb.pref = batch;
    gb.lambda = 0.2;
    for (const auto& item : batch.items) {
        SequenceInput s;
        s.frames = item.frames;
        s.audio = item.audio;
        s.prompt = item.prompt;
        s.targets = item.chosen;
        gb.ground_truth.push_back(std::move(s));
    }
    CHECK(std::abs(cdpo_loss(policy, reference, batch, 0.2).item() -
                   gdpo_loss(policy, reference, gb).item()) < 1e-12);
}

TEST_CASE("sft loss: uniform logits give ln V; near-one-hot predictions near zero") {
    const ModelConfig cfg = small_config();
    ModelState policy = ModelState::init(cfg, 67);
    const auto videos = test_videos(1, 71);

    SequenceInput item;
    item.frames = visual_features(videos[0], test_vocab(), cfg);
    item.audio = audio_features(videos[0], test_vocab(), cfg);
    item.prompt = test_tok().global_caption_prompt();
    item.targets = with_eos(test_tok().encode(videos[0].caption));

    // zero unembedding -> logits identically zero -> uniform distribution
    ModelState uniform = policy.clone();
    std::fill(uniform.params.at("unemb").data().begin(), uniform.params.at("unemb").data().end(),
              0.0);
    CHECK(std::abs(sft_loss(uniform, item).item() - std::log(cfg.vocab_size)) < 1e-9);

    // constant hidden state pointing hard at one token drives its NLL to ~0
    const int target_tok = test_tok().period();
    ModelState sharp = policy.clone();
    std::fill(sharp.params.at("final_ln.g").data().begin(),
              sharp.params.at("final_ln.g").data().end(), 0.0);
    auto& fb = sharp.params.at("final_ln.b").data();
    std::fill(fb.begin(), fb.end(), 0.0);
    fb[0] = 1.0;
    auto& unemb = sharp.params.at("unemb").data();
    std::fill(unemb.begin(), unemb.end(), 0.0);
    unemb[static_cast<size_t>(target_tok)] = 50.0;  // row 0, column target_tok
    SequenceInput periods = item;
    periods.targets = {target_tok, target_tok, target_tok};
    CHECK(sft_loss(sharp, periods).item() < 1e-6);

    // definition consistency: mean NLL equals -seq_logprob / length
    const Tensor media = encode_media(policy, item.frames, item.audio);
    const double lp = sequence_logprob(policy, media, item.prompt, item.targets).item();
    CHECK(std::abs(sft_loss(policy, item).item() -
                   (-lp / static_cast<double>(item.targets.size()))) < 1e-12);

    SequenceInput empty = item;
    empty.targets.clear();
    CHECK_THROWS_AS(sft_loss(policy, empty), DomainError);
}
