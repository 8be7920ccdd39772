#include "avcap/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "avcap/parallel.hpp"

#include "json.hpp"

namespace avcap {

namespace fs = std::filesystem;

std::string loss_name(LossKind k) {
    switch (k) {
        case LossKind::dpo: return "dpo";
        case LossKind::gdpo: return "gdpo";
        case LossKind::cdpo: return "cdpo";
        case LossKind::sft: return "sft";
    }
    return "gdpo";
}

LossKind loss_from_name(const std::string& name) {
    if (name == "dpo") return LossKind::dpo;
    if (name == "gdpo") return LossKind::gdpo;
    if (name == "cdpo") return LossKind::cdpo;
    if (name == "sft") return LossKind::sft;
    throw ConfigError("unknown loss kind: " + name);
}

std::string proxy_name(ProxyMode m) {
    return m == ProxyMode::lora_proxy ? "lora-proxy" : "direct";
}

ProxyMode proxy_from_name(const std::string& name) {
    if (name == "lora-proxy") return ProxyMode::lora_proxy;
    if (name == "direct") return ProxyMode::direct;
    throw ConfigError("unknown proxy mode: " + name);
}

namespace {

const std::vector<std::string> kBackbonePrefixes = {
    "tok_emb", "pos_emb", "unemb", "final_ln", "layers.", "visual_aligner.", "encoder."};
const std::vector<std::string> kAudioBranchPrefixes = {"audio_aligner.", "audio.seg_pos"};

std::vector<std::string> concat_prefixes(const std::vector<std::string>& a,
                                         const std::vector<std::string>& b) {
    std::vector<std::string> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

std::vector<TimedEvent> to_timed(const std::vector<AtomicEvent>& events) {
    std::vector<TimedEvent> out;
    out.reserve(events.size());
    for (const auto& e : events) out.push_back({e.id, e.phrase, e.start.value_or(0.0)});
    return out;
}

int qa_answer(const SyntheticVideo& video, QaKind kind) {
    switch (kind) {
        case QaKind::events:
            return static_cast<int>(video.visual_events.size() + video.audio_events.size());
        case QaKind::shapes:
            return static_cast<int>(video.visual_events.size());
        case QaKind::sounds:
            return static_cast<int>(video.audio_events.size());
    }
    return 0;
}

constexpr QaKind kQaKinds[] = {QaKind::events, QaKind::shapes, QaKind::sounds};

}  // namespace

Trainer::Trainer(EventVocab vocab, TrainConfig cfg)
    : vocab_(std::move(vocab)), tok_(vocab_), cfg_(cfg), judge_(vocab_) {}

ModelState Trainer::init_model() const {
    return init_model(ModelConfig::desk_default(vocab_, tok_));
}

ModelState Trainer::init_model(const ModelConfig& mcfg) const {
    return ModelState::init(mcfg, cfg_.seed);
}

// ---- dataset builders ---------------------------------------------------------

std::vector<int> encode_targets(const Tokenizer& tok, const std::string& text) {
    std::vector<int> ids = tok.encode(text);
    ids.push_back(tok.eos());
    return ids;
}

namespace {

SequenceInput make_qa_item(const SyntheticVideo& video, QaKind kind, const EventVocab& vocab,
                           const Tokenizer& tok, const ModelConfig& mcfg, bool audio_visual) {
    SequenceInput item;
    item.frames = visual_features(video, vocab, mcfg);
    if (audio_visual) item.audio = audio_features(video, vocab, mcfg);
    item.prompt = tok.qa_prompt(kind);
    item.targets = {tok.number_token(qa_answer(video, kind)), tok.eos()};
    return item;
}

}  // namespace

SequenceInput Trainer::qa_item(const SyntheticVideo& video, QaKind kind) const {
    return make_qa_item(video, kind, vocab_, tok_, ModelConfig::desk_default(vocab_, tok_), true);
}

std::vector<SequenceInput> Trainer::sft_items(const std::vector<SyntheticVideo>& corpus) const {
    if (corpus.empty()) throw DomainError("sft_items: empty corpus");
    // model config here only supplies feature/frame geometry
    const ModelConfig mcfg = ModelConfig::desk_default(vocab_, tok_);
    std::vector<SequenceInput> items;
    items.reserve(corpus.size() * 3);
    for (size_t vi = 0; vi < corpus.size(); ++vi) {
        const auto& video = corpus[vi];
        const FrameFeatures frames = visual_features(video, vocab_, mcfg);
        const AudioSegments audio = audio_features(video, vocab_, mcfg);

        SequenceInput global;
        global.frames = frames;
        global.audio = audio;
        global.prompt = tok_.global_caption_prompt();
        global.targets = encode_targets(tok_, video.caption);
        items.push_back(std::move(global));

        Rng rng(derive_seed(cfg_.seed, "sft-local-interval", vi));
        const Interval iv = sample_local_interval(video, rng);
        const auto local_events = filter_local_events(video.atomic_events, iv.t0, iv.t1);
        SequenceInput local;
        local.frames = frames;
        local.audio = audio;
        local.prompt = tok_.local_caption_prompt(static_cast<int>(iv.t0), static_cast<int>(iv.t1));
        local.targets = encode_targets(tok_, render_caption(to_timed(local_events)));
        items.push_back(std::move(local));

        items.push_back(make_qa_item(video, kQaKinds[vi % 3], vocab_, tok_, mcfg, true));
    }
    return items;
}

std::vector<SequenceInput> Trainer::alignment_items(
    const std::vector<SyntheticVideo>& corpus) const {
    if (corpus.empty()) throw DomainError("alignment_items: empty corpus");
    const ModelConfig mcfg = ModelConfig::desk_default(vocab_, tok_);
    std::vector<SequenceInput> items;
    items.reserve(corpus.size());
    for (const auto& video : corpus) {
        SequenceInput item;
        item.audio = audio_features(video, vocab_, mcfg);
        item.prompt = tok_.audio_caption_prompt();
        item.targets = encode_targets(tok_, render_caption(video.audio_events));
        items.push_back(std::move(item));
    }
    return items;
}

namespace {

std::vector<SequenceInput> pretrain_items(const std::vector<SyntheticVideo>& corpus,
                                          const EventVocab& vocab, const Tokenizer& tok,
                                          const ModelConfig& mcfg) {
    std::vector<SequenceInput> items;
    items.reserve(corpus.size() * 3);
    for (size_t vi = 0; vi < corpus.size(); ++vi) {
        const auto& video = corpus[vi];
        const FrameFeatures frames = visual_features(video, vocab, mcfg);

        // visual captioning: describe what the frames show
        SequenceInput vis;
        vis.frames = frames;
        vis.prompt = tok.global_caption_prompt();
        vis.targets = encode_targets(tok, render_caption(video.visual_events));
        items.push_back(std::move(vis));

        // caption language modeling over the full event language
        SequenceInput lm;
        lm.targets = encode_targets(tok, video.caption);
        items.push_back(std::move(lm));

        // visual count questions
        SequenceInput qa;
        qa.frames = frames;
        qa.prompt = tok.qa_prompt(QaKind::shapes);
        qa.targets = {tok.number_token(static_cast<int>(video.visual_events.size())), tok.eos()};
        items.push_back(std::move(qa));
    }
    return items;
}

}  // namespace

// ---- supervised stages --------------------------------------------------------

StageResult Trainer::train_supervised(ModelState& model, std::vector<SequenceInput> items,
                                      int total_steps, double lr, int batch_size, uint64_t seed,
                                      bool random_pos_offset) const {
    if (items.empty()) throw DomainError("train_supervised: no items");
    if (total_steps <= 0) throw ConfigError("train_supervised: steps must be positive");
    Adam opt(model.trainable_params(), {lr});
    if (opt.params().empty()) throw ContractError("train_supervised: no trainable parameters");
    StageResult result;
    result.loss_curve.reserve(static_cast<size_t>(total_steps));

    std::vector<size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "supervised"));
    rng.shuffle(order);
    size_t cursor = 0;

    opt.zero_grad();
    for (int step = 0; step < total_steps; ++step) {
        std::vector<SequenceInput> batch;
        batch.reserve(static_cast<size_t>(batch_size));
        for (int b = 0; b < batch_size; ++b) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            SequenceInput item = items[order[cursor++]];
            if (random_pos_offset) {
                // spread training over the whole position table
                const int used = 2 + static_cast<int>(item.prompt.size()) +
                                 static_cast<int>(item.targets.size()) +
                                 (item.frames ? static_cast<int>(item.frames->features.size()) : 0) +
                                 (item.audio ? static_cast<int>(item.audio->segments.size()) *
                                                   item.audio->tokens_per_segment
                                             : 0);
                const int slack = model.config.max_seq_len - used;
                if (slack > 0) item.pos_offset = static_cast<int>(rng.uniform_int(0, slack));
            }
            batch.push_back(std::move(item));
        }
        const Tensor loss = sft_loss(model, batch);
        backward(loss);
        opt.step();
        opt.zero_grad();
        result.loss_curve.push_back(loss.item());
    }
    result.first_loss = result.loss_curve.front();
    result.last_loss = result.loss_curve.back();
    return result;
}

StageResult Trainer::pretrain(ModelState& model, const std::vector<SyntheticVideo>& corpus) const {
    if (corpus.empty()) throw DomainError("pretrain: empty corpus");
    model.set_trainable(kBackbonePrefixes);
    const uint64_t audio_hash = model.params_hash(kAudioBranchPrefixes);
    auto items = pretrain_items(corpus, vocab_, tok_, model.config);
    StageResult r = train_supervised(model, std::move(items), cfg_.pretrain_steps,
                                     cfg_.pretrain_lr, cfg_.pretrain_batch,
                                     derive_seed(cfg_.seed, "pretrain"), true);
    if (model.params_hash(kAudioBranchPrefixes) != audio_hash) {
        throw InvariantError("pretrain: audio branch parameters changed");
    }
    return r;
}

StageResult Trainer::alignment(ModelState& model,
                               const std::vector<SyntheticVideo>& corpus) const {
    if (corpus.empty()) throw DomainError("alignment: empty corpus");
    model.set_trainable(kAudioBranchPrefixes);
    const uint64_t frozen = model.params_hash(kBackbonePrefixes);
    StageResult r = train_supervised(model, alignment_items(corpus), cfg_.align_steps,
                                     cfg_.align_lr, cfg_.align_batch,
                                     derive_seed(cfg_.seed, "align"), false);
    if (model.params_hash(kBackbonePrefixes) != frozen) {
        throw InvariantError("alignment: frozen backbone or visual branch changed");
    }
    return r;
}

StageResult Trainer::sft(ModelState& model, const std::vector<SyntheticVideo>& corpus) const {
    if (corpus.empty()) throw DomainError("sft: empty corpus");
    lora_attach(model, derive_seed(cfg_.seed, "sft-adapter"));
    model.set_trainable(concat_prefixes({"adapter."}, kAudioBranchPrefixes));
    const uint64_t frozen = model.params_hash(kBackbonePrefixes);
    auto items = sft_items(corpus);
    const int steps = cfg_.sft_epochs *
                      static_cast<int>((items.size() + cfg_.sft_batch - 1) / cfg_.sft_batch);
    StageResult r = train_supervised(model, std::move(items), steps, cfg_.sft_lr, cfg_.sft_batch,
                                     derive_seed(cfg_.seed, "sft"), false);
    if (model.params_hash(kBackbonePrefixes) != frozen) {
        throw InvariantError("sft: frozen backbone or visual branch changed");
    }
    return r;
}

// ---- preference rounds --------------------------------------------------------

std::vector<PreferenceItem> Trainer::to_preference_items(
    const std::vector<PreferencePair>& pairs, const std::vector<SyntheticVideo>& corpus) const {
    std::unordered_map<std::string, const SyntheticVideo*> by_id;
    for (const auto& v : corpus) by_id[v.id] = &v;
    std::vector<PreferenceItem> items;
    items.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (p.chosen.empty() || p.rejected.empty()) continue;
        const auto it = by_id.find(p.video_id);
        if (it == by_id.end()) throw DataError("pair references unknown video " + p.video_id);
        const auto& video = *it->second;
        PreferenceItem item;
        item.frames = visual_features(video, vocab_, ModelConfig::desk_default(vocab_, tok_));
        item.audio = audio_features(video, vocab_, ModelConfig::desk_default(vocab_, tok_));
        item.prompt = p.task == TaskKind::local_caption
                          ? tok_.local_caption_prompt(static_cast<int>(p.interval->t0),
                                                      static_cast<int>(p.interval->t1))
                          : tok_.global_caption_prompt();
        item.chosen = encode_targets(tok_, p.chosen);
        item.rejected = encode_targets(tok_, p.rejected);
        if (item.chosen == item.rejected) continue;
        items.push_back(std::move(item));
    }
    return items;
}

RoundLog Trainer::mrdpo_round(ModelState& model, std::optional<ModelState>& direct_reference,
                              const std::vector<SyntheticVideo>& train_corpus,
                              const std::vector<SyntheticVideo>& eval_corpus, int round_index,
                              const RoundThresholds& thresholds) const {
    RoundLog log;
    log.round_index = round_index;
    log.loss_kind = cfg_.round_loss;
    log.proxy = cfg_.proxy;

    ModelState proxy_reference;
    const ModelState* reference = nullptr;
    bool fresh_reference = false;
    if (cfg_.proxy == ProxyMode::lora_proxy) {
        if (model.adapter.has_value()) lora_merge(model);
        proxy_reference = model.clone();
        proxy_reference.freeze_all();
        reference = &proxy_reference;
        lora_attach(model, derive_seed(cfg_.seed, "round-adapter", static_cast<uint64_t>(round_index)));
        fresh_reference = true;
    } else {
        if (!direct_reference.has_value()) {
            direct_reference = model.clone();
            direct_reference->freeze_all();
            fresh_reference = true;
        }
        if (!model.adapter.has_value()) {
            lora_attach(model, derive_seed(cfg_.seed, "round-adapter", static_cast<uint64_t>(round_index)));
        }
        reference = &*direct_reference;
    }
    model.set_trainable({"adapter."});
    const auto frozen_prefixes = concat_prefixes(kBackbonePrefixes, kAudioBranchPrefixes);
    const uint64_t frozen = model.params_hash(frozen_prefixes);

    PairgenConfig pg;
    pg.round_index = round_index;
    pg.seed = derive_seed(cfg_.seed, "round-pairs", static_cast<uint64_t>(round_index));
    pg.temperature = cfg_.pair_temperature;
    pg.threads = cfg_.threads;
    RoundDataset ds = build_round_dataset(model, tok_, vocab_, train_corpus, thresholds, pg, judge_);
    log.sampled_pairs = ds.sampled;
    log.degenerate_pairs = ds.degenerate;
    log.selected_global = ds.selected_global;
    log.selected_local = ds.selected_local;
    log.pairs = ds.pairs;

    std::vector<PreferenceItem> items = to_preference_items(ds.pairs, train_corpus);
    if (items.empty()) {
        std::fprintf(stderr, "[round %d] empty pair dataset, round skipped\n", round_index);
        log.skipped = true;
        model.round_index = round_index;
        log.eval = eval_override ? eval_override(model) : evaluate(model, eval_corpus);
        return log;
    }

    std::vector<SequenceInput> gt_items;
    if (cfg_.round_loss == LossKind::gdpo) gt_items = sft_items(train_corpus);

    Adam opt(model.trainable_params(), {cfg_.round_lr});
    opt.zero_grad();
    Rng order_rng(derive_seed(cfg_.seed, "round-order", static_cast<uint64_t>(round_index)));
    std::vector<size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    size_t cursor = 0;
    Rng gt_rng(derive_seed(cfg_.seed, "round-gt", static_cast<uint64_t>(round_index)));

    for (int step = 0; step < cfg_.round_steps; ++step) {
        PreferenceBatch batch;
        batch.beta = cfg_.beta;
        for (int b = 0; b < cfg_.round_batch; ++b) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            batch.items.push_back(items[order[cursor++]]);
        }
        if (step == 0) {
            const Tensor probe = dpo_loss(model, *reference, batch);
            log.first_batch_dpo = probe.item();
            if (fresh_reference && std::abs(log.first_batch_dpo - std::log(2.0)) > 1e-6) {
                throw InvariantError("round " + std::to_string(round_index) +
                                     ": policy and refreshed reference disagree; first-batch "
                                     "pairwise loss was " + std::to_string(log.first_batch_dpo));
            }
        }
        Tensor loss;
        switch (cfg_.round_loss) {
            case LossKind::dpo:
                loss = dpo_loss(model, *reference, batch);
                break;
            case LossKind::gdpo: {
                GuidedBatch gb;
                gb.pref = std::move(batch);
                gb.lambda = cfg_.lambda;
                for (int b = 0; b < cfg_.round_batch; ++b) {
                    gb.ground_truth.push_back(gt_items[static_cast<size_t>(
                        gt_rng.uniform_int(0, static_cast<int64_t>(gt_items.size()) - 1))]);
                }
                loss = gdpo_loss(model, *reference, gb);
                break;
            }
            case LossKind::cdpo:
                loss = cdpo_loss(model, *reference, batch, cfg_.lambda);
                break;
            case LossKind::sft:
                throw ConfigError("mrdpo_round: sft is not a preference loss");
        }
        backward(loss);
        opt.step();
        opt.zero_grad();
        log.loss_curve.push_back(loss.item());
    }

    if (model.params_hash(frozen_prefixes) != frozen) {
        throw InvariantError("round " + std::to_string(round_index) +
                             ": parameters outside the adapter changed");
    }
    model.round_index = round_index;
    log.eval = eval_override ? eval_override(model) : evaluate(model, eval_corpus);
    return log;
}

std::vector<RoundLog> Trainer::mrdpo(ModelState& model,
                                     const std::vector<SyntheticVideo>& train_corpus,
                                     const std::vector<SyntheticVideo>& eval_corpus,
                                     const std::vector<RoundThresholds>& schedule) const {
    if (schedule.empty()) throw ConfigError("mrdpo: empty threshold schedule");
    if (cfg_.rounds > static_cast<int>(schedule.size())) {
        throw ConfigError("mrdpo: " + std::to_string(cfg_.rounds) + " rounds but only " +
                          std::to_string(schedule.size()) + " threshold rows");
    }
    std::vector<RoundLog> logs;
    std::optional<ModelState> direct_reference;
    for (int r = 1; r <= cfg_.rounds; ++r) {
        logs.push_back(mrdpo_round(model, direct_reference, train_corpus, eval_corpus, r,
                                   schedule[static_cast<size_t>(r - 1)]));
        const auto& log = logs.back();
        if (!log.skipped && log.eval.unnatural_global > cfg_.halt_unnatural_rate) {
            std::fprintf(stderr,
                         "[round %d] halting: unnatural rate %.3f exceeds %.3f\n", r,
                         log.eval.unnatural_global, cfg_.halt_unnatural_rate);
            break;
        }
    }
    return logs;
}

// ---- rebirth ------------------------------------------------------------------

ModelState Trainer::rebirth(const ModelState& post_alignment, const ModelState& labeler,
                            const std::vector<SyntheticVideo>& unlabeled,
                            RebirthStats* stats) const {
    if (unlabeled.empty()) throw DomainError("rebirth: empty corpus");
    const auto patterns = default_unnatural_patterns();
    const int n = static_cast<int>(unlabeled.size());

    struct Label {
        std::string global_caption;
        Interval interval;
        std::string local_caption;
    };
    std::vector<Label> labels(static_cast<size_t>(n));
    parallel_for(n, cfg_.threads, [&](int vi) {
        const auto& video = unlabeled[static_cast<size_t>(vi)];
        const Tensor media =
            encode_media(labeler, visual_features(video, vocab_, labeler.config),
                         audio_features(video, vocab_, labeler.config));
        GenerateOptions opts;
        opts.temperature = 0.0;
        opts.eos_id = tok_.eos();
        labels[static_cast<size_t>(vi)].global_caption =
            tok_.decode(generate(labeler, media, tok_.global_caption_prompt(), opts));
        Rng rng(derive_seed(cfg_.seed, "rebirth-interval", static_cast<uint64_t>(vi)));
        const Interval iv = sample_local_interval(video, rng);
        labels[static_cast<size_t>(vi)].interval = iv;
        labels[static_cast<size_t>(vi)].local_caption = tok_.decode(
            generate(labeler, media,
                     tok_.local_caption_prompt(static_cast<int>(iv.t0), static_cast<int>(iv.t1)),
                     opts));
    });

    const ModelConfig& mcfg = post_alignment.config;
    std::vector<SequenceInput> items;
    RebirthStats st;
    st.labeled = 2 * n;
    for (int vi = 0; vi < n; ++vi) {
        const auto& video = unlabeled[static_cast<size_t>(vi)];
        const auto& label = labels[static_cast<size_t>(vi)];
        const FrameFeatures frames = visual_features(video, vocab_, mcfg);
        const AudioSegments audio = audio_features(video, vocab_, mcfg);
        if (!label.global_caption.empty() &&
            !is_unnatural(label.global_caption, patterns, cfg_.rebirth_repetition_threshold)) {
            SequenceInput item;
            item.frames = frames;
            item.audio = audio;
            item.prompt = tok_.global_caption_prompt();
            item.targets = encode_targets(tok_, label.global_caption);
            items.push_back(std::move(item));
            ++st.kept_global;
        }
        if (!label.local_caption.empty() &&
            !is_unnatural(label.local_caption, patterns, cfg_.rebirth_repetition_threshold)) {
            SequenceInput item;
            item.frames = frames;
            item.audio = audio;
            item.prompt = tok_.local_caption_prompt(static_cast<int>(label.interval.t0),
                                                    static_cast<int>(label.interval.t1));
            item.targets = encode_targets(tok_, label.local_caption);
            items.push_back(std::move(item));
            ++st.kept_local;
        }
        items.push_back(make_qa_item(video, kQaKinds[vi % 3], vocab_, tok_, mcfg, true));
    }
    st.kept_fraction = static_cast<double>(st.kept_global + st.kept_local) /
                       static_cast<double>(st.labeled);
    if (st.kept_global == 0) {
        throw DataError("rebirth: every self-generated caption was filtered as unnatural");
    }
    if (stats != nullptr) *stats = st;

    ModelState model = post_alignment.clone();
    if (model.adapter.has_value()) lora_detach(model);
    lora_attach(model, derive_seed(cfg_.seed, "rebirth-adapter"));
    model.set_trainable(concat_prefixes({"adapter."}, kAudioBranchPrefixes));
    const uint64_t frozen = model.params_hash(kBackbonePrefixes);
    const int steps = cfg_.rebirth_epochs *
                      static_cast<int>((items.size() + cfg_.rebirth_batch - 1) / cfg_.rebirth_batch);
    train_supervised(model, std::move(items), steps, cfg_.rebirth_lr, cfg_.rebirth_batch,
                     derive_seed(cfg_.seed, "rebirth"), false);
    if (model.params_hash(kBackbonePrefixes) != frozen) {
        throw InvariantError("rebirth: frozen backbone or visual branch changed");
    }
    model.round_index = 0;
    return model;
}

RoundLog Trainer::post_rebirth_gdpo(ModelState& model,
                                    const std::vector<SyntheticVideo>& train_corpus,
                                    const std::vector<SyntheticVideo>& eval_corpus,
                                    const RoundThresholds& thresholds) const {
    Trainer one_round = *this;
    one_round.cfg_.round_loss = LossKind::gdpo;
    one_round.cfg_.proxy = ProxyMode::lora_proxy;
    one_round.eval_override = eval_override;
    std::optional<ModelState> unused;
    return one_round.mrdpo_round(model, unused, train_corpus, eval_corpus,
                                 model.round_index + 1, thresholds);
}

// ---- evaluation ----------------------------------------------------------------

EvalSummary Trainer::run_eval(const ModelState& model,
                              const std::vector<SyntheticVideo>& corpus) const {
    if (corpus.empty()) throw DomainError("evaluate: empty corpus");
    const int n = static_cast<int>(corpus.size());
    const auto patterns = default_unnatural_patterns();

    struct PerVideo {
        std::vector<ScoredCaption> rows;
        int qa_correct = 0;
        int qa_total = 0;
    };
    std::vector<PerVideo> results(static_cast<size_t>(n));

    parallel_for(n, cfg_.threads, [&](int vi) {
        const auto& video = corpus[static_cast<size_t>(vi)];
        auto& out = results[static_cast<size_t>(vi)];
        const Tensor media = encode_media(model, visual_features(video, vocab_, model.config),
                                          audio_features(video, vocab_, model.config));
        GenerateOptions opts;
        opts.temperature = 0.0;
        opts.eos_id = tok_.eos();

        const std::string global_caption =
            tok_.decode(generate(model, media, tok_.global_caption_prompt(), opts));
        ScoredCaption g;
        g.video_id = video.id;
        g.task = "global";
        g.caption = global_caption;
        g.report = verdict_report(
            judge_.judge(global_caption, video, TaskKind::global_caption, std::nullopt),
            global_caption, patterns);
        out.rows.push_back(std::move(g));

        for (int k = 0; k < cfg_.eval_locals_per_video; ++k) {
            Rng rng(derive_seed(cfg_.seed, "eval-interval", static_cast<uint64_t>(vi),
                                static_cast<uint64_t>(k)));
            const Interval iv = sample_local_interval(video, rng);
            const std::string caption = tok_.decode(
                generate(model, media,
                         tok_.local_caption_prompt(static_cast<int>(iv.t0),
                                                   static_cast<int>(iv.t1)),
                         opts));
            ScoredCaption row;
            row.video_id = video.id;
            row.task = "local";
            row.interval_start = iv.t0;
            row.interval_end = iv.t1;
            row.caption = caption;
            row.report = verdict_report(
                judge_.judge(caption, video, TaskKind::local_caption, iv), caption, patterns);
            out.rows.push_back(std::move(row));
        }

        for (int k = 0; k < cfg_.eval_qa_per_video; ++k) {
            const QaKind kind = kQaKinds[(vi + k) % 3];
            GenerateOptions qa_opts = opts;
            qa_opts.max_new_tokens = 2;
            const auto answer = generate(model, media, tok_.qa_prompt(kind), qa_opts);
            const int expected = tok_.number_token(qa_answer(video, kind));
            ++out.qa_total;
            if (!answer.empty() && answer.front() == expected) ++out.qa_correct;
        }
    });

    EvalSummary summary;
    std::vector<std::string> global_captions;
    for (const auto& r : results) {
        for (const auto& row : r.rows) {
            if (row.task == "global") global_captions.push_back(row.caption);
            summary.rows.push_back(row);
        }
        summary.qa_total += r.qa_total;
        summary.qa_accuracy += r.qa_correct;
    }
    summary.qa_accuracy =
        summary.qa_total > 0 ? summary.qa_accuracy / summary.qa_total : 0.0;
    std::vector<EvalReport> global_reports, local_reports;
    for (const auto& row : summary.rows) {
        (row.task == "global" ? global_reports : local_reports).push_back(row.report);
    }
    summary.global = aggregate(global_reports);
    summary.local = aggregate(local_reports);
    summary.unnatural_global = unnatural_rate(global_captions, patterns);
    return summary;
}

EvalSummary Trainer::evaluate(const ModelState& model,
                              const std::vector<SyntheticVideo>& corpus) const {
    return run_eval(model, corpus);
}

// ---- logs -----------------------------------------------------------------------

namespace {

nlohmann::json aggregate_to_json(const CorpusAggregate& a) {
    return {{"repetition_rate", a.repetition_rate}, {"miss_rate", a.miss_rate},
            {"hall_rate", a.hall_rate},             {"total_rate", a.total_rate},
            {"unnatural_rate", a.unnatural_rate},   {"count", a.count}};
}

}  // namespace

std::string round_log_to_json(const RoundLog& log) {
    nlohmann::json j;
    j["round_index"] = log.round_index;
    j["skipped"] = log.skipped;
    j["loss"] = loss_name(log.loss_kind);
    j["proxy"] = proxy_name(log.proxy);
    j["sampled_pairs"] = log.sampled_pairs;
    j["degenerate_pairs"] = log.degenerate_pairs;
    j["selected_global"] = log.selected_global;
    j["selected_local"] = log.selected_local;
    j["first_batch_dpo"] = log.first_batch_dpo;
    j["loss_curve"] = log.loss_curve;
    j["eval"] = {{"global", aggregate_to_json(log.eval.global)},
                 {"local", aggregate_to_json(log.eval.local)},
                 {"unnatural_global", log.eval.unnatural_global},
                 {"qa_accuracy", log.eval.qa_accuracy},
                 {"qa_total", log.eval.qa_total}};
    return j.dump(2);
}

// ---- pipeline runner -------------------------------------------------------------

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

void write_eval_files(const fs::path& dir, const std::string& stage, const EvalSummary& eval) {
    std::map<std::string, double> extra = {{"qa_accuracy", eval.qa_accuracy},
                                           {"unnatural_global", eval.unnatural_global}};
    write_text_file(dir / (stage + ".json"), eval_report_json(eval.rows, extra));
    write_text_file(dir / (stage + ".txt"), eval_report_table(eval.rows));
}

}  // namespace

std::string run_pipeline(const PipelineOptions& opts) {
    if (opts.out_dir.empty()) throw ConfigError("run_pipeline: out_dir is required");
    const fs::path out(opts.out_dir);
    const fs::path ckpt_dir = out / "checkpoints";
    const fs::path log_dir = out / "logs";
    const fs::path pair_dir = out / "pairs";
    const fs::path eval_dir = out / "eval";

    const fs::path final_path = ckpt_dir / "final.json";
    if (fs::exists(final_path) && !opts.force) {
        throw ConfigError("output directory already holds a finished run: " + final_path.string() +
                          " (use --force to redo)");
    }
    fs::create_directories(ckpt_dir);
    fs::create_directories(log_dir);
    fs::create_directories(pair_dir);
    fs::create_directories(eval_dir);

    const EventVocab vocab = EventVocab::standard();
    Trainer trainer(vocab, opts.train);
    ModelConfig mcfg = opts.model;
    mcfg.vocab_size = trainer.tokenizer().vocab_size();
    mcfg.visual_feature_dim = vocab.visual_feature_dim();
    mcfg.audio_feature_dim = vocab.audio_feature_dim();
    mcfg.validate();

    const auto train_corpus = read_corpus_jsonl(opts.train_corpus_path);
    const auto eval_corpus = read_corpus_jsonl(opts.eval_corpus_path);

    std::vector<RoundThresholds> schedule = opts.threshold_schedule_path.empty()
                                                ? default_threshold_schedule()
                                                : read_threshold_schedule(opts.threshold_schedule_path);
    if (opts.train.rounds > static_cast<int>(schedule.size())) {
        throw ConfigError("configured rounds exceed the threshold schedule length");
    }

    // config snapshot
    {
        nlohmann::json j;
        j["seed"] = opts.train.seed;
        j["stages"] = opts.stages;
        j["train_corpus"] = opts.train_corpus_path;
        j["eval_corpus"] = opts.eval_corpus_path;
        j["rounds"] = opts.train.rounds;
        j["round_loss"] = loss_name(opts.train.round_loss);
        j["proxy"] = proxy_name(opts.train.proxy);
        write_text_file(out / "config.json", j.dump(2));
    }

    auto stage_requested = [&](const std::string& name) {
        return std::find(opts.stages.begin(), opts.stages.end(), name) != opts.stages.end();
    };
    for (const auto& s : opts.stages) {
        static const std::vector<std::string> known = {"pretrain", "align", "sft",
                                                       "mrdpo",    "rebirth", "gdpo"};
        if (std::find(known.begin(), known.end(), s) == known.end()) {
            throw ConfigError("unknown stage: " + s);
        }
    }

    ModelState model = opts.resume_checkpoint.empty()
                           ? trainer.init_model(mcfg)
                           : load_checkpoint(opts.resume_checkpoint);

    auto run_stage = [&](const std::string& name, const std::function<void()>& body) {
        const fs::path path = ckpt_dir / (name + ".json");
        if (!stage_requested(name)) {
            if (fs::exists(path)) model = load_checkpoint(path);
            return;
        }
        if (fs::exists(path) && !opts.force && opts.resume_checkpoint.empty()) {
            std::fprintf(stderr, "[%s] checkpoint exists, loading %s\n", name.c_str(),
                         path.string().c_str());
            model = load_checkpoint(path);
            return;
        }
        body();
        save_checkpoint(model, path.string());
        std::fprintf(stderr, "[%s] checkpoint written to %s\n", name.c_str(),
                     path.string().c_str());
    };

    run_stage("pretrain", [&] { trainer.pretrain(model, train_corpus); });
    run_stage("align", [&] { trainer.alignment(model, train_corpus); });
    run_stage("sft", [&] {
        trainer.sft(model, train_corpus);
        write_eval_files(eval_dir, "sft", trainer.evaluate(model, eval_corpus));
    });
    run_stage("mrdpo", [&] {
        const auto logs = trainer.mrdpo(model, train_corpus, eval_corpus, schedule);
        for (const auto& log : logs) {
            char name[64];
            std::snprintf(name, sizeof(name), "round_%03d", log.round_index);
            write_text_file(log_dir / (std::string(name) + ".json"), round_log_to_json(log));
            write_pairs_jsonl((pair_dir / (std::string(name) + ".jsonl")).string(), log.pairs);
        }
    });
    run_stage("rebirth", [&] {
        const fs::path align_path = ckpt_dir / "align.json";
        if (!fs::exists(align_path)) {
            throw ConfigError("rebirth requires the alignment checkpoint at " +
                              align_path.string());
        }
        const ModelState post_alignment = load_checkpoint(align_path.string());
        RebirthStats stats;
        model = trainer.rebirth(post_alignment, model, train_corpus, &stats);
        nlohmann::json j = {{"labeled", stats.labeled},
                            {"kept_global", stats.kept_global},
                            {"kept_local", stats.kept_local},
                            {"kept_fraction", stats.kept_fraction}};
        write_text_file(log_dir / "rebirth.json", j.dump(2));
    });
    run_stage("gdpo", [&] {
        const auto thresholds = schedule[std::min(static_cast<size_t>(model.round_index),
                                                  schedule.size() - 1)];
        const RoundLog log = trainer.post_rebirth_gdpo(model, train_corpus, eval_corpus, thresholds);
        write_text_file(log_dir / "post_rebirth_round.json", round_log_to_json(log));
        write_pairs_jsonl((pair_dir / "post_rebirth_round.jsonl").string(), log.pairs);
    });

    save_checkpoint(model, final_path.string());
    write_eval_files(eval_dir, "final", trainer.evaluate(model, eval_corpus));
    return final_path.string();
}

}  // namespace avcap
