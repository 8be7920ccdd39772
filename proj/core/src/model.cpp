#include "avcap/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace avcap {

namespace {

const std::vector<std::string> kAdaptedWeights = {"attn.wq", "attn.wk", "attn.wv", "attn.wo"};

std::vector<std::string> adapted_weight_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (int i = 0; i < cfg.n_layers; ++i)
        for (const auto& w : kAdaptedWeights)
            names.push_back("layers." + std::to_string(i) + "." + w);
    return names;
}

}  // namespace

ModelConfig ModelConfig::desk_default(const EventVocab& vocab, const Tokenizer& tokenizer) {
    ModelConfig cfg;
    cfg.vocab_size = tokenizer.vocab_size();
    cfg.visual_feature_dim = vocab.visual_feature_dim();
    cfg.audio_feature_dim = vocab.audio_feature_dim();
    return cfg;
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(model_dim, "model_dim");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(enc_dim, "enc_dim");
    positive(visual_feature_dim, "visual_feature_dim");
    positive(audio_feature_dim, "audio_feature_dim");
    positive(max_frames, "max_frames");
    positive(audio_tokens_per_segment, "audio_tokens_per_segment");
    positive(max_audio_segments, "max_audio_segments");
    positive(max_seq_len, "max_seq_len");
    positive(max_new_tokens, "max_new_tokens");
    positive(lora_rank, "lora_rank");
    if (frame_rate <= 0.0) throw ConfigError("model config: frame_rate must be positive");
    if (audio_segment_len <= 0.0) throw ConfigError("model config: audio_segment_len must be positive");
    if (lora_scale <= 0.0) throw ConfigError("model config: lora_scale must be positive");
    if (model_dim % n_heads != 0) throw ConfigError("model config: model_dim must be divisible by n_heads");
}

// ---- state ------------------------------------------------------------------

ModelState ModelState::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelState s;
    s.config = cfg;
    s.seed = seed;
    Rng rng(derive_seed(seed, "model-init"));
    const int d = cfg.model_dim;
    const double std = cfg.init_std;

    auto gauss = [&rng, std](std::vector<int> shape) {
        return Tensor::randn(std::move(shape), rng, std);
    };

    s.params["tok_emb"] = gauss({cfg.vocab_size, d});
    s.params["pos_emb"] = gauss({cfg.max_seq_len, d});
    s.params["unemb"] = gauss({d, cfg.vocab_size});
    s.params["final_ln.g"] = Tensor::full({d}, 1.0);
    s.params["final_ln.b"] = Tensor::zeros({d});
    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        s.params[p + "ln1.g"] = Tensor::full({d}, 1.0);
        s.params[p + "ln1.b"] = Tensor::zeros({d});
        s.params[p + "attn.wq"] = gauss({d, d});
        s.params[p + "attn.wk"] = gauss({d, d});
        s.params[p + "attn.wv"] = gauss({d, d});
        s.params[p + "attn.wo"] = gauss({d, d});
        s.params[p + "ln2.g"] = Tensor::full({d}, 1.0);
        s.params[p + "ln2.b"] = Tensor::zeros({d});
        s.params[p + "mlp.w1"] = gauss({d, 4 * d});
        s.params[p + "mlp.b1"] = Tensor::zeros({4 * d});
        s.params[p + "mlp.w2"] = gauss({4 * d, d});
        s.params[p + "mlp.b2"] = Tensor::zeros({d});
    }
    // modality aligners: two linear layers with a GELU between
    s.params["visual_aligner.w1"] = gauss({cfg.enc_dim, d});
    s.params["visual_aligner.b1"] = Tensor::zeros({d});
    s.params["visual_aligner.w2"] = gauss({d, d});
    s.params["visual_aligner.b2"] = Tensor::zeros({d});
    s.params["audio_aligner.w1"] = gauss({cfg.enc_dim, d});
    s.params["audio_aligner.b1"] = Tensor::zeros({d});
    s.params["audio_aligner.w2"] = gauss({d, d});
    s.params["audio_aligner.b2"] = Tensor::zeros({d});
    s.params["audio.seg_pos"] =
        gauss({cfg.max_audio_segments * cfg.audio_tokens_per_segment, cfg.enc_dim});
    // frozen synthetic encoders: fixed random projections of event features
    const double enc_std = 1.0 / std::sqrt(static_cast<double>(cfg.enc_dim));
    s.params["encoder.visual"] = Tensor::randn({cfg.visual_feature_dim, cfg.enc_dim}, rng, enc_std);
    s.params["encoder.audio"] = Tensor::randn({cfg.audio_feature_dim, cfg.enc_dim}, rng, enc_std);
    return s;
}

ModelState ModelState::clone() const {
    ModelState out;
    out.config = config;
    out.round_index = round_index;
    out.seed = seed;
    for (const auto& [name, t] : params) {
        Tensor copy = Tensor::from_data(t.shape(), t.data(), t.requires_grad());
        out.params[name] = copy;
    }
    if (adapter.has_value()) {
        LoraAdapter a;
        a.rank = adapter->rank;
        a.scale = adapter->scale;
        for (const auto& [name, ab] : adapter->deltas) {
            a.deltas[name] = {
                Tensor::from_data(ab.first.shape(), ab.first.data(), ab.first.requires_grad()),
                Tensor::from_data(ab.second.shape(), ab.second.data(), ab.second.requires_grad())};
        }
        out.adapter = std::move(a);
    }
    return out;
}

const Tensor& ModelState::param(const std::string& name) const {
    const auto it = params.find(name);
    if (it == params.end()) throw StateError("unknown parameter: " + name);
    return it->second;
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.emplace_back(name, t);
    if (adapter.has_value()) {
        for (const auto& [name, ab] : adapter->deltas) {
            out.emplace_back("adapter." + name + ".a", ab.first);
            out.emplace_back("adapter." + name + ".b", ab.second);
        }
    }
    return out;
}

std::vector<Tensor> ModelState::params_with_prefix(const std::vector<std::string>& prefixes) const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_params()) {
        for (const auto& p : prefixes) {
            if (name.rfind(p, 0) == 0) {
                out.push_back(t);
                break;
            }
        }
    }
    return out;
}

void ModelState::set_trainable(const std::vector<std::string>& prefixes) {
    for (auto& [name, t] : named_params()) {
        bool trainable = false;
        for (const auto& p : prefixes) {
            if (name.rfind(p, 0) == 0) {
                trainable = true;
                break;
            }
        }
        // synthetic encoders stay frozen in every stage
        if (name.rfind("encoder.", 0) == 0) trainable = false;
        Tensor handle = t;
        handle.set_requires_grad(trainable);
    }
}

std::vector<Tensor> ModelState::trainable_params() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_params())
        if (t.requires_grad()) out.push_back(t);
    return out;
}

uint64_t ModelState::params_hash(const std::vector<std::string>& prefixes) const {
    uint64_t h = 1469598103934665603ULL;
    auto mix_bytes = [&h](const void* p, size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, t] : named_params()) {
        bool match = prefixes.empty();
        for (const auto& p : prefixes) {
            if (name.rfind(p, 0) == 0) {
                match = true;
                break;
            }
        }
        if (!match) continue;
        mix_bytes(name.data(), name.size());
        mix_bytes(t.data().data(), t.data().size() * sizeof(double));
    }
    return h;
}

// ---- frame sampling and synthetic features ----------------------------------

std::vector<double> sample_frames(double duration_seconds, const ModelConfig& cfg) {
    if (duration_seconds <= 0.0) throw DomainError("sample_frames: duration must be positive");
    const double at_rate = cfg.frame_rate * duration_seconds;
    std::vector<double> ts;
    if (at_rate < 1.0) {
        ts.push_back(duration_seconds / 2.0);
    } else if (at_rate <= static_cast<double>(cfg.max_frames) + 1e-9) {
        const int n = static_cast<int>(std::floor(at_rate + 1e-9));
        ts.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) ts.push_back((i + 0.5) / cfg.frame_rate);
    } else {
        const int n = cfg.max_frames;
        ts.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) ts.push_back((i + 0.5) * duration_seconds / n);
    }
    return ts;
}

FrameFeatures visual_features(const SyntheticVideo& video, const EventVocab& vocab,
                              const ModelConfig& cfg) {
    if (vocab.visual_feature_dim() != cfg.visual_feature_dim) {
        throw ConfigError("visual_features: vocabulary feature dim does not match model config");
    }
    FrameFeatures out;
    out.timestamps = sample_frames(video.duration, cfg);
    const int n = static_cast<int>(out.timestamps.size());
    out.features.assign(static_cast<size_t>(n),
                        std::vector<double>(static_cast<size_t>(cfg.visual_feature_dim), 0.0));
    for (const auto& e : video.visual_events) {
        // the event is visible in the frame nearest its onset
        int best = 0;
        double best_dist = std::abs(out.timestamps[0] - e.t);
        for (int i = 1; i < n; ++i) {
            const double dist = std::abs(out.timestamps[static_cast<size_t>(i)] - e.t);
            if (dist < best_dist) {
                best = i;
                best_dist = dist;
            }
        }
        const auto parts = vocab.visual_parts(e.id);
        auto& feat = out.features[static_cast<size_t>(best)];
        feat[static_cast<size_t>(parts.color)] += 1.0;
        feat[static_cast<size_t>(vocab.n_colors() + parts.shape)] += 1.0;
        feat[static_cast<size_t>(vocab.n_colors() + vocab.n_shapes() + parts.action)] += 1.0;
    }
    return out;
}

AudioSegments audio_features(const SyntheticVideo& video, const EventVocab& vocab,
                             const ModelConfig& cfg) {
    if (vocab.audio_feature_dim() != cfg.audio_feature_dim) {
        throw ConfigError("audio_features: vocabulary feature dim does not match model config");
    }
    if (video.duration <= 0.0) throw DomainError("audio_features: duration must be positive");
    AudioSegments out;
    out.tokens_per_segment = cfg.audio_tokens_per_segment;
    out.total_duration = video.duration;
    const int l = static_cast<int>(std::ceil(video.duration / cfg.audio_segment_len - 1e-12));
    const int tps = cfg.audio_tokens_per_segment;
    const int adim = cfg.audio_feature_dim;
    out.segments.assign(static_cast<size_t>(std::max(1, l)),
                        std::vector<double>(static_cast<size_t>(tps * adim), 0.0));
    for (const auto& e : video.audio_events) {
        int seg = std::min(static_cast<int>(e.t / cfg.audio_segment_len),
                           static_cast<int>(out.segments.size()) - 1);
        const double seg_start = seg * cfg.audio_segment_len;
        const double seg_dur = std::min(cfg.audio_segment_len, video.duration - seg_start);
        const double win = seg_dur / tps;
        int w = win > 0.0 ? static_cast<int>((e.t - seg_start) / win) : 0;
        w = std::max(0, std::min(tps - 1, w));
        const auto parts = vocab.audio_parts(e.id);
        auto& feat = out.segments[static_cast<size_t>(seg)];
        feat[static_cast<size_t>(w * adim + parts.sound)] += 1.0;
        feat[static_cast<size_t>(w * adim + vocab.n_sounds() + parts.verb)] += 1.0;
    }
    return out;
}

// ---- encoders and interleaving ----------------------------------------------

namespace {

Tensor aligner_mlp(const ModelState& s, const std::string& prefix, const Tensor& x) {
    const Tensor h = gelu(add_bias(matmul(x, s.param(prefix + ".w1")), s.param(prefix + ".b1")));
    return add_bias(matmul(h, s.param(prefix + ".w2")), s.param(prefix + ".b2"));
}

}  // namespace

Tensor encode_visual(const FrameFeatures& frames, const ModelState& state) {
    if (frames.features.empty()) throw DomainError("encode_visual: no frames");
    const int n = static_cast<int>(frames.features.size());
    const int fdim = state.config.visual_feature_dim;
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(n) * static_cast<size_t>(fdim));
    for (const auto& f : frames.features) {
        if (static_cast<int>(f.size()) != fdim) {
            throw ShapeError("encode_visual: frame feature dim " + std::to_string(f.size()) +
                             ", expected " + std::to_string(fdim));
        }
        flat.insert(flat.end(), f.begin(), f.end());
    }
    const Tensor feats = Tensor::from_data({n, fdim}, std::move(flat));
    return aligner_mlp(state, "visual_aligner", matmul(feats, state.param("encoder.visual")));
}

Tensor encode_audio(const AudioSegments& segments, const ModelState& state) {
    if (segments.segments.empty()) throw DomainError("encode_audio: no segments");
    const auto& cfg = state.config;
    const int l = static_cast<int>(segments.segments.size());
    if (l > cfg.max_audio_segments) {
        throw CapacityError("encode_audio: " + std::to_string(l) +
                            " segments exceed the position table of " +
                            std::to_string(cfg.max_audio_segments));
    }
    const int tps = cfg.audio_tokens_per_segment;
    const int adim = cfg.audio_feature_dim;
    if (segments.tokens_per_segment != tps) {
        throw ShapeError("encode_audio: segment token count mismatch");
    }
    std::vector<Tensor> parts;
    parts.reserve(static_cast<size_t>(l));
    const Tensor& enc = state.param("encoder.audio");
    const Tensor& seg_pos = state.param("audio.seg_pos");
    for (int j = 0; j < l; ++j) {
        const auto& raw = segments.segments[static_cast<size_t>(j)];
        if (static_cast<int>(raw.size()) != tps * adim) {
            throw ShapeError("encode_audio: segment " + std::to_string(j) + " feature size " +
                             std::to_string(raw.size()));
        }
        const Tensor feats = Tensor::from_data({tps, adim}, raw);
        const Tensor projected = matmul(feats, enc);
        const Tensor pos = slice(seg_pos, 0, j * tps, (j + 1) * tps);
        parts.push_back(add(projected, pos));
    }
    const Tensor stacked = parts.size() == 1 ? parts.front() : concat(parts, 0);
    return aligner_mlp(state, "audio_aligner", stacked);
}

Tensor interleave(const Tensor& visual_tokens, const Tensor& audio_tokens) {
    if (visual_tokens.dim(0) == 0 || audio_tokens.dim(0) == 0) {
        throw DomainError("interleave: empty inputs");
    }
    if (visual_tokens.dim(1) != audio_tokens.dim(1)) {
        throw ShapeError("interleave: token dims differ");
    }
    const int n = visual_tokens.dim(0);
    const int la = audio_tokens.dim(0);
    std::vector<Tensor> parts;
    parts.reserve(static_cast<size_t>(2 * n));
    int prev = 0;
    for (int i = 1; i <= n; ++i) {
        const int bound = static_cast<int>(
            std::llround(static_cast<double>(i) * static_cast<double>(la) / n));
        parts.push_back(slice(visual_tokens, 0, i - 1, i));
        if (bound > prev) parts.push_back(slice(audio_tokens, 0, prev, bound));
        prev = bound;
    }
    return concat(parts, 0);
}

Tensor encode_media(const ModelState& state, const std::optional<FrameFeatures>& frames,
                    const std::optional<AudioSegments>& segments) {
    if (frames.has_value() && segments.has_value()) {
        return interleave(encode_visual(*frames, state), encode_audio(*segments, state));
    }
    if (frames.has_value()) return encode_visual(*frames, state);
    if (segments.has_value()) return encode_audio(*segments, state);
    return Tensor::zeros({0, state.config.model_dim});
}

// ---- decoder ----------------------------------------------------------------

namespace {

Tensor adapted_matmul(const ModelState& s, const Tensor& x, const std::string& name) {
    const Tensor base = matmul(x, s.param(name));
    if (!s.adapter.has_value()) return base;
    const auto it = s.adapter->deltas.find(name);
    if (it == s.adapter->deltas.end()) return base;
    const Tensor delta = matmul(matmul(x, it->second.first), it->second.second);
    return add(base, scale(delta, s.adapter->scale));
}

Tensor causal_mask(int len) {
    std::vector<double> m(static_cast<size_t>(len) * static_cast<size_t>(len), 0.0);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j)
            m[static_cast<size_t>(i) * len + j] = -1e30;
    return Tensor::from_data({len, len}, std::move(m));
}

// pre-LN transformer stack; returns hidden states after the final norm
Tensor decode_hidden(const ModelState& s, const Tensor& input) {
    const auto& cfg = s.config;
    const int len = input.dim(0);
    const int dh = cfg.model_dim / cfg.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor mask = causal_mask(len);
    Tensor h = input;
    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        const Tensor a = layer_norm(h, s.param(p + "ln1.g"), s.param(p + "ln1.b"));
        const Tensor q = adapted_matmul(s, a, p + "attn.wq");
        const Tensor k = adapted_matmul(s, a, p + "attn.wk");
        const Tensor v = adapted_matmul(s, a, p + "attn.wv");
        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(cfg.n_heads));
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const int c0 = hd * dh, c1 = (hd + 1) * dh;
            const Tensor qh = slice(q, 1, c0, c1);
            const Tensor kh = slice(k, 1, c0, c1);
            const Tensor vh = slice(v, 1, c0, c1);
            const Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), mask);
            heads.push_back(matmul(softmax(scores), vh));
        }
        const Tensor ctx = concat(heads, 1);
        h = add(h, adapted_matmul(s, ctx, p + "attn.wo"));
        const Tensor b = layer_norm(h, s.param(p + "ln2.g"), s.param(p + "ln2.b"));
        const Tensor m1 = gelu(add_bias(matmul(b, s.param(p + "mlp.w1")), s.param(p + "mlp.b1")));
        const Tensor m2 = add_bias(matmul(m1, s.param(p + "mlp.w2")), s.param(p + "mlp.b2"));
        h = add(h, m2);
    }
    return layer_norm(h, s.param("final_ln.g"), s.param("final_ln.b"));
}

// Sequence layout is [bos] media prompt [sep] targets; the special ids
// match the fixed Tokenizer slots.
Tensor build_input(const ModelState& s, const Tensor& media, const std::vector<int>& prompt,
                   const std::vector<int>& targets_in, int pos_offset, int* prefix_len) {
    const Tensor& tok_emb = s.param("tok_emb");
    std::vector<int> head_ids = {1 /*bos*/};
    std::vector<int> tail_ids = prompt;
    tail_ids.push_back(3 /*sep*/);
    tail_ids.insert(tail_ids.end(), targets_in.begin(), targets_in.end());
    const Tensor head = embedding(tok_emb, head_ids);
    const Tensor tail = embedding(tok_emb, tail_ids);
    Tensor x = media.dim(0) > 0 ? concat({head, media, tail}, 0) : concat({head, tail}, 0);
    const int len = x.dim(0);
    if (pos_offset < 0 || pos_offset + len > s.config.max_seq_len) {
        throw CapacityError("sequence of length " + std::to_string(len) + " at offset " +
                            std::to_string(pos_offset) + " exceeds the context window of " +
                            std::to_string(s.config.max_seq_len));
    }
    *prefix_len = 1 + media.dim(0) + static_cast<int>(prompt.size()) + 1;
    return add(x, slice(s.param("pos_emb"), 0, pos_offset, pos_offset + len));
}

}  // namespace

Tensor forward(const ModelState& state, const Tensor& media, const std::vector<int>& prompt,
               const std::vector<int>& targets, int pos_offset) {
    for (const int t : targets) {
        if (t < 0 || t >= state.config.vocab_size) throw DomainError("forward: target id out of range");
    }
    if (targets.empty()) return Tensor::zeros({0});
    const std::vector<int> teacher(targets.begin(), targets.end() - 1);
    int prefix_len = 0;
    const Tensor x = build_input(state, media, prompt, teacher, pos_offset, &prefix_len);
    const Tensor hidden = decode_hidden(state, x);
    const int len = x.dim(0);
    const int n_targets = static_cast<int>(targets.size());
    const Tensor pred = slice(hidden, 0, len - n_targets, len);
    const Tensor logits = matmul(pred, state.param("unemb"));
    return gather_cols(log_softmax(logits), targets);
}

Tensor sequence_logprob(const ModelState& state, const Tensor& media,
                        const std::vector<int>& prompt, const std::vector<int>& targets,
                        int pos_offset) {
    if (targets.empty()) return Tensor::scalar(0.0);
    return sum(forward(state, media, prompt, targets, pos_offset));
}

// ---- inference path with KV cache -------------------------------------------

namespace {

// Weights materialized for sampling: adapter deltas folded in, raw pointers
// into the state's parameter storage elsewhere.
struct InferenceModel {
    const ModelState* state;
    int d, n_heads, dh, n_layers, vocab;
    struct Layer {
        std::vector<double> wq, wk, wv, wo;  // effective (adapter folded)
        const std::vector<double>*ln1g, *ln1b, *ln2g, *ln2b;
        const std::vector<double>*w1, *b1, *w2, *b2;
    };
    std::vector<Layer> layers;
    const std::vector<double>*tok_emb, *pos_emb, *unemb, *flng, *flnb;

    explicit InferenceModel(const ModelState& s) : state(&s) {
        const auto& cfg = s.config;
        d = cfg.model_dim;
        n_heads = cfg.n_heads;
        dh = d / n_heads;
        n_layers = cfg.n_layers;
        vocab = cfg.vocab_size;
        tok_emb = &s.param("tok_emb").data();
        pos_emb = &s.param("pos_emb").data();
        unemb = &s.param("unemb").data();
        flng = &s.param("final_ln.g").data();
        flnb = &s.param("final_ln.b").data();
        layers.resize(static_cast<size_t>(n_layers));
        for (int i = 0; i < n_layers; ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            auto& L = layers[static_cast<size_t>(i)];
            L.wq = effective(s, p + "attn.wq");
            L.wk = effective(s, p + "attn.wk");
            L.wv = effective(s, p + "attn.wv");
            L.wo = effective(s, p + "attn.wo");
            L.ln1g = &s.param(p + "ln1.g").data();
            L.ln1b = &s.param(p + "ln1.b").data();
            L.ln2g = &s.param(p + "ln2.g").data();
            L.ln2b = &s.param(p + "ln2.b").data();
            L.w1 = &s.param(p + "mlp.w1").data();
            L.b1 = &s.param(p + "mlp.b1").data();
            L.w2 = &s.param(p + "mlp.w2").data();
            L.b2 = &s.param(p + "mlp.b2").data();
        }
    }

    static std::vector<double> effective(const ModelState& s, const std::string& name) {
        std::vector<double> w = s.param(name).data();
        if (s.adapter.has_value()) {
            const auto it = s.adapter->deltas.find(name);
            if (it != s.adapter->deltas.end()) {
                const int d = s.config.model_dim;
                const int r = s.adapter->rank;
                std::vector<double> delta(static_cast<size_t>(d) * static_cast<size_t>(d), 0.0);
                kernels::mm_nn(it->second.first.data().data(), it->second.second.data().data(),
                               delta.data(), d, r, d, false);
                for (size_t i = 0; i < w.size(); ++i) w[i] += s.adapter->scale * delta[i];
            }
        }
        return w;
    }
};

struct KvCache {
    int len = 0;
    std::vector<std::vector<double>> k, v;  // per layer, (max_len x d) flat
};

void layer_norm_row(const double* x, const std::vector<double>& g, const std::vector<double>& b,
                    double* out, int d) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        const double dv = x[j] - mu;
        var += dv * dv;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < d; ++j) out[j] = g[static_cast<size_t>(j)] * ((x[j] - mu) * inv) + b[static_cast<size_t>(j)];
}

// Processes one embedding row at position cache.len; returns logits.
std::vector<double> infer_step(const InferenceModel& m, KvCache& cache, std::vector<double> h) {
    const int d = m.d, dh = m.dh;
    const int t = cache.len;
    std::vector<double> a(static_cast<size_t>(d)), q(static_cast<size_t>(d));
    std::vector<double> ctx(static_cast<size_t>(d)), tmp(static_cast<size_t>(d));
    std::vector<double> scores;
    for (int li = 0; li < m.n_layers; ++li) {
        const auto& L = m.layers[static_cast<size_t>(li)];
        auto& kc = cache.k[static_cast<size_t>(li)];
        auto& vc = cache.v[static_cast<size_t>(li)];
        layer_norm_row(h.data(), *L.ln1g, *L.ln1b, a.data(), d);
        kernels::mm_nn(a.data(), L.wq.data(), q.data(), 1, d, d, false);
        kernels::mm_nn(a.data(), L.wk.data(), kc.data() + static_cast<size_t>(t) * d, 1, d, d, false);
        kernels::mm_nn(a.data(), L.wv.data(), vc.data() + static_cast<size_t>(t) * d, 1, d, d, false);
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        scores.assign(static_cast<size_t>(t) + 1, 0.0);
        for (int hd = 0; hd < m.n_heads; ++hd) {
            const int c0 = hd * dh;
            double mx = -1e300;
            for (int s = 0; s <= t; ++s) {
                double dot = 0.0;
                const double* krow = kc.data() + static_cast<size_t>(s) * d + c0;
                for (int j = 0; j < dh; ++j) dot += q[static_cast<size_t>(c0 + j)] * krow[j];
                dot *= inv_sqrt_dh;
                scores[static_cast<size_t>(s)] = dot;
                mx = std::max(mx, dot);
            }
            double z = 0.0;
            for (int s = 0; s <= t; ++s) {
                scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
                z += scores[static_cast<size_t>(s)];
            }
            const double invz = 1.0 / z;
            for (int j = 0; j < dh; ++j) tmp[static_cast<size_t>(c0 + j)] = 0.0;
            for (int s = 0; s <= t; ++s) {
                const double w = scores[static_cast<size_t>(s)] * invz;
                const double* vrow = vc.data() + static_cast<size_t>(s) * d + c0;
                for (int j = 0; j < dh; ++j) tmp[static_cast<size_t>(c0 + j)] += w * vrow[j];
            }
        }
        kernels::mm_nn(tmp.data(), L.wo.data(), ctx.data(), 1, d, d, false);
        for (int j = 0; j < d; ++j) h[static_cast<size_t>(j)] += ctx[static_cast<size_t>(j)];
        layer_norm_row(h.data(), *L.ln2g, *L.ln2b, a.data(), d);
        std::vector<double> m1(static_cast<size_t>(4 * d));
        kernels::mm_nn(a.data(), L.w1->data(), m1.data(), 1, d, 4 * d, false);
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        for (int j = 0; j < 4 * d; ++j) {
            const double x = m1[static_cast<size_t>(j)] + (*L.b1)[static_cast<size_t>(j)];
            m1[static_cast<size_t>(j)] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
        }
        kernels::mm_nn(m1.data(), L.w2->data(), tmp.data(), 1, 4 * d, d, false);
        for (int j = 0; j < d; ++j) h[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)] + (*L.b2)[static_cast<size_t>(j)];
    }
    ++cache.len;
    layer_norm_row(h.data(), *m.flng, *m.flnb, a.data(), d);
    std::vector<double> logits(static_cast<size_t>(m.vocab));
    kernels::mm_nn(a.data(), m.unemb->data(), logits.data(), 1, d, m.vocab, false);
    return logits;
}

// pad/bos/sep are structural and never valid caption tokens
void ban_special_tokens(std::vector<double>& logits) {
    for (const int id : {0, 1, 3}) logits[static_cast<size_t>(id)] = -1e30;
}

int sample_token(const std::vector<double>& logits, double temperature, Rng& rng) {
    if (temperature == 0.0) {
        int best = 0;
        for (int i = 1; i < static_cast<int>(logits.size()); ++i)
            if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
        return best;
    }
    double mx = logits[0] / temperature;
    std::vector<double> p(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = logits[i] / temperature;
        mx = std::max(mx, p[i]);
    }
    double z = 0.0;
    for (auto& v : p) {
        v = std::exp(v - mx);
        z += v;
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(p.size()) - 1;
}

}  // namespace

std::vector<int> generate(const ModelState& state, const Tensor& media,
                          const std::vector<int>& prompt, const GenerateOptions& opts) {
    if (opts.temperature < 0.0) throw DomainError("generate: temperature must be non-negative");
    const auto& cfg = state.config;
    const int d = cfg.model_dim;
    const int max_new = opts.max_new_tokens > 0 ? opts.max_new_tokens : cfg.max_new_tokens;

    // prefill rows: [bos] media prompt [sep]
    std::vector<std::vector<double>> rows;
    const auto& tok_emb = state.param("tok_emb").data();
    auto emb_row = [&](int id) {
        return std::vector<double>(tok_emb.begin() + static_cast<size_t>(id) * d,
                                   tok_emb.begin() + static_cast<size_t>(id + 1) * d);
    };
    rows.push_back(emb_row(1 /*bos*/));
    for (int i = 0; i < media.dim(0); ++i) {
        rows.emplace_back(media.data().begin() + static_cast<size_t>(i) * d,
                          media.data().begin() + static_cast<size_t>(i + 1) * d);
    }
    for (const int id : prompt) rows.push_back(emb_row(id));
    rows.push_back(emb_row(3 /*sep*/));

    const int prefill = static_cast<int>(rows.size());
    if (prefill + max_new > cfg.max_seq_len) {
        throw CapacityError("generate: prompt plus sampling budget exceeds the context window");
    }

    InferenceModel model(state);
    KvCache cache;
    cache.k.assign(static_cast<size_t>(cfg.n_layers),
                   std::vector<double>(static_cast<size_t>(cfg.max_seq_len) * d, 0.0));
    cache.v = cache.k;
    const auto& pos_emb = state.param("pos_emb").data();
    std::vector<double> logits;
    for (int i = 0; i < prefill; ++i) {
        auto& r = rows[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) r[static_cast<size_t>(j)] += pos_emb[static_cast<size_t>(i) * d + j];
        logits = infer_step(model, cache, std::move(r));
    }

    Rng rng(derive_seed(opts.seed, "generate"));
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        ban_special_tokens(logits);
        const int tok = sample_token(logits, opts.temperature, rng);
        if (tok == opts.eos_id) break;
        out.push_back(tok);
        if (step + 1 == max_new) break;
        auto row = emb_row(tok);
        const int pos = cache.len;
        for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] += pos_emb[static_cast<size_t>(pos) * d + j];
        logits = infer_step(model, cache, std::move(row));
    }
    return out;
}

// ---- LoRA -------------------------------------------------------------------

void lora_attach(ModelState& state, uint64_t seed) {
    if (state.adapter.has_value()) throw StateError("lora_attach: adapter already attached");
    Rng rng(derive_seed(seed, "lora-init"));
    LoraAdapter a;
    a.rank = state.config.lora_rank;
    a.scale = state.config.lora_scale;
    const int d = state.config.model_dim;
    for (const auto& name : adapted_weight_names(state.config)) {
        Tensor A = Tensor::randn({d, a.rank}, rng, state.config.lora_init_std, true);
        Tensor B = Tensor::zeros({a.rank, d}, true);
        a.deltas[name] = {A, B};
    }
    state.adapter = std::move(a);
}

void lora_merge(ModelState& state) {
    if (!state.adapter.has_value()) throw StateError("lora_merge: no adapter attached");
    const int d = state.config.model_dim;
    const int r = state.adapter->rank;
    std::vector<double> delta(static_cast<size_t>(d) * static_cast<size_t>(d));
    for (const auto& [name, ab] : state.adapter->deltas) {
        kernels::mm_nn(ab.first.data().data(), ab.second.data().data(), delta.data(), d, r, d,
                       false);
        auto& w = state.params.at(name).data();
        for (size_t i = 0; i < w.size(); ++i) w[i] += state.adapter->scale * delta[i];
    }
    state.adapter.reset();
}

void lora_detach(ModelState& state) {
    if (!state.adapter.has_value()) throw StateError("lora_detach: no adapter attached");
    state.adapter.reset();
}

// ---- checkpoints -------------------------------------------------------------

namespace {

nlohmann::json config_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"model_dim", c.model_dim},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"enc_dim", c.enc_dim},
            {"visual_feature_dim", c.visual_feature_dim},
            {"audio_feature_dim", c.audio_feature_dim},
            {"max_frames", c.max_frames},
            {"frame_rate", c.frame_rate},
            {"audio_segment_len", c.audio_segment_len},
            {"audio_tokens_per_segment", c.audio_tokens_per_segment},
            {"max_audio_segments", c.max_audio_segments},
            {"max_seq_len", c.max_seq_len},
            {"max_new_tokens", c.max_new_tokens},
            {"lora_rank", c.lora_rank},
            {"lora_scale", c.lora_scale},
            {"lora_init_std", c.lora_init_std},
            {"init_std", c.init_std}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.enc_dim = j.at("enc_dim").get<int>();
    c.visual_feature_dim = j.at("visual_feature_dim").get<int>();
    c.audio_feature_dim = j.at("audio_feature_dim").get<int>();
    c.max_frames = j.at("max_frames").get<int>();
    c.frame_rate = j.at("frame_rate").get<double>();
    c.audio_segment_len = j.at("audio_segment_len").get<double>();
    c.audio_tokens_per_segment = j.at("audio_tokens_per_segment").get<int>();
    c.max_audio_segments = j.at("max_audio_segments").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.max_new_tokens = j.at("max_new_tokens").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_scale = j.at("lora_scale").get<double>();
    c.lora_init_std = j.at("lora_init_std").get<double>();
    c.init_std = j.at("init_std").get<double>();
    return c;
}

nlohmann::json tensor_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", t.data()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor::from_data(j.at("shape").get<std::vector<int>>(),
                             j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
    nlohmann::json j;
    j["format"] = "avcap-checkpoint-v1";
    j["config"] = config_json(state.config);
    j["round_index"] = state.round_index;
    j["seed"] = state.seed;
    nlohmann::json params;
    for (const auto& [name, t] : state.params) params[name] = tensor_json(t);
    j["params"] = std::move(params);
    if (state.adapter.has_value()) {
        nlohmann::json targets;
        for (const auto& [name, ab] : state.adapter->deltas) {
            targets[name] = {{"a", tensor_json(ab.first)}, {"b", tensor_json(ab.second)}};
        }
        j["adapter"] = {{"rank", state.adapter->rank},
                        {"scale", state.adapter->scale},
                        {"targets", std::move(targets)}};
    } else {
        j["adapter"] = nullptr;
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out << j.dump();
    out << "\n";
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid checkpoint JSON in " + path + ": " + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != "avcap-checkpoint-v1") {
            throw DataError("unsupported checkpoint format in " + path);
        }
        ModelState s;
        s.config = config_from_json(j.at("config"));
        s.config.validate();
        s.round_index = j.at("round_index").get<int>();
        s.seed = j.at("seed").get<uint64_t>();
        for (const auto& [name, tj] : j.at("params").items()) {
            s.params[name] = tensor_from_json(tj);
        }
        if (!j.at("adapter").is_null()) {
            LoraAdapter a;
            a.rank = j["adapter"].at("rank").get<int>();
            a.scale = j["adapter"].at("scale").get<double>();
            for (const auto& [name, abj] : j["adapter"].at("targets").items()) {
                a.deltas[name] = {tensor_from_json(abj.at("a")), tensor_from_json(abj.at("b"))};
            }
            s.adapter = std::move(a);
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint " + path + ": " + e.what());
    }
}

}  // namespace avcap
