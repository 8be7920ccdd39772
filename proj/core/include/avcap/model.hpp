#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "avcap/corpus.hpp"
#include "avcap/tensor.hpp"
#include "avcap/tokenizer.hpp"

namespace avcap {

struct ModelConfig {
    int vocab_size = 0;
    int model_dim = 64;
    int n_layers = 2;
    int n_heads = 4;
    int enc_dim = 32;
    int visual_feature_dim = 0;
    int audio_feature_dim = 0;
    int max_frames = 30;              // m
    double frame_rate = 1.0;          // frames per second
    double audio_segment_len = 5.0;   // encoder's maximum duration, seconds
    int audio_tokens_per_segment = 5;
    int max_audio_segments = 12;
    int max_seq_len = 256;
    int max_new_tokens = 80;
    int lora_rank = 4;
    double lora_scale = 2.0;
    double lora_init_std = 0.05;
    double init_std = 0.08;

    static ModelConfig desk_default(const EventVocab& vocab, const Tokenizer& tokenizer);
    void validate() const;
};

// Synthetic visual encoder input: per-frame feature vectors with the frame
// timestamps that produced them.
struct FrameFeatures {
    std::vector<double> timestamps;
    std::vector<std::vector<double>> features;  // each of visual_feature_dim
};

// Synthetic audio encoder input: per-segment feature matrices, flattened
// row-major (tokens_per_segment x audio_feature_dim). All segments span
// audio_segment_len seconds except possibly the last.
struct AudioSegments {
    int tokens_per_segment = 0;
    double total_duration = 0.0;
    std::vector<std::vector<double>> segments;
};

// Low-rank delta per adapted weight W (d x d): effective update is
// scale * A * B with A (d x r) Gaussian-initialized and B (r x d) zero,
// so a fresh adapter is a functional no-op.
struct LoraAdapter {
    int rank = 0;
    double scale = 0.0;
    std::map<std::string, std::pair<Tensor, Tensor>> deltas;  // name -> (A, B)
};

class ModelState {
  public:
    ModelConfig config;
    int round_index = 0;
    uint64_t seed = 0;
    std::map<std::string, Tensor> params;
    std::optional<LoraAdapter> adapter;

    static ModelState init(const ModelConfig& cfg, uint64_t seed);
    ModelState clone() const;

    const Tensor& param(const std::string& name) const;
    std::vector<std::pair<std::string, Tensor>> named_params() const;  // includes adapter
    std::vector<Tensor> params_with_prefix(const std::vector<std::string>& prefixes) const;
    void set_trainable(const std::vector<std::string>& prefixes);
    std::vector<Tensor> trainable_params() const;
    void freeze_all() { set_trainable({}); }
    uint64_t params_hash(const std::vector<std::string>& prefixes) const;
};

// Frame timestamps: fixed rate when frame_rate * T fits under max_frames,
// otherwise exactly max_frames timestamps uniformly spaced over [0, T].
std::vector<double> sample_frames(double duration_seconds, const ModelConfig& cfg);

// Synthetic encoder front ends: events activate factored one-hot features
// near their timestamps, splitting caption-relevant information across the
// two modalities.
FrameFeatures visual_features(const SyntheticVideo& video, const EventVocab& vocab,
                              const ModelConfig& cfg);
AudioSegments audio_features(const SyntheticVideo& video, const EventVocab& vocab,
                             const ModelConfig& cfg);

// Frozen projection followed by the trainable aligner; one token row per
// frame, order preserved.
Tensor encode_visual(const FrameFeatures& frames, const ModelState& state);

// Frozen projection plus segment position embedding, concatenated along
// time, then the trainable audio aligner.
Tensor encode_audio(const AudioSegments& segments, const ModelState& state);

// Chronological interleave: block i is the i-th visual token row followed
// by audio rows [round((i-1)*La/n), round(i*La/n)). Slices are disjoint
// and exhaustive.
Tensor interleave(const Tensor& visual_tokens, const Tensor& audio_tokens);

// Assembles media tokens for whichever modalities are present; an empty
// (0 x model_dim) result is valid and means a text-only sequence.
Tensor encode_media(const ModelState& state, const std::optional<FrameFeatures>& frames,
                    const std::optional<AudioSegments>& segments);

// Per-token conditional log-probabilities of `targets` given
// [bos] media prompt [sep] teacher-forced targets. Empty targets give an
// empty result. pos_offset shifts the positional embedding window.
Tensor forward(const ModelState& state, const Tensor& media, const std::vector<int>& prompt,
               const std::vector<int>& targets, int pos_offset = 0);

// Sum of per-token log-probabilities, as a scalar tensor.
Tensor sequence_logprob(const ModelState& state, const Tensor& media,
                        const std::vector<int>& prompt, const std::vector<int>& targets,
                        int pos_offset = 0);

struct GenerateOptions {
    double temperature = 1.0;
    uint64_t seed = 0;
    int eos_id = 2;
    int max_new_tokens = 0;  // 0 means config.max_new_tokens
};

// Autoregressive sampling with a KV cache; temperature 0 is greedy.
// Deterministic given (state, inputs, options).
std::vector<int> generate(const ModelState& state, const Tensor& media,
                          const std::vector<int>& prompt, const GenerateOptions& opts);

void lora_attach(ModelState& state, uint64_t seed);
void lora_merge(ModelState& state);
void lora_detach(ModelState& state);

void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace avcap
