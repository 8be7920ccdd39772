#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "avcap/adam.hpp"
#include "avcap/losses.hpp"
#include "avcap/prefpipe.hpp"

namespace avcap {

enum class LossKind { dpo, gdpo, cdpo, sft };
enum class ProxyMode { lora_proxy, direct };

std::string loss_name(LossKind k);
LossKind loss_from_name(const std::string& name);
std::string proxy_name(ProxyMode m);
ProxyMode proxy_from_name(const std::string& name);

// Knobs for the whole training pipeline. Defaults are desk-scale; every
// value is overridable from the CLI config.
struct TrainConfig {
    uint64_t seed = 1234;
    int threads = 2;

    // base pretraining (builds the frozen visually-grounded backbone)
    int pretrain_steps = 2400;
    double pretrain_lr = 1.5e-3;
    int pretrain_batch = 8;

    // audio modality alignment
    int align_steps = 500;
    double align_lr = 2e-3;
    int align_batch = 8;

    // audio-visual supervised fine-tuning
    int sft_epochs = 3;
    double sft_lr = 1.5e-3;
    int sft_batch = 8;

    // preference-optimization rounds
    int rounds = 6;
    int round_steps = 200;
    double round_lr = 1e-3;
    int round_batch = 4;
    double beta = 0.1;
    double lambda = 0.1;
    LossKind round_loss = LossKind::gdpo;
    ProxyMode proxy = ProxyMode::lora_proxy;
    double pair_temperature = 1.0;
    double halt_unnatural_rate = 0.10;

    // rebirth tuning
    int rebirth_epochs = 3;
    double rebirth_lr = 1.5e-3;
    int rebirth_batch = 8;
    double rebirth_repetition_threshold = 0.5;

    // evaluation
    int eval_locals_per_video = 1;
    int eval_qa_per_video = 1;
};

struct StageResult {
    std::vector<double> loss_curve;
    double first_loss = 0.0;
    double last_loss = 0.0;
};

struct EvalSummary {
    std::vector<ScoredCaption> rows;
    CorpusAggregate global;
    CorpusAggregate local;
    double unnatural_global = 0.0;
    double qa_accuracy = 0.0;
    int qa_total = 0;
};

struct RoundLog {
    int round_index = 0;
    bool skipped = false;
    LossKind loss_kind = LossKind::gdpo;
    ProxyMode proxy = ProxyMode::lora_proxy;
    int sampled_pairs = 0;
    int degenerate_pairs = 0;
    int selected_global = 0;
    int selected_local = 0;
    double first_batch_dpo = 0.0;  // ln 2 at round start under the LoRA proxy
    std::vector<double> loss_curve;
    std::vector<PreferencePair> pairs;  // the round's training pairs
    EvalSummary eval;
};

struct RebirthStats {
    int labeled = 0;
    int kept_global = 0;
    int kept_local = 0;
    double kept_fraction = 0.0;
};

class Trainer {
  public:
    Trainer(EventVocab vocab, TrainConfig cfg);

    const TrainConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tok_; }
    const EventVocab& vocab() const { return vocab_; }

    ModelState init_model() const;
    ModelState init_model(const ModelConfig& mcfg) const;

    // Trains backbone, embeddings and the visual aligner on visual-only
    // captioning, caption language modeling and visual count questions.
    // The audio branch and the synthetic encoders stay untouched.
    StageResult pretrain(ModelState& model, const std::vector<SyntheticVideo>& corpus) const;

    // Trains only the audio aligner and segment position embeddings on
    // audio-only caption data.
    StageResult alignment(ModelState& model, const std::vector<SyntheticVideo>& corpus) const;

    // Attaches a fresh adapter and trains it plus the audio branch on
    // ground-truth captions (global + local) and count questions.
    StageResult sft(ModelState& model, const std::vector<SyntheticVideo>& corpus) const;

    // One preference round: merge adapter, refresh the frozen reference,
    // attach a fresh adapter, build the pair dataset, train, evaluate.
    // In direct mode the same adapter keeps training against the reference
    // captured at the first round.
    RoundLog mrdpo_round(ModelState& model, std::optional<ModelState>& direct_reference,
                         const std::vector<SyntheticVideo>& train_corpus,
                         const std::vector<SyntheticVideo>& eval_corpus, int round_index,
                         const RoundThresholds& thresholds) const;

    // Runs rounds against the schedule, halting once the evaluated
    // unnatural rate exceeds the configured threshold.
    std::vector<RoundLog> mrdpo(ModelState& model,
                                const std::vector<SyntheticVideo>& train_corpus,
                                const std::vector<SyntheticVideo>& eval_corpus,
                                const std::vector<RoundThresholds>& schedule) const;

    // Labels the corpus with the post-round model, filters unnatural
    // captions, then SFT-trains the post-alignment model on what is left.
    ModelState rebirth(const ModelState& post_alignment, const ModelState& labeler,
                       const std::vector<SyntheticVideo>& unlabeled, RebirthStats* stats) const;

    RoundLog post_rebirth_gdpo(ModelState& model,
                               const std::vector<SyntheticVideo>& train_corpus,
                               const std::vector<SyntheticVideo>& eval_corpus,
                               const RoundThresholds& thresholds) const;

    // Greedy evaluation: one global caption per video, seeded local
    // captions, and count questions; judged deterministically.
    EvalSummary evaluate(const ModelState& model,
                         const std::vector<SyntheticVideo>& corpus) const;

    // Test seam: replaces evaluate() inside mrdpo()'s halting loop.
    std::function<EvalSummary(const ModelState&)> eval_override;

    // dataset builders (exposed for tests)
    std::vector<SequenceInput> sft_items(const std::vector<SyntheticVideo>& corpus) const;
    std::vector<SequenceInput> alignment_items(const std::vector<SyntheticVideo>& corpus) const;
    SequenceInput qa_item(const SyntheticVideo& video, QaKind kind) const;

  private:
    EventVocab vocab_;
    Tokenizer tok_;
    TrainConfig cfg_;
    DeterministicJudge judge_;

    StageResult train_supervised(ModelState& model, std::vector<SequenceInput> items,
                                 int total_steps, double lr, int batch_size, uint64_t seed,
                                 bool random_pos_offset) const;
    std::vector<PreferenceItem> to_preference_items(const std::vector<PreferencePair>& pairs,
                                                    const std::vector<SyntheticVideo>& corpus) const;
    EvalSummary run_eval(const ModelState& model,
                         const std::vector<SyntheticVideo>& corpus) const;
};

std::string round_log_to_json(const RoundLog& log);

// ---- pipeline runner ---------------------------------------------------------

struct PipelineOptions {
    std::string out_dir;
    std::string train_corpus_path;
    std::string eval_corpus_path;
    std::string threshold_schedule_path;  // empty -> built-in schedule
    std::vector<std::string> stages = {"pretrain", "align", "sft", "mrdpo", "rebirth", "gdpo"};
    std::string resume_checkpoint;  // empty -> fresh or stage checkpoints
    bool force = false;
    ModelConfig model;  // vocab-dependent fields filled by the runner
    TrainConfig train;
};

// Executes the staged pipeline with per-stage checkpoints under
// out_dir/checkpoints and logs under out_dir/logs. A stage whose
// checkpoint already exists is loaded instead of re-run (unless force).
// Returns the final model checkpoint path.
std::string run_pipeline(const PipelineOptions& opts);

}  // namespace avcap
