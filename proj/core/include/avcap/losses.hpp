#pragma once

#include <optional>
#include <vector>

#include "avcap/model.hpp"

namespace avcap {

// One conditioning input plus a teacher-forced target sequence (eos
// included). Media features are stored raw so policy and reference each
// encode them through their own aligners.
struct SequenceInput {
    std::optional<FrameFeatures> frames;
    std::optional<AudioSegments> audio;
    std::vector<int> prompt;
    std::vector<int> targets;
    int pos_offset = 0;  // positional-embedding window shift
};

struct PreferenceItem {
    std::optional<FrameFeatures> frames;
    std::optional<AudioSegments> audio;
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
};

struct PreferenceBatch {
    std::vector<PreferenceItem> items;
    double beta = 0.1;
};

struct GuidedBatch {
    PreferenceBatch pref;
    std::vector<SequenceInput> ground_truth;
    double lambda = 0.1;
};

// Core pairwise term, exposed for direct gradient checks:
// -log sigmoid(beta * ((lp_w - lr_w) - (lp_l - lr_l))).
Tensor dpo_pair_loss(const Tensor& policy_chosen, const Tensor& policy_rejected,
                     const Tensor& ref_chosen, const Tensor& ref_rejected, double beta);

// Mean pairwise loss over the batch. Sequence log-probs are sums, not
// length-normalized. The reference must be frozen; gradients flow into the
// policy only.
Tensor dpo_loss(const ModelState& policy, const ModelState& reference,
                const PreferenceBatch& batch);

// Mean over items of -log pi(y|x), sums over tokens inside each sequence.
Tensor ground_truth_nll(const ModelState& policy, const std::vector<SequenceInput>& items);

// dpo + lambda * ground_truth_nll; lambda = 0 reproduces dpo exactly. The
// regularizer maximizes ground-truth likelihood (cross-entropy reading).
Tensor gdpo_loss(const ModelState& policy, const ModelState& reference, const GuidedBatch& batch);

// dpo + lambda * mean NLL of the chosen sample under the policy.
Tensor cdpo_loss(const ModelState& policy, const ModelState& reference,
                 const PreferenceBatch& batch, double lambda);

// Mean per-token negative log-likelihood under teacher forcing.
Tensor sft_loss(const ModelState& policy, const SequenceInput& item);
Tensor sft_loss(const ModelState& policy, const std::vector<SequenceInput>& items);

}  // namespace avcap
