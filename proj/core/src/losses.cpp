#include "avcap/losses.hpp"

namespace avcap {

namespace {

void require_frozen(const ModelState& reference) {
    for (const auto& [name, t] : reference.named_params()) {
        if (t.requires_grad()) {
            throw ContractError("reference model must be frozen, but '" + name +
                                "' is trainable");
        }
    }
}

Tensor mean_of_scalars(const std::vector<Tensor>& scalars) {
    if (scalars.size() == 1) return scalars.front();
    return mean(concat(scalars, 0));
}

}  // namespace

Tensor dpo_pair_loss(const Tensor& policy_chosen, const Tensor& policy_rejected,
                     const Tensor& ref_chosen, const Tensor& ref_rejected, double beta) {
    if (beta <= 0.0) throw DomainError("dpo: beta must be positive");
    const Tensor margin = sub(sub(policy_chosen, ref_chosen), sub(policy_rejected, ref_rejected));
    return scale(logsigmoid(scale(margin, beta)), -1.0);
}

Tensor dpo_loss(const ModelState& policy, const ModelState& reference,
                const PreferenceBatch& batch) {
    if (batch.beta <= 0.0) throw DomainError("dpo_loss: beta must be positive");
    if (batch.items.empty()) throw DomainError("dpo_loss: empty batch");
    require_frozen(reference);
    std::vector<Tensor> losses;
    losses.reserve(batch.items.size());
    for (const auto& item : batch.items) {
        if (item.chosen == item.rejected) {
            throw DomainError("dpo_loss: chosen and rejected sequences are identical");
        }
        const Tensor media_p = encode_media(policy, item.frames, item.audio);
        const Tensor media_r = encode_media(reference, item.frames, item.audio);
        const Tensor lp_w = sequence_logprob(policy, media_p, item.prompt, item.chosen);
        const Tensor lp_l = sequence_logprob(policy, media_p, item.prompt, item.rejected);
        const Tensor lr_w = sequence_logprob(reference, media_r, item.prompt, item.chosen);
        const Tensor lr_l = sequence_logprob(reference, media_r, item.prompt, item.rejected);
        losses.push_back(dpo_pair_loss(lp_w, lp_l, lr_w, lr_l, batch.beta));
    }
    return mean_of_scalars(losses);
}

Tensor ground_truth_nll(const ModelState& policy, const std::vector<SequenceInput>& items) {
    if (items.empty()) throw DomainError("ground_truth_nll: no items");
    std::vector<Tensor> nlls;
    nlls.reserve(items.size());
    for (const auto& item : items) {
        if (item.targets.empty()) throw DomainError("ground_truth_nll: empty target sequence");
        const Tensor media = encode_media(policy, item.frames, item.audio);
        nlls.push_back(scale(sequence_logprob(policy, media, item.prompt, item.targets), -1.0));
    }
    return mean_of_scalars(nlls);
}

Tensor gdpo_loss(const ModelState& policy, const ModelState& reference, const GuidedBatch& batch) {
    if (batch.lambda < 0.0) throw DomainError("gdpo_loss: lambda must be non-negative");
    const Tensor dpo = dpo_loss(policy, reference, batch.pref);
    if (batch.lambda == 0.0) return dpo;
    return add(dpo, scale(ground_truth_nll(policy, batch.ground_truth), batch.lambda));
}

Tensor cdpo_loss(const ModelState& policy, const ModelState& reference,
                 const PreferenceBatch& batch, double lambda) {
    if (lambda < 0.0) throw DomainError("cdpo_loss: lambda must be non-negative");
    const Tensor dpo = dpo_loss(policy, reference, batch);
    if (lambda == 0.0) return dpo;
    std::vector<SequenceInput> chosen_items;
    chosen_items.reserve(batch.items.size());
    for (const auto& item : batch.items) {
        SequenceInput s;
        s.frames = item.frames;
        s.audio = item.audio;
        s.prompt = item.prompt;
        s.targets = item.chosen;
        chosen_items.push_back(std::move(s));
    }
    return add(dpo, scale(ground_truth_nll(policy, chosen_items), lambda));
}

Tensor sft_loss(const ModelState& policy, const SequenceInput& item) {
    if (item.targets.empty()) throw DomainError("sft_loss: empty target sequence");
    const Tensor media = encode_media(policy, item.frames, item.audio);
    const Tensor total = sequence_logprob(policy, media, item.prompt, item.targets, item.pos_offset);
    return scale(total, -1.0 / static_cast<double>(item.targets.size()));
}

Tensor sft_loss(const ModelState& policy, const std::vector<SequenceInput>& items) {
    if (items.empty()) throw DomainError("sft_loss: empty batch");
    std::vector<Tensor> losses;
    losses.reserve(items.size());
    for (const auto& item : items) losses.push_back(sft_loss(policy, item));
    return mean_of_scalars(losses);
}

}  // namespace avcap
