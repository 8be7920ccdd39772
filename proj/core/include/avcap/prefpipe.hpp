#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "avcap/corpus.hpp"
#include "avcap/metrics.hpp"
#include "avcap/model.hpp"

namespace avcap {

enum class TaskKind { global_caption, local_caption };

std::string task_name(TaskKind task);
TaskKind task_from_name(const std::string& name);

struct Interval {
    double t0 = 0.0;
    double t1 = 0.0;
};

struct JudgeVerdict {
    TaskKind task = TaskKind::global_caption;
    std::optional<Interval> interval;
    double miss = 0.0;
    double hall = 0.0;
    double total = 0.0;  // always miss + hall
    double repetition = 0.0;
};

EvalReport verdict_report(const JudgeVerdict& v, const std::string& caption,
                          const std::vector<std::string>& unnatural_patterns,
                          double repetition_threshold = 0.5);

// Caption judging seam: the deterministic judge is the default; any
// stochastic or remote judge can be plugged in behind this interface.
class CaptionJudge {
  public:
    virtual ~CaptionJudge() = default;
    virtual JudgeVerdict judge(const std::string& caption, const SyntheticVideo& video,
                               TaskKind task,
                               const std::optional<Interval>& interval) const = 0;
};

// Exact-match judge over the closed event vocabulary: parses the caption
// into event ids, scores misses/hallucinations against the (optionally
// interval-filtered) ground-truth events, and measures repetition.
// Unmatched phrases count as invented events, one per distinct phrase.
class DeterministicJudge : public CaptionJudge {
  public:
    explicit DeterministicJudge(EventVocab vocab) : vocab_(std::move(vocab)) {}
    JudgeVerdict judge(const std::string& caption, const SyntheticVideo& video, TaskKind task,
                       const std::optional<Interval>& interval) const override;

  private:
    EventVocab vocab_;
};

// Remote judge speaking the documented JSON protocol: POST {caption, task,
// interval?, events:[{id,phrase,start,end}]} to `path`, expecting
// {miss, hall, repetition} back.
class HttpJudge : public CaptionJudge {
  public:
    HttpJudge(std::string host, int port, std::string path = "/judge");
    JudgeVerdict judge(const std::string& caption, const SyntheticVideo& video, TaskKind task,
                       const std::optional<Interval>& interval) const override;

  private:
    std::string host_;
    int port_;
    std::string path_;
};

// Median aggregation over repeated judge runs, for stochastic judges; a
// deterministic judge passes through unchanged.
JudgeVerdict judge_median(const CaptionJudge& judge, const std::string& caption,
                          const SyntheticVideo& video, TaskKind task,
                          const std::optional<Interval>& interval, int runs = 7);

// Per-round pair-selection thresholds; negative values admit pairs where
// the chosen sample is slightly worse on that metric.
struct RoundThresholds {
    double err_gap_global = 0.0;
    double rep_gap_global = 0.0;
    double err_gap_local = 0.0;
    double rep_gap_local = 0.0;
};

std::vector<RoundThresholds> default_threshold_schedule();
std::vector<RoundThresholds> read_threshold_schedule(const std::string& path);
void write_threshold_schedule(const std::string& path,
                              const std::vector<RoundThresholds>& schedule);

// A sampled caption pair with both verdicts, before selection.
struct ScoredPair {
    std::string video_id;
    TaskKind task = TaskKind::global_caption;
    std::optional<Interval> interval;
    std::string caption_a;
    std::string caption_b;
    JudgeVerdict verdict_a;
    JudgeVerdict verdict_b;

    bool degenerate() const { return caption_a == caption_b; }
};

struct PreferencePair {
    std::string video_id;
    TaskKind task = TaskKind::global_caption;
    std::optional<Interval> interval;
    std::string chosen;
    std::string rejected;
    JudgeVerdict chosen_verdict;
    JudgeVerdict rejected_verdict;
};

// Orients each pair toward lower total error and keeps it when the error
// and repetition gaps clear the task's thresholds. Degenerate and
// equal-total pairs are dropped.
std::vector<PreferencePair> select_pairs(const std::vector<ScoredPair>& scored,
                                         const RoundThresholds& thresholds);

// Uniform integer sub-interval covering at least one event; length is
// 20%-60% of the duration.
Interval sample_local_interval(const SyntheticVideo& video, Rng& rng);

// Two independent samples from the model for one video/task.
std::pair<std::string, std::string> sample_pair(const ModelState& model, const Tokenizer& tok,
                                                const EventVocab& vocab,
                                                const SyntheticVideo& video, TaskKind task,
                                                const std::optional<Interval>& interval,
                                                double temperature, uint64_t seed_a,
                                                uint64_t seed_b);

struct PairgenConfig {
    int round_index = 1;
    uint64_t seed = 0;
    double temperature = 1.0;
    int threads = 2;
};

struct RoundDataset {
    std::vector<PreferencePair> pairs;
    int sampled = 0;
    int degenerate = 0;
    int selected_global = 0;
    int selected_local = 0;
};

// One global and one local pair per video, judged, threshold-filtered,
// then deterministically shuffled.
RoundDataset build_round_dataset(const ModelState& model, const Tokenizer& tok,
                                 const EventVocab& vocab,
                                 const std::vector<SyntheticVideo>& corpus,
                                 const RoundThresholds& thresholds, const PairgenConfig& cfg,
                                 const CaptionJudge& judge);

void write_pairs_jsonl(const std::string& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_pairs_jsonl(const std::string& path);

}  // namespace avcap
