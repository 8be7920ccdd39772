#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "avcap/errors.hpp"

namespace avcap {

// Minimal factual unit of a caption; the basis of miss/hallucination scoring.
struct AtomicEvent {
    int id = -1;
    std::string phrase;
    std::optional<double> start;  // seconds
    std::optional<double> end;
};

// Per-caption quality scores. total_rate is always miss + hall exactly.
struct EvalReport {
    double repetition_rate = 0.0;
    double miss_rate = 0.0;
    double hall_rate = 0.0;
    double total_rate = 0.0;
    bool unnatural = false;
};

struct CorpusAggregate {
    double repetition_rate = 0.0;
    double miss_rate = 0.0;
    double hall_rate = 0.0;
    double total_rate = 0.0;
    double unnatural_rate = 0.0;
    int count = 0;
};

// One evaluated caption, labeled with its provenance for report emission.
struct ScoredCaption {
    std::string video_id;
    std::string task;  // "global" or "local"
    double interval_start = 0.0;
    double interval_end = 0.0;
    std::string caption;
    EvalReport report;
};

// Splits on {. , ; : ! ?} and newline; lowercases, trims, drops empties.
std::vector<std::string> split_phrases(const std::string& text);

// Fraction of the text's whitespace-separated words that belong to
// occurrences of a phrase beyond its first occurrence. Empty text -> 0.
double repetition_rate(const std::string& text);

// miss = |gt \ caption| / |gt|, hall = |caption \ gt| / |gt|.
// The denominator is the ground-truth event count in both cases, so hall
// can exceed 1 when a caption invents more events than gt contains.
std::pair<double, double> miss_hall(const std::set<int>& caption_events,
                                    const std::set<int>& gt_events);

// Events whose [start,end] intersects [t0,t1]; touching endpoints count.
std::vector<AtomicEvent> filter_local_events(const std::vector<AtomicEvent>& events,
                                             double t0, double t1);

bool is_unnatural(const std::string& caption, const std::vector<std::string>& patterns,
                  double repetition_threshold = 0.5);

// Fraction of captions containing any literal pattern or repeating above
// the threshold.
double unnatural_rate(const std::vector<std::string>& captions,
                      const std::vector<std::string>& patterns,
                      double repetition_threshold = 0.5);

std::vector<std::string> default_unnatural_patterns();

double median(std::vector<double> values);

// Per-field median over repeated judge runs of one caption; supports any
// stochastic judge. total is recomputed as miss + hall so the report
// invariant holds; unnatural is the majority vote.
EvalReport median_report(const std::vector<EvalReport>& runs);

CorpusAggregate aggregate(const std::vector<EvalReport>& reports);

// JSON report: per-caption records plus per-task corpus aggregates, with
// optional extra top-level aggregate fields.
std::string eval_report_json(const std::vector<ScoredCaption>& rows,
                             const std::map<std::string, double>& extra = {});

// Plain-text summary table (Rep / Miss / Hall / Total for each task pool).
std::string eval_report_table(const std::vector<ScoredCaption>& rows);

}  // namespace avcap
