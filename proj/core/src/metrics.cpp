#include "avcap/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace avcap {

namespace {

bool is_phrase_separator(char c) {
    switch (c) {
        case '.':
        case ',':
        case ';':
        case ':':
        case '!':
        case '?':
        case '\n':
            return true;
        default:
            return false;
    }
}

std::string lower_trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    std::string out;
    out.reserve(e - b);
    for (size_t i = b; i < e; ++i)
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i]))));
    return out;
}

int word_count(const std::string& s) {
    int n = 0;
    bool in_word = false;
    for (const char c : s) {
        const bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!ws && !in_word) ++n;
        in_word = !ws;
    }
    return n;
}

}  // namespace

std::vector<std::string> split_phrases(const std::string& text) {
    std::vector<std::string> phrases;
    std::string current;
    for (const char c : text) {
        if (is_phrase_separator(c)) {
            const std::string p = lower_trim(current);
            if (!p.empty()) phrases.push_back(p);
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    const std::string p = lower_trim(current);
    if (!p.empty()) phrases.push_back(p);
    return phrases;
}

double repetition_rate(const std::string& text) {
    const int total_words = word_count(text);
    if (total_words == 0) return 0.0;
    std::unordered_map<std::string, int> seen;
    int repeated_words = 0;
    for (const auto& phrase : split_phrases(text)) {
        const int occurrence = seen[phrase]++;
        if (occurrence > 0) repeated_words += word_count(phrase);
    }
    return static_cast<double>(repeated_words) / static_cast<double>(total_words);
}

std::pair<double, double> miss_hall(const std::set<int>& caption_events,
                                    const std::set<int>& gt_events) {
    if (gt_events.empty()) throw DomainError("miss_hall: ground-truth event set is empty");
    int missed = 0;
    for (const int e : gt_events)
        if (!caption_events.count(e)) ++missed;
    int hallucinated = 0;
    for (const int e : caption_events)
        if (!gt_events.count(e)) ++hallucinated;
    const double denom = static_cast<double>(gt_events.size());
    return {static_cast<double>(missed) / denom, static_cast<double>(hallucinated) / denom};
}

std::vector<AtomicEvent> filter_local_events(const std::vector<AtomicEvent>& events,
                                             double t0, double t1) {
    if (!(t0 < t1)) throw DomainError("filter_local_events: need t0 < t1");
    std::vector<AtomicEvent> out;
    for (const auto& e : events) {
        if (!e.start.has_value() || !e.end.has_value()) {
            throw ContractError("filter_local_events: event " + std::to_string(e.id) +
                                " is missing timestamps");
        }
        if (*e.start <= t1 && *e.end >= t0) out.push_back(e);
    }
    return out;
}

bool is_unnatural(const std::string& caption, const std::vector<std::string>& patterns,
                  double repetition_threshold) {
    if (patterns.empty()) throw DomainError("is_unnatural: pattern list is empty");
    for (const auto& p : patterns) {
        if (!p.empty() && caption.find(p) != std::string::npos) return true;
    }
    return repetition_rate(caption) > repetition_threshold;
}

double unnatural_rate(const std::vector<std::string>& captions,
                      const std::vector<std::string>& patterns, double repetition_threshold) {
    if (patterns.empty()) throw DomainError("unnatural_rate: pattern list is empty");
    if (captions.empty()) return 0.0;
    int flagged = 0;
    for (const auto& c : captions)
        if (is_unnatural(c, patterns, repetition_threshold)) ++flagged;
    return static_cast<double>(flagged) / static_cast<double>(captions.size());
}

std::vector<std::string> default_unnatural_patterns() {
    return {"#Video Description", "#Audio:", "#video", "#audio", "###"};
}

double median(std::vector<double> values) {
    if (values.empty()) throw DomainError("median: empty input");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

EvalReport median_report(const std::vector<EvalReport>& runs) {
    if (runs.empty()) throw DomainError("median_report: no judge runs");
    std::vector<double> rep, miss, hall;
    int unnatural_votes = 0;
    for (const auto& r : runs) {
        rep.push_back(r.repetition_rate);
        miss.push_back(r.miss_rate);
        hall.push_back(r.hall_rate);
        if (r.unnatural) ++unnatural_votes;
    }
    EvalReport out;
    out.repetition_rate = median(rep);
    out.miss_rate = median(miss);
    out.hall_rate = median(hall);
    out.total_rate = out.miss_rate + out.hall_rate;
    out.unnatural = 2 * unnatural_votes > static_cast<int>(runs.size());
    return out;
}

CorpusAggregate aggregate(const std::vector<EvalReport>& reports) {
    CorpusAggregate agg;
    agg.count = static_cast<int>(reports.size());
    if (reports.empty()) return agg;
    for (const auto& r : reports) {
        agg.repetition_rate += r.repetition_rate;
        agg.miss_rate += r.miss_rate;
        agg.hall_rate += r.hall_rate;
        agg.total_rate += r.total_rate;
        if (r.unnatural) agg.unnatural_rate += 1.0;
    }
    const double inv = 1.0 / static_cast<double>(agg.count);
    agg.repetition_rate *= inv;
    agg.miss_rate *= inv;
    agg.hall_rate *= inv;
    agg.total_rate *= inv;
    agg.unnatural_rate *= inv;
    return agg;
}

namespace {

nlohmann::json aggregate_json(const CorpusAggregate& a) {
    return {{"repetition_rate", a.repetition_rate}, {"miss_rate", a.miss_rate},
            {"hall_rate", a.hall_rate},             {"total_rate", a.total_rate},
            {"unnatural_rate", a.unnatural_rate},   {"count", a.count}};
}

std::vector<EvalReport> reports_for_task(const std::vector<ScoredCaption>& rows,
                                         const std::string& task) {
    std::vector<EvalReport> out;
    for (const auto& r : rows)
        if (r.task == task) out.push_back(r.report);
    return out;
}

}  // namespace

std::string eval_report_json(const std::vector<ScoredCaption>& rows,
                             const std::map<std::string, double>& extra) {
    nlohmann::json j;
    j["captions"] = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json rec = {
            {"video_id", r.video_id},
            {"task", r.task},
            {"caption", r.caption},
            {"repetition_rate", r.report.repetition_rate},
            {"miss_rate", r.report.miss_rate},
            {"hall_rate", r.report.hall_rate},
            {"total_rate", r.report.total_rate},
            {"unnatural", r.report.unnatural},
        };
        if (r.task == "local") {
            rec["interval"] = {r.interval_start, r.interval_end};
        }
        j["captions"].push_back(std::move(rec));
    }
    j["aggregate"]["global"] = aggregate_json(aggregate(reports_for_task(rows, "global")));
    j["aggregate"]["local"] = aggregate_json(aggregate(reports_for_task(rows, "local")));
    for (const auto& [k, v] : extra) j["aggregate"][k] = v;
    return j.dump(2);
}

std::string eval_report_table(const std::vector<ScoredCaption>& rows) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s %8s %8s %8s %8s %8s %6s\n", "Task", "Rep", "Miss",
                  "Hall", "Total", "Unnat", "N");
    os << line;
    for (const std::string task : {"global", "local"}) {
        const auto agg = aggregate(reports_for_task(rows, task));
        if (agg.count == 0) continue;
        std::snprintf(line, sizeof(line), "%-8s %7.1f%% %7.1f%% %7.1f%% %7.1f%% %7.1f%% %6d\n",
                      task.c_str(), 100.0 * agg.repetition_rate, 100.0 * agg.miss_rate,
                      100.0 * agg.hall_rate, 100.0 * agg.total_rate, 100.0 * agg.unnatural_rate,
                      agg.count);
        os << line;
    }
    return os.str();
}

}  // namespace avcap
