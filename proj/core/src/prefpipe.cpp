#include "avcap/prefpipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "avcap/parallel.hpp"

#include "httplib.h"
#include "json.hpp"

namespace avcap {

std::string task_name(TaskKind task) {
    return task == TaskKind::global_caption ? "global" : "local";
}

TaskKind task_from_name(const std::string& name) {
    if (name == "global") return TaskKind::global_caption;
    if (name == "local") return TaskKind::local_caption;
    throw DataError("unknown task kind: " + name);
}

EvalReport verdict_report(const JudgeVerdict& v, const std::string& caption,
                          const std::vector<std::string>& patterns,
                          double repetition_threshold) {
    EvalReport r;
    r.miss_rate = v.miss;
    r.hall_rate = v.hall;
    r.total_rate = v.miss + v.hall;
    r.repetition_rate = v.repetition;
    r.unnatural = is_unnatural(caption, patterns, repetition_threshold);
    return r;
}

JudgeVerdict DeterministicJudge::judge(const std::string& caption, const SyntheticVideo& video,
                                       TaskKind task,
                                       const std::optional<Interval>& interval) const {
    if (video.atomic_events.empty()) {
        throw DomainError("judge: video " + video.id + " has no atomic events");
    }
    std::set<int> gt;
    if (task == TaskKind::local_caption) {
        if (!interval.has_value()) throw ContractError("judge: local task without interval");
        for (const auto& e : filter_local_events(video.atomic_events, interval->t0, interval->t1))
            gt.insert(e.id);
    } else {
        for (const auto& e : video.atomic_events) gt.insert(e.id);
    }
    if (gt.empty()) {
        throw DomainError("judge: no ground-truth events in the requested interval");
    }
    const ParsedCaption parsed = parse_caption(caption, vocab_);
    auto [miss, hall] = miss_hall(parsed.event_ids, gt);
    // each distinct unparseable phrase is an invented event
    hall += static_cast<double>(parsed.malformed_phrases) / static_cast<double>(gt.size());

    JudgeVerdict v;
    v.task = task;
    v.interval = interval;
    v.miss = miss;
    v.hall = hall;
    v.total = miss + hall;
    v.repetition = repetition_rate(caption);
    return v;
}

HttpJudge::HttpJudge(std::string host, int port, std::string path)
    : host_(std::move(host)), port_(port), path_(std::move(path)) {}

JudgeVerdict HttpJudge::judge(const std::string& caption, const SyntheticVideo& video,
                              TaskKind task, const std::optional<Interval>& interval) const {
    nlohmann::json req;
    req["caption"] = caption;
    req["task"] = task_name(task);
    if (interval.has_value()) req["interval"] = {interval->t0, interval->t1};
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : video.atomic_events) {
        events.push_back({{"id", e.id},
                          {"phrase", e.phrase},
                          {"start", e.start.value_or(0.0)},
                          {"end", e.end.value_or(0.0)}});
    }
    req["events"] = std::move(events);

    httplib::Client client(host_, port_);
    const auto res = client.Post(path_, req.dump(), "application/json");
    if (!res || res->status != 200) {
        throw DataError("judge endpoint " + host_ + ":" + std::to_string(port_) +
                        " failed" + (res ? " with status " + std::to_string(res->status) : ""));
    }
    try {
        const auto body = nlohmann::json::parse(res->body);
        JudgeVerdict v;
        v.task = task;
        v.interval = interval;
        v.miss = body.at("miss").get<double>();
        v.hall = body.at("hall").get<double>();
        v.total = v.miss + v.hall;
        v.repetition = body.at("repetition").get<double>();
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("judge endpoint returned malformed JSON: ") + e.what());
    }
}

JudgeVerdict judge_median(const CaptionJudge& judge, const std::string& caption,
                          const SyntheticVideo& video, TaskKind task,
                          const std::optional<Interval>& interval, int runs) {
    if (runs <= 0) throw DomainError("judge_median: runs must be positive");
    std::vector<double> miss, hall, rep;
    for (int i = 0; i < runs; ++i) {
        const JudgeVerdict v = judge.judge(caption, video, task, interval);
        miss.push_back(v.miss);
        hall.push_back(v.hall);
        rep.push_back(v.repetition);
    }
    JudgeVerdict out;
    out.task = task;
    out.interval = interval;
    out.miss = median(miss);
    out.hall = median(hall);
    out.repetition = median(rep);
    out.total = out.miss + out.hall;
    return out;
}

std::vector<RoundThresholds> default_threshold_schedule() {
    return {
        {0.05, 0.01, 0.20, 0.01},
        {0.20, -0.01, 0.45, 0.00},
        {0.20, -0.01, 0.45, 0.00},
        {0.20, -0.01, 0.45, 0.00},
        {0.20, -0.01, 0.45, 0.00},
        {0.25, -0.01, 0.45, 0.00},
        {0.30, -0.01, 0.45, 0.00},
    };
}

std::vector<RoundThresholds> read_threshold_schedule(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open threshold schedule: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid threshold schedule JSON in " + path + ": " + e.what());
    }
    if (!j.is_array() || j.empty()) throw DataError("threshold schedule must be a non-empty array");
    std::vector<RoundThresholds> out;
    for (const auto& row : j) {
        try {
            RoundThresholds t;
            t.err_gap_global = row.at("err_gap_global").get<double>();
            t.rep_gap_global = row.at("rep_gap_global").get<double>();
            t.err_gap_local = row.at("err_gap_local").get<double>();
            t.rep_gap_local = row.at("rep_gap_local").get<double>();
            out.push_back(t);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed threshold row in " + path + ": " + e.what());
        }
    }
    return out;
}

void write_threshold_schedule(const std::string& path,
                              const std::vector<RoundThresholds>& schedule) {
    nlohmann::json j = nlohmann::json::array();
    int round = 1;
    for (const auto& t : schedule) {
        j.push_back({{"round", round++},
                     {"err_gap_global", t.err_gap_global},
                     {"rep_gap_global", t.rep_gap_global},
                     {"err_gap_local", t.err_gap_local},
                     {"rep_gap_local", t.rep_gap_local}});
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot open threshold schedule for writing: " + path);
    out << j.dump(2) << "\n";
}

std::vector<PreferencePair> select_pairs(const std::vector<ScoredPair>& scored,
                                         const RoundThresholds& thresholds) {
    std::vector<PreferencePair> out;
    for (const auto& s : scored) {
        if (s.degenerate()) continue;
        const bool a_better = s.verdict_a.total < s.verdict_b.total;
        const bool b_better = s.verdict_b.total < s.verdict_a.total;
        if (!a_better && !b_better) continue;  // no strict orientation
        const auto& cv = a_better ? s.verdict_a : s.verdict_b;
        const auto& rv = a_better ? s.verdict_b : s.verdict_a;
        const double err_gap = rv.total - cv.total;
        const double rep_gap = rv.repetition - cv.repetition;
        const bool global = s.task == TaskKind::global_caption;
        const double min_err = global ? thresholds.err_gap_global : thresholds.err_gap_local;
        const double min_rep = global ? thresholds.rep_gap_global : thresholds.rep_gap_local;
        if (err_gap >= min_err && rep_gap >= min_rep) {
            PreferencePair p;
            p.video_id = s.video_id;
            p.task = s.task;
            p.interval = s.interval;
            p.chosen = a_better ? s.caption_a : s.caption_b;
            p.rejected = a_better ? s.caption_b : s.caption_a;
            p.chosen_verdict = cv;
            p.rejected_verdict = rv;
            out.push_back(std::move(p));
        }
    }
    return out;
}

Interval sample_local_interval(const SyntheticVideo& video, Rng& rng) {
    const int total = std::max(2, static_cast<int>(std::floor(video.duration)));
    int min_len = static_cast<int>(std::ceil(0.2 * total));
    int max_len = static_cast<int>(std::floor(0.6 * total));
    min_len = std::max(1, min_len);
    max_len = std::max(min_len, max_len);
    for (int attempt = 0; attempt < 64; ++attempt) {
        const int len = static_cast<int>(rng.uniform_int(min_len, max_len));
        const int start = static_cast<int>(rng.uniform_int(0, total - len));
        Interval iv{static_cast<double>(start), static_cast<double>(start + len)};
        if (!filter_local_events(video.atomic_events, iv.t0, iv.t1).empty()) return iv;
    }
    // fall back to a window around a random event
    const auto& events = video.atomic_events;
    const auto& e = events[static_cast<size_t>(rng.uniform_int(
        0, static_cast<int64_t>(events.size()) - 1))];
    const int start = std::max(0, static_cast<int>(std::floor(e.start.value())) - 1);
    const int end = std::min(total, std::max(start + 1, static_cast<int>(std::ceil(e.end.value()))));
    return {static_cast<double>(start), static_cast<double>(end)};
}

std::pair<std::string, std::string> sample_pair(const ModelState& model, const Tokenizer& tok,
                                                const EventVocab& vocab,
                                                const SyntheticVideo& video, TaskKind task,
                                                const std::optional<Interval>& interval,
                                                double temperature, uint64_t seed_a,
                                                uint64_t seed_b) {
    if (seed_a == seed_b) throw DomainError("sample_pair: seeds must be distinct");
    const Tensor media = encode_media(model, visual_features(video, vocab, model.config),
                                      audio_features(video, vocab, model.config));
    std::vector<int> prompt;
    if (task == TaskKind::local_caption) {
        if (!interval.has_value()) throw ContractError("sample_pair: local task without interval");
        prompt = tok.local_caption_prompt(static_cast<int>(interval->t0),
                                          static_cast<int>(interval->t1));
    } else {
        prompt = tok.global_caption_prompt();
    }
    GenerateOptions opts;
    opts.temperature = temperature;
    opts.eos_id = tok.eos();
    opts.seed = seed_a;
    const std::string a = tok.decode(generate(model, media, prompt, opts));
    opts.seed = seed_b;
    const std::string b = tok.decode(generate(model, media, prompt, opts));
    return {a, b};
}

RoundDataset build_round_dataset(const ModelState& model, const Tokenizer& tok,
                                 const EventVocab& vocab,
                                 const std::vector<SyntheticVideo>& corpus,
                                 const RoundThresholds& thresholds, const PairgenConfig& cfg,
                                 const CaptionJudge& judge) {
    if (corpus.empty()) throw DomainError("build_round_dataset: empty corpus");
    const int n = static_cast<int>(corpus.size());
    std::vector<ScoredPair> scored(static_cast<size_t>(2 * n));
    const uint64_t round_tag = static_cast<uint64_t>(cfg.round_index);

    parallel_for(n, cfg.threads, [&](int vi) {
        const auto& video = corpus[static_cast<size_t>(vi)];
        const uint64_t vid_tag = (round_tag << 32) | static_cast<uint64_t>(vi);
        for (int t = 0; t < 2; ++t) {
            const TaskKind task = t == 0 ? TaskKind::global_caption : TaskKind::local_caption;
            std::optional<Interval> interval;
            if (task == TaskKind::local_caption) {
                Rng rng(derive_seed(cfg.seed, "pair-interval", vid_tag));
                interval = sample_local_interval(video, rng);
            }
            const uint64_t sa = derive_seed(cfg.seed, "pair-sample", vid_tag, 2 * t);
            const uint64_t sb = derive_seed(cfg.seed, "pair-sample", vid_tag, 2 * t + 1);
            auto [ca, cb] = sample_pair(model, tok, vocab, video, task, interval,
                                        cfg.temperature, sa, sb);
            ScoredPair sp;
            sp.video_id = video.id;
            sp.task = task;
            sp.interval = interval;
            sp.caption_a = std::move(ca);
            sp.caption_b = std::move(cb);
            sp.verdict_a = judge.judge(sp.caption_a, video, task, interval);
            sp.verdict_b = judge.judge(sp.caption_b, video, task, interval);
            scored[static_cast<size_t>(2 * vi + t)] = std::move(sp);
        }
    });

    RoundDataset out;
    out.sampled = static_cast<int>(scored.size());
    for (const auto& s : scored)
        if (s.degenerate()) ++out.degenerate;
    out.pairs = select_pairs(scored, thresholds);
    for (const auto& p : out.pairs) {
        if (p.task == TaskKind::global_caption)
            ++out.selected_global;
        else
            ++out.selected_local;
    }
    Rng shuffle_rng(derive_seed(cfg.seed, "dataset-shuffle", round_tag));
    shuffle_rng.shuffle(out.pairs);
    return out;
}

namespace {

nlohmann::json verdict_json(const JudgeVerdict& v) {
    return {{"miss", v.miss}, {"hall", v.hall}, {"total", v.total}, {"repetition", v.repetition}};
}

JudgeVerdict verdict_from_json(const nlohmann::json& j, TaskKind task,
                               const std::optional<Interval>& interval) {
    JudgeVerdict v;
    v.task = task;
    v.interval = interval;
    v.miss = j.at("miss").get<double>();
    v.hall = j.at("hall").get<double>();
    v.total = j.at("total").get<double>();
    v.repetition = j.at("repetition").get<double>();
    return v;
}

}  // namespace

void write_pairs_jsonl(const std::string& path, const std::vector<PreferencePair>& pairs) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open pair dataset for writing: " + path);
    for (const auto& p : pairs) {
        nlohmann::json j;
        j["video_id"] = p.video_id;
        j["task"] = task_name(p.task);
        if (p.interval.has_value()) j["interval"] = {p.interval->t0, p.interval->t1};
        j["chosen"] = p.chosen;
        j["rejected"] = p.rejected;
        j["verdicts"] = {{"chosen", verdict_json(p.chosen_verdict)},
                         {"rejected", verdict_json(p.rejected_verdict)}};
        out << j.dump() << "\n";
    }
}

std::vector<PreferencePair> read_pairs_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open pair dataset: " + path);
    std::vector<PreferencePair> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            PreferencePair p;
            p.video_id = j.at("video_id").get<std::string>();
            p.task = task_from_name(j.at("task").get<std::string>());
            if (j.contains("interval")) {
                p.interval = Interval{j["interval"][0].get<double>(), j["interval"][1].get<double>()};
            }
            p.chosen = j.at("chosen").get<std::string>();
            p.rejected = j.at("rejected").get<std::string>();
            p.chosen_verdict = verdict_from_json(j.at("verdicts").at("chosen"), p.task, p.interval);
            p.rejected_verdict =
                verdict_from_json(j.at("verdicts").at("rejected"), p.task, p.interval);
            pairs.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed pair: " + e.what());
        }
    }
    return pairs;
}

}  // namespace avcap
