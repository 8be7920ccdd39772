#include "avcap/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace avcap {

namespace {

const std::vector<std::string> kColors = {"red",    "blue", "green", "yellow", "purple",
                                          "orange", "pink", "gray",  "black",  "white"};
const std::vector<std::string> kShapes = {"square",  "circle", "triangle", "star",  "diamond",
                                          "hexagon", "ring",   "cross",    "arrow", "spiral"};
const std::vector<std::string> kActions = {"appears", "spins",  "blinks",  "grows",
                                           "shrinks", "slides", "flashes", "rotates"};
const std::vector<std::string> kSounds = {"bell",  "drum",   "horn", "whistle", "siren",
                                          "chime", "buzzer", "gong", "piano",   "violin"};
const std::vector<std::string> kVerbs = {"rings", "beats", "blares", "sounds",
                                         "echoes", "hums",  "chirps", "plays"};

}  // namespace

EventVocab EventVocab::standard() {
    EventVocab v;
    v.colors_ = kColors;
    v.shapes_ = kShapes;
    v.actions_ = kActions;
    v.sounds_ = kSounds;
    v.verbs_ = kVerbs;
    v.n_colors_ = static_cast<int>(v.colors_.size());
    v.n_shapes_ = static_cast<int>(v.shapes_.size());
    v.n_actions_ = static_cast<int>(v.actions_.size());
    v.n_sounds_ = static_cast<int>(v.sounds_.size());
    v.n_verbs_ = static_cast<int>(v.verbs_.size());
    v.build_phrases();
    return v;
}

void EventVocab::build_phrases() {
    phrases_.clear();
    phrase_to_id_.clear();
    phrases_.reserve(static_cast<size_t>(total_count()));
    for (const auto& c : colors_)
        for (const auto& s : shapes_)
            for (const auto& a : actions_) phrases_.push_back("a " + c + " " + s + " " + a);
    for (const auto& snd : sounds_)
        for (const auto& vb : verbs_) phrases_.push_back("a " + snd + " " + vb);
    for (int i = 0; i < static_cast<int>(phrases_.size()); ++i) phrase_to_id_[phrases_[static_cast<size_t>(i)]] = i;
}

const std::string& EventVocab::phrase(int id) const {
    if (id < 0 || id >= total_count()) throw DomainError("phrase: id out of range");
    return phrases_[static_cast<size_t>(id)];
}

int EventVocab::phrase_id(const std::string& phrase) const {
    const auto it = phrase_to_id_.find(phrase);
    return it == phrase_to_id_.end() ? -1 : it->second;
}

EventVocab::VisualParts EventVocab::visual_parts(int id) const {
    if (id < 0 || id >= visual_count()) throw DomainError("visual_parts: id out of range");
    const int action = id % n_actions_;
    const int shape = (id / n_actions_) % n_shapes_;
    const int color = id / (n_actions_ * n_shapes_);
    return {color, shape, action};
}

EventVocab::AudioParts EventVocab::audio_parts(int id) const {
    if (!is_audio(id)) throw DomainError("audio_parts: id is not an audio event");
    const int rel = id - visual_count();
    return {rel / n_verbs_, rel % n_verbs_};
}

std::vector<std::string> EventVocab::all_words() const {
    std::vector<std::string> words = {"a"};
    for (const auto* list : {&colors_, &shapes_, &actions_, &sounds_, &verbs_})
        words.insert(words.end(), list->begin(), list->end());
    return words;
}

std::set<int> SyntheticVideo::event_ids() const {
    std::set<int> ids;
    for (const auto& e : visual_events) ids.insert(e.id);
    for (const auto& e : audio_events) ids.insert(e.id);
    return ids;
}

std::vector<TimedEvent> SyntheticVideo::all_events_chronological() const {
    std::vector<TimedEvent> all = visual_events;
    all.insert(all.end(), audio_events.begin(), audio_events.end());
    std::stable_sort(all.begin(), all.end(), [](const TimedEvent& a, const TimedEvent& b) {
        if (a.t != b.t) return a.t < b.t;
        return a.id < b.id;
    });
    return all;
}

std::string render_caption(const std::vector<TimedEvent>& events) {
    std::vector<TimedEvent> ordered = events;
    std::stable_sort(ordered.begin(), ordered.end(), [](const TimedEvent& a, const TimedEvent& b) {
        if (a.t != b.t) return a.t < b.t;
        return a.id < b.id;
    });
    std::string text;
    for (const auto& e : ordered) {
        if (!text.empty()) text += " ";
        text += e.phrase + ".";
    }
    return text;
}

ParsedCaption parse_caption(const std::string& text, const EventVocab& vocab) {
    ParsedCaption out;
    std::set<std::string> malformed;
    for (const auto& phrase : split_phrases(text)) {
        const int id = vocab.phrase_id(phrase);
        if (id >= 0) {
            out.event_ids.insert(id);
        } else {
            malformed.insert(phrase);
        }
    }
    out.malformed_phrases = static_cast<int>(malformed.size());
    return out;
}

std::vector<SyntheticVideo> gen_corpus(const CorpusParams& params, const EventVocab& vocab) {
    if (params.n_videos <= 0) throw DomainError("gen_corpus: n_videos must be positive");
    if (vocab.total_count() == 0) throw DomainError("gen_corpus: empty vocabulary");
    if (params.duration_min <= 0.0 || params.duration_max < params.duration_min) {
        throw DomainError("gen_corpus: invalid duration range");
    }
    if (params.events_min < 2 || params.events_max < params.events_min) {
        throw DomainError("gen_corpus: invalid events range");
    }

    std::vector<SyntheticVideo> corpus;
    corpus.reserve(static_cast<size_t>(params.n_videos));
    for (int vi = 0; vi < params.n_videos; ++vi) {
        Rng rng(derive_seed(params.seed, "corpus-video", static_cast<uint64_t>(vi)));
        SyntheticVideo video;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "vid%06d", vi);
        video.id = idbuf;
        video.duration = rng.uniform(params.duration_min, params.duration_max);

        const int n_events =
            static_cast<int>(rng.uniform_int(params.events_min, params.events_max));
        // roughly half audio, never leaving either modality empty
        int n_audio = n_events / 2 + ((n_events % 2 == 1 && rng.uniform() < 0.5) ? 1 : 0);
        n_audio = std::max(1, std::min(n_events - 1, n_audio));
        const int n_visual = n_events - n_audio;

        // distinct phrases per modality keep event ids unique within a video
        std::set<int> used;
        auto draw_distinct = [&](bool audio) {
            while (true) {
                const int id = audio ? vocab.visual_count() +
                                           static_cast<int>(rng.uniform_int(0, vocab.audio_count() - 1))
                                     : static_cast<int>(rng.uniform_int(0, vocab.visual_count() - 1));
                if (used.insert(id).second) return id;
            }
        };

        for (int k = 0; k < n_visual; ++k) {
            TimedEvent e;
            e.id = draw_distinct(false);
            e.phrase = vocab.phrase(e.id);
            e.t = rng.uniform(0.0, video.duration);
            video.visual_events.push_back(e);
        }
        for (int k = 0; k < n_audio; ++k) {
            TimedEvent e;
            e.id = draw_distinct(true);
            e.phrase = vocab.phrase(e.id);
            e.t = rng.uniform(0.0, video.duration);
            video.audio_events.push_back(e);
        }

        for (const auto& e : video.all_events_chronological()) {
            AtomicEvent ae;
            ae.id = e.id;
            ae.phrase = e.phrase;
            ae.start = e.t;
            ae.end = std::min(e.t + rng.uniform(0.5, 2.5), video.duration);
            video.atomic_events.push_back(ae);
        }
        video.caption = render_caption(video.all_events_chronological());
        corpus.push_back(std::move(video));
    }
    return corpus;
}

namespace {

nlohmann::json timed_events_json(const std::vector<TimedEvent>& events) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : events) arr.push_back({{"id", e.id}, {"phrase", e.phrase}, {"t", e.t}});
    return arr;
}

std::vector<TimedEvent> timed_events_from_json(const nlohmann::json& arr) {
    std::vector<TimedEvent> out;
    for (const auto& j : arr) {
        TimedEvent e;
        e.id = j.at("id").get<int>();
        e.phrase = j.at("phrase").get<std::string>();
        e.t = j.at("t").get<double>();
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

void write_corpus_jsonl(const std::string& path, const std::vector<SyntheticVideo>& corpus) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open corpus file for writing: " + path);
    for (const auto& v : corpus) {
        nlohmann::json j;
        j["id"] = v.id;
        j["duration"] = v.duration;
        j["visual_events"] = timed_events_json(v.visual_events);
        j["audio_events"] = timed_events_json(v.audio_events);
        j["caption"] = v.caption;
        nlohmann::json atoms = nlohmann::json::array();
        for (const auto& a : v.atomic_events) {
            atoms.push_back({{"id", a.id},
                             {"phrase", a.phrase},
                             {"start", a.start.value()},
                             {"end", a.end.value()}});
        }
        j["atomic_events"] = std::move(atoms);
        out << j.dump() << "\n";
    }
}

std::vector<SyntheticVideo> read_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::vector<SyntheticVideo> corpus;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
        }
        try {
            SyntheticVideo v;
            v.id = j.at("id").get<std::string>();
            v.duration = j.at("duration").get<double>();
            v.visual_events = timed_events_from_json(j.at("visual_events"));
            v.audio_events = timed_events_from_json(j.at("audio_events"));
            v.caption = j.at("caption").get<std::string>();
            for (const auto& a : j.at("atomic_events")) {
                AtomicEvent ae;
                ae.id = a.at("id").get<int>();
                ae.phrase = a.at("phrase").get<std::string>();
                ae.start = a.at("start").get<double>();
                ae.end = a.at("end").get<double>();
                v.atomic_events.push_back(std::move(ae));
            }
            corpus.push_back(std::move(v));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": missing field: " + e.what());
        }
    }
    if (corpus.empty()) throw DataError("corpus file is empty: " + path);
    return corpus;
}

}  // namespace avcap
