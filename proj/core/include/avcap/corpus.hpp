#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "avcap/metrics.hpp"
#include "avcap/rng.hpp"

namespace avcap {

// Closed world of event phrases. Visual phrases are (color, shape, action)
// triples, audio phrases are (sound, verb) pairs; ids enumerate the full
// cross products, visual first. The factored structure is what the
// synthetic encoders expose as features, so captioning generalizes to
// unseen combinations.
class EventVocab {
  public:
    static EventVocab standard();

    int visual_count() const { return n_colors_ * n_shapes_ * n_actions_; }
    int audio_count() const { return n_sounds_ * n_verbs_; }
    int total_count() const { return visual_count() + audio_count(); }
    bool is_audio(int id) const { return id >= visual_count() && id < total_count(); }

    const std::string& phrase(int id) const;
    // -1 when the phrase is not in the vocabulary
    int phrase_id(const std::string& phrase) const;

    struct VisualParts { int color, shape, action; };
    struct AudioParts { int sound, verb; };
    VisualParts visual_parts(int id) const;
    AudioParts audio_parts(int id) const;

    int n_colors() const { return n_colors_; }
    int n_shapes() const { return n_shapes_; }
    int n_actions() const { return n_actions_; }
    int n_sounds() const { return n_sounds_; }
    int n_verbs() const { return n_verbs_; }

    int visual_feature_dim() const { return n_colors_ + n_shapes_ + n_actions_; }
    int audio_feature_dim() const { return n_sounds_ + n_verbs_; }

    // every distinct word appearing in any phrase
    std::vector<std::string> all_words() const;

  private:
    std::vector<std::string> colors_, shapes_, actions_, sounds_, verbs_;
    int n_colors_ = 0, n_shapes_ = 0, n_actions_ = 0, n_sounds_ = 0, n_verbs_ = 0;
    std::vector<std::string> phrases_;
    std::unordered_map<std::string, int> phrase_to_id_;

    void build_phrases();
};

struct TimedEvent {
    int id = -1;
    std::string phrase;
    double t = 0.0;  // onset in seconds
};

// A toy video: timed events in two modalities plus the caption and atomic
// event list they deterministically induce.
struct SyntheticVideo {
    std::string id;
    double duration = 0.0;
    std::vector<TimedEvent> visual_events;
    std::vector<TimedEvent> audio_events;
    std::string caption;
    std::vector<AtomicEvent> atomic_events;

    std::set<int> event_ids() const;
    std::vector<TimedEvent> all_events_chronological() const;
};

struct CorpusParams {
    int n_videos = 0;
    uint64_t seed = 0;
    double duration_min = 30.0;
    double duration_max = 60.0;
    int events_min = 4;
    int events_max = 10;
};

// Deterministic function of (seed, params). Roughly half of each video's
// events are audio-only so an audio-blind captioner has a miss-rate floor.
std::vector<SyntheticVideo> gen_corpus(const CorpusParams& params, const EventVocab& vocab);

// Chronological rendering, one phrase per event, sentence punctuation.
std::string render_caption(const std::vector<TimedEvent>& events);

struct ParsedCaption {
    std::set<int> event_ids;
    int malformed_phrases = 0;  // distinct phrases matching no vocab entry
};

ParsedCaption parse_caption(const std::string& text, const EventVocab& vocab);

// JSON Lines, one video per line:
// {id, duration, visual_events:[{id,phrase,t}], audio_events:[...],
//  caption, atomic_events:[{id,phrase,start,end}]}
void write_corpus_jsonl(const std::string& path, const std::vector<SyntheticVideo>& corpus);
std::vector<SyntheticVideo> read_corpus_jsonl(const std::string& path);

}  // namespace avcap
