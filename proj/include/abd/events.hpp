#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "abd/common.hpp"

namespace abd {

constexpr double kIntervalHours = 12.0;
constexpr int kDefaultMaxSeq = 1200;

enum class ScoreKind { Rass, Gcs, Cam };
const char* score_kind_name(ScoreKind k);

enum class FeatureKind { Vital, Med, Lab, Score };
const char* feature_kind_name(FeatureKind k);

/// (t, f, v) triplet: hours since admission, vocabulary code, value.
struct ClinicalEvent {
    double t = 0.0;
    int code = 0;
    double value = 0.0;
};

struct ScoreEvent {
    double t = 0.0;
    ScoreKind kind = ScoreKind::Rass;
    double value = 0.0;
};

struct StayRecord {
    std::string stay_id;
    std::string patient_id;
    double los_hours = 0.0;
    std::optional<double> death_hour;
    std::vector<ClinicalEvent> events; // sorted by t; excludes scores
    std::vector<ScoreEvent> scores;    // sorted by t; raw clinical values
    std::vector<std::optional<double>> statics; // aligned with Cohort::static_fields
};

struct IngestError {
    int line = 0;
    std::string stay_id;
    std::string message;
};

struct Cohort {
    std::vector<std::string> code_names;    // sorted; ClinicalEvent::code indexes this
    std::vector<std::string> static_fields; // sorted union over stays
    std::vector<StayRecord> stays;
    std::vector<IngestError> errors;
    std::vector<std::string> warnings;
    bool cleaned = false;

    int code_of(const std::string& name) const; // -1 when absent
};

std::string schema_id(); // "cohort-jsonl-v1"

/// Parses the cohort JSONL file. Invalid records are reported in
/// Cohort::errors and skipped; a duplicated stay_id is fatal.
Cohort ingest_cohort(const std::string& path, const std::string& schema = schema_id());

/// Retains stays with los >= 24h and at least one RASS/GCS/CAM measurement.
Cohort filter_inclusion(Cohort cohort);

struct VocabEntry {
    std::string name;
    FeatureKind kind = FeatureKind::Vital;
    double stay_fraction = 0.0;
    bool kept = true;
    double p01 = 0.0, p99 = 0.0;
    double mean = 0.0, std_dev = 0.0;
};

struct StaticStat {
    std::string name;
    double mean = 0.0, std_dev = 0.0;
};

struct FeatureVocabulary {
    std::vector<VocabEntry> entries; // aligned with the source cohort's code order
    std::vector<StaticStat> statics;
    std::string provenance; // which stays the statistics were derived from

    int index_of(const std::string& name) const; // -1 when absent
    int kept_count() const;
};

/// Feature statistics from the (training) cohort. Med/lab codes present in
/// fewer than prune_threshold of stays are dropped; vitals and scores are
/// always kept. p01/p99 are computed over all pooled raw values of a kept
/// code; mean/std over the values inside [p01, p99], matching what survives
/// outlier removal.
FeatureVocabulary build_vocabulary(const Cohort& cohort, double prune_threshold = 0.01,
                                   std::string provenance = {});

/// Drops events of pruned/unknown codes and values outside [p01, p99],
/// z-scores the rest, and imputes + scales statics. Idempotent: a cohort
/// already marked cleaned is returned unchanged.
Cohort clean_events(Cohort cohort, const FeatureVocabulary& vocab);

struct IntervalWindow {
    int k = 0;                 // prediction window [12k, 12(k+1))
    double start = 0.0, end = 0.0;
    size_t obs_begin = 0, obs_end = 0; // index range into WindowedStay::stream
};

struct WindowedStay {
    std::string stay_id;
    std::string patient_id;
    std::vector<ClinicalEvent> stream; // merged events + scaled score events
    std::vector<IntervalWindow> intervals;
    std::vector<double> statics; // imputed + scaled
    std::optional<double> death_hour;

    std::span<const ClinicalEvent> observation(const IntervalWindow& w) const {
        return {stream.data() + w.obs_begin, w.obs_end - w.obs_begin};
    }
};

/// Builds prediction windows [12, 24), [24, 36), ... for a cleaned stay.
/// The trailing partial window is kept only when death falls inside it.
/// Observations are capped at the most recent max_seq events.
WindowedStay window_stay(const StayRecord& stay, const Cohort& cohort,
                         const FeatureVocabulary& vocab,
                         double interval_hours = kIntervalHours,
                         int max_seq = kDefaultMaxSeq);

struct IntervalFeatures {
    std::vector<std::string> names;       // layout shared across windows
    std::vector<std::vector<double>> rows; // one row per prediction window
};

/// Per-window statistical features over the 12 hours preceding each
/// prediction window: five summary statistics per kept vital/score code
/// (stay-median imputed, 0 when the code never occurs in the stay),
/// presence indicators for kept med/lab codes, then statics and the
/// window start hour.
IntervalFeatures interval_statistics(const WindowedStay& ws, const Cohort& cohort,
                                     const FeatureVocabulary& vocab);

// ---- serialization ---------------------------------------------------------

void write_cohort_jsonl(const Cohort& cohort, const std::string& path);
std::string vocabulary_to_json(const FeatureVocabulary& vocab);
FeatureVocabulary vocabulary_from_json(const std::string& json_text);
void write_vocabulary(const FeatureVocabulary& vocab, const std::string& path);
FeatureVocabulary read_vocabulary(const std::string& path);

} // namespace abd
