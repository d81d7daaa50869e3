#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "synthpair/concept_bank.hpp"
#include "synthpair/common.hpp"
#include "synthpair/endpoints.hpp"

namespace synthpair {

using CaptionId = std::uint32_t;

struct PromptRequest {
    std::string concept_text;
    std::string prompt_text;
    SamplingParams sampling;
};

struct GenerationConfig {
    int n_per_concept = 1;
    int max_words = 25;
    int max_attempts = 4;
    bool dedup = true;
    bool drop_concept_absent = false;
    std::string model;
    SamplingParams sampling;   ///< seed field is overwritten per request
    std::size_t concurrency = 4;

    void validate() const;
};

struct CaptionRecord {
    CaptionId id = 0;
    std::string text;
    ConceptId source_concept_id = 0;
    int attempt = 1;                 ///< 1-based attempt that produced the accepted text
    bool concept_absent = false;
    std::vector<ConceptId> matched;  ///< filled by the matcher stage

    bool operator==(const CaptionRecord&) const = default;
};

enum class RejectReason { Empty, TooLong, MultiOutput };
std::string_view to_string(RejectReason r);

struct Rejection {
    RejectReason reason;
};

using ValidationResult = std::variant<CaptionRecord, Rejection>;

/// The concept-conditioned caption prompt. Throws on an empty or
/// unnormalized concept.
std::string caption_prompt(std::string_view concept_text);

PromptRequest build_prompt(std::string_view concept_text, const SamplingParams& sampling = {});

/// Cleans a raw LLM reply and either accepts it (id/source left at 0 for the
/// caller to fill) or rejects it.
ValidationResult validate_caption(std::string_view raw, std::string_view concept_text, const GenerationConfig& cfg);

/// True if the normalized concept occurs in the normalized text with
/// non-word bytes (or string ends) on both sides.
bool contains_concept(std::string_view text, std::string_view concept_text);

/// Per-request seed for the n-th caption of a concept on a given attempt.
std::uint64_t request_seed(std::uint64_t run_seed, ConceptId concept_id, int n, int attempt);

/// Records accepted for completed concepts, used to resume after an abort.
struct GenerationCheckpoint {
    std::map<ConceptId, std::vector<CaptionRecord>> completed;
};

class GenerationAborted : public EndpointUnavailable {
public:
    GenerationAborted(const std::string& what, GenerationCheckpoint cp)
        : EndpointUnavailable(what), checkpoint_(std::move(cp)) {}
    const GenerationCheckpoint& checkpoint() const { return checkpoint_; }

private:
    GenerationCheckpoint checkpoint_;
};

struct GenerationSummary {
    std::size_t requests = 0;
    std::size_t rejected = 0;
    std::size_t duplicates = 0;
    std::size_t concept_absent = 0;
    std::size_t shortfall = 0;  ///< captions missing because the attempt budget ran out
};

/// N captions for every concept, ordered by (concept id, n), ids dense from 0.
std::vector<CaptionRecord> generate_captions(const ConceptBank& bank, ChatClient& client,
                                             const GenerationConfig& cfg, std::uint64_t seed,
                                             const GenerationCheckpoint* resume = nullptr,
                                             GenerationSummary* summary = nullptr);

/// `id<TAB>concept_id<TAB>text` lines.
void write_captions(std::ostream& out, const std::vector<CaptionRecord>& records);
std::vector<CaptionRecord> read_captions(std::istream& in);

// ---------------------------------------------------------------------------

/// Offline stand-in for an LLM endpoint. Parses the concept out of the prompt
/// and answers "A {adjective} {concept}." with the adjective keyed by
/// hash(concept, request seed), so every caption embeds the concept verbatim.
class MockChatClient final : public ChatClient {
public:
    MockChatClient() = default;

    /// Concepts whose first request returns a 30-word run-on.
    void set_invalid_first(std::set<std::string> concepts) { invalid_first_ = std::move(concepts); }

    std::string complete(const ChatRequest& req) override;

    std::size_t calls() const;

    /// Deterministic caption for (concept, seed).
    static std::string caption_for(std::string_view concept_text, std::uint64_t seed);

private:
    mutable std::mutex mu_;
    std::set<std::string> invalid_first_;
    std::set<std::string> served_invalid_;
    std::size_t calls_ = 0;
};

}  // namespace synthpair
