#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "synthpair/common.hpp"
#include "synthpair/endpoints.hpp"

namespace synthpair {

using ConceptId = std::uint32_t;

/// Immutable, sorted, deduplicated list of normalized concepts. Ids are the
/// positions in sorted order, so they are dense and reproducible.
class ConceptBank {
public:
    ConceptBank() = default;

    /// Normalizes, drops blanks, merges duplicates and sorts. Never throws on
    /// an empty result; load_concepts is the entry point that enforces
    /// non-emptiness.
    static ConceptBank from_texts(std::vector<std::string> texts, std::string name = {});

    std::size_t size() const { return texts_.size(); }
    bool empty() const { return texts_.empty(); }
    const std::string& text(ConceptId id) const { return texts_.at(id); }
    const std::vector<std::string>& texts() const { return texts_; }
    const std::string& name() const { return name_; }

    /// Id of a normalized text, or npos.
    static constexpr ConceptId npos = UINT32_MAX;
    ConceptId find(std::string_view normalized) const;

    /// Keeps the listed ids (any order, duplicates ignored) and renumbers.
    ConceptBank select(const std::vector<ConceptId>& ids, std::string name = {}) const;

    /// One concept per line, in id order.
    void write(std::ostream& out) const;

    bool operator==(const ConceptBank& other) const { return texts_ == other.texts_; }

private:
    std::vector<std::string> texts_;
    std::string name_;
};

/// One concept per non-empty line. Throws Error("empty concept bank") when no
/// concept survives normalization.
ConceptBank load_concepts(std::istream& in, std::string name = {});
ConceptBank load_concepts_file(const std::string& path);

/// Uniform sample of n concepts without replacement, deterministic in seed.
ConceptBank random_subset(const ConceptBank& bank, std::size_t n, std::uint64_t seed);

class Matcher;

/// Concepts matched at least once anywhere in the corpus.
ConceptBank derive_subset_from_corpus(const ConceptBank& bank, const std::vector<std::string>& corpus,
                                      const Matcher& matcher);

// ---------------------------------------------------------------------------
// NSFW flagging through a chat endpoint.

extern const std::string_view kNsfwSystemPrompt;

struct NsfwFlagReport {
    std::vector<bool> flags;             ///< indexed by concept id
    std::vector<bool> decided;           ///< false for concepts never classified (partial report)
    std::size_t warnings = 0;            ///< unparseable replies defaulted to clean
    double flagged_fraction = 0.0;       ///< (# flagged) / N_C

    void recompute_fraction();
    /// `id<TAB>text<TAB>0|1`, decided concepts only.
    void write(std::ostream& out, const ConceptBank& bank) const;
};

struct NsfwOptions {
    std::string model;
    int retries = 3;
    std::size_t concurrency = 4;
};

/// Thrown when the classifier becomes unreachable mid-run; carries the
/// classifications completed so far.
class NsfwAborted : public EndpointUnavailable {
public:
    NsfwAborted(const std::string& what, NsfwFlagReport partial)
        : EndpointUnavailable(what), partial_(std::move(partial)) {}
    const NsfwFlagReport& partial() const { return partial_; }

private:
    NsfwFlagReport partial_;
};

ChatRequest build_nsfw_request(std::string_view concept_text, const NsfwOptions& opts);

NsfwFlagReport flag_nsfw(const ConceptBank& bank, ChatClient& classifier, const NsfwOptions& opts = {});

/// Offline classifier: replies "1" for concepts on the denylist, "0"
/// otherwise. Keeps every system prompt it receives.
class MockNsfwClient final : public ChatClient {
public:
    explicit MockNsfwClient(std::set<std::string> denylist = {}) : denylist_(std::move(denylist)) {}

    std::string complete(const ChatRequest& req) override;

    std::vector<std::string> system_prompts() const;

private:
    std::set<std::string> denylist_;
    mutable std::mutex mu_;
    std::vector<std::string> system_prompts_;
};

}  // namespace synthpair
