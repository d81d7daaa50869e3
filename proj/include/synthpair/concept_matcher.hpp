#pragma once

#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "synthpair/concept_bank.hpp"

namespace synthpair {

enum class MatchMode {
    WordBoundary,  ///< match edges must touch a non-word byte or a string end
    RawSubstring,  ///< any occurrence counts ("cat" inside "category")
};

/// Aho-Corasick automaton over the normalized concept texts. Immutable after
/// construction; match() is safe to call concurrently.
class Matcher {
public:
    explicit Matcher(const ConceptBank& bank, MatchMode mode = MatchMode::WordBoundary);

    /// Ids of concepts occurring in the caption, ascending, each once. The
    /// caption is normalized with the bank's rules first.
    std::vector<ConceptId> match(std::string_view caption) const;

    /// Same, for text that is already normalized.
    std::vector<ConceptId> match_normalized(std::string_view text) const;

    MatchMode mode() const { return mode_; }
    std::size_t concept_count() const { return concept_count_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Number of single-pass text scans performed so far.
    std::uint64_t scans() const { return scans_.load(std::memory_order_relaxed); }

private:
    struct Node {
        // Sorted by byte; sparse so very large banks stay compact.
        std::vector<std::pair<unsigned char, std::uint32_t>> next;
        std::uint32_t fail = 0;
        std::uint32_t output_link = 0;  ///< nearest proper suffix node that ends a concept, 0 = none
        std::uint32_t depth = 0;
        ConceptId concept_id = ConceptBank::npos;
    };

    std::uint32_t child(std::uint32_t node, unsigned char c) const;

    std::vector<Node> nodes_;
    MatchMode mode_;
    std::size_t concept_count_;
    mutable std::atomic<std::uint64_t> scans_{0};
};

/// Appearance statistics in the format of a concept-coverage table.
struct ConceptStats {
    std::vector<std::uint64_t> counts;  ///< captions matching each concept id
    std::uint64_t caption_count = 0;

    /// Number of concepts with count >= k.
    std::size_t coverage(std::uint64_t k) const;
    /// Mean count over concepts with count >= k; 0 with defined=false when none.
    double average_appearance(std::uint64_t k, bool* defined = nullptr) const;

    /// Plain-text table: k=1, k=25, k=50, average appearance for k>=25.
    void write_table(std::ostream& out, std::string_view dataset_label) const;
};

ConceptStats corpus_stats(const Matcher& matcher, const std::vector<std::string>& corpus);

/// Per-caption match sets, index-aligned with the corpus.
std::vector<std::vector<ConceptId>> match_corpus(const Matcher& matcher, const std::vector<std::string>& corpus,
                                                 std::size_t workers = 1);

/// Counts from precomputed match sets.
ConceptStats stats_from_matches(std::size_t concept_count, const std::vector<std::vector<ConceptId>>& matches);

}  // namespace synthpair
