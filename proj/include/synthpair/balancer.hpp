#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "synthpair/caption_engine.hpp"
#include "synthpair/concept_bank.hpp"

namespace synthpair {

/// How per-concept keep rates combine when a caption matches several concepts.
enum class Combiner {
    Max,      ///< p = max_c min(1, t / count_c)
    NoisyOr,  ///< p = 1 - prod_c (1 - min(1, t / count_c))
};

/// Match sets indexed by caption position, plus the per-concept caption counts.
struct MatchTable {
    std::vector<std::vector<ConceptId>> matches;
    std::vector<std::uint64_t> counts;  ///< captions matching each concept (once per caption)

    static MatchTable from_matches(std::size_t concept_count, std::vector<std::vector<ConceptId>> matches);
    std::size_t matchable() const;  ///< captions with a nonempty match set
};

struct BalancePlan {
    std::vector<std::uint64_t> counts;
    double t_threshold = 0.0;
    std::vector<double> keep_prob;  ///< indexed like MatchTable::matches
    std::size_t target_size = 0;
    double expected_size = 0.0;
    Combiner combiner = Combiner::Max;
};

double keep_probability(const std::vector<ConceptId>& matches, const std::vector<std::uint64_t>& counts,
                        double t_threshold, Combiner combiner = Combiner::Max);

/// Sum of keep probabilities over the corpus for a threshold.
double expected_size(const MatchTable& table, double t_threshold, Combiner combiner = Combiner::Max);

/// Threshold whose expected subset size hits target_size. The max combiner
/// has a piecewise-linear expectation and is solved exactly; noisy-OR is
/// bisected (60 iterations or |E - target| <= tolerance).
double solve_threshold(const MatchTable& table, std::size_t target_size, double tolerance = 0.5,
                       Combiner combiner = Combiner::Max);

BalancePlan make_plan(const MatchTable& table, std::size_t target_size, double tolerance = 0.5,
                      Combiner combiner = Combiner::Max);

/// Independent Bernoulli(keep_prob[i]) draw per caption, keyed by (seed, caption
/// id) so the kept set does not depend on corpus order. Returns kept positions
/// in ascending caption-id order.
std::vector<std::size_t> sample_balanced(const std::vector<CaptionRecord>& corpus, const BalancePlan& plan,
                                         std::uint64_t seed);

/// Uniform subset of exactly `size` captions, order-independent.
std::vector<std::size_t> sample_random(const std::vector<CaptionRecord>& corpus, std::size_t size,
                                       std::uint64_t seed);

/// The uniform draw used for caption `id`.
double bernoulli_draw(std::uint64_t seed, CaptionId id);

/// `caption_id<TAB>keep_prob<TAB>kept` lines.
void write_plan(std::ostream& out, const std::vector<CaptionRecord>& corpus, const BalancePlan& plan,
                const std::vector<std::size_t>& kept);

/// `caption_id<TAB>id,id,...` lines (empty list allowed).
void write_matches(std::ostream& out, const std::vector<CaptionRecord>& corpus);
void read_matches(std::istream& in, std::vector<CaptionRecord>& corpus);

}  // namespace synthpair
