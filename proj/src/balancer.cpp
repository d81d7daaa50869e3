#include "synthpair/balancer.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "synthpair/common.hpp"

namespace synthpair {

MatchTable MatchTable::from_matches(std::size_t concept_count, std::vector<std::vector<ConceptId>> matches) {
    MatchTable t;
    t.counts.assign(concept_count, 0);
    for (auto& m : matches) {
        std::sort(m.begin(), m.end());
        m.erase(std::unique(m.begin(), m.end()), m.end());
        for (ConceptId id : m) ++t.counts.at(id);
    }
    t.matches = std::move(matches);
    return t;
}

std::size_t MatchTable::matchable() const {
    return static_cast<std::size_t>(
        std::count_if(matches.begin(), matches.end(), [](const auto& m) { return !m.empty(); }));
}

double keep_probability(const std::vector<ConceptId>& matches, const std::vector<std::uint64_t>& counts,
                        double t_threshold, Combiner combiner) {
    if (!(t_threshold > 0.0)) throw Error("keep_probability: threshold must be positive");
    if (matches.empty()) return 0.0;
    double best = 0.0;
    double miss = 1.0;
    for (ConceptId id : matches) {
        const auto c = counts.at(id);
        if (c == 0) throw Error("keep_probability: matched concept has zero count");
        const double p = std::min(1.0, t_threshold / static_cast<double>(c));
        best = std::max(best, p);
        miss *= 1.0 - p;
    }
    return combiner == Combiner::Max ? best : 1.0 - miss;
}

double expected_size(const MatchTable& table, double t_threshold, Combiner combiner) {
    double sum = 0.0;
    for (const auto& m : table.matches) sum += keep_probability(m, table.counts, t_threshold, combiner);
    return sum;
}

namespace {

// Max combiner: a caption keeps with min(1, t / m) where m is its smallest
// matched count, so E(t) = sum_{m <= t} n_m + t * sum_{m > t} n_m / m.
double solve_max_exact(const MatchTable& table, std::size_t target) {
    std::map<std::uint64_t, std::uint64_t> by_min;  // m -> captions
    for (const auto& m : table.matches) {
        if (m.empty()) continue;
        std::uint64_t lo = UINT64_MAX;
        for (ConceptId id : m) lo = std::min(lo, table.counts.at(id));
        ++by_min[lo];
    }
    std::vector<std::pair<double, double>> groups;  // (m, n_m)
    for (const auto& [m, n] : by_min) groups.emplace_back(static_cast<double>(m), static_cast<double>(n));

    // suffix[k] = sum_{i >= k} n_i / m_i
    std::vector<double> suffix(groups.size() + 1, 0.0);
    for (std::size_t k = groups.size(); k-- > 0;) suffix[k] = suffix[k + 1] + groups[k].second / groups[k].first;

    const double goal = static_cast<double>(target);
    double saturated = 0.0;  // sum_{i < k} n_i
    for (std::size_t k = 0; k < groups.size(); ++k) {
        const double m = groups[k].first;
        const double at_break = saturated + groups[k].second + m * suffix[k + 1];
        if (at_break == goal) return m;
        if (at_break > goal) return (goal - saturated) / suffix[k];
        saturated += groups[k].second;
    }
    return groups.back().first;
}

}  // namespace

double solve_threshold(const MatchTable& table, std::size_t target_size, double tolerance, Combiner combiner) {
    const auto matchable = table.matchable();
    if (target_size == 0) throw Error("solve_threshold: target size must be positive");
    if (target_size > matchable) {
        throw Error("solve_threshold: target " + std::to_string(target_size) + " exceeds " +
                    std::to_string(matchable) + " matchable captions");
    }
    if (combiner == Combiner::Max) return solve_max_exact(table, target_size);

    std::uint64_t min_count = UINT64_MAX, max_count = 0;
    for (const auto& m : table.matches) {
        for (ConceptId id : m) {
            min_count = std::min(min_count, table.counts[id]);
            max_count = std::max(max_count, table.counts[id]);
        }
    }
    const double goal = static_cast<double>(target_size);
    double lo = static_cast<double>(min_count) * goal / static_cast<double>(matchable);
    double hi = static_cast<double>(max_count);
    while (lo > 1e-12 && expected_size(table, lo, combiner) > goal) lo *= 0.5;

    double t = hi;
    for (int it = 0; it < 60; ++it) {
        t = 0.5 * (lo + hi);
        const double e = expected_size(table, t, combiner);
        if (std::abs(e - goal) <= tolerance) return t;
        (e < goal ? lo : hi) = t;
    }
    return t;
}

BalancePlan make_plan(const MatchTable& table, std::size_t target_size, double tolerance, Combiner combiner) {
    BalancePlan plan;
    plan.counts = table.counts;
    plan.target_size = target_size;
    plan.combiner = combiner;
    plan.t_threshold = solve_threshold(table, target_size, tolerance, combiner);
    plan.keep_prob.reserve(table.matches.size());
    for (const auto& m : table.matches) {
        plan.keep_prob.push_back(keep_probability(m, table.counts, plan.t_threshold, combiner));
    }
    plan.expected_size = 0.0;
    for (double p : plan.keep_prob) plan.expected_size += p;
    return plan;
}

double bernoulli_draw(std::uint64_t seed, CaptionId id) {
    return unit_interval(hash_values(seed, 0xba1a2ceULL, static_cast<std::uint64_t>(id)));
}

namespace {

std::vector<std::size_t> sorted_by_id(const std::vector<CaptionRecord>& corpus, std::vector<std::size_t> pos) {
    std::sort(pos.begin(), pos.end(), [&](auto a, auto b) { return corpus[a].id < corpus[b].id; });
    return pos;
}

}  // namespace

std::vector<std::size_t> sample_balanced(const std::vector<CaptionRecord>& corpus, const BalancePlan& plan,
                                         std::uint64_t seed) {
    if (plan.keep_prob.size() != corpus.size()) throw Error("sample_balanced: plan does not cover the corpus");
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (bernoulli_draw(seed, corpus[i].id) < plan.keep_prob[i]) kept.push_back(i);
    }
    return sorted_by_id(corpus, std::move(kept));
}

std::vector<std::size_t> sample_random(const std::vector<CaptionRecord>& corpus, std::size_t size,
                                       std::uint64_t seed) {
    if (size > corpus.size()) throw Error("sample_random: size exceeds corpus");
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
    keyed.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        keyed.emplace_back(hash_values(seed, 0x4a4d0ULL, static_cast<std::uint64_t>(corpus[i].id)), i);
    }
    std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
        return a.first != b.first ? a.first < b.first : corpus[a.second].id < corpus[b.second].id;
    });
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < size; ++i) kept.push_back(keyed[i].second);
    return sorted_by_id(corpus, std::move(kept));
}

void write_plan(std::ostream& out, const std::vector<CaptionRecord>& corpus, const BalancePlan& plan,
                const std::vector<std::size_t>& kept) {
    std::vector<bool> is_kept(corpus.size(), false);
    for (auto k : kept) is_kept.at(k) = true;
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order = sorted_by_id(corpus, std::move(order));
    const auto old_prec = out.precision(17);
    for (auto i : order) {
        out << corpus[i].id << '\t' << plan.keep_prob[i] << '\t' << (is_kept[i] ? 1 : 0) << '\n';
    }
    out.precision(old_prec);
}

void write_matches(std::ostream& out, const std::vector<CaptionRecord>& corpus) {
    for (const auto& r : corpus) {
        out << r.id << '\t';
        for (std::size_t k = 0; k < r.matched.size(); ++k) out << (k ? "," : "") << r.matched[k];
        out << '\n';
    }
}

void read_matches(std::istream& in, std::vector<CaptionRecord>& corpus) {
    std::unordered_map<CaptionId, std::size_t> index;
    for (std::size_t i = 0; i < corpus.size(); ++i) index[corpus[i].id] = i;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw Error("matches line " + std::to_string(lineno) + ": missing tab");
        try {
            const auto id = static_cast<CaptionId>(std::stoul(line.substr(0, tab)));
            auto it = index.find(id);
            if (it == index.end()) throw Error("matches line " + std::to_string(lineno) + ": unknown caption id");
            auto& dst = corpus[it->second].matched;
            dst.clear();
            const auto list = line.substr(tab + 1);
            if (list.empty()) continue;
            for (const auto& f : split(list, ',')) dst.push_back(static_cast<ConceptId>(std::stoul(f)));
        } catch (const std::logic_error&) {
            throw Error("matches line " + std::to_string(lineno) + ": bad integer field");
        }
    }
}

}  // namespace synthpair
