#include "synthpair/concept_matcher.hpp"

#include <algorithm>
#include <deque>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "synthpair/common.hpp"
#include "synthpair/parallel.hpp"

namespace synthpair {

Matcher::Matcher(const ConceptBank& bank, MatchMode mode) : mode_(mode), concept_count_(bank.size()) {
    nodes_.emplace_back();

    for (std::size_t id = 0; id < bank.size(); ++id) {
        std::uint32_t cur = 0;
        for (unsigned char c : bank.text(static_cast<ConceptId>(id))) {
            auto& edges = nodes_[cur].next;
            auto it = std::lower_bound(edges.begin(), edges.end(), c,
                                       [](const auto& e, unsigned char b) { return e.first < b; });
            if (it != edges.end() && it->first == c) {
                cur = it->second;
                continue;
            }
            const auto fresh = static_cast<std::uint32_t>(nodes_.size());
            const auto depth = nodes_[cur].depth + 1;
            edges.insert(it, {c, fresh});
            nodes_.emplace_back();
            nodes_.back().depth = depth;
            cur = fresh;
        }
        nodes_[cur].concept_id = static_cast<ConceptId>(id);
    }

    // Breadth-first failure and output links.
    std::deque<std::uint32_t> queue;
    for (const auto& [c, n] : nodes_[0].next) {
        nodes_[n].fail = 0;
        queue.push_back(n);
    }
    while (!queue.empty()) {
        const auto u = queue.front();
        queue.pop_front();
        for (const auto& [c, v] : nodes_[u].next) {
            std::uint32_t f = nodes_[u].fail;
            std::uint32_t target = 0;
            while (true) {
                auto t = child(f, c);
                if (t != 0) {
                    target = t;
                    break;
                }
                if (f == 0) break;
                f = nodes_[f].fail;
            }
            nodes_[v].fail = target;
            nodes_[v].output_link =
                nodes_[target].concept_id != ConceptBank::npos ? target : nodes_[target].output_link;
            queue.push_back(v);
        }
    }
}

std::uint32_t Matcher::child(std::uint32_t node, unsigned char c) const {
    const auto& edges = nodes_[node].next;
    auto it = std::lower_bound(edges.begin(), edges.end(), c,
                               [](const auto& e, unsigned char b) { return e.first < b; });
    return (it != edges.end() && it->first == c) ? it->second : 0;
}

std::vector<ConceptId> Matcher::match(std::string_view caption) const {
    return match_normalized(normalize_text(caption));
}

std::vector<ConceptId> Matcher::match_normalized(std::string_view text) const {
    scans_.fetch_add(1, std::memory_order_relaxed);
    std::vector<ConceptId> found;
    std::uint32_t state = 0;
    const auto n = text.size();

    auto accept = [&](std::uint32_t node, std::size_t end) {
        if (mode_ == MatchMode::WordBoundary) {
            const std::size_t start = end - nodes_[node].depth;
            if (start > 0 && is_word_byte(static_cast<unsigned char>(text[start - 1]))) return;
            if (end < n && is_word_byte(static_cast<unsigned char>(text[end]))) return;
        }
        found.push_back(nodes_[node].concept_id);
    };

    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<unsigned char>(text[i]);
        while (true) {
            auto t = child(state, c);
            if (t != 0) {
                state = t;
                break;
            }
            if (state == 0) break;
            state = nodes_[state].fail;
        }
        const std::size_t end = i + 1;
        if (nodes_[state].concept_id != ConceptBank::npos) accept(state, end);
        for (auto o = nodes_[state].output_link; o != 0; o = nodes_[o].output_link) accept(o, end);
    }

    std::sort(found.begin(), found.end());
    found.erase(std::unique(found.begin(), found.end()), found.end());
    return found;
}

// ---------------------------------------------------------------------------

std::size_t ConceptStats::coverage(std::uint64_t k) const {
    return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [k](auto c) { return c >= k; }));
}

double ConceptStats::average_appearance(std::uint64_t k, bool* defined) const {
    std::uint64_t sum = 0, n = 0;
    for (auto c : counts) {
        if (c >= k) {
            sum += c;
            ++n;
        }
    }
    if (defined) *defined = n > 0;
    return n == 0 ? 0.0 : static_cast<double>(sum) / static_cast<double>(n);
}

void ConceptStats::write_table(std::ostream& out, std::string_view dataset_label) const {
    bool defined = false;
    const double avg = average_appearance(25, &defined);
    std::ostringstream avg_cell;
    avg_cell << std::fixed << std::setprecision(1) << avg;
    if (!defined) avg_cell << " (undefined)";

    const std::size_t label_w = std::max<std::size_t>(7, dataset_label.size());
    out << std::left << std::setw(static_cast<int>(label_w)) << "Dataset"
        << " | " << std::setw(10) << "k=1"
        << " | " << std::setw(10) << "k=25"
        << " | " << std::setw(10) << "k=50"
        << " | Average appearance k>=25\n";
    out << std::string(label_w, '-') << "-+-" << std::string(10, '-') << "-+-" << std::string(10, '-') << "-+-"
        << std::string(10, '-') << "-+-" << std::string(24, '-') << '\n';
    out << std::setw(static_cast<int>(label_w)) << dataset_label << " | " << std::setw(10) << coverage(1) << " | "
        << std::setw(10) << coverage(25) << " | " << std::setw(10) << coverage(50) << " | " << avg_cell.str()
        << '\n';
    out << std::right;
}

std::vector<std::vector<ConceptId>> match_corpus(const Matcher& matcher, const std::vector<std::string>& corpus,
                                                 std::size_t workers) {
    std::vector<std::vector<ConceptId>> out(corpus.size());
    for_each_bounded(corpus.size(), workers, [&](std::size_t i) { out[i] = matcher.match(corpus[i]); });
    return out;
}

ConceptStats stats_from_matches(std::size_t concept_count, const std::vector<std::vector<ConceptId>>& matches) {
    ConceptStats stats;
    stats.counts.assign(concept_count, 0);
    stats.caption_count = matches.size();
    for (const auto& ids : matches) {
        for (ConceptId id : ids) ++stats.counts.at(id);
    }
    return stats;
}

ConceptStats corpus_stats(const Matcher& matcher, const std::vector<std::string>& corpus) {
    ConceptStats stats;
    stats.counts.assign(matcher.concept_count(), 0);
    stats.caption_count = corpus.size();
    for (const auto& caption : corpus) {
        for (ConceptId id : matcher.match(caption)) ++stats.counts[id];
    }
    return stats;
}

}  // namespace synthpair
