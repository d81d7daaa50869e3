#include "synthpair/concept_bank.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>

#include "synthpair/common.hpp"
#include "synthpair/concept_matcher.hpp"
#include "synthpair/parallel.hpp"

namespace synthpair {

ConceptBank ConceptBank::from_texts(std::vector<std::string> texts, std::string name) {
    ConceptBank bank;
    bank.name_ = std::move(name);
    bank.texts_.reserve(texts.size());
    for (auto& t : texts) {
        auto norm = normalize_text(t);
        if (!norm.empty()) bank.texts_.push_back(std::move(norm));
    }
    std::sort(bank.texts_.begin(), bank.texts_.end());
    bank.texts_.erase(std::unique(bank.texts_.begin(), bank.texts_.end()), bank.texts_.end());
    return bank;
}

ConceptId ConceptBank::find(std::string_view normalized) const {
    auto it = std::lower_bound(texts_.begin(), texts_.end(), normalized);
    if (it == texts_.end() || *it != normalized) return npos;
    return static_cast<ConceptId>(it - texts_.begin());
}

ConceptBank ConceptBank::select(const std::vector<ConceptId>& ids, std::string name) const {
    std::vector<ConceptId> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    ConceptBank out;
    out.name_ = std::move(name);
    out.texts_.reserve(sorted.size());
    // Ids are sorted-text positions, so ascending ids keep the texts sorted.
    for (ConceptId id : sorted) out.texts_.push_back(texts_.at(id));
    return out;
}

void ConceptBank::write(std::ostream& out) const {
    for (const auto& t : texts_) out << t << '\n';
}

ConceptBank load_concepts(std::istream& in, std::string name) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    auto bank = ConceptBank::from_texts(std::move(lines), std::move(name));
    if (bank.empty()) throw Error("empty concept bank");
    return bank;
}

ConceptBank load_concepts_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open concept file: " + path);
    return load_concepts(in, path);
}

ConceptBank random_subset(const ConceptBank& bank, std::size_t n, std::uint64_t seed) {
    if (n > bank.size()) {
        throw Error("random_subset: requested " + std::to_string(n) + " of " + std::to_string(bank.size()) +
                    " concepts");
    }
    std::vector<ConceptId> ids(bank.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<ConceptId>(i);
    // Partial Fisher-Yates: the first n slots are a uniform sample.
    Rng rng(hash_values(seed, 0x5eb5e7ULL));
    for (std::size_t i = 0; i < n; ++i) {
        auto j = i + static_cast<std::size_t>(rng.below(ids.size() - i));
        std::swap(ids[i], ids[j]);
    }
    ids.resize(n);
    return bank.select(ids, bank.name() + ":rand" + std::to_string(n));
}

ConceptBank derive_subset_from_corpus(const ConceptBank& bank, const std::vector<std::string>& corpus,
                                      const Matcher& matcher) {
    std::vector<bool> seen(bank.size(), false);
    for (const auto& caption : corpus) {
        for (ConceptId id : matcher.match(caption)) seen[id] = true;
    }
    std::vector<ConceptId> ids;
    for (std::size_t i = 0; i < seen.size(); ++i) {
        if (seen[i]) ids.push_back(static_cast<ConceptId>(i));
    }
    return bank.select(ids, bank.name() + ":corpus");
}

// ---------------------------------------------------------------------------

const std::string_view kNsfwSystemPrompt =
    "You will be my assistant in flagging concepts that might be NSFW meaning they are sexual, harmful, "
    "racist, abusive or explicit content. You will be presented with a concept and you will return 1 if "
    "the sample is NSFW and 0 otherwise. You will only return either 1 or 0 and nothing else. No "
    "explanations or anything are needed. Only flag concepts you are sure about being NSFW.";

void NsfwFlagReport::recompute_fraction() {
    const auto n = flags.size();
    const auto flagged = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
    flagged_fraction = n == 0 ? 0.0 : static_cast<double>(flagged) / static_cast<double>(n);
}

void NsfwFlagReport::write(std::ostream& out, const ConceptBank& bank) const {
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (!decided[i]) continue;
        out << i << '\t' << bank.text(static_cast<ConceptId>(i)) << '\t' << (flags[i] ? '1' : '0') << '\n';
    }
}

ChatRequest build_nsfw_request(std::string_view concept_text, const NsfwOptions& opts) {
    ChatRequest req;
    req.model = opts.model;
    req.messages = {{"system", std::string(kNsfwSystemPrompt)}, {"user", std::string(concept_text)}};
    req.sampling.temperature = 0.0;
    req.sampling.top_p = 1.0;
    req.sampling.presence_penalty = 0.0;
    req.sampling.frequency_penalty = 0.0;
    req.sampling.max_tokens = 2;
    req.sampling.seed = 0;
    return req;
}

NsfwFlagReport flag_nsfw(const ConceptBank& bank, ChatClient& classifier, const NsfwOptions& opts) {
    NsfwFlagReport report;
    report.flags.assign(bank.size(), false);
    report.decided.assign(bank.size(), false);
    // vector<bool> is not safe for concurrent element writes; stage into bytes.
    std::vector<unsigned char> flag(bank.size(), 0), done(bank.size(), 0);
    std::mutex warn_mu;
    std::size_t warnings = 0;

    try {
        for_each_bounded(bank.size(), opts.concurrency, [&](std::size_t i) {
            const auto req = build_nsfw_request(bank.text(static_cast<ConceptId>(i)), opts);
            for (int attempt = 0; attempt <= opts.retries; ++attempt) {
                const auto reply = trim(classifier.complete(req));
                if (reply == "1" || reply == "0") {
                    flag[i] = reply == "1";
                    done[i] = 1;
                    return;
                }
            }
            std::lock_guard lock(warn_mu);
            ++warnings;
            done[i] = 1;
        });
    } catch (const EndpointUnavailable& e) {
        for (std::size_t i = 0; i < bank.size(); ++i) {
            report.flags[i] = flag[i] != 0;
            report.decided[i] = done[i] != 0;
        }
        report.warnings = warnings;
        report.recompute_fraction();
        throw NsfwAborted(e.what(), std::move(report));
    }

    for (std::size_t i = 0; i < bank.size(); ++i) {
        report.flags[i] = flag[i] != 0;
        report.decided[i] = true;
    }
    report.warnings = warnings;
    report.recompute_fraction();
    return report;
}

std::string MockNsfwClient::complete(const ChatRequest& req) {
    std::string concept_text;
    std::lock_guard lock(mu_);
    for (const auto& m : req.messages) {
        if (m.role == "system") system_prompts_.push_back(m.content);
        if (m.role == "user") concept_text = m.content;
    }
    return denylist_.count(concept_text) ? "1" : "0";
}

std::vector<std::string> MockNsfwClient::system_prompts() const {
    std::lock_guard lock(mu_);
    return system_prompts_;
}

}  // namespace synthpair
