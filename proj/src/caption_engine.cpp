#include "synthpair/caption_engine.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <unordered_set>

#include "synthpair/common.hpp"
#include "synthpair/parallel.hpp"

namespace synthpair {

void GenerationConfig::validate() const {
    if (n_per_concept < 1) throw Error("n_per_concept must be >= 1");
    if (max_words < 15) throw Error("max_words must be >= 15");
    if (max_attempts < 1) throw Error("max_attempts must be >= 1");
}

std::string_view to_string(RejectReason r) {
    switch (r) {
        case RejectReason::Empty: return "empty";
        case RejectReason::TooLong: return "too_long";
        case RejectReason::MultiOutput: return "multi_output";
    }
    return "unknown";
}

std::string caption_prompt(std::string_view concept_text) {
    if (concept_text.empty()) throw Error("caption prompt: empty concept");
    if (normalize_text(concept_text) != concept_text) {
        throw Error("caption prompt: concept is not normalized: '" + std::string(concept_text) + "'");
    }
    std::string p;
    p += "Your task is to write me an image caption that includes and visually describes a scene around a "
         "concept. Your concept is ";
    p += concept_text;
    p += ". Output one single grammatically correct caption that is no longer than 15 words. Do not output "
         "any notes, word counts, facts, etc. Output one single sentence only.";
    return p;
}

PromptRequest build_prompt(std::string_view concept_text, const SamplingParams& sampling) {
    return {std::string(concept_text), caption_prompt(concept_text), sampling};
}

// ---------------------------------------------------------------------------
// Cleaning

namespace {

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }
bool ends_with(std::string_view s, std::string_view p) {
    return s.size() >= p.size() && s.substr(s.size() - p.size()) == p;
}

bool is_list_item(std::string_view line) {
    line = trim(line);
    if (line.empty()) return false;
    if (line[0] == '-' || line[0] == '*' || starts_with(line, "\xE2\x80\xA2")) return true;
    std::size_t i = 0;
    while (i < line.size() && line[i] >= '0' && line[i] <= '9') ++i;
    return i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')');
}

// "Caption:", "Image caption 2:", "Output:" and similar.
std::string_view strip_label(std::string_view s) {
    static constexpr std::array<std::string_view, 7> kLabels = {
        "caption", "image caption", "prompt", "output", "answer", "description", "sentence"};
    const auto colon = s.find(':');
    if (colon == std::string_view::npos || colon > 24) return s;
    std::string head = normalize_text(s.substr(0, colon));
    while (!head.empty() && head.back() >= '0' && head.back() <= '9') head.pop_back();
    head = normalize_text(head);
    for (auto label : kLabels) {
        if (head == label) return trim(s.substr(colon + 1));
    }
    return s;
}

std::string_view strip_quotes(std::string_view s) {
    struct Pair {
        std::string_view open, close;
    };
    static constexpr std::array<Pair, 3> kPairs = {
        Pair{"\"", "\""}, Pair{"\xE2\x80\x9C", "\xE2\x80\x9D"}, Pair{"'", "'"}};
    for (const auto& [open, close] : kPairs) {
        if (!starts_with(s, open)) continue;
        if (open == "'") {
            // Apostrophes are ambiguous; only peel a fully wrapped string.
            if (s.size() >= 2 && ends_with(s, close)) return trim(s.substr(1, s.size() - 2));
            return s;
        }
        const auto end = s.find(close, open.size());
        if (end == std::string_view::npos) return trim(s.substr(open.size()));
        return trim(s.substr(open.size(), end - open.size()));
    }
    // Lone trailing quote left over from a label-wrapped reply.
    if (ends_with(s, "\"") && std::count(s.begin(), s.end(), '"') % 2 == 1) return trim(s.substr(0, s.size() - 1));
    if (ends_with(s, "\xE2\x80\x9D") && s.find("\xE2\x80\x9C") == std::string_view::npos) {
        return trim(s.substr(0, s.size() - 3));
    }
    return s;
}

std::string_view first_sentence(std::string_view s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (c != '.' && c != '!' && c != '?') continue;
        std::size_t j = i;
        while (j + 1 < s.size() && (s[j + 1] == '.' || s[j + 1] == '!' || s[j + 1] == '?')) ++j;
        if (j + 1 == s.size() || is_space_byte(static_cast<unsigned char>(s[j + 1]))) return s.substr(0, j + 1);
        i = j;
    }
    return s;
}

std::string_view first_nonempty_line(std::string_view s) {
    std::size_t start = 0;
    while (start <= s.size()) {
        auto nl = s.find('\n', start);
        auto line = trim(s.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
        if (!line.empty()) return line;
        if (nl == std::string_view::npos) break;
        start = nl + 1;
    }
    return {};
}

}  // namespace

bool contains_concept(std::string_view text, std::string_view concept_text) {
    const std::string hay = normalize_text(text);
    const std::string needle = normalize_text(concept_text);
    if (needle.empty()) return false;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
        const auto end = pos + needle.size();
        const bool left_ok = pos == 0 || !is_word_byte(static_cast<unsigned char>(hay[pos - 1]));
        const bool right_ok = end == hay.size() || !is_word_byte(static_cast<unsigned char>(hay[end]));
        if (left_ok && right_ok) return true;
    }
    return false;
}

ValidationResult validate_caption(std::string_view raw, std::string_view concept_text, const GenerationConfig& cfg) {
    std::size_t list_lines = 0;
    for (const auto& line : split(raw, '\n')) list_lines += is_list_item(line) ? 1 : 0;
    if (list_lines >= 2) return Rejection{RejectReason::MultiOutput};

    std::string_view s = trim(raw);
    // Peel labels and quotes until stable; a label may sit on its own line.
    for (std::string_view prev; prev.data() != s.data() || prev.size() != s.size();) {
        prev = s;
        s = strip_label(s);
        s = first_nonempty_line(s);
        s = strip_quotes(s);
    }
    std::string text = collapse_whitespace(first_sentence(s));

    if (text.empty()) return Rejection{RejectReason::Empty};
    if (count_words(text) > static_cast<std::size_t>(cfg.max_words)) return Rejection{RejectReason::TooLong};

    CaptionRecord rec;
    rec.concept_absent = !contains_concept(text, concept_text);
    rec.text = std::move(text);
    return rec;
}

std::uint64_t request_seed(std::uint64_t run_seed, ConceptId concept_id, int n, int attempt) {
    return hash_values(run_seed, concept_id, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(attempt)) >>
           1;  // keep it representable as a signed 64-bit JSON integer
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct ConceptResult {
    std::vector<CaptionRecord> records;  ///< one per filled slot, in n order
    std::vector<int> slot_of;            ///< slot index n for each record
    GenerationSummary summary;
};

struct AttemptOutcome {
    std::optional<CaptionRecord> record;
    bool rejected = false;
    bool absent_dropped = false;
};

AttemptOutcome try_attempt(ChatClient& client, const ConceptBank& bank, ConceptId cid, int n, int attempt,
                           const GenerationConfig& cfg, std::uint64_t seed) {
    SamplingParams sp = cfg.sampling;
    sp.seed = request_seed(seed, cid, n, attempt);
    const auto& concept_text = bank.text(cid);
    ChatRequest req{cfg.model, {{"user", caption_prompt(concept_text)}}, sp};

    std::string raw;
    try {
        raw = client.complete(req);
    } catch (const EndpointUnavailable&) {
        throw;
    } catch (const Error&) {
        return {std::nullopt, true, false};
    }
    auto result = validate_caption(raw, concept_text, cfg);
    if (std::holds_alternative<Rejection>(result)) return {std::nullopt, true, false};
    auto rec = std::get<CaptionRecord>(std::move(result));
    if (rec.concept_absent && cfg.drop_concept_absent) return {std::nullopt, false, true};
    rec.source_concept_id = cid;
    rec.attempt = attempt;
    return {std::move(rec), false, false};
}

ConceptResult generate_for_concept(ChatClient& client, const ConceptBank& bank, ConceptId cid,
                                   const GenerationConfig& cfg, std::uint64_t seed) {
    ConceptResult out;
    for (int n = 0; n < cfg.n_per_concept; ++n) {
        bool filled = false;
        for (int attempt = 1; attempt <= cfg.max_attempts && !filled; ++attempt) {
            ++out.summary.requests;
            auto o = try_attempt(client, bank, cid, n, attempt, cfg, seed);
            if (o.rejected || o.absent_dropped) {
                ++out.summary.rejected;
                continue;
            }
            if (o.record->concept_absent) ++out.summary.concept_absent;
            out.records.push_back(std::move(*o.record));
            out.slot_of.push_back(n);
            filled = true;
        }
        if (!filled) ++out.summary.shortfall;
    }
    return out;
}

void accumulate(GenerationSummary& into, const GenerationSummary& s) {
    into.requests += s.requests;
    into.rejected += s.rejected;
    into.duplicates += s.duplicates;
    into.concept_absent += s.concept_absent;
    into.shortfall += s.shortfall;
}

}  // namespace

std::vector<CaptionRecord> generate_captions(const ConceptBank& bank, ChatClient& client,
                                             const GenerationConfig& cfg, std::uint64_t seed,
                                             const GenerationCheckpoint* resume, GenerationSummary* summary) {
    cfg.validate();
    std::vector<std::optional<ConceptResult>> results(bank.size());
    if (resume) {
        for (const auto& [cid, recs] : resume->completed) {
            if (cid >= bank.size()) throw Error("checkpoint references concept id outside the bank");
            ConceptResult r;
            r.records = recs;
            // Slot numbers are not persisted; records were stored in slot order.
            r.slot_of.resize(recs.size());
            std::iota(r.slot_of.begin(), r.slot_of.end(), 0);
            results[cid] = std::move(r);
        }
    }

    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        if (!results[i]) todo.push_back(i);
    }

    auto make_checkpoint = [&] {
        GenerationCheckpoint cp;
        for (std::size_t i = 0; i < results.size(); ++i) {
            if (results[i]) cp.completed[static_cast<ConceptId>(i)] = results[i]->records;
        }
        return cp;
    };

    try {
        for_each_bounded(todo.size(), cfg.concurrency, [&](std::size_t k) {
            const auto cid = static_cast<ConceptId>(todo[k]);
            results[cid] = generate_for_concept(client, bank, cid, cfg, seed);
        });
    } catch (const EndpointUnavailable& e) {
        throw GenerationAborted(e.what(), make_checkpoint());
    }

    GenerationSummary total;
    for (const auto& r : results) accumulate(total, r->summary);

    // Global exact-duplicate removal, sequential so the outcome does not depend
    // on request completion order.
    std::vector<CaptionRecord> out;
    std::unordered_set<std::string> seen;
    try {
        for (std::size_t cid = 0; cid < results.size(); ++cid) {
            auto& r = *results[cid];
            for (std::size_t k = 0; k < r.records.size(); ++k) {
                auto rec = r.records[k];
                if (cfg.dedup && seen.count(rec.text)) {
                    ++total.duplicates;
                    std::optional<CaptionRecord> replacement;
                    for (int attempt = rec.attempt + 1; attempt <= cfg.max_attempts && !replacement; ++attempt) {
                        ++total.requests;
                        auto o = try_attempt(client, bank, static_cast<ConceptId>(cid), r.slot_of[k], attempt, cfg,
                                             seed);
                        if (!o.record) {
                            ++total.rejected;
                            continue;
                        }
                        if (seen.count(o.record->text)) {
                            ++total.duplicates;
                            continue;
                        }
                        replacement = std::move(o.record);
                    }
                    if (!replacement) {
                        ++total.shortfall;
                        continue;
                    }
                    rec = std::move(*replacement);
                }
                seen.insert(rec.text);
                out.push_back(std::move(rec));
            }
        }
    } catch (const EndpointUnavailable& e) {
        throw GenerationAborted(e.what(), make_checkpoint());
    }

    for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<CaptionId>(i);
    if (summary) *summary = total;
    return out;
}

void write_captions(std::ostream& out, const std::vector<CaptionRecord>& records) {
    for (const auto& r : records) {
        if (r.text.find_first_of("\t\n") != std::string::npos) {
            throw Error("caption " + std::to_string(r.id) + " contains a tab or newline");
        }
        out << r.id << '\t' << r.source_concept_id << '\t' << r.text << '\n';
    }
}

std::vector<CaptionRecord> read_captions(std::istream& in) {
    std::vector<CaptionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split(line, '\t');
        if (fields.size() != 3) throw Error("captions line " + std::to_string(lineno) + ": expected 3 fields");
        CaptionRecord r;
        try {
            r.id = static_cast<CaptionId>(std::stoul(fields[0]));
            r.source_concept_id = static_cast<ConceptId>(std::stoul(fields[1]));
        } catch (const std::exception&) {
            throw Error("captions line " + std::to_string(lineno) + ": bad integer field");
        }
        r.text = std::move(fields[2]);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mock LLM

namespace {

constexpr std::array<std::string_view, 40> kAdjectives = {
    "quiet",   "bright",  "small",   "weathered", "colorful", "lonely",  "sleek",    "ancient",
    "tiny",    "golden",  "misty",   "vivid",     "rustic",   "gentle",  "shiny",    "old",
    "huge",    "pale",    "dusty",   "glossy",    "wooden",   "frosty",  "sunny",    "muddy",
    "painted", "striped", "spotted", "polished",  "faded",    "curious", "sleepy",   "proud",
    "fuzzy",   "silver",  "crimson", "elegant",   "battered", "vintage", "cheerful", "sturdy"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& words, std::uint64_t h, std::uint64_t salt) {
    return words[hash_combine(h, salt) % N];
}

bool starts_with_vowel(std::string_view w) {
    return !w.empty() && std::string_view("aeiou").find(w[0]) != std::string_view::npos;
}

}  // namespace

std::string MockChatClient::caption_for(std::string_view concept_text, std::uint64_t seed) {
    const std::uint64_t h = hash_combine(fnv1a64(concept_text), seed);
    const auto adj = pick(kAdjectives, h, 1);
    std::string s = starts_with_vowel(adj) ? "An " : "A ";
    s += adj;
    s += ' ';
    s += concept_text;
    s += '.';
    return s;
}

std::string MockChatClient::complete(const ChatRequest& req) {
    static constexpr std::string_view kMarker = "Your concept is ";
    static constexpr std::string_view kAfter = ". Output one single";
    std::string_view prompt;
    for (const auto& m : req.messages) {
        if (m.role == "user") prompt = m.content;
    }
    const auto a = prompt.find(kMarker);
    const auto b = prompt.find(kAfter, a == std::string_view::npos ? 0 : a);
    if (a == std::string_view::npos || b == std::string_view::npos) throw Error("mock llm: unrecognized prompt");
    const std::string concept_text(prompt.substr(a + kMarker.size(), b - a - kMarker.size()));

    {
        std::lock_guard lock(mu_);
        ++calls_;
        if (invalid_first_.count(concept_text) && !served_invalid_.count(concept_text)) {
            served_invalid_.insert(concept_text);
            std::string runon = "This caption about " + concept_text;
            static constexpr std::array<std::string_view, 6> kFiller = {"keeps", "going", "and", "going",
                                                                       "without", "pause"};
            std::size_t i = 0;
            while (count_words(runon) < 30) runon += " " + std::string(kFiller[i++ % kFiller.size()]);
            return runon;
        }
    }
    return caption_for(concept_text, req.sampling.seed);
}

std::size_t MockChatClient::calls() const {
    std::lock_guard lock(mu_);
    return calls_;
}

}  // namespace synthpair
