#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "synthpair/caption_engine.hpp"

using namespace synthpair;

namespace {

ConceptBank bank_of(std::vector<std::string> texts) { return ConceptBank::from_texts(std::move(texts)); }

GenerationConfig config(int n) {
    GenerationConfig cfg;
    cfg.n_per_concept = n;
    return cfg;
}

std::string serialized(const std::vector<CaptionRecord>& recs) {
    std::ostringstream out;
    write_captions(out, recs);
    return out.str();
}

const CaptionRecord& accepted(const ValidationResult& r) {
    REQUIRE(std::holds_alternative<CaptionRecord>(r));
    return std::get<CaptionRecord>(r);
}

RejectReason rejected(const ValidationResult& r) {
    REQUIRE(std::holds_alternative<Rejection>(r));
    return std::get<Rejection>(r).reason;
}

/// Replies from a fixed script, one entry per call, then repeats the last.
class ScriptClient final : public ChatClient {
public:
    explicit ScriptClient(std::vector<std::string> script) : script_(std::move(script)) {}
    std::string complete(const ChatRequest& req) override {
        std::lock_guard lock(mu_);
        seeds.push_back(req.sampling.seed);
        const auto i = std::min(calls_++, script_.size() - 1);
        return script_[i];
    }
    std::vector<std::uint64_t> seeds;

private:
    std::vector<std::string> script_;
    std::size_t calls_ = 0;
    std::mutex mu_;
};

/// Mock that fails with EndpointUnavailable after a number of calls.
class FlakyClient final : public ChatClient {
public:
    explicit FlakyClient(std::size_t budget) : budget_(budget) {}
    std::string complete(const ChatRequest& req) override {
        {
            std::lock_guard lock(mu_);
            if (budget_ == 0) throw EndpointUnavailable("connection refused");
            --budget_;
        }
        return inner_.complete(req);
    }

private:
    MockChatClient inner_;
    std::size_t budget_;
    std::mutex mu_;
};

}  // namespace

TEST_CASE("caption prompt is the fixed template with the concept inserted") {
    const std::string expected =
        "Your task is to write me an image caption that includes and visually describes a scene around a concept. "
        "Your concept is cat. Output one single grammatically correct caption that is no longer than 15 words. "
        "Do not output any notes, word counts, facts, etc. Output one single sentence only.";
    CHECK(caption_prompt("cat") == expected);
    CHECK(build_prompt("cat").prompt_text == expected);
    CHECK(caption_prompt("cat") == caption_prompt("cat"));
    CHECK_THROWS_AS(caption_prompt(""), Error);
    CHECK_THROWS_AS(caption_prompt(" Cat "), Error);
}

TEST_CASE("prompt sampling defaults") {
    const auto p = build_prompt("cat");
    CHECK(p.sampling.temperature == 0.7);
    CHECK(p.sampling.top_p == 0.95);
    CHECK(p.sampling.presence_penalty == 1.0);
    CHECK(p.sampling.frequency_penalty == 1.0);
    CHECK(p.sampling.max_tokens == 64);
}

TEST_CASE("validate_caption cleaning and rejection rules") {
    const auto cfg = config(1);
    const CaptionRecord ok = accepted(validate_caption("\"A fluffy cat lounging on a sunlit windowsill.\"", "cat", cfg));
    CHECK(ok.text == "A fluffy cat lounging on a sunlit windowsill.");
    CHECK_FALSE(ok.concept_absent);

    CHECK(accepted(validate_caption("Caption: \"A bird soars.\" Note: 4 words.", "bird", cfg)).text == "A bird soars.");
    CHECK(accepted(validate_caption("Caption:\n  A red  kite  flies. Extra.", "kite", cfg)).text == "A red kite flies.");
    CHECK(accepted(validate_caption("A dog runs.", "cat", cfg)).concept_absent);
    CHECK(accepted(validate_caption("A catalog.", "cat", cfg)).concept_absent);

    std::string runon;
    for (int i = 0; i < 50; ++i) runon += "word ";
    CHECK(rejected(validate_caption(runon, "word", cfg)) == RejectReason::TooLong);
    CHECK(rejected(validate_caption("   ", "cat", cfg)) == RejectReason::Empty);
    CHECK(rejected(validate_caption("\"\"", "cat", cfg)) == RejectReason::Empty);
    CHECK(rejected(validate_caption("1. A cat.\n2. Another cat.", "cat", cfg)) == RejectReason::MultiOutput);
    CHECK(rejected(validate_caption("- A cat.\n- A dog.", "cat", cfg)) == RejectReason::MultiOutput);
}

TEST_CASE("word limit is inclusive") {
    auto cfg = config(1);
    std::string s;
    for (int i = 0; i < 25; ++i) s += (i ? " w" : "w");
    CHECK(accepted(validate_caption(s, "w", cfg)).text == s);
    CHECK(rejected(validate_caption(s + " w", "w", cfg)) == RejectReason::TooLong);
}

TEST_CASE("validation is a fixpoint on accepted text") {
    testing::WordGen gen(23);
    const auto cfg = config(1);
    static const std::vector<std::string> decor = {"", "Caption: ", "\"", "Output 2: \"", "\xE2\x80\x9C"};
    for (int i = 0; i < 3000; ++i) {
        std::string raw = decor[gen.below(decor.size())] + gen.caption(30);
        if (gen.below(2)) raw += gen.below(2) ? ". Note: more." : "\"";
        const auto r = validate_caption(raw, "ab", cfg);
        if (!std::holds_alternative<CaptionRecord>(r)) continue;
        const auto& first = std::get<CaptionRecord>(r);
        CHECK(count_words(first.text) <= 25);
        const auto again = validate_caption(first.text, "ab", cfg);
        REQUIRE(std::holds_alternative<CaptionRecord>(again));
        CHECK(std::get<CaptionRecord>(again).text == first.text);
    }
}

TEST_CASE("contains_concept uses word boundaries on normalized text") {
    CHECK(contains_concept("A Bird is here", "bird"));
    CHECK(contains_concept("the ice  cream truck", "ice cream"));
    CHECK_FALSE(contains_concept("a catalog", "cat"));
    CHECK_FALSE(contains_concept("", "cat"));
    CHECK(contains_concept("cat", "cat"));
}

TEST_CASE("mock generation yields N captions per concept, each containing it") {
    const auto bank = bank_of({"cat", "ice cream", "tree"});
    MockChatClient mock;
    GenerationSummary s;
    const auto recs = generate_captions(bank, mock, config(2), 5, nullptr, &s);
    REQUIRE(recs.size() == 6);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(recs[i].id == i);
        CHECK(recs[i].source_concept_id == i / 2);
        CHECK(testing::oracle_match({bank.text(recs[i].source_concept_id)}, recs[i].text).size() == 1);
        CHECK_FALSE(recs[i].concept_absent);
    }
    CHECK(s.shortfall == 0);
}

TEST_CASE("mock caption is keyed by the request seed") {
    const auto bank = bank_of({"cat", "dog"});
    ScriptClient probe({"A cat."});
    generate_captions(bank, probe, config(1), 9);
    MockChatClient mock;
    const auto recs = generate_captions(bank, mock, config(1), 9);
    CHECK(recs[0].text == MockChatClient::caption_for("cat", request_seed(9, 0, 0, 1)));
    CHECK(recs[1].text == MockChatClient::caption_for("dog", request_seed(9, 1, 0, 1)));
    std::set<std::uint64_t> seeds(probe.seeds.begin(), probe.seeds.end());
    CHECK(seeds.count(request_seed(9, 0, 0, 1)) == 1);
    CHECK(seeds.count(request_seed(9, 1, 0, 1)) == 1);
}

TEST_CASE("a rejected first reply is retried") {
    const auto bank = bank_of({"cat", "dog"});
    MockChatClient mock;
    mock.set_invalid_first({"dog"});
    GenerationSummary s;
    const auto recs = generate_captions(bank, mock, config(1), 1, nullptr, &s);
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].attempt == 1);
    CHECK(recs[1].attempt == 2);
    CHECK(s.rejected == 1);
}

TEST_CASE("exhausted attempts are a shortfall, not an error") {
    const auto bank = bank_of({"cat"});
    std::string runon;
    for (int i = 0; i < 40; ++i) runon += "cat ";
    ScriptClient client({runon});
    GenerationSummary s;
    const auto recs = generate_captions(bank, client, config(2), 1, nullptr, &s);
    CHECK(recs.empty());
    CHECK(s.shortfall == 2);
    CHECK(s.requests == 8);
}

TEST_CASE("duplicates across the run are dropped and regenerated") {
    const auto bank = bank_of({"cat"});
    ScriptClient client({"A cat.", "A cat.", "A cat sits."});
    GenerationSummary s;
    const auto recs = generate_captions(bank, client, config(2), 1, nullptr, &s);
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].text == "A cat.");
    CHECK(recs[1].text == "A cat sits.");
    CHECK(s.duplicates == 1);

    auto no_dedup = config(2);
    no_dedup.dedup = false;
    ScriptClient again({"A cat."});
    CHECK(generate_captions(bank, again, no_dedup, 1).size() == 2);
}

TEST_CASE("drop_concept_absent removes captions without the concept") {
    const auto bank = bank_of({"cat"});
    ScriptClient client({"A dog.", "A cat."});
    auto cfg = config(1);
    cfg.drop_concept_absent = true;
    const auto recs = generate_captions(bank, client, cfg, 1);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].text == "A cat.");
    CHECK(recs[0].attempt == 2);
}

TEST_CASE("mock generation is byte-identical across runs and concurrency levels") {
    std::vector<std::string> texts;
    for (int i = 0; i < 60; ++i) texts.push_back("thing " + std::to_string(i));
    const auto bank = bank_of(texts);
    auto cfg = config(3);
    MockChatClient a, b;
    cfg.concurrency = 1;
    const auto one = serialized(generate_captions(bank, a, cfg, 77));
    cfg.concurrency = 8;
    const auto eight = serialized(generate_captions(bank, b, cfg, 77));
    CHECK(one == eight);
    MockChatClient c;
    CHECK(serialized(generate_captions(bank, c, cfg, 78)) != one);
}

TEST_CASE("an endpoint failure checkpoints and a resume completes the run") {
    std::vector<std::string> texts;
    for (int i = 0; i < 20; ++i) texts.push_back("item " + std::to_string(i));
    const auto bank = bank_of(texts);
    auto cfg = config(2);
    cfg.concurrency = 1;
    MockChatClient full_client;
    const auto full = generate_captions(bank, full_client, cfg, 3);

    FlakyClient flaky(15);
    GenerationCheckpoint cp;
    try {
        generate_captions(bank, flaky, cfg, 3);
        FAIL("expected GenerationAborted");
    } catch (const GenerationAborted& e) {
        cp = e.checkpoint();
    }
    CHECK(cp.completed.size() == 7);
    MockChatClient rest;
    const auto resumed = generate_captions(bank, rest, cfg, 3, &cp);
    CHECK(serialized(resumed) == serialized(full));
    CHECK(rest.calls() < full_client.calls());
}

TEST_CASE("caption files round-trip and reject malformed lines") {
    std::vector<CaptionRecord> recs(2);
    recs[0] = {0, "A cat.", 4};
    recs[1] = {1, "A dog, running.", 7};
    std::istringstream in(serialized(recs));
    const auto back = read_captions(in);
    REQUIRE(back.size() == 2);
    CHECK(back[1].text == "A dog, running.");
    CHECK(back[1].source_concept_id == 7);

    std::istringstream bad("x\t1\tA cat.\n");
    CHECK_THROWS_AS(read_captions(bad), Error);
    recs[0].text = "tab\there";
    std::ostringstream out;
    CHECK_THROWS_AS(write_captions(out, recs), Error);
}

TEST_CASE("generation config validation") {
    auto cfg = config(0);
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = config(1);
    cfg.max_words = 14;
    CHECK_THROWS_AS(cfg.validate(), Error);
}
