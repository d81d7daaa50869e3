// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "reference_metrics.hpp"
#include "support.hpp"
#include "synthpair/balancer.hpp"
#include "synthpair/concept_bank.hpp"
#include "synthpair/concept_matcher.hpp"
#include "synthpair/eval_harness.hpp"
#include "synthpair/pipeline.hpp"

using namespace synthpair;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(const char* id, bool ok, const std::string& detail) {
    std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

// 1 --------------------------------------------------------------------------
void delta_mtl_reproduction() {
    using namespace testing;
    const auto t0 = Clock::now();
    const double big = delta_mtl(kSynthLarge, kRealSmall);
    const double small = delta_mtl(kSynthSmall, kRealSmall);
    const double vs_large = delta_mtl(kSynthLarge, kRealLarge);
    const double secs = seconds_since(t0);
    char rounded[32];
    std::snprintf(rounded, sizeof rounded, "%+.1f", big);
    const bool ok = std::string(rounded) == "+60.1" && std::abs(small - -5.6) <= 0.2 &&
                    std::abs(vs_large - 0.2) <= 0.1 && secs < 1.0;
    report("1 delta-mtl", ok,
           std::string(rounded) + fmt(" / %+.2f / %+.2f (want +60.1, -5.6+-0.2, +0.2+-0.1), %.3f s", small, vs_large, secs));
}

// 2 --------------------------------------------------------------------------
MatchTable zipf_table(std::size_t captions, std::size_t concepts, std::mt19937_64& rng) {
    std::vector<double> w(concepts);
    for (std::size_t i = 0; i < concepts; ++i) w[i] = 1.0 / static_cast<double>(i + 1);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    std::vector<std::vector<ConceptId>> m(captions);
    for (auto& row : m) {
        const auto k = rng() % 4;  // 0..3 concepts, some captions unmatched
        for (std::uint64_t j = 0; j < k; ++j) row.push_back(static_cast<ConceptId>(pick(rng)));
    }
    return MatchTable::from_matches(concepts, std::move(m));
}

std::vector<CaptionRecord> records(std::size_t n) {
    std::vector<CaptionRecord> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i].id = static_cast<CaptionId>(i);
    return out;
}

void balancer_equivalence() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);

    // Keep probabilities against brute force on small corpora.
    std::size_t prob_mismatch = 0, checked = 0;
    for (int inst = 0; inst < 200; ++inst) {
        const std::size_t n = 1 + rng() % 1000;
        const auto table = zipf_table(n, 1 + rng() % 60, rng);
        if (table.matchable() == 0) continue;
        const std::size_t target = 1 + rng() % table.matchable();
        const auto plan = make_plan(table, target, 0.5, Combiner::Max);
        for (std::size_t i = 0; i < n; ++i) {
            double brute = 0.0;
            for (ConceptId c : table.matches[i]) {
                std::uint64_t cnt = 0;
                for (const auto& row : table.matches) cnt += std::count(row.begin(), row.end(), c) ? 1 : 0;
                brute = std::max(brute, std::min(1.0, plan.t_threshold / static_cast<double>(cnt)));
            }
            ++checked;
            if (plan.keep_prob[i] != brute) ++prob_mismatch;
        }
    }

    // Subset size: mean over 1000 seeds on a 1000-caption corpus, and every
    // seed on a 200k-caption corpus.
    const auto small = zipf_table(1000, 50, rng);
    const std::size_t small_target = 400;
    const auto small_plan = make_plan(small, small_target, 0.5, Combiner::Max);
    const auto small_recs = records(1000);
    double sum = 0.0;
    std::size_t small_outside = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        const double size = static_cast<double>(sample_balanced(small_recs, small_plan, s).size());
        sum += size;
        if (std::abs(size - small_target) > 0.02 * small_target) ++small_outside;
    }
    const double mean_err = std::abs(sum / 1000 - small_target) / small_target;

    const auto large = zipf_table(200000, 3000, rng);
    const std::size_t large_target = 100000;
    const auto large_plan = make_plan(large, large_target, 0.5, Combiner::Max);
    const auto large_recs = records(200000);
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        const double size = static_cast<double>(sample_balanced(large_recs, large_plan, s).size());
        worst = std::max(worst, std::abs(size - large_target) / large_target);
    }

    const auto example = MatchTable::from_matches(3, {{0}, {0}, {0}, {1}, {2}});
    const double t_example = solve_threshold(example, 3, 0.5, Combiner::Max);
    const double secs = seconds_since(t0);
    const bool ok = prob_mismatch == 0 && mean_err <= 0.02 && worst <= 0.02 && t_example == 1.0 && secs < 30.0;
    report("2 balancer", ok,
           std::to_string(prob_mismatch) + "/" + std::to_string(checked) + " keep-prob mismatches; " +
               fmt("1k corpus mean size error %.3f%% (%.0f of 1000 seeds beyond 2%%); 200k corpus worst seed %.3f%%; "
                   "example t=%.17g",
                   100 * mean_err, static_cast<double>(small_outside), 100 * worst, t_example) +
               fmt(", %.1f s", secs));
}

// 3 --------------------------------------------------------------------------
void matcher_equivalence() {
    const auto t0 = Clock::now();
    testing::WordGen gen(77);
    std::size_t mismatches = 0;
    for (int inst = 0; inst < 10000; ++inst) {
        std::vector<std::string> raw;
        const std::size_t bank_size = 1 + gen.below(200);
        for (std::size_t i = 0; i < bank_size; ++i) raw.push_back(gen.phrase(3));
        const auto bank = ConceptBank::from_texts(raw);
        const Matcher matcher(bank);
        const auto caption = gen.caption(40);
        const auto got = matcher.match(caption);
        const std::set<std::size_t> got_set(got.begin(), got.end());
        if (got_set != testing::oracle_match(bank.texts(), caption)) ++mismatches;
    }
    const auto bank = ConceptBank::from_texts({"bird", "tree", "bird tree", "rest", "resting on"});
    const auto hits = Matcher(bank).match("a bird is resting on a tree");
    std::set<std::string> named;
    for (auto id : hits) named.insert(bank.text(id));
    const bool example = named == std::set<std::string>{"bird", "tree", "resting on"};
    const auto plain = ConceptBank::from_texts({"bird", "tree"});
    const bool example_plain = Matcher(plain).match("a bird is resting on a tree").size() == 2;
    const double secs = seconds_since(t0);
    report("3 matcher", mismatches == 0 && example && example_plain && secs < 60.0,
           std::to_string(mismatches) + " mismatches over 10000 instances; bird/tree example " +
               (example && example_plain ? "ok" : "wrong") + fmt(", %.1f s", secs));
}

// 4 --------------------------------------------------------------------------
void gradient_check() {
    std::mt19937_64 rng(4);
    double worst = 0.0, worst_entry = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto in = testing::random_instance(rng);
        const auto r = testing::gradcheck(in.params, in.text, in.image);
        worst = std::max(worst, r.rel_error);
        worst_entry = std::max(worst_entry, r.max_entry_rel_error);
    }
    report("4 gradients", worst < 1e-5,
           fmt("max relative error %.3e over 100 instances (want < 1e-5); worst single entry %.3e", worst, worst_entry));
}

// 5 --------------------------------------------------------------------------
void loss_invariants() {
    double worst_uniform = 0.0;
    std::mt19937_64 rng(5);
    for (int b = 2; b <= 64; ++b) {
        EncoderParams p;
        p.w_text = Matrix::Identity(4, 4);
        p.w_image = Matrix::Identity(4, 4);
        p.log_tau = std::log(0.07);
        Matrix same(b, 4);
        for (int r = 0; r < b; ++r) same.row(r) << 0.3, -1.0, 2.0, 0.5;
        worst_uniform = std::max(worst_uniform, std::abs(clip_loss_and_grad(p, same, same).loss - std::log(b)));
    }
    std::size_t inexact = 0;
    for (int k = 0; k < 200; ++k) {
        const auto in = testing::random_instance(rng);
        const auto b = in.text.rows();
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(b));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix t(b, in.text.cols()), im(b, in.image.cols());
        for (Eigen::Index r = 0; r < b; ++r) {
            t.row(r) = in.text.row(perm[static_cast<std::size_t>(r)]);
            im.row(r) = in.image.row(perm[static_cast<std::size_t>(r)]);
        }
        if (clip_loss_and_grad(in.params, in.text, in.image).loss != clip_loss_and_grad(in.params, t, im).loss) ++inexact;
    }
    report("5 loss invariants", worst_uniform <= 1e-12 && inexact == 0,
           fmt("uniform batch |loss - ln B| max %.2e for B=2..64; ", worst_uniform) + std::to_string(inexact) +
               "/200 permutations changed the loss");
}

// 6 --------------------------------------------------------------------------
void end_to_end() {
    const auto t0 = Clock::now();
    testing::TempDir a("accept_a"), b("accept_b");
    auto run = [](const testing::TempDir& dir) {
        RunConfig cfg;
        cfg.concepts = std::filesystem::path(SYNTHPAIR_SOURCE_DIR) / "data" / "concepts_100.txt";
        cfg.workdir = dir.path();
        cfg.mock = true;
        cfg.seed = 7;
        cfg.generation.n_per_concept = 2;
        cfg.target_size = 150;
        cfg.propagate();
        cfg.validate();
        Backends be(cfg);
        return run_pipeline(cfg, be);
    };
    const auto sa = run(a);
    const double secs = seconds_since(t0) / 2;
    run(b);
    const auto& eval = sa["results"].back();
    auto worst_direction = [&](const char* key) {
        return std::min(eval[key]["image_to_text"].get<double>(), eval[key]["text_to_image"].get<double>());
    };
    const double train_r = worst_direction("train_recall");
    const double held_r = worst_direction("heldout_recall");
    const double zs = eval["metrics"]["zero_shot"].get<double>();
    const std::size_t classes = eval["classes"].size();
    const bool same = read_file(a / artifact::kManifest) == read_file(b / artifact::kManifest) &&
                      read_file(a / artifact::kParams) == read_file(b / artifact::kParams);
    const bool ok = secs < 600 && train_r >= 95 && held_r >= 80 && zs >= 80 && classes == 4 && same;
    report("6 mock pipeline", ok,
           fmt("train R@1 %.1f%%, held-out R@1 %.1f%%, zero-shot %.1f%% over ", train_r, held_r, zs) +
               std::to_string(classes) + " classes; runs " + (same ? "bit-identical" : "DIFFER") +
               fmt("; %.1f s per run", secs));
}

// 7 --------------------------------------------------------------------------
void concept_statistics() {
    std::mt19937_64 rng(7);
    std::vector<std::string> concepts;
    for (int i = 0; i < 300; ++i) concepts.push_back("concept" + std::to_string(i));
    concepts.push_back("red kite");
    concepts.push_back("kite");
    const auto bank = ConceptBank::from_texts(concepts);
    std::vector<double> w(bank.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), 0.8);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    std::vector<std::string> corpus(10000);
    for (auto& c : corpus) {
        c = "A view of";
        const auto k = rng() % 4;
        for (std::uint64_t j = 0; j < k; ++j) c += (j ? " and " : " ") + bank.text(static_cast<ConceptId>(pick(rng)));
        if (rng() % 10 == 0) c += " concept" + std::to_string(rng() % 300) + "x";  // near miss
        c += ".";
    }
    const auto stats = corpus_stats(Matcher(bank), corpus);

    std::vector<std::uint64_t> naive(bank.size(), 0);
    for (const auto& c : corpus) {
        for (auto id : testing::oracle_match(bank.texts(), c)) ++naive[id];
    }
    auto cov = [&](std::uint64_t k) {
        return static_cast<std::size_t>(std::count_if(naive.begin(), naive.end(), [&](auto n) { return n >= k; }));
    };
    std::uint64_t sum25 = 0;
    for (auto n : naive) sum25 += n >= 25 ? n : 0;
    const double avg = static_cast<double>(sum25) / static_cast<double>(cov(25));

    std::ostringstream table;
    stats.write_table(table, "constructed");
    const bool format = table.str().find("k=1") != std::string::npos && table.str().find("k=25") != std::string::npos &&
                        table.str().find("k=50") != std::string::npos &&
                        table.str().find("Average appearance k>=25") != std::string::npos;
    const bool ok = stats.counts == naive && stats.coverage(1) == cov(1) && stats.coverage(25) == cov(25) &&
                    stats.coverage(50) == cov(50) && stats.average_appearance(25) == avg && format;
    report("7 concept statistics", ok,
           "k=1 " + std::to_string(stats.coverage(1)) + "/" + std::to_string(cov(1)) + ", k=25 " +
               std::to_string(stats.coverage(25)) + "/" + std::to_string(cov(25)) + ", k=50 " +
               std::to_string(stats.coverage(50)) + "/" + std::to_string(cov(50)) +
               fmt(", avg %.6f/%.6f", stats.average_appearance(25), avg) + (format ? ", table emitted" : ", bad table"));
}

// 8 --------------------------------------------------------------------------
void nsfw_plumbing() {
    const std::string expected_prompt =
        "You will be my assistant in flagging concepts that might be NSFW meaning they are sexual, harmful, racist, "
        "abusive or explicit content. You will be presented with a concept and you will return 1 if the sample is "
        "NSFW and 0 otherwise. You will only return either 1 or 0 and nothing else. No explanations or anything are "
        "needed. Only flag concepts you are sure about being NSFW.";
    std::vector<std::string> texts;
    for (int i = 0; i < 400; ++i) texts.push_back("item " + std::to_string(i));
    const auto bank = ConceptBank::from_texts(texts);
    std::set<std::string> deny;
    for (int i = 0; i < 400; i += 16) deny.insert("item " + std::to_string(i));  // 25 of 400
    MockNsfwClient client(deny);
    NsfwOptions opts;
    opts.concurrency = 4;
    const auto rep = flag_nsfw(bank, client, opts);
    const double planted = static_cast<double>(deny.size()) / static_cast<double>(bank.size());
    const auto prompts = client.system_prompts();
    const bool prompts_ok = prompts.size() == bank.size() &&
                            std::all_of(prompts.begin(), prompts.end(), [&](const auto& p) { return p == expected_prompt; });
    report("8 nsfw filter", rep.flagged_fraction == planted && prompts_ok,
           fmt("flagged_fraction %.17g, planted %.17g; ", rep.flagged_fraction, planted) +
               (prompts_ok ? "system prompt byte-identical on every request" : "system prompt differs"));
}

}  // namespace

int main() {
    delta_mtl_reproduction();
    balancer_equivalence();
    matcher_equivalence();
    gradient_check();
    loss_invariants();
    end_to_end();
    concept_statistics();
    nsfw_plumbing();
    std::printf("%d of 8 criteria failed\n", failures);
    return failures;
}
