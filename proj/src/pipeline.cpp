#include "synthpair/pipeline.hpp"

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include "synthpair/eval_harness.hpp"
#include "synthpair/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace synthpair {

WorkdirLock::WorkdirLock(const fs::path& workdir) {
    fs::create_directories(workdir);
    const auto path = workdir / artifact::kLock;
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("cannot open lock file " + path.string() + ": " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw Error("workdir " + workdir.string() + " is locked by another run");
    }
}

WorkdirLock::~WorkdirLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

Backends::Backends(const RunConfig& cfg) : cfg_(cfg) {
    if (cfg_.mock) {
        llm_ = std::make_unique<MockChatClient>();
        nsfw_ = std::make_unique<MockNsfwClient>();
        renderer_ = mock_renderer(cfg_.tti_params);
    } else {
        llm_ = std::make_unique<HttpChatClient>(cfg_.llm);
        nsfw_ = std::make_unique<HttpChatClient>(cfg_.nsfw);
        tti_ = std::make_unique<HttpImageClient>(cfg_.tti);
        renderer_ = remote_renderer(*tti_, cfg_.tti_params);
    }
}

Backends::~Backends() = default;

Renderer Backends::renderer_for(const std::string& backend) const {
    if (backend == "mock") return mock_renderer(cfg_.tti_params);
    if (backend == "remote") {
        if (!tti_) throw Error("dataset was rendered remotely; rerun without --mock to evaluate it");
        return remote_renderer(*tti_, cfg_.tti_params);
    }
    throw Error("unknown image backend '" + backend + "' in manifest");
}

// ---------------------------------------------------------------------------

namespace {

fs::path in_workdir(const RunConfig& cfg, const char* name) { return cfg.workdir / name; }

fs::path require(const RunConfig& cfg, const char* name, const char* stage) {
    auto p = in_workdir(cfg, name);
    if (!fs::exists(p)) throw MissingArtifact(p.string(), stage);
    return p;
}

ConceptBank load_bank(const RunConfig& cfg) {
    if (cfg.concepts.empty()) throw Error("no concept file: set [paths] concepts or pass --concepts");
    return load_concepts_file(cfg.concepts.string());
}

std::vector<CaptionRecord> load_captions(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return read_captions(in);
}

std::string captions_text(const std::vector<CaptionRecord>& recs) {
    std::ostringstream out;
    write_captions(out, recs);
    return out.str();
}

std::string iso_time_utc() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

template <typename Fn>
json logged(const RunConfig& cfg, const char* stage, Fn&& body) {
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
    };
    try {
        json summary = body();
        summary["stage"] = stage;
        summary["status"] = "ok";
        json line = summary;
        line["seed"] = cfg.seed;
        line["elapsed_ms"] = elapsed();
        line["time"] = iso_time_utc();
        append_run_log(cfg, line);
        return summary;
    } catch (const std::exception& e) {
        json line = {{"stage", stage}, {"status", "error"}, {"error", e.what()}, {"seed", cfg.seed},
                     {"elapsed_ms", elapsed()}, {"time", iso_time_utc()}};
        try {
            append_run_log(cfg, line);
        } catch (const std::exception&) {
            // The original failure is the one worth reporting.
        }
        throw;
    }
}

// Partial caption checkpoint: `concept_id<TAB>attempt<TAB>text`.
void write_partial(const fs::path& path, const GenerationCheckpoint& cp) {
    std::ostringstream out;
    for (const auto& [cid, recs] : cp.completed) {
        for (const auto& r : recs) out << cid << '\t' << r.attempt << '\t' << r.text << '\n';
    }
    atomic_write(path, out.str());
}

GenerationCheckpoint read_partial(const fs::path& path, const ConceptBank& bank) {
    GenerationCheckpoint cp;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split(line, '\t');
        if (f.size() != 3) throw Error(path.string() + ": malformed checkpoint line");
        CaptionRecord r;
        try {
            r.source_concept_id = static_cast<ConceptId>(std::stoul(f[0]));
            r.attempt = std::stoi(f[1]);
        } catch (const std::logic_error&) {
            throw Error(path.string() + ": malformed checkpoint line");
        }
        if (r.source_concept_id >= bank.size()) throw Error(path.string() + ": concept id outside the bank");
        r.text = f[2];
        r.concept_absent = !contains_concept(r.text, bank.text(r.source_concept_id));
        cp.completed[r.source_concept_id].push_back(std::move(r));
    }
    return cp;
}

}  // namespace

void append_run_log(const RunConfig& cfg, const json& line) {
    fs::create_directories(cfg.workdir);
    std::ofstream out(in_workdir(cfg, artifact::kRunLog), std::ios::app);
    if (!out) throw Error("cannot append to run.log in " + cfg.workdir.string());
    out << line.dump() << '\n';
}

// ---------------------------------------------------------------------------

json stage_gen_captions(const RunConfig& cfg, Backends& be) {
    return logged(cfg, "gen-captions", [&] {
        const auto bank = load_bank(cfg);
        fs::create_directories(cfg.workdir);
        const auto partial = in_workdir(cfg, artifact::kCaptionsPartial);
        std::optional<GenerationCheckpoint> resume;
        if (fs::exists(partial)) resume = read_partial(partial, bank);

        GenerationSummary s;
        std::vector<CaptionRecord> recs;
        try {
            recs = generate_captions(bank, be.llm(), cfg.generation, cfg.seed, resume ? &*resume : nullptr, &s);
        } catch (const GenerationAborted& e) {
            write_partial(partial, e.checkpoint());
            throw Error(std::string(e.what()) + "; progress for " + std::to_string(e.checkpoint().completed.size()) +
                        " concepts saved to " + partial.string() + ", rerun to resume");
        }
        atomic_write(in_workdir(cfg, artifact::kCaptions), captions_text(recs));
        fs::remove(partial);
        return json{{"concepts", bank.size()},      {"captions", recs.size()},
                    {"requests", s.requests},       {"rejected", s.rejected},
                    {"duplicates", s.duplicates},   {"concept_absent", s.concept_absent},
                    {"shortfall", s.shortfall},     {"resumed", resume.has_value()}};
    });
}

json stage_match(const RunConfig& cfg) {
    return logged(cfg, "match", [&] {
        const auto captions_path = require(cfg, artifact::kCaptions, "gen-captions");
        const auto bank = load_bank(cfg);
        auto recs = load_captions(captions_path);
        const Matcher matcher(bank, cfg.match_mode);
        std::vector<std::string> texts;
        texts.reserve(recs.size());
        for (const auto& r : recs) texts.push_back(r.text);
        auto matches = match_corpus(matcher, texts, cfg.concurrency);
        std::size_t matched = 0;
        for (std::size_t i = 0; i < recs.size(); ++i) {
            matched += !matches[i].empty();
            recs[i].matched = std::move(matches[i]);
        }
        std::ostringstream m;
        write_matches(m, recs);
        atomic_write(in_workdir(cfg, artifact::kMatches), m.str());

        std::vector<std::vector<ConceptId>> sets;
        for (const auto& r : recs) sets.push_back(r.matched);
        const auto stats = stats_from_matches(bank.size(), sets);
        std::ostringstream table;
        stats.write_table(table, "generated");
        atomic_write(in_workdir(cfg, artifact::kStats), table.str());
        return json{{"captions", recs.size()},
                    {"matched_captions", matched},
                    {"mode", cfg.match_mode == MatchMode::WordBoundary ? "word_boundary" : "raw_substring"},
                    {"coverage_k1", stats.coverage(1)},
                    {"coverage_k25", stats.coverage(25)},
                    {"coverage_k50", stats.coverage(50)}};
    });
}

json stage_stats(const RunConfig& cfg, const std::optional<fs::path>& corpus, std::string* table) {
    return logged(cfg, "stats", [&] {
        const auto bank = load_bank(cfg);
        std::vector<std::string> texts;
        std::string label = "generated";
        if (corpus) {
            std::ifstream in(*corpus);
            if (!in) throw Error("cannot open corpus " + corpus->string());
            std::string line;
            while (std::getline(in, line)) {
                if (!trim(line).empty()) texts.push_back(line);
            }
            label = corpus->stem().string();
        } else {
            for (auto& r : load_captions(require(cfg, artifact::kCaptions, "gen-captions"))) {
                texts.push_back(std::move(r.text));
            }
        }
        const Matcher matcher(bank, cfg.match_mode);
        const auto stats = stats_from_matches(bank.size(), match_corpus(matcher, texts, cfg.concurrency));
        std::ostringstream out;
        stats.write_table(out, label);
        if (!corpus) atomic_write(in_workdir(cfg, artifact::kStats), out.str());
        if (table) *table = out.str();
        bool defined = false;
        const double avg = stats.average_appearance(25, &defined);
        return json{{"corpus", label},
                    {"captions", texts.size()},
                    {"coverage_k1", stats.coverage(1)},
                    {"coverage_k25", stats.coverage(25)},
                    {"coverage_k50", stats.coverage(50)},
                    {"avg_appearance_k25", defined ? json(avg) : json(nullptr)}};
    });
}

json stage_balance(const RunConfig& cfg) {
    return logged(cfg, "balance", [&] {
        const auto captions_path = require(cfg, artifact::kCaptions, "gen-captions");
        const auto matches_path = require(cfg, artifact::kMatches, "match");
        if (cfg.target_size == 0) throw Error("balance needs a target size: pass --target-size or set [balance] target_size");
        const auto bank = load_bank(cfg);
        auto recs = load_captions(captions_path);
        {
            std::ifstream in(matches_path);
            read_matches(in, recs);
        }
        std::vector<std::vector<ConceptId>> sets;
        for (const auto& r : recs) {
            for (auto c : r.matched) {
                if (c >= bank.size()) throw Error("matches.tsv refers to a concept outside the bank; rerun `match`");
            }
            sets.push_back(r.matched);
        }
        const auto table = MatchTable::from_matches(bank.size(), std::move(sets));

        BalancePlan plan;
        std::vector<std::size_t> kept;
        if (cfg.random_sampling) {
            if (cfg.target_size > recs.size()) {
                throw Error("target size " + std::to_string(cfg.target_size) + " exceeds the " +
                            std::to_string(recs.size()) + " generated captions");
            }
            kept = sample_random(recs, cfg.target_size, cfg.seed);
            plan.counts = table.counts;
            plan.target_size = cfg.target_size;
            plan.keep_prob.assign(recs.size(), static_cast<double>(cfg.target_size) / static_cast<double>(recs.size()));
            plan.expected_size = static_cast<double>(cfg.target_size);
        } else {
            plan = make_plan(table, cfg.target_size, cfg.tolerance, cfg.combiner);
            kept = sample_balanced(recs, plan, cfg.seed);
        }
        std::ostringstream p;
        write_plan(p, recs, plan, kept);
        atomic_write(in_workdir(cfg, artifact::kPlan), p.str());

        std::vector<CaptionRecord> subset;
        for (auto i : kept) subset.push_back(recs[i]);
        atomic_write(in_workdir(cfg, artifact::kBalanced), captions_text(subset));
        return json{{"mode", cfg.random_sampling ? "random" : "balanced"},
                    {"combiner", cfg.combiner == Combiner::Max ? "max" : "noisy_or"},
                    {"captions", recs.size()},
                    {"matchable", table.matchable()},
                    {"target_size", cfg.target_size},
                    {"t_threshold", plan.t_threshold},
                    {"expected_size", plan.expected_size},
                    {"kept", kept.size()}};
    });
}

json stage_gen_images(const RunConfig& cfg, Backends& be) {
    return logged(cfg, "gen-images", [&] {
        const auto balanced = load_captions(require(cfg, artifact::kBalanced, "balance"));
        DatasetStore store(cfg.workdir);
        GenerationRunStats s;
        const auto manifest = run_generation(balanced, be.renderer(), cfg.concurrency, store, &s);
        return json{{"captions", balanced.size()},
                    {"rendered", s.rendered},
                    {"skipped", s.skipped},
                    {"failed", s.failed},
                    {"manifest_rows", manifest.size()},
                    {"backend", cfg.mock ? "mock" : "remote"}};
    });
}

json stage_train(const RunConfig& cfg) {
    return logged(cfg, "train", [&] {
        const auto manifest = read_manifest(require(cfg, artifact::kManifest, "gen-images"));
        const auto data = load_training_set(manifest, cfg.workdir, cfg.train.augment, cfg.concurrency);
        const auto result = train(data, cfg.train);
        save_params(in_workdir(cfg, artifact::kParams), result.params);
        std::ostringstream curve;
        write_loss_curve(curve, result.epoch_loss);
        atomic_write(in_workdir(cfg, artifact::kLossCurve), curve.str());
        return json{{"pairs", data.size()},
                    {"epochs", cfg.train.epochs},
                    {"batch_size", cfg.train.batch_size},
                    {"embed_dim", cfg.train.embed_dim},
                    {"first_epoch_loss", result.epoch_loss.front()},
                    {"final_epoch_loss", result.epoch_loss.back()},
                    {"temperature", std::exp(result.params.log_tau)}};
    });
}

namespace {

struct RenderedSet {
    std::vector<CaptionRecord> captions;
    Matrix text;
    Matrix image;
};

// Fresh captions from the run's generator for every concept of `sub`, minus
// any that coincide with a training caption, rendered with `render`.
RenderedSet fresh_pairs(const RunConfig& cfg, Backends& be, const ConceptBank& sub, int per_concept,
                        std::uint64_t seed, const std::unordered_set<std::string>& exclude, const Renderer& render,
                        CaptionId id_base) {
    GenerationConfig gen = cfg.generation;
    gen.n_per_concept = per_concept;
    auto recs = generate_captions(sub, be.llm(), gen, seed);
    std::erase_if(recs, [&](const CaptionRecord& r) { return exclude.count(r.text) > 0; });

    RenderedSet set;
    set.text.resize(static_cast<Eigen::Index>(recs.size()), kTextFeatureDim);
    set.image.resize(static_cast<Eigen::Index>(recs.size()), kImageFeatureDim);
    std::vector<std::string> failures(recs.size());
    for_each_bounded(recs.size(), cfg.concurrency, [&](std::size_t k) {
        const auto rec = render(recs[k].text, id_base + static_cast<CaptionId>(k));
        if (rec.failed) {
            failures[k] = recs[k].text;
            return;
        }
        set.image.row(static_cast<Eigen::Index>(k)) = extract_image_features(rec.image).transpose();
        set.text.row(static_cast<Eigen::Index>(k)) = extract_text_features(recs[k].text).values.transpose();
    });
    for (const auto& f : failures) {
        if (!f.empty()) throw Error("evaluation render failed for caption '" + f + "'");
    }
    set.captions = std::move(recs);
    return set;
}

}  // namespace

json stage_eval(const RunConfig& cfg, Backends& be) {
    return logged(cfg, "eval", [&] {
        const auto params_path = require(cfg, artifact::kParams, "train");
        const auto manifest = read_manifest(require(cfg, artifact::kManifest, "gen-images"));
        const auto params = load_params(params_path);
        const auto bank = load_bank(cfg);
        const auto data = load_training_set(manifest, cfg.workdir, false, cfg.concurrency);
        if (data.size() == 0) throw Error("manifest has no usable pairs");
        const std::size_t k = static_cast<std::size_t>(cfg.eval.k);

        std::string backend;
        std::unordered_set<std::string> train_texts;
        std::map<ConceptId, std::size_t> train_counts;
        for (const auto& e : manifest) {
            if (e.status != EntryStatus::Ok) continue;
            if (backend.empty()) backend = e.backend;
            train_texts.insert(e.caption);
            if (e.concept_id >= bank.size()) throw Error("manifest refers to a concept outside the bank");
            ++train_counts[e.concept_id];
        }
        const Renderer render = be.renderer_for(backend);

        const auto train_r = recall_at_k(embed_images(params, data.image), embed_texts(params, data.text), k);

        // Held-out retrieval: one fresh caption per training concept.
        std::vector<ConceptId> present;
        for (const auto& [c, n] : train_counts) present.push_back(c);
        const auto held_bank = bank.select(present);
        const auto held = fresh_pairs(cfg, be, held_bank, 1, hash_values(cfg.seed, 0x4e1dULL), train_texts, render,
                                      0x40000000u);
        if (held.captions.empty()) throw Error("no held-out pairs could be generated");
        const auto held_r = recall_at_k(embed_images(params, held.image), embed_texts(params, held.text), k);

        // Classification: the most frequent training concepts, ties to the lower id.
        std::vector<std::pair<std::size_t, ConceptId>> by_count;
        for (const auto& [c, n] : train_counts) by_count.emplace_back(n, c);
        std::sort(by_count.begin(), by_count.end(),
                  [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        const auto n_classes = std::min<std::size_t>(static_cast<std::size_t>(cfg.eval.classes), by_count.size());
        std::vector<ConceptId> class_ids;
        for (std::size_t i = 0; i < n_classes; ++i) class_ids.push_back(by_count[i].second);
        std::sort(class_ids.begin(), class_ids.end());
        const auto class_bank = bank.select(class_ids);
        const auto cls = fresh_pairs(cfg, be, class_bank, cfg.eval.per_class, hash_values(cfg.seed, 0xc1a55ULL),
                                     train_texts, render, 0x60000000u);
        std::vector<int> labels;
        for (const auto& r : cls.captions) labels.push_back(static_cast<int>(r.source_concept_id));
        const auto& names = class_bank.texts();

        MetricsReport m;
        m[Task::ImgRet] = held_r.text_to_image;
        m[Task::TextRet] = held_r.image_to_text;
        m[Task::ZeroShot] = zero_shot_classify(params, cls.image, labels, names, cfg.eval.templ);
        const Matrix h = embed_images(params, cls.image);
        const int c = static_cast<int>(names.size());
        m[Task::LinProb] = linear_probe(h, labels, c, std::nullopt, cfg.seed);
        m[Task::FewShot] = linear_probe(h, labels, c, static_cast<std::size_t>(cfg.eval.shots), cfg.seed);

        std::ostringstream metrics, table, details;
        write_metrics(metrics, m);
        write_metrics_table(table, m, "model");
        atomic_write(in_workdir(cfg, artifact::kMetrics), metrics.str());
        atomic_write(in_workdir(cfg, artifact::kMetricsTable), table.str());

        details.precision(17);
        details << "train_pairs\t" << data.size() << '\n'
                << "train_recall_image_to_text\t" << train_r.image_to_text << '\n'
                << "train_recall_text_to_image\t" << train_r.text_to_image << '\n'
                << "heldout_pairs\t" << held.captions.size() << '\n'
                << "heldout_recall_image_to_text\t" << held_r.image_to_text << '\n'
                << "heldout_recall_text_to_image\t" << held_r.text_to_image << '\n'
                << "classes\t";
        for (std::size_t i = 0; i < names.size(); ++i) details << (i ? "," : "") << names[i];
        details << '\n' << "class_images\t" << cls.captions.size() << '\n' << "k\t" << k << '\n';
        atomic_write(in_workdir(cfg, artifact::kEvalDetails), details.str());

        json metrics_json;
        for (std::size_t i = 0; i < kTaskCount; ++i) metrics_json[std::string(kTaskKeys[i])] = m.values[i];
        return json{{"metrics", metrics_json},
                    {"k", k},
                    {"train_recall", {{"image_to_text", train_r.image_to_text}, {"text_to_image", train_r.text_to_image}}},
                    {"heldout_recall", {{"image_to_text", held_r.image_to_text}, {"text_to_image", held_r.text_to_image}}},
                    {"heldout_pairs", held.captions.size()},
                    {"classes", names},
                    {"class_images", cls.captions.size()}};
    });
}

json stage_verify(const RunConfig& cfg) {
    return logged(cfg, "verify", [&] {
        const auto manifest = read_manifest(require(cfg, artifact::kManifest, "gen-images"));
        const auto report = verify_dataset(manifest, cfg.workdir);
        json corrupt = json::array();
        for (const auto& c : report.corrupt) corrupt.push_back({{"caption_id", c.caption_id}, {"reason", c.reason}});
        return json{{"ok", report.ok_count}, {"failed", report.failed_count}, {"corrupt", corrupt}};
    });
}

json stage_filter_nsfw(const RunConfig& cfg, Backends& be) {
    return logged(cfg, "filter-nsfw", [&] {
        const auto bank = load_bank(cfg);
        fs::create_directories(cfg.workdir);
        const auto out_path = in_workdir(cfg, artifact::kNsfw);
        NsfwFlagReport report;
        try {
            report = flag_nsfw(bank, be.nsfw(), cfg.nsfw_options);
        } catch (const NsfwAborted& e) {
            std::ostringstream partial;
            e.partial().write(partial, bank);
            atomic_write(out_path, partial.str());
            throw;
        }
        std::ostringstream flags, safe;
        report.write(flags, bank);
        atomic_write(out_path, flags.str());
        std::size_t flagged = 0;
        for (std::size_t i = 0; i < bank.size(); ++i) {
            if (report.flags[i]) {
                ++flagged;
            } else {
                safe << bank.text(static_cast<ConceptId>(i)) << '\n';
            }
        }
        atomic_write(in_workdir(cfg, artifact::kSafeConcepts), safe.str());
        return json{{"concepts", bank.size()},
                    {"flagged", flagged},
                    {"flagged_fraction", report.flagged_fraction},
                    {"warnings", report.warnings}};
    });
}

json stage_subset(const RunConfig& cfg, const SubsetRequest& req) {
    return logged(cfg, "subset", [&] {
        if (req.from_corpus.has_value() == req.random_n.has_value()) {
            throw Error("subset needs exactly one of --from-corpus FILE or --random N");
        }
        const auto bank = load_bank(cfg);
        ConceptBank sub;
        std::string mode;
        if (req.from_corpus) {
            std::ifstream in(*req.from_corpus);
            if (!in) throw Error("cannot open corpus " + req.from_corpus->string());
            std::vector<std::string> corpus;
            std::string line;
            while (std::getline(in, line)) corpus.push_back(line);
            const Matcher matcher(bank, cfg.match_mode);
            sub = derive_subset_from_corpus(bank, corpus, matcher);
            mode = "from_corpus";
        } else {
            sub = random_subset(bank, *req.random_n, cfg.seed);
            mode = "random";
        }
        std::ostringstream out;
        sub.write(out);
        atomic_write(req.out, out.str());
        return json{{"mode", mode}, {"bank", bank.size()}, {"subset", sub.size()}, {"out", req.out.string()}};
    });
}

json run_pipeline(const RunConfig& cfg, Backends& be) {
    json stages = json::array();
    stages.push_back(stage_gen_captions(cfg, be));
    stages.push_back(stage_match(cfg));
    stages.push_back(stage_balance(cfg));
    stages.push_back(stage_gen_images(cfg, be));
    stages.push_back(stage_train(cfg));
    stages.push_back(stage_eval(cfg, be));
    auto summary = logged(cfg, "pipeline", [&] { return json{{"stages", stages.size()}}; });
    summary["results"] = std::move(stages);
    return summary;
}

}  // namespace synthpair
