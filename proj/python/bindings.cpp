#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "synthpair/balancer.hpp"
#include "synthpair/caption_engine.hpp"
#include "synthpair/clip_trainer.hpp"
#include "synthpair/concept_bank.hpp"
#include "synthpair/concept_matcher.hpp"
#include "synthpair/eval_harness.hpp"
#include "synthpair/image_engine.hpp"
#include "synthpair/pipeline.hpp"

namespace py = pybind11;
using namespace synthpair;

namespace {

MetricsReport report_from(const std::map<std::string, double>& values) {
    MetricsReport m;
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        const auto it = values.find(std::string(kTaskKeys[i]));
        if (it == values.end()) throw Error("metrics key '" + std::string(kTaskKeys[i]) + "' is missing");
        m.values[i] = it->second;
    }
    if (values.size() != kTaskCount) throw Error("metrics have unknown keys");
    return m;
}

std::map<std::string, double> report_to(const MetricsReport& m) {
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < kTaskCount; ++i) out[std::string(kTaskKeys[i])] = m.values[i];
    return out;
}

py::array_t<std::uint8_t> image_array(const Image& img) {
    py::array_t<std::uint8_t> out({img.height, img.width, 3});
    std::copy(img.rgb.begin(), img.rgb.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Synthetic caption-image pipeline core";

    py::register_exception<MissingArtifact>(m, "MissingArtifact", PyExc_RuntimeError);
    py::register_exception<EndpointUnavailable>(m, "EndpointUnavailable", PyExc_RuntimeError);
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    m.def("normalize_text", [](const std::string& s) { return normalize_text(s); });

    py::class_<ConceptBank>(m, "ConceptBank")
        .def(py::init([](std::vector<std::string> texts) { return ConceptBank::from_texts(std::move(texts)); }),
             py::arg("texts"))
        .def_static("load", &load_concepts_file, py::arg("path"))
        .def("__len__", &ConceptBank::size)
        .def("texts", &ConceptBank::texts)
        .def("text", &ConceptBank::text, py::arg("id"))
        .def("random_subset", [](const ConceptBank& b, std::size_t n, std::uint64_t seed) { return random_subset(b, n, seed); },
             py::arg("n"), py::arg("seed"));

    py::enum_<MatchMode>(m, "MatchMode")
        .value("WORD_BOUNDARY", MatchMode::WordBoundary)
        .value("RAW_SUBSTRING", MatchMode::RawSubstring);

    py::class_<Matcher>(m, "Matcher")
        .def(py::init<const ConceptBank&, MatchMode>(), py::arg("bank"), py::arg("mode") = MatchMode::WordBoundary,
             py::keep_alive<1, 2>())
        .def("match", &Matcher::match, py::arg("caption"));

    m.def(
        "corpus_stats",
        [](const Matcher& matcher, const std::vector<std::string>& corpus) {
            const auto s = corpus_stats(matcher, corpus);
            bool defined = false;
            const double avg = s.average_appearance(25, &defined);
            py::dict d;
            d["counts"] = s.counts;
            d["captions"] = s.caption_count;
            d["k1"] = s.coverage(1);
            d["k25"] = s.coverage(25);
            d["k50"] = s.coverage(50);
            d["avg_k25"] = defined ? py::object(py::float_(avg)) : py::object(py::none());
            return d;
        },
        py::arg("matcher"), py::arg("corpus"));

    py::enum_<Combiner>(m, "Combiner").value("MAX", Combiner::Max).value("NOISY_OR", Combiner::NoisyOr);

    m.def(
        "balance_plan",
        [](std::size_t concept_count, std::vector<std::vector<ConceptId>> matches, std::size_t target, Combiner c) {
            const auto table = MatchTable::from_matches(concept_count, std::move(matches));
            const auto plan = make_plan(table, target, 0.5, c);
            py::dict d;
            d["threshold"] = plan.t_threshold;
            d["keep_prob"] = plan.keep_prob;
            d["expected_size"] = plan.expected_size;
            d["counts"] = plan.counts;
            return d;
        },
        py::arg("concept_count"), py::arg("matches"), py::arg("target_size"), py::arg("combiner") = Combiner::Max);

    m.def("caption_prompt", [](const std::string& c) { return caption_prompt(c); }, py::arg("concept"));
    m.def("mock_caption", [](const std::string& c, std::uint64_t seed) { return MockChatClient::caption_for(c, seed); },
          py::arg("concept"), py::arg("seed"));
    m.attr("NSFW_SYSTEM_PROMPT") = std::string(kNsfwSystemPrompt);

    m.def(
        "render_mock",
        [](const std::string& caption, int size, CaptionId id) {
            TtiParams p;
            p.store_size = size;
            return image_array(render_mock(caption, p, id).image);
        },
        py::arg("caption"), py::arg("size") = 224, py::arg("id") = 0);

    m.def("text_features", [](const std::string& c) { return Vector(extract_text_features(c).values); },
          py::arg("caption"));

    m.def(
        "clip_loss",
        [](const Matrix& h, const Matrix& z, double tau) { return clip_loss_from_embeddings(h, z, tau); },
        py::arg("image_embeddings"), py::arg("text_embeddings"), py::arg("tau"));

    m.def(
        "delta_mtl",
        [](const std::map<std::string, double>& model, const std::map<std::string, double>& baseline) {
            return delta_mtl(report_from(model), report_from(baseline));
        },
        py::arg("model"), py::arg("baseline"));
    m.def("read_metrics", [](const std::string& path) { return report_to(read_metrics_file(path)); },
          py::arg("path"));
    m.def("recall_at_k", [](const Matrix& sim, std::size_t k) { return recall_from_similarity(sim, k); },
          py::arg("similarity"), py::arg("k") = 1);

    m.def(
        "run_mock_pipeline",
        [](const std::filesystem::path& concepts, const std::filesystem::path& workdir, std::uint64_t seed,
           int captions_per_concept, std::size_t target_size) {
            RunConfig cfg;
            cfg.concepts = concepts;
            cfg.workdir = workdir;
            cfg.mock = true;
            cfg.seed = seed;
            cfg.generation.n_per_concept = captions_per_concept;
            cfg.target_size = target_size;
            cfg.propagate();
            cfg.validate();
            std::string out;
            {
                py::gil_scoped_release release;
                WorkdirLock lock(cfg.workdir);
                Backends be(cfg);
                out = run_pipeline(cfg, be).dump();
            }
            return out;
        },
        py::arg("concepts"), py::arg("workdir"), py::arg("seed") = 0, py::arg("captions_per_concept") = 2,
        py::arg("target_size"));
}
