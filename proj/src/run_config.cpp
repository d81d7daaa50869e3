#include "synthpair/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace synthpair {

namespace {

constexpr const char* kDefaultModel = "mistralai/Mistral-7B-Instruct-v0.2";

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end || v.empty()) throw Error("config " + key + ": expected an integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = std::string::npos;
    }
    if (used != v.size() || !std::isfinite(out)) throw Error("config " + key + ": expected a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error("config " + key + ": expected true or false, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto str = [](auto member) {
            return [member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; };
        };
        auto integer = [](auto member) {
            return [member](RunConfig& c, const std::string& k, const std::string& v) {
                using T = std::remove_reference_t<decltype(member(c))>;
                member(c) = parse_integer<T>(k, v);
            };
        };
        auto real = [](auto member) {
            return [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_real(k, v); };
        };
        auto boolean = [](auto member) {
            return [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_bool(k, v); };
        };
        auto path = [](auto member) {
            return [member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; };
        };

        t["paths.concepts"] = path([](RunConfig& c) -> auto& { return c.concepts; });
        t["paths.workdir"] = path([](RunConfig& c) -> auto& { return c.workdir; });

        t["llm.url"] = str([](RunConfig& c) -> auto& { return c.llm.url; });
        t["llm.model"] = str([](RunConfig& c) -> auto& { return c.generation.model; });
        t["llm.api_key_env"] = str([](RunConfig& c) -> auto& { return c.llm.api_key_env; });
        t["llm.temperature"] = real([](RunConfig& c) -> auto& { return c.generation.sampling.temperature; });
        t["llm.top_p"] = real([](RunConfig& c) -> auto& { return c.generation.sampling.top_p; });
        t["llm.presence_penalty"] = real([](RunConfig& c) -> auto& { return c.generation.sampling.presence_penalty; });
        t["llm.frequency_penalty"] = real([](RunConfig& c) -> auto& { return c.generation.sampling.frequency_penalty; });
        t["llm.max_tokens"] = integer([](RunConfig& c) -> auto& { return c.generation.sampling.max_tokens; });

        t["nsfw.url"] = str([](RunConfig& c) -> auto& { return c.nsfw.url; });
        t["nsfw.model"] = str([](RunConfig& c) -> auto& { return c.nsfw_options.model; });
        t["nsfw.api_key_env"] = str([](RunConfig& c) -> auto& { return c.nsfw.api_key_env; });
        t["nsfw.retries"] = integer([](RunConfig& c) -> auto& { return c.nsfw_options.retries; });

        t["generation.n_per_concept"] = integer([](RunConfig& c) -> auto& { return c.generation.n_per_concept; });
        t["generation.max_words"] = integer([](RunConfig& c) -> auto& { return c.generation.max_words; });
        t["generation.max_attempts"] = integer([](RunConfig& c) -> auto& { return c.generation.max_attempts; });
        t["generation.dedup"] = boolean([](RunConfig& c) -> auto& { return c.generation.dedup; });
        t["generation.drop_concept_absent"] =
            boolean([](RunConfig& c) -> auto& { return c.generation.drop_concept_absent; });

        t["tti.url"] = str([](RunConfig& c) -> auto& { return c.tti.url; });
        t["tti.api_key_env"] = str([](RunConfig& c) -> auto& { return c.tti.api_key_env; });
        t["tti.guidance_scale"] = real([](RunConfig& c) -> auto& { return c.tti_params.guidance_scale; });
        t["tti.num_steps"] = integer([](RunConfig& c) -> auto& { return c.tti_params.num_steps; });
        t["tti.width"] = integer([](RunConfig& c) -> auto& { return c.tti_params.gen_width; });
        t["tti.height"] = integer([](RunConfig& c) -> auto& { return c.tti_params.gen_height; });
        t["tti.store_size"] = integer([](RunConfig& c) -> auto& { return c.tti_params.store_size; });
        t["tti.retries"] = integer([](RunConfig& c) -> auto& { return c.tti_params.retries; });

        t["match.raw_substring"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.match_mode = parse_bool(k, v) ? MatchMode::RawSubstring : MatchMode::WordBoundary;
        };

        t["balance.target_size"] = integer([](RunConfig& c) -> auto& { return c.target_size; });
        t["balance.tolerance"] = real([](RunConfig& c) -> auto& { return c.tolerance; });
        t["balance.combiner"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "max") {
                c.combiner = Combiner::Max;
            } else if (v == "noisy_or") {
                c.combiner = Combiner::NoisyOr;
            } else {
                throw Error("config " + k + ": expected max or noisy_or, got '" + v + "'");
            }
        };
        t["balance.random_sampling"] = boolean([](RunConfig& c) -> auto& { return c.random_sampling; });

        t["train.epochs"] = integer([](RunConfig& c) -> auto& { return c.train.epochs; });
        t["train.batch_size"] = integer([](RunConfig& c) -> auto& { return c.train.batch_size; });
        t["train.base_lr"] = real([](RunConfig& c) -> auto& { return c.train.base_lr; });
        t["train.weight_decay"] = real([](RunConfig& c) -> auto& { return c.train.weight_decay; });
        t["train.warmup_epochs"] = integer([](RunConfig& c) -> auto& { return c.train.warmup_epochs; });
        t["train.embed_dim"] = integer([](RunConfig& c) -> auto& { return c.train.embed_dim; });
        t["train.augment"] = boolean([](RunConfig& c) -> auto& { return c.train.augment; });

        t["eval.classes"] = integer([](RunConfig& c) -> auto& { return c.eval.classes; });
        t["eval.per_class"] = integer([](RunConfig& c) -> auto& { return c.eval.per_class; });
        t["eval.shots"] = integer([](RunConfig& c) -> auto& { return c.eval.shots; });
        t["eval.template"] = str([](RunConfig& c) -> auto& { return c.eval.templ; });
        t["eval.k"] = integer([](RunConfig& c) -> auto& { return c.eval.k; });

        t["run.seed"] = integer([](RunConfig& c) -> auto& { return c.seed; });
        t["run.concurrency"] = integer([](RunConfig& c) -> auto& { return c.concurrency; });
        t["run.mock"] = boolean([](RunConfig& c) -> auto& { return c.mock; });
        return t;
    }();
    return table;
}

}  // namespace

void EvalConfig::validate() const {
    if (classes < 1) throw Error("eval.classes must be >= 1");
    if (per_class < 2) throw Error("eval.per_class must be >= 2 so the probe has a test split");
    if (shots < 1) throw Error("eval.shots must be >= 1");
    if (k < 1) throw Error("eval.k must be >= 1");
    if (templ.find("{label}") == std::string::npos) throw Error("eval.template must contain {label}");
}

RunConfig::RunConfig() {
    generation.model = kDefaultModel;
    nsfw_options.model = kDefaultModel;
}

void RunConfig::propagate() {
    generation.concurrency = concurrency;
    nsfw_options.concurrency = concurrency;
    tti_params.seed_base = seed;
    train.seed = seed;
}

void RunConfig::validate() const {
    if (concurrency < 1) throw Error("run.concurrency must be >= 1");
    if (workdir.empty()) throw Error("paths.workdir must not be empty");
    generation.validate();
    tti_params.validate();
    train.validate();
    eval.validate();
    if (!(tolerance > 0.0)) throw Error("balance.tolerance must be positive");
    if (nsfw_options.retries < 0) throw Error("nsfw.retries must be >= 0");
}

RunConfig parse_run_config(std::istream& in) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw Error("config: " + std::string(e.what()));
    }
    RunConfig cfg;
    const auto& table = setters();
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw Error("config: key '" + section + "' is outside any section");
        }
        for (const auto& [key, node] : body) {
            const std::string full = section + "." + key;
            const auto it = table.find(full);
            if (it == table.end()) throw Error("config: unknown key '" + full + "'");
            it->second(cfg, full, std::string(trim(node.data())));
        }
        if (body.empty()) {
            bool known = false;
            for (const auto& [k, _] : table) known = known || k.rfind(section + ".", 0) == 0;
            if (!known) throw Error("config: unknown section [" + section + "]");
        }
    }
    cfg.propagate();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    auto cfg = parse_run_config(in);
    // Relative paths in the file are relative to the file itself.
    const auto base = path.parent_path();
    if (!cfg.concepts.empty() && cfg.concepts.is_relative()) cfg.concepts = base / cfg.concepts;
    if (cfg.workdir.is_relative()) cfg.workdir = base / cfg.workdir;
    return cfg;
}

}  // namespace synthpair
