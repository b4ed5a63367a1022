#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <factlab/knowledge.hpp>
#include <factlab/train.hpp>
#include <factlab/vocab.hpp>

namespace factlab {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One JSON document drives a run. Parsing is strict: unknown keys are errors,
// so a config either reproduces a run exactly or is rejected.
struct RunConfig {
    std::string experiment = "E1";
    Vocabulary vocab{100, 5, 50};
    double zipf_alpha = 1.2;
    TrainConfig train;  // lr 0.5, 30000 steps, 2000 epochs, full batch, zero init, trace every 50
    SplitSpec split{SplitStrategy::whole, 0.5, 0.2};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<double> alphas{0.0, 0.5, 1.0, 1.5, 2.0};        // E2 grid
    std::vector<std::size_t> step_grid{3000, 10000, 30000, 100000};  // E3 grid
    std::size_t threads = 0;  // 0 = hardware concurrency

    void validate() const {
        static const std::set<std::string> known_experiments{"E1", "E2", "E3", "E4", "verify"};
        if (!known_experiments.count(experiment))
            throw ConfigError("config error: unknown experiment '" + experiment + "'");
        if (seeds.empty()) throw ConfigError("config error: 'seeds' must be non-empty");
        try {
            train.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config error: ") + e.what());
        }
        if (!(zipf_alpha >= 0.0)) throw ConfigError("config error: 'zipf_alpha' must be non-negative");
        if (!(split.fraction > 0.0 && split.fraction <= 1.0))
            throw ConfigError("config error: 'split_fraction' must lie in (0, 1]");
        if (!(split.eval_fraction > 0.0 && split.eval_fraction < 1.0))
            throw ConfigError("config error: 'eval_fraction' must lie in (0, 1)");
        if (experiment == "E2" && alphas.empty())
            throw ConfigError("config error: 'alphas' must be non-empty for E2");
        if (experiment == "E3" && step_grid.empty())
            throw ConfigError("config error: 'step_grid' must be non-empty for E3");
    }

    static RunConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config error: document must be a JSON object");
        RunConfig cfg;
        int subjects = 100, relations = 5, answers = 50;
        bool has_init_std = false, has_strategy = false;

        for (const auto& [key, value] : j.items()) {
            try {
                if (key == "experiment") {
                    cfg.experiment = value.get<std::string>();
                } else if (key == "subjects") {
                    subjects = value.get<int>();
                } else if (key == "relations") {
                    relations = value.get<int>();
                } else if (key == "answers") {
                    answers = value.get<int>();
                } else if (key == "zipf_alpha") {
                    cfg.zipf_alpha = value.get<double>();
                } else if (key == "pretrain_steps") {
                    cfg.train.pretrain_steps = value.get<std::size_t>();
                } else if (key == "lr") {
                    cfg.train.lr = value.get<double>();
                } else if (key == "ft_epochs") {
                    cfg.train.ft_epochs = value.get<std::size_t>();
                } else if (key == "ft_batch") {
                    cfg.train.ft_batch = value.get<std::size_t>();
                } else if (key == "init_std") {
                    cfg.train.init_std = value.get<double>();
                    has_init_std = true;
                } else if (key == "eval_every") {
                    cfg.train.eval_every = value.get<std::size_t>();
                } else if (key == "split_strategy") {
                    cfg.split.strategy = split_strategy_from_string(value.get<std::string>());
                    has_strategy = true;
                } else if (key == "split_fraction") {
                    cfg.split.fraction = value.get<double>();
                } else if (key == "eval_fraction") {
                    cfg.split.eval_fraction = value.get<double>();
                } else if (key == "seeds") {
                    cfg.seeds = value.get<std::vector<std::uint64_t>>();
                } else if (key == "alphas") {
                    cfg.alphas = value.get<std::vector<double>>();
                } else if (key == "step_grid") {
                    cfg.step_grid = value.get<std::vector<std::size_t>>();
                } else if (key == "threads") {
                    cfg.threads = value.get<std::size_t>();
                } else {
                    throw ConfigError("config error: unknown key '" + key + "'");
                }
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw ConfigError("config error: bad value for key '" + key + "': " + e.what());
            }
        }

        try {
            cfg.vocab = Vocabulary(subjects, relations, answers);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config error: ") + e.what());
        }

        // E4 is defined by low-variance init and FT-Bottom; apply those as
        // defaults when the config does not say otherwise.
        if (cfg.experiment == "E4") {
            if (!has_init_std) cfg.train.init_std = 0.001;
            if (!has_strategy) cfg.split.strategy = SplitStrategy::bottom;
        }

        cfg.validate();
        return cfg;
    }

    static RunConfig load_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("config error: cannot open '" + path.string() + "'");
        nlohmann::json j;
        try {
            is >> j;
        } catch (const std::exception& e) {
            throw ConfigError("config error: invalid JSON in '" + path.string() + "': " + e.what());
        }
        return from_json(j);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["experiment"] = experiment;
        j["subjects"] = vocab.n_subjects();
        j["relations"] = vocab.n_relations();
        j["answers"] = vocab.n_answers();
        j["zipf_alpha"] = zipf_alpha;
        j["pretrain_steps"] = train.pretrain_steps;
        j["lr"] = train.lr;
        j["ft_epochs"] = train.ft_epochs;
        if (train.ft_batch)
            j["ft_batch"] = *train.ft_batch;
        else
            j["ft_batch"] = nullptr;  // full batch
        j["init_std"] = train.init_std;
        j["eval_every"] = train.eval_every;
        j["split_strategy"] = to_string(split.strategy);
        j["split_fraction"] = split.fraction;
        j["eval_fraction"] = split.eval_fraction;
        j["seeds"] = seeds;
        j["alphas"] = alphas;
        j["step_grid"] = step_grid;
        j["threads"] = threads;
        return j;
    }
};

}  // namespace factlab
