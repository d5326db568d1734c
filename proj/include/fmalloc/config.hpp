#pragma once

#include "fmalloc/data.hpp"
#include "fmalloc/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace fmalloc {

enum class Method { FMalloc, SeqFinetune, Ewc, Mixed };

Method method_from_string(const std::string& name);
std::string method_to_string(Method method);

struct Seeds {
    uint64_t init = 1;
    uint64_t data = 2;
    uint64_t order = 3;
};

// A domain is either generated from a DomainSpec or loaded from files.
struct DomainSource {
    DomainSpec spec;
    std::string train_tsv, dev_tsv, test_tsv;  // file mode when non-empty
    bool from_files() const { return !train_tsv.empty(); }
};

struct RunConfig {
    std::string name = "run";
    std::string run_dir;  // resolved output directory
    Method method = Method::FMalloc;
    ModelConfig model;  // vocab_size filled from data at run time

    DomainSource general;
    std::vector<DomainSource> domains;  // training order

    double sparsity = 0.2;
    double tau_max = 400.0;
    double lambda = 0.5;
    double alpha = 5.0;
    double lr = 3e-3;
    double pretrain_lr = 1e-3;
    double ewc_alpha = 1.0;
    int batch_size = 64;
    int patience = 5;
    int max_epochs = 20;
    int pretrain_max_epochs = 15;
    int importance_batches = 64;
    int beam_size = 5;
    int n_threads = 2;
    bool sr_upper_bound = false;
    std::string init_checkpoint;
    Seeds seeds;

    void validate() const;
};

// Built-in benchmark presets ("desk" is the default 5-domain benchmark).
RunConfig benchmark_preset(const std::string& name);

// Parse a config JSON document; "benchmark" selects a preset whose fields the
// remaining keys override. Unknown keys are rejected with their paths.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

// Applies a dotted-path override (e.g. "seeds.order=7", "method=ewc").
void apply_override(nlohmann::json& doc, const std::string& key_value);

nlohmann::json run_config_to_json(const RunConfig& cfg);

// Resolves cfg.run_dir against FMALLOC_RUN_DIR (or "runs") when relative.
std::string resolve_run_dir(const std::string& run_dir, const std::string& name);

}  // namespace fmalloc
