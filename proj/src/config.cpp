#include "fmalloc/config.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

namespace fmalloc {

using nlohmann::json;

Method method_from_string(const std::string& name) {
    if (name == "fmalloc") return Method::FMalloc;
    if (name == "seq_finetune") return Method::SeqFinetune;
    if (name == "ewc") return Method::Ewc;
    if (name == "mixed") return Method::Mixed;
    throw ConfigError("unknown method: " + name);
}

std::string method_to_string(Method method) {
    switch (method) {
        case Method::FMalloc: return "fmalloc";
        case Method::SeqFinetune: return "seq_finetune";
        case Method::Ewc: return "ewc";
        case Method::Mixed: return "mixed";
    }
    throw ConfigError("bad method enum");
}

void RunConfig::validate() const {
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 0 || pretrain_max_epochs < 0) throw ConfigError("epoch budgets must be >= 0");
    if (lr <= 0.0 || pretrain_lr <= 0.0) throw ConfigError("learning rates must be positive");
    if (sparsity < 0.0 || sparsity >= 1.0) throw ConfigError("sparsity must be in [0,1)");
    if (tau_max <= 0.0) throw ConfigError("tau_max must be positive");
    if (alpha <= 0.0) throw ConfigError("alpha must be positive");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0,1]");
    if (ewc_alpha < 0.0) throw ConfigError("ewc_alpha must be nonnegative");
    if (importance_batches < 1) throw ConfigError("importance_batches must be >= 1");
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (n_threads < 1) throw ConfigError("n_threads must be >= 1");
    if (general.spec.name.empty()) throw ConfigError("general domain missing");
    if (!general.from_files()) {
        if (general.spec.n_dev < 100 || general.spec.n_test < 100) {
            throw ConfigError("general: n_dev and n_test must be >= 100");
        }
    }
    std::set<std::string> names;
    for (const auto& d : domains) {
        if (d.spec.name.empty()) throw ConfigError("domain with empty name");
        if (!names.insert(d.spec.name).second) throw ConfigError("duplicate domain name: " + d.spec.name);
        if (!d.from_files() && (d.spec.n_dev < 100 || d.spec.n_test < 100)) {
            throw ConfigError("domain " + d.spec.name + ": n_dev and n_test must be >= 100");
        }
    }
    ModelConfig check = model;
    check.vocab_size = std::max(check.vocab_size, 5);
    check.validate();
}

namespace {

std::vector<std::string> prefixed_symbols(const std::string& prefix, int count) {
    std::vector<std::string> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%s%02d", prefix.c_str(), i);
        out.emplace_back(buf);
    }
    return out;
}

}  // namespace

RunConfig benchmark_preset(const std::string& name) {
    RunConfig cfg;
    if (name == "desk") {
        // General: copy over 40 symbols, mildly Zipfian so importance pruning
        // has a real tail to cut. Five CL domains mimic the OPUS volume
        // spread; shift_2 plays the low-resource role and vocab_map is the
        // isolated-vocabulary domain.
        auto core = prefixed_symbols("c", 40);
        auto mapped = prefixed_symbols("m", 20);

        cfg.general.spec = DomainSpec{"general", Rule::Copy, 0, 0, core, 20000, 300, 300, 4, 12, 0.8, "core"};
        cfg.domains.resize(5);
        cfg.domains[0].spec = DomainSpec{"reverse", Rule::Reverse, 0, 0, core, 8000, 200, 200, 4, 12, 0.0, "core"};
        cfg.domains[1].spec = DomainSpec{"shift_2", Rule::ShiftK, 2, 0, core, 1000, 200, 200, 4, 12, 0.0, "core"};
        cfg.domains[2].spec = DomainSpec{"pair_swap", Rule::PairSwap, 0, 0, core, 12000, 200, 200, 4, 12, 0.0, "core"};
        cfg.domains[3].spec = DomainSpec{"vocab_map", Rule::VocabMap, 0, 17, mapped, 6000, 200, 200, 4, 12, 0.0, "mapped"};
        cfg.domains[4].spec = DomainSpec{"sort", Rule::Sort, 0, 0, core, 10000, 200, 200, 4, 12, 0.0, "core"};

        cfg.model = ModelConfig{};  // desk defaults: 64/4 heads/2+2/256
        cfg.name = "desk";
        return cfg;
    }
    if (name == "mini") {
        // Small benchmark for integration tests; token-wise rules keep the
        // domains learnable under frozen attention even at this scale.
        auto syms = prefixed_symbols("a", 12);
        cfg.general.spec = DomainSpec{"general", Rule::Copy, 0, 0, syms, 800, 100, 100, 3, 6, 0.0, "core"};
        cfg.domains.resize(2);
        cfg.domains[0].spec = DomainSpec{"shift_1", Rule::ShiftK, 1, 0, syms, 500, 100, 100, 3, 6, 0.0, "core"};
        cfg.domains[1].spec = DomainSpec{"vocab_map", Rule::VocabMap, 0, 5, syms, 400, 100, 100, 3, 6, 0.0, "core"};
        cfg.model.d_model = 32;
        cfg.model.n_heads = 2;
        cfg.model.n_enc_layers = 1;
        cfg.model.n_dec_layers = 1;
        cfg.model.d_ff = 64;
        cfg.model.max_seq_len = 16;
        cfg.batch_size = 16;
        cfg.importance_batches = 8;
        cfg.max_epochs = 30;
        cfg.pretrain_max_epochs = 15;
        cfg.patience = 6;
        cfg.lr = 1e-2;
        cfg.pretrain_lr = 3e-3;
        cfg.beam_size = 2;
        cfg.name = "mini";
        return cfg;
    }
    throw ConfigError("unknown benchmark preset: " + name);
}

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& path) {
    if (!obj.is_object()) throw ConfigError("config: expected object at " + path);
    for (const auto& [key, value] : obj.items()) {
        if (!known.count(key)) throw ConfigError("config: unknown key '" + path + key + "'");
    }
}

template <typename T>
void read_if(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

DomainSource parse_domain(const json& j, const std::string& path) {
    reject_unknown(j, {"name", "rule", "k", "map_seed", "symbols", "symbol_prefix", "symbol_count",
                       "n_train", "n_dev", "n_test", "len_min", "len_max", "zipf_s", "overlap_group",
                       "train_tsv", "dev_tsv", "test_tsv"},
                   path);
    DomainSource src;
    DomainSpec& d = src.spec;
    read_if(j, "name", d.name);
    if (j.contains("rule")) d.rule = rule_from_string(j.at("rule").get<std::string>());
    read_if(j, "k", d.shift_k);
    read_if(j, "map_seed", d.map_seed);
    if (j.contains("symbols")) {
        d.vocab_subset = j.at("symbols").get<std::vector<std::string>>();
    } else if (j.contains("symbol_prefix")) {
        int count = j.value("symbol_count", 0);
        if (count < 1) throw ConfigError("config: " + path + "symbol_count must be >= 1");
        d.vocab_subset = prefixed_symbols(j.at("symbol_prefix").get<std::string>(), count);
    }
    read_if(j, "n_train", d.n_train);
    read_if(j, "n_dev", d.n_dev);
    read_if(j, "n_test", d.n_test);
    read_if(j, "len_min", d.len_min);
    read_if(j, "len_max", d.len_max);
    read_if(j, "zipf_s", d.zipf_s);
    read_if(j, "overlap_group", d.overlap_group);
    read_if(j, "train_tsv", src.train_tsv);
    read_if(j, "dev_tsv", src.dev_tsv);
    read_if(j, "test_tsv", src.test_tsv);
    return src;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
    static const std::set<std::string> kTopKeys = {
        "benchmark", "name", "run_dir", "method", "model", "general", "domains", "task_order",
        "sparsity", "tau_max", "lambda", "alpha", "lr", "pretrain_lr", "ewc_alpha", "batch_size",
        "patience", "max_epochs", "pretrain_max_epochs", "importance_batches", "beam_size",
        "n_threads", "sr_upper_bound", "init_checkpoint", "seeds"};
    reject_unknown(doc, kTopKeys, "");

    RunConfig cfg = benchmark_preset(doc.value("benchmark", "desk"));

    read_if(doc, "name", cfg.name);
    read_if(doc, "run_dir", cfg.run_dir);
    if (doc.contains("method")) cfg.method = method_from_string(doc.at("method").get<std::string>());

    if (doc.contains("model")) {
        const json& m = doc.at("model");
        reject_unknown(m, {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "dropout_p",
                           "max_seq_len"},
                       "model.");
        read_if(m, "d_model", cfg.model.d_model);
        read_if(m, "n_heads", cfg.model.n_heads);
        read_if(m, "n_enc_layers", cfg.model.n_enc_layers);
        read_if(m, "n_dec_layers", cfg.model.n_dec_layers);
        read_if(m, "d_ff", cfg.model.d_ff);
        read_if(m, "dropout_p", cfg.model.dropout_p);
        read_if(m, "max_seq_len", cfg.model.max_seq_len);
    }

    if (doc.contains("general")) cfg.general = parse_domain(doc.at("general"), "general.");

    if (doc.contains("domains")) {
        const json& ds = doc.at("domains");
        if (!ds.is_array()) throw ConfigError("config: domains must be an array");
        std::vector<DomainSource> preset_domains = cfg.domains;
        cfg.domains.clear();
        for (const auto& el : ds) {
            if (el.is_string()) {
                // Name reference into the preset's domain list.
                std::string want = el.get<std::string>();
                bool found = false;
                for (const auto& p : preset_domains) {
                    if (p.spec.name == want) {
                        cfg.domains.push_back(p);
                        found = true;
                        break;
                    }
                }
                if (!found) throw ConfigError("config: domains entry '" + want + "' not in benchmark preset");
            } else {
                cfg.domains.push_back(parse_domain(el, "domains[]."));
            }
        }
    }

    if (doc.contains("task_order")) {
        auto order = doc.at("task_order").get<std::vector<std::string>>();
        if (order.size() != cfg.domains.size()) {
            throw ConfigError("config: task_order must list every domain exactly once");
        }
        std::vector<DomainSource> reordered;
        for (const auto& want : order) {
            bool found = false;
            for (const auto& d : cfg.domains) {
                if (d.spec.name == want) {
                    reordered.push_back(d);
                    found = true;
                    break;
                }
            }
            if (!found) throw ConfigError("config: task_order references unknown domain '" + want + "'");
        }
        std::set<std::string> uniq(order.begin(), order.end());
        if (uniq.size() != order.size()) throw ConfigError("config: task_order has duplicates");
        cfg.domains = std::move(reordered);
    }

    read_if(doc, "sparsity", cfg.sparsity);
    read_if(doc, "tau_max", cfg.tau_max);
    read_if(doc, "lambda", cfg.lambda);
    read_if(doc, "alpha", cfg.alpha);
    read_if(doc, "lr", cfg.lr);
    read_if(doc, "pretrain_lr", cfg.pretrain_lr);
    read_if(doc, "ewc_alpha", cfg.ewc_alpha);
    read_if(doc, "batch_size", cfg.batch_size);
    read_if(doc, "patience", cfg.patience);
    read_if(doc, "max_epochs", cfg.max_epochs);
    read_if(doc, "pretrain_max_epochs", cfg.pretrain_max_epochs);
    read_if(doc, "importance_batches", cfg.importance_batches);
    read_if(doc, "beam_size", cfg.beam_size);
    read_if(doc, "n_threads", cfg.n_threads);
    read_if(doc, "sr_upper_bound", cfg.sr_upper_bound);
    read_if(doc, "init_checkpoint", cfg.init_checkpoint);

    if (doc.contains("seeds")) {
        const json& s = doc.at("seeds");
        reject_unknown(s, {"init", "data", "order"}, "seeds.");
        read_if(s, "init", cfg.seeds.init);
        read_if(s, "data", cfg.seeds.data);
        read_if(s, "order", cfg.seeds.order);
    }

    cfg.validate();
    return cfg;
}

void apply_override(json& doc, const std::string& key_value) {
    auto eq = key_value.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + key_value);
    std::string path = key_value.substr(0, eq);
    std::string value = key_value.substr(eq + 1);

    // Coerce the value: JSON literal if it parses, raw string otherwise.
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        if (value.find(',') != std::string::npos) {
            parsed = json::array();
            size_t begin = 0;
            while (begin <= value.size()) {
                size_t comma = value.find(',', begin);
                std::string piece = value.substr(begin, comma - begin);
                parsed.push_back(piece);
                if (comma == std::string::npos) break;
                begin = comma + 1;
            }
        } else {
            parsed = value;
        }
    }

    json* cursor = &doc;
    size_t begin = 0;
    for (;;) {
        size_t dot = path.find('.', begin);
        std::string key = path.substr(begin, dot - begin);
        if (key.empty()) throw ConfigError("override has empty path segment: " + key_value);
        if (dot == std::string::npos) {
            (*cursor)[key] = parsed;
            break;
        }
        cursor = &(*cursor)[key];
        begin = dot + 1;
    }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    for (const auto& kv : overrides) apply_override(doc, kv);
    return parse_run_config(doc);
}

namespace {

json domain_to_json(const DomainSource& src) {
    json j;
    j["name"] = src.spec.name;
    if (src.from_files()) {
        j["train_tsv"] = src.train_tsv;
        j["dev_tsv"] = src.dev_tsv;
        j["test_tsv"] = src.test_tsv;
        return j;
    }
    j["rule"] = rule_to_string(src.spec.rule);
    if (src.spec.rule == Rule::ShiftK) j["k"] = src.spec.shift_k;
    if (src.spec.rule == Rule::VocabMap) j["map_seed"] = src.spec.map_seed;
    j["symbols"] = src.spec.vocab_subset;
    j["n_train"] = src.spec.n_train;
    j["n_dev"] = src.spec.n_dev;
    j["n_test"] = src.spec.n_test;
    j["len_min"] = src.spec.len_min;
    j["len_max"] = src.spec.len_max;
    j["zipf_s"] = src.spec.zipf_s;
    j["overlap_group"] = src.spec.overlap_group;
    return j;
}

}  // namespace

json run_config_to_json(const RunConfig& cfg) {
    json j;
    j["name"] = cfg.name;
    j["run_dir"] = cfg.run_dir;
    j["method"] = method_to_string(cfg.method);
    j["model"] = {{"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},
                  {"n_enc_layers", cfg.model.n_enc_layers},
                  {"n_dec_layers", cfg.model.n_dec_layers},
                  {"d_ff", cfg.model.d_ff},
                  {"dropout_p", cfg.model.dropout_p},
                  {"max_seq_len", cfg.model.max_seq_len}};
    j["general"] = domain_to_json(cfg.general);
    json ds = json::array();
    for (const auto& d : cfg.domains) ds.push_back(domain_to_json(d));
    j["domains"] = ds;
    j["sparsity"] = cfg.sparsity;
    j["tau_max"] = cfg.tau_max;
    j["lambda"] = cfg.lambda;
    j["alpha"] = cfg.alpha;
    j["lr"] = cfg.lr;
    j["pretrain_lr"] = cfg.pretrain_lr;
    j["ewc_alpha"] = cfg.ewc_alpha;
    j["batch_size"] = cfg.batch_size;
    j["patience"] = cfg.patience;
    j["max_epochs"] = cfg.max_epochs;
    j["pretrain_max_epochs"] = cfg.pretrain_max_epochs;
    j["importance_batches"] = cfg.importance_batches;
    j["beam_size"] = cfg.beam_size;
    j["n_threads"] = cfg.n_threads;
    j["sr_upper_bound"] = cfg.sr_upper_bound;
    j["init_checkpoint"] = cfg.init_checkpoint;
    j["seeds"] = {{"init", cfg.seeds.init}, {"data", cfg.seeds.data}, {"order", cfg.seeds.order}};
    return j;
}

std::string resolve_run_dir(const std::string& run_dir, const std::string& name) {
    namespace fs = std::filesystem;
    fs::path p = run_dir.empty() ? fs::path(name) : fs::path(run_dir);
    if (p.is_absolute()) return p.string();
    const char* root = std::getenv("FMALLOC_RUN_DIR");
    fs::path base = root && *root ? fs::path(root) : fs::path("runs");
    return (base / p).string();
}

}  // namespace fmalloc
