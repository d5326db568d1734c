#include "fmalloc/taskmask.hpp"

#include "fmalloc/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace fmalloc {

double AnnealSchedule::tau_at(int step_index) const {
    if (tau_max <= 0.0) throw InputError("AnnealSchedule: tau_max must be positive");
    // The gate scale 1/tau is annealed linearly from 1/tau_max to tau_max
    // within the epoch, so the gate explores (soft, tau = tau_max) on the
    // first step and exploits (hard, tau = 1/tau_max) on the last; archival
    // and evaluation therefore see near-binary gates.
    const double lo_scale = 1.0 / tau_max;
    if (steps_per_epoch <= 1) return lo_scale;
    double frac = static_cast<double>(step_index) / static_cast<double>(steps_per_epoch - 1);
    if (frac < 0.0) frac = 0.0;
    if (frac > 1.0) frac = 1.0;
    double scale = lo_scale + (tau_max - lo_scale) * frac;
    return 1.0 / scale;
}

Arr gate_mask(const Arr& embedding, double tau) {
    if (tau <= 0.0) throw InputError("gate_mask: tau must be positive");
    return 1.0 / (1.0 + (-embedding / tau).exp());
}

MaskSet gate_masks(const TaskEmbedding& embedding, double tau) {
    MaskSet out;
    out.reserve(embedding.size());
    for (const auto& e : embedding) out.push_back(gate_mask(e, tau));
    return out;
}

TaskEmbedding init_task_embedding(const BinaryMaskSet& general_mask, double alpha, uint64_t seed) {
    if (alpha <= 0.0) throw InputError("init_task_embedding: alpha must be positive");
    TaskEmbedding out;
    out.reserve(general_mask.size());
    for (size_t l = 0; l < general_mask.size(); ++l) {
        Rng rng(hash_combine(seed, 0x656d6200ULL + l));
        Arr e(static_cast<long>(general_mask[l].size()));
        for (long i = 0; i < e.size(); ++i) {
            double m = general_mask[l][static_cast<size_t>(i)] ? 1.0 : 0.0;
            e[i] = alpha * m - std::abs(rng.next_normal());
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<Arr> embedding_grad(const TaskEmbedding& embedding, double tau,
                                const std::vector<Arr>& mask_grads) {
    if (tau <= 0.0) throw InputError("embedding_grad: tau must be positive");
    std::vector<Arr> out;
    out.reserve(embedding.size());
    for (size_t l = 0; l < embedding.size(); ++l) {
        Arr m = gate_mask(embedding[l], tau);
        out.push_back(mask_grads[l] * m * (1.0 - m) / tau);
    }
    return out;
}

BinaryMaskSet emax_threshold(const std::vector<MaskSet>& operands, double lambda) {
    if (operands.empty()) throw StateError("emax_threshold: no operands");
    const size_t n_layers = operands.front().size();
    BinaryMaskSet out(n_layers);
    for (size_t l = 0; l < n_layers; ++l) {
        Arr acc = operands.front()[l];
        for (size_t t = 1; t < operands.size(); ++t) acc = acc.max(operands[t][l]);
        std::vector<uint8_t> layer(static_cast<size_t>(acc.size()));
        for (long i = 0; i < acc.size(); ++i) layer[static_cast<size_t>(i)] = acc[i] >= lambda ? 1 : 0;
        out[l] = std::move(layer);
    }
    return out;
}

BinaryMaskSet archive_mask_from_embedding(const TaskEmbedding& embedding, double tau_max,
                                          double lambda) {
    std::vector<MaskSet> one;
    one.push_back(gate_masks(embedding, tau_max));
    return emax_threshold(one, lambda);
}

void mask_gradients(Gradients& grads, const Seq2SeqModel& model, const BinaryMaskSet& read_only) {
    auto ff = model.ff_layers();
    if (read_only.size() != ff.size()) throw InputError("mask_gradients: layer count mismatch");
    for (size_t l = 0; l < ff.size(); ++l) {
        const auto& mask = read_only[l];
        Mat& dkeys = grads.param_grads[static_cast<size_t>(ff[l]->keys.index)];
        Mat& dkey_bias = grads.param_grads[static_cast<size_t>(ff[l]->key_bias.index)];
        Mat& dvalues = grads.param_grads[static_cast<size_t>(ff[l]->values.index)];
        for (size_t i = 0; i < mask.size(); ++i) {
            const double keep = 1.0 - (mask[i] ? 1.0 : 0.0);
            if (keep == 1.0) continue;
            dkeys.row(static_cast<long>(i)) *= keep;
            dkey_bias(static_cast<long>(i), 0) *= keep;
            dvalues.col(static_cast<long>(i)) *= keep;
        }
    }
}

void MaskArchive::archive(int task_id, const std::string& name, BinaryMaskSet mask,
                          const nlohmann::json& metadata) {
    if (task_id != static_cast<int>(masks_.size())) {
        if (has(task_id)) throw StateError("archive: task " + std::to_string(task_id) + " already archived");
        throw StateError("archive: tasks must be archived in order; expected " +
                         std::to_string(masks_.size()));
    }
    masks_.push_back(std::move(mask));
    names_.push_back(name);
    metadata_.push_back(metadata.dump());
}

bool MaskArchive::has(int task_id) const {
    return task_id >= 0 && task_id < static_cast<int>(masks_.size());
}

const BinaryMaskSet& MaskArchive::mask(int task_id) const {
    if (!has(task_id)) throw StateError("archive: no mask for task " + std::to_string(task_id));
    return masks_[static_cast<size_t>(task_id)];
}

const std::string& MaskArchive::task_name(int task_id) const {
    if (!has(task_id)) throw StateError("archive: no mask for task " + std::to_string(task_id));
    return names_[static_cast<size_t>(task_id)];
}

BinaryMaskSet MaskArchive::aggregate_previous(int task, double lambda) const {
    if (task < 1) throw StateError("aggregate_previous: need at least one archived task");
    std::vector<MaskSet> operands;
    operands.reserve(static_cast<size_t>(task));
    for (int t = 0; t < task; ++t) {
        if (!has(t)) throw StateError("aggregate_previous: missing archived mask for task " + std::to_string(t));
        operands.push_back(masks_from_binary(masks_[static_cast<size_t>(t)]));
    }
    return emax_threshold(operands, lambda);
}

namespace {

std::string bitstring(const std::vector<uint8_t>& mask) {
    std::string s(mask.size(), '0');
    for (size_t i = 0; i < mask.size(); ++i) s[i] = mask[i] ? '1' : '0';
    return s;
}

std::vector<uint8_t> from_bitstring(const std::string& s) {
    std::vector<uint8_t> mask(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '0' && s[i] != '1') throw InputError("bad mask bitstring");
        mask[i] = s[i] == '1' ? 1 : 0;
    }
    return mask;
}

}  // namespace

void MaskArchive::save_json(const std::string& path, const nlohmann::json& global_metadata) const {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["metadata"] = global_metadata;
    nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
    for (size_t t = 0; t < masks_.size(); ++t) {
        nlohmann::ordered_json entry;
        entry["task_id"] = t;
        entry["name"] = names_[t];
        entry["metadata"] = nlohmann::json::parse(metadata_[t]);
        nlohmann::ordered_json layers = nlohmann::ordered_json::object();
        for (size_t l = 0; l < masks_[t].size(); ++l) {
            layers[std::to_string(l)] = bitstring(masks_[t][l]);
        }
        entry["masks"] = layers;
        tasks.push_back(entry);
    }
    j["tasks"] = tasks;
    std::ofstream out(path);
    if (!out) throw InputError("cannot write mask archive: " + path);
    out << j.dump(2) << '\n';
}

MaskArchive MaskArchive::load_json(const std::string& path, nlohmann::json* global_metadata) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open mask archive: " + path);
    nlohmann::json j;
    in >> j;
    if (j.at("version").get<int>() != 1) throw InputError("unsupported mask archive version");
    if (global_metadata) *global_metadata = j.at("metadata");
    MaskArchive archive;
    for (const auto& entry : j.at("tasks")) {
        BinaryMaskSet mask;
        const auto& layers = entry.at("masks");
        mask.resize(layers.size());
        for (const auto& [key, value] : layers.items()) {
            size_t l = std::stoul(key);
            if (l >= mask.size()) throw InputError("mask archive layer index out of range");
            mask[l] = from_bitstring(value.get<std::string>());
        }
        archive.archive(entry.at("task_id").get<int>(), entry.at("name").get<std::string>(),
                        std::move(mask), entry.at("metadata"));
    }
    return archive;
}

}  // namespace fmalloc
