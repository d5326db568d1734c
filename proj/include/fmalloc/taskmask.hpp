#pragma once

#include "fmalloc/metrics.hpp"
#include "fmalloc/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <map>
#include <string>
#include <vector>

namespace fmalloc {

// Per-FF-layer task embedding e_l^t.
using TaskEmbedding = std::vector<Arr>;

// Within-epoch temperature annealing between tau_max (soft exploration) and
// 1/tau_max (hard exploitation); the gate scale 1/tau moves linearly, so
// epochs end with near-binary gates.
struct AnnealSchedule {
    double tau_max = 400.0;
    int steps_per_epoch = 1;

    double tau_at(int step_index) const;  // 0-based step within the epoch
};

// m = sigmoid(e / tau), elementwise. tau must be positive.
Arr gate_mask(const Arr& embedding, double tau);
MaskSet gate_masks(const TaskEmbedding& embedding, double tau);

// e = alpha * m^G - |N(0,1)|, seeded per layer.
TaskEmbedding init_task_embedding(const BinaryMaskSet& general_mask, double alpha, uint64_t seed);

// Chain rule from mask gradients to embedding gradients:
// de = dm * sigmoid'(e/tau) / tau.
std::vector<Arr> embedding_grad(const TaskEmbedding& embedding, double tau,
                                const std::vector<Arr>& mask_grads);

// Elementwise max over operands followed by thresholding at lambda.
BinaryMaskSet emax_threshold(const std::vector<MaskSet>& operands, double lambda);

// Binarize sigmoid(e / tau_max) at lambda (equivalently e >= 0 at lambda 0.5).
BinaryMaskSet archive_mask_from_embedding(const TaskEmbedding& embedding, double tau_max,
                                          double lambda);

// Eq.-8-style gradient adjustment: cell gradients scaled by (1 - m^<t), so
// read-only cells receive exactly zero gradient.
void mask_gradients(Gradients& grads, const Seq2SeqModel& model, const BinaryMaskSet& read_only);

// Append-only store of archived binary task masks, task ids dense from 0.
class MaskArchive {
public:
    void archive(int task_id, const std::string& name, BinaryMaskSet mask,
                 const nlohmann::json& metadata);
    bool has(int task_id) const;
    int n_archived() const { return static_cast<int>(masks_.size()); }
    const BinaryMaskSet& mask(int task_id) const;
    const std::string& task_name(int task_id) const;

    // EMAX over archived tasks 0..t-1, binarized at lambda.
    BinaryMaskSet aggregate_previous(int task, double lambda) const;

    void save_json(const std::string& path, const nlohmann::json& global_metadata) const;
    static MaskArchive load_json(const std::string& path, nlohmann::json* global_metadata = nullptr);

private:
    std::vector<BinaryMaskSet> masks_;
    std::vector<std::string> names_;
    std::vector<std::string> metadata_;  // serialized per-task metadata
};

}  // namespace fmalloc
