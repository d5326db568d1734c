#pragma once

#include "fmalloc/data.hpp"
#include "fmalloc/metrics.hpp"
#include "fmalloc/model.hpp"

#include <vector>

namespace fmalloc {

// Per-cell empirical importance scores, one vector per FF layer.
struct ImportanceScores {
    std::vector<Arr> scores;
    int n_samples = 0;
};

// Symmetrized KL between the ff-dropout and clean predictions, averaged over
// target positions. With grad_accum set, backpropagates through both passes
// and accumulates gradients (notably d loss / d mask). `masks` defaults to
// all-ones; a finite-difference oracle can pass perturbed masks with the same
// noise seed.
double js_loss(const Seq2SeqModel& model, const PaddedBatch& batch, uint64_t noise_seed,
               Gradients* grad_accum = nullptr, const FFNoiseProvider* noise_override = nullptr,
               const MaskSet* masks = nullptr);

// I_k = mean over batches of |d L_JS / d m_k| at m = 1. Deterministic given
// seed; dropout noise per batch derives from (seed, batch index).
ImportanceScores estimate_importance(Seq2SeqModel& model, const std::vector<EncodedPair>& external,
                                     int n_batches, int batch_size, uint64_t seed,
                                     int n_threads = 1,
                                     const FFNoiseProvider* noise_override = nullptr);

// Keeps exactly ceil((1-s)*N) highest-importance cells per layer; ties keep
// the lower cell index.
BinaryMaskSet binarize_importance(const ImportanceScores& importance, double sparsity);

void save_importance_json(const ImportanceScores& importance, const std::string& path);

}  // namespace fmalloc
