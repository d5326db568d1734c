#pragma once

#include "fmalloc/config.hpp"
#include "fmalloc/data.hpp"
#include "fmalloc/metrics.hpp"
#include "fmalloc/model.hpp"
#include "fmalloc/pruning.hpp"
#include "fmalloc/taskmask.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fmalloc {

struct RunPaths {
    std::string root, checkpoints, masks, metrics, logs, decodes;
    static RunPaths create(const std::string& run_dir);
    std::string stage_checkpoint(int stage) const;
    std::string stage_log(int stage) const;
    std::string decode_file(int stage, int task) const;
};

// Generated (or file-loaded) corpora plus the shared vocabulary. The held-out
// external shard of the general domain feeds importance estimation.
struct Benchmark {
    struct TaskData {
        std::string name;
        std::vector<EncodedPair> train, dev, test;
    };
    Vocabulary vocab;
    TaskData general;
    std::vector<TaskData> domains;
    std::vector<EncodedPair> external;
    std::vector<std::string> vocab_symbols;
    std::vector<std::string> overlap_groups;  // per domain, aligned with `domains`

    std::vector<std::string> task_names() const;
};

Benchmark build_benchmark(const RunConfig& cfg);

// Diagonal empirical Fisher accumulated across task boundaries, with the
// anchor parameters captured at the latest update.
struct FisherState {
    std::vector<Mat> fisher;
    std::vector<Mat> anchor;
    bool has_anchor = false;
};

// fisher += sum_i weight_i * grad_i^2 (weights normally 1/n_batches).
void accumulate_weighted_squares(Mat& fisher, const std::vector<std::pair<double, Mat>>& grads);

double ewc_penalty(const Seq2SeqModel& model, const FisherState& state, double ewc_alpha);
void add_ewc_gradients(const Seq2SeqModel& model, const FisherState& state, double ewc_alpha,
                       Gradients& grads);
void fisher_update(Seq2SeqModel& model, const std::vector<EncodedPair>& corpus,
                   FisherState& state, const RunConfig& cfg, uint64_t batch_seed);

struct EvalResult {
    double bleu = 0.0;
    std::vector<std::vector<int>> hypotheses;  // token ids per test sentence
};

EvalResult evaluate_bleu(const Seq2SeqModel& model, const std::vector<EncodedPair>& test,
                         const Vocabulary& vocab, const MaskSet& masks, int beam_size);

double evaluate_loss(const Seq2SeqModel& model, const std::vector<EncodedPair>& data,
                     const MaskSet& masks, int batch_size, double* token_acc = nullptr);

// Trains from scratch on the general corpus with early stopping on
// validation loss; returns the best-validation model.
Seq2SeqModel pretrain_general(const RunConfig& cfg, const Benchmark& bench,
                              const std::string& log_path, bool echo);

struct RunResult {
    std::string run_dir;
    std::vector<std::string> task_names;
    BleuMatrix bleu{0};
    std::vector<double> upper_bounds;  // NaN when absent
    bool partial = false;
    MaskArchive archive;  // empty for baselines
};

// Full pipeline into the run directory: ensure pretrained model, prune
// (fmalloc), train the domain sequence, evaluate every earlier task after
// each stage, and emit metrics artifacts.
RunResult run_sequence(const RunConfig& cfg, bool echo = false);

// Deterministic task-order permutations for sweep mode.
std::vector<std::vector<std::string>> generate_task_orders(const std::vector<std::string>& names,
                                                           int n_orders, uint64_t seed);

}  // namespace fmalloc
