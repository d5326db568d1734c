#pragma once

#include "fmalloc/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fmalloc {

// Binary task mask, one vector of cells per FF layer.
using BinaryMaskSet = std::vector<std::vector<uint8_t>>;

// a[i][j] = BLEU of task i's test set after learning stage j (i <= j).
// Task/stage 0 is the general domain. Unfilled cells are NaN.
struct BleuMatrix {
    explicit BleuMatrix(int n_tasks = 0);

    void set(int task, int stage, double bleu);
    double get(int task, int stage) const;
    bool filled(int task, int stage) const;
    int n_tasks() const { return n_; }
    bool complete() const;

private:
    int n_ = 0;
    std::vector<std::vector<double>> a_;
};

struct BleuResult {
    double bleu = 0.0;                 // percent in [0, 100]
    int max_order = 4;                 // highest n-gram order included
    std::vector<double> precisions;    // per included order
    double brevity_penalty = 1.0;
};

// Corpus-level BLEU-4 (modified n-gram precision, brevity penalty, no
// smoothing, case-sensitive). Orders with zero candidate n-grams in the
// whole corpus are excluded and the remaining orders weighted uniformly.
BleuResult corpus_bleu_full(const std::vector<std::vector<std::string>>& hypotheses,
                            const std::vector<std::vector<std::string>>& references);
double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references);

// Average relative BLEU degradation over tasks 0..stage-1 at `stage` (>= 1).
// Returns nullopt (with a diagnostic) when some a_i^i is zero.
std::optional<double> forgetting_ratio(const BleuMatrix& m, int stage, std::string* diagnostic = nullptr);

// SR = 1 - a_t^t / upper_bound_t. Negative values are reported as-is.
std::optional<double> saturation_ratio(const BleuMatrix& m, int task, double upper_bound,
                                       std::string* diagnostic = nullptr);

// Fraction of all FF cells claimed by the element-wise max of the given
// binary masks.
double capacity_usage(const std::vector<BinaryMaskSet>& masks);

// |intersection| / |union| over all cells of two binary masks.
double jaccard_reuse(const BinaryMaskSet& a, const BinaryMaskSet& b, std::string* diagnostic = nullptr);

struct CapacityLogRow {
    int stage = 0;
    long global_step = 0;
    int epoch = 0;
    double tau = 0.0;
    double train_loss = 0.0;
    double capacity = 0.0;
};

struct RunReport {
    std::vector<std::string> task_names;  // index 0 = general
    BleuMatrix bleu;
    std::vector<double> upper_bounds;     // per task, NaN when absent
    std::vector<BinaryMaskSet> archived_masks;  // per archived task, may be empty
    std::vector<CapacityLogRow> capacity_log;
    std::string method;
    bool partial = false;
    std::string bleu_convention =
        "BLEU-4, uniform weights over n-gram orders with nonzero candidate counts, "
        "no smoothing, case-sensitive";
};

// Writes bleu_matrix.csv, capacity.csv, reuse.csv and summary.json under
// metrics_dir. Numeric CSV cells round-trip exactly (17 significant digits).
void emit_report(const RunReport& report, const std::string& metrics_dir);

// Reads a bleu_matrix.csv written by emit_report.
BleuMatrix load_bleu_matrix_csv(const std::string& path, std::vector<std::string>* task_names = nullptr);

std::string fmt_double(double v);

}  // namespace fmalloc
