#include "fmalloc/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace fmalloc {

using ordered_json = nlohmann::ordered_json;

BleuMatrix::BleuMatrix(int n_tasks) : n_(n_tasks) {
    a_.assign(static_cast<size_t>(n_),
              std::vector<double>(static_cast<size_t>(n_), std::numeric_limits<double>::quiet_NaN()));
}

void BleuMatrix::set(int task, int stage, double bleu) {
    if (task < 0 || stage < 0 || task >= n_ || stage >= n_ || task > stage) {
        throw InputError("BleuMatrix::set: index out of range (need task <= stage)");
    }
    a_[static_cast<size_t>(task)][static_cast<size_t>(stage)] = bleu;
}

double BleuMatrix::get(int task, int stage) const {
    if (task < 0 || stage < 0 || task >= n_ || stage >= n_ || task > stage) {
        throw InputError("BleuMatrix::get: index out of range (need task <= stage)");
    }
    return a_[static_cast<size_t>(task)][static_cast<size_t>(stage)];
}

bool BleuMatrix::filled(int task, int stage) const {
    return !std::isnan(get(task, stage));
}

bool BleuMatrix::complete() const {
    for (int i = 0; i < n_; ++i) {
        for (int j = i; j < n_; ++j) {
            if (!filled(i, j)) return false;
        }
    }
    return true;
}

namespace {

// n-gram multiset as joined-token keys.
std::unordered_map<std::string, int> ngram_counts(const std::vector<std::string>& tokens, int n) {
    std::unordered_map<std::string, int> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i) {
        std::string key;
        for (int k = 0; k < n; ++k) {
            if (k) key += '\x01';
            key += tokens[i + static_cast<size_t>(k)];
        }
        counts[key] += 1;
    }
    return counts;
}

}  // namespace

BleuResult corpus_bleu_full(const std::vector<std::vector<std::string>>& hypotheses,
                            const std::vector<std::vector<std::string>>& references) {
    if (hypotheses.empty()) throw InputError("corpus_bleu: empty corpus");
    if (hypotheses.size() != references.size()) {
        throw InputError("corpus_bleu: hypothesis/reference count mismatch");
    }

    constexpr int kMaxOrder = 4;
    long matches[kMaxOrder] = {0, 0, 0, 0};
    long totals[kMaxOrder] = {0, 0, 0, 0};
    long hyp_len = 0, ref_len = 0;

    for (size_t s = 0; s < hypotheses.size(); ++s) {
        const auto& hyp = hypotheses[s];
        const auto& ref = references[s];
        hyp_len += static_cast<long>(hyp.size());
        ref_len += static_cast<long>(ref.size());
        for (int n = 1; n <= kMaxOrder; ++n) {
            auto hyp_counts = ngram_counts(hyp, n);
            if (hyp_counts.empty()) continue;
            auto ref_counts = ngram_counts(ref, n);
            for (const auto& [key, count] : hyp_counts) {
                totals[n - 1] += count;
                auto it = ref_counts.find(key);
                if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
            }
        }
    }

    BleuResult result;
    // Orders with no candidate n-grams anywhere in the corpus are excluded;
    // remaining orders get uniform weight.
    int included = 0;
    double log_prec_sum = 0.0;
    bool zero_precision = false;
    for (int n = 1; n <= kMaxOrder; ++n) {
        if (totals[n - 1] == 0) continue;
        ++included;
        result.max_order = n;
        double p = static_cast<double>(matches[n - 1]) / static_cast<double>(totals[n - 1]);
        result.precisions.push_back(p);
        if (p <= 0.0) {
            zero_precision = true;
        } else {
            log_prec_sum += std::log(p);
        }
    }

    if (hyp_len == 0 || included == 0 || zero_precision) {
        result.bleu = 0.0;
        result.brevity_penalty = hyp_len >= ref_len ? 1.0
                                 : hyp_len == 0     ? 0.0
                                                    : std::exp(1.0 - static_cast<double>(ref_len) /
                                                                         static_cast<double>(hyp_len));
        return result;
    }

    result.brevity_penalty =
        hyp_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    result.bleu = 100.0 * result.brevity_penalty * std::exp(log_prec_sum / included);
    return result;
}

double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references) {
    return corpus_bleu_full(hypotheses, references).bleu;
}

std::optional<double> forgetting_ratio(const BleuMatrix& m, int stage, std::string* diagnostic) {
    if (stage < 1 || stage >= m.n_tasks()) {
        throw InputError("forgetting_ratio: stage must be in [1, n_tasks)");
    }
    double sum = 0.0;
    for (int i = 0; i < stage; ++i) {
        double self = m.get(i, i);
        double later = m.get(i, stage);
        if (std::isnan(self) || std::isnan(later)) {
            if (diagnostic) *diagnostic = "missing BLEU cell for task " + std::to_string(i);
            return std::nullopt;
        }
        if (self == 0.0) {
            if (diagnostic) {
                *diagnostic = "a_" + std::to_string(i) + "^" + std::to_string(i) +
                              " is zero; FR undefined";
            }
            return std::nullopt;
        }
        sum += (self - later) / self;
    }
    return sum / static_cast<double>(stage);
}

std::optional<double> saturation_ratio(const BleuMatrix& m, int task, double upper_bound,
                                       std::string* diagnostic) {
    if (std::isnan(upper_bound) || upper_bound <= 0.0) {
        if (diagnostic) *diagnostic = "upper bound unavailable for task " + std::to_string(task);
        return std::nullopt;
    }
    double self = m.get(task, task);
    if (std::isnan(self)) {
        if (diagnostic) *diagnostic = "missing a_t^t for task " + std::to_string(task);
        return std::nullopt;
    }
    return 1.0 - self / upper_bound;
}

double capacity_usage(const std::vector<BinaryMaskSet>& masks) {
    if (masks.empty()) return 0.0;
    long total = 0, claimed = 0;
    const BinaryMaskSet& first = masks.front();
    for (size_t layer = 0; layer < first.size(); ++layer) {
        size_t n = first[layer].size();
        total += static_cast<long>(n);
        for (size_t i = 0; i < n; ++i) {
            for (const auto& mask : masks) {
                if (mask[layer][i]) {
                    ++claimed;
                    break;
                }
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(claimed) / static_cast<double>(total);
}

double jaccard_reuse(const BinaryMaskSet& a, const BinaryMaskSet& b, std::string* diagnostic) {
    if (a.size() != b.size()) throw InputError("jaccard_reuse: layer count mismatch");
    long inter = 0, uni = 0;
    for (size_t layer = 0; layer < a.size(); ++layer) {
        if (a[layer].size() != b[layer].size()) throw InputError("jaccard_reuse: cell count mismatch");
        for (size_t i = 0; i < a[layer].size(); ++i) {
            bool ai = a[layer][i] != 0, bi = b[layer][i] != 0;
            inter += (ai && bi) ? 1 : 0;
            uni += (ai || bi) ? 1 : 0;
        }
    }
    if (uni == 0) {
        if (diagnostic) *diagnostic = "both masks are all-zero; reuse defined as 0";
        return 0.0;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void emit_report(const RunReport& report, const std::string& metrics_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(metrics_dir);
    const int n = report.bleu.n_tasks();

    // bleu_matrix.csv: rows = tasks, columns = stages; blank below diagonal.
    {
        std::ofstream out(fs::path(metrics_dir) / "bleu_matrix.csv");
        out << "task_index,task_name";
        for (int j = 0; j < n; ++j) out << ",stage_" << j;
        out << '\n';
        for (int i = 0; i < n; ++i) {
            out << i << ',' << report.task_names[static_cast<size_t>(i)];
            for (int j = 0; j < n; ++j) {
                out << ',';
                if (j >= i && report.bleu.filled(i, j)) out << fmt_double(report.bleu.get(i, j));
            }
            out << '\n';
        }
    }

    // capacity.csv ordered by global step.
    {
        std::ofstream out(fs::path(metrics_dir) / "capacity.csv");
        out << "stage,global_step,epoch,tau,train_loss,capacity\n";
        for (const auto& row : report.capacity_log) {
            out << row.stage << ',' << row.global_step << ',' << row.epoch << ','
                << fmt_double(row.tau) << ',' << fmt_double(row.train_loss) << ','
                << fmt_double(row.capacity) << '\n';
        }
    }

    // reuse.csv: unordered task pairs.
    {
        std::ofstream out(fs::path(metrics_dir) / "reuse.csv");
        out << "task_i,task_j,name_i,name_j,jaccard\n";
        const auto& masks = report.archived_masks;
        for (size_t i = 0; i < masks.size(); ++i) {
            for (size_t j = i + 1; j < masks.size(); ++j) {
                out << i << ',' << j << ',' << report.task_names[i] << ',' << report.task_names[j]
                    << ',' << fmt_double(jaccard_reuse(masks[i], masks[j])) << '\n';
            }
        }
    }

    // summary.json; no timestamps so identical runs serialize byte-identically.
    {
        ordered_json summary;
        summary["schema_version"] = 1;
        summary["method"] = report.method;
        summary["partial"] = report.partial;
        summary["bleu_convention"] = report.bleu_convention;
        summary["tasks"] = report.task_names;

        ordered_json bleu = ordered_json::object();
        for (int i = 0; i < n; ++i) {
            ordered_json row = ordered_json::object();
            for (int j = i; j < n; ++j) {
                if (report.bleu.filled(i, j)) row["stage_" + std::to_string(j)] = report.bleu.get(i, j);
            }
            bleu[report.task_names[static_cast<size_t>(i)]] = row;
        }
        summary["bleu"] = bleu;

        ordered_json fr = ordered_json::object();
        for (int stage = 1; stage < n; ++stage) {
            std::string diag;
            auto value = forgetting_ratio(report.bleu, stage, &diag);
            if (value) {
                fr["stage_" + std::to_string(stage)] = *value;
            } else {
                fr["stage_" + std::to_string(stage)] = nullptr;
                fr["stage_" + std::to_string(stage) + "_diagnostic"] = diag;
            }
        }
        summary["forgetting_ratio"] = fr;

        ordered_json sr = ordered_json::object();
        bool any_upper = false;
        for (int t = 0; t < n && t < static_cast<int>(report.upper_bounds.size()); ++t) {
            double ub = report.upper_bounds[static_cast<size_t>(t)];
            if (std::isnan(ub)) continue;
            any_upper = true;
            std::string diag;
            auto value = saturation_ratio(report.bleu, t, ub, &diag);
            ordered_json entry;
            entry["upper_bound"] = ub;
            if (value) {
                entry["sr"] = *value;
            } else {
                entry["sr"] = nullptr;
                entry["diagnostic"] = diag;
            }
            sr[report.task_names[static_cast<size_t>(t)]] = entry;
        }
        summary["saturation_ratio"] = any_upper ? sr : ordered_json(nullptr);

        if (!report.archived_masks.empty()) {
            ordered_json cap = ordered_json::object();
            std::vector<BinaryMaskSet> prefix;
            for (size_t t = 0; t < report.archived_masks.size(); ++t) {
                prefix.push_back(report.archived_masks[t]);
                cap["through_task_" + std::to_string(t)] = capacity_usage(prefix);
            }
            summary["capacity_usage"] = cap;
        }

        std::ofstream out(fs::path(metrics_dir) / "summary.json");
        out << summary.dump(2) << '\n';
    }
}

BleuMatrix load_bleu_matrix_csv(const std::string& path, std::vector<std::string>* task_names) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw InputError("empty bleu matrix file " + path);

    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        // Trailing empty cells are dropped by getline; pad back.
        rows.push_back(cells);
    }
    int n = static_cast<int>(rows.size());
    BleuMatrix m(n);
    if (task_names) task_names->clear();
    for (int i = 0; i < n; ++i) {
        const auto& cells = rows[static_cast<size_t>(i)];
        if (task_names && cells.size() > 1) task_names->push_back(cells[1]);
        for (int j = 0; j < n; ++j) {
            size_t col = static_cast<size_t>(2 + j);
            if (col >= cells.size()) continue;
            const std::string& cell = cells[col];
            if (cell.empty()) continue;
            m.set(i, j, std::stod(cell));
        }
    }
    return m;
}

}  // namespace fmalloc
