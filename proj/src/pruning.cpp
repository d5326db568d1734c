#include "fmalloc/pruning.hpp"

#include "fmalloc/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>

namespace fmalloc {

double js_loss(const Seq2SeqModel& model, const PaddedBatch& batch, uint64_t noise_seed,
               Gradients* grad_accum, const FFNoiseProvider* noise_override, const MaskSet* masks) {
    if (batch.size() == 0) throw InputError("js_loss: zero-length batch");
    MaskSet effective = masks ? *masks : ones_masks(model.config());

    DropoutOpts with_dropout{DropoutMode::FFOnly, noise_seed, noise_override};
    ForwardCache fwd1 = model.forward(batch, 0, batch.size(), effective, with_dropout);
    ForwardCache fwd2 = model.forward(batch, 0, batch.size(), effective, DropoutOpts{});

    Mat lp1 = model.log_probs(fwd1);
    Mat lp2 = model.log_probs(fwd2);
    const long rows = lp1.rows();

    double loss = 0.0;
    Mat dz1, dz2;
    if (grad_accum) {
        dz1.resize(rows, lp1.cols());
        dz2.resize(rows, lp2.cols());
    }
    for (long r = 0; r < rows; ++r) {
        Eigen::ArrayXd p1 = lp1.row(r).array().exp();
        Eigen::ArrayXd p2 = lp2.row(r).array().exp();
        Eigen::ArrayXd diff = lp1.row(r).array() - lp2.row(r).array();
        double kl12 = (p1 * diff).sum();
        double kl21 = -(p2 * diff).sum();
        loss += 0.5 * (kl12 + kl21);
        if (grad_accum) {
            double p1_dot = (p1 * diff).sum();
            double p2_dot = (p2 * -diff).sum();
            dz1.row(r) = (0.5 * (p1 * diff - p1 * p1_dot + (p1 - p2)) / static_cast<double>(rows)).matrix();
            dz2.row(r) = (0.5 * (p2 * -diff - p2 * p2_dot + (p2 - p1)) / static_cast<double>(rows)).matrix();
        }
    }
    loss /= static_cast<double>(rows);

    if (grad_accum) {
        model.backward(fwd1, dz1, *grad_accum);
        model.backward(fwd2, dz2, *grad_accum);
    }
    return loss;
}

namespace {

// Temporarily marks every parameter frozen so importance estimation skips
// parameter-gradient work; mask gradients are always produced.
class FreezeGuard {
public:
    explicit FreezeGuard(Seq2SeqModel& model) : model_(model) {
        for (Param* p : model.params()) {
            saved_.push_back(p->trainable);
            p->trainable = false;
        }
    }
    ~FreezeGuard() {
        const auto& params = model_.params();
        for (size_t i = 0; i < params.size(); ++i) params[i]->trainable = saved_[i];
    }

private:
    Seq2SeqModel& model_;
    std::vector<bool> saved_;
};

}  // namespace

ImportanceScores estimate_importance(Seq2SeqModel& model, const std::vector<EncodedPair>& external,
                                     int n_batches, int batch_size, uint64_t seed, int n_threads,
                                     const FFNoiseProvider* noise_override) {
    if (n_batches < 1) throw InputError("estimate_importance: n_batches must be >= 1");
    if (external.empty()) throw InputError("estimate_importance: empty external dataset");

    FreezeGuard freeze(model);

    // Materialize the batch stream up front so worker chunks are stable.
    BatchIterator iter(external, batch_size, hash_combine(seed, 0x65787464ULL));
    std::vector<PaddedBatch> batches;
    batches.reserve(static_cast<size_t>(n_batches));
    int epoch = 0;
    iter.start_epoch(epoch);
    while (static_cast<int>(batches.size()) < n_batches) {
        PaddedBatch b;
        if (!iter.next(b)) {
            iter.start_epoch(++epoch);
            continue;
        }
        batches.push_back(std::move(b));
    }

    const int n_ff = model.config().n_ff_layers();
    auto run_chunk = [&](int begin, int end) {
        std::vector<Arr> acc(static_cast<size_t>(n_ff), Arr::Zero(model.config().d_ff));
        for (int b = begin; b < end; ++b) {
            Gradients grads = model.make_gradients();
            js_loss(model, batches[static_cast<size_t>(b)],
                    hash_combine(seed, 0x6a730000ULL + static_cast<uint64_t>(b)), &grads,
                    noise_override);
            for (int l = 0; l < n_ff; ++l) {
                acc[static_cast<size_t>(l)] += grads.ff_mask_grads[static_cast<size_t>(l)].abs();
            }
        }
        return acc;
    };

    std::vector<std::vector<Arr>> partials;
    int threads = std::max(1, std::min(n_threads, n_batches));
    if (threads == 1) {
        partials.push_back(run_chunk(0, n_batches));
    } else {
        std::vector<std::future<std::vector<Arr>>> futures;
        for (int k = 0; k < threads; ++k) {
            int begin = n_batches * k / threads;
            int end = n_batches * (k + 1) / threads;
            futures.push_back(std::async(std::launch::async, run_chunk, begin, end));
        }
        for (auto& f : futures) partials.push_back(f.get());
    }

    ImportanceScores importance;
    importance.n_samples = n_batches;
    importance.scores.assign(static_cast<size_t>(n_ff), Arr::Zero(model.config().d_ff));
    // Merge in chunk order so the reduction is reproducible.
    for (const auto& part : partials) {
        for (int l = 0; l < n_ff; ++l) importance.scores[static_cast<size_t>(l)] += part[static_cast<size_t>(l)];
    }
    for (auto& s : importance.scores) s /= static_cast<double>(n_batches);
    return importance;
}

BinaryMaskSet binarize_importance(const ImportanceScores& importance, double sparsity) {
    if (sparsity < 0.0 || sparsity >= 1.0) throw InputError("binarize_importance: sparsity must be in [0,1)");
    BinaryMaskSet out;
    out.reserve(importance.scores.size());
    for (const Arr& scores : importance.scores) {
        const long n = scores.size();
        const long keep = static_cast<long>(std::ceil((1.0 - sparsity) * static_cast<double>(n)));
        std::vector<long> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](long a, long b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return a < b;  // ties keep the lower cell index
        });
        std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
        for (long k = 0; k < keep; ++k) mask[static_cast<size_t>(idx[static_cast<size_t>(k)])] = 1;
        out.push_back(std::move(mask));
    }
    return out;
}

void save_importance_json(const ImportanceScores& importance, const std::string& path) {
    nlohmann::ordered_json j;
    j["n_samples"] = importance.n_samples;
    nlohmann::ordered_json layers = nlohmann::ordered_json::object();
    for (size_t l = 0; l < importance.scores.size(); ++l) {
        std::vector<double> v(importance.scores[l].data(),
                              importance.scores[l].data() + importance.scores[l].size());
        layers[std::to_string(l)] = v;
    }
    j["scores"] = layers;
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path);
    out << j.dump(2) << '\n';
}

}  // namespace fmalloc
