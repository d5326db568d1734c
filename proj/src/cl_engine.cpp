#include "fmalloc/cl_engine.hpp"

#include "fmalloc/optimizer.hpp"
#include "fmalloc/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <limits>
#include <set>

namespace fmalloc {

namespace fs = std::filesystem;
using nlohmann::json;

RunPaths RunPaths::create(const std::string& run_dir) {
    RunPaths p;
    p.root = run_dir;
    p.checkpoints = (fs::path(run_dir) / "checkpoints").string();
    p.masks = (fs::path(run_dir) / "masks").string();
    p.metrics = (fs::path(run_dir) / "metrics").string();
    p.logs = (fs::path(run_dir) / "logs").string();
    p.decodes = (fs::path(run_dir) / "decodes").string();
    for (const auto& dir : {p.root, p.checkpoints, p.masks, p.metrics, p.logs, p.decodes}) {
        fs::create_directories(dir);
    }
    return p;
}

std::string RunPaths::stage_checkpoint(int stage) const {
    return (fs::path(checkpoints) / ("stage_" + std::to_string(stage) + ".ckpt")).string();
}
std::string RunPaths::stage_log(int stage) const {
    return (fs::path(logs) / ("stage_" + std::to_string(stage) + ".log")).string();
}
std::string RunPaths::decode_file(int stage, int task) const {
    fs::path dir = fs::path(decodes) / ("stage_" + std::to_string(stage));
    fs::create_directories(dir);
    return (dir / ("task_" + std::to_string(task) + ".txt")).string();
}

std::vector<std::string> Benchmark::task_names() const {
    std::vector<std::string> names{general.name};
    for (const auto& d : domains) names.push_back(d.name);
    return names;
}

namespace {

class Logger {
public:
    Logger(const std::string& path, bool echo) : echo_(echo) {
        if (!path.empty()) out_.open(path, std::ios::app);
    }
    void line(const std::string& msg) {
        if (out_.is_open()) out_ << msg << '\n' << std::flush;
        if (echo_) std::cout << msg << '\n' << std::flush;
    }

private:
    std::ofstream out_;
    bool echo_;
};

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

Corpus load_file_corpus(const DomainSource& src) {
    Corpus c;
    c.train = load_pairs_tsv(src.train_tsv);
    c.dev = load_pairs_tsv(src.dev_tsv);
    c.test = load_pairs_tsv(src.test_tsv);
    return c;
}

}  // namespace

Benchmark build_benchmark(const RunConfig& cfg) {
    Benchmark bench;

    // General corpus with an extra held-out shard for importance estimation.
    Corpus general;
    std::vector<SentencePair> external;
    if (cfg.general.from_files()) {
        general = load_file_corpus(cfg.general);
        // File mode: reuse the dev set as the external shard.
        external = general.dev;
    } else {
        DomainSpec spec = cfg.general.spec;
        int ext = cfg.importance_batches * cfg.batch_size;
        spec.n_train += ext;
        Corpus all = gen_domain_corpus(spec, cfg.seeds.data);
        general.train.assign(all.train.begin(), all.train.begin() + cfg.general.spec.n_train);
        external.assign(all.train.begin() + cfg.general.spec.n_train, all.train.end());
        general.dev = all.dev;
        general.test = all.test;
    }

    std::vector<Corpus> domain_corpora;
    for (const auto& d : cfg.domains) {
        domain_corpora.push_back(d.from_files() ? load_file_corpus(d)
                                                : gen_domain_corpus(d.spec, cfg.seeds.data));
        bench.overlap_groups.push_back(d.spec.overlap_group);
    }

    // Vocabulary: union of declared symbol subsets and observed tokens,
    // lexicographic, so it is independent of domain order.
    std::set<std::string> symbols(cfg.general.spec.vocab_subset.begin(),
                                  cfg.general.spec.vocab_subset.end());
    for (const auto& d : cfg.domains) {
        symbols.insert(d.spec.vocab_subset.begin(), d.spec.vocab_subset.end());
    }
    auto absorb = [&symbols](const std::vector<SentencePair>& pairs) {
        for (const auto& p : pairs) {
            symbols.insert(p.src.begin(), p.src.end());
            symbols.insert(p.tgt.begin(), p.tgt.end());
        }
    };
    for (const auto* split : {&general.train, &general.dev, &general.test}) absorb(*split);
    for (const auto& c : domain_corpora) {
        for (const auto* split : {&c.train, &c.dev, &c.test}) absorb(*split);
    }
    bench.vocab.add_symbols(std::vector<std::string>(symbols.begin(), symbols.end()));
    for (int i = 0; i < bench.vocab.size(); ++i) bench.vocab_symbols.push_back(bench.vocab.decode_id(i));

    bench.general.name = cfg.general.spec.name;
    bench.general.train = encode_corpus(bench.vocab, general.train);
    bench.general.dev = encode_corpus(bench.vocab, general.dev);
    bench.general.test = encode_corpus(bench.vocab, general.test);
    bench.external = encode_corpus(bench.vocab, external);
    for (size_t i = 0; i < domain_corpora.size(); ++i) {
        Benchmark::TaskData t;
        t.name = cfg.domains[i].spec.name;
        t.train = encode_corpus(bench.vocab, domain_corpora[i].train);
        t.dev = encode_corpus(bench.vocab, domain_corpora[i].dev);
        t.test = encode_corpus(bench.vocab, domain_corpora[i].test);
        bench.domains.push_back(std::move(t));
    }
    return bench;
}

// ---- EWC / Fisher ----

void accumulate_weighted_squares(Mat& fisher, const std::vector<std::pair<double, Mat>>& grads) {
    for (const auto& [weight, g] : grads) {
        if (fisher.size() == 0) fisher = Mat::Zero(g.rows(), g.cols());
        fisher.array() += weight * g.array().square();
    }
}

double ewc_penalty(const Seq2SeqModel& model, const FisherState& state, double ewc_alpha) {
    if (!state.has_anchor) throw StateError("ewc_penalty: missing anchor");
    double penalty = 0.0;
    const auto& params = model.params();
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->trainable) continue;
        penalty += (state.fisher[i].array() *
                    (params[i]->value.array() - state.anchor[i].array()).square())
                       .sum();
    }
    return ewc_alpha * penalty;
}

void add_ewc_gradients(const Seq2SeqModel& model, const FisherState& state, double ewc_alpha,
                       Gradients& grads) {
    if (!state.has_anchor) throw StateError("add_ewc_gradients: missing anchor");
    const auto& params = model.params();
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->trainable) continue;
        grads.param_grads[i].array() +=
            2.0 * ewc_alpha * state.fisher[i].array() *
            (params[i]->value.array() - state.anchor[i].array());
    }
}

void fisher_update(Seq2SeqModel& model, const std::vector<EncodedPair>& corpus, FisherState& state,
                   const RunConfig& cfg, uint64_t batch_seed) {
    if (corpus.empty()) throw InputError("fisher_update: empty corpus");
    const auto& params = model.params();
    if (state.fisher.empty()) {
        state.fisher.reserve(params.size());
        for (const Param* p : params) state.fisher.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }

    MaskSet ones = ones_masks(model.config());
    BatchIterator iter(corpus, cfg.batch_size, batch_seed);
    iter.start_epoch(0);
    const int n_batches = iter.batches_per_epoch();
    std::vector<Mat> batch_fisher;
    batch_fisher.reserve(params.size());
    for (const Param* p : params) batch_fisher.push_back(Mat::Zero(p->value.rows(), p->value.cols()));

    PaddedBatch batch;
    Gradients grads = model.make_gradients();
    while (iter.next(batch)) {
        grads.zero();
        ForwardCache fwd = model.forward(batch, 0, batch.size(), ones, DropoutOpts{});
        Mat dlogits;
        model.cross_entropy(fwd, &dlogits);
        model.backward(fwd, dlogits, grads);
        for (size_t i = 0; i < params.size(); ++i) {
            if (!params[i]->trainable) continue;
            accumulate_weighted_squares(batch_fisher[i],
                                        {{1.0 / static_cast<double>(n_batches), grads.param_grads[i]}});
        }
    }
    for (size_t i = 0; i < params.size(); ++i) state.fisher[i] += batch_fisher[i];

    state.anchor.clear();
    state.anchor.reserve(params.size());
    for (const Param* p : params) state.anchor.push_back(p->value);
    state.has_anchor = true;
}

// ---- Evaluation ----

EvalResult evaluate_bleu(const Seq2SeqModel& model, const std::vector<EncodedPair>& test,
                         const Vocabulary& vocab, const MaskSet& masks, int beam_size) {
    if (test.empty()) throw InputError("evaluate_bleu: empty test set");
    EvalResult result;
    std::vector<std::vector<std::string>> hyps, refs;
    hyps.reserve(test.size());
    refs.reserve(test.size());
    for (const auto& pair : test) {
        BeamHypothesis hyp = model.decode(pair.src, masks, beam_size);
        result.hypotheses.push_back(hyp.tokens);
        hyps.push_back(vocab.decode(hyp.tokens));
        std::vector<int> ref_ids(pair.tgt_out.begin(), pair.tgt_out.end() - 1);  // strip EOS
        refs.push_back(vocab.decode(ref_ids));
    }
    result.bleu = corpus_bleu(hyps, refs);
    return result;
}

double evaluate_loss(const Seq2SeqModel& model, const std::vector<EncodedPair>& data,
                     const MaskSet& masks, int batch_size, double* token_acc) {
    BatchIterator iter(data, batch_size, 0);
    iter.start_epoch(0);
    PaddedBatch batch;
    double loss_sum = 0.0;
    long tokens = 0, correct = 0;
    while (iter.next(batch)) {
        ForwardCache fwd = model.forward(batch, 0, batch.size(), masks, DropoutOpts{});
        long n = model.target_count(fwd);
        loss_sum += model.cross_entropy(fwd) * static_cast<double>(n);
        correct += model.correct_count(fwd);
        tokens += n;
    }
    if (token_acc) *token_acc = tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
    return tokens ? loss_sum / static_cast<double>(tokens) : 0.0;
}

// ---- Training plumbing ----

namespace {

// Chunked forward/backward over one batch; chunk boundaries are fixed by
// n_threads so gradient accumulation order is deterministic.
class Trainer {
public:
    Trainer(const Seq2SeqModel& model, int n_threads) : model_(model), n_threads_(n_threads) {
        for (int k = 0; k < n_threads_; ++k) scratch_.push_back(model.make_gradients());
    }

    double step(const PaddedBatch& batch, const MaskSet& masks, const DropoutOpts& dropout,
                Gradients& grads) {
        long total_tokens = 0;
        for (const auto& item : batch.items) total_tokens += static_cast<long>(item.tgt_out.size());

        const size_t n = batch.size();
        const int threads = static_cast<int>(std::min<size_t>(static_cast<size_t>(n_threads_), n));
        if (threads <= 1) {
            ForwardCache fwd = model_.forward(batch, 0, n, masks, dropout);
            Mat dlogits;
            double loss = model_.cross_entropy(fwd, &dlogits, total_tokens);
            model_.backward(fwd, dlogits, grads);
            return loss;
        }

        auto run_chunk = [&](int k) {
            size_t begin = n * static_cast<size_t>(k) / static_cast<size_t>(threads);
            size_t end = n * static_cast<size_t>(k + 1) / static_cast<size_t>(threads);
            scratch_[static_cast<size_t>(k)].zero();
            ForwardCache fwd = model_.forward(batch, begin, end, masks, dropout);
            Mat dlogits;
            double loss = model_.cross_entropy(fwd, &dlogits, total_tokens);
            model_.backward(fwd, dlogits, scratch_[static_cast<size_t>(k)]);
            return loss;
        };
        std::vector<std::future<double>> futures;
        for (int k = 1; k < threads; ++k) {
            futures.push_back(std::async(std::launch::async, run_chunk, k));
        }
        double loss = run_chunk(0);
        grads.add(scratch_[0]);
        for (int k = 1; k < threads; ++k) {
            loss += futures[static_cast<size_t>(k - 1)].get();
        }
        // Merge in chunk order (chunk 0 already merged).
        for (int k = 1; k < threads; ++k) grads.add(scratch_[static_cast<size_t>(k)]);
        return loss;
    }

private:
    const Seq2SeqModel& model_;
    int n_threads_;
    std::vector<Gradients> scratch_;
};

std::vector<Mat> snapshot_params(const Seq2SeqModel& model) {
    std::vector<Mat> snap;
    snap.reserve(model.params().size());
    for (const Param* p : model.params()) snap.push_back(p->value);
    return snap;
}

void restore_params(Seq2SeqModel& model, const std::vector<Mat>& snap) {
    const auto& params = model.params();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

std::vector<TensorSlot> trainable_slots(Seq2SeqModel& model, Gradients& grads) {
    std::vector<TensorSlot> slots;
    const auto& params = model.params();
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i]->trainable) slots.push_back({&params[i]->value, &grads.param_grads[i]});
    }
    return slots;
}

struct EmbeddingBuffers {
    std::vector<Mat> value;  // N x 1 per FF layer
    std::vector<Mat> grad;

    TaskEmbedding as_embedding() const {
        TaskEmbedding e;
        for (const auto& v : value) e.push_back(v.col(0).array());
        return e;
    }
    void set_grad(const std::vector<Arr>& g) {
        for (size_t l = 0; l < grad.size(); ++l) grad[l].col(0) = g[l].matrix();
    }
};

double claimed_fraction(const BinaryMaskSet& read_only, const BinaryMaskSet& claimed) {
    long total = 0, on = 0;
    for (size_t l = 0; l < read_only.size(); ++l) {
        total += static_cast<long>(read_only[l].size());
        for (size_t i = 0; i < read_only[l].size(); ++i) {
            if (read_only[l][i] || claimed[l][i]) ++on;
        }
    }
    return total ? static_cast<double>(on) / static_cast<double>(total) : 0.0;
}

struct StageOutcome {
    double best_val_bleu = 0.0;
    int epochs = 0;
    double gate_soft_fraction = 0.0;  // gate values in (0.05, 0.95) at tau = 1/tau_max
};

}  // namespace

Seq2SeqModel pretrain_general(const RunConfig& cfg, const Benchmark& bench,
                              const std::string& log_path, bool echo) {
    if (bench.general.train.empty()) throw InputError("pretrain_general: empty corpus");
    Logger log(log_path, echo);
    ModelConfig mc = cfg.model;
    mc.vocab_size = bench.vocab.size();
    Seq2SeqModel model(mc, cfg.seeds.init);

    Gradients grads = model.make_gradients();
    AdamOptimizer opt(trainable_slots(model, grads), cfg.pretrain_lr);
    Trainer trainer(model, cfg.n_threads);
    BatchIterator iter(bench.general.train, cfg.batch_size, hash_combine(cfg.seeds.data, 0x70726574ULL));
    MaskSet ones = ones_masks(mc);

    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<Mat> best = snapshot_params(model);
    int no_improve = 0;
    long global_step = 0;

    for (int epoch = 0; epoch < cfg.pretrain_max_epochs; ++epoch) {
        iter.start_epoch(epoch);
        PaddedBatch batch;
        double train_loss = 0.0;
        int steps = 0;
        while (iter.next(batch)) {
            grads.zero();
            DropoutOpts dropout{DropoutMode::All,
                                hash_combine(cfg.seeds.data, 0xd0ULL + static_cast<uint64_t>(global_step)),
                                nullptr};
            double loss = trainer.step(batch, ones, dropout, grads);
            if (!std::isfinite(loss)) {
                throw TrainingError(fmt("pretraining diverged: loss is not finite at epoch %d step %ld",
                                        epoch, global_step));
            }
            opt.step();
            train_loss += loss;
            ++steps;
            ++global_step;
        }
        double acc = 0.0;
        double val_loss = evaluate_loss(model, bench.general.dev, ones, cfg.batch_size, &acc);
        log.line(fmt("pretrain epoch=%d steps=%ld train_loss=%.6f val_loss=%.6f val_acc=%.4f", epoch,
                     global_step, steps ? train_loss / steps : 0.0, val_loss, acc));
        if (val_loss < best_loss - 1e-9) {
            best_loss = val_loss;
            best = snapshot_params(model);
            no_improve = 0;
        } else if (++no_improve >= cfg.patience) {
            log.line(fmt("pretrain early stop at epoch %d (best val_loss=%.6f)", epoch, best_loss));
            break;
        }
    }
    restore_params(model, best);
    return model;
}

namespace {

// Shared per-stage state while running a sequence.
struct SequenceContext {
    const RunConfig& cfg;
    const Benchmark& bench;
    const RunPaths& paths;
    bool echo;
    std::vector<CapacityLogRow>* capacity_log;
    long global_step = 0;
    long last_capacity_step = -1;

    void log_capacity(const CapacityLogRow& row) {
        if (!capacity_log || row.global_step == last_capacity_step) return;
        capacity_log->push_back(row);
        last_capacity_step = row.global_step;
    }
};

StageOutcome train_task_fmalloc(SequenceContext& ctx, Seq2SeqModel& model, MaskArchive& archive,
                                int stage, const Benchmark::TaskData& task) {
    const RunConfig& cfg = ctx.cfg;
    Logger log(ctx.paths.stage_log(stage), ctx.echo);
    BinaryMaskSet read_only = archive.aggregate_previous(stage, cfg.lambda);

    double writable = 1.0 - capacity_usage({read_only});
    if (writable <= 0.0) {
        log.line("warning: capacity exhausted, all cells read-only; only the task embedding can adapt");
    }

    TaskEmbedding e0 = init_task_embedding(archive.mask(0), cfg.alpha,
                                           hash_combine(cfg.seeds.init, 0xe0ULL + static_cast<uint64_t>(stage)));
    EmbeddingBuffers emb;
    for (const auto& e : e0) {
        emb.value.push_back(e.matrix());
        emb.grad.push_back(Mat::Zero(e.size(), 1));
    }

    Gradients grads = model.make_gradients();
    std::vector<TensorSlot> slots = trainable_slots(model, grads);
    for (size_t l = 0; l < emb.value.size(); ++l) slots.push_back({&emb.value[l], &emb.grad[l]});
    AdamOptimizer opt(slots, cfg.lr);
    Trainer trainer(model, cfg.n_threads);
    BatchIterator iter(task.train, cfg.batch_size,
                       hash_combine(cfg.seeds.data, 0x5400ULL + static_cast<uint64_t>(stage)));

    // Cells ever claimed by this task (archive-candidate gate at lambda),
    // merged with the read-only set for the capacity log.
    BinaryMaskSet claimed = archive_mask_from_embedding(emb.as_embedding(), cfg.tau_max, cfg.lambda);
    for (auto& layer : claimed) std::fill(layer.begin(), layer.end(), 0);

    auto update_claimed = [&]() {
        BinaryMaskSet now = archive_mask_from_embedding(emb.as_embedding(), cfg.tau_max, cfg.lambda);
        for (size_t l = 0; l < claimed.size(); ++l) {
            for (size_t i = 0; i < claimed[l].size(); ++i) claimed[l][i] |= now[l][i];
        }
    };

    double best_bleu = -1.0;
    std::vector<Mat> best_params = snapshot_params(model);
    std::vector<Mat> best_emb = emb.value;
    int no_improve = 0;
    StageOutcome outcome;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        iter.start_epoch(epoch);
        AnnealSchedule schedule{cfg.tau_max, iter.batches_per_epoch()};
        PaddedBatch batch;
        int step_in_epoch = 0;
        double train_loss = 0.0;
        while (iter.next(batch)) {
            double tau = schedule.tau_at(step_in_epoch);
            MaskSet masks = gate_masks(emb.as_embedding(), tau);
            grads.zero();
            double loss = trainer.step(batch, masks, DropoutOpts{}, grads);
            if (!std::isfinite(loss)) {
                throw TrainingError(fmt("stage %d diverged: loss not finite at epoch %d step %d", stage,
                                        epoch, step_in_epoch));
            }
            emb.set_grad(embedding_grad(emb.as_embedding(), tau, grads.ff_mask_grads));
            mask_gradients(grads, model, read_only);
            opt.step();
            ++step_in_epoch;
            ++ctx.global_step;
            train_loss += loss;
            if (ctx.capacity_log && (ctx.global_step % 10 == 0)) {
                update_claimed();
                ctx.log_capacity(CapacityLogRow{stage, ctx.global_step, epoch, tau, loss,
                                                claimed_fraction(read_only, claimed)});
            }
        }
        update_claimed();
        ctx.log_capacity(CapacityLogRow{stage, ctx.global_step, epoch,
                                        schedule.tau_at(step_in_epoch - 1),
                                        step_in_epoch ? train_loss / step_in_epoch : 0.0,
                                        claimed_fraction(read_only, claimed)});

        // Validate with the would-be-archived binary mask.
        MaskSet val_masks = masks_from_binary(
            archive_mask_from_embedding(emb.as_embedding(), cfg.tau_max, cfg.lambda));
        double val_bleu = evaluate_bleu(model, task.dev, ctx.bench.vocab, val_masks, 1).bleu;
        log.line(fmt("stage=%d epoch=%d steps=%d train_loss=%.6f val_bleu=%.4f capacity=%.6f", stage,
                     epoch, step_in_epoch, step_in_epoch ? train_loss / step_in_epoch : 0.0, val_bleu,
                     claimed_fraction(read_only, claimed)));
        outcome.epochs = epoch + 1;
        if (val_bleu > best_bleu + 1e-12) {
            best_bleu = val_bleu;
            best_params = snapshot_params(model);
            best_emb = emb.value;
            no_improve = 0;
        } else if (++no_improve >= cfg.patience) {
            log.line(fmt("stage=%d early stop at epoch %d (best val_bleu=%.4f)", stage, epoch, best_bleu));
            break;
        }
        if (val_bleu >= 100.0 - 1e-9) {
            log.line(fmt("stage=%d reached perfect validation BLEU at epoch %d", stage, epoch));
            break;
        }
    }

    restore_params(model, best_params);
    emb.value = best_emb;
    outcome.best_val_bleu = best_bleu;

    // Polarization of the hard-end gate sigma(e * tau_max): fraction of gate
    // values in the soft band (0.05, 0.95).
    {
        long soft = 0, total = 0;
        TaskEmbedding e = emb.as_embedding();
        for (const auto& layer : e) {
            Arr gate = gate_mask(layer, 1.0 / cfg.tau_max);
            total += gate.size();
            for (long i = 0; i < gate.size(); ++i) {
                if (gate[i] > 0.05 && gate[i] < 0.95) ++soft;
            }
        }
        outcome.gate_soft_fraction = total ? static_cast<double>(soft) / static_cast<double>(total) : 0.0;
    }

    BinaryMaskSet mask = archive_mask_from_embedding(emb.as_embedding(), cfg.tau_max, cfg.lambda);
    json meta;
    meta["tau_max"] = cfg.tau_max;
    meta["lambda"] = cfg.lambda;
    meta["alpha"] = cfg.alpha;
    meta["seed"] = cfg.seeds.init;
    meta["epochs"] = outcome.epochs;
    meta["best_val_bleu"] = best_bleu;
    meta["gate_soft_fraction"] = outcome.gate_soft_fraction;
    archive.archive(stage, task.name, std::move(mask), meta);
    return outcome;
}

StageOutcome train_task_baseline(SequenceContext& ctx, Seq2SeqModel& model, int stage,
                                 const Benchmark::TaskData& task,
                                 const std::vector<EncodedPair>& train_data, FisherState* fisher) {
    const RunConfig& cfg = ctx.cfg;
    Logger log(ctx.paths.stage_log(stage), ctx.echo);

    Gradients grads = model.make_gradients();
    AdamOptimizer opt(trainable_slots(model, grads), cfg.lr);
    Trainer trainer(model, cfg.n_threads);
    BatchIterator iter(train_data, cfg.batch_size,
                       hash_combine(cfg.seeds.data, 0x5400ULL + static_cast<uint64_t>(stage)));
    MaskSet ones = ones_masks(model.config());

    double best_bleu = -1.0;
    std::vector<Mat> best_params = snapshot_params(model);
    int no_improve = 0;
    StageOutcome outcome;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        iter.start_epoch(epoch);
        PaddedBatch batch;
        int step_in_epoch = 0;
        double train_loss = 0.0;
        while (iter.next(batch)) {
            grads.zero();
            double loss = trainer.step(batch, ones, DropoutOpts{}, grads);
            if (fisher && fisher->has_anchor) {
                loss += ewc_penalty(model, *fisher, cfg.ewc_alpha);
                add_ewc_gradients(model, *fisher, cfg.ewc_alpha, grads);
            }
            if (!std::isfinite(loss)) {
                throw TrainingError(fmt("stage %d diverged: loss not finite at epoch %d step %d", stage,
                                        epoch, step_in_epoch));
            }
            opt.step();
            ++step_in_epoch;
            ++ctx.global_step;
            train_loss += loss;
        }
        double val_bleu = evaluate_bleu(model, task.dev, ctx.bench.vocab, ones, 1).bleu;
        log.line(fmt("stage=%d epoch=%d steps=%d train_loss=%.6f val_bleu=%.4f", stage, epoch,
                     step_in_epoch, step_in_epoch ? train_loss / step_in_epoch : 0.0, val_bleu));
        outcome.epochs = epoch + 1;
        if (val_bleu > best_bleu + 1e-12) {
            best_bleu = val_bleu;
            best_params = snapshot_params(model);
            no_improve = 0;
        } else if (++no_improve >= cfg.patience) {
            log.line(fmt("stage=%d early stop at epoch %d (best val_bleu=%.4f)", stage, epoch, best_bleu));
            break;
        }
        if (val_bleu >= 100.0 - 1e-9) {
            log.line(fmt("stage=%d reached perfect validation BLEU at epoch %d", stage, epoch));
            break;
        }
    }
    restore_params(model, best_params);
    outcome.best_val_bleu = best_bleu;
    return outcome;
}

void write_decodes(const std::string& path, const std::vector<std::vector<int>>& hyps,
                   const Vocabulary& vocab) {
    std::ofstream out(path);
    for (const auto& ids : hyps) out << join_tokens(vocab.decode(ids)) << '\n';
}

Seq2SeqModel ensure_pretrained(const RunConfig& cfg, const Benchmark& bench, const RunPaths& paths,
                               bool echo) {
    std::string pretrained_path = (fs::path(paths.checkpoints) / "pretrained.ckpt").string();
    if (!cfg.init_checkpoint.empty()) {
        std::vector<std::string> symbols;
        Seq2SeqModel model = Seq2SeqModel::load_checkpoint(cfg.init_checkpoint, &symbols);
        if (symbols != bench.vocab_symbols) {
            throw ConfigError("init_checkpoint vocabulary does not match this benchmark");
        }
        return model;
    }
    if (fs::exists(pretrained_path)) {
        std::vector<std::string> symbols;
        Seq2SeqModel model = Seq2SeqModel::load_checkpoint(pretrained_path, &symbols);
        if (symbols != bench.vocab_symbols) {
            throw ConfigError("existing pretrained.ckpt vocabulary does not match this benchmark");
        }
        return model;
    }
    Seq2SeqModel model = pretrain_general(cfg, bench, (fs::path(paths.logs) / "pretrain.log").string(), echo);
    model.save_checkpoint(pretrained_path, bench.vocab_symbols);
    return model;
}

// Joint training on all domains mixed; fills one BLEU value per task.
std::vector<double> mixed_upper_bounds(SequenceContext& ctx, const Seq2SeqModel& pretrained,
                                       int log_stage) {
    const RunConfig& cfg = ctx.cfg;
    Seq2SeqModel model = pretrained;  // fresh copy
    model.freeze_for_continual_learning();

    std::vector<EncodedPair> combined;
    for (const auto& d : ctx.bench.domains) {
        combined.insert(combined.end(), d.train.begin(), d.train.end());
    }
    Benchmark::TaskData pseudo;
    pseudo.name = "mixed";
    // Balanced validation: concatenate all dev sets.
    for (const auto& d : ctx.bench.domains) {
        pseudo.dev.insert(pseudo.dev.end(), d.dev.begin(), d.dev.end());
    }
    train_task_baseline(ctx, model, log_stage, pseudo, combined, nullptr);

    MaskSet ones = ones_masks(model.config());
    std::vector<double> bounds;
    bounds.push_back(evaluate_bleu(model, ctx.bench.general.test, ctx.bench.vocab, ones, cfg.beam_size).bleu);
    for (const auto& d : ctx.bench.domains) {
        bounds.push_back(evaluate_bleu(model, d.test, ctx.bench.vocab, ones, cfg.beam_size).bleu);
    }
    return bounds;
}

}  // namespace

RunResult run_sequence(const RunConfig& cfg, bool echo) {
    RunConfig resolved = cfg;
    resolved.run_dir = resolve_run_dir(cfg.run_dir, cfg.name);
    RunPaths paths = RunPaths::create(resolved.run_dir);
    {
        std::ofstream out(fs::path(paths.root) / "config.json");
        out << run_config_to_json(resolved).dump(2) << '\n';
    }

    Benchmark bench = build_benchmark(resolved);
    const int n_tasks = 1 + static_cast<int>(bench.domains.size());

    RunResult result;
    result.run_dir = resolved.run_dir;
    result.task_names = bench.task_names();
    result.bleu = BleuMatrix(n_tasks);
    result.upper_bounds.assign(static_cast<size_t>(n_tasks), std::numeric_limits<double>::quiet_NaN());

    Logger main_log(paths.stage_log(0), echo);
    Seq2SeqModel pretrained = ensure_pretrained(resolved, bench, paths, echo);
    Seq2SeqModel model = pretrained;
    model.freeze_for_continual_learning();

    std::vector<CapacityLogRow> capacity_log;
    SequenceContext ctx{resolved, bench, paths, echo, &capacity_log, 0};

    const bool is_fmalloc = resolved.method == Method::FMalloc;
    MaskSet general_eval_mask = ones_masks(model.config());

    auto eval_task = [&](int task, int stage, const MaskSet& masks) {
        const auto& data = task == 0 ? bench.general.test
                                     : bench.domains[static_cast<size_t>(task - 1)].test;
        EvalResult ev = evaluate_bleu(model, data, bench.vocab, masks, resolved.beam_size);
        write_decodes(paths.decode_file(stage, task), ev.hypotheses, bench.vocab);
        result.bleu.set(task, stage, ev.bleu);
        return ev.bleu;
    };

    RunReport report;
    report.task_names = result.task_names;
    report.method = method_to_string(resolved.method);

    auto finalize = [&](bool partial) {
        report.bleu = result.bleu;
        report.upper_bounds = result.upper_bounds;
        report.capacity_log = capacity_log;
        report.partial = partial;
        if (is_fmalloc) {
            report.archived_masks.clear();
            for (int t = 0; t < result.archive.n_archived(); ++t) {
                report.archived_masks.push_back(result.archive.mask(t));
            }
            json meta;
            meta["lambda"] = resolved.lambda;
            meta["tau_max"] = resolved.tau_max;
            meta["alpha"] = resolved.alpha;
            meta["sparsity"] = resolved.sparsity;
            meta["seeds"] = {{"init", resolved.seeds.init},
                             {"data", resolved.seeds.data},
                             {"order", resolved.seeds.order}};
            meta["importance_batches"] = resolved.importance_batches;
            result.archive.save_json((fs::path(paths.masks) / "archive.json").string(), meta);
        }
        result.partial = partial;
        bool any_upper = false;
        for (double ub : result.upper_bounds) any_upper = any_upper || !std::isnan(ub);
        if (any_upper) {
            json ub;
            for (size_t i = 0; i < result.task_names.size(); ++i) {
                if (!std::isnan(result.upper_bounds[i])) ub[result.task_names[i]] = result.upper_bounds[i];
            }
            std::ofstream out(fs::path(paths.metrics) / "upper_bounds.json");
            out << ub.dump(2) << '\n';
        }
        emit_report(report, paths.metrics);
    };

    try {
        if (resolved.method == Method::Mixed) {
            // One joint stage over all domains; BLEU recorded at the final
            // stage column.
            SequenceContext mixed_ctx{resolved, bench, paths, echo, nullptr, 0};
            std::vector<double> bounds = mixed_upper_bounds(mixed_ctx, pretrained, 1);
            for (int i = 0; i < n_tasks; ++i) {
                result.upper_bounds[static_cast<size_t>(i)] = bounds[static_cast<size_t>(i)];
                result.bleu.set(i, n_tasks - 1, bounds[static_cast<size_t>(i)]);
            }
            finalize(false);
            return result;
        }

        // Stage 0: pruning (fmalloc) or the pretrained model as-is.
        if (is_fmalloc) {
            main_log.line("stage 0: estimating feed-forward memory importance");
            ImportanceScores importance = estimate_importance(
                model, bench.external, resolved.importance_batches, resolved.batch_size,
                resolved.seeds.data, resolved.n_threads);
            save_importance_json(importance, (fs::path(paths.masks) / "importance.json").string());
            BinaryMaskSet general_mask = binarize_importance(importance, resolved.sparsity);
            json meta;
            meta["sparsity"] = resolved.sparsity;
            meta["seed"] = resolved.seeds.data;
            meta["n_batches"] = resolved.importance_batches;
            result.archive.archive(0, bench.general.name, general_mask, meta);
            general_eval_mask = masks_from_binary(general_mask);
            main_log.line(fmt("stage 0: pruned at sparsity %.3f, capacity usage %.6f", resolved.sparsity,
                              capacity_usage({general_mask})));
        }
        model.save_checkpoint(paths.stage_checkpoint(0), bench.vocab_symbols);
        double a00 = eval_task(0, 0, general_eval_mask);
        main_log.line(fmt("stage 0: general BLEU %.4f", a00));

        FisherState fisher;
        for (int stage = 1; stage < n_tasks; ++stage) {
            const auto& task = bench.domains[static_cast<size_t>(stage - 1)];
            Logger stage_log(paths.stage_log(stage), echo);
            stage_log.line(fmt("stage %d: training domain '%s' (method %s)", stage, task.name.c_str(),
                               method_to_string(resolved.method).c_str()));
            if (is_fmalloc) {
                StageOutcome outcome = train_task_fmalloc(ctx, model, result.archive, stage, task);
                stage_log.line(fmt("stage %d: archived mask, val_bleu=%.4f epochs=%d soft_gate_frac=%.4f",
                                   stage, outcome.best_val_bleu, outcome.epochs,
                                   outcome.gate_soft_fraction));
            } else {
                if (resolved.method == Method::Ewc && !fisher.has_anchor) {
                    stage_log.line("computing general-domain Fisher anchor");
                    fisher_update(model, bench.external, fisher, resolved,
                                  hash_combine(resolved.seeds.data, 0xf150ULL));
                }
                FisherState* fs_ptr = resolved.method == Method::Ewc ? &fisher : nullptr;
                StageOutcome outcome = train_task_baseline(ctx, model, stage, task, task.train, fs_ptr);
                stage_log.line(fmt("stage %d: done, val_bleu=%.4f epochs=%d", stage,
                                   outcome.best_val_bleu, outcome.epochs));
                if (resolved.method == Method::Ewc) {
                    stage_log.line(fmt("stage %d: accumulating Fisher on task data", stage));
                    fisher_update(model, task.train, fisher, resolved,
                                  hash_combine(resolved.seeds.data, 0xf151ULL + static_cast<uint64_t>(stage)));
                }
            }
            model.save_checkpoint(paths.stage_checkpoint(stage), bench.vocab_symbols);

            for (int i = 0; i <= stage; ++i) {
                MaskSet masks;
                if (is_fmalloc) {
                    masks = masks_from_binary(result.archive.mask(i));
                } else {
                    masks = ones_masks(model.config());
                }
                double bleu = eval_task(i, stage, masks);
                stage_log.line(fmt("stage %d: task %d (%s) BLEU %.4f", stage, i,
                                   result.task_names[static_cast<size_t>(i)].c_str(), bleu));
            }
            std::string diag;
            auto fr = forgetting_ratio(result.bleu, stage, &diag);
            stage_log.line(fr ? fmt("stage %d: FR=%.6f", stage, *fr)
                              : fmt("stage %d: FR unavailable (%s)", stage, diag.c_str()));
        }

        if (resolved.sr_upper_bound) {
            main_log.line("computing mixed-domain upper bounds for SR");
            SequenceContext mixed_ctx{resolved, bench, paths, echo, nullptr, 0};
            result.upper_bounds = mixed_upper_bounds(mixed_ctx, pretrained, n_tasks);
        }
        finalize(false);
    } catch (const std::exception& e) {
        main_log.line(std::string("run aborted: ") + e.what());
        try {
            finalize(true);
        } catch (...) {
            // Partial artifacts are best-effort; surface the original error.
        }
        throw;
    }
    return result;
}

std::vector<std::vector<std::string>> generate_task_orders(const std::vector<std::string>& names,
                                                           int n_orders, uint64_t seed) {
    std::vector<std::vector<std::string>> orders;
    for (int k = 0; k < n_orders; ++k) {
        std::vector<std::string> order = names;
        Rng rng(hash_combine(seed, 0x6f726400ULL + static_cast<uint64_t>(k)));
        rng.shuffle(order);
        orders.push_back(std::move(order));
    }
    return orders;
}

}  // namespace fmalloc
