#pragma once

#include "fmalloc/common.hpp"
#include "fmalloc/data.hpp"

#include <memory>
#include <string>
#include <vector>

namespace fmalloc {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_heads = 4;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ff = 256;  // N memory cells per FF layer
    double dropout_p = 0.1;
    int max_seq_len = 32;

    int n_ff_layers() const { return n_enc_layers + n_dec_layers; }
    void validate() const;
};

struct Param {
    Mat value;
    bool trainable = true;
    std::string name;
    int index = -1;  // position in the model's parameter registry
};

// One FF layer decomposed into d_ff key-value memory cells. Cell i owns
// keys row i, key_bias[i] and values column i; value_bias is shared and
// belongs to no cell.
struct FeedForwardParams {
    Param keys;        // N x d_model
    Param key_bias;    // N x 1
    Param values;      // d_model x N
    Param value_bias;  // d_model x 1
    int layer_id = 0;
};

struct LinearParams {
    Param weight;  // out x in
    Param bias;    // out x 1
};

struct LayerNormParams {
    Param gamma;  // d x 1
    Param beta;   // d x 1
};

struct AttentionParams {
    LinearParams wq, wk, wv, wo;
};

struct EncoderLayerParams {
    LayerNormParams ln_attn, ln_ff;
    AttentionParams self_attn;
    FeedForwardParams ff;
};

struct DecoderLayerParams {
    LayerNormParams ln_self, ln_cross, ln_ff;
    AttentionParams self_attn, cross_attn;
    FeedForwardParams ff;
};

enum class DropoutMode { Off, All, FFOnly };

// Per-element FF activation dropout noise, overridable for tests.
class FFNoiseProvider {
public:
    virtual ~FFNoiseProvider() = default;
    // Inverted-dropout scale factor: 0 (dropped) or 1/(1-p).
    virtual double scale(int ff_layer, long token, int cell) const = 0;
};

struct DropoutOpts {
    DropoutMode mode = DropoutMode::Off;
    uint64_t seed = 0;
    const FFNoiseProvider* ff_noise_override = nullptr;
};

// The keyed noise used when no override is given.
double default_ff_noise_scale(uint64_t seed, double p, int ff_layer, long token, int cell);

// Per-FF-layer activation masks (soft values allowed), encoder layers first.
using MaskSet = std::vector<Arr>;

// Single-vector masked feed-forward: sum_i m_i * values[:,i] *
// relu(keys[i,:] x + b1_i) + b2.
Vec feed_forward_masked(const FeedForwardParams& ff, const Vec& x, const Arr& mask);

MaskSet ones_masks(const ModelConfig& cfg);
MaskSet masks_from_binary(const std::vector<std::vector<uint8_t>>& binary);
std::vector<std::vector<uint8_t>> binary_from_masks(const MaskSet& masks, double threshold);

// Recorded activations of one forward pass; consumed by backward.
struct ForwardCacheImpl;
class ForwardCache {
public:
    ForwardCache();
    ~ForwardCache();
    ForwardCache(ForwardCache&&) noexcept;
    ForwardCache& operator=(ForwardCache&&) noexcept;
    ForwardCache(const ForwardCache&) = delete;
    ForwardCache& operator=(const ForwardCache&) = delete;

private:
    friend class Seq2SeqModel;
    friend class DecodeSession;
    std::unique_ptr<ForwardCacheImpl> impl_;
};

// Gradient buffers parallel to Seq2SeqModel::params(), plus the gradient of
// the loss with respect to each FF mask entry.
struct Gradients {
    std::vector<Mat> param_grads;
    std::vector<Arr> ff_mask_grads;  // per FF layer, length d_ff
    void add(const Gradients& other);
    void zero();
};

struct BeamHypothesis {
    std::vector<int> tokens;  // without BOS/EOS
    double score = 0.0;       // length-normalized log-probability
    double log_prob = 0.0;
};

class Seq2SeqModel {
public:
    Seq2SeqModel(const ModelConfig& cfg, uint64_t init_seed);

    // The parameter registry points into this object, so copies and moves
    // rebuild it.
    Seq2SeqModel(const Seq2SeqModel& other);
    Seq2SeqModel& operator=(const Seq2SeqModel& other);
    Seq2SeqModel(Seq2SeqModel&& other) noexcept;
    Seq2SeqModel& operator=(Seq2SeqModel&& other) noexcept;

    const ModelConfig& config() const { return cfg_; }

    // Flat parameter registry in a stable construction order.
    const std::vector<Param*>& params() const { return registry_; }
    std::vector<FeedForwardParams*> ff_layers();
    std::vector<const FeedForwardParams*> ff_layers() const;

    Gradients make_gradients() const;

    // Teacher-forced forward over items [begin, end) of the batch. Token ids
    // must be < vocab_size and sequences must fit max_seq_len.
    ForwardCache forward(const PaddedBatch& batch, size_t begin, size_t end,
                         const MaskSet& ff_masks, const DropoutOpts& dropout) const;

    // Per-token log-probabilities (rows sum to one after exp).
    Mat log_probs(const ForwardCache& cache) const;
    // Logit rows for all decoder positions of all items, in batch order.
    const Mat& logits(const ForwardCache& cache) const;

    // Reverse-mode gradients for d(loss)/d(logits); accumulates into `grads`.
    // A cache can be consumed once.
    void backward(const ForwardCache& cache, const Mat& dlogits, Gradients& grads) const;

    // Cross-entropy over the cached targets, divided by normalize_tokens
    // (defaults to the cache's own token count, i.e. the mean). Chunked
    // training passes the whole batch's token count so chunk losses and
    // gradients sum to the batch mean.
    double cross_entropy(const ForwardCache& cache, Mat* dlogits = nullptr,
                         long normalize_tokens = -1) const;
    // Fraction of target positions whose argmax equals the reference.
    double token_accuracy(const ForwardCache& cache) const;
    long target_count(const ForwardCache& cache) const;
    long correct_count(const ForwardCache& cache) const;

    // Length-normalized beam search; beam_size 1 is stepwise argmax.
    BeamHypothesis decode(const std::vector<int>& src, const MaskSet& ff_masks, int beam_size,
                          int max_len = -1) const;

    // Marks everything except FF cell parameters as frozen (value_bias stays
    // frozen too; it is shared across cells).
    void freeze_for_continual_learning();

    void save_checkpoint(const std::string& path, const std::vector<std::string>& vocab_symbols) const;
    static Seq2SeqModel load_checkpoint(const std::string& path, std::vector<std::string>* vocab_symbols = nullptr);

    Param& embedding() { return embedding_; }
    const Mat& positional_encoding() const { return pos_encoding_; }

private:
    template <typename Fn>
    void walk_params(Fn&& fn);  // fixed traversal order over all parameters
    void register_params();     // allocate + name (construction only)
    void rebuild_registry();    // refresh pointers after copy/move
    void init_weights(uint64_t seed);

    Mat embed(const std::vector<int>& ids) const;

    ModelConfig cfg_;
    Param embedding_;  // vocab x d_model, shared by source and target
    std::vector<EncoderLayerParams> enc_layers_;
    std::vector<DecoderLayerParams> dec_layers_;
    LayerNormParams enc_final_ln_, dec_final_ln_;
    LinearParams out_proj_;  // vocab x d_model
    Mat pos_encoding_;       // max_seq_len x d_model, fixed sinusoidal

    std::vector<Param*> registry_;

    friend struct ForwardCache;
    friend class DecodeSession;
};

// Sum of per-position cross-entropies for given targets; helper shared by
// training and tests.
double sequence_log_prob(const Mat& log_probs, const std::vector<int>& targets);

}  // namespace fmalloc
