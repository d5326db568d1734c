#include "fmalloc/model.hpp"

#include "fmalloc/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace fmalloc {

void ModelConfig::validate() const {
    if (vocab_size < 5) throw ConfigError("vocab_size must cover reserved tokens");
    if (d_model < 1 || n_heads < 1) throw ConfigError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (n_enc_layers < 1 || n_dec_layers < 1) throw ConfigError("need at least one layer per stack");
    if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0,1)");
    if (max_seq_len < 2) throw ConfigError("max_seq_len too small");
}

Vec feed_forward_masked(const FeedForwardParams& ff, const Vec& x, const Arr& mask) {
    if (x.size() != ff.keys.value.cols()) {
        throw ConfigError("feed_forward_masked: input dimension mismatch");
    }
    if (mask.size() != ff.keys.value.rows()) {
        throw ConfigError("feed_forward_masked: mask length mismatch");
    }
    Arr h = (ff.keys.value * x + ff.key_bias.value.col(0)).array().max(0.0);
    return ff.values.value * (h * mask).matrix() + ff.value_bias.value.col(0);
}

MaskSet ones_masks(const ModelConfig& cfg) {
    return MaskSet(static_cast<size_t>(cfg.n_ff_layers()), Arr::Ones(cfg.d_ff));
}

MaskSet masks_from_binary(const std::vector<std::vector<uint8_t>>& binary) {
    MaskSet out;
    out.reserve(binary.size());
    for (const auto& layer : binary) {
        Arr m(static_cast<long>(layer.size()));
        for (size_t i = 0; i < layer.size(); ++i) m[static_cast<long>(i)] = layer[i] ? 1.0 : 0.0;
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<std::vector<uint8_t>> binary_from_masks(const MaskSet& masks, double threshold) {
    std::vector<std::vector<uint8_t>> out;
    out.reserve(masks.size());
    for (const auto& m : masks) {
        std::vector<uint8_t> layer(static_cast<size_t>(m.size()));
        for (long i = 0; i < m.size(); ++i) layer[static_cast<size_t>(i)] = m[i] >= threshold ? 1 : 0;
        out.push_back(std::move(layer));
    }
    return out;
}

void Gradients::add(const Gradients& other) {
    for (size_t i = 0; i < param_grads.size(); ++i) param_grads[i] += other.param_grads[i];
    for (size_t i = 0; i < ff_mask_grads.size(); ++i) ff_mask_grads[i] += other.ff_mask_grads[i];
}

void Gradients::zero() {
    for (auto& g : param_grads) g.setZero();
    for (auto& g : ff_mask_grads) g.setZero();
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kNegInf = -1e30;
constexpr long kTokenStride = 4096;  // token key = item_index * stride + position

struct LNCache {
    Mat x_hat;
    Vec inv_std;
};

struct AttnCache {
    Mat input_q;                          // Tq x d, post-LN
    Mat q, k, v;                          // projected
    Mat ctx;                              // Tq x d, pre-Wo
    std::vector<std::vector<Mat>> attn;   // [item][head]: Tq_i x Tk_i
};

struct FFCache {
    Mat input;  // T x d, post-LN
    Mat h_pre;  // T x N
    Mat act;    // T x N, relu then dropout
    Mat noise;  // T x N when dropout active, else empty
};

struct EncLayerCache {
    LNCache ln_attn;
    AttnCache attn;
    Mat attn_out_noise;
    LNCache ln_ff;
    FFCache ff;
    Mat ff_out_noise;
};

struct DecLayerCache {
    LNCache ln_self;
    AttnCache self_attn;
    Mat self_out_noise;
    LNCache ln_cross;
    AttnCache cross_attn;
    Mat cross_out_noise;
    LNCache ln_ff;
    FFCache ff;
    Mat ff_out_noise;
};

// Keyed uniform in [0,1) from (seed, site, token, unit).
inline double noise_uniform(uint64_t seed, uint64_t site, long token, long unit) {
    uint64_t h = hash_combine(hash_combine(hash_combine(seed, site), static_cast<uint64_t>(token)),
                              static_cast<uint64_t>(unit));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct HashFFNoise final : FFNoiseProvider {
    uint64_t seed;
    double p;
    double scale(int ff_layer, long token, int cell) const override {
        return default_ff_noise_scale(seed, p, ff_layer, token, cell);
    }
};

}  // namespace

double default_ff_noise_scale(uint64_t seed, double p, int ff_layer, long token, int cell) {
    double u = noise_uniform(seed, 0xFF00ULL + static_cast<uint64_t>(ff_layer), token, cell);
    return u >= p ? 1.0 / (1.0 - p) : 0.0;
}

ForwardCache::ForwardCache() = default;
ForwardCache::~ForwardCache() = default;
ForwardCache::ForwardCache(ForwardCache&&) noexcept = default;
ForwardCache& ForwardCache::operator=(ForwardCache&&) noexcept = default;

struct ForwardCacheImpl {
    std::vector<const EncodedPair*> items;
    std::vector<int> src_len, dec_len;
    std::vector<long> src_off, dec_off;
    std::vector<long> src_tok_keys, dec_tok_keys;
    long total_src = 0, total_dec = 0;

    std::vector<EncLayerCache> enc;
    LNCache enc_final;
    Mat memory;  // stacked encoder output

    std::vector<DecLayerCache> dec;
    LNCache dec_final;
    Mat dec_final_out;
    Mat logits_mat;

    MaskSet masks;
    DropoutOpts dropout;
    std::vector<int> targets;  // concatenated tgt_out
    mutable bool consumed = false;
};

namespace {

void layer_norm_forward(const Mat& x, const LayerNormParams& ln, Mat& y, LNCache& cache) {
    const long rows = x.rows(), d = x.cols();
    cache.x_hat.resize(rows, d);
    cache.inv_std.resize(rows);
    y.resize(rows, d);
    const auto& gamma = ln.gamma.value;
    const auto& beta = ln.beta.value;
    for (long r = 0; r < rows; ++r) {
        double mean = x.row(r).mean();
        double var = (x.row(r).array() - mean).square().mean();
        double inv_std = 1.0 / std::sqrt(var + kLnEps);
        cache.inv_std[r] = inv_std;
        cache.x_hat.row(r) = (x.row(r).array() - mean) * inv_std;
        y.row(r) = cache.x_hat.row(r).array() * gamma.col(0).transpose().array() +
                   beta.col(0).transpose().array();
    }
}

void layer_norm_backward(const LayerNormParams& ln, const LNCache& cache, const Mat& dy,
                         Mat& dx_accum, Gradients& grads) {
    const long rows = dy.rows(), d = dy.cols();
    const auto gamma = ln.gamma.value.col(0).transpose().array();
    Mat& dgamma = grads.param_grads[static_cast<size_t>(ln.gamma.index)];
    Mat& dbeta = grads.param_grads[static_cast<size_t>(ln.beta.index)];
    for (long r = 0; r < rows; ++r) {
        Eigen::ArrayXXd dyg = dy.row(r).array() * gamma;
        double mean_dyg = dyg.mean();
        double mean_dyg_xhat = (dyg * cache.x_hat.row(r).array()).mean();
        dx_accum.row(r).array() +=
            cache.inv_std[r] * (dyg - mean_dyg - cache.x_hat.row(r).array() * mean_dyg_xhat);
        if (ln.gamma.trainable) {
            dgamma.col(0).array() += (dy.row(r).array() * cache.x_hat.row(r).array()).transpose();
            dbeta.col(0).array() += dy.row(r).array().transpose();
        }
        (void)d;
    }
}

void attention_forward(const AttentionParams& p, int n_heads, const Mat& input_q, const Mat& input_kv,
                       const std::vector<long>& q_off, const std::vector<int>& q_len,
                       const std::vector<long>& kv_off, const std::vector<int>& kv_len, bool causal,
                       AttnCache& cache, Mat& out) {
    const long d = input_q.cols();
    const long dh = d / n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.input_q = input_q;
    cache.q.noalias() = input_q * p.wq.weight.value.transpose();
    cache.q.rowwise() += p.wq.bias.value.col(0).transpose();
    cache.k.noalias() = input_kv * p.wk.weight.value.transpose();
    cache.k.rowwise() += p.wk.bias.value.col(0).transpose();
    cache.v.noalias() = input_kv * p.wv.weight.value.transpose();
    cache.v.rowwise() += p.wv.bias.value.col(0).transpose();

    cache.ctx.resize(input_q.rows(), d);
    cache.attn.assign(q_off.size(), {});

    for (size_t it = 0; it < q_off.size(); ++it) {
        const long qo = q_off[it], ql = q_len[it];
        const long ko = kv_off[it], kl = kv_len[it];
        auto& head_weights = cache.attn[it];
        head_weights.resize(static_cast<size_t>(n_heads));
        for (int h = 0; h < n_heads; ++h) {
            auto q_h = cache.q.block(qo, h * dh, ql, dh);
            auto k_h = cache.k.block(ko, h * dh, kl, dh);
            auto v_h = cache.v.block(ko, h * dh, kl, dh);
            Mat scores = q_h * k_h.transpose() * inv_sqrt_dh;
            if (causal) {
                for (long i = 0; i < ql; ++i) {
                    for (long j = i + 1; j < kl; ++j) scores(i, j) = kNegInf;
                }
            }
            // Row-wise stable softmax.
            Mat& a = head_weights[static_cast<size_t>(h)];
            a.resize(ql, kl);
            for (long i = 0; i < ql; ++i) {
                double mx = scores.row(i).maxCoeff();
                Eigen::ArrayXd e = (scores.row(i).array() - mx).exp();
                a.row(i) = e / e.sum();
            }
            cache.ctx.block(qo, h * dh, ql, dh).noalias() = a * v_h;
        }
    }

    out.noalias() = cache.ctx * p.wo.weight.value.transpose();
    out.rowwise() += p.wo.bias.value.col(0).transpose();
}

void linear_grad(const LinearParams& lin, const Mat& input, const Mat& dout, Gradients& grads) {
    if (!lin.weight.trainable) return;
    grads.param_grads[static_cast<size_t>(lin.weight.index)].noalias() += dout.transpose() * input;
    grads.param_grads[static_cast<size_t>(lin.bias.index)].col(0) += dout.colwise().sum().transpose();
}

void attention_backward(const AttentionParams& p, int n_heads, const AttnCache& cache,
                        const Mat& input_kv, const std::vector<long>& q_off,
                        const std::vector<int>& q_len, const std::vector<long>& kv_off,
                        const std::vector<int>& kv_len, const Mat& dout, Mat& dinput_q_accum,
                        Mat* dinput_kv_accum, Gradients& grads) {
    const long d = cache.input_q.cols();
    const long dh = d / n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    linear_grad(p.wo, cache.ctx, dout, grads);
    Mat dctx = dout * p.wo.weight.value;

    Mat dq = Mat::Zero(cache.q.rows(), d);
    Mat dk = Mat::Zero(cache.k.rows(), d);
    Mat dv = Mat::Zero(cache.v.rows(), d);

    for (size_t it = 0; it < q_off.size(); ++it) {
        const long qo = q_off[it], ql = q_len[it];
        const long ko = kv_off[it], kl = kv_len[it];
        for (int h = 0; h < n_heads; ++h) {
            const Mat& a = cache.attn[it][static_cast<size_t>(h)];
            auto dctx_h = dctx.block(qo, h * dh, ql, dh);
            auto v_h = cache.v.block(ko, h * dh, kl, dh);
            Mat da = dctx_h * v_h.transpose();
            dv.block(ko, h * dh, kl, dh).noalias() += a.transpose() * dctx_h;
            // Softmax backward per row.
            Mat ds(ql, kl);
            for (long i = 0; i < ql; ++i) {
                double dot = (da.row(i).array() * a.row(i).array()).sum();
                ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
            }
            ds *= inv_sqrt_dh;
            auto q_h = cache.q.block(qo, h * dh, ql, dh);
            auto k_h = cache.k.block(ko, h * dh, kl, dh);
            dq.block(qo, h * dh, ql, dh).noalias() += ds * k_h;
            dk.block(ko, h * dh, kl, dh).noalias() += ds.transpose() * q_h;
        }
    }

    linear_grad(p.wq, cache.input_q, dq, grads);
    linear_grad(p.wk, input_kv, dk, grads);
    linear_grad(p.wv, input_kv, dv, grads);

    dinput_q_accum.noalias() += dq * p.wq.weight.value;
    if (dinput_kv_accum) {
        dinput_kv_accum->noalias() += dk * p.wk.weight.value;
        dinput_kv_accum->noalias() += dv * p.wv.weight.value;
    } else {
        dinput_q_accum.noalias() += dk * p.wk.weight.value;
        dinput_q_accum.noalias() += dv * p.wv.weight.value;
    }
}

void ff_forward(const FeedForwardParams& p, const Arr& mask, const Mat& input, double dropout_p,
                bool dropout_active, uint64_t seed, const FFNoiseProvider* noise_override,
                const std::vector<long>& tok_keys, FFCache& cache, Mat& out) {
    cache.input = input;
    cache.h_pre.noalias() = input * p.keys.value.transpose();
    cache.h_pre.rowwise() += p.key_bias.value.col(0).transpose();
    cache.act = cache.h_pre.cwiseMax(0.0);

    if (dropout_active && dropout_p > 0.0) {
        const long rows = cache.act.rows(), n = cache.act.cols();
        cache.noise.resize(rows, n);
        HashFFNoise default_noise;
        default_noise.seed = seed;
        default_noise.p = dropout_p;
        const FFNoiseProvider* provider = noise_override ? noise_override : &default_noise;
        for (long r = 0; r < rows; ++r) {
            for (long c = 0; c < n; ++c) {
                cache.noise(r, c) = provider->scale(p.layer_id, tok_keys[static_cast<size_t>(r)],
                                                    static_cast<int>(c));
            }
        }
        cache.act.array() *= cache.noise.array();
    } else {
        cache.noise.resize(0, 0);
    }

    // Masked contribution: out = (act . m) values^T + b2.
    Mat masked = cache.act * mask.matrix().asDiagonal();
    out.noalias() = masked * p.values.value.transpose();
    out.rowwise() += p.value_bias.value.col(0).transpose();
}

void ff_backward(const FeedForwardParams& p, const Arr& mask, const FFCache& cache, const Mat& dout,
                 Mat& dinput_accum, Gradients& grads, int ff_layer) {
    Mat dmasked = dout * p.values.value;  // T x N

    // d(loss)/d(mask_i) = sum_t dmasked(t,i) * act(t,i)
    Mat mask_grad_row = (dmasked.array() * cache.act.array()).colwise().sum();
    grads.ff_mask_grads[static_cast<size_t>(ff_layer)] += mask_grad_row.row(0).transpose().array();

    Mat dact = dmasked * mask.matrix().asDiagonal();
    if (cache.noise.size() > 0) dact.array() *= cache.noise.array();
    Mat dh = (cache.h_pre.array() > 0.0).select(dact, 0.0);

    if (p.values.trainable) {
        Mat masked = cache.act * mask.matrix().asDiagonal();
        grads.param_grads[static_cast<size_t>(p.values.index)].noalias() += dout.transpose() * masked;
        grads.param_grads[static_cast<size_t>(p.keys.index)].noalias() += dh.transpose() * cache.input;
        grads.param_grads[static_cast<size_t>(p.key_bias.index)].col(0) +=
            dh.colwise().sum().transpose();
    }
    if (p.value_bias.trainable) {
        grads.param_grads[static_cast<size_t>(p.value_bias.index)].col(0) +=
            dout.colwise().sum().transpose();
    }
    dinput_accum.noalias() += dh * p.keys.value;
}

Mat sublayer_noise(uint64_t seed, uint64_t site, const std::vector<long>& tok_keys, long d, double p) {
    Mat noise(static_cast<long>(tok_keys.size()), d);
    for (long r = 0; r < noise.rows(); ++r) {
        for (long c = 0; c < d; ++c) {
            double u = noise_uniform(seed, site, tok_keys[static_cast<size_t>(r)], c);
            noise(r, c) = u >= p ? 1.0 / (1.0 - p) : 0.0;
        }
    }
    return noise;
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    enc_layers_.resize(static_cast<size_t>(cfg_.n_enc_layers));
    dec_layers_.resize(static_cast<size_t>(cfg_.n_dec_layers));
    register_params();
    init_weights(init_seed);

    // Fixed sinusoidal positional encoding.
    pos_encoding_.resize(cfg_.max_seq_len, cfg_.d_model);
    for (int pos = 0; pos < cfg_.max_seq_len; ++pos) {
        for (int i = 0; i < cfg_.d_model; ++i) {
            double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / cfg_.d_model);
            pos_encoding_(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

// Single source of truth for parameter order; fn(param, rows, cols, name,
// ff_layer_id_or_-1) is invoked for every parameter.
template <typename Fn>
void Seq2SeqModel::walk_params(Fn&& fn) {
    auto walk_linear = [&](LinearParams& lin, int out, int in, const std::string& name) {
        fn(lin.weight, out, in, name + ".weight", -1);
        fn(lin.bias, out, 1, name + ".bias", -1);
    };
    auto walk_ln = [&](LayerNormParams& ln, const std::string& name) {
        fn(ln.gamma, cfg_.d_model, 1, name + ".gamma", -1);
        fn(ln.beta, cfg_.d_model, 1, name + ".beta", -1);
    };
    auto walk_attn = [&](AttentionParams& a, const std::string& name) {
        walk_linear(a.wq, cfg_.d_model, cfg_.d_model, name + ".wq");
        walk_linear(a.wk, cfg_.d_model, cfg_.d_model, name + ".wk");
        walk_linear(a.wv, cfg_.d_model, cfg_.d_model, name + ".wv");
        walk_linear(a.wo, cfg_.d_model, cfg_.d_model, name + ".wo");
    };
    auto walk_ff = [&](FeedForwardParams& ff, int layer_id, const std::string& name) {
        fn(ff.keys, cfg_.d_ff, cfg_.d_model, name + ".keys", layer_id);
        fn(ff.key_bias, cfg_.d_ff, 1, name + ".key_bias", layer_id);
        fn(ff.values, cfg_.d_model, cfg_.d_ff, name + ".values", layer_id);
        fn(ff.value_bias, cfg_.d_model, 1, name + ".value_bias", layer_id);
    };

    fn(embedding_, cfg_.vocab_size, cfg_.d_model, "embedding", -1);
    int ff_id = 0;
    for (int l = 0; l < cfg_.n_enc_layers; ++l) {
        auto& layer = enc_layers_[static_cast<size_t>(l)];
        std::string base = "enc." + std::to_string(l);
        walk_ln(layer.ln_attn, base + ".ln_attn");
        walk_attn(layer.self_attn, base + ".self_attn");
        walk_ln(layer.ln_ff, base + ".ln_ff");
        walk_ff(layer.ff, ff_id++, base + ".ff");
    }
    walk_ln(enc_final_ln_, "enc.final_ln");
    for (int l = 0; l < cfg_.n_dec_layers; ++l) {
        auto& layer = dec_layers_[static_cast<size_t>(l)];
        std::string base = "dec." + std::to_string(l);
        walk_ln(layer.ln_self, base + ".ln_self");
        walk_attn(layer.self_attn, base + ".self_attn");
        walk_ln(layer.ln_cross, base + ".ln_cross");
        walk_attn(layer.cross_attn, base + ".cross_attn");
        walk_ln(layer.ln_ff, base + ".ln_ff");
        walk_ff(layer.ff, ff_id++, base + ".ff");
    }
    walk_ln(dec_final_ln_, "dec.final_ln");
    walk_linear(out_proj_, cfg_.vocab_size, cfg_.d_model, "out_proj");
}

void Seq2SeqModel::register_params() {
    registry_.clear();
    walk_params([&](Param& p, int rows, int cols, const std::string& name, int ff_id) {
        p.value = Mat::Zero(rows, cols);
        p.name = name;
        p.index = static_cast<int>(registry_.size());
        registry_.push_back(&p);
        (void)ff_id;
    });
    // FF layer ids follow registration order, encoder stack first.
    int ff_id = 0;
    for (auto& l : enc_layers_) l.ff.layer_id = ff_id++;
    for (auto& l : dec_layers_) l.ff.layer_id = ff_id++;
}

void Seq2SeqModel::rebuild_registry() {
    registry_.clear();
    walk_params([&](Param& p, int, int, const std::string&, int) {
        p.index = static_cast<int>(registry_.size());
        registry_.push_back(&p);
    });
}

Seq2SeqModel::Seq2SeqModel(const Seq2SeqModel& other)
    : cfg_(other.cfg_),
      embedding_(other.embedding_),
      enc_layers_(other.enc_layers_),
      dec_layers_(other.dec_layers_),
      enc_final_ln_(other.enc_final_ln_),
      dec_final_ln_(other.dec_final_ln_),
      out_proj_(other.out_proj_),
      pos_encoding_(other.pos_encoding_) {
    rebuild_registry();
}

Seq2SeqModel& Seq2SeqModel::operator=(const Seq2SeqModel& other) {
    if (this == &other) return *this;
    cfg_ = other.cfg_;
    embedding_ = other.embedding_;
    enc_layers_ = other.enc_layers_;
    dec_layers_ = other.dec_layers_;
    enc_final_ln_ = other.enc_final_ln_;
    dec_final_ln_ = other.dec_final_ln_;
    out_proj_ = other.out_proj_;
    pos_encoding_ = other.pos_encoding_;
    rebuild_registry();
    return *this;
}

Seq2SeqModel::Seq2SeqModel(Seq2SeqModel&& other) noexcept
    : cfg_(std::move(other.cfg_)),
      embedding_(std::move(other.embedding_)),
      enc_layers_(std::move(other.enc_layers_)),
      dec_layers_(std::move(other.dec_layers_)),
      enc_final_ln_(std::move(other.enc_final_ln_)),
      dec_final_ln_(std::move(other.dec_final_ln_)),
      out_proj_(std::move(other.out_proj_)),
      pos_encoding_(std::move(other.pos_encoding_)) {
    rebuild_registry();
}

Seq2SeqModel& Seq2SeqModel::operator=(Seq2SeqModel&& other) noexcept {
    if (this == &other) return *this;
    cfg_ = std::move(other.cfg_);
    embedding_ = std::move(other.embedding_);
    enc_layers_ = std::move(other.enc_layers_);
    dec_layers_ = std::move(other.dec_layers_);
    enc_final_ln_ = std::move(other.enc_final_ln_);
    dec_final_ln_ = std::move(other.dec_final_ln_);
    out_proj_ = std::move(other.out_proj_);
    pos_encoding_ = std::move(other.pos_encoding_);
    rebuild_registry();
    return *this;
}

void Seq2SeqModel::init_weights(uint64_t seed) {
    Rng rng(hash_combine(seed, 0x696e6974ULL));
    auto xavier = [&](Mat& m) {
        double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
        for (long c = 0; c < m.cols(); ++c) {
            for (long r = 0; r < m.rows(); ++r) m(r, c) = rng.next_uniform(-bound, bound);
        }
    };
    for (Param* p : registry_) {
        if (p->name == "embedding") {
            double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
            for (long c = 0; c < p->value.cols(); ++c) {
                for (long r = 0; r < p->value.rows(); ++r) p->value(r, c) = rng.next_normal() * scale;
            }
        } else if (p->name.find(".gamma") != std::string::npos) {
            p->value.setOnes();
        } else if (p->name.find(".beta") != std::string::npos ||
                   p->name.find("bias") != std::string::npos) {
            p->value.setZero();
        } else {
            xavier(p->value);
        }
    }
}

std::vector<FeedForwardParams*> Seq2SeqModel::ff_layers() {
    std::vector<FeedForwardParams*> out;
    for (auto& l : enc_layers_) out.push_back(&l.ff);
    for (auto& l : dec_layers_) out.push_back(&l.ff);
    return out;
}

std::vector<const FeedForwardParams*> Seq2SeqModel::ff_layers() const {
    std::vector<const FeedForwardParams*> out;
    for (const auto& l : enc_layers_) out.push_back(&l.ff);
    for (const auto& l : dec_layers_) out.push_back(&l.ff);
    return out;
}

Gradients Seq2SeqModel::make_gradients() const {
    Gradients g;
    g.param_grads.reserve(registry_.size());
    for (const Param* p : registry_) g.param_grads.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    g.ff_mask_grads.assign(static_cast<size_t>(cfg_.n_ff_layers()), Arr::Zero(cfg_.d_ff));
    return g;
}

Mat Seq2SeqModel::embed(const std::vector<int>& ids) const {
    Mat x(static_cast<long>(ids.size()), cfg_.d_model);
    const double scale = std::sqrt(static_cast<double>(cfg_.d_model));
    for (size_t t = 0; t < ids.size(); ++t) {
        int id = ids[t];
        if (id < 0 || id >= cfg_.vocab_size) throw InputError("token id out of vocabulary range");
        x.row(static_cast<long>(t)) = embedding_.value.row(id) * scale +
                                      pos_encoding_.row(static_cast<long>(t));
    }
    return x;
}

ForwardCache Seq2SeqModel::forward(const PaddedBatch& batch, size_t begin, size_t end,
                                   const MaskSet& ff_masks, const DropoutOpts& dropout) const {
    if (begin >= end || end > batch.size()) throw InputError("forward: empty or invalid item range");
    if (static_cast<int>(ff_masks.size()) != cfg_.n_ff_layers()) {
        throw ConfigError("forward: expected one mask per FF layer");
    }
    for (const auto& m : ff_masks) {
        if (m.size() != cfg_.d_ff) throw ConfigError("forward: mask length mismatch");
    }

    ForwardCache cache;
    cache.impl_ = std::make_unique<ForwardCacheImpl>();
    ForwardCacheImpl& c = *cache.impl_;
    c.masks = ff_masks;
    c.dropout = dropout;

    for (size_t i = begin; i < end; ++i) {
        const EncodedPair& item = batch.items[i];
        if (static_cast<int>(item.src.size()) > cfg_.max_seq_len ||
            static_cast<int>(item.tgt_in.size()) > cfg_.max_seq_len) {
            throw InputError("sequence longer than max_seq_len");
        }
        if (item.src.empty() || item.tgt_in.empty()) throw InputError("empty sequence in batch");
        c.items.push_back(&item);
        c.src_off.push_back(c.total_src);
        c.dec_off.push_back(c.total_dec);
        c.src_len.push_back(static_cast<int>(item.src.size()));
        c.dec_len.push_back(static_cast<int>(item.tgt_in.size()));
        for (size_t t = 0; t < item.src.size(); ++t) {
            c.src_tok_keys.push_back(static_cast<long>(i) * kTokenStride + static_cast<long>(t));
        }
        for (size_t t = 0; t < item.tgt_in.size(); ++t) {
            c.dec_tok_keys.push_back(static_cast<long>(i) * kTokenStride + static_cast<long>(t));
        }
        c.total_src += static_cast<long>(item.src.size());
        c.total_dec += static_cast<long>(item.tgt_in.size());
        c.targets.insert(c.targets.end(), item.tgt_out.begin(), item.tgt_out.end());
    }

    const bool drop_all = dropout.mode == DropoutMode::All && cfg_.dropout_p > 0.0;
    const bool drop_ff = dropout.mode != DropoutMode::Off;

    // ---- Encoder ----
    Mat x(c.total_src, cfg_.d_model);
    for (size_t it = 0; it < c.items.size(); ++it) {
        x.middleRows(c.src_off[it], c.src_len[it]) = embed(c.items[it]->src);
    }
    c.enc.resize(enc_layers_.size());
    for (size_t l = 0; l < enc_layers_.size(); ++l) {
        const auto& layer = enc_layers_[l];
        auto& lc = c.enc[l];
        Mat normed, sub_out;
        layer_norm_forward(x, layer.ln_attn, normed, lc.ln_attn);
        attention_forward(layer.self_attn, cfg_.n_heads, normed, normed, c.src_off, c.src_len,
                          c.src_off, c.src_len, false, lc.attn, sub_out);
        if (drop_all) {
            lc.attn_out_noise = sublayer_noise(dropout.seed, 1000 + l, c.src_tok_keys, cfg_.d_model,
                                               cfg_.dropout_p);
            sub_out.array() *= lc.attn_out_noise.array();
        }
        x += sub_out;

        layer_norm_forward(x, layer.ln_ff, normed, lc.ln_ff);
        ff_forward(layer.ff, c.masks[static_cast<size_t>(layer.ff.layer_id)], normed, cfg_.dropout_p,
                   drop_ff, dropout.seed, dropout.ff_noise_override, c.src_tok_keys, lc.ff, sub_out);
        if (drop_all) {
            lc.ff_out_noise = sublayer_noise(dropout.seed, 2000 + l, c.src_tok_keys, cfg_.d_model,
                                             cfg_.dropout_p);
            sub_out.array() *= lc.ff_out_noise.array();
        }
        x += sub_out;
    }
    layer_norm_forward(x, enc_final_ln_, c.memory, c.enc_final);

    // ---- Decoder ----
    Mat y(c.total_dec, cfg_.d_model);
    for (size_t it = 0; it < c.items.size(); ++it) {
        y.middleRows(c.dec_off[it], c.dec_len[it]) = embed(c.items[it]->tgt_in);
    }
    c.dec.resize(dec_layers_.size());
    for (size_t l = 0; l < dec_layers_.size(); ++l) {
        const auto& layer = dec_layers_[l];
        auto& lc = c.dec[l];
        Mat normed, sub_out;
        layer_norm_forward(y, layer.ln_self, normed, lc.ln_self);
        attention_forward(layer.self_attn, cfg_.n_heads, normed, normed, c.dec_off, c.dec_len,
                          c.dec_off, c.dec_len, true, lc.self_attn, sub_out);
        if (drop_all) {
            lc.self_out_noise = sublayer_noise(dropout.seed, 3000 + l, c.dec_tok_keys, cfg_.d_model,
                                               cfg_.dropout_p);
            sub_out.array() *= lc.self_out_noise.array();
        }
        y += sub_out;

        layer_norm_forward(y, layer.ln_cross, normed, lc.ln_cross);
        attention_forward(layer.cross_attn, cfg_.n_heads, normed, c.memory, c.dec_off, c.dec_len,
                          c.src_off, c.src_len, false, lc.cross_attn, sub_out);
        if (drop_all) {
            lc.cross_out_noise = sublayer_noise(dropout.seed, 4000 + l, c.dec_tok_keys, cfg_.d_model,
                                                cfg_.dropout_p);
            sub_out.array() *= lc.cross_out_noise.array();
        }
        y += sub_out;

        layer_norm_forward(y, layer.ln_ff, normed, lc.ln_ff);
        ff_forward(layer.ff, c.masks[static_cast<size_t>(layer.ff.layer_id)], normed, cfg_.dropout_p,
                   drop_ff, dropout.seed, dropout.ff_noise_override, c.dec_tok_keys, lc.ff, sub_out);
        if (drop_all) {
            lc.ff_out_noise = sublayer_noise(dropout.seed, 5000 + l, c.dec_tok_keys, cfg_.d_model,
                                             cfg_.dropout_p);
            sub_out.array() *= lc.ff_out_noise.array();
        }
        y += sub_out;
    }
    layer_norm_forward(y, dec_final_ln_, c.dec_final_out, c.dec_final);
    c.logits_mat.noalias() = c.dec_final_out * out_proj_.weight.value.transpose();
    c.logits_mat.rowwise() += out_proj_.bias.value.col(0).transpose();
    return cache;
}

const Mat& Seq2SeqModel::logits(const ForwardCache& cache) const { return cache.impl_->logits_mat; }

Mat Seq2SeqModel::log_probs(const ForwardCache& cache) const {
    const Mat& z = cache.impl_->logits_mat;
    Mat lp(z.rows(), z.cols());
    for (long r = 0; r < z.rows(); ++r) {
        double mx = z.row(r).maxCoeff();
        double lse = std::log((z.row(r).array() - mx).exp().sum()) + mx;
        lp.row(r) = z.row(r).array() - lse;
    }
    return lp;
}

double Seq2SeqModel::cross_entropy(const ForwardCache& cache, Mat* dlogits,
                                   long normalize_tokens) const {
    const Mat& z = cache.impl_->logits_mat;
    const long n = z.rows();
    const double denom = static_cast<double>(normalize_tokens > 0 ? normalize_tokens : n);
    if (dlogits) dlogits->resize(n, z.cols());
    double loss = 0.0;
    for (long r = 0; r < n; ++r) {
        double mx = z.row(r).maxCoeff();
        Eigen::ArrayXd e = (z.row(r).array() - mx).exp();
        double sum = e.sum();
        int target = cache.impl_->targets[static_cast<size_t>(r)];
        loss -= z(r, target) - mx - std::log(sum);
        if (dlogits) {
            dlogits->row(r) = e / sum / denom;
            (*dlogits)(r, target) -= 1.0 / denom;
        }
    }
    return loss / denom;
}

long Seq2SeqModel::target_count(const ForwardCache& cache) const {
    return static_cast<long>(cache.impl_->targets.size());
}

long Seq2SeqModel::correct_count(const ForwardCache& cache) const {
    const Mat& z = cache.impl_->logits_mat;
    long correct = 0;
    for (long r = 0; r < z.rows(); ++r) {
        long argmax = 0;
        z.row(r).maxCoeff(&argmax);
        if (argmax == cache.impl_->targets[static_cast<size_t>(r)]) ++correct;
    }
    return correct;
}

double Seq2SeqModel::token_accuracy(const ForwardCache& cache) const {
    long n = target_count(cache);
    return n == 0 ? 0.0 : static_cast<double>(correct_count(cache)) / static_cast<double>(n);
}

void Seq2SeqModel::backward(const ForwardCache& cache, const Mat& dlogits, Gradients& grads) const {
    if (!cache.impl_) throw UsageError("backward called before forward");
    const ForwardCacheImpl& c = *cache.impl_;
    if (c.consumed) throw UsageError("backward: cache already consumed");
    if (c.logits_mat.rows() == 0) throw UsageError("backward called before forward");
    if (dlogits.rows() != c.logits_mat.rows() || dlogits.cols() != c.logits_mat.cols()) {
        throw InputError("backward: dlogits shape mismatch");
    }
    c.consumed = true;

    const bool drop_all = c.dropout.mode == DropoutMode::All && cfg_.dropout_p > 0.0;

    // Output projection.
    if (out_proj_.weight.trainable) {
        grads.param_grads[static_cast<size_t>(out_proj_.weight.index)].noalias() +=
            dlogits.transpose() * c.dec_final_out;
        grads.param_grads[static_cast<size_t>(out_proj_.bias.index)].col(0) +=
            dlogits.colwise().sum().transpose();
    }
    Mat dy_final = dlogits * out_proj_.weight.value;

    Mat dy = Mat::Zero(c.total_dec, cfg_.d_model);
    layer_norm_backward(dec_final_ln_, c.dec_final, dy_final, dy, grads);

    Mat dmemory = Mat::Zero(c.total_src, cfg_.d_model);

    for (long l = static_cast<long>(dec_layers_.size()) - 1; l >= 0; --l) {
        const auto& layer = dec_layers_[static_cast<size_t>(l)];
        const auto& lc = c.dec[static_cast<size_t>(l)];

        Mat dsub = dy;
        if (drop_all) dsub.array() *= lc.ff_out_noise.array();
        Mat dnormed = Mat::Zero(c.total_dec, cfg_.d_model);
        ff_backward(layer.ff, c.masks[static_cast<size_t>(layer.ff.layer_id)], lc.ff, dsub, dnormed,
                    grads, layer.ff.layer_id);
        layer_norm_backward(layer.ln_ff, lc.ln_ff, dnormed, dy, grads);

        dsub = dy;
        if (drop_all) dsub.array() *= lc.cross_out_noise.array();
        dnormed.setZero();
        attention_backward(layer.cross_attn, cfg_.n_heads, lc.cross_attn, c.memory, c.dec_off,
                           c.dec_len, c.src_off, c.src_len, dsub, dnormed, &dmemory, grads);
        layer_norm_backward(layer.ln_cross, lc.ln_cross, dnormed, dy, grads);

        dsub = dy;
        if (drop_all) dsub.array() *= lc.self_out_noise.array();
        dnormed.setZero();
        attention_backward(layer.self_attn, cfg_.n_heads, lc.self_attn, lc.self_attn.input_q,
                           c.dec_off, c.dec_len, c.dec_off, c.dec_len, dsub, dnormed, nullptr, grads);
        layer_norm_backward(layer.ln_self, lc.ln_self, dnormed, dy, grads);
    }

    // Decoder token embeddings.
    if (embedding_.trainable) {
        const double scale = std::sqrt(static_cast<double>(cfg_.d_model));
        Mat& demb = grads.param_grads[static_cast<size_t>(embedding_.index)];
        for (size_t it = 0; it < c.items.size(); ++it) {
            const auto& ids = c.items[it]->tgt_in;
            for (size_t t = 0; t < ids.size(); ++t) {
                demb.row(ids[t]) += dy.row(c.dec_off[it] + static_cast<long>(t)) * scale;
            }
        }
    }

    // Encoder, seeded by the cross-attention memory gradient.
    Mat dx = Mat::Zero(c.total_src, cfg_.d_model);
    layer_norm_backward(enc_final_ln_, c.enc_final, dmemory, dx, grads);

    for (long l = static_cast<long>(enc_layers_.size()) - 1; l >= 0; --l) {
        const auto& layer = enc_layers_[static_cast<size_t>(l)];
        const auto& lc = c.enc[static_cast<size_t>(l)];

        Mat dsub = dx;
        if (drop_all) dsub.array() *= lc.ff_out_noise.array();
        Mat dnormed = Mat::Zero(c.total_src, cfg_.d_model);
        ff_backward(layer.ff, c.masks[static_cast<size_t>(layer.ff.layer_id)], lc.ff, dsub, dnormed,
                    grads, layer.ff.layer_id);
        layer_norm_backward(layer.ln_ff, lc.ln_ff, dnormed, dx, grads);

        dsub = dx;
        if (drop_all) dsub.array() *= lc.attn_out_noise.array();
        dnormed.setZero();
        attention_backward(layer.self_attn, cfg_.n_heads, lc.attn, lc.attn.input_q, c.src_off,
                           c.src_len, c.src_off, c.src_len, dsub, dnormed, nullptr, grads);
        layer_norm_backward(layer.ln_attn, lc.ln_attn, dnormed, dx, grads);
    }

    if (embedding_.trainable) {
        const double scale = std::sqrt(static_cast<double>(cfg_.d_model));
        Mat& demb = grads.param_grads[static_cast<size_t>(embedding_.index)];
        for (size_t it = 0; it < c.items.size(); ++it) {
            const auto& ids = c.items[it]->src;
            for (size_t t = 0; t < ids.size(); ++t) {
                demb.row(ids[t]) += dx.row(c.src_off[it] + static_cast<long>(t)) * scale;
            }
        }
    }
}

void Seq2SeqModel::freeze_for_continual_learning() {
    for (Param* p : registry_) {
        bool is_cell_param = p->name.find(".ff.keys") != std::string::npos ||
                             p->name.find(".ff.key_bias") != std::string::npos ||
                             p->name.find(".ff.values") != std::string::npos;
        p->trainable = is_cell_param;
    }
}

// ---- Incremental decode with per-layer KV caches ----

namespace {

struct DecodeLayerState {
    Mat self_k, self_v;  // grows one row per emitted token
};

struct DecodeState {
    std::vector<DecodeLayerState> layers;
};

Eigen::RowVectorXd ln_row(const Eigen::RowVectorXd& x, const LayerNormParams& ln) {
    double mean = x.mean();
    double var = (x.array() - mean).square().mean();
    double inv_std = 1.0 / std::sqrt(var + kLnEps);
    return (((x.array() - mean) * inv_std) * ln.gamma.value.col(0).transpose().array() +
            ln.beta.value.col(0).transpose().array())
        .matrix();
}

Eigen::RowVectorXd linear_row(const Eigen::RowVectorXd& x, const LinearParams& lin) {
    return x * lin.weight.value.transpose() + lin.bias.value.col(0).transpose();
}

}  // namespace

class DecodeSession {
public:
    DecodeSession(const Seq2SeqModel& model, const std::vector<int>& src, const MaskSet& masks)
        : model_(model), masks_(masks) {
        const auto& cfg = model.config();
        PaddedBatch batch;
        EncodedPair pair;
        pair.src = src;
        pair.tgt_in = {kBosId};
        pair.tgt_out = {kEosId};
        batch.items.push_back(pair);
        // Teacher forcing is irrelevant here; we only need the encoder output.
        ForwardCache cache = model.forward(batch, 0, 1, masks, DropoutOpts{});
        memory_ = cache.impl_->memory;

        cross_k_.reserve(model.dec_layers_.size());
        cross_v_.reserve(model.dec_layers_.size());
        for (const auto& layer : model.dec_layers_) {
            Mat k = memory_ * layer.cross_attn.wk.weight.value.transpose();
            k.rowwise() += layer.cross_attn.wk.bias.value.col(0).transpose();
            Mat v = memory_ * layer.cross_attn.wv.weight.value.transpose();
            v.rowwise() += layer.cross_attn.wv.bias.value.col(0).transpose();
            cross_k_.push_back(std::move(k));
            cross_v_.push_back(std::move(v));
        }
        (void)cfg;
    }

    DecodeState initial_state() const {
        DecodeState s;
        s.layers.resize(model_.dec_layers_.size());
        return s;
    }

    // Feeds one token at `position` and returns the next-token log-probs.
    Eigen::RowVectorXd step(DecodeState& state, int token, int position) const {
        const auto& cfg = model_.config();
        if (position >= cfg.max_seq_len) throw InputError("decode position exceeds max_seq_len");
        const double scale = std::sqrt(static_cast<double>(cfg.d_model));
        const long dh = cfg.d_model / cfg.n_heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        Eigen::RowVectorXd x = model_.embedding_.value.row(token) * scale +
                               model_.pos_encoding_.row(position);

        for (size_t l = 0; l < model_.dec_layers_.size(); ++l) {
            const auto& layer = model_.dec_layers_[l];
            auto& ls = state.layers[l];

            Eigen::RowVectorXd a = ln_row(x, layer.ln_self);
            Eigen::RowVectorXd q = linear_row(a, layer.self_attn.wq);
            Eigen::RowVectorXd k_new = linear_row(a, layer.self_attn.wk);
            Eigen::RowVectorXd v_new = linear_row(a, layer.self_attn.wv);
            ls.self_k.conservativeResize(ls.self_k.rows() + 1, cfg.d_model);
            ls.self_k.row(ls.self_k.rows() - 1) = k_new;
            ls.self_v.conservativeResize(ls.self_v.rows() + 1, cfg.d_model);
            ls.self_v.row(ls.self_v.rows() - 1) = v_new;

            Eigen::RowVectorXd ctx(cfg.d_model);
            for (int h = 0; h < cfg.n_heads; ++h) {
                auto q_h = q.segment(h * dh, dh);
                auto k_h = ls.self_k.middleCols(h * dh, dh);
                auto v_h = ls.self_v.middleCols(h * dh, dh);
                Eigen::VectorXd scores = k_h * q_h.transpose() * inv_sqrt_dh;
                double mx = scores.maxCoeff();
                Eigen::ArrayXd e = (scores.array() - mx).exp();
                Eigen::VectorXd w = e / e.sum();
                ctx.segment(h * dh, dh) = (v_h.transpose() * w).transpose();
            }
            x += linear_row(ctx, layer.self_attn.wo);

            a = ln_row(x, layer.ln_cross);
            q = linear_row(a, layer.cross_attn.wq);
            for (int h = 0; h < cfg.n_heads; ++h) {
                auto q_h = q.segment(h * dh, dh);
                auto k_h = cross_k_[l].middleCols(h * dh, dh);
                auto v_h = cross_v_[l].middleCols(h * dh, dh);
                Eigen::VectorXd scores = k_h * q_h.transpose() * inv_sqrt_dh;
                double mx = scores.maxCoeff();
                Eigen::ArrayXd e = (scores.array() - mx).exp();
                Eigen::VectorXd w = e / e.sum();
                ctx.segment(h * dh, dh) = (v_h.transpose() * w).transpose();
            }
            x += linear_row(ctx, layer.cross_attn.wo);

            a = ln_row(x, layer.ln_ff);
            const Arr& mask = masks_[static_cast<size_t>(layer.ff.layer_id)];
            Eigen::VectorXd h_pre = layer.ff.keys.value * a.transpose() + layer.ff.key_bias.value.col(0);
            Eigen::ArrayXd act = h_pre.array().max(0.0) * mask;
            x += (layer.ff.values.value * act.matrix() + layer.ff.value_bias.value.col(0)).transpose();
        }

        Eigen::RowVectorXd y = ln_row(x, model_.dec_final_ln_);
        Eigen::RowVectorXd z = y * model_.out_proj_.weight.value.transpose() +
                               model_.out_proj_.bias.value.col(0).transpose();
        double mx = z.maxCoeff();
        double lse = std::log((z.array() - mx).exp().sum()) + mx;
        return z.array() - lse;
    }

private:
    const Seq2SeqModel& model_;
    MaskSet masks_;
    Mat memory_;
    std::vector<Mat> cross_k_, cross_v_;
};

BeamHypothesis Seq2SeqModel::decode(const std::vector<int>& src, const MaskSet& ff_masks,
                                    int beam_size, int max_len) const {
    if (beam_size < 1) throw InputError("decode: beam_size must be >= 1");
    if (src.empty()) throw InputError("decode: empty source");
    if (max_len < 0) {
        max_len = std::min(cfg_.max_seq_len - 1, static_cast<int>(src.size()) + 8);
    }

    DecodeSession session(*this, src, ff_masks);

    struct Live {
        std::vector<int> tokens;
        double log_prob = 0.0;
        DecodeState state;
    };

    std::vector<Live> live;
    {
        Live init;
        init.state = session.initial_state();
        live.push_back(std::move(init));
    }
    std::vector<BeamHypothesis> done;

    for (int step = 0; step < max_len && !live.empty(); ++step) {
        struct Candidate {
            double log_prob;
            size_t parent;
            int token;
        };
        std::vector<Candidate> candidates;
        std::vector<Eigen::RowVectorXd> logp_rows(live.size());
        for (size_t h = 0; h < live.size(); ++h) {
            int last = live[h].tokens.empty() ? kBosId : live[h].tokens.back();
            logp_rows[h] = session.step(live[h].state, last, step);
            // Top tokens of this hypothesis; two spares cover the excluded
            // control tokens.
            size_t top_k = std::min<size_t>(static_cast<size_t>(logp_rows[h].size()),
                                            static_cast<size_t>(beam_size) + 2);
            std::vector<int> idx(static_cast<size_t>(logp_rows[h].size()));
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
            std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(top_k), idx.end(),
                              [&](int a, int b) {
                                  double la = logp_rows[h][a], lb = logp_rows[h][b];
                                  if (la != lb) return la > lb;
                                  return a < b;
                              });
            int taken = 0;
            for (size_t k = 0; k < top_k && taken < beam_size; ++k) {
                int tok = idx[k];
                if (tok == kPadId || tok == kBosId) continue;  // never emit control tokens
                candidates.push_back({live[h].log_prob + logp_rows[h][tok], h, tok});
                ++taken;
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.token < b.token;
        });

        std::vector<Live> next;
        for (const auto& cand : candidates) {
            if (static_cast<int>(next.size()) >= beam_size) break;
            if (cand.token == kEosId) {
                BeamHypothesis hyp;
                hyp.tokens = live[cand.parent].tokens;
                hyp.log_prob = cand.log_prob;
                int len = static_cast<int>(hyp.tokens.size()) + 1;  // include EOS
                hyp.score = cand.log_prob / static_cast<double>(len);
                done.push_back(std::move(hyp));
                continue;
            }
            Live child;
            child.tokens = live[cand.parent].tokens;
            child.tokens.push_back(cand.token);
            child.log_prob = cand.log_prob;
            child.state = live[cand.parent].state;  // copy of KV cache
            next.push_back(std::move(child));
        }
        live = std::move(next);
        if (static_cast<int>(done.size()) >= beam_size) break;
    }

    // Hypotheses still alive at the length cap are force-finished.
    for (auto& h : live) {
        BeamHypothesis hyp;
        hyp.tokens = h.tokens;
        hyp.log_prob = h.log_prob;
        hyp.score = h.tokens.empty() ? -std::numeric_limits<double>::infinity()
                                     : h.log_prob / static_cast<double>(h.tokens.size());
        done.push_back(std::move(hyp));
    }
    if (done.empty()) return BeamHypothesis{};

    auto best = std::max_element(done.begin(), done.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
        if (a.score != b.score) return a.score < b.score;
        return b.tokens < a.tokens;  // deterministic tie-break
    });
    return *best;
}

double sequence_log_prob(const Mat& log_probs, const std::vector<int>& targets) {
    double total = 0.0;
    for (size_t t = 0; t < targets.size(); ++t) {
        total += log_probs(static_cast<long>(t), targets[t]);
    }
    return total;
}

// ---- Checkpoint I/O ----

namespace {
constexpr char kCheckpointMagic[8] = {'F', 'M', 'C', 'K', '0', '0', '0', '1'};
}

void Seq2SeqModel::save_checkpoint(const std::string& path,
                                   const std::vector<std::string>& vocab_symbols) const {
    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["config"] = {
        {"vocab_size", cfg_.vocab_size},       {"d_model", cfg_.d_model},
        {"n_heads", cfg_.n_heads},             {"n_enc_layers", cfg_.n_enc_layers},
        {"n_dec_layers", cfg_.n_dec_layers},   {"d_ff", cfg_.d_ff},
        {"dropout_p", cfg_.dropout_p},         {"max_seq_len", cfg_.max_seq_len},
    };
    header["vocab"] = vocab_symbols;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const Param* p : registry_) {
        tensors.push_back({{"name", p->name},
                           {"rows", p->value.rows()},
                           {"cols", p->value.cols()},
                           {"trainable", p->trainable}});
    }
    header["tensors"] = tensors;
    std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    // Row-major, little-endian doubles.
    for (const Param* p : registry_) {
        for (long r = 0; r < p->value.rows(); ++r) {
            for (long c = 0; c < p->value.cols(); ++c) {
                double v = p->value(r, c);
                out.write(reinterpret_cast<const char*>(&v), sizeof(v));
            }
        }
    }
}

Seq2SeqModel Seq2SeqModel::load_checkpoint(const std::string& path,
                                           std::vector<std::string>* vocab_symbols) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw InputError("bad checkpoint magic in " + path);
    }
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    auto header = nlohmann::json::parse(header_str);
    if (header.at("format_version").get<int>() != 1) {
        throw InputError("unsupported checkpoint format version");
    }
    ModelConfig cfg;
    const auto& jc = header.at("config");
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.n_enc_layers = jc.at("n_enc_layers").get<int>();
    cfg.n_dec_layers = jc.at("n_dec_layers").get<int>();
    cfg.d_ff = jc.at("d_ff").get<int>();
    cfg.dropout_p = jc.at("dropout_p").get<double>();
    cfg.max_seq_len = jc.at("max_seq_len").get<int>();

    Seq2SeqModel model(cfg, 0);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != model.registry_.size()) {
        throw InputError("checkpoint tensor count mismatch");
    }
    for (size_t i = 0; i < model.registry_.size(); ++i) {
        Param* p = model.registry_[i];
        const auto& t = tensors[i];
        if (t.at("name").get<std::string>() != p->name ||
            t.at("rows").get<long>() != p->value.rows() ||
            t.at("cols").get<long>() != p->value.cols()) {
            throw InputError("checkpoint tensor layout mismatch at " + p->name);
        }
        p->trainable = t.at("trainable").get<bool>();
        for (long r = 0; r < p->value.rows(); ++r) {
            for (long c = 0; c < p->value.cols(); ++c) {
                double v = 0.0;
                in.read(reinterpret_cast<char*>(&v), sizeof(v));
                p->value(r, c) = v;
            }
        }
    }
    if (!in) throw InputError("truncated checkpoint: " + path);
    if (vocab_symbols) *vocab_symbols = header.at("vocab").get<std::vector<std::string>>();
    return model;
}

}  // namespace fmalloc
