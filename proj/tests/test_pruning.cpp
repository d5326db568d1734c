#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fmalloc/pruning.hpp"
#include "fmalloc/rng.hpp"

#include <cmath>

using namespace fmalloc;

namespace {

ModelConfig small_config(double dropout_p = 0.2) {
    ModelConfig cfg;
    cfg.vocab_size = 10;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ff = 6;
    cfg.dropout_p = dropout_p;
    cfg.max_seq_len = 8;
    return cfg;
}

PaddedBatch random_batch(const ModelConfig& cfg, uint64_t seed, int n_items) {
    Rng rng(seed);
    PaddedBatch batch;
    for (int i = 0; i < n_items; ++i) {
        EncodedPair p;
        int src_len = 3 + static_cast<int>(rng.next_below(3));
        int tgt_len = 3 + static_cast<int>(rng.next_below(3));
        for (int t = 0; t < src_len; ++t) {
            p.src.push_back(4 + static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size - 4))));
        }
        p.tgt_in.push_back(kBosId);
        for (int t = 0; t < tgt_len; ++t) {
            int tok = 4 + static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size - 4)));
            p.tgt_in.push_back(tok);
            p.tgt_out.push_back(tok);
        }
        p.tgt_out.push_back(kEosId);
        batch.items.push_back(std::move(p));
    }
    return batch;
}

std::vector<EncodedPair> random_pairs(const ModelConfig& cfg, uint64_t seed, int n) {
    PaddedBatch b = random_batch(cfg, seed, n);
    return b.items;
}

}  // namespace

TEST_CASE("js_loss basics") {
    ModelConfig cfg = small_config();
    Seq2SeqModel model(cfg, 3);
    PaddedBatch batch = random_batch(cfg, 11, 4);

    SUBCASE("zero dropout gives exactly zero") {
        ModelConfig c0 = small_config(0.0);
        Seq2SeqModel m0(c0, 3);
        CHECK(js_loss(m0, batch, 123) == 0.0);
    }
    SUBCASE("nonnegative and bounded on dropout-contrast inputs") {
        for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
            double loss = js_loss(model, batch, seed);
            CHECK(loss >= 0.0);
            CHECK(loss <= std::log(2.0));
        }
    }
    SUBCASE("matches an independently computed symmetrized KL") {
        uint64_t seed = 77;
        MaskSet ones = ones_masks(cfg);
        ForwardCache f1 = model.forward(batch, 0, batch.size(), ones,
                                        DropoutOpts{DropoutMode::FFOnly, seed, nullptr});
        ForwardCache f2 = model.forward(batch, 0, batch.size(), ones, DropoutOpts{});
        Mat lp1 = model.log_probs(f1);
        Mat lp2 = model.log_probs(f2);
        double expected = 0.0;
        for (long r = 0; r < lp1.rows(); ++r) {
            Eigen::ArrayXd p1 = lp1.row(r).array().exp();
            Eigen::ArrayXd p2 = lp2.row(r).array().exp();
            Eigen::ArrayXd diff = lp1.row(r).array() - lp2.row(r).array();
            // Both KL directions; symmetric in (P1, P2) by construction.
            expected += 0.5 * ((p1 * diff).sum() + (p2 * -diff).sum());
        }
        expected /= static_cast<double>(lp1.rows());
        CHECK(js_loss(model, batch, seed) == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("zero-length batch is an input error") {
        PaddedBatch empty;
        CHECK_THROWS_AS(js_loss(model, empty, 1), InputError);
    }
}

TEST_CASE("importance gradients match finite differences with frozen noise") {
    ModelConfig cfg = small_config(0.3);
    Seq2SeqModel model(cfg, 21);
    PaddedBatch batch = random_batch(cfg, 5, 3);
    const uint64_t noise_seed = 4242;

    Gradients grads = model.make_gradients();
    js_loss(model, batch, noise_seed, &grads);

    const double eps = 1e-4;
    MaskSet masks = ones_masks(cfg);
    for (size_t l = 0; l < masks.size(); ++l) {
        for (long k = 0; k < masks[l].size(); ++k) {
            masks[l][k] = 1.0 + eps;
            double up = js_loss(model, batch, noise_seed, nullptr, nullptr, &masks);
            masks[l][k] = 1.0 - eps;
            double down = js_loss(model, batch, noise_seed, nullptr, nullptr, &masks);
            masks[l][k] = 1.0;
            double fd = (up - down) / (2.0 * eps);
            double g = grads.ff_mask_grads[l][k];
            CHECK(std::abs(fd - g) / (std::abs(g) + 1e-8) <= 1e-3);
        }
    }
}

TEST_CASE("estimate_importance") {
    ModelConfig cfg = small_config(0.2);
    Seq2SeqModel model(cfg, 9);
    auto data = random_pairs(cfg, 31, 64);

    SUBCASE("scores are nonnegative and deterministic") {
        ImportanceScores i1 = estimate_importance(model, data, 4, 8, 55);
        ImportanceScores i2 = estimate_importance(model, data, 4, 8, 55);
        REQUIRE(i1.scores.size() == static_cast<size_t>(cfg.n_ff_layers()));
        CHECK(i1.n_samples == 4);
        for (size_t l = 0; l < i1.scores.size(); ++l) {
            CHECK(i1.scores[l].minCoeff() >= 0.0);
            CHECK((i1.scores[l] - i2.scores[l]).abs().maxCoeff() == 0.0);
        }
        ImportanceScores i3 = estimate_importance(model, data, 4, 8, 56);
        bool differs = false;
        for (size_t l = 0; l < i1.scores.size(); ++l) {
            differs = differs || (i1.scores[l] - i3.scores[l]).abs().maxCoeff() > 0.0;
        }
        CHECK(differs);
    }
    SUBCASE("threaded estimation matches serial within accumulation tolerance") {
        ImportanceScores serial = estimate_importance(model, data, 6, 8, 55, 1);
        ImportanceScores threaded = estimate_importance(model, data, 6, 8, 55, 2);
        for (size_t l = 0; l < serial.scores.size(); ++l) {
            CHECK((serial.scores[l] - threaded.scores[l]).abs().maxCoeff() <= 1e-12);
        }
    }
    SUBCASE("dead cell has exactly zero importance") {
        Seq2SeqModel dead = model;
        auto ff = dead.ff_layers();
        ff[0]->values.value.col(3).setZero();
        ImportanceScores imp = estimate_importance(dead, data, 3, 8, 7);
        CHECK(imp.scores[0][3] == 0.0);
        CHECK(imp.scores[0].sum() > 0.0);
    }
    SUBCASE("permutation equivariance with corresponding noise") {
        const double p = cfg.dropout_p;
        const uint64_t seed = 91;

        // Identity override reproduces the default noise stream.
        struct MappedNoise final : FFNoiseProvider {
            uint64_t seed;
            double p;
            const std::vector<int>* perm = nullptr;
            double scale(int ff_layer, long token, int cell) const override {
                int mapped = perm ? (*perm)[static_cast<size_t>(cell)] : cell;
                return default_ff_noise_scale(seed, p, ff_layer, token, mapped);
            }
        };

        MappedNoise identity;
        identity.seed = seed;
        identity.p = p;
        ImportanceScores base = estimate_importance(model, data, 3, 8, seed, 1, &identity);

        // Permute the cells of every FF layer.
        std::vector<int> perm = {2, 0, 5, 1, 3, 4};
        Seq2SeqModel permuted = model;
        for (auto* ff : permuted.ff_layers()) {
            Mat keys = ff->keys.value, values = ff->values.value, kb = ff->key_bias.value;
            for (int j = 0; j < cfg.d_ff; ++j) {
                ff->keys.value.row(j) = keys.row(perm[static_cast<size_t>(j)]);
                ff->key_bias.value(j, 0) = kb(perm[static_cast<size_t>(j)], 0);
                ff->values.value.col(j) = values.col(perm[static_cast<size_t>(j)]);
            }
        }
        MappedNoise mapped = identity;
        mapped.perm = &perm;
        ImportanceScores permuted_scores = estimate_importance(permuted, data, 3, 8, seed, 1, &mapped);

        for (size_t l = 0; l < base.scores.size(); ++l) {
            for (int j = 0; j < cfg.d_ff; ++j) {
                double expected = base.scores[l][perm[static_cast<size_t>(j)]];
                CHECK(permuted_scores.scores[l][j] ==
                      doctest::Approx(expected).epsilon(1e-9).scale(1.0));
            }
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(estimate_importance(model, data, 0, 8, 1), InputError);
        std::vector<EncodedPair> empty;
        CHECK_THROWS_AS(estimate_importance(model, empty, 1, 8, 1), InputError);
    }
}

TEST_CASE("importance converges as batches double") {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ff = 32;
    cfg.dropout_p = 0.1;
    cfg.max_seq_len = 10;
    Seq2SeqModel model(cfg, 77);
    auto data = random_pairs(cfg, 3, 512);

    ImportanceScores half = estimate_importance(model, data, 32, 16, 5);
    ImportanceScores full = estimate_importance(model, data, 64, 16, 5);
    for (size_t l = 0; l < half.scores.size(); ++l) {
        double m_half = half.scores[l].mean();
        double m_full = full.scores[l].mean();
        CHECK(std::abs(m_full - m_half) / (std::abs(m_full) + 1e-12) <= 0.10);
    }
}

TEST_CASE("binarize_importance") {
    SUBCASE("s = 0 keeps everything") {
        ImportanceScores imp;
        imp.scores.push_back(Arr::Random(8).abs());
        imp.n_samples = 1;
        BinaryMaskSet mask = binarize_importance(imp, 0.0);
        for (uint8_t b : mask[0]) CHECK(b == 1);
    }
    SUBCASE("hand example: sort and threshold") {
        ImportanceScores imp;
        Arr s(4);
        s << 0.1, 0.4, 0.2, 0.3;
        imp.scores.push_back(s);
        BinaryMaskSet mask = binarize_importance(imp, 0.5);
        CHECK(mask[0] == std::vector<uint8_t>{0, 1, 0, 1});
    }
    SUBCASE("ties keep lower indices") {
        ImportanceScores imp;
        Arr s(4);
        s << 0.2, 0.2, 0.2, 0.2;
        imp.scores.push_back(s);
        BinaryMaskSet mask = binarize_importance(imp, 0.25);
        CHECK(mask[0] == std::vector<uint8_t>{1, 1, 1, 0});
    }
    SUBCASE("kept count is ceil((1-s)N) exactly") {
        Rng rng(4);
        ImportanceScores imp;
        imp.scores.push_back(Arr::NullaryExpr(256, [&](long) { return rng.next_double(); }));
        for (double s : {0.0, 0.05, 0.2, 0.4}) {
            BinaryMaskSet mask = binarize_importance(imp, s);
            long kept = 0;
            for (uint8_t b : mask[0]) kept += b;
            CHECK(kept == static_cast<long>(std::ceil((1.0 - s) * 256.0)));
        }
    }
    SUBCASE("binarization of an already binary ordering is idempotent") {
        ImportanceScores imp;
        Arr s(6);
        s << 1, 0, 1, 0, 0, 1;
        imp.scores.push_back(s);
        BinaryMaskSet mask = binarize_importance(imp, 0.5);
        CHECK(mask[0] == std::vector<uint8_t>{1, 0, 1, 0, 0, 1});
    }
    SUBCASE("per-layer independence") {
        ImportanceScores imp;
        Arr a(4), b(4);
        a << 4, 3, 2, 1;
        b << 1, 2, 3, 4;
        imp.scores.push_back(a);
        imp.scores.push_back(b);
        BinaryMaskSet mask = binarize_importance(imp, 0.5);
        CHECK(mask[0] == std::vector<uint8_t>{1, 1, 0, 0});
        CHECK(mask[1] == std::vector<uint8_t>{0, 0, 1, 1});
    }
    SUBCASE("invalid sparsity") {
        ImportanceScores imp;
        imp.scores.push_back(Arr::Ones(4));
        CHECK_THROWS_AS(binarize_importance(imp, -0.1), InputError);
        CHECK_THROWS_AS(binarize_importance(imp, 1.0), InputError);
    }
}

TEST_CASE("identity pruning leaves the model unchanged") {
    ModelConfig cfg = small_config(0.1);
    Seq2SeqModel model(cfg, 13);
    auto data = random_pairs(cfg, 1, 32);
    ImportanceScores imp = estimate_importance(model, data, 2, 8, 3);
    BinaryMaskSet mask = binarize_importance(imp, 0.0);

    PaddedBatch batch = random_batch(cfg, 6, 3);
    ForwardCache f1 = model.forward(batch, 0, batch.size(), ones_masks(cfg), DropoutOpts{});
    ForwardCache f2 = model.forward(batch, 0, batch.size(), masks_from_binary(mask), DropoutOpts{});
    CHECK((model.logits(f1) - model.logits(f2)).cwiseAbs().maxCoeff() == 0.0);
}
