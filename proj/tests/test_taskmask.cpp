#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fmalloc/optimizer.hpp"
#include "fmalloc/rng.hpp"
#include "fmalloc/taskmask.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>

using namespace fmalloc;

TEST_CASE("gate_mask") {
    SUBCASE("zero embedding gives 0.5 for any temperature") {
        Arr e = Arr::Zero(4);
        for (double tau : {0.01, 1.0, 400.0}) {
            Arr m = gate_mask(e, tau);
            for (long i = 0; i < m.size(); ++i) CHECK(m[i] == doctest::Approx(0.5));
        }
    }
    SUBCASE("saturates at small temperature") {
        Arr e(2);
        e << 10.0, -10.0;
        Arr m = gate_mask(e, 1.0 / 400.0);
        CHECK(m[0] == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(m[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    }
    SUBCASE("sigmoid(1) at tau 1") {
        Arr e(1);
        e << 1.0;
        CHECK(gate_mask(e, 1.0)[0] == doctest::Approx(0.7310585786300049).epsilon(1e-6));
    }
    SUBCASE("gate range and saturation at the hard end") {
        Rng rng(3);
        Arr e(64);
        for (long i = 0; i < e.size(); ++i) {
            e[i] = rng.next_normal();
            if (std::abs(e[i]) < 0.1) e[i] = e[i] < 0 ? -0.1 : 0.1;
        }
        // Moderate temperature keeps the gate strictly inside (0,1).
        Arr soft = gate_mask(e, 1.0);
        for (long i = 0; i < soft.size(); ++i) {
            CHECK(soft[i] > 0.0);
            CHECK(soft[i] < 1.0);
        }
        // At tau = 1/400 with |e| >= 0.1 the gate is within 1e-6 of {0,1}
        // (saturated values round to exactly 0 or 1 in double precision).
        Arr hard = gate_mask(e, 1.0 / 400.0);
        for (long i = 0; i < hard.size(); ++i) {
            CHECK(hard[i] >= 0.0);
            CHECK(hard[i] <= 1.0);
            CHECK(std::min(hard[i], 1.0 - hard[i]) <= 1e-6);
        }
    }
    SUBCASE("nonpositive temperature is an input error") {
        CHECK_THROWS_AS(gate_mask(Arr::Zero(2), 0.0), InputError);
        CHECK_THROWS_AS(gate_mask(Arr::Zero(2), -1.0), InputError);
    }
}

TEST_CASE("anneal schedule endpoints and monotonicity") {
    AnnealSchedule sched{400.0, 50};
    // Epochs open soft (tau_max) and close hard (1/tau_max).
    CHECK(sched.tau_at(0) == doctest::Approx(400.0));
    CHECK(sched.tau_at(49) == doctest::Approx(1.0 / 400.0));
    double prev = 1e9;
    for (int b = 0; b < 50; ++b) {
        double tau = sched.tau_at(b);
        CHECK(tau >= 1.0 / 400.0);
        CHECK(tau <= 400.0);
        CHECK(tau < prev);
        prev = tau;
    }
    // A single-step epoch runs at the hard end, matching archival.
    AnnealSchedule single{400.0, 1};
    CHECK(single.tau_at(0) == doctest::Approx(1.0 / 400.0));
}

TEST_CASE("init_task_embedding") {
    BinaryMaskSet general = {{1, 0, 1, 0, 1, 1}, {0, 0, 1, 1, 0, 0}};
    SUBCASE("signs follow the general mask") {
        TaskEmbedding e = init_task_embedding(general, 5.0, 99);
        REQUIRE(e.size() == 2);
        for (size_t l = 0; l < e.size(); ++l) {
            for (long i = 0; i < e[l].size(); ++i) {
                if (general[l][static_cast<size_t>(i)]) {
                    CHECK(e[l][i] > 0.0);     // 5 - |z| > 0 w.h.p.
                    CHECK(e[l][i] <= 5.0);
                } else {
                    CHECK(e[l][i] < 0.0);     // -|z| < 0 always
                }
            }
        }
    }
    SUBCASE("initial soft mask inherits general knowledge only") {
        TaskEmbedding e = init_task_embedding(general, 5.0, 7);
        MaskSet m = gate_masks(e, 1.0);
        for (size_t l = 0; l < m.size(); ++l) {
            for (long i = 0; i < m[l].size(); ++i) {
                if (general[l][static_cast<size_t>(i)]) {
                    CHECK(m[l][i] > 0.5);
                } else {
                    CHECK(m[l][i] < 0.5);
                }
            }
        }
    }
    SUBCASE("deterministic given seed") {
        TaskEmbedding a = init_task_embedding(general, 5.0, 42);
        TaskEmbedding b = init_task_embedding(general, 5.0, 42);
        TaskEmbedding c = init_task_embedding(general, 5.0, 43);
        for (size_t l = 0; l < a.size(); ++l) {
            CHECK((a[l] - b[l]).abs().maxCoeff() == 0.0);
        }
        CHECK((a[0] - c[0]).abs().maxCoeff() > 0.0);
    }
    SUBCASE("alpha must be positive") {
        CHECK_THROWS_AS(init_task_embedding(general, 0.0, 1), InputError);
    }
}

TEST_CASE("embedding gradient chain matches finite differences") {
    Rng rng(17);
    TaskEmbedding e;
    e.push_back(Arr::NullaryExpr(8, [&](long) { return rng.next_normal(); }));
    std::vector<Arr> mask_grads;
    mask_grads.push_back(Arr::NullaryExpr(8, [&](long) { return rng.next_normal(); }));

    for (double tau : {0.2, 1.0, 40.0}) {
        std::vector<Arr> de = embedding_grad(e, tau, mask_grads);
        const double eps = 1e-6;
        for (long i = 0; i < e[0].size(); ++i) {
            // d(loss)/d(e_i) = mask_grad_i * d sigmoid(e_i/tau) / d e_i.
            Arr up = e[0], down = e[0];
            up[i] += eps;
            down[i] -= eps;
            double fd = mask_grads[0][i] * (gate_mask(up, tau)[i] - gate_mask(down, tau)[i]) / (2 * eps);
            CHECK(de[0][i] == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}

TEST_CASE("emax aggregation with threshold") {
    SUBCASE("binary operands") {
        std::vector<MaskSet> ops;
        ops.push_back({(Arr(3) << 1, 0, 1).finished()});
        ops.push_back({(Arr(3) << 0, 0, 1).finished()});
        BinaryMaskSet out = emax_threshold(ops, 0.5);
        CHECK(out[0] == std::vector<uint8_t>{1, 0, 1});
    }
    SUBCASE("soft operands, hand-evaluated") {
        std::vector<MaskSet> ops;
        ops.push_back({(Arr(2) << 0.6, 0.4).finished()});
        ops.push_back({(Arr(2) << 0.3, 0.45).finished()});
        BinaryMaskSet out = emax_threshold(ops, 0.5);
        CHECK(out[0] == std::vector<uint8_t>{1, 0});
    }
    SUBCASE("threshold boundary is inclusive") {
        std::vector<MaskSet> ops;
        ops.push_back({(Arr(2) << 0.5, 0.4999999).finished()});
        BinaryMaskSet out = emax_threshold(ops, 0.5);
        CHECK(out[0] == std::vector<uint8_t>{1, 0});
    }
}

TEST_CASE("mask archive") {
    BinaryMaskSet m0 = {{1, 1, 0, 0}};
    BinaryMaskSet m1 = {{0, 1, 1, 0}};
    BinaryMaskSet m2 = {{0, 0, 0, 1}};

    MaskArchive archive;
    archive.archive(0, "general", m0, nlohmann::json{{"sparsity", 0.5}});

    SUBCASE("aggregate of a single task is that mask") {
        BinaryMaskSet agg = archive.aggregate_previous(1, 0.5);
        CHECK(agg == m0);
    }
    SUBCASE("monotone aggregation") {
        archive.archive(1, "a", m1, nlohmann::json::object());
        archive.archive(2, "b", m2, nlohmann::json::object());
        BinaryMaskSet agg1 = archive.aggregate_previous(1, 0.5);
        BinaryMaskSet agg2 = archive.aggregate_previous(2, 0.5);
        BinaryMaskSet agg3 = archive.aggregate_previous(3, 0.5);
        long c1 = 0, c2 = 0, c3 = 0;
        for (size_t i = 0; i < 4; ++i) {
            CHECK(agg2[0][i] >= agg1[0][i]);
            CHECK(agg3[0][i] >= agg2[0][i]);
            c1 += agg1[0][i];
            c2 += agg2[0][i];
            c3 += agg3[0][i];
        }
        CHECK(c3 == 4);
    }
    SUBCASE("re-archiving and gaps are state errors") {
        CHECK_THROWS_AS(archive.archive(0, "again", m1, nlohmann::json::object()), StateError);
        CHECK_THROWS_AS(archive.archive(2, "gap", m1, nlohmann::json::object()), StateError);
    }
    SUBCASE("aggregate with missing masks is a state error") {
        CHECK_THROWS_AS(archive.aggregate_previous(2, 0.5), StateError);
        CHECK_THROWS_AS(archive.aggregate_previous(0, 0.5), StateError);
    }
    SUBCASE("json round trip") {
        namespace fs = std::filesystem;
        archive.archive(1, "a", m1, nlohmann::json{{"tau_max", 400.0}});
        fs::path path = fs::temp_directory_path() / "fmalloc_test_archive.json";
        nlohmann::json meta{{"lambda", 0.5}, {"alpha", 5.0}};
        archive.save_json(path.string(), meta);

        nlohmann::json loaded_meta;
        MaskArchive loaded = MaskArchive::load_json(path.string(), &loaded_meta);
        CHECK(loaded.n_archived() == 2);
        CHECK(loaded.mask(0) == m0);
        CHECK(loaded.mask(1) == m1);
        CHECK(loaded.task_name(1) == "a");
        CHECK(loaded_meta["lambda"].get<double>() == 0.5);
    }
}

TEST_CASE("archive_mask_from_embedding") {
    TaskEmbedding e;
    e.push_back((Arr(4) << 10.0, -10.0, 0.3, -0.2).finished());
    SUBCASE("saturated gate binarizes by sign at lambda 0.5") {
        BinaryMaskSet m = archive_mask_from_embedding(e, 400.0, 0.5);
        CHECK(m[0] == std::vector<uint8_t>{1, 0, 1, 0});
    }
    SUBCASE("lambda shifts the decision for soft gates") {
        // sigmoid(e / 400) is within ~0.006 of 0.5; a lambda of 0.51 sends
        // everything to zero.
        BinaryMaskSet m = archive_mask_from_embedding(e, 400.0, 0.51);
        CHECK(m[0] == std::vector<uint8_t>{0, 0, 0, 0});
    }
}

TEST_CASE("mask_gradients blocks read-only cells") {
    ModelConfig cfg;
    cfg.vocab_size = 10;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ff = 4;
    cfg.dropout_p = 0.0;
    cfg.max_seq_len = 8;
    Seq2SeqModel model(cfg, 5);

    Gradients grads = model.make_gradients();
    auto ff = model.ff_layers();
    // Fill cell gradients with per-cell markers 1,2,3,4.
    for (auto* layer : ff) {
        for (int i = 0; i < cfg.d_ff; ++i) {
            grads.param_grads[static_cast<size_t>(layer->keys.index)].row(i).setConstant(i + 1.0);
            grads.param_grads[static_cast<size_t>(layer->key_bias.index)](i, 0) = i + 1.0;
            grads.param_grads[static_cast<size_t>(layer->values.index)].col(i).setConstant(i + 1.0);
        }
    }
    BinaryMaskSet read_only = {{1, 0, 1, 0}, {0, 1, 0, 1}};
    mask_gradients(grads, model, read_only);

    for (size_t l = 0; l < 2; ++l) {
        for (int i = 0; i < cfg.d_ff; ++i) {
            double expected = read_only[l][static_cast<size_t>(i)] ? 0.0 : i + 1.0;
            CHECK(grads.param_grads[static_cast<size_t>(ff[l]->keys.index)](i, 0) == expected);
            CHECK(grads.param_grads[static_cast<size_t>(ff[l]->key_bias.index)](i, 0) == expected);
            CHECK(grads.param_grads[static_cast<size_t>(ff[l]->values.index)](0, i) == expected);
        }
    }
}

TEST_CASE("read-only cells stay bit-identical through optimizer steps") {
    ModelConfig cfg;
    cfg.vocab_size = 10;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ff = 6;
    cfg.dropout_p = 0.0;
    cfg.max_seq_len = 8;
    Seq2SeqModel model(cfg, 5);
    model.freeze_for_continual_learning();

    BinaryMaskSet read_only = {{1, 0, 1, 0, 0, 1}, {0, 1, 0, 1, 1, 0}};

    // Snapshot the protected bytes.
    auto ff = model.ff_layers();
    std::vector<Mat> keys_before, values_before, kb_before;
    for (auto* layer : ff) {
        keys_before.push_back(layer->keys.value);
        values_before.push_back(layer->values.value);
        kb_before.push_back(layer->key_bias.value);
    }

    Gradients grads = model.make_gradients();
    std::vector<TensorSlot> slots;
    for (Param* p : model.params()) {
        if (p->trainable) slots.push_back({&p->value, &grads.param_grads[static_cast<size_t>(p->index)]});
    }
    AdamOptimizer opt(slots, 1e-2);

    Rng rng(1);
    PaddedBatch batch;
    for (int i = 0; i < 4; ++i) {
        EncodedPair p;
        for (int t = 0; t < 4; ++t) p.src.push_back(4 + static_cast<int>(rng.next_below(6)));
        p.tgt_in = {kBosId, 4, 5, 6};
        p.tgt_out = {4, 5, 6, kEosId};
        batch.items.push_back(p);
    }
    MaskSet masks = ones_masks(cfg);

    for (int step = 0; step < 5; ++step) {
        grads.zero();
        ForwardCache fwd = model.forward(batch, 0, batch.size(), masks, DropoutOpts{});
        Mat dlogits;
        model.cross_entropy(fwd, &dlogits);
        model.backward(fwd, dlogits, grads);
        mask_gradients(grads, model, read_only);
        opt.step();
    }

    bool any_writable_changed = false;
    for (size_t l = 0; l < ff.size(); ++l) {
        for (int i = 0; i < cfg.d_ff; ++i) {
            if (read_only[l][static_cast<size_t>(i)]) {
                // Bit-identical: compare through memcmp-style exact equality.
                CHECK((ff[l]->keys.value.row(i).array() == keys_before[l].row(i).array()).all());
                CHECK(ff[l]->key_bias.value(i, 0) == kb_before[l](i, 0));
                CHECK((ff[l]->values.value.col(i).array() == values_before[l].col(i).array()).all());
            } else {
                any_writable_changed =
                    any_writable_changed ||
                    (ff[l]->keys.value.row(i).array() != keys_before[l].row(i).array()).any();
            }
        }
    }
    CHECK(any_writable_changed);
}

TEST_CASE("adam leaves zero-gradient parameters untouched") {
    Mat value(2, 2);
    value << 1.25, -0.5, 0.0, -0.0;
    Mat original = value;
    Mat grad = Mat::Zero(2, 2);
    AdamOptimizer opt({{&value, &grad}}, 0.1);
    for (int i = 0; i < 10; ++i) opt.step();
    for (long r = 0; r < 2; ++r) {
        for (long c = 0; c < 2; ++c) {
            CHECK(std::memcmp(&value(r, c), &original(r, c), sizeof(double)) == 0);
        }
    }

    grad(0, 0) = 0.5;
    opt.step();
    CHECK(value(0, 0) != original(0, 0));
    CHECK(value(1, 1) == original(1, 1));
}
