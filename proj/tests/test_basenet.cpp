#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace mend;
using namespace mend::testing;

namespace {

// Loop-based evaluator written without numkit's matvec.
Vector reference_logits(const BaseModel& m, const Vector& x) {
    std::vector<double> act(x.begin(), x.end());
    for (const auto& l : m.layers()) {
        std::vector<double> next(l.out_dim());
        for (std::size_t i = 0; i < l.out_dim(); ++i) {
            double z = l.bias[i];
            for (std::size_t j = 0; j < l.in_dim(); ++j) z += l.weight(i, j) * act[j];
            next[i] = l.activation == Activation::relu ? (z > 0 ? z : 0.0) : z;
        }
        act = std::move(next);
    }
    return Vector(act);
}

double mean_nll(const BaseModel& m, const std::vector<LabeledExample>& batch) {
    double total = 0.0;
    for (const auto& e : batch) total += softmax_nll(logits(m, e.x), e.y).loss;
    return total / static_cast<double>(batch.size());
}

BaseModel with_weight(const BaseModel& m, std::size_t layer, const std::vector<double>& w) {
    Matrix mat(m.layer(layer).weight.rows(), m.layer(layer).weight.cols(), w);
    return clone_with_weights(m, {{layer, mat}});
}

}  // namespace

TEST(Forward, ZeroWeightsGiveBiases) {
    std::vector<DenseLayer> layers{{Matrix(3, 4), Vector{0.5, -1.0, 2.0}, Activation::identity}};
    const BaseModel m(layers);
    EXPECT_EQ(logits(m, Vector{1, 2, 3, 4}), (Vector{0.5, -1.0, 2.0}));
}

TEST(Forward, IdentityLayer) {
    std::vector<DenseLayer> layers{{Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, Vector(3), Activation::identity}};
    const BaseModel m(layers);
    EXPECT_EQ(logits(m, Vector{3, -1, 2}), (Vector{3, -1, 2}));
}

TEST(Forward, MatchesLoopEvaluator) {
    Rng rng(1);
    const BaseModel m = random_model({6, 8, 7, 4}, rng);
    for (int i = 0; i < 10; ++i) {
        const Vector x = random_vector(6, rng);
        EXPECT_LE(relative_error(logits(m, x).values(), reference_logits(m, x).values()), 1e-14);
    }
}

TEST(Forward, InputDimMismatchThrows) {
    Rng rng(1);
    const BaseModel m = random_model({6, 4}, rng);
    EXPECT_THROW(logits(m, Vector(5)), ShapeError);
}

TEST(Model, ValidatesChainingAndActivations) {
    EXPECT_THROW(BaseModel({{Matrix(3, 2), Vector(3), Activation::relu}, {Matrix(2, 4), Vector(2), Activation::identity}}),
                 ShapeError);
    EXPECT_THROW(BaseModel({{Matrix(3, 2), Vector(3), Activation::relu}}), ConfigError);
    EXPECT_THROW(BaseModel({{Matrix(3, 2), Vector(2), Activation::identity}}), ShapeError);
}

TEST(BackwardNll, SingleExampleLastLayerDelta) {
    Rng rng(2);
    const BaseModel m = random_model({5, 6, 4}, rng);
    const Vector x = random_vector(5, rng);
    const auto trace = forward(m, std::vector<Vector>{x});
    const auto back = backward_nll(m, trace, std::vector<ClassIndex>{2});
    Vector expected = softmax(trace.logits[0]);
    expected[2] -= 1.0;
    EXPECT_LE(relative_error(back.grads.factors[1].deltas[0].values(), expected.values()), 1e-15);
}

TEST(BackwardNll, SaturatedCorrectLabelHasNearZeroGradients) {
    std::vector<DenseLayer> layers{{Matrix{{1, 0}, {0, 1}}, Vector(2), Activation::relu},
                                   {Matrix{{100, 0}, {0, -100}}, Vector(2), Activation::identity}};
    const BaseModel m(layers);
    const auto trace = forward(m, std::vector<Vector>{Vector{1.0, 1.0}});
    const auto back = backward_nll(m, trace, std::vector<ClassIndex>{0});
    for (const auto& w : back.grads.weight) EXPECT_LT(max_abs(w.values()), 1e-60);
    for (const auto& f : back.grads.factors) EXPECT_LT(max_abs(f.deltas[0].values()), 1e-60);
}

TEST(BackwardNll, DenseGradsMatchFiniteDifferences) {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const BaseModel m = random_model({4, 5, 3}, rng);
        const auto batch = random_batch(m, 3, rng);
        const auto trace = forward(m, inputs_of(batch));
        const auto back = backward_nll(m, trace, labels_of(batch), Reduction::mean);
        for (std::size_t l = 0; l < m.num_layers(); ++l) {
            const auto fd = finite_diff_grad(
                [&](const std::vector<double>& w) { return mean_nll(with_weight(m, l, w), batch); },
                m.layer(l).weight.data());
            EXPECT_LE(relative_error(back.grads.weight[l].values(), fd), 1e-6);
        }
    }
}

TEST(BackwardNll, StaleTraceRejected) {
    Rng rng(4);
    BaseModel m = random_model({3, 4, 2}, rng);
    const auto trace = forward(m, std::vector<Vector>{random_vector(3, rng)});
    m.mutate([](std::vector<DenseLayer>& ls) { ls[0].weight(0, 0) += 1.0; });
    EXPECT_THROW(backward_nll(m, trace, std::vector<ClassIndex>{0}), ContractError);
}

TEST(BackwardNll, LabelCountMismatchThrows) {
    Rng rng(4);
    const BaseModel m = random_model({3, 2}, rng);
    const auto trace = forward(m, std::vector<Vector>{random_vector(3, rng)});
    EXPECT_THROW(backward_nll(m, trace, std::vector<ClassIndex>{0, 1}), ShapeError);
}

TEST(Reconstruct, SingleTermIsOuter) {
    GradFactors f{0, {Vector{1, 2}}, {Vector{3, 4, 5}}};
    EXPECT_EQ(reconstruct_gradient(f), outer(Vector{3, 4, 5}, Vector{1, 2}));
}

TEST(Reconstruct, CancellingPairGivesZero) {
    const Vector u{0.3, -1.2, 2.0};
    const Vector d{1.5, -0.5};
    GradFactors f{0, {u, u}, {d, Vector{-1.5, 0.5}}};
    EXPECT_EQ(max_abs(reconstruct_gradient(f).values()), 0.0);
}

TEST(Reconstruct, EmptyFactorsRejected) { EXPECT_THROW(reconstruct_gradient(GradFactors{}), ContractError); }

TEST(Reconstruct, MatchesDenseGradientForEveryBatchSize) {
    Rng rng(5);
    const BaseModel m = random_model({7, 9, 6, 5}, rng);
    for (std::size_t B = 1; B <= 16; ++B) {
        const auto batch = random_batch(m, B, rng);
        const auto trace = forward(m, inputs_of(batch));
        const auto back = backward_nll(m, trace, labels_of(batch));
        for (std::size_t l = 0; l < m.num_layers(); ++l) {
            EXPECT_LE(relative_error(reconstruct_gradient(back.grads.factors[l]).values(),
                                     back.grads.weight[l].values()),
                      1e-9);
            Vector bias(m.layer(l).out_dim());
            for (const auto& d : back.grads.factors[l].deltas) axpy(1.0, d.values(), bias.values());
            EXPECT_LE(relative_error(bias.values(), back.grads.bias[l].values()), 1e-9);
        }
    }
}

TEST(Reconstruct, PerExampleFactorsSumToBatched) {
    Rng rng(6);
    const BaseModel m = random_model({5, 8, 4}, rng);
    const auto batch = random_batch(m, 6, rng);
    const auto back = backward_nll(m, forward(m, inputs_of(batch)), labels_of(batch));
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        Matrix sum(m.layer(l).out_dim(), m.layer(l).in_dim());
        for (const auto& e : batch) {
            const auto one = backward_nll(m, forward(m, std::vector<Vector>{e.x}), std::vector<ClassIndex>{e.y});
            axpy(1.0, reconstruct_gradient(one.grads.factors[l]).values(), sum.values());
        }
        EXPECT_LE(relative_error(sum.values(), reconstruct_gradient(back.grads.factors[l]).values()), 1e-9);
    }
}

TEST(Reconstruct, MeanReductionScalesDenseButNotFactors) {
    Rng rng(7);
    const BaseModel m = random_model({4, 3}, rng);
    const auto batch = random_batch(m, 4, rng);
    const auto trace = forward(m, inputs_of(batch));
    const auto sum = backward_nll(m, trace, labels_of(batch), Reduction::sum);
    const auto mean = backward_nll(m, trace, labels_of(batch), Reduction::mean);
    EXPECT_EQ(sum.grads.factors[0].deltas, mean.grads.factors[0].deltas);
    Matrix scaled = sum.grads.weight[0];
    for (double& x : scaled.values()) x /= 4.0;
    EXPECT_LE(relative_error(scaled.values(), mean.grads.weight[0].values()), 1e-15);
}

TEST(Clone, EmptyMapIsBitwiseEqual) {
    Rng rng(8);
    const BaseModel m = random_model({4, 5, 3}, rng);
    EXPECT_TRUE(clone_with_weights(m, {}).same_parameters(m));
}

TEST(Clone, ZeroLayerBecomesBiasOnly) {
    Rng rng(9);
    const BaseModel m = random_model({4, 5, 3}, rng);
    const BaseModel z = clone_with_weights(m, {{1, Matrix(3, 5)}});
    EXPECT_EQ(logits(z, random_vector(4, rng)), m.layer(1).bias);
    EXPECT_EQ(z.layer(0), m.layer(0));
}

TEST(Clone, GradientStepDecreasesLoss) {
    Rng rng(10);
    const BaseModel m = random_model({6, 8, 4}, rng);
    const auto batch = random_batch(m, 8, rng);
    const auto back = backward_nll(m, forward(m, inputs_of(batch)), labels_of(batch), Reduction::mean);
    std::map<std::size_t, Matrix> rep;
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        Matrix w = m.layer(l).weight;
        axpy(-1e-2, back.grads.weight[l].values(), w.values());
        rep.emplace(l, w);
    }
    EXPECT_LT(mean_nll(clone_with_weights(m, rep), batch), mean_nll(m, batch));
}

TEST(Clone, ErrorsOnUnknownLayerOrShape) {
    Rng rng(11);
    const BaseModel m = random_model({4, 3}, rng);
    EXPECT_THROW(clone_with_weights(m, {{5, Matrix(3, 4)}}), IndexError);
    EXPECT_THROW(clone_with_weights(m, {{0, Matrix(4, 3)}}), ShapeError);
}

TEST(Clone, NeverAliasesSource) {
    Rng rng(12);
    const BaseModel m = random_model({4, 5, 3}, rng);
    const Vector x = random_vector(4, rng);
    const Vector before = logits(m, x);
    BaseModel c = clone_with_weights(m, {{0, m.layer(0).weight}});
    c.mutate([](std::vector<DenseLayer>& ls) {
        for (auto& l : ls)
            for (double& w : l.weight.values()) w = 7.0;
    });
    EXPECT_EQ(logits(m, x), before);
}

TEST(Pretrain, FitsSeparableData) {
    Rng rng(13);
    std::vector<LabeledExample> data;
    for (int i = 0; i < 60; ++i) {
        const ClassIndex y = rng.uniform_index(3);
        Vector x = random_vector(4, rng, 0.1);
        x[y] += 2.0;
        data.push_back({x, y});
    }
    const BaseModel init = BaseModel::random(std::vector<std::size_t>{4, 8, 3}, rng);
    PretrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    const BaseModel m = train_classifier(init, data, cfg);
    EXPECT_EQ(accuracy(m, data), 1.0);
    EXPECT_TRUE(train_classifier(init, data, cfg).same_parameters(m));
}

TEST(Checkpoint, RoundTripIsExact) {
    Rng rng(14);
    const BaseModel m = random_model({5, 7, 3}, rng);
    const auto path = std::filesystem::temp_directory_path() / "mend_test_model.json";
    save_model(m, path);
    EXPECT_TRUE(load_model(path).same_parameters(m));
    std::filesystem::remove(path);
}

TEST(Checkpoint, WrongFormatRejected) {
    EXPECT_THROW(model_from_json(io::json{{"format", "other"}, {"version", 1}}), DataError);
    EXPECT_THROW(model_from_json(io::json{{"format", "mend-base-model"}, {"version", 99}}), DataError);
}
