#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace mend;
using namespace mend::testing;

namespace {

VariantConfig raw_variant() {
    VariantConfig v;
    v.normalize = false;
    return v;
}

// Fills every editor tensor with small random values so no path is trivially zero.
void randomize(EditorParams& p, Rng& rng, double scale = 0.3) {
    p.for_each_tensor([&](std::span<double> s) {
        for (double& x : s) x = scale * rng.normal();
    });
    for (auto& l : p.layers) {
        for (double& s : l.film.s1) s += 1.0;
        for (double& s : l.film.s2) s += 1.0;
    }
}

GradFactors factors_for(const BaseModel& m, std::size_t layer, const std::vector<LabeledExample>& batch) {
    return backward_nll(m, forward(m, inputs_of(batch)), labels_of(batch)).grads.factors[layer];
}

}  // namespace

TEST(InitEditor, IdentityOnNormalizedInputs) {
    Rng rng(1);
    const BaseModel m = random_model({6, 5, 4}, rng);
    const std::vector<std::size_t> editable{0, 1};
    const auto p = init_editor(m, editable, 2, VariantConfig{}, 1e-2, rng);
    const auto batch = random_batch(m, 20, rng);
    const Normalizer norm = fit_normalizer(m, batch, p.groups);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t layer = editable[i % 2];
        const auto& g = p.groups[p.layers[i % 2].group];
        const Vector u = random_vector(g.m, rng, 3.0);
        const Vector d = random_vector(g.n, rng, 0.01);
        const auto [ut, dt] = editor_forward(p, layer, u, d, norm);
        const auto& s = norm.for_layer(layer);
        const Vector nu = standardize(u, s.mean_u, s.var_u);
        const Vector nd = standardize(d, s.mean_delta, s.var_delta);
        for (std::size_t j = 0; j < g.m; ++j) worst = std::max(worst, std::abs(ut[j] - nu[j]));
        for (std::size_t j = 0; j < g.n; ++j) worst = std::max(worst, std::abs(dt[j] - nd[j]));
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(InitEditor, IdentityWithoutNormalizationIsExact) {
    Rng rng(2);
    const BaseModel m = random_model({6, 5, 4}, rng);
    const auto p = init_editor(m, std::vector<std::size_t>{1}, 3, raw_variant(), 1e-2, rng);
    const Vector u = random_vector(5, rng), d = random_vector(4, rng);
    const auto [ut, dt] = editor_forward(p, 1, u, d, Normalizer{});
    EXPECT_EQ(ut, u);
    EXPECT_EQ(dt, d);
}

TEST(InitEditor, InitialValues) {
    Rng rng(3);
    const BaseModel m = random_model({6, 5, 4}, rng);
    const auto p = init_editor(m, std::vector<std::size_t>{0}, 2, VariantConfig{}, 0.25, rng);
    const auto& b = p.blocks[0];
    EXPECT_EQ(max_abs(b.U1.values()), 0.0);
    EXPECT_EQ(max_abs(b.U2.values()), 0.0);
    EXPECT_EQ(max_abs(b.b1.values()), 0.0);
    EXPECT_GT(max_abs(b.V1.values()), 0.0);
    EXPECT_LE(max_abs(b.V1.values()), std::sqrt(6.0 / (2 + 11)));
    const auto& f = p.layers[0].film;
    EXPECT_EQ(f.s1, Vector(11, 1.0));
    EXPECT_EQ(f.o2, Vector(11, 0.0));
    EXPECT_EQ(f.alpha, 0.25);

    VariantConfig v;
    v.identity_init = false;
    const auto q = init_editor(m, std::vector<std::size_t>{0}, 2, v, 0.25, rng);
    EXPECT_GT(max_abs(q.blocks[0].U1.values()), 0.0);
    EXPECT_GT(max_abs(q.blocks[0].U2.values()), 0.0);
    EXPECT_GT(max_abs(q.blocks[0].b1.values()), 0.0);
}

TEST(InitEditor, SharedShapeFormsOneGroup) {
    Rng rng(4);
    const BaseModel m = random_model({6, 5, 5, 5, 3}, rng);
    const std::vector<std::size_t> editable{1, 2};
    EXPECT_EQ(init_editor(m, editable, 2, VariantConfig{}, 1e-2, rng).groups.size(), 1u);
    EXPECT_EQ(init_editor(m, editable, 2, variant_by_name("no_sharing"), 1e-2, rng).groups.size(), 2u);
}

TEST(InitEditor, HandCountedParameters) {
    // m=8, n=4, r=2: shared 2*(2*12*2)+12 = 108, per layer 4*12+1 = 49.
    Rng rng(5);
    const BaseModel m = random_model({8, 4, 3}, rng);
    const auto p = init_editor(m, std::vector<std::size_t>{0}, 2, VariantConfig{}, 1e-2, rng);
    EXPECT_EQ(p.shared_parameter_count(), 108u);
    EXPECT_EQ(p.parameter_count(), 108u + 49u);
}

TEST(InitEditor, ConfigErrors) {
    Rng rng(6);
    const BaseModel m = random_model({4, 3, 2}, rng);
    EXPECT_THROW(init_editor(m, std::vector<std::size_t>{}, 1, VariantConfig{}, 1e-2, rng), ConfigError);
    EXPECT_THROW(init_editor(m, std::vector<std::size_t>{7}, 1, VariantConfig{}, 1e-2, rng), ConfigError);
    EXPECT_THROW(init_editor(m, std::vector<std::size_t>{0, 0}, 1, VariantConfig{}, 1e-2, rng), ConfigError);
    EXPECT_THROW(init_editor(m, std::vector<std::size_t>{0}, 0, VariantConfig{}, 1e-2, rng), ConfigError);
    EXPECT_THROW(init_editor(m, std::vector<std::size_t>{0}, 8, VariantConfig{}, 1e-2, rng), ConfigError);
}

TEST(Variants, NamesAndCoverage) {
    EXPECT_EQ(kVariantNames.size(), 7u);
    EXPECT_THROW(variant_by_name("bogus"), ConfigError);
    EXPECT_FALSE(variant_by_name("no_norm").normalize);
    EXPECT_FALSE(variant_by_name("no_id_init").identity_init);
    EXPECT_FALSE(variant_by_name("no_sharing").share_params);
    EXPECT_EQ(variant_by_name("only_smaller").transform, TransformMode::only_smaller);
    const auto c = coverage(TransformMode::only_smaller, 8, 4);
    EXPECT_FALSE(c.u);
    EXPECT_TRUE(c.delta);
    EXPECT_EQ(coverage(TransformMode::only_smaller, 4, 8).width(4, 8), 4u);
}

TEST(Variants, ParameterOrderingWhenShapesDiffer) {
    Rng rng(7);
    const BaseModel m = random_model({4, 9, 3}, rng);  // u smaller on layer 0, delta on layer 1
    const std::vector<std::size_t> editable{0, 1};
    auto count = [&](const char* name) { return init_editor(m, editable, 2, variant_by_name(name), 1e-2, rng).parameter_count(); };
    const auto smaller = count("only_smaller"), u = count("only_u"), d = count("only_delta"), full = count("full");
    EXPECT_LT(smaller, std::min(u, d));
    EXPECT_LT(std::min(u, d), full);
}

TEST(Variants, ParameterBudget) {
    Rng rng(8);
    const BaseModel m = random_model({10, 6, 6, 4}, rng);
    const std::vector<std::size_t> editable{0, 1, 2};
    const std::size_t r = 3;
    const auto p = init_editor(m, editable, r, VariantConfig{}, 1e-2, rng);
    std::size_t bound = 0;
    for (const auto& g : p.groups) bound += 10 * r * (g.m + g.n) + 8 * (g.m + g.n) * g.layers.size();
    EXPECT_LT(p.parameter_count(), bound);

    // only_smaller group cost depends on min(m, n) alone.
    const BaseModel a = random_model({12, 4, 2}, rng);
    const BaseModel b = random_model({30, 4, 2}, rng);
    const auto pa = init_editor(a, std::vector<std::size_t>{0}, 2, variant_by_name("only_smaller"), 1e-2, rng);
    const auto pb = init_editor(b, std::vector<std::size_t>{0}, 2, variant_by_name("only_smaller"), 1e-2, rng);
    EXPECT_EQ(pa.shared_parameter_count(), pb.shared_parameter_count());
}

TEST(Normalizer, ConstantInputsHitFloor) {
    // Layer 0's input is the raw example; use identical x with different labels.
    Rng rng(9);
    const BaseModel m = random_model({3, 4, 2}, rng);
    const Vector x{1.0, -2.0, 0.5};
    const std::vector<LabeledExample> set{{x, 0}, {x, 1}};
    const auto groups = form_groups(m, std::vector<std::size_t>{0}, true);
    const Normalizer n = fit_normalizer(m, set, groups);
    EXPECT_EQ(n.stats[0].var_u, Vector(3, 1e-6));
    const Vector z = standardize(x, n.stats[0].mean_u, n.stats[0].var_u);
    EXPECT_LE(max_abs(z.values()), 1e-15);
}

TEST(Normalizer, SingleExampleMean) {
    Rng rng(10);
    const BaseModel m = random_model({3, 4, 2}, rng);
    const std::vector<LabeledExample> set{{Vector{0.5, 1.5, -1.0}, 1}};
    const Normalizer n = fit_normalizer(m, set, form_groups(m, std::vector<std::size_t>{0}, true));
    EXPECT_EQ(n.stats[0].mean_u, set[0].x);
    EXPECT_EQ(max_abs(standardize(set[0].x, n.stats[0].mean_u, n.stats[0].var_u).values()), 0.0);
}

TEST(Normalizer, HandComputedTwoPointStats) {
    std::vector<DenseLayer> layers{{Matrix{{1.0}, {-1.0}}, Vector{0.1, 0.2}, Activation::identity}};
    const BaseModel m(layers);
    const std::vector<LabeledExample> set{{Vector{0.0}, 0}, {Vector{2.0}, 1}};
    const Normalizer n = fit_normalizer(m, set, form_groups(m, std::vector<std::size_t>{0}, true));
    EXPECT_DOUBLE_EQ(n.stats[0].mean_u[0], 1.0);
    EXPECT_DOUBLE_EQ(n.stats[0].var_u[0], 1.0);
    EXPECT_DOUBLE_EQ(standardize(Vector{0.0}, n.stats[0].mean_u, n.stats[0].var_u)[0], -1.0);
    EXPECT_DOUBLE_EQ(standardize(Vector{2.0}, n.stats[0].mean_u, n.stats[0].var_u)[0], 1.0);
}

TEST(Normalizer, PoolsOverGroupMembers) {
    Rng rng(11);
    const BaseModel m = random_model({4, 5, 5, 3}, rng);
    const auto batch = random_batch(m, 6, rng);
    const auto groups = form_groups(m, std::vector<std::size_t>{1}, true);
    const Normalizer n = fit_normalizer(m, batch, groups);
    const auto f = factors_for(m, 1, batch);
    Vector mean(5);
    for (const auto& u : f.inputs) axpy(1.0 / 6.0, u.values(), mean.values());
    EXPECT_LE(relative_error(mean.values(), n.stats[0].mean_u.values()), 1e-14);
    EXPECT_THROW(fit_normalizer(m, std::vector<LabeledExample>{}, groups), DataError);
}

TEST(EditorForward, MatchesHandEvaluation) {
    // r=2, m=3, n=2; all tensors random, FiLM not at identity.
    Rng rng(12);
    const BaseModel m = random_model({3, 2}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0}, 2, raw_variant(), 1e-2, rng);
    randomize(p, rng);
    const Vector u{0.4, -1.1, 0.7};
    const Vector d{0.25, -0.6};
    const auto [ut, dt] = editor_forward(p, 0, u, d, Normalizer{});

    const auto& b = p.blocks[0];
    const auto& f = p.layers[0].film;
    const double z[5] = {u[0], u[1], u[2], d[0], d[1]};
    double a1[2] = {0, 0}, h[5], a2[2] = {0, 0}, g[5];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 5; ++j) a1[i] += b.V1(i, j) * z[j];
    for (int i = 0; i < 5; ++i) {
        const double pre = f.s1[i] * (b.U1(i, 0) * a1[0] + b.U1(i, 1) * a1[1] + b.b1[i]) + f.o1[i];
        h[i] = z[i] + (pre > 0 ? pre : 0.0);
    }
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 5; ++j) a2[i] += b.V2(i, j) * h[j];
    for (int i = 0; i < 5; ++i) g[i] = h[i] + f.s2[i] * (b.U2(i, 0) * a2[0] + b.U2(i, 1) * a2[1]) + f.o2[i];
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(ut[i], g[i], 1e-14);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(dt[i], g[3 + i], 1e-14);
}

TEST(EditorForward, PartialTransformsPassOtherSideRaw) {
    Rng rng(13);
    const BaseModel m = random_model({6, 3, 2}, rng);
    const auto batch = random_batch(m, 10, rng);
    const Vector u = random_vector(6, rng), d = random_vector(3, rng);
    for (const char* name : {"only_u", "only_delta", "only_smaller"}) {
        auto p = init_editor(m, std::vector<std::size_t>{0}, 2, variant_by_name(name), 1e-2, rng);
        randomize(p, rng);
        const Normalizer norm = fit_normalizer(m, batch, p.groups);
        const auto [ut, dt] = editor_forward(p, 0, u, d, norm);
        const Coverage c = p.coverage_of(0);
        EXPECT_EQ(ut == u, !c.u) << name;
        EXPECT_EQ(dt == d, !c.delta) << name;
    }
}

TEST(EditorForward, ShapeMismatchThrows) {
    Rng rng(14);
    const BaseModel m = random_model({4, 3, 2}, rng);
    const auto p = init_editor(m, std::vector<std::size_t>{0}, 1, raw_variant(), 1e-2, rng);
    EXPECT_THROW(editor_forward(p, 0, Vector(3), Vector(3), Normalizer{}), ShapeError);
    EXPECT_THROW(editor_forward(p, 1, Vector(3), Vector(2), Normalizer{}), IndexError);
}

TEST(EditorForward, SharedGroupStorage) {
    Rng rng(15);
    const BaseModel m = random_model({6, 5, 5, 5, 3}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{1, 2}, 2, raw_variant(), 1e-2, rng);
    ASSERT_EQ(p.blocks.size(), 1u);
    const Vector u = random_vector(5, rng), d = random_vector(5, rng);
    const auto before1 = editor_forward(p, 1, u, d, Normalizer{});
    const auto before2 = editor_forward(p, 2, u, d, Normalizer{});
    EXPECT_EQ(before1, before2);
    for (double& x : p.blocks[0].U2.values()) x = 0.5;
    EXPECT_NE(editor_forward(p, 1, u, d, Normalizer{}), before1);
    EXPECT_NE(editor_forward(p, 2, u, d, Normalizer{}), before2);
    // FiLM is per layer.
    p.layers[0].film.o2[0] = 3.0;
    EXPECT_NE(editor_forward(p, 1, u, d, Normalizer{}), editor_forward(p, 2, u, d, Normalizer{}));
}

TEST(EditorBackward, MatchesFiniteDifferences) {
    Rng rng(16);
    const BaseModel m = random_model({4, 3, 2}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0}, 2, raw_variant(), 1e-2, rng);
    randomize(p, rng);
    const Vector u = random_vector(4, rng), d = random_vector(3, rng);
    const Vector wu = random_vector(4, rng), wd = random_vector(3, rng);
    auto objective = [&](const EditorParams& q) {
        const auto [ut, dt] = editor_forward(q, 0, u, d, Normalizer{});
        return dot(ut.values(), wu.values()) + dot(dt.values(), wd.values());
    };
    EditorParams grad = p.zeros_like();
    const auto app = apply_editor(p, 0, u, d, Normalizer{});
    backprop_editor(p, 0, app, wu, wd, grad);
    const auto fd = finite_diff_grad(
        [&](const std::vector<double>& flat) {
            EditorParams q = p;
            q.assign(flat);
            return objective(q);
        },
        p.flatten());
    const auto analytic = grad.flatten();
    // alpha does not enter editor_forward; its gradient is zero on both sides.
    EXPECT_LE(relative_error(analytic, fd), 1e-7);
}

TEST(Pseudogradient, IdentityPriorEqualsDenseGradient) {
    Rng rng(17);
    const BaseModel m = random_model({5, 6, 4}, rng);
    const auto p = init_editor(m, std::vector<std::size_t>{0, 1}, 2, raw_variant(), 1e-2, rng);
    const auto batch = random_batch(m, 5, rng);
    for (std::size_t l : {0u, 1u}) {
        const auto f = factors_for(m, l, batch);
        EXPECT_EQ(pseudogradient(p, l, f, Normalizer{}), reconstruct_gradient(f));
    }
}

TEST(Pseudogradient, SingleExampleIsRankOne) {
    Rng rng(18);
    const BaseModel m = random_model({5, 6, 4}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0}, 2, raw_variant(), 1e-2, rng);
    randomize(p, rng);
    const Matrix g = pseudogradient(p, 0, factors_for(m, 0, random_batch(m, 1, rng)), Normalizer{});
    const double s = max_abs(g.values());
    for (std::size_t i = 0; i + 1 < g.rows(); ++i)
        for (std::size_t j = 0; j + 1 < g.cols(); ++j)
            EXPECT_LE(std::abs(g(i, j) * g(i + 1, j + 1) - g(i, j + 1) * g(i + 1, j)), 1e-12 * s * s);
}

TEST(Pseudogradient, AdditiveOverExamples) {
    Rng rng(19);
    const BaseModel m = random_model({5, 6, 4}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0, 1}, 2, VariantConfig{}, 1e-2, rng);
    randomize(p, rng);
    const auto batch = random_batch(m, 3, rng);
    const Normalizer norm = fit_normalizer(m, random_batch(m, 10, rng), p.groups);
    for (std::size_t l : {0u, 1u}) {
        const Matrix all = pseudogradient(p, l, factors_for(m, l, batch), norm);
        Matrix sum(all.rows(), all.cols());
        for (const auto& e : batch) {
            const std::vector<LabeledExample> one{e};
            axpy(1.0, pseudogradient(p, l, factors_for(m, l, one), norm).values(), sum.values());
        }
        EXPECT_LE(relative_error(all.values(), sum.values()), 1e-12);
    }
}

TEST(Pseudogradient, WrongLayerFactorsRejected) {
    Rng rng(20);
    const BaseModel m = random_model({5, 6, 4}, rng);
    const auto p = init_editor(m, std::vector<std::size_t>{0, 1}, 2, raw_variant(), 1e-2, rng);
    EXPECT_THROW(pseudogradient(p, 0, factors_for(m, 1, random_batch(m, 1, rng)), Normalizer{}), ContractError);
}

TEST(ApplyEdit, SaturatedCorrectLabelLeavesModelUnchanged) {
    std::vector<DenseLayer> layers{{Matrix{{1, 0}, {0, 1}}, Vector(2), Activation::relu},
                                   {Matrix{{100, 0}, {0, -100}}, Vector(2), Activation::identity}};
    const BaseModel m(layers);
    Rng rng(21);
    const auto p = init_editor(m, std::vector<std::size_t>{0, 1}, 1, raw_variant(), 0.5, rng);
    const BaseModel e = apply_edit(m, p, Normalizer{}, std::vector<LabeledExample>{{Vector{1.0, 1.0}, 0}});
    for (std::size_t l = 0; l < 2; ++l)
        EXPECT_LE(relative_error(e.layer(l).weight.values(), m.layer(l).weight.values()), 1e-12);
}

TEST(ApplyEdit, IdentityPriorIsOneSgdStep) {
    Rng rng(22);
    const BaseModel m = random_model({6, 7, 5, 4}, rng);
    const std::vector<std::size_t> editable{0, 2};
    const double eta = 0.05;
    const auto p = init_editor(m, editable, 2, raw_variant(), eta, rng);
    const auto batch = random_batch(m, 3, rng);
    const BaseModel e = apply_edit(m, p, Normalizer{}, batch);
    const auto g = backward_nll(m, forward(m, inputs_of(batch)), labels_of(batch)).grads;
    for (std::size_t l = 0; l < 3; ++l) {
        const bool edited = l != 1;
        for (std::size_t i = 0; i < m.layer(l).weight.size(); ++i) {
            const double expect = m.layer(l).weight.values()[i] - (edited ? eta * g.weight[l].values()[i] : 0.0);
            EXPECT_NEAR(e.layer(l).weight.values()[i], expect, 1e-12);
        }
        EXPECT_EQ(e.layer(l).bias, m.layer(l).bias);
    }
}

TEST(ApplyEdit, BatchEqualsSumOfParts) {
    Rng rng(23);
    const BaseModel m = random_model({5, 6, 4}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0, 1}, 2, VariantConfig{}, 0.1, rng);
    randomize(p, rng);
    const Normalizer norm = fit_normalizer(m, random_batch(m, 10, rng), p.groups);
    const auto batch = random_batch(m, 4, rng);
    const auto whole = compute_edit(m, p, norm, batch);
    for (std::size_t slot = 0; slot < 2; ++slot) {
        Matrix sum(whole.layers[slot].pseudogradient.rows(), whole.layers[slot].pseudogradient.cols());
        for (const auto& e : batch) {
            const std::vector<LabeledExample> one{e};
            axpy(1.0, compute_edit(m, p, norm, one).layers[slot].pseudogradient.values(), sum.values());
        }
        EXPECT_LE(relative_error(sum.values(), whole.layers[slot].pseudogradient.values()), 1e-12);
    }
}

TEST(ApplyEdit, ZeroStepSizeKeepsPredictionsExactly) {
    Rng rng(24);
    const BaseModel m = random_model({5, 6, 4}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0, 1}, 2, raw_variant(), 0.0, rng);
    const BaseModel e = apply_edit(m, p, Normalizer{}, random_batch(m, 2, rng));
    for (int i = 0; i < 20; ++i) {
        const Vector x = random_vector(5, rng);
        EXPECT_EQ(kl_divergence(logits(m, x), logits(e, x)), 0.0);
    }
}

TEST(ApplyEdit, EmptyBatchRejectedAndSourceUntouched) {
    Rng rng(25);
    const BaseModel m = random_model({5, 4}, rng);
    const BaseModel copy = m;
    const auto p = init_editor(m, std::vector<std::size_t>{0}, 1, raw_variant(), 0.1, rng);
    EXPECT_THROW(apply_edit(m, p, Normalizer{}, std::vector<LabeledExample>{}), ContractError);
    (void)apply_edit(m, p, Normalizer{}, random_batch(m, 2, rng));
    EXPECT_TRUE(m.same_parameters(copy));
}

TEST(EditorCheckpoint, RoundTripIsExact) {
    Rng rng(26);
    const BaseModel m = random_model({6, 5, 5, 3}, rng);
    auto p = init_editor(m, std::vector<std::size_t>{0, 1, 2}, 2, variant_by_name("only_smaller"), 0.1, rng);
    randomize(p, rng);
    const Normalizer norm = fit_normalizer(m, random_batch(m, 8, rng), p.groups);
    const auto path = std::filesystem::temp_directory_path() / "mend_test_editor.json";
    save_editor(p, norm, path);
    const auto ck = load_editor(path);
    EXPECT_EQ(ck.params, p);
    EXPECT_EQ(ck.normalizer, norm);
    std::filesystem::remove(path);
    EXPECT_THROW(editor_from_json(io::json{{"format", "mend-editor"}, {"version", 2}}), DataError);
}
