#include <gtest/gtest.h>

#include "itkd/ops.hpp"
#include "test_util.hpp"

using namespace itkd;
using test_util::random_tensor;

TEST(Softmax, SymmetricPairSplitsEvenly) {
    Tensor x = Tensor::from_values({1, 2}, {0.0, 0.0});
    Tensor y = softmax(x, 1);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.5);
    EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
}

TEST(Softmax, AxisOutOfRange) {
    Tensor x = Tensor::zeros({2, 2});
    EXPECT_THROW(softmax(x, 2), ShapeError);
    EXPECT_THROW(softmax(x, -1), ShapeError);
}

TEST(Softmax, RowsSumToOneAndPositive) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        int m = 1 + int(rng.uniform_int(6)), n = 1 + int(rng.uniform_int(6));
        Tensor x = random_tensor({m, n}, rng, 3.0);
        for (int axis : {0, 1}) {
            Tensor y = softmax(x, axis);
            int lines = axis == 1 ? m : n;
            int len = axis == 1 ? n : m;
            for (int l = 0; l < lines; ++l) {
                double sum = 0.0;
                for (int i = 0; i < len; ++i) {
                    double v = axis == 1 ? y.values()[std::size_t(l * n + i)]
                                         : y.values()[std::size_t(i * n + l)];
                    EXPECT_GT(v, 0.0);
                    sum += v;
                }
                EXPECT_NEAR(sum, 1.0, 1e-9);
            }
        }
    }
}

TEST(Elementwise, AbsThenMean) {
    Tensor x = Tensor::from_values({2, 2}, {1.0, -2.0, 0.0, 1.0});
    EXPECT_DOUBLE_EQ(mean(abs(x)).scalar_value(), 1.0);
}

TEST(Conv2d, OneByOneScalesIdentity) {
    Tensor x = Tensor::filled({1, 2, 2}, 1.0);
    Tensor w = Tensor::from_values({1, 1, 1, 1}, {2.0});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(x, w, b, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
    for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Conv2d, ShapeErrorsNameThePrimitive) {
    Tensor x = Tensor::zeros({3, 4, 4});
    Tensor w = Tensor::zeros({2, 5, 3, 3});  // wants 5 input channels
    try {
        conv2d(x, w, 1);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("5"), std::string::npos);
    }
    EXPECT_THROW(conv2d(x, Tensor::zeros({2, 3, 2, 2}), 1), ShapeError);  // kernel 2x2
    EXPECT_THROW(conv2d(x, Tensor::zeros({2, 3, 3, 3}), 3), ShapeError);  // stride 3
}

TEST(Matmul, MismatchNamesDims) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string m = e.what();
        EXPECT_NE(m.find("matmul"), std::string::npos);
        EXPECT_NE(m.find("[2x3]"), std::string::npos);
        EXPECT_NE(m.find("[4x2]"), std::string::npos);
    }
}

TEST(Add, BiasBroadcastForms) {
    // row bias on a matrix
    Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_values({2}, {10, 20});
    Tensor y = add(m, b);
    EXPECT_DOUBLE_EQ(y.values()[0], 11);
    EXPECT_DOUBLE_EQ(y.values()[3], 24);
    // channel bias on a map
    Tensor map = Tensor::zeros({2, 2, 2});
    Tensor cb = Tensor::from_values({2}, {1, -1});
    Tensor z = add(map, cb);
    EXPECT_DOUBLE_EQ(z.values()[0], 1);
    EXPECT_DOUBLE_EQ(z.values()[7], -1);
    // anything else is rejected
    EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
    EXPECT_THROW(sub(Tensor::zeros({2, 3}), Tensor::zeros({3})), ShapeError);
}

TEST(Concat, RegionsRecoverInputsBitExactly) {
    Rng rng(3);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 2}, rng);
    Tensor cat1 = concat({a, b}, 1);
    for (int r = 0; r < 2; ++r) {
        for (int j = 0; j < 3; ++j)
            EXPECT_EQ(cat1.values()[std::size_t(r * 5 + j)], a.values()[std::size_t(r * 3 + j)]);
        for (int j = 0; j < 2; ++j)
            EXPECT_EQ(cat1.values()[std::size_t(r * 5 + 3 + j)], b.values()[std::size_t(r * 2 + j)]);
    }
    Tensor c = random_tensor({3, 4}, rng);
    Tensor d = random_tensor({1, 4}, rng);
    Tensor cat0 = concat({c, d}, 0);
    for (int i = 0; i < 12; ++i) EXPECT_EQ(cat0.values()[std::size_t(i)], c.values()[std::size_t(i)]);
    for (int i = 0; i < 4; ++i)
        EXPECT_EQ(cat0.values()[std::size_t(12 + i)], d.values()[std::size_t(i)]);
    EXPECT_THROW(concat({a, c}, 1), ShapeError);
}

TEST(GatherRows, SelectsAndValidates) {
    Tensor x = Tensor::from_values({3, 2}, {0, 1, 2, 3, 4, 5});
    Tensor y = gather_rows(x, {2, 0});
    EXPECT_DOUBLE_EQ(y.values()[0], 4);
    EXPECT_DOUBLE_EQ(y.values()[3], 1);
    EXPECT_THROW(gather_rows(x, {3}), ShapeError);
}

TEST(Upsample, NearestRepeat) {
    Tensor x = Tensor::from_values({1, 2, 2}, {1, 2, 3, 4});
    Tensor y = upsample2x(x);
    ASSERT_EQ(y.shape(), (Shape{1, 4, 4}));
    EXPECT_DOUBLE_EQ(y.values()[0], 1);
    EXPECT_DOUBLE_EQ(y.values()[1], 1);
    EXPECT_DOUBLE_EQ(y.values()[5], 1);
    EXPECT_DOUBLE_EQ(y.values()[10], 4);
}

TEST(Clamp, BoundsAndValidation) {
    Tensor x = Tensor::from_values({3}, {-2.0, 0.5, 7.0});
    Tensor y = clamp(x, 0.0, 1.0);
    EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
    EXPECT_DOUBLE_EQ(y.values()[1], 0.5);
    EXPECT_DOUBLE_EQ(y.values()[2], 1.0);
    EXPECT_THROW(clamp(x, 1.0, 0.0), Error);
}

// Reference conv written as the plainest possible loop nest; the tiled
// production kernels must agree exactly.
static std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b,
                                      int stride) {
    int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int co = w.dim(0), k = w.dim(2);
    int pad = k == 3 ? 1 : 0;
    int ho = (h + 2 * pad - k) / stride + 1;
    int wo = (wd + 2 * pad - k) / stride + 1;
    std::vector<double> out(std::size_t(co) * std::size_t(ho) * std::size_t(wo), 0.0);
    for (int oc = 0; oc < co; ++oc)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double acc = b.defined() ? b.values()[std::size_t(oc)] : 0.0;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int iy = oy * stride + ky - pad;
                            int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            acc += w.values()[std::size_t(((oc * ci + ic) * k + ky) * k + kx)] *
                                   x.values()[std::size_t((ic * h + iy) * wd + ix)];
                        }
                out[std::size_t((oc * ho + oy) * wo + ox)] = acc;
            }
    return out;
}

TEST(Conv2d, MatchesNaiveReferenceAcrossVariants) {
    Rng rng(11);
    struct Case {
        int ci, h, w, co, k, stride;
    };
    std::vector<Case> cases = {{3, 9, 9, 4, 3, 1}, {5, 8, 8, 2, 1, 1}, {4, 10, 10, 3, 3, 2},
                               {2, 7, 7, 6, 1, 2}, {1, 5, 5, 1, 3, 1}, {8, 16, 16, 4, 3, 1}};
    for (const auto& c : cases) {
        Tensor x = random_tensor({c.ci, c.h, c.w}, rng);
        Tensor w = random_tensor({c.co, c.ci, c.k, c.k}, rng);
        Tensor b = random_tensor({c.co}, rng);
        Tensor y = conv2d(x, w, b, c.stride);
        auto ref = naive_conv(x, w, b, c.stride);
        ASSERT_EQ(y.values().size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i)
            EXPECT_NEAR(y.values()[i], ref[i], 1e-12) << "case k=" << c.k << " s=" << c.stride;
    }
}

TEST(Determinism, SameGraphSameBits) {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor({4, 8, 8}, rng);
        Tensor w = random_tensor({4, 4, 3, 3}, rng);
        Tensor b = random_tensor({4}, rng);
        Tensor y = relu(conv2d(x, w, b, 1));
        Tensor flat = reshape(y, {4, 64});
        return mean(softmax(flat, 1)).scalar_value();
    };
    EXPECT_EQ(run(42), run(42));
}

TEST(ApplyPrimitive, DispatchesEveryKind) {
    Rng rng(5);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);
    Tensor map = random_tensor({2, 4, 4}, rng);
    Tensor w1 = random_tensor({2, 2, 1, 1}, rng);

    auto call1 = [](Primitive p, const Tensor& t, PrimAttrs attrs = {}) {
        std::vector<Tensor> in{t};
        return apply_primitive(p, in, attrs);
    };
    auto call2 = [](Primitive p, const Tensor& t, const Tensor& u, PrimAttrs attrs = {}) {
        std::vector<Tensor> in{t, u};
        return apply_primitive(p, in, attrs);
    };

    EXPECT_EQ(call2(Primitive::Add, a, b).values()[0], add(a, b).values()[0]);
    EXPECT_EQ(call2(Primitive::Sub, a, b).values()[0], sub(a, b).values()[0]);
    EXPECT_EQ(call2(Primitive::Mul, a, b).values()[0], mul(a, b).values()[0]);
    EXPECT_EQ(call2(Primitive::Matmul, a, b).values()[0], matmul(a, b).values()[0]);
    EXPECT_EQ(call1(Primitive::Relu, a).values()[0], relu(a).values()[0]);
    EXPECT_EQ(call1(Primitive::Sigmoid, a).values()[0], sigmoid(a).values()[0]);
    EXPECT_EQ(call1(Primitive::Exp, a).values()[0], itkd::exp(a).values()[0]);
    EXPECT_EQ(call1(Primitive::Abs, a).values()[0], abs(a).values()[0]);
    EXPECT_EQ(call1(Primitive::Mean, a).values()[0], mean(a).values()[0]);
    EXPECT_EQ(call1(Primitive::Sum, a).values()[0], sum(a).values()[0]);
    EXPECT_EQ(call1(Primitive::Transpose2d, a).values()[1], transpose2d(a).values()[1]);
    PrimAttrs sm;
    sm.axis = 1;
    EXPECT_EQ(call1(Primitive::Softmax, a, sm).values()[0], softmax(a, 1).values()[0]);
    PrimAttrs sc;
    sc.scalar = 2.5;
    EXPECT_EQ(call1(Primitive::ScalarMul, a, sc).values()[0], scalar_mul(a, 2.5).values()[0]);
    PrimAttrs cl;
    cl.lo = -0.1;
    cl.hi = 0.1;
    EXPECT_EQ(call1(Primitive::Clamp, a, cl).values()[0], clamp(a, -0.1, 0.1).values()[0]);
    PrimAttrs gr;
    gr.rows = {1, 0};
    EXPECT_EQ(call1(Primitive::GatherRows, a, gr).values()[0], gather_rows(a, {1, 0}).values()[0]);
    PrimAttrs cc;
    cc.axis = 0;
    EXPECT_EQ(call2(Primitive::Concat, a, b, cc).values()[9], concat({a, b}, 0).values()[9]);
    PrimAttrs cv;
    cv.stride = 1;
    EXPECT_EQ(call2(Primitive::Conv2d, map, w1, cv).values()[0], conv2d(map, w1, 1).values()[0]);
    EXPECT_EQ(call1(Primitive::Upsample2x, map).values()[0], upsample2x(map).values()[0]);
    EXPECT_EQ(call1(Primitive::Log, abs(a)).values()[0], log(abs(a)).values()[0]);
    EXPECT_THROW(primitive_from_string("nope"), Error);
    EXPECT_EQ(int(primitive_from_string("softmax-along-axis")), int(Primitive::Softmax));
}

TEST(Tensor, RawValuesOnlyOnLeaves) {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    Tensor y = relu(x);
    EXPECT_NO_THROW(x.raw_values());
    EXPECT_THROW(y.raw_values(), Error);
    EXPECT_THROW(Tensor::from_values({2}, {1.0}), ShapeError);
}
