// Shared helpers for the test suites.
#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <utility>
#include <vector>

#include "itkd/autodiff.hpp"
#include "itkd/distill.hpp"
#include "itkd/rng.hpp"
#include "kd_oracle.hpp"

namespace test_util {

inline itkd::Tensor random_tensor(itkd::Shape shape, itkd::Rng& rng, double scale = 1.0,
                                  bool requires_grad = false) {
    std::vector<double> v(std::size_t(itkd::numel(shape)));
    for (auto& x : v) x = rng.normal(0.0, scale);
    return itkd::Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

struct FdCase {
    std::function<itkd::Tensor()> build;
    std::vector<itkd::FdLeaf> leaves;
};

/// Runs the finite-difference check, resampling the instance (new seed) when
/// the forward pass lands on a relu/abs/clamp kink.
inline void expect_gradcheck(const std::function<FdCase(std::uint64_t)>& make_case, double tol,
                             std::uint64_t seed0 = 1000, int tries = 10) {
    for (int t = 0; t < tries; ++t) {
        FdCase c = make_case(seed0 + std::uint64_t(t));
        auto rep = itkd::finite_diff_check(c.build, c.leaves, 1e-5, 1e-4);
        if (rep.kink_excluded) continue;
        EXPECT_LT(rep.max_rel_err, tol)
            << "worst leaf " << rep.worst_leaf << "[" << rep.worst_index << "]";
        return;
    }
    FAIL() << "all candidate instances sat on activation kinks";
}

// ---------------------------------------------------------------------------
// Bridges between framework parameters and the scalar oracle
// ---------------------------------------------------------------------------

inline kd_oracle::Conv1x1W to_oracle(const itkd::Conv1x1& c) {
    kd_oracle::Conv1x1W out;
    int co = c.w.tensor.dim(0), ci = c.w.tensor.dim(1);
    out.w = kd_oracle::Mat(co, ci);
    auto wv = c.w.tensor.values();
    std::copy(wv.begin(), wv.end(), out.w.v.begin());
    auto bv = c.b.tensor.values();
    out.b.assign(bv.begin(), bv.end());
    return out;
}

inline kd_oracle::Autoencoder to_oracle(const itkd::AutoencoderParams& ae) {
    return {to_oracle(ae.enc[0]), to_oracle(ae.enc[1]), to_oracle(ae.enc[2]),
            to_oracle(ae.dec[0]), to_oracle(ae.dec[1]), to_oracle(ae.dec[2])};
}

inline kd_oracle::Map to_oracle_map(const itkd::Tensor& t) {
    kd_oracle::Map m(t.dim(0), t.dim(1), t.dim(2));
    auto v = t.values();
    std::copy(v.begin(), v.end(), m.v.begin());
    return m;
}

inline kd_oracle::Mat to_oracle_mat(const itkd::Tensor& t) {
    kd_oracle::Mat m(t.dim(0), t.dim(1));
    auto v = t.values();
    std::copy(v.begin(), v.end(), m.v.begin());
    return m;
}

inline kd_oracle::Fusion to_oracle(const itkd::FusionParams& f) {
    kd_oracle::Fusion g;
    g.w = to_oracle_mat(f.w.tensor);
    auto bv = f.b.tensor.values();
    g.b.assign(bv.begin(), bv.end());
    return g;
}

/// Applies the optional in/out buffers the same way the framework does, in
/// oracle space.
inline kd_oracle::Map oracle_apply(const std::optional<itkd::Conv1x1>& buf,
                                   const kd_oracle::Map& x) {
    if (!buf) return x;
    return kd_oracle::conv1x1(x, to_oracle(*buf), false);
}

struct OracleFeatureLosses {
    double cr = 0.0, t2s = 0.0, s2t = 0.0, it = 0.0;
};

/// Scalar mirror of the framework's feature_losses (Eqs. 1-4 plus the
/// self-reconstruction comparator).
inline OracleFeatureLosses oracle_feature_losses(const kd_oracle::Map& m_t,
                                                 const kd_oracle::Map& m_s,
                                                 const itkd::DistillModules& mods) {
    using namespace kd_oracle;
    Autoencoder ae_t = to_oracle(mods.teacher_ae());
    Autoencoder ae_s = to_oracle(mods.student_ae());
    Map in_t = oracle_apply(mods.buffers.in_teacher, m_t);
    Map in_s = oracle_apply(mods.buffers.in_student, m_s);
    Map enc_t = encode(in_t, ae_t);
    Map enc_s = encode(in_s, ae_s);
    OracleFeatureLosses out;
    out.cr = mean_abs_diff(enc_t, enc_s);
    Map rec_t = decode(enc_t, ae_t);
    Map rec_s = decode(enc_s, ae_s);
    if (mods.cfg.recon == itkd::ReconMode::Interchange) {
        out.t2s = mean_abs_diff(m_s, oracle_apply(mods.buffers.out_to_student, rec_t));
        out.s2t = mean_abs_diff(m_t, oracle_apply(mods.buffers.out_to_teacher, rec_s));
    } else {
        out.t2s = mean_abs_diff(m_s, oracle_apply(mods.buffers.out_to_student, rec_s));
        out.s2t = mean_abs_diff(m_t, oracle_apply(mods.buffers.out_to_teacher, rec_t));
    }
    out.it = out.t2s + out.s2t;
    return out;
}

}  // namespace test_util
