#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "itkd/detector.hpp"
#include "itkd/ops.hpp"
#include "itkd/optim.hpp"

namespace itkd {

enum class BufferDirection { StudentToTeacher, TeacherToStudent, Midpoint };
enum class ReconMode { Interchange, SelfRecon };
enum class AxisPolicy { HeadObjectAllChannel, FormulaLiteralChannel };
enum class BaselineKd { None, HintonKl, PlainL1 };

struct DistillConfig {
    double alpha = 1.0;
    double beta = 1.0;
    bool loss_it = true;
    bool loss_cr = true;
    bool loss_attn = true;
    ReconMode recon = ReconMode::Interchange;
    AxisPolicy axis_policy = AxisPolicy::HeadObjectAllChannel;
    BufferDirection buffer = BufferDirection::StudentToTeacher;
    bool shared_autoencoder = true;
    std::vector<int> enc_filters;  // empty: scaled from the autoencoder width
    std::vector<int> dec_filters;
    BaselineKd baseline = BaselineKd::None;
    double temperature = 2.0;

    void validate() const {
        if (!(alpha > 0.0) || !(beta > 0.0))
            throw ConfigError(msg("distill: alpha and beta must be positive, got ", alpha, ", ", beta));
        if (enc_filters.size() != 0 && enc_filters.size() != 3)
            throw ConfigError("distill: encoder needs exactly three filter counts");
        if (dec_filters.size() != 0 && dec_filters.size() != 3)
            throw ConfigError("distill: decoder needs exactly three filter counts");
        if (temperature <= 0.0)
            throw ConfigError(msg("distill: temperature must be positive, got ", temperature));
    }
};

/// Width the shared autoencoder operates at for a given buffer policy.
inline int autoencoder_width(BufferDirection dir, int c_t, int c_s) {
    switch (dir) {
        case BufferDirection::StudentToTeacher: return c_t;
        case BufferDirection::TeacherToStudent: return c_s;
        case BufferDirection::Midpoint: return (c_t + c_s) / 2;
    }
    return c_t;
}

/// Filter counts follow the published ratios, scaled to the working width:
/// encoder {W/2, W/4, W/8} declining, decoder mirrored and ending at W.
inline std::vector<int> default_enc_filters(int width) {
    return {std::max(1, width / 2), std::max(1, width / 4), std::max(1, width / 8)};
}

inline std::vector<int> default_dec_filters(int width) {
    return {std::max(1, width / 4), std::max(1, width / 2), width};
}

struct Conv1x1 {
    Parameter w, b;

    Tensor operator()(const Tensor& x) const { return conv2d(x, w.tensor, b.tensor, 1); }
};

struct AutoencoderParams {
    std::array<Conv1x1, 3> enc;
    std::array<Conv1x1, 3> dec;
    int width = 0;       // input width == decoder output width
    int bottleneck = 0;  // encoder output channels

    std::vector<Parameter> all() const {
        std::vector<Parameter> out;
        for (const auto& c : enc) {
            out.push_back(c.w);
            out.push_back(c.b);
        }
        for (const auto& c : dec) {
            out.push_back(c.w);
            out.push_back(c.b);
        }
        return out;
    }
};

/// 1x1 channel-mapping layers aligning student/teacher widths with the
/// autoencoder width. Absent entries mean the widths already agree.
struct BufferParams {
    std::optional<Conv1x1> in_student;      // C_s -> W
    std::optional<Conv1x1> in_teacher;      // C_t -> W
    std::optional<Conv1x1> out_to_student;  // W -> C_s
    std::optional<Conv1x1> out_to_teacher;  // W -> C_t

    std::vector<Parameter> all() const {
        std::vector<Parameter> out;
        for (const auto* c : {&in_student, &in_teacher, &out_to_student, &out_to_teacher})
            if (c->has_value()) {
                out.push_back((*c)->w);
                out.push_back((*c)->b);
            }
        return out;
    }
};

struct FusionParams {
    Parameter w;  // [2*C_all, C_all]
    Parameter b;  // [C_all]
    int c_all = 0;
};

struct DistillModules {
    DistillConfig cfg;
    int c_t = 0, c_s = 0, width = 0;
    AutoencoderParams ae;                         // shared, or the teacher-path copy
    std::optional<AutoencoderParams> ae_student;  // present only when non-shared
    BufferParams buffers;
    FusionParams fusion;

    const AutoencoderParams& teacher_ae() const { return ae; }
    const AutoencoderParams& student_ae() const { return ae_student ? *ae_student : ae; }

    std::vector<Parameter> trainable() const {
        std::vector<Parameter> out = ae.all();
        if (ae_student) {
            auto s = ae_student->all();
            out.insert(out.end(), s.begin(), s.end());
        }
        auto bufs = buffers.all();
        out.insert(out.end(), bufs.begin(), bufs.end());
        out.push_back(fusion.w);
        out.push_back(fusion.b);
        return out;
    }
};

inline AutoencoderParams make_autoencoder(const std::string& prefix, int width,
                                          std::vector<int> enc_f, std::vector<int> dec_f,
                                          ParamInit& init) {
    if (dec_f[2] != width)
        throw ConfigError(msg("distill: decoder must end at the autoencoder width ", width,
                              ", got ", dec_f[2]));
    AutoencoderParams ae;
    ae.width = width;
    ae.bottleneck = enc_f[2];
    int in = width;
    for (int i = 0; i < 3; ++i) {
        std::string name = prefix + "/enc" + std::to_string(i + 1);
        ae.enc[std::size_t(i)] = {init.he_normal(name + "/w", {enc_f[std::size_t(i)], in, 1, 1}, in),
                                  init.constant(name + "/b", {enc_f[std::size_t(i)]}, 0.0)};
        in = enc_f[std::size_t(i)];
    }
    for (int i = 0; i < 3; ++i) {
        std::string name = prefix + "/dec" + std::to_string(i + 1);
        ae.dec[std::size_t(i)] = {init.he_normal(name + "/w", {dec_f[std::size_t(i)], in, 1, 1}, in),
                                  init.constant(name + "/b", {dec_f[std::size_t(i)]}, 0.0)};
        in = dec_f[std::size_t(i)];
    }
    return ae;
}

inline DistillModules make_distill_modules(const DistillConfig& cfg, int c_t, int c_s,
                                           int k_classes, std::uint64_t seed) {
    cfg.validate();
    DistillModules m;
    m.cfg = cfg;
    m.c_t = c_t;
    m.c_s = c_s;
    m.width = autoencoder_width(cfg.buffer, c_t, c_s);

    auto enc_f = cfg.enc_filters.empty() ? default_enc_filters(m.width) : cfg.enc_filters;
    auto dec_f = cfg.dec_filters.empty() ? default_dec_filters(m.width) : cfg.dec_filters;

    ParamInit init(seed);
    if (cfg.shared_autoencoder) {
        m.ae = make_autoencoder("kd/ae", m.width, enc_f, dec_f, init);
    } else {
        m.ae = make_autoencoder("kd/ae_teacher", m.width, enc_f, dec_f, init);
        m.ae_student = make_autoencoder("kd/ae_student", m.width, enc_f, dec_f, init);
    }

    auto buf = [&](const std::string& name, int co, int ci) {
        return Conv1x1{init.he_normal("kd/buffer/" + name + "/w", {co, ci, 1, 1}, ci),
                       init.constant("kd/buffer/" + name + "/b", {co}, 0.0)};
    };
    if (c_s != m.width) m.buffers.in_student = buf("in_student", m.width, c_s);
    if (c_t != m.width) m.buffers.in_teacher = buf("in_teacher", m.width, c_t);
    if (c_s != m.width) m.buffers.out_to_student = buf("out_to_student", c_s, m.width);
    if (c_t != m.width) m.buffers.out_to_teacher = buf("out_to_teacher", c_t, m.width);

    int c_all = k_classes + 2 + 1 + 3 + 2;
    m.fusion.c_all = c_all;
    m.fusion.w = init.he_normal("kd/fusion/w", {2 * c_all, c_all}, 2 * c_all);
    m.fusion.b = init.constant("kd/fusion/b", {c_all}, 0.0);
    return m;
}

// ---------------------------------------------------------------------------
// Feature-space losses (compressed representation + interchange transfer)
// ---------------------------------------------------------------------------

/// Lifts the student map-view feature to the autoencoder width (identity if
/// the policy already matches widths).
inline Tensor buffer_student(const Tensor& m_s, const DistillModules& m) {
    if (m_s.dim(0) != m.c_s)
        throw ShapeError(msg("buffer_student: expected ", m.c_s, " channels, got ",
                             shape_str(m_s.shape())));
    return m.buffers.in_student ? (*m.buffers.in_student)(m_s) : m_s;
}

inline Tensor buffer_teacher(const Tensor& m_t, const DistillModules& m) {
    if (m_t.dim(0) != m.c_t)
        throw ShapeError(msg("buffer_teacher: expected ", m.c_t, " channels, got ",
                             shape_str(m_t.shape())));
    return m.buffers.in_teacher ? (*m.buffers.in_teacher)(m_t) : m_t;
}

/// Three 1x1 conv + relu stages with declining filter counts; spatial
/// dimensions are preserved (compression happens along channels only).
inline Tensor encode_shared(const Tensor& x, const AutoencoderParams& ae) {
    if (x.dim(0) != ae.width)
        throw ShapeError(msg("encode_shared: expected ", ae.width, " channels, got ",
                             shape_str(x.shape())));
    Tensor h = x;
    for (const auto& stage : ae.enc) h = relu(stage(h));
    return h;
}

/// Three 1x1 conv stages with rising filter counts; relu between stages,
/// linear final stage back at the autoencoder width.
inline Tensor decode_shared(const Tensor& x, const AutoencoderParams& ae) {
    if (x.dim(0) != ae.bottleneck)
        throw ShapeError(msg("decode_shared: expected ", ae.bottleneck, " channels, got ",
                             shape_str(x.shape())));
    Tensor h = relu(ae.dec[0](x));
    h = relu(ae.dec[1](h));
    return ae.dec[2](h);
}

inline Tensor mean_l1(const Tensor& a, const Tensor& b) { return mean(abs(sub(a, b))); }

struct FeatureLosses {
    Tensor cr;   // compressed representation loss
    Tensor t2s;  // reconstruction compared against the student map
    Tensor s2t;  // reconstruction compared against the teacher map
    Tensor it;   // t2s + s2t
};

/// Computes the enabled feature-space losses in one pass so the encoder
/// outputs are shared between them. The teacher map must be detached; the
/// shared autoencoder and buffers receive gradients from both branches.
inline FeatureLosses feature_losses(const Tensor& m_t, const Tensor& m_s,
                                    const DistillModules& m, bool want_cr, bool want_it) {
    if (m_t.dim(1) != m_s.dim(1) || m_t.dim(2) != m_s.dim(2))
        throw ShapeError(msg("feature losses: spatial dims differ, ", shape_str(m_t.shape()),
                             " vs ", shape_str(m_s.shape())));
    FeatureLosses out;
    if (!want_cr && !want_it) return out;

    Tensor in_t = buffer_teacher(m_t, m);
    Tensor in_s = buffer_student(m_s, m);
    Tensor enc_t = encode_shared(in_t, m.teacher_ae());
    Tensor enc_s = encode_shared(in_s, m.student_ae());

    if (want_cr) out.cr = mean_l1(enc_t, enc_s);

    if (want_it) {
        Tensor rec_t = decode_shared(enc_t, m.teacher_ae());
        Tensor rec_s = decode_shared(enc_s, m.student_ae());
        auto to_student = [&](const Tensor& x) {
            return m.buffers.out_to_student ? (*m.buffers.out_to_student)(x) : x;
        };
        auto to_teacher = [&](const Tensor& x) {
            return m.buffers.out_to_teacher ? (*m.buffers.out_to_teacher)(x) : x;
        };
        if (m.cfg.recon == ReconMode::Interchange) {
            // each reconstruction is validated by the opposite network's map
            out.t2s = mean_l1(m_s, to_student(rec_t));
            out.s2t = mean_l1(m_t, to_teacher(rec_s));
        } else {
            // self-reconstruction comparator: each decoder output goes back
            // against its own source map
            out.t2s = mean_l1(m_s, to_student(rec_s));
            out.s2t = mean_l1(m_t, to_teacher(rec_t));
        }
        out.it = add(out.t2s, out.s2t);
    }
    return out;
}

inline Tensor compressed_representation_loss(const Tensor& m_t, const Tensor& m_s,
                                             const DistillModules& m) {
    return feature_losses(m_t, m_s, m, true, false).cr;
}

inline FeatureLosses interchange_transfer_loss(const Tensor& m_t, const Tensor& m_s,
                                               const DistillModules& m) {
    return feature_losses(m_t, m_s, m, false, true);
}

// ---------------------------------------------------------------------------
// Head feature sequences and relation-aware self-attention
// ---------------------------------------------------------------------------

/// Per-head object feature sequences gathered at ground-truth center cells,
/// in canonical (cell index) order. L rows, head-channel columns.
struct HeadSequenceSet {
    int L = 0;
    Tensor hm, o, h, s, r;
    Tensor all;  // channel concatenation, L x (K+2+1+3+2)
};

inline HeadSequenceSet extract_sequences(const HeadOutputs& out,
                                         const std::vector<GtObject>& objects) {
    HeadSequenceSet seq;
    seq.L = int(objects.size());
    if (seq.L == 0) return seq;  // caller skips attention for this scene

    std::vector<int> rows;
    rows.reserve(objects.size());
    for (const auto& o : objects) rows.push_back(o.cell_index);

    auto gather = [&](const Tensor& map) {
        int c = map.dim(0);
        std::int64_t hw = std::int64_t(map.dim(1)) * map.dim(2);
        Tensor flat = reshape(map, {c, int(hw)});
        return gather_rows(transpose2d(flat), rows);
    };
    seq.hm = gather(out.hm);
    seq.o = gather(out.offset);
    seq.h = gather(out.height);
    seq.s = gather(out.size);
    seq.r = gather(out.rot);
    seq.all = concat({seq.hm, seq.o, seq.h, seq.s, seq.r}, 1);
    return seq;
}

enum class AttentionAxis { Object, Channel };

/// Scaled dot-product self-attention of a feature sequence with itself.
/// Channel axis: A = row-softmax(v^T v / sqrt(L)), output v*A.
/// Object axis:  A = row-softmax(v v^T / sqrt(L)), output A*v.
/// Both keep the input shape; the scale is sqrt(L) in either case.
inline Tensor self_attention(const Tensor& v, AttentionAxis axis) {
    if (v.rank() != 2 || v.dim(0) < 1)
        throw ShapeError(msg("self_attention: need a non-empty LxC sequence, got ",
                             shape_str(v.shape())));
    double scale = 1.0 / std::sqrt(double(v.dim(0)));
    if (axis == AttentionAxis::Channel) {
        Tensor scores = scalar_mul(matmul(transpose2d(v), v), scale);
        return matmul(v, softmax(scores, 1));
    }
    Tensor scores = scalar_mul(matmul(v, transpose2d(v)), scale);
    return matmul(softmax(scores, 1), v);
}

/// Relation-aware self-attention: per-head attentions concatenated on the
/// channel axis, attention over the concatenated sequence, then the shared
/// 1x1 fusion layer. Under the default policy the per-head attentions use
/// the object axis (which objects a task attends to) and the concatenated
/// branch uses the channel axis (which tasks relate to each other); the
/// formula-literal policy uses the channel axis everywhere.
inline Tensor relation_aware_attention(const HeadSequenceSet& seq, const FusionParams& fusion,
                                       AxisPolicy policy) {
    if (seq.L < 1) throw ShapeError("relation_aware_attention: empty sequence set");
    AttentionAxis per_head = policy == AxisPolicy::HeadObjectAllChannel ? AttentionAxis::Object
                                                                        : AttentionAxis::Channel;
    Tensor f_inter = concat({self_attention(seq.hm, per_head), self_attention(seq.o, per_head),
                             self_attention(seq.h, per_head), self_attention(seq.s, per_head),
                             self_attention(seq.r, per_head)},
                            1);
    Tensor f_intra = self_attention(seq.all, AttentionAxis::Channel);
    Tensor fused_in = concat({f_inter, f_intra}, 1);
    return add(matmul(fused_in, fusion.w.tensor), fusion.b.tensor);
}

/// Attentive head loss: mean-l1 between teacher and student relation-aware
/// attention outputs. Teacher sequences must already be detached values;
/// the shared fusion layer still receives gradients from both branches.
inline Tensor attentive_head_loss(const HeadSequenceSet& teacher_seq,
                                  const HeadSequenceSet& student_seq,
                                  const FusionParams& fusion, AxisPolicy policy) {
    if (teacher_seq.L != student_seq.L)
        throw ShapeError(msg("attentive_head_loss: teacher has ", teacher_seq.L,
                             " objects, student has ", student_seq.L));
    if (teacher_seq.L == 0) return Tensor::scalar(0.0);
    Tensor f_t = relation_aware_attention(teacher_seq, fusion, policy);
    Tensor f_s = relation_aware_attention(student_seq, fusion, policy);
    return mean_l1(f_t, f_s);
}

// ---------------------------------------------------------------------------
// Total loss and baseline head-KD comparators
// ---------------------------------------------------------------------------

struct LossComponents {
    Tensor sup;
    Tensor it;
    Tensor cr;
    Tensor attn;
    Tensor baseline;
};

/// L_total = alpha * L_sup + beta * (sum of enabled KD components).
inline Tensor total_loss(const LossComponents& c, const DistillConfig& cfg) {
    Tensor total = scalar_mul(c.sup, cfg.alpha);
    Tensor kd;
    auto accumulate = [&](const Tensor& t) { kd = kd.defined() ? add(kd, t) : t; };
    if (cfg.loss_it && c.it.defined()) accumulate(c.it);
    if (cfg.loss_cr && c.cr.defined()) accumulate(c.cr);
    if (cfg.loss_attn && c.attn.defined()) accumulate(c.attn);
    if (cfg.baseline != BaselineKd::None && c.baseline.defined()) accumulate(c.baseline);
    if (kd.defined()) total = add(total, scalar_mul(kd, cfg.beta));
    return total;
}

/// Head-KD baselines. hinton-kl: KL divergence between temperature-softened
/// per-cell class distributions of the sigmoid heatmaps, plus mean-l1 on the
/// regression heads. plain-l1: mean-l1 on all five heads.
inline Tensor baseline_head_kd(const HeadOutputs& teacher, const HeadOutputs& student,
                               BaselineKd kind, double temperature) {
    if (kind == BaselineKd::None) throw Error("baseline_head_kd: kind must not be 'none'");
    auto t_heads = teacher.list();
    auto s_heads = student.list();
    for (int i = 0; i < 5; ++i)
        if (t_heads[std::size_t(i)]->shape() != s_heads[std::size_t(i)]->shape())
            throw ShapeError(msg("baseline_head_kd: head ", kHeadNames[std::size_t(i)],
                                 " shapes differ, ", shape_str(t_heads[std::size_t(i)]->shape()),
                                 " vs ", shape_str(s_heads[std::size_t(i)]->shape())));

    if (kind == BaselineKd::PlainL1) {
        Tensor loss = mean_l1(*t_heads[0], *s_heads[0]);
        for (int i = 1; i < 5; ++i) loss = add(loss, mean_l1(*t_heads[std::size_t(i)], *s_heads[std::size_t(i)]));
        return loss;
    }

    // hinton-kl on the heatmap head
    int k = teacher.hm.dim(0);
    std::int64_t hw = std::int64_t(teacher.hm.dim(1)) * teacher.hm.dim(2);
    auto soften = [&](const Tensor& hm) {
        Tensor per_cell = transpose2d(reshape(sigmoid(hm), {k, int(hw)}));  // HW x K
        return softmax(scalar_mul(per_cell, 1.0 / temperature), 1);
    };
    Tensor p_t = soften(teacher.hm);
    Tensor p_s = soften(student.hm);
    Tensor kl_terms = mul(p_t, sub(log(p_t), log(p_s)));
    Tensor loss = scalar_mul(sum(kl_terms), 1.0 / double(hw));
    for (int i = 1; i < 5; ++i) loss = add(loss, mean_l1(*t_heads[std::size_t(i)], *s_heads[std::size_t(i)]));
    return loss;
}

}  // namespace itkd
