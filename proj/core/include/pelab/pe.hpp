#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pelab/dense.hpp"
#include "pelab/errors.hpp"

namespace pelab {

enum class PeKind {
    NoPe,
    AbsoluteSinusoidal,
    RandomLearned,
    RelativeT5,
    Alibi,
    Rope,
    PartialRope,
    HybridAbsRope,
    Mla,
};

std::string pe_kind_name(PeKind kind);
PeKind pe_kind_from_name(const std::string& name);

struct MlaDims {
    std::size_t d_nope = 0;      // per-head no-position path width
    std::size_t d_rope = 0;      // per-head rotary path width (even)
    std::size_t d_compress = 0;  // key/value bottleneck
};

// Declarative PE condition. Validation happens against the model dims that
// will host it.
struct PeSpec {
    PeKind kind = PeKind::NoPe;
    double rope_theta_base = 10000.0;
    std::vector<double> alibi_slopes;              // empty: geometric rule 2^(-8h/H)
    std::size_t rel_max_offset = 0;                // 0: derived as max_len-1
    bool rel_log_bucketing = false;
    std::vector<std::size_t> partial_rope_heads;   // per layer, entries in [0, num_heads]
    MlaDims mla;

    bool uses_rope() const {
        return kind == PeKind::Rope || kind == PeKind::PartialRope ||
               kind == PeKind::HybridAbsRope || kind == PeKind::Mla;
    }
    bool adds_sinusoidal() const {
        return kind == PeKind::AbsoluteSinusoidal || kind == PeKind::HybridAbsRope;
    }

    void validate(std::size_t num_layers, std::size_t num_heads, std::size_t d_head) const;

    std::string to_json() const;
    static PeSpec from_json(const std::string& text);
};

// ---- absolute sinusoidal ----------------------------------------------------

// table[i][2t] = sin(i / 10000^(2t/d)), table[i][2t+1] = cos(i / 10000^(2t/d)).
Mat sinusoidal_table(std::size_t max_len, std::size_t d_model);

// ---- ALiBi -------------------------------------------------------------------

// Geometric slope rule m_h = 2^(-8h/H), h = 1..H.
std::vector<double> alibi_slopes_geometric(std::size_t num_heads);

// bias_h[i][j] = -m_h*(i-j) for j <= i, -inf above the diagonal.
std::vector<Mat> alibi_bias(std::size_t num_heads, std::size_t seq_len,
                            const std::vector<double>& slopes);

// ---- RoPE --------------------------------------------------------------------

// Per-frequency angles theta_t = base^(-2t/d_head) with cached cos/sin per
// position.
struct RopeKernel {
    std::size_t d_head = 0;
    std::size_t max_len = 0;
    double theta_base = 10000.0;
    std::vector<double> theta;      // [d_head/2]
    std::vector<double> cos_table;  // [max_len * d_head/2]
    std::vector<double> sin_table;  // [max_len * d_head/2]

    static RopeKernel build(std::size_t d_head, std::size_t max_len,
                            double theta_base = 10000.0);

    double cos_at(std::size_t pos, std::size_t t) const {
        return cos_table[pos * (d_head / 2) + t];
    }
    double sin_at(std::size_t pos, std::size_t t) const {
        return sin_table[pos * (d_head / 2) + t];
    }
};

// Pairwise 2-D rotation of coordinates (2t, 2t+1) by pos * theta_t.
std::vector<double> rope_rotate(const std::vector<double>& x, std::size_t pos,
                                const RopeKernel& kernel);

// Same rotation with a signed position (needed for relative offsets j - i).
std::vector<double> rope_rotate_signed(const std::vector<double>& x, long long pos,
                                       const RopeKernel& kernel);

// ---- logit constructions ------------------------------------------------------

struct AdditiveLogits {
    Mat total;
    Mat g_cc, g_cp, g_pc, g_pp;
    Mat bias;
};

// Sum of the four Gram components plus an optional Toeplitz bias; the addends
// are returned separately for inspection. Throws ContractError when the bias
// is not Toeplitz.
AdditiveLogits build_logits_additive(const Mat& qc, const Mat& qp, const Mat& kc, const Mat& kp,
                                     const Mat* bias = nullptr);

// logit[i][j] = <rotate(q_i, i), rotate(k_j, j)>.
Mat build_logits_rope(const Mat& q, const Mat& k, const RopeKernel& kernel);

// ---- MLA reference logit -------------------------------------------------------

struct MlaQkWeights {
    Mat w_uq;  // [d_nope x d_model]
    Mat w_uk;  // [d_nope x d_model]
    Mat w_ur;  // [d_rope x d_model], shared by the query and key rope paths
};

// <W_UQ x_i, W_UK x_j> + <R_i W_UR x_i, R_j W_UR x_j>; the concatenated-vector
// inner product evaluated through its two halves.
double mla_qk(const std::vector<double>& x_i, const std::vector<double>& x_j,
              const MlaQkWeights& weights, std::size_t i, std::size_t j,
              const RopeKernel& rope_kernel);

}  // namespace pelab
