#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pelab/dense.hpp"
#include "pelab/model.hpp"
#include "pelab/tasks.hpp"

namespace pelab {

// ---- softmax gradient calculus -------------------------------------------------

// dS_j = A_j (Lambda_j - <Lambda, A>) for one softmax row. Throws
// ContractError when A is not a probability vector within tol.
std::vector<double> softmax_grad_identity(const std::vector<double>& a_row,
                                          const std::vector<double>& lambda_row,
                                          double norm_tol = 1e-9);

struct AnchorGain {
    double parallel = 0.0;  // component of J^T e_j* along e_j*: A(1-A)
    double perp = 0.0;      // norm of the orthogonal remainder, <= parallel
};

AnchorGain anchor_gain(const std::vector<double>& a_row, std::size_t j_star);

// ---- anchor gradients on a live model --------------------------------------------

struct AnchorSpec {
    std::size_t sample = 0;
    std::size_t anchor_row = 0;     // u_s: the readout position
    std::size_t target_column = 0;  // j_s: the later trigger position
    std::size_t distance = 0;
};

struct AnchorGradients {
    std::vector<AnchorSpec> anchors;
    std::vector<double> values;  // dLoss_s/dS at (u_s, j_s), one per sample

    // H(d): sum over samples at distance d; nullopt marks an empty bucket.
    std::optional<double> aggregate(std::size_t d) const;
    std::vector<std::size_t> distances() const;
};

// Runs an eval-mode forward with per-sample losses (sum-reduced cross
// entropy) and extracts the pre-softmax score gradients at each sample's
// anchor edge for the given layer/head.
AnchorGradients anchor_gradients(const Model32& model, const Dataset& batch, std::size_t layer,
                                 std::size_t head, std::size_t micro_batch = 64);

// ---- seed lower bound ---------------------------------------------------------------

struct SeedParams {
    double a_star = 0.0;    // min anchor attention at distance d
    double eta_star = 0.0;  // min anchor signal at distance d
    double c_const = 0.0;   // ||W_O|| * sup ||V|| * sup ||dLoss/dy||
    double chi = 0.0;       // max row 2-norm of the attention rows
    double mu_hat = 0.0;    // empirical measure of distance d
    std::size_t n = 0;      // batch size
    bool eta_positive = true;  // A2 held on this batch
};

// N * mu_hat(d) * (a* eta* - C chi); positive iff a* eta* > C chi.
double rope_seed_lower_bound(const SeedParams& p);

// Measures every SeedParams input from the model on the batch restricted to
// distance d. eta_star may come out non-positive; that is recorded, not
// forced.
SeedParams measure_seed_params(const Model32& model, const Dataset& batch, std::size_t layer,
                               std::size_t head, std::size_t d, std::size_t micro_batch = 64);

// ---- constructive ALiBi cancellation -------------------------------------------------

struct CancellationDims {
    std::size_t d_model = 8;
    std::size_t d_qk = 4;
    std::size_t d_v = 4;
    std::size_t seq_len = 12;
};

struct CancellationResult {
    double max_pair_prob_diff = 0.0;   // attention matrices of each pair
    double min_sample_magnitude = 0.0; // per-sample |anchor gradient|
    double max_pair_sum = 0.0;         // |paired anchor gradients summed|
    double h_aggregate = 0.0;          // H(d) over the whole batch
    std::size_t distance = 0;
    std::size_t n_pairs = 0;
};

// Builds W_Q, W_K with a common left-kernel vector t (W_V t != 0), emits
// paired samples (x0 + t) / (x0 - t) at the anchor position, and measures
// the paired anchor gradients under an ALiBi-biased attention head.
CancellationResult alibi_cancellation_batch(const CancellationDims& dims, std::size_t distance,
                                            std::size_t n_pairs, std::uint64_t seed);

// Matched contrast: the same pairing under a rotary head. The kernel surgery
// has no rotary analog (a direction invisible to the scores is invisible to
// the position pathway too), so the generic projections stay and the anchor
// gradients survive.
CancellationResult rope_contrast_batch(const CancellationDims& dims, std::size_t distance,
                                       std::size_t n_pairs, std::uint64_t seed);

// ---- SNR / margin amplification --------------------------------------------------------

struct JacobianChain {
    std::size_t dim = 0;
    std::size_t u_dim = 0;  // leading coordinates span the seed subspace
    std::vector<Mat> jacobians;
    std::vector<double> gains;  // per-layer gamma
};

// J_l = blockdiag(gamma * O_U, O_perp) with random orthogonal blocks;
// mix_u=false keeps O_U = I so per-head coordinates stay invariant.
JacobianChain build_gain_chain(std::size_t dim, std::size_t u_dim, std::size_t layers,
                               double gamma, std::uint64_t seed, bool mix_u = true);

// Largest/smallest singular values of each chain Jacobian (for the A1 check).
std::pair<double, double> singular_range(const Mat& m);

struct SnrPoint {
    double snr = 0.0;     // +inf sentinel when the perp component vanishes
    double margin = 0.0;  // gap between the top two |coordinates| inside U
};

// Iterates g <- J^T g from the top layer down and reports per-layer SNR and
// margin. Output index 0 is the top (input g), index L the bottom.
std::vector<SnrPoint> snr_amplification_sim(const JacobianChain& chain,
                                            const std::vector<double>& g_top);

// ---- deposit kernel -------------------------------------------------------------------

struct DepositKernel {
    std::vector<std::size_t> distances;  // bucket keys, ascending
    std::vector<double> kappa;           // mean anchor gradient per bucket
    std::vector<std::size_t> counts;
    double residual = 0.0;   // max_d |H(d) - N mu_hat(d) kappa(d)|
    double affine_r2 = 0.0;  // least-squares fit kappa ~ a + b*Delta
};

DepositKernel deposit_kernel(const AnchorGradients& grads);

// ---- massive-value diagnostic ------------------------------------------------------------

struct RowNormReport {
    std::vector<double> norms;
    std::vector<std::size_t> outliers;  // rows above median + 4 IQR
    double median = 0.0;
    double iqr = 0.0;
};

RowNormReport massive_value_rownorms(const Mat& w);
RowNormReport massive_value_rownorms(const Tensor32& w);

// Spectral norm via the Gram route (Jacobi on W^T W).
double spectral_norm(const Mat& w);

}  // namespace pelab
