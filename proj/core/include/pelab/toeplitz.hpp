#pragma once

#include <complex>
#include <cstddef>
#include <string>
#include <vector>

#include "pelab/dense.hpp"

namespace pelab {

// Coefficients a_k for k in [-(N-1), N-1]; coeffs[k + N - 1] holds a_k.
struct ToeplitzView {
    std::size_t n = 0;
    std::vector<double> coeffs;

    ToeplitzView() = default;
    ToeplitzView(std::size_t n_, std::vector<double> coeffs_);

    double coeff(long long k) const { return coeffs[static_cast<std::size_t>(k + (long long)n - 1)]; }
    Mat materialize() const;  // T[i][j] = a_{i-j}
};

Mat toeplitz_from_sequence(const std::vector<double>& coeffs, std::size_t n);

// Extracts the diagonal coefficient sequence of an (exactly) Toeplitz matrix.
std::vector<double> extract_diagonals(const Mat& m);

struct ToeplitzCheck {
    double deviation = 0.0;  // max over diagonals of (max - min) on the diagonal
    bool is_toeplitz = false;
};

// Diagonals whose entries are all identical (including +-inf) count as exact.
ToeplitzCheck check_toeplitz(const Mat& m, double tol);

struct GramDecomposition {
    Mat g_cc, g_cp, g_pc, g_pp;
    Mat sum;  // the four addends combined
};

GramDecomposition gram_decompose(const Mat& qc, const Mat& qp, const Mat& kc, const Mat& kp);

// Diagonal deviation statistic for quasi-Toeplitz measurement: max over
// diagonals of the stddev of entries, and the mean |entry| for normalizing.
struct DiagonalStats {
    double max_stddev = 0.0;
    double max_range = 0.0;
    double mean_abs = 0.0;
};
DiagonalStats diagonal_stats(const Mat& m);

// ---- symbol / spectra ----------------------------------------------------------

struct SymbolScan {
    std::vector<double> grid_values;  // symbol samples on the uniform grid
    double min_value = 0.0;           // refined extrema
    double max_value = 0.0;
};

// a(e^{i theta}) = sum a_k e^{ik theta} for a Hermitian coefficient sequence
// (real symbol). Uniform grid of `grid` points plus golden-section refinement
// around the best candidates.
SymbolScan symbol_eval(const std::vector<double>& coeffs, std::size_t n, std::size_t grid = 4096);

// Cyclic Jacobi eigensolver for real symmetric matrices.
std::vector<double> symmetric_eigenvalues(const Mat& m);
// Hermitian matrices go through the real-symmetric embedding [[X,-Y],[Y,X]].
std::vector<double> hermitian_eigenvalues(const CMat& m, double herm_tol = 1e-10);

// Jacobi with eigenvectors; columns of `vectors` are eigenvectors.
struct EigenDecomposition {
    std::vector<double> values;
    Mat vectors;
};
EigenDecomposition symmetric_eigen(const Mat& m);

struct SpectralReport {
    std::vector<double> eigenvalues;  // ascending
    double symbol_min = 0.0;
    double symbol_max = 0.0;
    double diagonal_deviation = 0.0;  // max over diagonals of entry stddev
    std::string to_json() const;
};

SpectralReport spectral_report(const Mat& m, const std::vector<double>& symbol_coeffs);

struct SzegoPoint {
    std::size_t n = 0;
    double lambda_min = 0.0, lambda_max = 0.0;
    double symbol_min = 0.0, symbol_max = 0.0;
    double containment_margin = 0.0;  // min(lmin - smin, smax - lmax)
};

// For T_N(a) over an N ladder, reports how the eigenvalue extremes approach
// the symbol range. `coeff_fn(k)` supplies a_k for |k| < N.
std::vector<SzegoPoint> szego_check(const std::vector<double>& symmetric_coeffs,
                                    const std::vector<std::size_t>& n_list);

// ---- amplitude bound (f vs g) ---------------------------------------------------

struct AmplitudeBoundResult {
    double max_f = 0.0;
    double max_g = 0.0;    // equals 2*sum(w) up to grid tolerance
    double weight_sum = 0.0;
    bool aligned = false;  // all phases with index>=1 and positive weight equal mod 2pi
};

// f(theta) = sum 2 w_i cos(i*theta_i + i*theta), g(theta) = sum 2 w_i cos(i*theta).
AmplitudeBoundResult amplitude_bound_check(const std::vector<double>& weights,
                                           const std::vector<double>& phases,
                                           std::size_t grid = 8192, double align_tol = 1e-9);

// ---- Hadamard contraction ---------------------------------------------------------

struct HadamardContraction {
    double rho_product = 0.0;  // spectral radius of W o E
    double rho_w = 0.0;
};

// W: PSD real symmetric Toeplitz. E: PSD Hermitian Toeplitz with unit
// diagonal, given by its upper coefficients e_k (E_ij = e_{i-j}, e_{-k} =
// conj(e_k), e_0 = 1). Schur's product bound then caps the product's
// spectral radius by rho(W). Throws ContractError when either precondition
// fails.
HadamardContraction hadamard_contraction(const Mat& w,
                                         const std::vector<std::complex<double>>& e_upper);

// Random PSD Toeplitz draw: a_k = sum_p rho_p cos(k*phi_p) with rho_p >= 0.
Mat random_psd_toeplitz(std::size_t n, class Rng& rng, std::size_t num_atoms = 4);

// Rotary Gram kernel as a Toeplitz coefficient sequence: e_D = sum_t c_t
// e^{i D theta_t} with the weights normalized to sum 1. A single frequency
// gives the unit-modulus rank-1 kernel; several give the strictly
// contracting positive-definite kernel.
std::vector<std::complex<double>> rope_gram_kernel(std::size_t n,
                                                   const std::vector<double>& thetas,
                                                   const std::vector<double>& weights);

}  // namespace pelab
