#include "pelab/toeplitz.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "pelab/errors.hpp"
#include "pelab/rng.hpp"

namespace pelab {

namespace {
constexpr double kPi = std::numbers::pi;
}

ToeplitzView::ToeplitzView(std::size_t n_, std::vector<double> coeffs_)
    : n(n_), coeffs(std::move(coeffs_)) {
    if (coeffs.size() != 2 * n - 1) {
        throw DimensionError("ToeplitzView: need 2N-1 coefficients, got " +
                             std::to_string(coeffs.size()));
    }
}

Mat ToeplitzView::materialize() const {
    Mat t(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            t(i, j) = coeff(static_cast<long long>(i) - static_cast<long long>(j));
    return t;
}

Mat toeplitz_from_sequence(const std::vector<double>& coeffs, std::size_t n) {
    return ToeplitzView(n, coeffs).materialize();
}

std::vector<double> extract_diagonals(const Mat& m) {
    if (!m.square()) throw DimensionError("extract_diagonals: matrix must be square");
    const std::size_t n = m.rows;
    std::vector<double> coeffs(2 * n - 1, 0.0);
    for (long long k = -(long long)(n - 1); k <= (long long)(n - 1); ++k) {
        const std::size_t i = k >= 0 ? static_cast<std::size_t>(k) : 0;
        const std::size_t j = k >= 0 ? 0 : static_cast<std::size_t>(-k);
        coeffs[static_cast<std::size_t>(k + (long long)n - 1)] = m(i, j);
    }
    return coeffs;
}

ToeplitzCheck check_toeplitz(const Mat& m, double tol) {
    if (!m.square()) throw DimensionError("check_toeplitz: matrix must be square");
    const std::size_t n = m.rows;
    double deviation = 0.0;
    for (long long k = -(long long)(n - 1); k <= (long long)(n - 1); ++k) {
        const std::size_t i0 = k >= 0 ? static_cast<std::size_t>(k) : 0;
        const std::size_t j0 = k >= 0 ? 0 : static_cast<std::size_t>(-k);
        const std::size_t len = n - (k >= 0 ? i0 : j0);
        bool all_equal = true;
        double mn = std::numeric_limits<double>::infinity();
        double mx = -std::numeric_limits<double>::infinity();
        const double first = m(i0, j0);
        for (std::size_t s = 0; s < len; ++s) {
            const double v = m(i0 + s, j0 + s);
            if (v != first) all_equal = false;
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        if (all_equal) continue;  // exact diagonal, including +-inf entries
        deviation = std::max(deviation, mx - mn);
    }
    return {deviation, deviation <= tol};
}

GramDecomposition gram_decompose(const Mat& qc, const Mat& qp, const Mat& kc, const Mat& kp) {
    const std::size_t l = qc.rows, d = qc.cols;
    for (const Mat* m : {&qp, &kc, &kp}) {
        if (m->rows != l || m->cols != d) {
            throw DimensionError("gram_decompose: all parts must be L x d");
        }
    }
    auto gram = [&](const Mat& x, const Mat& y) {
        Mat g(l, l);
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t j = 0; j < l; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < d; ++t) s += x(i, t) * y(j, t);
                g(i, j) = s;
            }
        return g;
    };
    GramDecomposition out;
    out.g_cc = gram(qc, kc);
    out.g_cp = gram(qc, kp);
    out.g_pc = gram(qp, kc);
    out.g_pp = gram(qp, kp);
    out.sum = Mat(l, l);
    for (std::size_t i = 0; i < l * l; ++i)
        out.sum.a[i] = out.g_cc.a[i] + out.g_cp.a[i] + out.g_pc.a[i] + out.g_pp.a[i];
    return out;
}

DiagonalStats diagonal_stats(const Mat& m) {
    if (!m.square()) throw DimensionError("diagonal_stats: matrix must be square");
    const std::size_t n = m.rows;
    DiagonalStats st;
    double abs_sum = 0.0;
    for (long long k = -(long long)(n - 1); k <= (long long)(n - 1); ++k) {
        const std::size_t i0 = k >= 0 ? static_cast<std::size_t>(k) : 0;
        const std::size_t j0 = k >= 0 ? 0 : static_cast<std::size_t>(-k);
        const std::size_t len = n - (k >= 0 ? i0 : j0);
        double sum = 0.0;
        double mn = std::numeric_limits<double>::infinity();
        double mx = -mn;
        for (std::size_t s = 0; s < len; ++s) {
            const double v = m(i0 + s, j0 + s);
            sum += v;
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        const double mean = sum / static_cast<double>(len);
        double var = 0.0;
        for (std::size_t s = 0; s < len; ++s) {
            const double d = m(i0 + s, j0 + s) - mean;
            var += d * d;
        }
        var /= static_cast<double>(len);
        st.max_stddev = std::max(st.max_stddev, std::sqrt(var));
        st.max_range = std::max(st.max_range, mx - mn);
    }
    for (double v : m.a) abs_sum += std::abs(v);
    st.mean_abs = abs_sum / static_cast<double>(m.a.size());
    return st;
}

// ---- symbol -----------------------------------------------------------------

namespace {

double eval_symbol(const std::vector<double>& coeffs, std::size_t n, double theta) {
    // Hermitian real sequence: a(e^{i t}) = a_0 + 2 sum_{k>=1} a_k cos(k t)
    const std::size_t mid = n - 1;
    double v = coeffs[mid];
    for (std::size_t k = 1; k < n; ++k) {
        v += 2.0 * coeffs[mid + k] * std::cos(static_cast<double>(k) * theta);
    }
    return v;
}

// Golden-section refinement of f around [lo, hi].
template <typename F>
double golden_max(F&& f, double lo, double hi, int iters = 80) {
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
    double f1 = f(x1), f2 = f(x2);
    for (int i = 0; i < iters; ++i) {
        if (f1 < f2) {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        }
    }
    return std::max(f1, f2);
}

template <typename F>
double refined_extremum(F&& f, std::size_t grid, bool want_max) {
    std::vector<double> vals(grid);
    const double step = 2.0 * kPi / static_cast<double>(grid);
    for (std::size_t i = 0; i < grid; ++i) {
        const double v = f(step * static_cast<double>(i));
        vals[i] = want_max ? v : -v;
    }
    // refine around the best 8 grid points
    std::vector<std::size_t> idx(grid);
    for (std::size_t i = 0; i < grid; ++i) idx[i] = i;
    std::partial_sort(idx.begin(), idx.begin() + std::min<std::size_t>(8, grid), idx.end(),
                      [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < std::min<std::size_t>(8, grid); ++r) {
        const double center = step * static_cast<double>(idx[r]);
        const double local = golden_max(
            [&](double t) { return want_max ? f(t) : -f(t); }, center - step, center + step);
        best = std::max(best, local);
    }
    return want_max ? best : -best;
}

}  // namespace

SymbolScan symbol_eval(const std::vector<double>& coeffs, std::size_t n, std::size_t grid) {
    if (coeffs.empty() || n == 0 || coeffs.size() != 2 * n - 1) {
        throw ConfigError("symbol_eval: need a non-empty 2N-1 coefficient sequence");
    }
    SymbolScan scan;
    scan.grid_values.resize(grid);
    const double step = 2.0 * kPi / static_cast<double>(grid);
    for (std::size_t i = 0; i < grid; ++i) {
        scan.grid_values[i] = eval_symbol(coeffs, n, step * static_cast<double>(i));
    }
    auto f = [&](double t) { return eval_symbol(coeffs, n, t); };
    scan.max_value = refined_extremum(f, grid, true);
    scan.min_value = refined_extremum(f, grid, false);
    return scan;
}

// ---- cyclic Jacobi ------------------------------------------------------------

namespace {

constexpr int kJacobiMaxSweeps = 100;
constexpr double kJacobiOffTol = 1e-12;

void jacobi_inplace(Mat& a, Mat* v) {
    const std::size_t n = a.rows;
    if (v) {
        *v = Mat(n, n);
        for (std::size_t i = 0; i < n; ++i) (*v)(i, i) = 1.0;
    }
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a(i, i)));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) scale = std::max(scale, std::abs(a(i, j)));
    if (scale == 0.0) return;
    const double tol = kJacobiOffTol * scale;

    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off = std::max(off, std::abs(a(i, j)));
        if (off <= tol) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= tol * 1e-3) continue;
                const double app = a(p, p), aqq = a(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - s * aqi;
                    a(q, i) = s * api + c * aqi;
                }
                if (v) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const double vip = (*v)(i, p), viq = (*v)(i, q);
                        (*v)(i, p) = c * vip - s * viq;
                        (*v)(i, q) = s * vip + c * viq;
                    }
                }
            }
        }
    }
}

}  // namespace

std::vector<double> symmetric_eigenvalues(const Mat& m) {
    if (!m.square()) throw DimensionError("symmetric_eigenvalues: matrix must be square");
    Mat a = m;
    jacobi_inplace(a, nullptr);
    std::vector<double> vals(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) vals[i] = a(i, i);
    std::sort(vals.begin(), vals.end());
    return vals;
}

EigenDecomposition symmetric_eigen(const Mat& m) {
    if (!m.square()) throw DimensionError("symmetric_eigen: matrix must be square");
    Mat a = m;
    Mat v;
    jacobi_inplace(a, &v);
    EigenDecomposition out;
    out.values.resize(m.rows);
    std::vector<std::size_t> order(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        out.values[i] = a(i, i);
        order[i] = i;
    }
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return out.values[x] < out.values[y]; });
    EigenDecomposition sorted;
    sorted.values.resize(m.rows);
    sorted.vectors = Mat(m.rows, m.rows);
    for (std::size_t c = 0; c < m.rows; ++c) {
        sorted.values[c] = out.values[order[c]];
        for (std::size_t r = 0; r < m.rows; ++r) sorted.vectors(r, c) = v(r, order[c]);
    }
    return sorted;
}

std::vector<double> hermitian_eigenvalues(const CMat& m, double herm_tol) {
    if (!m.square()) throw DimensionError("hermitian_eigenvalues: matrix must be square");
    const std::size_t n = m.rows;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const auto d = m(i, j) - std::conj(m(j, i));
            if (std::abs(d) > herm_tol) {
                throw ContractError("hermitian_eigenvalues: matrix is not Hermitian within tol");
            }
        }
    }
    // real-symmetric embedding [[X, -Y], [Y, X]]; eigenvalues appear twice
    Mat e(2 * n, 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double x = 0.5 * (m(i, j).real() + m(j, i).real());
            const double y = 0.5 * (m(i, j).imag() - m(j, i).imag());
            e(i, j) = x;
            e(i + n, j + n) = x;
            e(i, j + n) = -y;
            e(i + n, j) = y;
        }
    }
    std::vector<double> doubled = symmetric_eigenvalues(e);
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = 0.5 * (doubled[2 * i] + doubled[2 * i + 1]);
    return vals;
}

SpectralReport spectral_report(const Mat& m, const std::vector<double>& symbol_coeffs) {
    SpectralReport rep;
    rep.eigenvalues = symmetric_eigenvalues(m);
    const std::size_t n = (symbol_coeffs.size() + 1) / 2;
    SymbolScan scan = symbol_eval(symbol_coeffs, n);
    rep.symbol_min = scan.min_value;
    rep.symbol_max = scan.max_value;
    rep.diagonal_deviation = diagonal_stats(m).max_stddev;
    return rep;
}

std::string SpectralReport::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"symbol_min\":" << symbol_min << ",\"symbol_max\":" << symbol_max
       << ",\"diagonal_deviation\":" << diagonal_deviation << ",\"eigenvalues\":[";
    for (std::size_t i = 0; i < eigenvalues.size(); ++i)
        os << (i ? "," : "") << eigenvalues[i];
    os << "]}";
    return os.str();
}

std::vector<SzegoPoint> szego_check(const std::vector<double>& symmetric_coeffs,
                                    const std::vector<std::size_t>& n_list) {
    std::vector<SzegoPoint> out;
    for (std::size_t n : n_list) {
        // the symmetric coefficient pool is centered; rebuild a 2n-1 window
        const std::size_t pool_n = (symmetric_coeffs.size() + 1) / 2;
        std::vector<double> window(2 * n - 1, 0.0);
        for (long long k = -(long long)(n - 1); k <= (long long)(n - 1); ++k) {
            const std::size_t uk = static_cast<std::size_t>(std::llabs(k));
            const double v =
                uk < pool_n ? symmetric_coeffs[(pool_n - 1) + uk] : 0.0;
            window[static_cast<std::size_t>(k + (long long)n - 1)] = v;
        }
        Mat t = toeplitz_from_sequence(window, n);
        std::vector<double> eig = symmetric_eigenvalues(t);
        SymbolScan scan = symbol_eval(window, n);
        SzegoPoint p;
        p.n = n;
        p.lambda_min = eig.front();
        p.lambda_max = eig.back();
        p.symbol_min = scan.min_value;
        p.symbol_max = scan.max_value;
        p.containment_margin =
            std::min(p.lambda_min - p.symbol_min, p.symbol_max - p.lambda_max);
        out.push_back(p);
    }
    return out;
}

AmplitudeBoundResult amplitude_bound_check(const std::vector<double>& weights,
                                           const std::vector<double>& phases,
                                           std::size_t grid, double align_tol) {
    if (weights.size() != phases.size()) {
        throw DimensionError("amplitude_bound_check: weights/phases length mismatch");
    }
    for (double w : weights) {
        if (w < 0.0) throw ContractError("amplitude_bound_check: weights must be non-negative");
    }
    const std::size_t n = weights.size();
    AmplitudeBoundResult res;
    for (double w : weights) res.weight_sum += w;

    auto f = [&](double theta) {
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            v += 2.0 * weights[i] *
                 std::cos(static_cast<double>(i) * phases[i] + static_cast<double>(i) * theta);
        return std::abs(v);
    };
    auto g = [&](double theta) {
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            v += 2.0 * weights[i] * std::cos(static_cast<double>(i) * theta);
        return std::abs(v);
    };
    res.max_f = refined_extremum(f, grid, true);
    res.max_g = refined_extremum(g, grid, true);

    // alignment over terms that actually depend on their phase (i >= 1, w > 0)
    bool aligned = true;
    bool have_ref = false;
    double ref = 0.0;
    const double two_pi = 2.0 * kPi;
    for (std::size_t i = 1; i < n; ++i) {
        if (weights[i] <= 0.0) continue;
        double p = std::fmod(phases[i], two_pi);
        if (p < 0) p += two_pi;
        if (!have_ref) {
            ref = p;
            have_ref = true;
            continue;
        }
        double d = std::abs(p - ref);
        d = std::min(d, two_pi - d);
        if (d > align_tol) aligned = false;
    }
    res.aligned = aligned;
    return res;
}

HadamardContraction hadamard_contraction(const Mat& w,
                                         const std::vector<std::complex<double>>& e_upper) {
    if (!w.square()) throw DimensionError("hadamard_contraction: W must be square");
    const std::size_t n = w.rows;
    if (e_upper.size() != n) {
        throw DimensionError("hadamard_contraction: need N kernel coefficients");
    }
    if (std::abs(e_upper[0] - 1.0) > 1e-12) {
        throw ContractError("hadamard_contraction: e_0 must be 1 (unit diagonal)");
    }
    ToeplitzCheck wc = check_toeplitz(w, 1e-10);
    if (!wc.is_toeplitz) throw ContractError("hadamard_contraction: W is not Toeplitz");
    std::vector<double> eig_w = symmetric_eigenvalues(w);
    if (eig_w.front() < -1e-9) {
        throw ContractError("hadamard_contraction: W is not positive semidefinite");
    }
    auto entry = [&](std::size_t i, std::size_t j) {
        const long long k = static_cast<long long>(i) - static_cast<long long>(j);
        const std::complex<double> e = e_upper[static_cast<std::size_t>(std::llabs(k))];
        return k >= 0 ? e : std::conj(e);
    };
    CMat kernel(n, n), prod(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            kernel(i, j) = entry(i, j);
            prod(i, j) = w(i, j) * kernel(i, j);
        }
    }
    std::vector<double> eig_e = hermitian_eigenvalues(kernel);
    if (eig_e.front() < -1e-8) {
        throw ContractError("hadamard_contraction: kernel E is not positive semidefinite");
    }
    std::vector<double> eig_p = hermitian_eigenvalues(prod);
    HadamardContraction out;
    out.rho_w = std::max(std::abs(eig_w.front()), std::abs(eig_w.back()));
    out.rho_product = std::max(std::abs(eig_p.front()), std::abs(eig_p.back()));
    return out;
}

Mat random_psd_toeplitz(std::size_t n, Rng& rng, std::size_t num_atoms) {
    std::vector<double> coeffs(2 * n - 1, 0.0);
    for (std::size_t p = 0; p < num_atoms; ++p) {
        const double rho = rng.uniform(0.05, 1.0);
        const double phi = rng.uniform(0.0, 2.0 * kPi);
        for (long long k = -(long long)(n - 1); k <= (long long)(n - 1); ++k) {
            coeffs[static_cast<std::size_t>(k + (long long)n - 1)] +=
                rho * std::cos(static_cast<double>(k) * phi);
        }
    }
    return toeplitz_from_sequence(coeffs, n);
}

std::vector<std::complex<double>> rope_gram_kernel(std::size_t n,
                                                   const std::vector<double>& thetas,
                                                   const std::vector<double>& weights) {
    if (thetas.empty() || thetas.size() != weights.size()) {
        throw ConfigError("rope_gram_kernel: need matching frequency/weight lists");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ContractError("rope_gram_kernel: weights must be non-negative");
        wsum += w;
    }
    if (wsum <= 0.0) throw ContractError("rope_gram_kernel: weights must not all vanish");
    std::vector<std::complex<double>> coeffs(n);
    for (std::size_t d = 0; d < n; ++d) {
        std::complex<double> z = 0.0;
        for (std::size_t t = 0; t < thetas.size(); ++t) {
            z += weights[t] *
                 std::exp(std::complex<double>(0.0, static_cast<double>(d) * thetas[t]));
        }
        coeffs[d] = z / wsum;
    }
    return coeffs;
}

}  // namespace pelab
