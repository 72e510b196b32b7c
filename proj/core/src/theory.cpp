#include "pelab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pelab/pe.hpp"
#include "pelab/rng.hpp"
#include "pelab/tensor.hpp"
#include "pelab/toeplitz.hpp"

namespace pelab {

// ---- softmax gradient calculus -----------------------------------------------

std::vector<double> softmax_grad_identity(const std::vector<double>& a_row,
                                          const std::vector<double>& lambda_row,
                                          double norm_tol) {
    if (a_row.size() != lambda_row.size()) {
        throw DimensionError("softmax_grad_identity: row lengths differ");
    }
    double sum = 0.0;
    for (double a : a_row) {
        if (a < -norm_tol) throw ContractError("softmax_grad_identity: negative probability");
        sum += a;
    }
    if (std::abs(sum - 1.0) > norm_tol) {
        throw ContractError("softmax_grad_identity: row is not normalized");
    }
    const double lam_dot_a = dot(lambda_row, a_row);
    std::vector<double> ds(a_row.size());
    for (std::size_t j = 0; j < ds.size(); ++j) {
        ds[j] = a_row[j] * (lambda_row[j] - lam_dot_a);
    }
    return ds;
}

AnchorGain anchor_gain(const std::vector<double>& a_row, std::size_t j_star) {
    if (j_star >= a_row.size()) throw IndexError("anchor_gain: j_star out of range");
    const double a = a_row[j_star];
    AnchorGain g;
    g.parallel = a * (1.0 - a);
    // J^T e = a e_{j*} - a A; orthogonal part is -a * A restricted off j*
    double perp_sq = 0.0;
    for (std::size_t k = 0; k < a_row.size(); ++k) {
        if (k == j_star) continue;
        perp_sq += (a * a_row[k]) * (a * a_row[k]);
    }
    g.perp = std::sqrt(perp_sq);
    return g;
}

// ---- anchor gradients on a live model --------------------------------------------

std::optional<double> AnchorGradients::aggregate(std::size_t d) const {
    double sum = 0.0;
    bool seen = false;
    for (std::size_t s = 0; s < anchors.size(); ++s) {
        if (anchors[s].distance == d) {
            sum += values[s];
            seen = true;
        }
    }
    if (!seen) return std::nullopt;
    return sum;
}

std::vector<std::size_t> AnchorGradients::distances() const {
    std::vector<std::size_t> out;
    for (const AnchorSpec& a : anchors) out.push_back(a.distance);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

namespace {

AnchorSpec anchor_of(const SampleRecord& rec, std::size_t sample, std::size_t len) {
    if (rec.positions.size() < 2) {
        throw ContractError("anchor_gradients: sample lacks trigger-position metadata");
    }
    AnchorSpec a;
    a.sample = sample;
    a.anchor_row = len - 1;
    a.target_column = static_cast<std::size_t>(rec.positions.back());
    a.distance = static_cast<std::size_t>(rec.distance);
    return a;
}

}  // namespace

AnchorGradients anchor_gradients(const Model32& model, const Dataset& batch, std::size_t layer,
                                 std::size_t head, std::size_t micro_batch) {
    if (batch.empty()) throw ConfigError("anchor_gradients: empty batch");
    if (layer >= model.config().num_layers || head >= model.config().num_heads) {
        throw IndexError("anchor_gradients: layer/head out of range");
    }
    const std::size_t len = batch.samples.front().tokens.size();
    AnchorGradients out;
    const std::size_t micro = std::max<std::size_t>(1, micro_batch);
    for (std::size_t lo = 0; lo < batch.size(); lo += micro) {
        const std::size_t hi = std::min(batch.size(), lo + micro);
        const std::size_t b = hi - lo;
        std::vector<int> tokens(b * len);
        std::vector<int> labels(b);
        for (std::size_t s = 0; s < b; ++s) {
            const SampleRecord& rec = batch.samples[lo + s];
            std::copy(rec.tokens.begin(), rec.tokens.end(), tokens.begin() + s * len);
            labels[s] = rec.label;
        }
        std::vector<AttnCapture<float>> captures(model.config().num_layers);
        captures[layer].want_score_grads = true;
        Tape32 tape;
        ForwardOptions<float> opts;
        opts.captures = &captures;
        Tensor32 logits = model.forward(&tape, tokens, b, len, opts);
        // sum reduction: the tape then carries dLoss_s/dS per sample slice
        Tensor32 loss = cross_entropy_loss(&tape, logits, labels, Reduction::Sum);
        tape.backward(loss);
        const AttnCapture<float>& cap = captures[layer];
        for (std::size_t s = 0; s < b; ++s) {
            AnchorSpec a = anchor_of(batch.samples[lo + s], lo + s, len);
            out.anchors.push_back(a);
            out.values.push_back(
                static_cast<double>(cap.score_grad(s, head, a.anchor_row, a.target_column)));
        }
    }
    return out;
}

// ---- seed lower bound -------------------------------------------------------------

double rope_seed_lower_bound(const SeedParams& p) {
    return static_cast<double>(p.n) * p.mu_hat * (p.a_star * p.eta_star - p.c_const * p.chi);
}

double spectral_norm(const Mat& w) {
    // sigma_max = sqrt(lambda_max(W^T W))
    Mat gram(w.cols, w.cols);
    for (std::size_t i = 0; i < w.cols; ++i)
        for (std::size_t j = 0; j < w.cols; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < w.rows; ++r) s += w(r, i) * w(r, j);
            gram(i, j) = s;
        }
    std::vector<double> eig = symmetric_eigenvalues(gram);
    return std::sqrt(std::max(0.0, eig.back()));
}

namespace {

Mat tensor_to_mat(const Tensor32& t) {
    Mat m(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.size(); ++i) m.a[i] = static_cast<double>(t.value()[i]);
    return m;
}

}  // namespace

SeedParams measure_seed_params(const Model32& model, const Dataset& batch, std::size_t layer,
                               std::size_t head, std::size_t d, std::size_t micro_batch) {
    if (batch.empty()) throw ConfigError("measure_seed_params: empty batch");
    const ModelConfig& cfg = model.config();
    const std::size_t len = batch.samples.front().tokens.size();
    const std::size_t dv = cfg.d_head();
    SeedParams p;
    p.n = batch.size();
    p.a_star = std::numeric_limits<double>::infinity();
    p.eta_star = std::numeric_limits<double>::infinity();
    double chi = 0.0, sup_v = 0.0, sup_gy = 0.0;
    std::size_t bucket = 0;

    const std::size_t micro = std::max<std::size_t>(1, micro_batch);
    for (std::size_t lo = 0; lo < batch.size(); lo += micro) {
        const std::size_t hi = std::min(batch.size(), lo + micro);
        const std::size_t b = hi - lo;
        std::vector<int> tokens(b * len);
        std::vector<int> labels(b);
        for (std::size_t s = 0; s < b; ++s) {
            const SampleRecord& rec = batch.samples[lo + s];
            std::copy(rec.tokens.begin(), rec.tokens.end(), tokens.begin() + s * len);
            labels[s] = rec.label;
        }
        std::vector<AttnCapture<float>> captures(cfg.num_layers);
        captures[layer].want_probs = true;
        ActivationTap<float> taps;
        Tape32 tape;
        ForwardOptions<float> opts;
        opts.captures = &captures;
        opts.taps = &taps;
        Tensor32 logits = model.forward(&tape, tokens, b, len, opts);
        Tensor32 loss = cross_entropy_loss(&tape, logits, labels, Reduction::Sum);
        tape.backward(loss);

        const AttnCapture<float>& cap = captures[layer];
        const Tensor32& values = taps.values[layer];        // [b*len x H*dv]
        const Tensor32& heads_out = taps.attn_heads[layer]; // [b*len x H*dv]
        for (std::size_t s = 0; s < b; ++s) {
            const SampleRecord& rec = batch.samples[lo + s];
            AnchorSpec a = anchor_of(rec, lo + s, len);
            // chi: sharpest attention row of this head
            for (std::size_t i = 0; i < len; ++i) {
                double row_sq = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double v = cap.prob(s, head, i, j);
                    row_sq += v * v;
                }
                chi = std::max(chi, std::sqrt(row_sq));
            }
            // per-sample value matrix of this head and its spectral norm
            Mat vmat(len, dv);
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t c = 0; c < dv; ++c)
                    vmat(i, c) = static_cast<double>(
                        values.value()[(s * len + i) * cfg.num_heads * dv + head * dv + c]);
            sup_v = std::max(sup_v, spectral_norm(vmat));
            // dLoss_s/dY at the anchor row, this head's slice
            std::vector<double> gy(dv);
            double gy_sq = 0.0;
            for (std::size_t c = 0; c < dv; ++c) {
                gy[c] = static_cast<double>(
                    heads_out.grad()[(s * len + a.anchor_row) * cfg.num_heads * dv +
                                     head * dv + c]);
                gy_sq += gy[c] * gy[c];
            }
            sup_gy = std::max(sup_gy, std::sqrt(gy_sq));
            if (a.distance == d) {
                ++bucket;
                p.a_star = std::min(
                    p.a_star,
                    static_cast<double>(cap.prob(s, head, a.anchor_row, a.target_column)));
                // eta_s = <dLoss/dY_u, V_{j_s}>
                double eta = 0.0;
                for (std::size_t c = 0; c < dv; ++c) {
                    eta += gy[c] *
                           static_cast<double>(
                               values.value()[(s * len + a.target_column) * cfg.num_heads * dv +
                                              head * dv + c]);
                }
                p.eta_star = std::min(p.eta_star, eta);
            }
        }
    }
    if (bucket == 0) throw ConfigError("measure_seed_params: no samples at distance d");
    p.mu_hat = static_cast<double>(bucket) / static_cast<double>(p.n);
    p.chi = chi;
    auto named = model.named_params();
    const Tensor32* wo = nullptr;
    const std::string key = "layers." + std::to_string(layer) + ".wo";
    for (auto& [name, t] : named) {
        if (name == key) wo = t;
    }
    p.c_const = spectral_norm(tensor_to_mat(*wo)) * sup_v * sup_gy;
    p.eta_positive = p.eta_star > 0.0;
    return p;
}

// ---- constructive ALiBi cancellation ------------------------------------------------

namespace {

struct BuiltWeights {
    Tensor64 wq, wk, wv;      // [d_model x d_qk/d_v]
    std::vector<double> t;    // the perturbation direction
    std::vector<std::vector<double>> v_kernel_basis;  // left-kernel of W_V
};

BuiltWeights build_cancellation_weights(const CancellationDims& dims, Rng& rng,
                                        bool project_qk) {
    if (dims.d_v >= dims.d_model || dims.d_model < 2) {
        throw ContractError(
            "cancellation weights: need d_v < d_model so the value map has a left kernel "
            "(projection separability has room)");
    }
    BuiltWeights w;
    auto rand_mat = [&rng](std::size_t r, std::size_t c) {
        Tensor64 m({r, c}, 0.0, true);
        for (auto& v : m.mutable_value()) v = rng.uniform(-1.0, 1.0);
        return m;
    };
    w.wq = rand_mat(dims.d_model, dims.d_qk);
    w.wk = rand_mat(dims.d_model, dims.d_qk);
    w.wv = rand_mat(dims.d_model, dims.d_v);

    // unit direction t
    w.t.resize(dims.d_model);
    double tn = 0.0;
    for (auto& v : w.t) {
        v = rng.normal();
        tn += v * v;
    }
    tn = std::sqrt(tn);
    for (auto& v : w.t) v /= tn;

    if (project_qk) {
        // W <- (I - t t^T) W so t^T W = 0
        for (Tensor64* m : {&w.wq, &w.wk}) {
            for (std::size_t c = 0; c < dims.d_qk; ++c) {
                double proj = 0.0;
                for (std::size_t r = 0; r < dims.d_model; ++r)
                    proj += w.t[r] * m->value()[r * dims.d_qk + c];
                for (std::size_t r = 0; r < dims.d_model; ++r)
                    m->mutable_value()[r * dims.d_qk + c] -= w.t[r] * proj;
            }
        }
    }
    // check W_V t != 0
    double vt = 0.0;
    for (std::size_t c = 0; c < dims.d_v; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < dims.d_model; ++r)
            s += w.t[r] * w.wv.value()[r * dims.d_v + c];
        vt += s * s;
    }
    if (vt < 1e-12) {
        throw ContractError("cancellation weights: t fell into the kernel of W_V");
    }
    // left-kernel basis of W_V from the zero eigenvectors of W_V W_V^T
    Mat gram(dims.d_model, dims.d_model);
    for (std::size_t i = 0; i < dims.d_model; ++i)
        for (std::size_t j = 0; j < dims.d_model; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dims.d_v; ++c)
                s += w.wv.value()[i * dims.d_v + c] * w.wv.value()[j * dims.d_v + c];
            gram(i, j) = s;
        }
    EigenDecomposition ed = symmetric_eigen(gram);
    for (std::size_t c = 0; c < dims.d_model; ++c) {
        if (std::abs(ed.values[c]) < 1e-9) {
            std::vector<double> basis(dims.d_model);
            for (std::size_t r = 0; r < dims.d_model; ++r) basis[r] = ed.vectors(r, c);
            w.v_kernel_basis.push_back(std::move(basis));
        }
    }
    if (w.v_kernel_basis.empty()) {
        throw ContractError("cancellation weights: W_V has no left kernel at these dims");
    }
    return w;
}

CancellationResult run_cancellation(const CancellationDims& dims, std::size_t distance,
                                    std::size_t n_pairs, std::uint64_t seed, bool alibi_mode) {
    if (distance == 0 || distance >= dims.seq_len) {
        throw ConfigError("cancellation batch: distance must be in [1, seq_len)");
    }
    Rng rng(seed);
    BuiltWeights w = build_cancellation_weights(dims, rng, /*project_qk=*/alibi_mode);
    const std::size_t L = dims.seq_len;
    const std::size_t B = 2 * n_pairs;
    const std::size_t u = L - 1;         // readout row
    const std::size_t js = u - distance; // anchor token position

    // embeddings: fillers and x0 live in the left kernel of W_V, so only the
    // anchor token carries value signal (+-W_V t)
    auto kernel_vec = [&](double scale) {
        std::vector<double> x(dims.d_model, 0.0);
        for (const auto& basis : w.v_kernel_basis) {
            const double c = rng.normal() * scale;
            for (std::size_t r = 0; r < dims.d_model; ++r) x[r] += c * basis[r];
        }
        return x;
    };

    std::vector<double> xdata(B * L * dims.d_model);
    for (std::size_t pair = 0; pair < n_pairs; ++pair) {
        std::vector<std::vector<double>> rows(L);
        for (std::size_t pos = 0; pos < L; ++pos) rows[pos] = kernel_vec(1.0);
        for (int sign : {+1, -1}) {
            const std::size_t s = 2 * pair + (sign > 0 ? 0 : 1);
            for (std::size_t pos = 0; pos < L; ++pos) {
                for (std::size_t r = 0; r < dims.d_model; ++r) {
                    double v = rows[pos][r];
                    if (pos == js) v += static_cast<double>(sign) * 2.0 * w.t[r];
                    xdata[(s * L + pos) * dims.d_model + r] = v;
                }
            }
        }
    }
    Tensor64 x = Tensor64::from_data({B * L, dims.d_model}, std::move(xdata), true);

    Tape64 tape;
    Tensor64 q = matmul(&tape, x, w.wq);
    Tensor64 k = matmul(&tape, x, w.wk);
    Tensor64 v = matmul(&tape, x, w.wv);
    RopeKernel rope = RopeKernel::build(dims.d_qk, L);
    if (!alibi_mode) {
        std::vector<double> cos_t(rope.cos_table.begin(), rope.cos_table.end());
        std::vector<double> sin_t(rope.sin_table.begin(), rope.sin_table.end());
        std::vector<std::uint8_t> enabled{1};
        q = rope_rotate_rows(&tape, q, B, L, 1, dims.d_qk, cos_t, sin_t, dims.d_qk / 2, enabled);
        k = rope_rotate_rows(&tape, k, B, L, 1, dims.d_qk, cos_t, sin_t, dims.d_qk / 2, enabled);
    }
    AttnBias<double> bias;
    if (alibi_mode) {
        bias.kind = AttnBiasKind::Alibi;
        bias.alibi_slopes = {0.25};
    }
    AttnCapture<double> capture;
    capture.want_probs = true;
    capture.want_score_grads = true;
    AttnOptions<double> aopts;
    aopts.batch = B;
    aopts.heads = 1;
    aopts.len = L;
    aopts.d_qk = dims.d_qk;
    aopts.d_v = dims.d_v;
    aopts.scale = 1.0 / std::sqrt(static_cast<double>(dims.d_qk));
    aopts.bias = alibi_mode ? &bias : nullptr;
    aopts.capture = &capture;
    Tensor64 y = attention_core(&tape, q, k, v, aopts);

    // per-sample linear loss <w_read, Y_u>; summed over the batch
    std::vector<std::size_t> readout_rows(B);
    for (std::size_t s = 0; s < B; ++s) readout_rows[s] = s * L + u;
    Tensor64 y_u = gather_rows(&tape, y, readout_rows);
    Tensor64 w_read({B, dims.d_v}, 0.0, false);
    {
        std::vector<double> wrow(dims.d_v);
        for (auto& c : wrow) c = rng.uniform(0.5, 1.5) * 4.0;
        for (std::size_t s = 0; s < B; ++s)
            for (std::size_t c = 0; c < dims.d_v; ++c)
                w_read.mutable_value()[s * dims.d_v + c] = wrow[c];
    }
    Tensor64 loss = sum_all(&tape, mul(&tape, y_u, w_read));
    tape.backward(loss);

    CancellationResult res;
    res.distance = distance;
    res.n_pairs = n_pairs;
    res.min_sample_magnitude = std::numeric_limits<double>::infinity();
    double h = 0.0;
    for (std::size_t pair = 0; pair < n_pairs; ++pair) {
        const std::size_t s0 = 2 * pair, s1 = 2 * pair + 1;
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j <= i; ++j)
                res.max_pair_prob_diff =
                    std::max(res.max_pair_prob_diff,
                             std::abs(capture.prob(s0, 0, i, j) - capture.prob(s1, 0, i, j)));
        const double g0 = capture.score_grad(s0, 0, u, js);
        const double g1 = capture.score_grad(s1, 0, u, js);
        res.min_sample_magnitude =
            std::min({res.min_sample_magnitude, std::abs(g0), std::abs(g1)});
        res.max_pair_sum = std::max(res.max_pair_sum, std::abs(g0 + g1));
        h += g0 + g1;
    }
    res.h_aggregate = h;
    return res;
}

}  // namespace

CancellationResult alibi_cancellation_batch(const CancellationDims& dims, std::size_t distance,
                                            std::size_t n_pairs, std::uint64_t seed) {
    return run_cancellation(dims, distance, n_pairs, seed, /*alibi_mode=*/true);
}

CancellationResult rope_contrast_batch(const CancellationDims& dims, std::size_t distance,
                                       std::size_t n_pairs, std::uint64_t seed) {
    return run_cancellation(dims, distance, n_pairs, seed, /*alibi_mode=*/false);
}

// ---- SNR / margin amplification -----------------------------------------------------

namespace {

// Haar-ish random orthogonal via Gram-Schmidt on a gaussian matrix.
Mat random_orthogonal(std::size_t n, Rng& rng) {
    Mat m(n, n);
    for (auto& v : m.a) v = rng.normal();
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t p = 0; p < c; ++p) {
            double proj = 0.0;
            for (std::size_t r = 0; r < n; ++r) proj += m(r, c) * m(r, p);
            for (std::size_t r = 0; r < n; ++r) m(r, c) -= proj * m(r, p);
        }
        double nrm = 0.0;
        for (std::size_t r = 0; r < n; ++r) nrm += m(r, c) * m(r, c);
        nrm = std::sqrt(nrm);
        for (std::size_t r = 0; r < n; ++r) m(r, c) /= nrm;
    }
    return m;
}

}  // namespace

JacobianChain build_gain_chain(std::size_t dim, std::size_t u_dim, std::size_t layers,
                               double gamma, std::uint64_t seed, bool mix_u) {
    if (u_dim == 0 || u_dim >= dim) {
        throw ConfigError("build_gain_chain: need 0 < u_dim < dim");
    }
    JacobianChain chain;
    chain.dim = dim;
    chain.u_dim = u_dim;
    Rng rng(seed);
    for (std::size_t l = 0; l < layers; ++l) {
        Mat j(dim, dim);
        Mat ou = mix_u ? random_orthogonal(u_dim, rng) : Mat();
        Mat op = random_orthogonal(dim - u_dim, rng);
        for (std::size_t r = 0; r < u_dim; ++r)
            for (std::size_t c = 0; c < u_dim; ++c)
                j(r, c) = gamma * (mix_u ? ou(r, c) : (r == c ? 1.0 : 0.0));
        for (std::size_t r = 0; r < dim - u_dim; ++r)
            for (std::size_t c = 0; c < dim - u_dim; ++c)
                j(u_dim + r, u_dim + c) = op(r, c);
        chain.jacobians.push_back(std::move(j));
        chain.gains.push_back(gamma);
    }
    return chain;
}

std::pair<double, double> singular_range(const Mat& m) {
    Mat gram(m.cols, m.cols);
    for (std::size_t i = 0; i < m.cols; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < m.rows; ++r) s += m(r, i) * m(r, j);
            gram(i, j) = s;
        }
    std::vector<double> eig = symmetric_eigenvalues(gram);
    return {std::sqrt(std::max(0.0, eig.back())), std::sqrt(std::max(0.0, eig.front()))};
}

namespace {

SnrPoint snr_point(const std::vector<double>& g, std::size_t u_dim) {
    SnrPoint p;
    double u_sq = 0.0, perp_sq = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (i < u_dim) {
            u_sq += g[i] * g[i];
        } else {
            perp_sq += g[i] * g[i];
        }
    }
    p.snr = perp_sq > 0.0 ? std::sqrt(u_sq / perp_sq)
                          : std::numeric_limits<double>::infinity();
    double top1 = 0.0, top2 = 0.0;
    for (std::size_t i = 0; i < u_dim; ++i) {
        const double v = std::abs(g[i]);
        if (v > top1) {
            top2 = top1;
            top1 = v;
        } else if (v > top2) {
            top2 = v;
        }
    }
    p.margin = top1 - top2;
    return p;
}

}  // namespace

std::vector<SnrPoint> snr_amplification_sim(const JacobianChain& chain,
                                            const std::vector<double>& g_top) {
    if (g_top.size() != chain.dim) {
        throw DimensionError("snr_amplification_sim: g_top dimension mismatch");
    }
    std::vector<SnrPoint> out;
    std::vector<double> g = g_top;
    out.push_back(snr_point(g, chain.u_dim));
    for (std::size_t l = chain.jacobians.size(); l-- > 0;) {
        const Mat& j = chain.jacobians[l];
        std::vector<double> next(chain.dim, 0.0);
        for (std::size_t r = 0; r < chain.dim; ++r)
            for (std::size_t c = 0; c < chain.dim; ++c) next[c] += j(r, c) * g[r];
        g = std::move(next);
        out.push_back(snr_point(g, chain.u_dim));
    }
    return out;
}

// ---- deposit kernel ----------------------------------------------------------------

DepositKernel deposit_kernel(const AnchorGradients& grads) {
    DepositKernel k;
    k.distances = grads.distances();
    const double n = static_cast<double>(grads.values.size());
    for (std::size_t d : k.distances) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s < grads.anchors.size(); ++s) {
            if (grads.anchors[s].distance == d) {
                sum += grads.values[s];
                ++count;
            }
        }
        const double mean = sum / static_cast<double>(count);
        k.kappa.push_back(mean);
        k.counts.push_back(count);
        // H(d) vs N * mu_hat(d) * kappa(d): identical by construction of means
        const double h = sum;
        const double mu = static_cast<double>(count) / n;
        k.residual = std::max(k.residual, std::abs(h - n * mu * mean));
    }
    // affine least squares kappa ~ a + b Delta
    if (k.distances.size() >= 2) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        const double m = static_cast<double>(k.distances.size());
        for (std::size_t i = 0; i < k.distances.size(); ++i) {
            const double xx = static_cast<double>(k.distances[i]);
            sx += xx;
            sy += k.kappa[i];
            sxx += xx * xx;
            sxy += xx * k.kappa[i];
        }
        const double denom = m * sxx - sx * sx;
        const double b = denom != 0.0 ? (m * sxy - sx * sy) / denom : 0.0;
        const double a = (sy - b * sx) / m;
        double ss_res = 0.0, ss_tot = 0.0;
        const double mean_y = sy / m;
        for (std::size_t i = 0; i < k.distances.size(); ++i) {
            const double fit = a + b * static_cast<double>(k.distances[i]);
            ss_res += (k.kappa[i] - fit) * (k.kappa[i] - fit);
            ss_tot += (k.kappa[i] - mean_y) * (k.kappa[i] - mean_y);
        }
        k.affine_r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    } else {
        k.affine_r2 = 1.0;
    }
    return k;
}

// ---- massive-value diagnostic ----------------------------------------------------------

RowNormReport massive_value_rownorms(const Mat& w) {
    RowNormReport rep;
    rep.norms.resize(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) s += w(r, c) * w(r, c);
        rep.norms[r] = std::sqrt(s);
    }
    std::vector<double> sorted = rep.norms;
    std::sort(sorted.begin(), sorted.end());
    auto q = [&](double p) {
        const double pos = p * static_cast<double>(sorted.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    rep.median = q(0.5);
    rep.iqr = q(0.75) - q(0.25);
    const double cutoff = rep.median + 4.0 * rep.iqr;
    for (std::size_t r = 0; r < w.rows; ++r) {
        if (rep.norms[r] > cutoff) rep.outliers.push_back(r);
    }
    return rep;
}

RowNormReport massive_value_rownorms(const Tensor32& w) {
    Mat m(w.dim(0), w.dim(1));
    for (std::size_t i = 0; i < w.size(); ++i) m.a[i] = static_cast<double>(w.value()[i]);
    return massive_value_rownorms(m);
}

}  // namespace pelab
