#include "pelab/pe.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "pelab/toeplitz.hpp"

namespace pelab {

using nlohmann::json;

std::string pe_kind_name(PeKind kind) {
    switch (kind) {
        case PeKind::NoPe: return "nope";
        case PeKind::AbsoluteSinusoidal: return "absolute";
        case PeKind::RandomLearned: return "random";
        case PeKind::RelativeT5: return "relative";
        case PeKind::Alibi: return "alibi";
        case PeKind::Rope: return "rope";
        case PeKind::PartialRope: return "partial_rope";
        case PeKind::HybridAbsRope: return "hybrid_abs_rope";
        case PeKind::Mla: return "mla";
    }
    throw ConfigError("pe_kind_name: unknown kind");
}

PeKind pe_kind_from_name(const std::string& name) {
    for (PeKind k : {PeKind::NoPe, PeKind::AbsoluteSinusoidal, PeKind::RandomLearned,
                     PeKind::RelativeT5, PeKind::Alibi, PeKind::Rope, PeKind::PartialRope,
                     PeKind::HybridAbsRope, PeKind::Mla}) {
        if (pe_kind_name(k) == name) return k;
    }
    throw ConfigError("pe_kind_from_name: unknown PE kind '" + name + "'");
}

void PeSpec::validate(std::size_t num_layers, std::size_t num_heads, std::size_t d_head) const {
    if (uses_rope() && kind != PeKind::Mla && d_head % 2 != 0) {
        throw ConfigError("PeSpec: RoPE needs an even head dim");
    }
    if (kind == PeKind::PartialRope) {
        if (partial_rope_heads.size() != num_layers) {
            throw ConfigError("PeSpec: partial_rope_heads must list one entry per layer");
        }
        for (std::size_t k : partial_rope_heads) {
            if (k > num_heads) {
                throw ConfigError("PeSpec: partial_rope_heads entry exceeds num_heads");
            }
        }
    }
    if (!alibi_slopes.empty()) {
        if (alibi_slopes.size() != num_heads) {
            throw ConfigError("PeSpec: alibi_slopes must have one entry per head");
        }
        for (std::size_t h = 0; h < alibi_slopes.size(); ++h) {
            if (alibi_slopes[h] <= 0.0) throw ConfigError("PeSpec: ALiBi slopes must be positive");
            if (h > 0 && alibi_slopes[h] >= alibi_slopes[h - 1]) {
                throw ConfigError("PeSpec: ALiBi slopes must be strictly decreasing");
            }
        }
    }
    if (kind == PeKind::Mla) {
        if (mla.d_rope % 2 != 0) throw ConfigError("PeSpec: MLA d_rope must be even");
        if (mla.d_nope + mla.d_rope == 0 || mla.d_compress == 0) {
            throw ConfigError("PeSpec: MLA dims must be positive");
        }
    }
    if (rope_theta_base <= 0.0) throw ConfigError("PeSpec: rope_theta_base must be positive");
}

std::string PeSpec::to_json() const {
    json j;
    j["kind"] = pe_kind_name(kind);
    j["rope_theta_base"] = rope_theta_base;
    if (!alibi_slopes.empty()) j["alibi_slopes"] = alibi_slopes;
    if (rel_max_offset) j["rel_max_offset"] = rel_max_offset;
    if (rel_log_bucketing) j["rel_log_bucketing"] = true;
    if (!partial_rope_heads.empty()) j["partial_rope_heads"] = partial_rope_heads;
    if (kind == PeKind::Mla) {
        j["mla"] = {{"d_nope", mla.d_nope}, {"d_rope", mla.d_rope},
                    {"d_compress", mla.d_compress}};
    }
    return j.dump();
}

PeSpec PeSpec::from_json(const std::string& text) {
    json j = json::parse(text);
    PeSpec spec;
    spec.kind = pe_kind_from_name(j.at("kind").get<std::string>());
    spec.rope_theta_base = j.value("rope_theta_base", 10000.0);
    if (j.contains("alibi_slopes")) spec.alibi_slopes = j["alibi_slopes"].get<std::vector<double>>();
    spec.rel_max_offset = j.value("rel_max_offset", std::size_t{0});
    spec.rel_log_bucketing = j.value("rel_log_bucketing", false);
    if (j.contains("partial_rope_heads")) {
        spec.partial_rope_heads = j["partial_rope_heads"].get<std::vector<std::size_t>>();
    }
    if (j.contains("mla")) {
        spec.mla.d_nope = j["mla"].value("d_nope", std::size_t{0});
        spec.mla.d_rope = j["mla"].value("d_rope", std::size_t{0});
        spec.mla.d_compress = j["mla"].value("d_compress", std::size_t{0});
    }
    return spec;
}

// ---- sinusoidal ---------------------------------------------------------------

Mat sinusoidal_table(std::size_t max_len, std::size_t d_model) {
    if (d_model % 2 != 0) throw DimensionError("sinusoidal_table: d_model must be even");
    Mat table(max_len, d_model);
    for (std::size_t i = 0; i < max_len; ++i) {
        for (std::size_t t = 0; t < d_model / 2; ++t) {
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(t) / static_cast<double>(d_model));
            const double angle = static_cast<double>(i) * freq;
            table(i, 2 * t) = std::sin(angle);
            table(i, 2 * t + 1) = std::cos(angle);
        }
    }
    return table;
}

// ---- ALiBi ---------------------------------------------------------------------

std::vector<double> alibi_slopes_geometric(std::size_t num_heads) {
    std::vector<double> slopes(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        slopes[h] = std::pow(2.0, -8.0 * static_cast<double>(h + 1) /
                                       static_cast<double>(num_heads));
    }
    return slopes;
}

std::vector<Mat> alibi_bias(std::size_t num_heads, std::size_t seq_len,
                            const std::vector<double>& slopes) {
    if (seq_len == 0) throw DimensionError("alibi_bias: seq_len must be positive");
    if (slopes.size() != num_heads) {
        throw DimensionError("alibi_bias: need one slope per head");
    }
    std::vector<Mat> out;
    out.reserve(num_heads);
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < num_heads; ++h) {
        Mat b(seq_len, seq_len);
        for (std::size_t i = 0; i < seq_len; ++i)
            for (std::size_t j = 0; j < seq_len; ++j)
                b(i, j) = j <= i ? -slopes[h] * static_cast<double>(i - j) : neg_inf;
        out.push_back(std::move(b));
    }
    return out;
}

// ---- RoPE ----------------------------------------------------------------------

RopeKernel RopeKernel::build(std::size_t d_head, std::size_t max_len, double theta_base) {
    if (d_head % 2 != 0) throw DimensionError("RopeKernel: head dim must be even");
    RopeKernel k;
    k.d_head = d_head;
    k.max_len = max_len;
    k.theta_base = theta_base;
    const std::size_t half = d_head / 2;
    k.theta.resize(half);
    for (std::size_t t = 0; t < half; ++t) {
        k.theta[t] = std::pow(theta_base,
                              -2.0 * static_cast<double>(t) / static_cast<double>(d_head));
    }
    k.cos_table.resize(max_len * half);
    k.sin_table.resize(max_len * half);
    for (std::size_t pos = 0; pos < max_len; ++pos) {
        for (std::size_t t = 0; t < half; ++t) {
            const double angle = static_cast<double>(pos) * k.theta[t];
            k.cos_table[pos * half + t] = std::cos(angle);
            k.sin_table[pos * half + t] = std::sin(angle);
        }
    }
    return k;
}

std::vector<double> rope_rotate(const std::vector<double>& x, std::size_t pos,
                                const RopeKernel& kernel) {
    if (x.size() != kernel.d_head || x.size() % 2 != 0) {
        throw DimensionError("rope_rotate: vector length must equal the (even) kernel head dim");
    }
    std::vector<double> out(x.size());
    const std::size_t half = x.size() / 2;
    for (std::size_t t = 0; t < half; ++t) {
        const double c = kernel.cos_at(pos, t);
        const double s = kernel.sin_at(pos, t);
        out[2 * t] = x[2 * t] * c - x[2 * t + 1] * s;
        out[2 * t + 1] = x[2 * t] * s + x[2 * t + 1] * c;
    }
    return out;
}

std::vector<double> rope_rotate_signed(const std::vector<double>& x, long long pos,
                                       const RopeKernel& kernel) {
    if (x.size() != kernel.d_head || x.size() % 2 != 0) {
        throw DimensionError("rope_rotate_signed: vector length must equal the kernel head dim");
    }
    std::vector<double> out(x.size());
    const std::size_t half = x.size() / 2;
    for (std::size_t t = 0; t < half; ++t) {
        const double angle = static_cast<double>(pos) * kernel.theta[t];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        out[2 * t] = x[2 * t] * c - x[2 * t + 1] * s;
        out[2 * t + 1] = x[2 * t] * s + x[2 * t + 1] * c;
    }
    return out;
}

// ---- logit constructions ---------------------------------------------------------

AdditiveLogits build_logits_additive(const Mat& qc, const Mat& qp, const Mat& kc, const Mat& kp,
                                     const Mat* bias) {
    GramDecomposition g = gram_decompose(qc, qp, kc, kp);
    const std::size_t l = qc.rows;
    AdditiveLogits out;
    out.g_cc = std::move(g.g_cc);
    out.g_cp = std::move(g.g_cp);
    out.g_pc = std::move(g.g_pc);
    out.g_pp = std::move(g.g_pp);
    out.total = std::move(g.sum);
    if (bias) {
        if (bias->rows != l || bias->cols != l) {
            throw DimensionError("build_logits_additive: bias must be L x L");
        }
        if (!check_toeplitz(*bias, 0.0).is_toeplitz) {
            throw ContractError("build_logits_additive: bias matrix is not Toeplitz");
        }
        out.bias = *bias;
        for (std::size_t i = 0; i < l * l; ++i) out.total.a[i] += bias->a[i];
    } else {
        out.bias = Mat(l, l);
    }
    return out;
}

Mat build_logits_rope(const Mat& q, const Mat& k, const RopeKernel& kernel) {
    if (q.rows != k.rows || q.cols != k.cols) {
        throw DimensionError("build_logits_rope: q and k must have identical shape");
    }
    if (q.cols != kernel.d_head) {
        throw DimensionError("build_logits_rope: vector width must equal the kernel head dim");
    }
    const std::size_t l = q.rows;
    Mat logits(l, l);
    std::vector<double> qi(q.cols), kj(q.cols);
    for (std::size_t i = 0; i < l; ++i) {
        for (std::size_t t = 0; t < q.cols; ++t) qi[t] = q(i, t);
        const std::vector<double> qr = rope_rotate(qi, i, kernel);
        for (std::size_t j = 0; j < l; ++j) {
            for (std::size_t t = 0; t < q.cols; ++t) kj[t] = k(j, t);
            const std::vector<double> kr = rope_rotate(kj, j, kernel);
            logits(i, j) = dot(qr, kr);
        }
    }
    return logits;
}

// ---- MLA reference ---------------------------------------------------------------

double mla_qk(const std::vector<double>& x_i, const std::vector<double>& x_j,
              const MlaQkWeights& weights, std::size_t i, std::size_t j,
              const RopeKernel& rope_kernel) {
    const std::size_t d_model = x_i.size();
    if (x_j.size() != d_model) throw DimensionError("mla_qk: x_i and x_j widths differ");
    if (weights.w_uq.cols != d_model || weights.w_uk.cols != d_model ||
        weights.w_ur.cols != d_model) {
        throw DimensionError("mla_qk: projection widths must match d_model");
    }
    if (weights.w_uq.rows != weights.w_uk.rows) {
        throw DimensionError("mla_qk: W_UQ and W_UK must project to the same width");
    }
    if (weights.w_ur.rows != rope_kernel.d_head) {
        throw DimensionError("mla_qk: W_UR width must match the rope kernel head dim");
    }
    double nope = 0.0;
    if (weights.w_uq.rows > 0) {
        nope = dot(matvec(weights.w_uq, x_i), matvec(weights.w_uk, x_j));
    }
    double rope = 0.0;
    if (weights.w_ur.rows > 0) {
        const std::vector<double> ri = rope_rotate(matvec(weights.w_ur, x_i), i, rope_kernel);
        const std::vector<double> rj = rope_rotate(matvec(weights.w_ur, x_j), j, rope_kernel);
        rope = dot(ri, rj);
    }
    return nope + rope;
}

}  // namespace pelab
