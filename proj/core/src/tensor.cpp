#include "pelab/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pelab {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapM = Eigen::Map<const RowMat<S>>;
template <typename S>
using StridedCMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using CArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

template <typename S>
void require_matrix(const char* op, const Tensor<S>& a) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " +
                             shape_str(a.shape()));
    }
}

// Registers the op on the tape when recording is active and attaches the
// backward closure produced by `make_backward(out)`.
template <typename S, typename Fn>
Tensor<S> record_op(Tape<S>* tape, const char* kind, std::vector<std::size_t> shape,
                    std::vector<S> value, const std::vector<const Tensor<S>*>& inputs,
                    bool requires_grad, Fn&& make_backward) {
    if (!tape || !requires_grad) {
        return Tensor<S>::from_data(std::move(shape), std::move(value), requires_grad);
    }
    Tensor<S> out = tape->record(kind, std::move(shape), std::move(value), inputs, requires_grad);
    tape->set_backward(out, make_backward(out));
    return out;
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

template <typename S>
Tensor<S>::Tensor(std::vector<std::size_t> shape, S fill, bool requires_grad) {
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->value.assign(shape_product(impl_->shape), fill);
    impl_->requires_grad = requires_grad;
}

template <typename S>
Tensor<S> Tensor<S>::from_data(std::vector<std::size_t> shape, std::vector<S> data,
                               bool requires_grad) {
    if (shape_product(shape) != data.size()) {
        throw DimensionError("Tensor::from_data: " + shape_str(shape) + " needs " +
                             std::to_string(shape_product(shape)) + " values, got " +
                             std::to_string(data.size()));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

template <typename S>
const std::vector<S>& Tensor<S>::grad() const {
    if (impl_->grad.empty()) {
        throw ContractError("Tensor::grad: gradient not populated; run Tape::backward first");
    }
    return impl_->grad;
}

template <typename S>
void Tensor<S>::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
}

template <typename S>
S Tensor<S>::at(std::size_t i, std::size_t j) const {
    if (rank() != 2 || i >= dim(0) || j >= dim(1)) {
        throw IndexError("Tensor::at: index out of range");
    }
    return impl_->value[i * dim(1) + j];
}

template <typename S>
S Tensor<S>::item() const {
    if (size() != 1) throw ContractError("Tensor::item: tensor is not scalar");
    return impl_->value[0];
}

// ---- Tape -------------------------------------------------------------------

template <typename S>
Tensor<S> Tape<S>::record(const char* kind, std::vector<std::size_t> shape, std::vector<S> value,
                          const std::vector<const Tensor<S>*>& inputs, bool requires_grad) {
    Tensor<S> out = Tensor<S>::from_data(std::move(shape), std::move(value), requires_grad);
    Node n;
    n.kind = kind;
    n.inputs = {-1, -1, -1, -1};
    for (std::size_t i = 0; i < inputs.size() && i < n.inputs.size(); ++i) {
        if (inputs[i] && inputs[i]->defined()) n.inputs[i] = inputs[i]->node();
    }
    n.output = static_cast<int>(nodes_.size());
    n.out_impl = out.impl_;
    out.impl_->node = n.output;
    nodes_.push_back(std::move(n));
    return out;
}

template <typename S>
void Tape<S>::set_backward(const Tensor<S>& out, std::function<void()> fn) {
    nodes_.at(static_cast<std::size_t>(out.node())).backward = std::move(fn);
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
    if (backward_run_) {
        throw ContractError("Tape::backward: called twice on the same tape");
    }
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("Tape::backward: loss must be a scalar");
    }
    if (loss.node() < 0 || static_cast<std::size_t>(loss.node()) >= nodes_.size() ||
        nodes_[static_cast<std::size_t>(loss.node())].out_impl != loss.impl()) {
        throw ContractError("Tape::backward: loss was not produced on this tape");
    }
    backward_run_ = true;
    ensure_grad(loss.impl());
    loss.impl()->grad[0] = S(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        ++n.visits;
        if (n.out_impl->grad.empty()) continue;  // never consumed downstream of the loss
        if (n.backward) n.backward();
    }
}

// ---- elementwise ops --------------------------------------------------------

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape("add", a, b);
    std::vector<S> out(a.size());
    ArrMap<S>(out.data(), out.size()) = CArrMap<S>(a.value().data(), a.size()) +
                                        CArrMap<S>(b.value().data(), b.size());
    const bool rg = a.requires_grad() || b.requires_grad();
    return record_op<S>(tape, "add", a.shape(), std::move(out), {&a, &b}, rg, [&](Tensor<S>& o) {
        auto ia = a.impl(), ib = b.impl(), io = o.impl();
        return [ia, ib, io]() {
            const std::size_t n = io->grad.size();
            CArrMap<S> g(io->grad.data(), n);
            if (ia->requires_grad) {
                Tape<S>::ensure_grad(ia);
                ArrMap<S>(ia->grad.data(), n) += g;
            }
            if (ib->requires_grad) {
                Tape<S>::ensure_grad(ib);
                ArrMap<S>(ib->grad.data(), n) += g;
            }
        };
    });
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape("sub", a, b);
    std::vector<S> out(a.size());
    ArrMap<S>(out.data(), out.size()) = CArrMap<S>(a.value().data(), a.size()) -
                                        CArrMap<S>(b.value().data(), b.size());
    const bool rg = a.requires_grad() || b.requires_grad();
    return record_op<S>(tape, "sub", a.shape(), std::move(out), {&a, &b}, rg, [&](Tensor<S>& o) {
        auto ia = a.impl(), ib = b.impl(), io = o.impl();
        return [ia, ib, io]() {
            const std::size_t n = io->grad.size();
            CArrMap<S> g(io->grad.data(), n);
            if (ia->requires_grad) {
                Tape<S>::ensure_grad(ia);
                ArrMap<S>(ia->grad.data(), n) += g;
            }
            if (ib->requires_grad) {
                Tape<S>::ensure_grad(ib);
                ArrMap<S>(ib->grad.data(), n) -= g;
            }
        };
    });
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape("mul", a, b);
    std::vector<S> out(a.size());
    ArrMap<S>(out.data(), out.size()) = CArrMap<S>(a.value().data(), a.size()) *
                                        CArrMap<S>(b.value().data(), b.size());
    const bool rg = a.requires_grad() || b.requires_grad();
    return record_op<S>(tape, "mul", a.shape(), std::move(out), {&a, &b}, rg, [&](Tensor<S>& o) {
        auto ia = a.impl(), ib = b.impl(), io = o.impl();
        return [ia, ib, io]() {
            const std::size_t n = io->grad.size();
            CArrMap<S> g(io->grad.data(), n);
            if (ia->requires_grad) {
                Tape<S>::ensure_grad(ia);
                ArrMap<S>(ia->grad.data(), n) += g * CArrMap<S>(ib->value.data(), n);
            }
            if (ib->requires_grad) {
                Tape<S>::ensure_grad(ib);
                ArrMap<S>(ib->grad.data(), n) += g * CArrMap<S>(ia->value.data(), n);
            }
        };
    });
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, S factor) {
    std::vector<S> out(a.size());
    ArrMap<S>(out.data(), out.size()) = CArrMap<S>(a.value().data(), a.size()) * factor;
    const bool rg = a.requires_grad();
    return record_op<S>(tape, "scale", a.shape(), std::move(out), {&a}, rg, [&](Tensor<S>& o) {
        auto ia = a.impl(), io = o.impl();
        return [ia, io, factor]() {
            const std::size_t n = io->grad.size();
            Tape<S>::ensure_grad(ia);
            ArrMap<S>(ia->grad.data(), n) += CArrMap<S>(io->grad.data(), n) * factor;
        };
    });
}

template <typename S>
Tensor<S> add_rowvec(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& v) {
    require_matrix("add_rowvec", x);
    if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
        throw DimensionError("add_rowvec: vector length " + shape_str(v.shape()) +
                             " does not match columns of " + shape_str(x.shape()));
    }
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<S> out(x.size());
    for (std::size_t i = 0; i < r; ++i) {
        ArrMap<S>(out.data() + i * c, c) =
            CArrMap<S>(x.value().data() + i * c, c) + CArrMap<S>(v.value().data(), c);
    }
    const bool rg = x.requires_grad() || v.requires_grad();
    return record_op<S>(tape, "add_rowvec", x.shape(), std::move(out), {&x, &v}, rg,
                        [&](Tensor<S>& o) {
                            auto ix = x.impl(), iv = v.impl(), io = o.impl();
                            return [ix, iv, io, r, c]() {
                                const auto& g = io->grad;
                                if (ix->requires_grad) {
                                    Tape<S>::ensure_grad(ix);
                                    ArrMap<S>(ix->grad.data(), g.size()) +=
                                        CArrMap<S>(g.data(), g.size());
                                }
                                if (iv->requires_grad) {
                                    Tape<S>::ensure_grad(iv);
                                    ArrMap<S> gv(iv->grad.data(), c);
                                    for (std::size_t i = 0; i < r; ++i)
                                        gv += CArrMap<S>(g.data() + i * c, c);
                                }
                            };
                        });
}

// ---- matmul ----------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n);
    {
        CMapM<S> ma(a.value().data(), m, k), mb(b.value().data(), k, n);
        MapM<S> mo(out.data(), m, n);
        mo.noalias() = ma * mb;
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    std::vector<std::size_t> out_shape{m, n};
    return record_op<S>(tape, "matmul", std::move(out_shape), std::move(out), {&a, &b}, rg,
                        [&](Tensor<S>& o) {
                            auto ia = a.impl(), ib = b.impl(), io = o.impl();
                            return [ia, ib, io, m, k, n]() {
                                CMapM<S> g(io->grad.data(), m, n);
                                if (ia->requires_grad) {
                                    Tape<S>::ensure_grad(ia);
                                    CMapM<S> mb(ib->value.data(), k, n);
                                    MapM<S> da(ia->grad.data(), m, k);
                                    da.noalias() += g * mb.transpose();
                                }
                                if (ib->requires_grad) {
                                    Tape<S>::ensure_grad(ib);
                                    CMapM<S> ma(ia->value.data(), m, k);
                                    MapM<S> db(ib->grad.data(), k, n);
                                    db.noalias() += ma.transpose() * g;
                                }
                            };
                        });
}

template <typename S>
Tensor<S> matmul_nt(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    require_matrix("matmul_nt", a);
    require_matrix("matmul_nt", b);
    if (a.dim(1) != b.dim(1)) {
        throw DimensionError("matmul_nt: inner dims disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<S> out(m * n);
    {
        CMapM<S> ma(a.value().data(), m, k), mb(b.value().data(), n, k);
        MapM<S> mo(out.data(), m, n);
        mo.noalias() = ma * mb.transpose();
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    std::vector<std::size_t> out_shape{m, n};
    return record_op<S>(tape, "matmul_nt", std::move(out_shape), std::move(out), {&a, &b}, rg,
                        [&](Tensor<S>& o) {
                            auto ia = a.impl(), ib = b.impl(), io = o.impl();
                            return [ia, ib, io, m, k, n]() {
                                CMapM<S> g(io->grad.data(), m, n);
                                if (ia->requires_grad) {
                                    Tape<S>::ensure_grad(ia);
                                    CMapM<S> mb(ib->value.data(), n, k);
                                    MapM<S> da(ia->grad.data(), m, k);
                                    da.noalias() += g * mb;
                                }
                                if (ib->requires_grad) {
                                    Tape<S>::ensure_grad(ib);
                                    CMapM<S> ma(ia->value.data(), m, k);
                                    MapM<S> db(ib->grad.data(), n, k);
                                    db.noalias() += g.transpose() * ma;
                                }
                            };
                        });
}

template <typename S>
Tensor<S> transpose(Tape<S>* tape, const Tensor<S>& a) {
    require_matrix("transpose", a);
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
    const bool rg = a.requires_grad();
    std::vector<std::size_t> out_shape{c, r};
    return record_op<S>(tape, "transpose", std::move(out_shape), std::move(out), {&a}, rg,
                        [&](Tensor<S>& o) {
                            auto ia = a.impl(), io = o.impl();
                            return [ia, io, r, c]() {
                                Tape<S>::ensure_grad(ia);
                                for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                        ia->grad[i * c + j] += io->grad[j * r + i];
                            };
                        });
}

template <typename S>
Tensor<S> relu(Tape<S>* tape, const Tensor<S>& a) {
    std::vector<S> out(a.size());
    ArrMap<S>(out.data(), out.size()) = CArrMap<S>(a.value().data(), a.size()).max(S(0));
    const bool rg = a.requires_grad();
    return record_op<S>(tape, "relu", a.shape(), std::move(out), {&a}, rg, [&](Tensor<S>& o) {
        auto ia = a.impl(), io = o.impl();
        return [ia, io]() {
            Tape<S>::ensure_grad(ia);
            const std::size_t n = io->grad.size();
            ArrMap<S>(ia->grad.data(), n) +=
                (CArrMap<S>(ia->value.data(), n) > S(0)).template cast<S>() *
                CArrMap<S>(io->grad.data(), n);
        };
    });
}

// ---- softmax / layer_norm / loss --------------------------------------------

template <typename S>
Tensor<S> softmax_rows(Tape<S>* tape, const Tensor<S>& s) {
    require_matrix("softmax_rows", s);
    for (S v : s.value()) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError("softmax_rows: non-finite input entry");
        }
    }
    const std::size_t r = s.dim(0), c = s.dim(1);
    std::vector<S> out(s.size());
    for (std::size_t i = 0; i < r; ++i) {
        const S* row = s.value().data() + i * c;
        S mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(row[j] - mx);
            denom += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom;
    }
    const bool rg = s.requires_grad();
    return record_op<S>(tape, "softmax_rows", s.shape(), std::move(out), {&s}, rg,
                        [&](Tensor<S>& o) {
                            auto is = s.impl(), io = o.impl();
                            // J_i = diag(A_i) - A_i A_i^T, applied row-wise
                            return [is, io, r, c]() {
                                Tape<S>::ensure_grad(is);
                                for (std::size_t i = 0; i < r; ++i) {
                                    const S* a = io->value.data() + i * c;
                                    const S* g = io->grad.data() + i * c;
                                    S dot = S(0);
                                    for (std::size_t j = 0; j < c; ++j) dot += g[j] * a[j];
                                    S* ds = is->grad.data() + i * c;
                                    for (std::size_t j = 0; j < c; ++j)
                                        ds[j] += a[j] * (g[j] - dot);
                                }
                            };
                        });
}

template <typename S>
Tensor<S> layer_norm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps) {
    require_matrix("layer_norm", x);
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (c == 0) throw DimensionError("layer_norm: feature dimension is zero");
    if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c) {
        throw DimensionError("layer_norm: gain/bias must be vectors of length " +
                             std::to_string(c));
    }
    if (eps < S(0)) throw ContractError("layer_norm: eps must be non-negative");
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    const bool recording = tape && rg;
    std::vector<S> out(x.size());
    std::vector<S> xhat(recording ? x.size() : 0);
    std::vector<S> inv_std(recording ? r : 0);
    CArrMap<S> gv(gain.value().data(), c);
    CArrMap<S> bv(bias.value().data(), c);
    for (std::size_t i = 0; i < r; ++i) {
        CArrMap<S> row(x.value().data() + i * c, c);
        // scalar reductions: SIMD reductions split lanes by buffer address,
        // which would make results depend on where the allocator put us
        const S* rp = x.value().data() + i * c;
        S mean = S(0);
        for (std::size_t j = 0; j < c; ++j) mean += rp[j];
        mean /= static_cast<S>(c);
        S var = S(0);
        for (std::size_t j = 0; j < c; ++j) {
            const S dvj = rp[j] - mean;
            var += dvj * dvj;
        }
        var /= static_cast<S>(c);
        const S istd = S(1) / std::sqrt(var + eps);
        ArrMap<S> orow(out.data() + i * c, c);
        if (recording) {
            inv_std[i] = istd;
            ArrMap<S> xh(xhat.data() + i * c, c);
            xh = (row - mean) * istd;
            orow = xh * gv + bv;
        } else {
            orow = (row - mean) * istd * gv + bv;
        }
    }
    if (!recording) return Tensor<S>::from_data(x.shape(), std::move(out), rg);
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<S>>(std::move(inv_std));
    return record_op<S>(
        tape, "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias}, rg, [&](Tensor<S>& o) {
            auto ix = x.impl(), ig = gain.impl(), ib = bias.impl(), io = o.impl();
            return [ix, ig, ib, io, xh, istd, r, c]() {
                const auto& g = io->grad;
                if (ib->requires_grad) {
                    Tape<S>::ensure_grad(ib);
                    ArrMap<S> acc(ib->grad.data(), c);
                    for (std::size_t i = 0; i < r; ++i) acc += CArrMap<S>(g.data() + i * c, c);
                }
                if (ig->requires_grad) {
                    Tape<S>::ensure_grad(ig);
                    ArrMap<S> acc(ig->grad.data(), c);
                    for (std::size_t i = 0; i < r; ++i)
                        acc += CArrMap<S>(g.data() + i * c, c) *
                               CArrMap<S>(xh->data() + i * c, c);
                }
                if (ix->requires_grad) {
                    Tape<S>::ensure_grad(ix);
                    CArrMap<S> gainv(ig->value.data(), c);
                    for (std::size_t i = 0; i < r; ++i) {
                        CArrMap<S> grow(g.data() + i * c, c);
                        CArrMap<S> xrow(xh->data() + i * c, c);
                        const S* gp = g.data() + i * c;
                        const S* xp = xh->data() + i * c;
                        S mean_dxh = S(0), mean_dxh_xh = S(0);
                        for (std::size_t j = 0; j < c; ++j) {
                            const S dxh = gp[j] * ig->value[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xp[j];
                        }
                        mean_dxh /= static_cast<S>(c);
                        mean_dxh_xh /= static_cast<S>(c);
                        ArrMap<S>(ix->grad.data() + i * c, c) +=
                            (*istd)[i] * (grow * gainv - mean_dxh - xrow * mean_dxh_xh);
                    }
                }
            };
        });
}

template <typename S>
Tensor<S> cross_entropy_loss(Tape<S>* tape, const Tensor<S>& logits,
                             const std::vector<int>& labels, Reduction reduction) {
    require_matrix("cross_entropy_loss", logits);
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) {
        throw DimensionError("cross_entropy_loss: batch " + std::to_string(b) + " but " +
                             std::to_string(labels.size()) + " labels");
    }
    for (int lbl : labels) {
        if (lbl < 0 || static_cast<std::size_t>(lbl) >= c) {
            throw IndexError("cross_entropy_loss: label " + std::to_string(lbl) +
                             " outside [0," + std::to_string(c) + ")");
        }
    }
    std::vector<S> probs(logits.size());
    S loss = S(0);
    for (std::size_t i = 0; i < b; ++i) {
        const S* row = logits.value().data() + i * c;
        S mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(row[j] - mx);
            denom += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
        loss -= (row[static_cast<std::size_t>(labels[i])] - mx) - std::log(denom);
    }
    const S norm = reduction == Reduction::Mean ? S(1) / static_cast<S>(b) : S(1);
    loss *= norm;
    if (!std::isfinite(static_cast<double>(loss))) {
        throw NumericError("cross_entropy_loss: non-finite loss");
    }
    const bool rg = logits.requires_grad();
    if (!tape || !rg) return Tensor<S>::scalar(loss);
    auto pp = std::make_shared<std::vector<S>>(std::move(probs));
    auto ll = std::make_shared<std::vector<int>>(labels);
    std::vector<std::size_t> out_shape{1};
    // grad = (softmax - onehot) * norm
    return record_op<S>(tape, "cross_entropy", std::move(out_shape), {loss}, {&logits}, rg,
                        [&](Tensor<S>& o) {
                            auto il = logits.impl(), io = o.impl();
                            return [il, io, pp, ll, b, c, norm]() {
                                const S g = io->grad[0] * norm;
                                Tape<S>::ensure_grad(il);
                                for (std::size_t i = 0; i < b; ++i) {
                                    for (std::size_t j = 0; j < c; ++j)
                                        il->grad[i * c + j] += g * (*pp)[i * c + j];
                                    il->grad[i * c + static_cast<std::size_t>((*ll)[i])] -= g;
                                }
                            };
                        });
}

template <typename S>
Tensor<S> embedding_lookup(Tape<S>* tape, const Tensor<S>& table, const std::vector<int>& ids) {
    require_matrix("embedding_lookup", table);
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IndexError("embedding_lookup: token id " + std::to_string(id) +
                             " outside vocab of " + std::to_string(v));
        }
    }
    std::vector<S> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const S* src = table.value().data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    const bool rg = table.requires_grad();
    std::vector<std::size_t> out_shape{ids.size(), d};
    if (!tape || !rg) return Tensor<S>::from_data(std::move(out_shape), std::move(out), rg);
    auto id_copy = std::make_shared<std::vector<int>>(ids);
    return record_op<S>(tape, "embedding_lookup", std::move(out_shape), std::move(out), {&table},
                        rg, [&](Tensor<S>& o) {
                            auto it = table.impl(), io = o.impl();
                            return [it, io, id_copy, d]() {
                                Tape<S>::ensure_grad(it);
                                for (std::size_t i = 0; i < id_copy->size(); ++i) {
                                    S* dst = it->grad.data() +
                                             static_cast<std::size_t>((*id_copy)[i]) * d;
                                    const S* g = io->grad.data() + i * d;
                                    for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                                }
                            };
                        });
}

template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, const Tensor<S>& x, const std::vector<std::size_t>& rows) {
    require_matrix("gather_rows", x);
    const std::size_t c = x.dim(1);
    for (std::size_t r : rows) {
        if (r >= x.dim(0)) throw IndexError("gather_rows: row index out of range");
    }
    std::vector<S> out(rows.size() * c);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const S* src = x.value().data() + rows[i] * c;
        std::copy(src, src + c, out.data() + i * c);
    }
    const bool rg = x.requires_grad();
    std::vector<std::size_t> out_shape{rows.size(), c};
    if (!tape || !rg) return Tensor<S>::from_data(std::move(out_shape), std::move(out), rg);
    auto row_copy = std::make_shared<std::vector<std::size_t>>(rows);
    return record_op<S>(tape, "gather_rows", std::move(out_shape), std::move(out), {&x}, rg,
                        [&](Tensor<S>& o) {
                            auto ix = x.impl(), io = o.impl();
                            return [ix, io, row_copy, c]() {
                                Tape<S>::ensure_grad(ix);
                                for (std::size_t i = 0; i < row_copy->size(); ++i) {
                                    S* dst = ix->grad.data() + (*row_copy)[i] * c;
                                    const S* g = io->grad.data() + i * c;
                                    for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
                                }
                            };
                        });
}

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& a) {
    S total = S(0);
    for (S v : a.value()) total += v;
    const bool rg = a.requires_grad();
    std::vector<std::size_t> out_shape{1};
    return record_op<S>(tape, "sum_all", std::move(out_shape), {total}, {&a}, rg,
                        [&](Tensor<S>& o) {
                            auto ia = a.impl(), io = o.impl();
                            return [ia, io]() {
                                Tape<S>::ensure_grad(ia);
                                const S g = io->grad[0];
                                for (std::size_t i = 0; i < ia->grad.size(); ++i)
                                    ia->grad[i] += g;
                            };
                        });
}

template <typename S>
Tensor<S> dropout(Tape<S>* tape, const Tensor<S>& a, S p, Rng* rng) {
    if (p < S(0) || p >= S(1)) throw ConfigError("dropout: p must be in [0,1)");
    if (p == S(0) || rng == nullptr) return a;
    const S keep = S(1) - p;
    const S inv_keep = S(1) / keep;
    const std::uint64_t drop_threshold =
        static_cast<std::uint64_t>(static_cast<double>(p) * 18446744073709551616.0);
    // mask stored as the inverted-scale multiplier so apply and backward vectorize
    auto mask = std::make_shared<std::vector<S>>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        (*mask)[i] = rng->next_u64() >= drop_threshold ? inv_keep : S(0);
    }
    std::vector<S> out(a.size());
    ArrMap<S>(out.data(), out.size()) =
        CArrMap<S>(a.value().data(), a.size()) * CArrMap<S>(mask->data(), a.size());
    const bool rg = a.requires_grad();
    return record_op<S>(tape, "dropout", a.shape(), std::move(out), {&a}, rg, [&](Tensor<S>& o) {
        auto ia = a.impl(), io = o.impl();
        return [ia, io, mask]() {
            Tape<S>::ensure_grad(ia);
            const std::size_t n = io->grad.size();
            ArrMap<S>(ia->grad.data(), n) +=
                CArrMap<S>(io->grad.data(), n) * CArrMap<S>(mask->data(), n);
        };
    });
}

template <typename S>
Tensor<S> concat_head_slices(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b,
                             std::size_t heads) {
    require_matrix("concat_head_slices", a);
    require_matrix("concat_head_slices", b);
    if (a.dim(0) != b.dim(0) || a.dim(1) % heads != 0 || b.dim(1) % heads != 0) {
        throw DimensionError("concat_head_slices: rows must match and widths divide by heads");
    }
    const std::size_t r = a.dim(0);
    const std::size_t da = a.dim(1) / heads, db = b.dim(1) / heads;
    const std::size_t dc = da + db;
    std::vector<S> out(r * heads * dc);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            const S* pa = a.value().data() + i * heads * da + h * da;
            const S* pb = b.value().data() + i * heads * db + h * db;
            S* po = out.data() + i * heads * dc + h * dc;
            std::copy(pa, pa + da, po);
            std::copy(pb, pb + db, po + da);
        }
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    std::vector<std::size_t> out_shape{r, heads * dc};
    return record_op<S>(tape, "concat_head_slices", std::move(out_shape), std::move(out),
                        {&a, &b}, rg, [&](Tensor<S>& o) {
                            auto ia = a.impl(), ib = b.impl(), io = o.impl();
                            return [ia, ib, io, r, heads, da, db, dc]() {
                                if (ia->requires_grad) Tape<S>::ensure_grad(ia);
                                if (ib->requires_grad) Tape<S>::ensure_grad(ib);
                                for (std::size_t i = 0; i < r; ++i) {
                                    for (std::size_t h = 0; h < heads; ++h) {
                                        const S* g = io->grad.data() + i * heads * dc + h * dc;
                                        if (ia->requires_grad) {
                                            S* pa = ia->grad.data() + i * heads * da + h * da;
                                            for (std::size_t t = 0; t < da; ++t) pa[t] += g[t];
                                        }
                                        if (ib->requires_grad) {
                                            S* pb = ib->grad.data() + i * heads * db + h * db;
                                            for (std::size_t t = 0; t < db; ++t)
                                                pb[t] += g[da + t];
                                        }
                                    }
                                }
                            };
                        });
}

// ---- fused causal multi-head attention --------------------------------------

namespace {

template <typename S>
std::size_t bias_column(const AttnBias<S>* bias, std::size_t delta) {
    if (bias->offset_map) return (*bias->offset_map)[delta];
    return std::min(delta, bias->max_offset);
}

template <typename S>
S bias_value(const AttnBias<S>* bias, std::size_t h, std::size_t i, std::size_t j) {
    if (!bias || bias->kind == AttnBiasKind::None) return S(0);
    if (bias->kind == AttnBiasKind::Alibi) {
        return -bias->alibi_slopes[h] * static_cast<S>(i - j);
    }
    return bias->table.value()[h * (bias->max_offset + 1) + bias_column(bias, i - j)];
}

}  // namespace

template <typename S>
Tensor<S> attention_core(Tape<S>* tape, const Tensor<S>& q, const Tensor<S>& k,
                         const Tensor<S>& v, const AttnOptions<S>& opts) {
    const std::size_t B = opts.batch, H = opts.heads, L = opts.len;
    const std::size_t dqk = opts.d_qk, dv = opts.d_v;
    require_matrix("attention_core", q);
    require_matrix("attention_core", k);
    require_matrix("attention_core", v);
    if (q.dim(0) != B * L || k.dim(0) != B * L || v.dim(0) != B * L || q.dim(1) != H * dqk ||
        k.dim(1) != H * dqk || v.dim(1) != H * dv) {
        throw DimensionError("attention_core: tensors do not match B/H/L/d layout");
    }
    if (opts.bias && opts.bias->kind == AttnBiasKind::Alibi &&
        opts.bias->alibi_slopes.size() != H) {
        throw DimensionError("attention_core: need one ALiBi slope per head");
    }
    if (opts.head_mask && opts.head_mask->size() != H) {
        throw DimensionError("attention_core: head mask must have one entry per head");
    }

    const bool drop = opts.dropout_p > S(0) && opts.dropout_rng != nullptr;

    // Saved for backward: post-softmax probs (pre-dropout) and the dropout
    // multipliers (0 or 1/keep), which keep apply and backward vectorized.
    auto probs = std::make_shared<std::vector<S>>(B * H * L * L, S(0));
    auto masks = drop ? std::make_shared<std::vector<S>>(B * H * L * L, S(1))
                      : std::shared_ptr<std::vector<S>>{};

    if (opts.capture) {
        opts.capture->batch = B;
        opts.capture->heads = H;
        opts.capture->len = L;
        if (opts.capture->want_scores) opts.capture->scores.assign(B * H * L * L, S(0));
        if (opts.capture->want_probs) opts.capture->probs.assign(B * H * L * L, S(0));
        if (opts.capture->want_score_grads) opts.capture->score_grads.assign(B * H * L * L, S(0));
    }

    std::vector<S> out(B * L * H * dv, S(0));
    std::vector<S> srow(L);
    // per-head bias as a function of the offset i-j, materialized once
    const bool has_bias = opts.bias && opts.bias->kind != AttnBiasKind::None;
    std::vector<S> bias_by_delta;
    if (has_bias) {
        bias_by_delta.resize(H * L);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t delta = 0; delta < L; ++delta)
                bias_by_delta[h * L + delta] = bias_value(opts.bias, h, delta, 0);
    }
    RowMat<S> s_full(L, L), a_eff(L, L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            if (opts.head_mask && (*opts.head_mask)[h]) continue;
            StridedCMap<S> qm(q.value().data() + b * L * H * dqk + h * dqk, L, dqk,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dqk)));
            StridedCMap<S> km(k.value().data() + b * L * H * dqk + h * dqk, L, dqk,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dqk)));
            StridedCMap<S> vm(v.value().data() + b * L * H * dv + h * dv, L, dv,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dv)));
            s_full.noalias() = qm * km.transpose() * opts.scale;
            S* a_base = probs->data() + (b * H + h) * L * L;
            for (std::size_t i = 0; i < L; ++i) {
                const Eigen::Index len = static_cast<Eigen::Index>(i + 1);
                ArrMap<S> sr(srow.data(), len);
                sr = s_full.row(static_cast<Eigen::Index>(i)).head(len).array();
                if (has_bias) {
                    sr += CArrMap<S>(bias_by_delta.data() + h * L, len).reverse();
                }
                if (opts.capture && opts.capture->want_scores) {
                    S* dst = opts.capture->scores.data() + (b * H + h) * L * L + i * L;
                    ArrMap<S>(dst, len) = sr;
                }
                ArrMap<S> arow(a_base + i * L, len);
                S mx = srow[0];
                for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, srow[j]);
                arow = (sr - mx).exp();
                S denom = S(0);
                for (std::size_t j = 0; j <= i; ++j) denom += arow[static_cast<Eigen::Index>(j)];
                arow /= denom;
            }
            if (opts.capture && opts.capture->want_probs) {
                std::copy(a_base, a_base + L * L,
                          opts.capture->probs.data() + (b * H + h) * L * L);
            }
            a_eff = Eigen::Map<const RowMat<S>>(a_base, L, L);
            if (drop) {
                const std::uint64_t drop_threshold = static_cast<std::uint64_t>(
                    static_cast<double>(opts.dropout_p) * 18446744073709551616.0);
                const S inv_keep = S(1) / (S(1) - opts.dropout_p);
                S* mk = masks->data() + (b * H + h) * L * L;
                for (std::size_t i = 0; i < L; ++i)
                    for (std::size_t j = 0; j <= i; ++j)
                        mk[i * L + j] =
                            opts.dropout_rng->next_u64() >= drop_threshold ? inv_keep : S(0);
                for (std::size_t i = 0; i < L; ++i) {
                    const Eigen::Index len = static_cast<Eigen::Index>(i + 1);
                    a_eff.row(static_cast<Eigen::Index>(i)).head(len).array() *=
                        CArrMap<S>(mk + i * L, len).transpose();
                }
            }
            StridedMap<S> om(out.data() + b * L * H * dv + h * dv, L, dv,
                             Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dv)));
            om.noalias() = a_eff * vm;
        }
    }

    const bool has_table = opts.bias && opts.bias->kind == AttnBiasKind::LearnedTable;
    const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                    (has_table && opts.bias->table.requires_grad());
    std::vector<std::size_t> out_shape{B * L, H * dv};
    if (!tape || !rg) return Tensor<S>::from_data(std::move(out_shape), std::move(out), rg);

    auto iq = q.impl(), ik = k.impl(), iv = v.impl();
    std::shared_ptr<typename Tensor<S>::Impl> itab;
    std::shared_ptr<std::vector<std::size_t>> off_map;
    std::size_t max_off = 0;
    if (has_table) {
        itab = opts.bias->table.impl();
        max_off = opts.bias->max_offset;
        if (opts.bias->offset_map) {
            off_map = std::make_shared<std::vector<std::size_t>>(*opts.bias->offset_map);
        }
    }
    auto head_mask =
        opts.head_mask ? std::make_shared<std::vector<std::uint8_t>>(*opts.head_mask)
                       : std::shared_ptr<std::vector<std::uint8_t>>{};
    AttnCapture<S>* capture = opts.capture;
    const S sc = opts.scale;
    const S p = opts.dropout_p;
    std::vector<const Tensor<S>*> ins{&q, &k, &v};
    if (has_table) ins.push_back(&opts.bias->table);

    return record_op<S>(
        tape, "attention_core", std::move(out_shape), std::move(out), ins, rg, [&](Tensor<S>& o) {
            auto io = o.impl();
            return [io, iq, ik, iv, itab, off_map, probs, masks, head_mask, capture, sc, p, B, H,
                    L, dqk, dv, max_off]() {
                const bool drop_ = p > S(0) && masks != nullptr;
                if (iq->requires_grad) Tape<S>::ensure_grad(iq);
                if (ik->requires_grad) Tape<S>::ensure_grad(ik);
                if (iv->requires_grad) Tape<S>::ensure_grad(iv);
                if (itab && itab->requires_grad) Tape<S>::ensure_grad(itab);
                RowMat<S> da(L, L), ds(L, L), a_eff(L, L);
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t h = 0; h < H; ++h) {
                        if (head_mask && (*head_mask)[h]) continue;
                        StridedCMap<S> go(io->grad.data() + b * L * H * dv + h * dv, L, dv,
                                          Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dv)));
                        StridedCMap<S> vm(iv->value.data() + b * L * H * dv + h * dv, L, dv,
                                          Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dv)));
                        const S* a_base = probs->data() + (b * H + h) * L * L;
                        CMapM<S> am(a_base, L, L);

                        da.noalias() = go * vm.transpose();  // dA (post-dropout)
                        a_eff = am;
                        if (drop_) {
                            const S* mk = masks->data() + (b * H + h) * L * L;
                            for (std::size_t i = 0; i < L; ++i) {
                                const Eigen::Index len = static_cast<Eigen::Index>(i + 1);
                                a_eff.row(static_cast<Eigen::Index>(i)).head(len).array() *=
                                    CArrMap<S>(mk + i * L, len).transpose();
                            }
                        }
                        if (iv->requires_grad) {
                            StridedMap<S> dvm(
                                iv->grad.data() + b * L * H * dv + h * dv, L, dv,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dv)));
                            dvm.noalias() += a_eff.transpose() * go;
                        }
                        if (drop_) {
                            const S* mk = masks->data() + (b * H + h) * L * L;
                            for (std::size_t i = 0; i < L; ++i) {
                                const Eigen::Index len = static_cast<Eigen::Index>(i + 1);
                                da.row(static_cast<Eigen::Index>(i)).head(len).array() *=
                                    CArrMap<S>(mk + i * L, len).transpose();
                            }
                        }
                        ds.setZero();
                        for (std::size_t i = 0; i < L; ++i) {
                            const Eigen::Index len = static_cast<Eigen::Index>(i + 1);
                            CArrMap<S> arow(a_base + i * L, len);
                            auto darow = da.row(static_cast<Eigen::Index>(i)).head(len).array();
                            S dot = S(0);
                            for (std::size_t j = 0; j <= i; ++j)
                                dot += da(static_cast<Eigen::Index>(i),
                                          static_cast<Eigen::Index>(j)) *
                                       arow[static_cast<Eigen::Index>(j)];
                            ds.row(static_cast<Eigen::Index>(i)).head(len).array() =
                                arow.transpose() * (darow - dot);
                        }
                        if (capture && capture->want_score_grads) {
                            S* dst = capture->score_grads.data() + (b * H + h) * L * L;
                            for (std::size_t i = 0; i < L; ++i)
                                for (std::size_t j = 0; j <= i; ++j)
                                    dst[i * L + j] = ds(static_cast<Eigen::Index>(i),
                                                        static_cast<Eigen::Index>(j));
                        }
                        if (itab && itab->requires_grad) {
                            for (std::size_t i = 0; i < L; ++i)
                                for (std::size_t j = 0; j <= i; ++j) {
                                    const std::size_t col = off_map
                                                                ? (*off_map)[i - j]
                                                                : std::min(i - j, max_off);
                                    itab->grad[h * (max_off + 1) + col] +=
                                        ds(static_cast<Eigen::Index>(i),
                                           static_cast<Eigen::Index>(j));
                                }
                        }
                        StridedCMap<S> qm(
                            iq->value.data() + b * L * H * dqk + h * dqk, L, dqk,
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dqk)));
                        StridedCMap<S> km(
                            ik->value.data() + b * L * H * dqk + h * dqk, L, dqk,
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dqk)));
                        if (iq->requires_grad) {
                            StridedMap<S> dq(
                                iq->grad.data() + b * L * H * dqk + h * dqk, L, dqk,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dqk)));
                            dq.noalias() += sc * (ds * km);
                        }
                        if (ik->requires_grad) {
                            StridedMap<S> dk(
                                ik->grad.data() + b * L * H * dqk + h * dqk, L, dqk,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(H * dqk)));
                            dk.noalias() += sc * (ds.transpose() * qm);
                        }
                    }
                }
            };
        });
}

template <typename S>
Tensor<S> rope_rotate_rows(Tape<S>* tape, const Tensor<S>& x, std::size_t batch, std::size_t len,
                           std::size_t heads, std::size_t d_head,
                           const std::vector<S>& cos_table, const std::vector<S>& sin_table,
                           std::size_t rope_pairs, const std::vector<std::uint8_t>& head_enabled) {
    require_matrix("rope_rotate_rows", x);
    if (d_head % 2 != 0) throw DimensionError("rope_rotate_rows: head dim must be even");
    if (x.dim(0) != batch * len || x.dim(1) != heads * d_head) {
        throw DimensionError("rope_rotate_rows: tensor does not match B/L/H/d layout");
    }
    const std::size_t half = d_head / 2;
    if (rope_pairs > half) throw DimensionError("rope_rotate_rows: rope_pairs exceeds d_head/2");
    if (head_enabled.size() != heads) {
        throw DimensionError("rope_rotate_rows: need one enable flag per head");
    }
    if (cos_table.size() < len * half || sin_table.size() < len * half) {
        throw DimensionError("rope_rotate_rows: cos/sin tables shorter than sequence");
    }

    const std::size_t cols = heads * d_head;
    std::vector<S> out(x.value());
    for (std::size_t r = 0; r < batch * len; ++r) {
        const std::size_t pos = r % len;
        const S* cs = cos_table.data() + pos * half;
        const S* sn = sin_table.data() + pos * half;
        for (std::size_t h = 0; h < heads; ++h) {
            if (!head_enabled[h]) continue;
            S* row = out.data() + r * cols + h * d_head;
            for (std::size_t t = 0; t < rope_pairs; ++t) {
                const S a = row[2 * t], b = row[2 * t + 1];
                row[2 * t] = a * cs[t] - b * sn[t];
                row[2 * t + 1] = a * sn[t] + b * cs[t];
            }
        }
    }
    const bool rg = x.requires_grad();
    if (!tape || !rg) return Tensor<S>::from_data(x.shape(), std::move(out), rg);
    auto cs_copy = std::make_shared<std::vector<S>>(cos_table);
    auto sn_copy = std::make_shared<std::vector<S>>(sin_table);
    auto enabled = std::make_shared<std::vector<std::uint8_t>>(head_enabled);
    return record_op<S>(
        tape, "rope_rotate_rows", x.shape(), std::move(out), {&x}, rg, [&](Tensor<S>& o) {
            auto ix = x.impl(), io = o.impl();
            return [ix, io, cs_copy, sn_copy, enabled, batch, len, heads, d_head, rope_pairs]() {
                Tape<S>::ensure_grad(ix);
                const std::size_t half = d_head / 2;
                const std::size_t cols = heads * d_head;
                // the adjoint of a rotation is the rotation by the negative angle
                for (std::size_t r = 0; r < batch * len; ++r) {
                    const std::size_t pos = r % len;
                    const S* cs = cs_copy->data() + pos * half;
                    const S* sn = sn_copy->data() + pos * half;
                    for (std::size_t h = 0; h < heads; ++h) {
                        const S* g = io->grad.data() + r * cols + h * d_head;
                        S* dx = ix->grad.data() + r * cols + h * d_head;
                        if (!(*enabled)[h]) {
                            for (std::size_t t = 0; t < d_head; ++t) dx[t] += g[t];
                            continue;
                        }
                        for (std::size_t t = 0; t < rope_pairs; ++t) {
                            const S ga = g[2 * t], gb = g[2 * t + 1];
                            dx[2 * t] += ga * cs[t] + gb * sn[t];
                            dx[2 * t + 1] += -ga * sn[t] + gb * cs[t];
                        }
                        for (std::size_t t = 2 * rope_pairs; t < d_head; ++t) dx[t] += g[t];
                    }
                }
            };
        });
}

// ---- explicit instantiation ---------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define PELAB_INSTANTIATE_OPS(S)                                                              \
    template Tensor<S> add<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);                 \
    template Tensor<S> sub<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);                 \
    template Tensor<S> mul<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);                 \
    template Tensor<S> scale<S>(Tape<S>*, const Tensor<S>&, S);                              \
    template Tensor<S> add_rowvec<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);          \
    template Tensor<S> matmul<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);              \
    template Tensor<S> matmul_nt<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);           \
    template Tensor<S> transpose<S>(Tape<S>*, const Tensor<S>&);                             \
    template Tensor<S> relu<S>(Tape<S>*, const Tensor<S>&);                                  \
    template Tensor<S> softmax_rows<S>(Tape<S>*, const Tensor<S>&);                          \
    template Tensor<S> layer_norm<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&,           \
                                     const Tensor<S>&, S);                                   \
    template Tensor<S> cross_entropy_loss<S>(Tape<S>*, const Tensor<S>&,                     \
                                             const std::vector<int>&, Reduction);            \
    template Tensor<S> embedding_lookup<S>(Tape<S>*, const Tensor<S>&,                       \
                                           const std::vector<int>&);                         \
    template Tensor<S> gather_rows<S>(Tape<S>*, const Tensor<S>&,                            \
                                      const std::vector<std::size_t>&);                      \
    template Tensor<S> sum_all<S>(Tape<S>*, const Tensor<S>&);                               \
    template Tensor<S> dropout<S>(Tape<S>*, const Tensor<S>&, S, Rng*);                      \
    template Tensor<S> concat_head_slices<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&,   \
                                             std::size_t);                                   \
    template Tensor<S> attention_core<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&,       \
                                         const Tensor<S>&, const AttnOptions<S>&);           \
    template Tensor<S> rope_rotate_rows<S>(Tape<S>*, const Tensor<S>&, std::size_t,          \
                                           std::size_t, std::size_t, std::size_t,            \
                                           const std::vector<S>&, const std::vector<S>&,     \
                                           std::size_t, const std::vector<std::uint8_t>&);

PELAB_INSTANTIATE_OPS(float)
PELAB_INSTANTIATE_OPS(double)

#undef PELAB_INSTANTIATE_OPS

}  // namespace pelab
