#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pelab/errors.hpp"
#include "pelab/rng.hpp"

namespace pelab {

template <typename S>
class Tape;

// Dense row-major tensor. Values are immutable after construction except
// through mutable_value() (used by initializers and the optimizer); the grad
// slot is written by Tape::backward.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, S fill = S(0), bool requires_grad = false);

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<S> data,
                            bool requires_grad = false);
    static Tensor scalar(S value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->value.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    const std::vector<S>& value() const { return impl_->value; }
    std::vector<S>& mutable_value() { return impl_->value; }

    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<S>& grad() const;
    void zero_grad();

    // 2-D convenience accessors (bounds-checked).
    S at(std::size_t i, std::size_t j) const;
    S item() const;

    int node() const { return impl_->node; }

    struct Impl {
        std::vector<std::size_t> shape;
        std::vector<S> value;
        std::vector<S> grad;  // empty until backward touches it
        bool requires_grad = false;
        int node = -1;  // -1: leaf
    };
    const std::shared_ptr<Impl>& impl() const { return impl_; }

private:
    friend class Tape<S>;
    std::shared_ptr<Impl> impl_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward replays them exactly once in
// reverse. One tape per forward/backward; confined to a single worker.
template <typename S>
class Tape {
public:
    struct Node {
        const char* kind;
        std::array<int, 4> inputs;  // node ids of inputs, -1 for leaves/unused
        int output;
        std::shared_ptr<typename Tensor<S>::Impl> out_impl;
        std::function<void()> backward;
        int visits = 0;  // diagnostics for the replay invariant
    };

    std::size_t num_nodes() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    bool backward_run() const { return backward_run_; }

    // Runs reverse-mode accumulation from a scalar loss. Throws ContractError
    // when the loss is not scalar, is not on this tape, or when called twice.
    void backward(const Tensor<S>& loss);

    // Registers an op result; the backward closure is attached afterwards so
    // it can capture the output tensor.
    Tensor<S> record(const char* kind, std::vector<std::size_t> shape, std::vector<S> value,
                     const std::vector<const Tensor<S>*>& inputs, bool requires_grad);
    void set_backward(const Tensor<S>& out, std::function<void()> fn);

    static void ensure_grad(const std::shared_ptr<typename Tensor<S>::Impl>& impl) {
        if (impl->grad.empty()) impl->grad.assign(impl->value.size(), S(0));
    }

private:
    std::vector<Node> nodes_;
    bool backward_run_ = false;
};

using Tape32 = Tape<float>;
using Tape64 = Tape<double>;

// ---- ops ----------------------------------------------------------------
// All ops validate shapes at the boundary and throw DimensionError on
// mismatch. `tape` may be null for inference-only evaluation; gradients are
// then not recorded.

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, S factor);

// x: [r x c], v: [c]; adds v to every row (the only broadcast in the engine).
template <typename S>
Tensor<S> add_rowvec(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& v);

template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);
// a · b^T without materializing the transpose.
template <typename S>
Tensor<S> matmul_nt(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> transpose(Tape<S>* tape, const Tensor<S>& a);

template <typename S>
Tensor<S> relu(Tape<S>* tape, const Tensor<S>& a);

// Row-stable softmax over the last dimension of a 2-D tensor.
template <typename S>
Tensor<S> softmax_rows(Tape<S>* tape, const Tensor<S>& s);

template <typename S>
Tensor<S> layer_norm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = S(1e-5));

enum class Reduction { Mean, Sum };

template <typename S>
Tensor<S> cross_entropy_loss(Tape<S>* tape, const Tensor<S>& logits,
                             const std::vector<int>& labels,
                             Reduction reduction = Reduction::Mean);

template <typename S>
Tensor<S> embedding_lookup(Tape<S>* tape, const Tensor<S>& table, const std::vector<int>& ids);

template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, const Tensor<S>& x, const std::vector<std::size_t>& rows);

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& a);

// Inverted-scale dropout with an explicit generator; pass p=0 to bypass.
template <typename S>
Tensor<S> dropout(Tape<S>* tape, const Tensor<S>& a, S p, Rng* rng);

// Interleaves per-head column slices: a [r x H*da], b [r x H*db] ->
// [r x H*(da+db)] with head h holding [a_h ; b_h].
template <typename S>
Tensor<S> concat_head_slices(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b,
                             std::size_t heads);

// ---- fused multi-head attention ------------------------------------------

// Per-head additive logit bias.
enum class AttnBiasKind { None, Alibi, LearnedTable };

template <typename S>
struct AttnBias {
    AttnBiasKind kind = AttnBiasKind::None;
    std::vector<S> alibi_slopes;  // [H], used when kind == Alibi
    Tensor<S> table;              // [H x (max_offset+1)], used when kind == LearnedTable
    std::size_t max_offset = 0;   // clip for the learned table
    // Optional (i-j) -> column remap (log bucketing); identity-clipped when null.
    const std::vector<std::size_t>* offset_map = nullptr;
};

template <typename S>
struct AttnCapture {
    bool want_scores = false;
    bool want_probs = false;
    bool want_score_grads = false;
    std::size_t batch = 0, heads = 0, len = 0;
    std::vector<S> scores;       // [B,H,L,L] pre-softmax (0 above the diagonal)
    std::vector<S> probs;        // [B,H,L,L] post-softmax
    std::vector<S> score_grads;  // [B,H,L,L] dLoss/dS, filled during backward

    S score(std::size_t b, std::size_t h, std::size_t i, std::size_t j) const {
        return scores[((b * heads + h) * len + i) * len + j];
    }
    S prob(std::size_t b, std::size_t h, std::size_t i, std::size_t j) const {
        return probs[((b * heads + h) * len + i) * len + j];
    }
    S score_grad(std::size_t b, std::size_t h, std::size_t i, std::size_t j) const {
        return score_grads[((b * heads + h) * len + i) * len + j];
    }
};

template <typename S>
struct AttnOptions {
    std::size_t batch = 0, heads = 0, len = 0;
    std::size_t d_qk = 0, d_v = 0;
    S scale = S(1);
    const AttnBias<S>* bias = nullptr;
    const std::vector<std::uint8_t>* head_mask = nullptr;  // [H], 1 = zero this head
    S dropout_p = S(0);
    Rng* dropout_rng = nullptr;
    AttnCapture<S>* capture = nullptr;  // must outlive the backward pass
};

// Causal softmax(scale * Q K^T + bias) V over H heads laid out contiguously:
// Q,K: [B*L x H*d_qk], V: [B*L x H*d_v] -> out [B*L x H*d_v]. Masked heads
// contribute exact zeros to their output slice.
template <typename S>
Tensor<S> attention_core(Tape<S>* tape, const Tensor<S>& q, const Tensor<S>& k,
                         const Tensor<S>& v, const AttnOptions<S>& opts);

// Applies the position-dependent pairwise rotation to the first rope_pairs
// coordinate pairs of each enabled head slice. x: [B*L x H*d_head]; the
// position of row r is r % L. cos/sin tables: [max_len x d_head/2].
template <typename S>
Tensor<S> rope_rotate_rows(Tape<S>* tape, const Tensor<S>& x, std::size_t batch, std::size_t len,
                           std::size_t heads, std::size_t d_head,
                           const std::vector<S>& cos_table, const std::vector<S>& sin_table,
                           std::size_t rope_pairs, const std::vector<std::uint8_t>& head_enabled);

// Extern instantiations (defined in tensor.cpp) keep this header light.
extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace pelab
