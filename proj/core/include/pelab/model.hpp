#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pelab/pe.hpp"
#include "pelab/tensor.hpp"

namespace pelab {

struct ModelConfig {
    std::size_t vocab_size = 574;
    std::size_t d_model = 256;
    std::size_t d_ff = 512;
    std::size_t num_heads = 16;
    std::size_t num_layers = 6;
    double dropout = 0.1;
    std::size_t max_len = 128;
    PeSpec pe;
    std::size_t num_classes = 0;

    std::size_t d_head() const { return d_model / num_heads; }
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// (layer, head) pairs whose attention outputs are zeroed before W_O.
struct HeadMask {
    std::vector<std::pair<std::size_t, std::size_t>> zeroed;

    bool empty() const { return zeroed.empty(); }
    void validate(const ModelConfig& cfg) const;
    std::vector<std::uint8_t> layer_mask(std::size_t layer, std::size_t num_heads) const;
};

// Per-position vectors subtracted from a layer's input hidden states, tiled
// over the batch.
template <typename S>
struct Intervention {
    std::size_t layer = 0;
    std::vector<S> delta;  // [L x d_model]
};

template <typename S>
struct ActivationTap {
    std::vector<Tensor<S>> layer_inputs;  // per-layer [B*L x d_model]
    std::vector<Tensor<S>> values;        // per-layer V tensors [B*L x H*d_v]
    std::vector<Tensor<S>> attn_heads;    // per-layer pre-W_O head outputs
};

template <typename S>
struct ForwardOptions {
    const HeadMask* head_mask = nullptr;
    bool training = false;
    Rng* dropout_rng = nullptr;
    ActivationTap<S>* taps = nullptr;
    std::vector<AttnCapture<S>>* captures = nullptr;  // size num_layers when set
    const std::vector<Intervention<S>>* interventions = nullptr;
};

template <typename S>
struct LayerParams {
    Tensor<S> ln1_gain, ln1_bias;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln2_gain, ln2_bias;
    Tensor<S> w1, b1, w2, b2;
    Tensor<S> rel_bias;  // T5 table [H x (max_offset+1)]
    // MLA projections
    Tensor<S> w_dkv, w_uq, w_ur, w_uk, w_uv;
};

// Causal Transformer decoder with pluggable PE, per-head output masking, and
// hidden-state taps. The classification readout is a linear map of the final
// position's last-layer hidden state.
template <typename S>
class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const RopeKernel& rope_kernel() const { return kernel_; }
    const Mat& sin_table() const { return sin_table_; }

    // tokens: B*L ids, row-major by sample. Returns [B x num_classes].
    Tensor<S> forward(Tape<S>* tape, const std::vector<int>& tokens, std::size_t batch,
                      std::size_t len, const ForwardOptions<S>& opts = {}) const;

    std::vector<std::pair<std::string, Tensor<S>*>> named_params();
    std::vector<std::pair<std::string, const Tensor<S>*>> named_params() const;
    std::size_t num_params() const;

    LayerParams<S>& layer(std::size_t i) { return layers_.at(i); }
    const LayerParams<S>& layer(std::size_t i) const { return layers_.at(i); }
    Tensor<S>& token_embedding() { return tok_embed_; }
    const Tensor<S>& token_embedding() const { return tok_embed_; }

    void save_checkpoint(const std::string& path_prefix) const;
    static TransformerModel load_checkpoint(const std::string& path_prefix);

    // Norm of the sinusoidal position row at each position (for norm-matched
    // random interventions). Throws ContractError when the PE has no explicit
    // position vectors.
    Intervention<S> make_pi_intervention(std::size_t layer, std::size_t len) const;
    Intervention<S> make_random_intervention(std::size_t layer, std::size_t len,
                                             std::uint64_t seed) const;

private:
    void init_params(std::uint64_t seed);
    std::vector<std::uint8_t> rope_enabled_heads(std::size_t layer) const;

    ModelConfig cfg_;
    Tensor<S> tok_embed_;   // [vocab x d_model]
    Tensor<S> pos_embed_;   // learned table, RandomLearned only
    Tensor<S> final_ln_gain_, final_ln_bias_;
    Tensor<S> w_out_, b_out_;
    std::vector<LayerParams<S>> layers_;
    RopeKernel kernel_;     // rope frequencies at the relevant head width
    Mat sin_table_;         // sinusoidal table when the PE adds p_i
    std::vector<S> sin_rows_;             // sin_table_ cast to S, row-major
    std::vector<S> rope_cos_, rope_sin_;  // kernel tables cast to S
};

using Model32 = TransformerModel<float>;
using Model64 = TransformerModel<double>;

extern template class TransformerModel<float>;
extern template class TransformerModel<double>;

}  // namespace pelab
