#include "pelab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace pelab {

using nlohmann::json;

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || num_heads == 0 || num_layers == 0) {
        throw ConfigError("ModelConfig: zero-sized dimension");
    }
    if (d_model % num_heads != 0) {
        throw ConfigError("ModelConfig: d_model must be divisible by num_heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("ModelConfig: dropout must be in [0,1)");
    }
    if (num_classes == 0) throw ConfigError("ModelConfig: num_classes must be positive");
    if (max_len == 0) throw ConfigError("ModelConfig: max_len must be positive");
    pe.validate(num_layers, num_heads, d_head());
}

std::string ModelConfig::to_json() const {
    json j;
    j["vocab_size"] = vocab_size;
    j["d_model"] = d_model;
    j["d_ff"] = d_ff;
    j["num_heads"] = num_heads;
    j["num_layers"] = num_layers;
    j["dropout"] = dropout;
    j["max_len"] = max_len;
    j["num_classes"] = num_classes;
    j["pe"] = json::parse(pe.to_json());
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.d_ff = j.at("d_ff").get<std::size_t>();
    cfg.num_heads = j.at("num_heads").get<std::size_t>();
    cfg.num_layers = j.at("num_layers").get<std::size_t>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.max_len = j.at("max_len").get<std::size_t>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.pe = PeSpec::from_json(j.at("pe").dump());
    return cfg;
}

void HeadMask::validate(const ModelConfig& cfg) const {
    for (const auto& [layer, head] : zeroed) {
        if (layer >= cfg.num_layers || head >= cfg.num_heads) {
            throw IndexError("HeadMask: (layer,head) outside config ranges");
        }
    }
}

std::vector<std::uint8_t> HeadMask::layer_mask(std::size_t layer, std::size_t num_heads) const {
    std::vector<std::uint8_t> m(num_heads, 0);
    for (const auto& [l, h] : zeroed) {
        if (l == layer && h < num_heads) m[h] = 1;
    }
    return m;
}

// ---- construction -----------------------------------------------------------

namespace {

// T5-style causal log bucketing: exact buckets below half the table, then
// logarithmically spaced up to max_len.
std::vector<std::size_t> build_log_bucket_map(std::size_t max_len, std::size_t num_buckets) {
    std::vector<std::size_t> map(max_len, 0);
    const std::size_t exact = num_buckets / 2;
    for (std::size_t delta = 0; delta < max_len; ++delta) {
        if (delta < exact) {
            map[delta] = delta;
        } else {
            const double frac = std::log(static_cast<double>(delta) /
                                         static_cast<double>(exact)) /
                                std::log(static_cast<double>(max_len) /
                                         static_cast<double>(exact));
            std::size_t b = exact + static_cast<std::size_t>(
                                        frac * static_cast<double>(num_buckets - exact));
            map[delta] = std::min(b, num_buckets - 1);
        }
    }
    return map;
}

}  // namespace

template <typename S>
TransformerModel<S>::TransformerModel(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
    if (cfg_.pe.kind == PeKind::Mla) {
        // default split: half no-position path, half rotary, bottleneck d_model/2
        if (cfg_.pe.mla.d_nope == 0 && cfg_.pe.mla.d_rope == 0) {
            cfg_.pe.mla.d_nope = cfg_.d_head() / 2;
            cfg_.pe.mla.d_rope = cfg_.d_head() / 2;
        }
        if (cfg_.pe.mla.d_compress == 0) cfg_.pe.mla.d_compress = cfg_.d_model / 2;
    }
    cfg_.validate();
    const std::size_t rope_width =
        cfg_.pe.kind == PeKind::Mla ? cfg_.pe.mla.d_rope : cfg_.d_head();
    if (cfg_.pe.uses_rope() && rope_width > 0) {
        kernel_ = RopeKernel::build(rope_width, cfg_.max_len, cfg_.pe.rope_theta_base);
        rope_cos_.assign(kernel_.cos_table.begin(), kernel_.cos_table.end());
        rope_sin_.assign(kernel_.sin_table.begin(), kernel_.sin_table.end());
    }
    if (cfg_.pe.adds_sinusoidal()) {
        sin_table_ = sinusoidal_table(cfg_.max_len, cfg_.d_model);
        sin_rows_.resize(sin_table_.a.size());
        for (std::size_t i = 0; i < sin_rows_.size(); ++i)
            sin_rows_[i] = static_cast<S>(sin_table_.a[i]);
    }
    init_params(seed);
}

template <typename S>
void TransformerModel<S>::init_params(std::uint64_t seed) {
    Rng rng(seed);
    auto xavier = [&rng](std::size_t in, std::size_t out) {
        const double a = std::sqrt(6.0 / static_cast<double>(in + out));
        Tensor<S> t({in, out}, S(0), true);
        for (auto& v : t.mutable_value()) v = static_cast<S>(rng.uniform(-a, a));
        return t;
    };
    auto gaussian = [&rng](std::vector<std::size_t> shape, double stddev) {
        Tensor<S> t(std::move(shape), S(0), true);
        for (auto& v : t.mutable_value()) v = static_cast<S>(rng.normal(0.0, stddev));
        return t;
    };
    auto zeros = [](std::vector<std::size_t> shape) { return Tensor<S>(std::move(shape), S(0), true); };
    auto ones = [](std::vector<std::size_t> shape) { return Tensor<S>(std::move(shape), S(1), true); };

    const std::size_t d = cfg_.d_model;
    tok_embed_ = gaussian({cfg_.vocab_size, d}, 0.02);
    if (cfg_.pe.kind == PeKind::RandomLearned) {
        pos_embed_ = gaussian({cfg_.max_len, d}, 0.02);
    }
    layers_.clear();
    layers_.reserve(cfg_.num_layers);
    const bool mla = cfg_.pe.kind == PeKind::Mla;
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
        LayerParams<S> p;
        p.ln1_gain = ones({d});
        p.ln1_bias = zeros({d});
        if (mla) {
            const std::size_t dn = cfg_.pe.mla.d_nope, dr = cfg_.pe.mla.d_rope;
            const std::size_t dc = cfg_.pe.mla.d_compress;
            const std::size_t h = cfg_.num_heads;
            p.w_dkv = xavier(d, dc);
            p.w_uq = xavier(d, h * dn);
            p.w_ur = xavier(d, h * dr);
            p.w_uk = xavier(dc, h * dn);
            p.w_uv = xavier(dc, h * cfg_.d_head());
        } else {
            p.wq = xavier(d, d);
            p.bq = zeros({d});
            p.wk = xavier(d, d);
            p.bk = zeros({d});
            p.wv = xavier(d, d);
            p.bv = zeros({d});
        }
        p.wo = xavier(d, d);
        p.bo = zeros({d});
        p.ln2_gain = ones({d});
        p.ln2_bias = zeros({d});
        p.w1 = xavier(d, cfg_.d_ff);
        p.b1 = zeros({cfg_.d_ff});
        p.w2 = xavier(cfg_.d_ff, d);
        p.b2 = zeros({d});
        if (cfg_.pe.kind == PeKind::RelativeT5) {
            const std::size_t max_off =
                cfg_.pe.rel_max_offset ? cfg_.pe.rel_max_offset : cfg_.max_len - 1;
            p.rel_bias = zeros({cfg_.num_heads, max_off + 1});
        }
        layers_.push_back(std::move(p));
    }
    final_ln_gain_ = ones({d});
    final_ln_bias_ = zeros({d});
    w_out_ = xavier(d, cfg_.num_classes);
    b_out_ = zeros({cfg_.num_classes});
}

template <typename S>
std::vector<std::uint8_t> TransformerModel<S>::rope_enabled_heads(std::size_t layer) const {
    std::vector<std::uint8_t> enabled(cfg_.num_heads, 0);
    switch (cfg_.pe.kind) {
        case PeKind::Rope:
        case PeKind::HybridAbsRope:
        case PeKind::Mla:
            std::fill(enabled.begin(), enabled.end(), 1);
            break;
        case PeKind::PartialRope:
            for (std::size_t h = 0; h < cfg_.pe.partial_rope_heads[layer]; ++h) enabled[h] = 1;
            break;
        default:
            break;
    }
    return enabled;
}

// ---- forward ------------------------------------------------------------------

template <typename S>
Tensor<S> TransformerModel<S>::forward(Tape<S>* tape, const std::vector<int>& tokens,
                                       std::size_t batch, std::size_t len,
                                       const ForwardOptions<S>& opts) const {
    if (len == 0 || len > cfg_.max_len) {
        throw DimensionError("forward: sequence length must be in [1, max_len]");
    }
    if (tokens.size() != batch * len) {
        throw DimensionError("forward: tokens must hold batch*len ids");
    }
    if (opts.head_mask) opts.head_mask->validate(cfg_);
    if (opts.captures && opts.captures->size() != cfg_.num_layers) {
        throw ContractError("forward: captures vector must have one slot per layer");
    }
    const std::size_t d = cfg_.d_model;
    const std::size_t heads = cfg_.num_heads;
    Rng* drop_rng = opts.training ? opts.dropout_rng : nullptr;
    const S p_drop = static_cast<S>(cfg_.dropout);

    Tensor<S> h = embedding_lookup(tape, tok_embed_, tokens);

    if (cfg_.pe.adds_sinusoidal()) {
        std::vector<S> tile(batch * len * d);
        for (std::size_t r = 0; r < batch * len; ++r) {
            const std::size_t pos = r % len;
            std::copy(sin_rows_.begin() + pos * d, sin_rows_.begin() + (pos + 1) * d,
                      tile.begin() + r * d);
        }
        Tensor<S> pos_tile = Tensor<S>::from_data({batch * len, d}, std::move(tile));
        h = add(tape, h, pos_tile);
    } else if (cfg_.pe.kind == PeKind::RandomLearned) {
        std::vector<int> pos_ids(batch * len);
        for (std::size_t r = 0; r < batch * len; ++r) pos_ids[r] = static_cast<int>(r % len);
        h = add(tape, h, embedding_lookup(tape, pos_embed_, pos_ids));
    }

    const bool mla = cfg_.pe.kind == PeKind::Mla;
    const std::size_t d_head = cfg_.d_head();
    std::vector<std::size_t> last_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) last_rows[b] = b * len + len - 1;

    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
        if (opts.interventions) {
            for (const auto& iv : *opts.interventions) {
                if (iv.layer != l) continue;
                if (iv.delta.size() != len * d) {
                    throw DimensionError("forward: intervention delta must be L x d_model");
                }
                std::vector<S> tile(batch * len * d);
                for (std::size_t r = 0; r < batch * len; ++r) {
                    const std::size_t pos = r % len;
                    std::copy(iv.delta.begin() + pos * d, iv.delta.begin() + (pos + 1) * d,
                              tile.begin() + r * d);
                }
                Tensor<S> delta_tile = Tensor<S>::from_data({batch * len, d}, std::move(tile));
                h = sub(tape, h, delta_tile);
            }
        }
        if (opts.taps) opts.taps->layer_inputs.push_back(h);

        const LayerParams<S>& lp = layers_[l];
        Tensor<S> a_in = layer_norm(tape, h, lp.ln1_gain, lp.ln1_bias, S(1e-5));

        Tensor<S> q, k, v;
        std::size_t dqk = d_head;
        std::vector<std::uint8_t> rope_heads = rope_enabled_heads(l);
        const bool any_rope = cfg_.pe.uses_rope() &&
                              std::any_of(rope_heads.begin(), rope_heads.end(),
                                          [](std::uint8_t e) { return e != 0; });
        if (mla) {
            const std::size_t dn = cfg_.pe.mla.d_nope, dr = cfg_.pe.mla.d_rope;
            dqk = dn + dr;
            Tensor<S> c = matmul(tape, a_in, lp.w_dkv);
            Tensor<S> q_nope = matmul(tape, a_in, lp.w_uq);
            Tensor<S> rope_src = matmul(tape, a_in, lp.w_ur);
            Tensor<S> rope_rot =
                dr > 0 ? rope_rotate_rows(tape, rope_src, batch, len, heads, dr, rope_cos_,
                                          rope_sin_, dr / 2, rope_heads)
                       : rope_src;
            Tensor<S> k_nope = matmul(tape, c, lp.w_uk);
            if (dn == 0) {
                q = rope_rot;
                k = rope_rot;
            } else if (dr == 0) {
                q = q_nope;
                k = k_nope;
            } else {
                q = concat_head_slices(tape, q_nope, rope_rot, heads);
                k = concat_head_slices(tape, k_nope, rope_rot, heads);
            }
            v = matmul(tape, c, lp.w_uv);
        } else {
            q = add_rowvec(tape, matmul(tape, a_in, lp.wq), lp.bq);
            k = add_rowvec(tape, matmul(tape, a_in, lp.wk), lp.bk);
            v = add_rowvec(tape, matmul(tape, a_in, lp.wv), lp.bv);
            if (any_rope) {
                q = rope_rotate_rows(tape, q, batch, len, heads, d_head, rope_cos_, rope_sin_,
                                     d_head / 2, rope_heads);
                k = rope_rotate_rows(tape, k, batch, len, heads, d_head, rope_cos_, rope_sin_,
                                     d_head / 2, rope_heads);
            }
        }
        if (opts.taps) opts.taps->values.push_back(v);

        AttnBias<S> bias;
        std::vector<std::size_t> log_map;
        if (cfg_.pe.kind == PeKind::Alibi) {
            bias.kind = AttnBiasKind::Alibi;
            const std::vector<double> slopes = cfg_.pe.alibi_slopes.empty()
                                                   ? alibi_slopes_geometric(heads)
                                                   : cfg_.pe.alibi_slopes;
            bias.alibi_slopes.assign(slopes.begin(), slopes.end());
        } else if (cfg_.pe.kind == PeKind::RelativeT5) {
            bias.kind = AttnBiasKind::LearnedTable;
            bias.table = lp.rel_bias;
            bias.max_offset = lp.rel_bias.dim(1) - 1;
            if (cfg_.pe.rel_log_bucketing) {
                log_map = build_log_bucket_map(cfg_.max_len, bias.max_offset + 1);
                bias.offset_map = &log_map;
            }
        }

        std::vector<std::uint8_t> mask_l =
            opts.head_mask ? opts.head_mask->layer_mask(l, heads) : std::vector<std::uint8_t>{};

        AttnOptions<S> aopts;
        aopts.batch = batch;
        aopts.heads = heads;
        aopts.len = len;
        aopts.d_qk = dqk;
        aopts.d_v = d_head;
        aopts.scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dqk)));
        aopts.bias = bias.kind == AttnBiasKind::None ? nullptr : &bias;
        aopts.head_mask = mask_l.empty() ? nullptr : &mask_l;
        aopts.dropout_p = drop_rng ? p_drop : S(0);
        aopts.dropout_rng = drop_rng;
        aopts.capture = opts.captures ? &(*opts.captures)[l] : nullptr;

        Tensor<S> heads_out = attention_core(tape, q, k, v, aopts);
        if (opts.taps) opts.taps->attn_heads.push_back(heads_out);

        Tensor<S> attn_proj = add_rowvec(tape, matmul(tape, heads_out, lp.wo), lp.bo);
        h = add(tape, h, attn_proj);

        Tensor<S> f_in = layer_norm(tape, h, lp.ln2_gain, lp.ln2_bias, S(1e-5));
        Tensor<S> f1 = relu(tape, add_rowvec(tape, matmul(tape, f_in, lp.w1), lp.b1));
        if (drop_rng) f1 = dropout(tape, f1, p_drop, drop_rng);
        Tensor<S> f2 = add_rowvec(tape, matmul(tape, f1, lp.w2), lp.b2);
        h = add(tape, h, f2);
    }

    Tensor<S> hn = layer_norm(tape, h, final_ln_gain_, final_ln_bias_, S(1e-5));
    Tensor<S> readout = gather_rows(tape, hn, last_rows);
    return add_rowvec(tape, matmul(tape, readout, w_out_), b_out_);
}

// ---- parameters / checkpoints -----------------------------------------------------

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> TransformerModel<S>::named_params() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    auto push = [&out](const std::string& name, Tensor<S>& t) {
        if (t.defined()) out.emplace_back(name, &t);
    };
    push("tok_embed", tok_embed_);
    push("pos_embed", pos_embed_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerParams<S>& lp = layers_[l];
        push(p + "ln1_gain", lp.ln1_gain);
        push(p + "ln1_bias", lp.ln1_bias);
        push(p + "wq", lp.wq);
        push(p + "bq", lp.bq);
        push(p + "wk", lp.wk);
        push(p + "bk", lp.bk);
        push(p + "wv", lp.wv);
        push(p + "bv", lp.bv);
        push(p + "w_dkv", lp.w_dkv);
        push(p + "w_uq", lp.w_uq);
        push(p + "w_ur", lp.w_ur);
        push(p + "w_uk", lp.w_uk);
        push(p + "w_uv", lp.w_uv);
        push(p + "wo", lp.wo);
        push(p + "bo", lp.bo);
        push(p + "ln2_gain", lp.ln2_gain);
        push(p + "ln2_bias", lp.ln2_bias);
        push(p + "w1", lp.w1);
        push(p + "b1", lp.b1);
        push(p + "w2", lp.w2);
        push(p + "b2", lp.b2);
        push(p + "rel_bias", lp.rel_bias);
    }
    push("final_ln_gain", final_ln_gain_);
    push("final_ln_bias", final_ln_bias_);
    push("w_out", w_out_);
    push("b_out", b_out_);
    return out;
}

template <typename S>
std::vector<std::pair<std::string, const Tensor<S>*>> TransformerModel<S>::named_params() const {
    auto mut = const_cast<TransformerModel<S>*>(this)->named_params();
    std::vector<std::pair<std::string, const Tensor<S>*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

template <typename S>
std::size_t TransformerModel<S>::num_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_params()) n += t->size();
    return n;
}

template <typename S>
void TransformerModel<S>::save_checkpoint(const std::string& path_prefix) const {
    json manifest;
    manifest["dtype"] = sizeof(S) == 4 ? "f32" : "f64";
    manifest["config"] = json::parse(cfg_.to_json());
    json params = json::array();
    std::size_t offset = 0;
    std::ofstream blob(path_prefix + ".bin", std::ios::binary);
    if (!blob) throw IoError("save_checkpoint: cannot open " + path_prefix + ".bin");
    for (const auto& [name, t] : named_params()) {
        const std::size_t bytes = t->size() * sizeof(S);
        params.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset},
                          {"bytes", bytes}});
        blob.write(reinterpret_cast<const char*>(t->value().data()),
                   static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    manifest["params"] = params;
    std::ofstream mf(path_prefix + ".json");
    if (!mf) throw IoError("save_checkpoint: cannot open " + path_prefix + ".json");
    mf << manifest.dump(2) << "\n";
}

template <typename S>
TransformerModel<S> TransformerModel<S>::load_checkpoint(const std::string& path_prefix) {
    std::ifstream mf(path_prefix + ".json");
    if (!mf) throw IoError("load_checkpoint: cannot open " + path_prefix + ".json");
    json manifest = json::parse(mf);
    const std::string dtype = manifest.at("dtype").get<std::string>();
    if ((sizeof(S) == 4 && dtype != "f32") || (sizeof(S) == 8 && dtype != "f64")) {
        throw IoError("load_checkpoint: dtype mismatch, checkpoint is " + dtype);
    }
    ModelConfig cfg = ModelConfig::from_json(manifest.at("config").dump());
    TransformerModel<S> model(cfg, 0);
    std::ifstream blob(path_prefix + ".bin", std::ios::binary);
    if (!blob) throw IoError("load_checkpoint: cannot open " + path_prefix + ".bin");
    auto params = model.named_params();
    std::size_t idx = 0;
    for (const auto& jp : manifest.at("params")) {
        const std::string name = jp.at("name").get<std::string>();
        if (idx >= params.size() || params[idx].first != name) {
            throw IoError("load_checkpoint: parameter order mismatch at " + name);
        }
        Tensor<S>& t = *params[idx].second;
        const std::size_t bytes = jp.at("bytes").get<std::size_t>();
        if (bytes != t.size() * sizeof(S)) {
            throw IoError("load_checkpoint: size mismatch for " + name);
        }
        blob.seekg(static_cast<std::streamoff>(jp.at("offset").get<std::size_t>()));
        blob.read(reinterpret_cast<char*>(t.mutable_value().data()),
                  static_cast<std::streamsize>(bytes));
        if (!blob) throw IoError("load_checkpoint: short read for " + name);
        ++idx;
    }
    if (idx != params.size()) throw IoError("load_checkpoint: missing parameters");
    return model;
}

// ---- position-component interventions -----------------------------------------------

template <typename S>
Intervention<S> TransformerModel<S>::make_pi_intervention(std::size_t layer,
                                                          std::size_t len) const {
    if (!cfg_.pe.adds_sinusoidal()) {
        throw ContractError("make_pi_intervention: PE has no explicit position vectors");
    }
    if (layer >= cfg_.num_layers) throw IndexError("make_pi_intervention: layer out of range");
    Intervention<S> iv;
    iv.layer = layer;
    iv.delta.resize(len * cfg_.d_model);
    for (std::size_t pos = 0; pos < len; ++pos)
        for (std::size_t c = 0; c < cfg_.d_model; ++c)
            iv.delta[pos * cfg_.d_model + c] = static_cast<S>(sin_table_(pos, c));
    return iv;
}

template <typename S>
Intervention<S> TransformerModel<S>::make_random_intervention(std::size_t layer, std::size_t len,
                                                              std::uint64_t seed) const {
    if (!cfg_.pe.adds_sinusoidal()) {
        throw ContractError("make_random_intervention: PE has no explicit position vectors");
    }
    if (layer >= cfg_.num_layers) throw IndexError("make_random_intervention: layer out of range");
    Intervention<S> iv;
    iv.layer = layer;
    iv.delta.resize(len * cfg_.d_model);
    Rng rng(seed);
    const std::size_t d = cfg_.d_model;
    std::vector<double> v(d);
    for (std::size_t pos = 0; pos < len; ++pos) {
        double target = 0.0;
        for (std::size_t c = 0; c < d; ++c) target += sin_table_(pos, c) * sin_table_(pos, c);
        target = std::sqrt(target);
        double nrm = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            v[c] = rng.normal();
            nrm += v[c] * v[c];
        }
        nrm = std::sqrt(nrm);
        const double scale_to = nrm > 0.0 ? target / nrm : 0.0;
        for (std::size_t c = 0; c < d; ++c)
            iv.delta[pos * d + c] = static_cast<S>(v[c] * scale_to);
    }
    return iv;
}

template class TransformerModel<float>;
template class TransformerModel<double>;

}  // namespace pelab
