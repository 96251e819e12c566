#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "signbart/error.hpp"
#include "signbart/rng.hpp"
#include "signbart/skeleton.hpp"
#include "signbart/tensor.hpp"

namespace signbart {

// additive attention mask values: 0 = allowed, kMaskBlocked = disallowed
constexpr double kMaskBlocked = -1e9;
constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t ff_dim = 64;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t heads = 16;
    std::size_t num_keypoints = KeypointLayout::total;
    std::size_t num_classes = 2;
    double dropout = 0.1;
    std::size_t max_len = 512;
    // The no-projection ablation feeds coordinates straight into the
    // attention stream; it forces d_model == num_keypoints.
    bool use_projection = true;

    std::size_t head_dim() const { return d_model / heads; }

    void validate() const {
        if (d_model < 1 || ff_dim < 1 || max_len < 1 || num_keypoints < 1 || num_classes < 1) {
            throw ParameterError("model config: dimensions must be positive");
        }
        if (encoder_layers < 1 || decoder_layers < 1) {
            throw ParameterError("model config: encoder_layers and decoder_layers must be >= 1");
        }
        if (heads < 1 || d_model % heads != 0) {
            throw ParameterError("model config: heads (" + std::to_string(heads) +
                                 ") must divide d_model (" + std::to_string(d_model) + ")");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ParameterError("model config: dropout must be in [0, 1)");
        }
        if (!use_projection && d_model != num_keypoints) {
            throw ParameterError("model config: use_projection=false requires d_model == num_keypoints");
        }
    }
};

struct LinearParams {
    Tensor weight;  // (in, out)
    Tensor bias;    // (out)
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct AttentionParams {
    LinearParams query, key, value, output;
};

struct EncoderLayerParams {
    AttentionParams self_attn;
    LayerNormParams norm1;
    LinearParams ff_in, ff_out;
    LayerNormParams norm2;
};

struct DecoderLayerParams {
    AttentionParams self_attn;
    LayerNormParams norm1;
    AttentionParams cross_attn;
    LayerNormParams norm2;
    LinearParams ff_in, ff_out;
    LayerNormParams norm3;
};

enum class ParamRole { weight, bias, gain };

/// All trainable tensors of the network. The tensor directory (name, shape,
/// order) is a pure function of the config; `named()` returns it in the
/// canonical order used by the optimizer and checkpoints.
class ModelParameters {
public:
    ModelParameters(const ModelConfig& config, Rng& rng) : config_(config) {
        config.validate();
        build([&rng](const std::string&, const Shape& shape, ParamRole role) {
            Tensor t;
            switch (role) {
                case ParamRole::weight: {
                    const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
                    std::vector<double> values(shape_numel(shape));
                    for (auto& v : values) v = rng.uniform(-limit, limit);
                    t = Tensor::from_data(shape, std::move(values));
                    break;
                }
                case ParamRole::bias:
                    t = Tensor::zeros(shape);
                    break;
                case ParamRole::gain:
                    t = Tensor::full(shape, 1.0);
                    break;
            }
            t.set_requires_grad(true);
            return t;
        });
    }

    static ModelParameters from_named(const ModelConfig& config, const NamedTensors& tensors) {
        config.validate();
        std::map<std::string, Tensor> lookup;
        for (const auto& [name, tensor] : tensors) {
            if (!lookup.emplace(name, tensor).second) {
                throw SchemaError("parameters: duplicate tensor '" + name + "'");
            }
        }
        ModelParameters params(config);
        params.build([&lookup](const std::string& name, const Shape& shape, ParamRole) {
            auto it = lookup.find(name);
            if (it == lookup.end()) throw SchemaError("parameters: missing tensor '" + name + "'");
            if (it->second.shape() != shape) {
                throw SchemaError("parameters: tensor '" + name + "' has shape " +
                                  shape_str(it->second.shape()) + ", expected " + shape_str(shape));
            }
            Tensor t = it->second;
            t.set_requires_grad(true);
            lookup.erase(it);
            return t;
        });
        if (!lookup.empty()) {
            throw SchemaError("parameters: unexpected tensor '" + lookup.begin()->first + "'");
        }
        return params;
    }

    ModelParameters clone() const {
        NamedTensors copies;
        copies.reserve(directory_.size());
        for (const auto& [name, tensor] : directory_) copies.emplace_back(name, tensor.clone());
        return from_named(config_, copies);
    }

    const ModelConfig& config() const { return config_; }
    const NamedTensors& named() const { return directory_; }
    NamedTensors& named_mutable() { return directory_; }

    LinearParams x_proj, y_proj;  // undefined when use_projection is false
    std::vector<EncoderLayerParams> encoder;
    std::vector<DecoderLayerParams> decoder;
    LinearParams classifier;

private:
    explicit ModelParameters(const ModelConfig& config) : config_(config) {}

    template <class Provider>
    void build(Provider&& provider) {
        directory_.clear();
        auto make = [&](const std::string& name, Shape shape, ParamRole role) {
            Tensor t = provider(name, shape, role);
            directory_.emplace_back(name, t);
            return t;
        };
        const std::size_t d = config_.d_model, ff = config_.ff_dim, k = config_.num_keypoints;
        auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
            LinearParams p;
            p.weight = make(name + ".weight", {in, out}, ParamRole::weight);
            p.bias = make(name + ".bias", {out}, ParamRole::bias);
            return p;
        };
        auto norm = [&](const std::string& name) {
            LayerNormParams p;
            p.gain = make(name + ".gain", {d}, ParamRole::gain);
            p.bias = make(name + ".bias", {d}, ParamRole::bias);
            return p;
        };
        auto attention = [&](const std::string& name) {
            AttentionParams p;
            p.query = linear(name + ".query", d, d);
            p.key = linear(name + ".key", d, d);
            p.value = linear(name + ".value", d, d);
            p.output = linear(name + ".output", d, d);
            return p;
        };
        if (config_.use_projection) {
            x_proj = linear("x_proj", k, d);
            y_proj = linear("y_proj", k, d);
        }
        encoder.clear();
        for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
            const std::string prefix = "encoder." + std::to_string(i) + ".";
            EncoderLayerParams layer;
            layer.self_attn = attention(prefix + "self_attn");
            layer.norm1 = norm(prefix + "norm1");
            layer.ff_in = linear(prefix + "ff_in", d, ff);
            layer.ff_out = linear(prefix + "ff_out", ff, d);
            layer.norm2 = norm(prefix + "norm2");
            encoder.push_back(std::move(layer));
        }
        decoder.clear();
        for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
            const std::string prefix = "decoder." + std::to_string(i) + ".";
            DecoderLayerParams layer;
            layer.self_attn = attention(prefix + "self_attn");
            layer.norm1 = norm(prefix + "norm1");
            layer.cross_attn = attention(prefix + "cross_attn");
            layer.norm2 = norm(prefix + "norm2");
            layer.ff_in = linear(prefix + "ff_in", d, ff);
            layer.ff_out = linear(prefix + "ff_out", ff, d);
            layer.norm3 = norm(prefix + "norm3");
            decoder.push_back(std::move(layer));
        }
        classifier = linear("classifier", d, config_.num_classes);
    }

    ModelConfig config_;
    NamedTensors directory_;
};

/// Closed-form parameter count; equals summing the shapes in named().
inline std::size_t count_parameters(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.d_model, ff = config.ff_dim;
    const std::size_t attention = 4 * (d * d + d);
    const std::size_t norm = 2 * d;
    const std::size_t feed_forward = d * ff + ff + ff * d + d;
    std::size_t total = 0;
    if (config.use_projection) total += 2 * (config.num_keypoints * d + d);
    total += config.encoder_layers * (attention + feed_forward + 2 * norm);
    total += config.decoder_layers * (2 * attention + feed_forward + 3 * norm);
    total += d * config.num_classes + config.num_classes;
    return total;
}

// ---------------------------------------------------------------------------
// Building blocks

inline Tensor linear(const Tensor& input, const LinearParams& params) {
    return add(matmul(input, params.weight), params.bias);
}

/// Per-frame linear map collapsing the keypoint axis into d_model.
inline Tensor project_coordinates(const Tensor& coords, const Tensor& weight, const Tensor& bias) {
    if (coords.shape().back() != weight.dim(0)) {
        throw DimensionError("project_coordinates: keypoint count " +
                             std::to_string(coords.shape().back()) +
                             " does not match projection rows " + std::to_string(weight.dim(0)));
    }
    return add(matmul(coords, weight), bias);
}

/// Fixed sinusoidal table: PE(t, 2i) = sin(t / 10000^(2i/d)),
/// PE(t, 2i+1) = cos(same angle). Shape (T, d_model).
inline Tensor positional_encoding(std::size_t t_len, std::size_t d_model, std::size_t max_len) {
    if (t_len > max_len) {
        throw DimensionError("positional_encoding: sequence length " + std::to_string(t_len) +
                             " exceeds max_len " + std::to_string(max_len));
    }
    Tensor pe = Tensor::zeros({t_len, d_model});
    for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t j = 0; j < d_model; ++j) {
            const double exponent = 2.0 * static_cast<double>(j / 2) / static_cast<double>(d_model);
            const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
            pe.data()[t * d_model + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

/// Additive causal mask, shape (1, 1, T, T): position i may attend to j <= i.
inline Tensor causal_mask(std::size_t t_len) {
    if (t_len < 1) throw ParameterError("causal_mask: T must be >= 1");
    Tensor mask = Tensor::zeros({1, 1, t_len, t_len});
    for (std::size_t i = 0; i < t_len; ++i) {
        for (std::size_t j = i + 1; j < t_len; ++j) {
            mask.data()[i * t_len + j] = kMaskBlocked;
        }
    }
    return mask;
}

/// Additive key-padding mask, shape (B, 1, 1, T): padded key positions are
/// blocked for every query. Combine with the causal mask via elementwise
/// minimum.
inline Tensor padding_mask(const Tensor& frame_mask) {
    if (frame_mask.rank() != 2) {
        throw DimensionError("padding_mask: frame mask must be (B, T), got " + shape_str(frame_mask.shape()));
    }
    const std::size_t batch = frame_mask.dim(0), t_len = frame_mask.dim(1);
    Tensor mask = Tensor::zeros({batch, 1, 1, t_len});
    for (std::size_t b = 0; b < batch; ++b) {
        bool any_valid = false;
        for (std::size_t t = 0; t < t_len; ++t) {
            if (frame_mask.data()[b * t_len + t] != 0.0) {
                any_valid = true;
            } else {
                mask.data()[b * t_len + t] = kMaskBlocked;
            }
        }
        if (!any_valid) {
            throw ContractError("padding_mask: batch row " + std::to_string(b) + " has no valid frames");
        }
    }
    return mask;
}

/// Scaled dot-product attention over `heads` heads. Queries come from
/// q_input; keys and values from kv_input (self-attention when they are the
/// same stream). The additive mask broadcasts against (B, H, Tq, Tk).
/// Output projection is followed by dropout.
inline Tensor multi_head_attention(const Tensor& q_input, const Tensor& kv_input, const Tensor& mask,
                                   const AttentionParams& params, std::size_t heads,
                                   double dropout_rate, Rng* rng, bool training) {
    if (q_input.rank() != 3 || kv_input.rank() != 3 || q_input.dim(2) != kv_input.dim(2)) {
        throw DimensionError("attention: expected (B, T, d) inputs, got " + shape_str(q_input.shape()) +
                             " and " + shape_str(kv_input.shape()));
    }
    const std::size_t batch = q_input.dim(0), t_q = q_input.dim(1), d = q_input.dim(2);
    const std::size_t t_k = kv_input.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: heads must divide the model width");
    }
    const std::size_t d_head = d / heads;

    auto split_heads = [&](const Tensor& t, std::size_t t_len) {
        return transpose(reshape(t, {batch, t_len, heads, d_head}), 1, 2);  // (B, H, T, dh)
    };
    Tensor q = split_heads(linear(q_input, params.query), t_q);
    Tensor k = split_heads(linear(kv_input, params.key), t_k);
    Tensor v = split_heads(linear(kv_input, params.value), t_k);

    Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(d_head)));
    scores = add(scores, mask);
    Tensor weights = softmax_last_dim(scores);     // (B, H, Tq, Tk)
    Tensor context = matmul(weights, v);           // (B, H, Tq, dh)
    context = reshape(transpose(context, 1, 2), {batch, t_q, d});
    return dropout(linear(context, params.output), dropout_rate, training, rng);
}

/// Encoder stack over the x-coordinate stream: bidirectional self-attention
/// under the padding mask, each sublayer followed by residual + layer norm.
inline Tensor encoder_forward(const Tensor& x_emb, const Tensor& pad_mask,
                              const ModelParameters& params, Rng* rng, bool training) {
    const ModelConfig& config = params.config();
    Tensor h = x_emb;
    for (const auto& layer : params.encoder) {
        Tensor attn = multi_head_attention(h, h, pad_mask, layer.self_attn, config.heads,
                                           config.dropout, rng, training);
        h = layer_norm(add(h, attn), layer.norm1.gain, layer.norm1.bias, kLayerNormEps);
        Tensor ff = linear(gelu(linear(h, layer.ff_in)), layer.ff_out);
        h = layer_norm(add(h, ff), layer.norm2.gain, layer.norm2.bias, kLayerNormEps);
    }
    return h;
}

/// Decoder stack over the y-coordinate stream: causal self-attention, then
/// cross-attention querying the encoder output (queries from the y stream,
/// keys/values from the encoder), then the feed-forward sublayer.
inline Tensor decoder_forward(const Tensor& y_emb, const Tensor& encoder_out, const Tensor& pad_mask,
                              const ModelParameters& params, Rng* rng, bool training) {
    const ModelConfig& config = params.config();
    const std::size_t t_len = y_emb.dim(1);
    const Tensor self_mask = minimum(causal_mask(t_len), pad_mask);
    Tensor h = y_emb;
    for (const auto& layer : params.decoder) {
        Tensor attn = multi_head_attention(h, h, self_mask, layer.self_attn, config.heads,
                                           config.dropout, rng, training);
        h = layer_norm(add(h, attn), layer.norm1.gain, layer.norm1.bias, kLayerNormEps);
        Tensor cross = multi_head_attention(h, encoder_out, pad_mask, layer.cross_attn, config.heads,
                                            config.dropout, rng, training);
        h = layer_norm(add(h, cross), layer.norm2.gain, layer.norm2.bias, kLayerNormEps);
        Tensor ff = linear(gelu(linear(h, layer.ff_in)), layer.ff_out);
        h = layer_norm(add(h, ff), layer.norm3.gain, layer.norm3.bias, kLayerNormEps);
    }
    return h;
}

/// Mean-pool the decoder output over valid frames, then the class head.
inline Tensor classify_logits(const Tensor& decoder_out, const Tensor& frame_mask,
                              const LinearParams& classifier) {
    return linear(masked_mean_pool(decoder_out, frame_mask), classifier);
}

inline Tensor classify(const Tensor& decoder_out, const Tensor& frame_mask,
                       const LinearParams& classifier) {
    return softmax_last_dim(classify_logits(decoder_out, frame_mask, classifier));
}

/// Full network: project x -> encoder, project y -> decoder (cross-attending
/// the encoder output), masked mean pool, class head. Returns pre-softmax
/// logits (B, num_classes).
inline Tensor forward_logits(const Batch& batch, const ModelParameters& params, Rng* rng, bool training) {
    const ModelConfig& config = params.config();
    if (batch.num_keypoints() != config.num_keypoints) {
        throw DimensionError("forward: batch has " + std::to_string(batch.num_keypoints()) +
                             " keypoints, model expects " + std::to_string(config.num_keypoints));
    }
    const std::size_t t_len = batch.num_frames();
    const Tensor pe = positional_encoding(t_len, config.d_model, config.max_len);
    Tensor x_emb, y_emb;
    if (config.use_projection) {
        x_emb = project_coordinates(batch.x_coords, params.x_proj.weight, params.x_proj.bias);
        y_emb = project_coordinates(batch.y_coords, params.y_proj.weight, params.y_proj.bias);
    } else {
        x_emb = batch.x_coords;
        y_emb = batch.y_coords;
    }
    x_emb = add(x_emb, pe);
    y_emb = add(y_emb, pe);
    const Tensor pad_mask = padding_mask(batch.frame_mask);
    const Tensor encoded = encoder_forward(x_emb, pad_mask, params, rng, training);
    const Tensor decoded = decoder_forward(y_emb, encoded, pad_mask, params, rng, training);
    return classify_logits(decoded, batch.frame_mask, params.classifier);
}

/// Class probabilities (B, num_classes); rows sum to 1.
inline Tensor forward(const Batch& batch, const ModelParameters& params, Rng* rng, bool training) {
    return softmax_last_dim(forward_logits(batch, params, rng, training));
}

}  // namespace signbart
