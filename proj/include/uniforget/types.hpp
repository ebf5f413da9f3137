#pragma once

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <string>
#include <vector>

#include "uniforget/errors.hpp"

namespace uniforget {

/// Architecture descriptor of the conditional velocity field.
///
/// The latent of dimension `latent_dim` is viewed as `n_tokens()` tokens of
/// width `token_dim`. Each block is pre-norm multi-head self-attention
/// followed by a pre-norm two-layer feed-forward network.
struct ModelSpec {
    int latent_dim = 32;
    int token_dim = 32;
    int n_blocks = 2;
    int n_heads = 2;
    int ffn_hidden = 16;
    int cond_vocab = 20;
    int time_freqs = 4;
    // Per-coordinate scale of the data. Inputs are normalized to unit
    // variance along the noise-to-data path and outputs rescaled by it.
    double data_scale = 1.0;

    int n_tokens() const { return latent_dim / token_dim; }
    int head_dim() const { return token_dim / n_heads; }

    void validate() const {
        require(latent_dim >= 1 && token_dim >= 1 && n_blocks >= 1 && n_heads >= 1 &&
                    ffn_hidden >= 1 && cond_vocab >= 1 && time_freqs >= 1,
                "model spec: every dimension must be >= 1");
        require(data_scale > 0.0 && std::isfinite(data_scale), "model spec: data_scale must be positive and finite");
        require(latent_dim % token_dim == 0,
                "model spec: latent_dim " + std::to_string(latent_dim) +
                    " is not divisible by token_dim " + std::to_string(token_dim));
        require(token_dim % n_heads == 0,
                "model spec: token_dim " + std::to_string(token_dim) +
                    " is not divisible by n_heads " + std::to_string(n_heads));
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class ConditionTag : std::uint8_t { neutral, trigger };

/// A discrete condition token. Trigger conditions are bound to a planted
/// exemplar; neutral conditions to a broad procedural distribution.
struct Condition {
    int id = 0;
    ConditionTag tag = ConditionTag::neutral;

    bool is_trigger() const { return tag == ConditionTag::trigger; }
    friend bool operator==(const Condition&, const Condition&) = default;
};

using Latent = std::vector<double>;

}  // namespace uniforget
