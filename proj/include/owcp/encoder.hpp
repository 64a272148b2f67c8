/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
 * implied.  See the License for the specific language governing
 * permissions and limitations under the License.
 */

#ifndef OWCP_ENCODER_HPP
#define OWCP_ENCODER_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "owcp/nn.hpp"
#include "owcp/tokenizer.hpp"

namespace owcp {

// Shape of the stacked multi-head attention encoder.
struct EncoderConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  std::size_t ffn_dim = 1024;
  std::size_t layers = 6;
  std::size_t max_seq = 322;
  double dropout = 0.1;

  // Throws ConfigError unless d_model == heads * head_dim and layers >= 1.
  void validate() const;

  static EncoderConfig paper();
  // Small stack for CPU runs: d_model 64, 4 heads, 2 layers.
  static EncoderConfig desk(std::size_t max_seq);

  bool operator==(const EncoderConfig&) const = default;
};

// Post-norm block: LN(x + MHA(x)) then LN(h + FFN(h)).
struct EncoderLayer {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln1_gain, ln1_bias;
  Matrix w1, b1, w2, b2;
  Matrix ln2_gain, ln2_bias;

  bool operator==(const EncoderLayer&) const = default;
};

struct EncoderParams {
  Matrix embedding;   // V x d_model
  Matrix positional;  // max_seq x d_model, fixed sinusoidal table
  std::vector<EncoderLayer> layers;

  std::size_t vocab_size() const { return static_cast<std::size_t>(embedding.rows()); }
  std::size_t d_model() const { return static_cast<std::size_t>(embedding.cols()); }

  // Same shapes, all zeros. Used as a gradient buffer.
  EncoderParams zeros_like() const;

  bool operator==(const EncoderParams&) const = default;
};

// Pairs every trainable tensor in `params` with its slot in `grads`. The
// positional table is not trainable.
std::vector<ParamRef> encoder_param_refs(EncoderParams& params, EncoderParams& grads);

EncoderParams init_encoder(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed);

Matrix sinusoidal_table(std::size_t max_seq, std::size_t d_model);

using FlowEmbedding = RowVector;

struct EncoderOutput {
  Matrix states;  // L x d_model
  FlowEmbedding pooled;
};

// Saved activations for one sequence, consumed by encoder_backward.
struct LayerCache {
  Matrix input;
  Matrix q, k, v;
  std::vector<Matrix> attn;  // per head, rows x rows
  Matrix concat;
  Matrix drop_attn;  // dropout mask (already scaled), empty when off
  LayerNormCache ln1;
  Matrix hidden;  // output of first add & norm
  Matrix ffn_pre;
  Matrix ffn_act;
  Matrix drop_ffn;
  LayerNormCache ln2;
};

struct SequenceCache {
  std::vector<TokenId> ids;
  std::vector<std::size_t> positions;
  std::vector<LayerCache> layers;
};

struct ForwardOptions {
  bool train_mode = false;
  Rng* rng = nullptr;  // required for dropout in train mode
};

// Runs the encoder over explicit rows. `key_mask[i] == false` removes row i
// from every attention key set. Returns states for the given rows.
Matrix encode_rows(std::span<const TokenId> ids, std::span<const std::size_t> positions,
                   std::span<const bool> key_mask, const EncoderParams& params, const EncoderConfig& config,
                   const ForwardOptions& options, SequenceCache* cache);

// Full-length forward with PAD keys masked out.
EncoderOutput forward_sequence(const TokenSequence& seq, const EncoderParams& params, const EncoderConfig& config,
                               const ForwardOptions& options = {});

std::vector<EncoderOutput> forward(std::span<const TokenSequence> batch, const EncoderParams& params,
                                   const EncoderConfig& config, bool train_mode = false, Rng* rng = nullptr);

// Pooled (CLS) embedding. PAD rows cannot influence non-PAD rows, so they are
// dropped from the computation; the result equals forward_sequence().pooled.
FlowEmbedding embed(const TokenSequence& seq, const EncoderParams& params, const EncoderConfig& config,
                    const ForwardOptions& options = {}, SequenceCache* cache = nullptr);

std::vector<FlowEmbedding> embed_all(std::span<const TokenSequence> seqs, const EncoderParams& params,
                                     const EncoderConfig& config);

// Backpropagates dL/dstates (rows as in the cache) and accumulates into grads.
void encoder_backward(const Matrix& dstates, const SequenceCache& cache, const EncoderParams& params,
                      const EncoderConfig& config, EncoderParams& grads);

// Convenience for losses on the pooled embedding only.
void encoder_backward_pooled(const FlowEmbedding& dpooled, const SequenceCache& cache, const EncoderParams& params,
                             const EncoderConfig& config, EncoderParams& grads);

}  // namespace owcp

#endif  // OWCP_ENCODER_HPP
