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

#include "owcp/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "owcp/error.hpp"

namespace owcp {

namespace {

using Index = Eigen::Index;

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Matrix dropout_mask(Index rows, Index cols, double p, Rng& rng) {
  std::bernoulli_distribution keep(1.0 - p);
  Matrix m(rows, cols);
  const double scale = 1.0 / (1.0 - p);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : 0.0;
  return m;
}

EncoderLayer init_layer(const EncoderConfig& c, Rng& rng) {
  const auto d = static_cast<Index>(c.d_model);
  const auto f = static_cast<Index>(c.ffn_dim);
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_f = 1.0 / std::sqrt(static_cast<double>(f));
  EncoderLayer l;
  l.wq = random_normal(d, d, sd_d, rng);
  l.bq = Matrix::Zero(1, d);
  l.wk = random_normal(d, d, sd_d, rng);
  l.bk = Matrix::Zero(1, d);
  l.wv = random_normal(d, d, sd_d, rng);
  l.bv = Matrix::Zero(1, d);
  l.wo = random_normal(d, d, sd_d, rng);
  l.bo = Matrix::Zero(1, d);
  l.ln1_gain = Matrix::Ones(1, d);
  l.ln1_bias = Matrix::Zero(1, d);
  l.w1 = random_normal(d, f, sd_d, rng);
  l.b1 = Matrix::Zero(1, f);
  l.w2 = random_normal(f, d, sd_f, rng);
  l.b2 = Matrix::Zero(1, d);
  l.ln2_gain = Matrix::Ones(1, d);
  l.ln2_bias = Matrix::Zero(1, d);
  return l;
}

EncoderLayer zeros_like(const EncoderLayer& l) {
  auto z = [](const Matrix& m) { return Matrix::Zero(m.rows(), m.cols()).eval(); };
  return EncoderLayer{z(l.wq), z(l.bq), z(l.wk), z(l.bk), z(l.wv), z(l.bv), z(l.wo), z(l.bo),
                      z(l.ln1_gain), z(l.ln1_bias), z(l.w1), z(l.b1), z(l.w2), z(l.b2),
                      z(l.ln2_gain), z(l.ln2_bias)};
}

double embedding_scale(const EncoderParams& params) { return std::sqrt(static_cast<double>(params.d_model())); }

}  // namespace

void EncoderConfig::validate() const {
  if (layers < 1) throw ConfigError("encoder needs at least one layer");
  if (heads < 1 || head_dim < 1) throw ConfigError("heads and head_dim must be positive");
  if (d_model != heads * head_dim) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal heads * head_dim (" +
                      std::to_string(heads * head_dim) + ")");
  }
  if (ffn_dim < 1) throw ConfigError("ffn_dim must be positive");
  if (max_seq < 1) throw ConfigError("max_seq must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
}

EncoderConfig EncoderConfig::paper() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::desk(std::size_t max_seq) {
  return EncoderConfig{.d_model = 64, .heads = 4, .head_dim = 16, .ffn_dim = 128, .layers = 2,
                       .max_seq = max_seq, .dropout = 0.0};
}

EncoderParams EncoderParams::zeros_like() const {
  EncoderParams z;
  z.embedding = Matrix::Zero(embedding.rows(), embedding.cols());
  z.positional = Matrix::Zero(positional.rows(), positional.cols());
  for (const auto& l : layers) z.layers.push_back(owcp::zeros_like(l));
  return z;
}

std::vector<ParamRef> encoder_param_refs(EncoderParams& p, EncoderParams& g) {
  std::vector<ParamRef> refs;
  refs.push_back({"embedding", &p.embedding, &g.embedding});
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    auto& gl = g.layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    refs.push_back({pre + "wq", &l.wq, &gl.wq});
    refs.push_back({pre + "bq", &l.bq, &gl.bq});
    refs.push_back({pre + "wk", &l.wk, &gl.wk});
    refs.push_back({pre + "bk", &l.bk, &gl.bk});
    refs.push_back({pre + "wv", &l.wv, &gl.wv});
    refs.push_back({pre + "bv", &l.bv, &gl.bv});
    refs.push_back({pre + "wo", &l.wo, &gl.wo});
    refs.push_back({pre + "bo", &l.bo, &gl.bo});
    refs.push_back({pre + "ln1_gain", &l.ln1_gain, &gl.ln1_gain});
    refs.push_back({pre + "ln1_bias", &l.ln1_bias, &gl.ln1_bias});
    refs.push_back({pre + "w1", &l.w1, &gl.w1});
    refs.push_back({pre + "b1", &l.b1, &gl.b1});
    refs.push_back({pre + "w2", &l.w2, &gl.w2});
    refs.push_back({pre + "b2", &l.b2, &gl.b2});
    refs.push_back({pre + "ln2_gain", &l.ln2_gain, &gl.ln2_gain});
    refs.push_back({pre + "ln2_bias", &l.ln2_bias, &gl.ln2_bias});
  }
  return refs;
}

Matrix sinusoidal_table(std::size_t max_seq, std::size_t d_model) {
  Matrix pe(static_cast<Index>(max_seq), static_cast<Index>(d_model));
  for (std::size_t pos = 0; pos < max_seq; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * freq;
      pe(static_cast<Index>(pos), static_cast<Index>(i)) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

EncoderParams init_encoder(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed) {
  config.validate();
  if (vocab_size < static_cast<std::size_t>(kNumSpecials) + 1) throw ConfigError("vocab_size must be >= 5");
  Rng rng(seed);
  EncoderParams p;
  const double sd = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  p.embedding = random_normal(static_cast<Index>(vocab_size), static_cast<Index>(config.d_model), sd, rng);
  p.positional = sinusoidal_table(config.max_seq, config.d_model);
  for (std::size_t i = 0; i < config.layers; ++i) p.layers.push_back(init_layer(config, rng));
  return p;
}

Matrix encode_rows(std::span<const TokenId> ids, std::span<const std::size_t> positions,
                   std::span<const bool> key_mask, const EncoderParams& params, const EncoderConfig& config,
                   const ForwardOptions& options, SequenceCache* cache) {
  const auto rows = static_cast<Index>(ids.size());
  const auto d = static_cast<Index>(config.d_model);
  const auto hd = static_cast<Index>(config.head_dim);
  if (positions.size() != ids.size() || key_mask.size() != ids.size()) {
    throw ConfigError("ids, positions and key_mask must have equal length");
  }
  if (params.d_model() != config.d_model || params.layers.size() != config.layers) {
    throw ConfigError("encoder parameters do not match config");
  }
  const bool use_dropout = options.train_mode && config.dropout > 0.0;
  if (use_dropout && options.rng == nullptr) throw ConfigError("dropout requires an rng");

  const double scale = embedding_scale(params);
  Matrix x(rows, d);
  for (Index r = 0; r < rows; ++r) {
    const auto id = ids[static_cast<std::size_t>(r)];
    const auto pos = positions[static_cast<std::size_t>(r)];
    if (id < 0 || static_cast<std::size_t>(id) >= params.vocab_size()) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (pos >= static_cast<std::size_t>(params.positional.rows())) {
      throw ConfigError("sequence longer than max_seq (" + std::to_string(config.max_seq) + ")");
    }
    x.row(r) = scale * params.embedding.row(id) + params.positional.row(static_cast<Index>(pos));
  }

  RowVector additive_mask = RowVector::Zero(rows);
  for (Index r = 0; r < rows; ++r) {
    if (!key_mask[static_cast<std::size_t>(r)]) additive_mask(r) = -std::numeric_limits<double>::infinity();
  }
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  if (cache != nullptr) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->positions.assign(positions.begin(), positions.end());
    cache->layers.assign(config.layers, LayerCache{});
  }

  for (std::size_t li = 0; li < config.layers; ++li) {
    const auto& l = params.layers[li];
    LayerCache local;
    LayerCache& c = cache != nullptr ? cache->layers[li] : local;
    c.input = x;
    c.q = linear(x, l.wq, l.bq);
    c.k = linear(x, l.wk, l.bk);
    c.v = linear(x, l.wv, l.bv);
    c.concat.resize(rows, d);
    c.attn.resize(config.heads);
    for (std::size_t h = 0; h < config.heads; ++h) {
      const Index off = static_cast<Index>(h) * hd;
      Matrix scores = (c.q.middleCols(off, hd) * c.k.middleCols(off, hd).transpose()) * attn_scale;
      scores.rowwise() += additive_mask;
      softmax_rows(scores);
      c.concat.middleCols(off, hd) = scores * c.v.middleCols(off, hd);
      c.attn[h] = std::move(scores);
    }
    Matrix attn_out = linear(c.concat, l.wo, l.bo);
    if (use_dropout) {
      c.drop_attn = dropout_mask(rows, d, config.dropout, *options.rng);
      attn_out = attn_out.cwiseProduct(c.drop_attn);
    }
    c.hidden = layer_norm_forward(x + attn_out, l.ln1_gain, l.ln1_bias, c.ln1);
    c.ffn_pre = linear(c.hidden, l.w1, l.b1);
    c.ffn_act = c.ffn_pre.cwiseMax(0.0);
    Matrix ffn_out = linear(c.ffn_act, l.w2, l.b2);
    if (use_dropout) {
      c.drop_ffn = dropout_mask(rows, d, config.dropout, *options.rng);
      ffn_out = ffn_out.cwiseProduct(c.drop_ffn);
    }
    x = layer_norm_forward(c.hidden + ffn_out, l.ln2_gain, l.ln2_bias, c.ln2);
  }
  return x;
}

EncoderOutput forward_sequence(const TokenSequence& seq, const EncoderParams& params, const EncoderConfig& config,
                               const ForwardOptions& options) {
  if (seq.ids.size() > config.max_seq) {
    throw ConfigError("sequence length " + std::to_string(seq.ids.size()) + " exceeds max_seq " +
                      std::to_string(config.max_seq));
  }
  std::vector<std::size_t> positions(seq.ids.size());
  std::unique_ptr<bool[]> mask(new bool[seq.ids.size()]);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    positions[i] = i;
    mask[i] = seq.ids[i] != kPad;
  }
  EncoderOutput out;
  out.states = encode_rows(seq.ids, positions, std::span<const bool>(mask.get(), seq.ids.size()), params, config,
                           options, nullptr);
  out.pooled = out.states.row(0);
  return out;
}

std::vector<EncoderOutput> forward(std::span<const TokenSequence> batch, const EncoderParams& params,
                                   const EncoderConfig& config, bool train_mode, Rng* rng) {
  std::vector<EncoderOutput> out;
  out.reserve(batch.size());
  for (const auto& seq : batch) out.push_back(forward_sequence(seq, params, config, {train_mode, rng}));
  return out;
}

FlowEmbedding embed(const TokenSequence& seq, const EncoderParams& params, const EncoderConfig& config,
                    const ForwardOptions& options, SequenceCache* cache) {
  if (seq.ids.size() > config.max_seq) {
    throw ConfigError("sequence length " + std::to_string(seq.ids.size()) + " exceeds max_seq " +
                      std::to_string(config.max_seq));
  }
  std::vector<TokenId> ids;
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.ids[i] == kPad) continue;
    ids.push_back(seq.ids[i]);
    positions.push_back(i);
  }
  std::unique_ptr<bool[]> mask(new bool[ids.size()]);
  std::fill(mask.get(), mask.get() + ids.size(), true);
  Matrix states = encode_rows(ids, positions, std::span<const bool>(mask.get(), ids.size()), params, config,
                              options, cache);
  return states.row(0);
}

std::vector<FlowEmbedding> embed_all(std::span<const TokenSequence> seqs, const EncoderParams& params,
                                     const EncoderConfig& config) {
  std::vector<FlowEmbedding> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(embed(s, params, config));
  return out;
}

void encoder_backward(const Matrix& dstates, const SequenceCache& cache, const EncoderParams& params,
                      const EncoderConfig& config, EncoderParams& grads) {
  const auto hd = static_cast<Index>(config.head_dim);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix dx = dstates;
  for (std::size_t li = config.layers; li-- > 0;) {
    const auto& l = params.layers[li];
    auto& g = grads.layers[li];
    const auto& c = cache.layers[li];

    Matrix dz = layer_norm_backward(dx, l.ln2_gain, c.ln2, g.ln2_gain, g.ln2_bias);
    Matrix dhidden = dz;
    Matrix dffn_out = c.drop_ffn.size() != 0 ? dz.cwiseProduct(c.drop_ffn) : dz;
    g.w2.noalias() += c.ffn_act.transpose() * dffn_out;
    g.b2.row(0) += dffn_out.colwise().sum();
    Matrix dffn_pre = (dffn_out * l.w2.transpose()).cwiseProduct(
        (c.ffn_pre.array() > 0.0).cast<double>().matrix());
    g.w1.noalias() += c.hidden.transpose() * dffn_pre;
    g.b1.row(0) += dffn_pre.colwise().sum();
    dhidden.noalias() += dffn_pre * l.w1.transpose();

    Matrix dres = layer_norm_backward(dhidden, l.ln1_gain, c.ln1, g.ln1_gain, g.ln1_bias);
    Matrix dattn_out = c.drop_attn.size() != 0 ? dres.cwiseProduct(c.drop_attn) : dres;
    g.wo.noalias() += c.concat.transpose() * dattn_out;
    g.bo.row(0) += dattn_out.colwise().sum();
    Matrix dconcat = dattn_out * l.wo.transpose();

    Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
    Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
    Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
    for (std::size_t h = 0; h < config.heads; ++h) {
      const Index off = static_cast<Index>(h) * hd;
      const Matrix& a = c.attn[h];
      Matrix dout = dconcat.middleCols(off, hd);
      Matrix da = dout * c.v.middleCols(off, hd).transpose();
      dv.middleCols(off, hd).noalias() += a.transpose() * dout;
      Vector row_dot = (da.array() * a.array()).rowwise().sum();
      Matrix ds = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * attn_scale;
      dq.middleCols(off, hd).noalias() += ds * c.k.middleCols(off, hd);
      dk.middleCols(off, hd).noalias() += ds.transpose() * c.q.middleCols(off, hd);
    }
    g.wq.noalias() += c.input.transpose() * dq;
    g.bq.row(0) += dq.colwise().sum();
    g.wk.noalias() += c.input.transpose() * dk;
    g.bk.row(0) += dk.colwise().sum();
    g.wv.noalias() += c.input.transpose() * dv;
    g.bv.row(0) += dv.colwise().sum();
    dx = dres;
    dx.noalias() += dq * l.wq.transpose();
    dx.noalias() += dk * l.wk.transpose();
    dx.noalias() += dv * l.wv.transpose();
  }
  const double scale = embedding_scale(params);
  for (std::size_t r = 0; r < cache.ids.size(); ++r) {
    grads.embedding.row(cache.ids[r]) += scale * dx.row(static_cast<Index>(r));
  }
}

void encoder_backward_pooled(const FlowEmbedding& dpooled, const SequenceCache& cache, const EncoderParams& params,
                             const EncoderConfig& config, EncoderParams& grads) {
  Matrix dstates = Matrix::Zero(static_cast<Index>(cache.ids.size()), static_cast<Index>(config.d_model));
  dstates.row(0) = dpooled;
  encoder_backward(dstates, cache, params, config, grads);
}

}  // namespace owcp
