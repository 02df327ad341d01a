#include "webrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "webrec/error.hpp"
#include "webrec/mp_head.hpp"

namespace webrec {

bool ModelConfig::has_mp_layer(std::size_t layer) const {
  return std::find(mp_head_layers.begin(), mp_head_layers.end(), layer) != mp_head_layers.end();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must equal n_heads x d_head");
  }
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (max_seq_len == 0) fail("max_seq_len must be >= 1");
  if (trace_layer >= 0 && static_cast<std::size_t>(trace_layer) >= n_layers) {
    fail("trace_layer " + std::to_string(trace_layer) + " >= n_layers");
  }
  for (auto l : mp_head_layers) {
    if (l >= n_layers) fail("mp_head_layers entry " + std::to_string(l) + " >= n_layers");
  }
  if (mp_hops < 1 || mp_hops > 3) fail("mp_hops must be in {1,2,3}");
  if (mp_source_head >= n_heads) fail("mp_source_head must be < n_heads");
  if (eos_token >= 0 && static_cast<std::size_t>(eos_token) >= vocab_size) {
    fail("eos_token outside vocabulary");
  }
}

BackboneParams BackboneParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = cfg.d_model;
  const auto ff = cfg.ff_width();
  BackboneParams p;
  p.token_embedding = ad::Variable::constant(init_uniform(cfg.vocab_size, d, 1.0, rng));
  p.position_embedding = ad::Variable::constant(init_uniform(cfg.max_seq_len, d, 0.5, rng));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.norm_attn = ad::Variable::constant(Matrix(1, d, 1.0));
    lp.norm_mlp = ad::Variable::constant(Matrix(1, d, 1.0));
    lp.wq = ad::Variable::constant(init_projection(d, d, rng));
    lp.wk = ad::Variable::constant(init_projection(d, d, rng));
    lp.wv = ad::Variable::constant(init_projection(d, d, rng));
    lp.wo = ad::Variable::constant(init_projection(d, d, rng));
    lp.w1 = ad::Variable::constant(init_projection(d, ff, rng));
    lp.b1 = ad::Variable::constant(Matrix(1, ff));
    lp.w2 = ad::Variable::constant(init_projection(ff, d, rng));
    lp.b2 = ad::Variable::constant(Matrix(1, d));
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = ad::Variable::constant(Matrix(1, d, 1.0));
  p.unembedding = ad::Variable::constant(init_projection(d, cfg.vocab_size, rng));
  return p;
}

std::vector<ad::Variable> BackboneParams::all() const {
  std::vector<ad::Variable> v{token_embedding, position_embedding};
  for (const auto& l : layers) {
    for (const auto& x : {l.norm_attn, l.norm_mlp, l.wq, l.wk, l.wv, l.wo, l.w1, l.b1, l.w2, l.b2}) {
      v.push_back(x);
    }
  }
  v.push_back(final_norm);
  v.push_back(unembedding);
  return v;
}

namespace {

ad::Variable copy_of(const ad::Variable& v) { return ad::Variable(v.value(), v.requires_grad()); }

}  // namespace

BackboneParams BackboneParams::clone() const {
  BackboneParams p;
  p.token_embedding = copy_of(token_embedding);
  p.position_embedding = copy_of(position_embedding);
  for (const auto& l : layers) {
    p.layers.push_back({copy_of(l.norm_attn), copy_of(l.norm_mlp), copy_of(l.wq), copy_of(l.wk),
                        copy_of(l.wv), copy_of(l.wo), copy_of(l.w1), copy_of(l.b1), copy_of(l.w2),
                        copy_of(l.b2)});
  }
  p.final_norm = copy_of(final_norm);
  p.unembedding = copy_of(unembedding);
  return p;
}

void BackboneParams::set_trainable(bool on) {
  for (auto& v : all()) v.set_requires_grad(on);
}

std::uint64_t BackboneParams::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& v : all()) h = fnv1a64(v.value().data(), h);
  return h;
}

MPHeadParams MPHeadParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto dh = cfg.d_head();
  MPHeadParams p;
  p.hops = cfg.mp_hops;
  p.relation_top_k = cfg.relation_top_k;
  p.layers = cfg.mp_head_layers;
  p.task_feature = ad::Variable::parameter(init_uniform(1, cfg.task_dim(), 1.0, rng));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    MPLayerParams lp;
    lp.query = ad::Variable::parameter(init_projection(cfg.d_model, dh, rng));
    lp.proj_entity = ad::Variable::parameter(init_projection(2 * dh, 2 * dh, rng));
    lp.proj_relation = ad::Variable::parameter(init_projection(cfg.task_dim(), 2 * dh, rng));
    for (std::size_t h = 0; h < p.hops; ++h) {
      lp.proj_message.push_back(ad::Variable::parameter(init_projection(2 * dh, 2 * dh, rng)));
    }
    lp.bias = ad::Variable::parameter(Matrix(1, 2 * dh));
    lp.gate = ad::Variable::parameter(Matrix(1, 1, 0.0));
    // Random rather than zero: with both gate and extension at zero every
    // gradient of the branch is exactly zero. The zero gate alone keeps the
    // initial model identical to the backbone.
    lp.out_extension = ad::Variable::parameter(init_projection(dh, cfg.d_model, rng));
    p.per_layer.push_back(std::move(lp));
  }
  return p;
}

MPHeadParams MPHeadParams::clone() const {
  MPHeadParams p;
  p.task_feature = copy_of(task_feature);
  p.layers = layers;
  p.hops = hops;
  p.relation_top_k = relation_top_k;
  for (const auto& l : per_layer) {
    MPLayerParams c;
    c.query = copy_of(l.query);
    c.proj_entity = copy_of(l.proj_entity);
    c.proj_relation = copy_of(l.proj_relation);
    for (const auto& m : l.proj_message) c.proj_message.push_back(copy_of(m));
    c.bias = copy_of(l.bias);
    c.gate = copy_of(l.gate);
    c.out_extension = copy_of(l.out_extension);
    p.per_layer.push_back(std::move(c));
  }
  return p;
}

const MPLayerParams* MPHeadParams::find(std::size_t layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i] == layer) return &per_layer[i];
  return nullptr;
}

std::vector<std::pair<std::string, ad::Variable>> MPHeadParams::named() const {
  std::vector<std::pair<std::string, ad::Variable>> v{{"task_feature", task_feature}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto prefix = "layer" + std::to_string(layers[i]) + ".";
    const auto& l = per_layer[i];
    v.emplace_back(prefix + "query", l.query);
    v.emplace_back(prefix + "proj_entity", l.proj_entity);
    v.emplace_back(prefix + "proj_relation", l.proj_relation);
    for (std::size_t h = 0; h < l.proj_message.size(); ++h) {
      v.emplace_back(prefix + "proj_message" + std::to_string(h), l.proj_message[h]);
    }
    v.emplace_back(prefix + "bias", l.bias);
    v.emplace_back(prefix + "gate", l.gate);
    v.emplace_back(prefix + "out_extension", l.out_extension);
  }
  return v;
}

std::vector<ad::Variable> MPHeadParams::all() const {
  std::vector<ad::Variable> v;
  for (auto& [name, var] : named()) v.push_back(var);
  return v;
}

void MPHeadParams::set_gate(double g) {
  for (auto& l : per_layer) l.gate.mutable_value()(0, 0) = g;
}

void MPHeadParams::warm_start_from(const Transformer& backbone) {
  const auto& cfg = backbone.config();
  const std::size_t dh = cfg.d_head();
  const std::size_t src = cfg.mp_source_head;
  for (std::size_t i = 0; i < per_layer.size(); ++i) {
    auto& lp = per_layer[i];
    Matrix eye(2 * dh, 2 * dh);
    for (std::size_t j = 0; j < 2 * dh; ++j) eye(j, j) = 1.0;
    lp.proj_entity.mutable_value() = eye;
    const auto& wo = backbone.params().layers.at(layers[i]).wo.value();
    Matrix block(dh, cfg.d_model);
    for (std::size_t a = 0; a < dh; ++a)
      for (std::size_t b = 0; b < cfg.d_model; ++b) block(a, b) = wo(src * dh + a, b);
    lp.out_extension.mutable_value() = block;
  }
}

TaskAdapter TaskAdapter::init(const ModelConfig& cfg) {
  return {ad::Variable::parameter(Matrix(1, cfg.vocab_size))};
}

TaskAdapter TaskAdapter::clone() const { return {copy_of(logit_bias)}; }

std::size_t KVCache::length() const {
  if (keys_.empty() || !keys_.back().defined()) return 0;
  return keys_.back().rows();
}

Matrix KVCache::keys(std::size_t layer, std::size_t head, std::size_t d_head) const {
  return ad::slice_cols(keys_.at(layer), head * d_head, (head + 1) * d_head).value();
}

Matrix KVCache::values(std::size_t layer, std::size_t head, std::size_t d_head) const {
  return ad::slice_cols(values_.at(layer), head * d_head, (head + 1) * d_head).value();
}

void KVCache::append(std::size_t layer, const ad::Variable& k, const ad::Variable& v) {
  if (!keys_[layer].defined()) {
    keys_[layer] = k;
    values_[layer] = v;
    return;
  }
  keys_[layer] = ad::concat_rows(keys_[layer], k);
  values_[layer] = ad::concat_rows(values_[layer], v);
}

Matrix attention_head(const Matrix& q, const Matrix& k, const Matrix& v, bool causal) {
  if (k.rows() != v.rows() || q.cols() != k.cols()) {
    throw ShapeError("attention_head: q " + q.shape_string() + ", k " + k.shape_string() +
                     ", v " + v.shape_string());
  }
  if (causal && q.rows() != k.rows()) throw ShapeError("attention_head: causal needs square scores");
  auto scores = ad::scale(ad::matmul_bt(ad::Variable::constant(q), ad::Variable::constant(k)),
                          1.0 / std::sqrt(static_cast<double>(q.cols())));
  std::vector<std::size_t> valid(q.rows(), k.rows());
  if (causal) std::iota(valid.begin(), valid.end(), std::size_t{1});
  return ad::matmul(ad::masked_softmax(scores, valid), ad::Variable::constant(v)).value();
}

Transformer::Transformer(ModelConfig cfg, BackboneParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  if (params_.layers.size() != cfg_.n_layers) throw ConfigError("model: layer count mismatch");
}

Transformer Transformer::init(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return Transformer(cfg, BackboneParams::init(cfg, rng));
}

ad::Variable Transformer::embed(std::span<const TokenId> tokens, std::size_t start) const {
  std::vector<std::size_t> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= cfg_.vocab_size) {
      throw DataError("forward: token id " + std::to_string(tokens[i]) + " >= vocab_size " +
                      std::to_string(cfg_.vocab_size));
    }
    ids[i] = tokens[i];
  }
  return ad::add(ad::gather_rows(params_.token_embedding, ids),
                 ad::slice_rows(params_.position_embedding, start, start + tokens.size()));
}

ForwardOutput Transformer::forward(std::span<const TokenId> tokens, KVCache& cache,
                                   const ForwardOptions& opts) const {
  if (cache.n_layers() == 0) cache = KVCache(cfg_.n_layers);
  const std::size_t start = cache.length();
  if (tokens.empty()) throw ShapeError("forward: no tokens");
  if (start + tokens.size() > cfg_.max_seq_len) {
    throw DataError("forward: sequence length " + std::to_string(start + tokens.size()) +
                    " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  return forward_from(0, embed(tokens, start), start, cache, opts);
}

ForwardOutput Transformer::forward_from(std::size_t first_layer, const ad::Variable& hidden,
                                        std::size_t start, KVCache& cache,
                                        const ForwardOptions& opts) const {
  if (cache.n_layers() == 0) cache = KVCache(cfg_.n_layers);
  for (auto r : opts.output_rows) {
    if (r >= hidden.rows()) throw ShapeError("forward: output row beyond new tokens");
  }
  ForwardOutput out;
  const auto x = run_layers(first_layer, cfg_.n_layers, hidden, start, cache, opts, out);
  out.logits = ad::matmul(ad::rms_norm(x, params_.final_norm), params_.unembedding);
  if (opts.adapter) out.logits = ad::add_row(out.logits, opts.adapter->logit_bias);
  return out;
}

ad::Variable Transformer::run_layers(std::size_t first_layer, std::size_t end_layer,
                                     ad::Variable x, std::size_t start, KVCache& cache,
                                     const ForwardOptions& opts, ForwardOutput& out) const {
  const std::size_t m = x.rows();
  const std::size_t dh = cfg_.d_head();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t trace_layer = cfg_.resolved_trace_layer();

  std::vector<std::size_t> all_rows(m);
  std::iota(all_rows.begin(), all_rows.end(), std::size_t{0});
  const bool subset = !opts.output_rows.empty();

  for (std::size_t l = first_layer; l < end_layer; ++l) {
    const auto& lp = params_.layers[l];
    // Only the final layer can drop rows: every earlier layer feeds keys and
    // values for all positions.
    const bool restrict = subset && l + 1 == cfg_.n_layers;
    const auto& rows = restrict ? opts.output_rows : all_rows;

    auto a = ad::rms_norm(x, lp.norm_attn);
    auto q = ad::matmul(a, lp.wq);
    cache.append(l, ad::matmul(a, lp.wk), ad::matmul(a, lp.wv));
    const auto& keys = cache.layer_keys(l);
    const auto& values = cache.layer_values(l);
    auto xs = x;
    if (restrict) {
      q = ad::gather_rows(q, rows);
      xs = ad::gather_rows(x, rows);
      a = ad::gather_rows(a, rows);
    }
    std::vector<std::size_t> positions(rows.size());
    std::vector<std::size_t> valid(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      positions[r] = start + rows[r];
      valid[r] = positions[r] + 1;
    }

    std::vector<ad::Variable> parts;
    const MPLayerParams* mpl = opts.mp ? opts.mp->find(l) : nullptr;
    if (mpl) parts.emplace_back();  // slot 0 holds the MP-Head output
    const bool trace_here = opts.record_trace && l == trace_layer;
    std::vector<std::vector<double>> avg;
    if (trace_here) {
      avg.resize(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) avg[r].assign(valid[r], 0.0);
    }
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      const auto qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
      const auto kh = ad::slice_cols(keys, h * dh, (h + 1) * dh);
      const auto vh = ad::slice_cols(values, h * dh, (h + 1) * dh);
      const auto weights = ad::masked_softmax(ad::scale(ad::matmul_bt(qh, kh), inv_sqrt_dh), valid);
      if (trace_here) {
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t t = 0; t < valid[r]; ++t)
            avg[r][t] += weights.value()(r, t) / static_cast<double>(cfg_.n_heads);
      }
      parts.push_back(ad::matmul(weights, vh));
    }
    if (trace_here) out.trace_attention = std::move(avg);

    ad::Variable projection = lp.wo;
    if (mpl) {
      const std::size_t src = cfg_.mp_source_head;
      const auto kv = ad::concat_cols(std::vector{ad::slice_cols(keys, src * dh, (src + 1) * dh),
                                                  ad::slice_cols(values, src * dh, (src + 1) * dh)});
      const auto entities = ad::matmul(kv, mpl->proj_entity);
      const auto relevance =
          ad::cosine_rows(ad::matmul(opts.mp->task_feature, mpl->proj_relation), entities);
      const auto head = mp::head_rows(entities, relevance, ad::matmul(a, mpl->query), positions,
                                      *mpl, opts.mp->hops, opts.mp->relation_top_k);
      parts[0] = ad::mul_scalar(head, mpl->gate);
      projection = ad::concat_rows(mpl->out_extension, lp.wo);
    }
    const auto concat = ad::concat_cols(parts);
    out.preprojection_width.push_back(concat.cols());
    const auto attn = ad::add(xs, ad::matmul(concat, projection));
    const auto hid = ad::gelu(ad::add_row(ad::matmul(ad::rms_norm(attn, lp.norm_mlp), lp.w1), lp.b1));
    const auto ff = ad::add_row(ad::matmul(hid, lp.w2), lp.b2);
    x = ad::add(attn, ff);
    out.positions = positions;
  }
  return x;
}

Matrix Transformer::logits(std::span<const TokenId> tokens, const MPHeadParams* mp) const {
  KVCache cache;
  ForwardOptions opts;
  opts.mp = mp;
  return forward(tokens, cache, opts).logits.value();
}

Matrix Transformer::hidden_before(std::span<const TokenId> tokens, std::size_t layer) const {
  if (layer > cfg_.n_layers) throw ShapeError("hidden_before: layer out of range");
  KVCache cache(cfg_.n_layers);
  ForwardOutput scratch;
  return run_layers(0, layer, embed(tokens, 0), 0, cache, ForwardOptions{}, scratch).value();
}

DecodeTrace Transformer::greedy_decode(std::span<const TokenId> prompt, std::size_t max_new,
                                       const MPHeadParams* mp) const {
  if (prompt.empty()) throw ShapeError("greedy_decode: empty prompt");
  DecodeTrace trace;
  trace.prompt_length = prompt.size();
  if (max_new == 0) return trace;

  KVCache cache(cfg_.n_layers);
  ForwardOptions opts;
  opts.mp = mp;
  opts.output_rows = {prompt.size() - 1};
  auto probs = softmax_rows(forward(prompt, cache, opts).logits.value());

  ForwardOptions step;
  step.mp = mp;
  step.record_trace = true;
  for (std::size_t j = 0; j < max_new; ++j) {
    const auto row = probs.row(0);
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    if (cfg_.eos_token >= 0 && best == static_cast<TokenId>(cfg_.eos_token)) break;
    // Each generated token is fed back once so its own attention row exists.
    if (cache.length() + 1 > cfg_.max_seq_len) break;
    trace.tokens.push_back(best);
    trace.dist.emplace_back(row.begin(), row.end());
    const TokenId next[] = {best};
    auto fo = forward(next, cache, step);
    trace.attention.push_back(std::move(fo.trace_attention.at(0)));
    probs = softmax_rows(fo.logits.value());
  }
  return trace;
}

}  // namespace webrec
