#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "refusal/autodiff.hpp"
#include "refusal/rng.hpp"
#include "refusal/tensor.hpp"
#include "refusal/text.hpp"

namespace refusal::mllm {

enum class ProjectorVariant { Ffn1, Ffn2, CrossAttention };

inline const char* projector_name(ProjectorVariant v) {
  switch (v) {
    case ProjectorVariant::Ffn1: return "ffn1";
    case ProjectorVariant::Ffn2: return "ffn2";
    case ProjectorVariant::CrossAttention: return "xattn";
  }
  return "?";
}

inline ProjectorVariant projector_from_name(const std::string& s) {
  if (s == "ffn1") return ProjectorVariant::Ffn1;
  if (s == "ffn2") return ProjectorVariant::Ffn2;
  if (s == "xattn") return ProjectorVariant::CrossAttention;
  throw ConfigError("unknown projector variant '" + s + "' (expected ffn1, ffn2 or xattn)");
}

struct ModelDims {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t enc_width = 64;
  std::size_t enc_layers = 2;
  std::size_t enc_heads = 2;
  std::size_t enc_ffn = 128;
  std::size_t proj_hidden = 128;
  std::size_t dec_width = 128;
  std::size_t dec_layers = 4;
  std::size_t dec_heads = 4;
  std::size_t dec_ffn = 256;
  std::size_t max_seq = 160;

  std::size_t patches_per_side() const { return image_size / patch; }
  std::size_t image_tokens() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
};

struct GenerationConfig {
  enum class Mode { Greedy, Sample };
  double temperature = 1.0;
  int max_new_tokens = 16;
  Mode mode = Mode::Sample;
  std::uint64_t seed = 0;

  void validate() const {
    require<ConfigError>(max_new_tokens >= 1, "GenerationConfig: max_new_tokens must be >= 1");
    require<ConfigError>(mode == Mode::Greedy || temperature > 0.0,
                         "GenerationConfig: temperature must be > 0 when sampling");
  }
};

// Pre-LN transformer block parameters, shared layout between the vision
// encoder and the decoder.
struct TransformerBlock {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

// Vision encoder + vision-language projector + decoder LM over a shared
// word-level vocabulary. Immutable during inference; training mutates
// parameters through named_parameters().
class ToyMllm {
 public:
  ToyMllm(std::string model_id, std::uint64_t seed, ProjectorVariant projector,
          const text::Vocabulary* vocab = &text::Vocabulary::default_vocab(),
          ModelDims dims = ModelDims{})
      : model_id_(std::move(model_id)), seed_(seed), projector_(projector), vocab_(vocab),
        dims_(dims) {
    require<ConfigError>(dims_.dec_width % dims_.dec_heads == 0 &&
                             dims_.enc_width % dims_.enc_heads == 0,
                         "ToyMllm: width must be divisible by head count");
    init_params();
  }

  const std::string& model_id() const { return model_id_; }
  std::uint64_t seed() const { return seed_; }
  ProjectorVariant projector() const { return projector_; }
  const ModelDims& dims() const { return dims_; }
  const text::Vocabulary& vocab() const { return *vocab_; }
  std::size_t vocab_size() const { return vocab_->size(); }

  enum class Scope { All, ProjectorAndDecoder };

  std::vector<std::pair<std::string, Tensor*>> named_parameters(Scope scope = Scope::All) {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add = [&out](const std::string& name, Tensor& t) { out.emplace_back(name, &t); };
    auto add_block = [&add](const std::string& p, TransformerBlock& b) {
      add(p + ".ln1_g", b.ln1_g); add(p + ".ln1_b", b.ln1_b);
      add(p + ".wq", b.wq); add(p + ".bq", b.bq);
      add(p + ".wk", b.wk); add(p + ".bk", b.bk);
      add(p + ".wv", b.wv); add(p + ".bv", b.bv);
      add(p + ".wo", b.wo); add(p + ".bo", b.bo);
      add(p + ".ln2_g", b.ln2_g); add(p + ".ln2_b", b.ln2_b);
      add(p + ".w1", b.w1); add(p + ".b1", b.b1);
      add(p + ".w2", b.w2); add(p + ".b2", b.b2);
    };
    if (scope == Scope::All) {
      add("enc.patch_w", patch_w_);
      add("enc.patch_b", patch_b_);
      add("enc.pos", enc_pos_);
      for (std::size_t i = 0; i < enc_blocks_.size(); ++i)
        add_block("enc.b" + std::to_string(i), enc_blocks_[i]);
      add("enc.ln_f_g", enc_ln_g_);
      add("enc.ln_f_b", enc_ln_b_);
    }
    if (projector_ == ProjectorVariant::CrossAttention) {
      add("proj.queries", proj_queries_);
      add("proj.wk", proj_w1_); add("proj.bk", proj_b1_);
      add("proj.wv", proj_w2_); add("proj.bv", proj_b2_);
      add("proj.wo", proj_wo_); add("proj.bo", proj_bo_);
    } else {
      add("proj.w1", proj_w1_); add("proj.b1", proj_b1_);
      if (projector_ == ProjectorVariant::Ffn2) {
        add("proj.w2", proj_w2_); add("proj.b2", proj_b2_);
      }
    }
    add("dec.tok_emb", tok_emb_);
    add("dec.pos", dec_pos_);
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
      add_block("dec.b" + std::to_string(i), dec_blocks_[i]);
    add("dec.ln_f_g", dec_ln_g_);
    add("dec.ln_f_b", dec_ln_b_);
    add("dec.head_w", head_w_);
    add("dec.head_b", head_b_);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named_parameters(Scope scope = Scope::All) const {
    auto mut = const_cast<ToyMllm*>(this)->named_parameters(scope);
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(n, t);
    return out;
  }

  // ---- graph construction --------------------------------------------------

  // Full hidden-state sequence: image tokens followed by text tokens.
  // `text_ids` must start with BOS.
  ad::Var hidden_states(ad::Tape& tape, ad::Var image, const std::vector<int>& text_ids,
                        bool train_params = false) const {
    require(!text_ids.empty() && text_ids[0] == text::Vocabulary::kBos,
            "hidden_states: text must start with BOS");
    const std::size_t L = dims_.image_tokens() + text_ids.size();
    require<ShapeError>(L <= dims_.max_seq, "sequence length ", L, " exceeds max_seq ",
                        dims_.max_seq);
    ParamLeaves P(tape, *this, train_params);
    ad::Var enc = encode_image(tape, image, P);
    ad::Var img_tok = project(tape, enc, P);
    ad::Var temb = ad::embedding_rows(P.tok_emb, text_ids);
    ad::Var seq = ad::concat_rows({img_tok, temb});
    seq = ad::add(seq, ad::slice_rows(P.dec_pos, 0, L));
    for (std::size_t i = 0; i < dims_.dec_layers; ++i)
      seq = block_fwd(tape, seq, P.dec_blocks[i], dims_.dec_heads, /*causal=*/true);
    return ad::layer_norm_rows(seq, P.dec_ln_g, P.dec_ln_b);
  }

  ad::Var logits_for_rows(ad::Tape& tape, ad::Var hidden, std::size_t r0, std::size_t r1,
                          bool train_params = false) const {
    ad::Var w = tape.leaf_ref(&head_w_, train_params);
    ad::Var b = tape.leaf_ref(&head_b_, train_params);
    return ad::add_row_bias(ad::matmul(ad::slice_rows(hidden, r0, r1), w), b);
  }

  // -sum(log T_k) over response positions [from, to); the teacher-forced
  // cross-entropy of the response given image and context.
  ad::Var sequence_ce_loss(ad::Tape& tape, ad::Var image, const std::vector<int>& context_ids,
                           const std::vector<int>& response_ids, std::size_t from, std::size_t to,
                           bool train_params = false) const {
    require(!response_ids.empty(), "sequence_ce_loss: empty response");
    require(from < to && to <= response_ids.size(), "sequence_ce_loss: bad scoring range");
    std::vector<int> text = context_ids;
    text.insert(text.end(), response_ids.begin(), response_ids.begin() + static_cast<long>(to));
    ad::Var h = hidden_states(tape, image, text, train_params);
    // Row that predicts response token k sits one position earlier.
    const std::size_t base = dims_.image_tokens() + context_ids.size() - 1;
    ad::Var lg = logits_for_rows(tape, h, base + from, base + to, train_params);
    ad::Var lp = ad::log_softmax_rows(lg);
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    for (std::size_t k = from; k < to; ++k)
      picks.emplace_back(k - from, static_cast<std::size_t>(response_ids[k]));
    return ad::scale(ad::sum(ad::gather(lp, picks)), -1.0);
  }

  // ---- inference ------------------------------------------------------------

  // Logits for every position (image tokens + prefix), shape [L x vocab].
  Tensor forward_logits(const Tensor& image, const std::vector<int>& prefix) const {
    check_image(image);
    ad::Tape tape;
    ad::Var img = tape.leaf_ref(&image, false);
    ad::Var h = hidden_states(tape, img, prefix);
    ad::Var lg = logits_for_rows(tape, h, 0, dims_.image_tokens() + prefix.size());
    return tape.value(lg);
  }

  // Per-token conditional log-probs of the response given image and question.
  std::vector<double> teacher_forced_log_probs(const Tensor& image,
                                               const std::vector<int>& question_ids,
                                               const std::vector<int>& response_ids) const {
    check_image(image);
    require(!response_ids.empty(), "teacher_forced_log_probs: empty response");
    std::vector<int> ctx = with_bos(question_ids);
    ad::Tape tape;
    ad::Var img = tape.leaf_ref(&image, false);
    std::vector<int> text = ctx;
    text.insert(text.end(), response_ids.begin(), response_ids.end());
    ad::Var h = hidden_states(tape, img, text);
    const std::size_t base = dims_.image_tokens() + ctx.size() - 1;
    ad::Var lg = logits_for_rows(tape, h, base, base + response_ids.size());
    ad::Var lp = ad::log_softmax_rows(lg);
    const Tensor& L = tape.value(lp);
    std::vector<double> out(response_ids.size());
    for (std::size_t k = 0; k < response_ids.size(); ++k)
      out[k] = L.at(k, static_cast<std::size_t>(response_ids[k]));
    return out;
  }

  // Autoregressive continuation of an arbitrary context (used directly for
  // multi-round transcripts). Returns generated ids without the final EOS.
  std::vector<int> generate_ids_from_context(const Tensor& image, std::vector<int> context_ids,
                                             const GenerationConfig& cfg) const {
    check_image(image);
    cfg.validate();
    require(!context_ids.empty() && context_ids[0] == text::Vocabulary::kBos,
            "generate: context must start with BOS");
    Rng rng(cfg.seed);
    std::vector<int> out;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
      if (dims_.image_tokens() + context_ids.size() + 1 > dims_.max_seq) break;
      ad::Tape tape;
      ad::Var img = tape.leaf_ref(&image, false);
      ad::Var h = hidden_states(tape, img, context_ids);
      const std::size_t last = dims_.image_tokens() + context_ids.size() - 1;
      ad::Var lg = logits_for_rows(tape, h, last, last + 1);
      const Tensor& row = tape.value(lg);
      const int next = cfg.mode == GenerationConfig::Mode::Greedy
                           ? argmax_row(row)
                           : sample_row(row, cfg.temperature, rng);
      if (next == text::Vocabulary::kEos) break;
      out.push_back(next);
      context_ids.push_back(next);
    }
    return out;
  }

  std::vector<int> generate_ids(const Tensor& image, const std::vector<int>& question_ids,
                                const GenerationConfig& cfg) const {
    return generate_ids_from_context(image, with_bos(question_ids), cfg);
  }

  std::string generate(const Tensor& image, const std::vector<int>& question_ids,
                       const GenerationConfig& cfg) const {
    return vocab_->detokenize(generate_ids(image, question_ids, cfg));
  }

  static std::vector<int> with_bos(const std::vector<int>& ids) {
    std::vector<int> out;
    out.reserve(ids.size() + 1);
    out.push_back(text::Vocabulary::kBos);
    out.insert(out.end(), ids.begin(), ids.end());
    return out;
  }

  void check_image(const Tensor& image) const {
    const Shape want{dims_.image_size, dims_.image_size, dims_.channels};
    require<ShapeError>(image.shape == want, "image shape ", shape_str(image.shape),
                        " does not match expected ", shape_str(want));
  }

 private:
  // Per-forward leaf handles for every parameter used by the graph.
  struct ParamLeaves {
    ad::Var patch_w, patch_b, enc_pos, enc_ln_g, enc_ln_b;
    struct BlockLeaves {
      ad::Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<BlockLeaves> enc_blocks, dec_blocks;
    ad::Var proj_queries, proj_w1, proj_b1, proj_w2, proj_b2, proj_wo, proj_bo;
    ad::Var tok_emb, dec_pos, dec_ln_g, dec_ln_b;

    ParamLeaves(ad::Tape& tape, const ToyMllm& m, bool grad) {
      auto L = [&tape, grad](const Tensor& t) { return tape.leaf_ref(&t, grad); };
      auto Lb = [&L](const TransformerBlock& b) {
        return BlockLeaves{L(b.ln1_g), L(b.ln1_b), L(b.wq), L(b.bq), L(b.wk), L(b.bk),
                           L(b.wv),    L(b.bv),    L(b.wo), L(b.bo), L(b.ln2_g), L(b.ln2_b),
                           L(b.w1),    L(b.b1),    L(b.w2), L(b.b2)};
      };
      patch_w = L(m.patch_w_); patch_b = L(m.patch_b_);
      enc_pos = L(m.enc_pos_);
      for (const auto& b : m.enc_blocks_) enc_blocks.push_back(Lb(b));
      enc_ln_g = L(m.enc_ln_g_); enc_ln_b = L(m.enc_ln_b_);
      if (m.projector_ == ProjectorVariant::CrossAttention) proj_queries = L(m.proj_queries_);
      proj_w1 = L(m.proj_w1_); proj_b1 = L(m.proj_b1_);
      if (m.projector_ != ProjectorVariant::Ffn1) { proj_w2 = L(m.proj_w2_); proj_b2 = L(m.proj_b2_); }
      if (m.projector_ == ProjectorVariant::CrossAttention) { proj_wo = L(m.proj_wo_); proj_bo = L(m.proj_bo_); }
      tok_emb = L(m.tok_emb_); dec_pos = L(m.dec_pos_);
      for (const auto& b : m.dec_blocks_) dec_blocks.push_back(Lb(b));
      dec_ln_g = L(m.dec_ln_g_); dec_ln_b = L(m.dec_ln_b_);
    }
  };

  static ad::Var block_fwd(ad::Tape& tape, ad::Var x, const ParamLeaves::BlockLeaves& b,
                           std::size_t heads, bool causal) {
    (void)tape;
    const std::size_t d = x.tape->value(x).cols();
    const std::size_t hd = d / heads;
    ad::Var h = ad::layer_norm_rows(x, b.ln1_g, b.ln1_b);
    ad::Var q = ad::add_row_bias(ad::matmul(h, b.wq), b.bq);
    ad::Var k = ad::add_row_bias(ad::matmul(h, b.wk), b.bk);
    ad::Var v = ad::add_row_bias(ad::matmul(h, b.wv), b.bv);
    std::vector<ad::Var> ctx;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t i = 0; i < heads; ++i) {
      ad::Var qi = ad::slice_cols(q, i * hd, (i + 1) * hd);
      ad::Var ki = ad::slice_cols(k, i * hd, (i + 1) * hd);
      ad::Var vi = ad::slice_cols(v, i * hd, (i + 1) * hd);
      ad::Var s = ad::scale(ad::matmul_nt(qi, ki), inv_sqrt);
      ad::Var a = causal ? ad::causal_softmax_rows(s) : ad::softmax_rows(s);
      ctx.push_back(ad::matmul(a, vi));
    }
    ad::Var c = ad::concat_cols(ctx);
    x = ad::add(x, ad::add_row_bias(ad::matmul(c, b.wo), b.bo));
    ad::Var h2 = ad::layer_norm_rows(x, b.ln2_g, b.ln2_b);
    ad::Var f = ad::add_row_bias(ad::matmul(h2, b.w1), b.b1);
    f = ad::add_row_bias(ad::matmul(ad::gelu(f), b.w2), b.b2);
    return ad::add(x, f);
  }

  ad::Var encode_image(ad::Tape& tape, ad::Var image, const ParamLeaves& P) const {
    ad::Var p = ad::extract_patches(image, dims_.patch);
    ad::Var e = ad::add_row_bias(ad::matmul(p, P.patch_w), P.patch_b);
    e = ad::add(e, P.enc_pos);
    for (std::size_t i = 0; i < dims_.enc_layers; ++i)
      e = block_fwd(tape, e, P.enc_blocks[i], dims_.enc_heads, /*causal=*/false);
    return ad::layer_norm_rows(e, P.enc_ln_g, P.enc_ln_b);
  }

  ad::Var project(ad::Tape& tape, ad::Var enc, const ParamLeaves& P) const {
    (void)tape;
    switch (projector_) {
      case ProjectorVariant::Ffn1:
        return ad::add_row_bias(ad::matmul(enc, P.proj_w1), P.proj_b1);
      case ProjectorVariant::Ffn2: {
        ad::Var h = ad::gelu(ad::add_row_bias(ad::matmul(enc, P.proj_w1), P.proj_b1));
        return ad::add_row_bias(ad::matmul(h, P.proj_w2), P.proj_b2);
      }
      case ProjectorVariant::CrossAttention: {
        ad::Var k = ad::add_row_bias(ad::matmul(enc, P.proj_w1), P.proj_b1);
        ad::Var v = ad::add_row_bias(ad::matmul(enc, P.proj_w2), P.proj_b2);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dims_.dec_width));
        ad::Var s = ad::scale(ad::matmul_nt(P.proj_queries, k), inv_sqrt);
        ad::Var a = ad::softmax_rows(s);
        ad::Var o = ad::matmul(a, v);
        return ad::add_row_bias(ad::matmul(o, P.proj_wo), P.proj_bo);
      }
    }
    throw Error("unreachable projector variant");
  }

  static int argmax_row(const Tensor& row) {
    int best = 0;
    for (std::size_t j = 1; j < row.cols(); ++j)
      if (row.data[j] > row.data[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    return best;
  }

  static int sample_row(const Tensor& row, double temperature, Rng& rng) {
    const std::size_t n = row.cols();
    std::vector<double> p(n);
    double mx = row.data[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row.data[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (p[j] = std::exp((row.data[j] - mx) / temperature));
    const double u = rng.uniform01() * z;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      acc += p[j];
      if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(n - 1);
  }

  void init_params() {
    Rng rng(mix_seed(seed_, 0x746d6c6dULL));
    const std::size_t pd = dims_.patch_dim(), ew = dims_.enc_width, dw = dims_.dec_width;
    const std::size_t V = vocab_->size();
    auto lin = [&rng](std::size_t in, std::size_t out_) {
      return Tensor::randn({in, out_}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    auto make_block = [&](std::size_t w, std::size_t ffn, std::size_t n_layers) {
      TransformerBlock b;
      b.ln1_g = Tensor::full({w}, 1.0); b.ln1_b = Tensor({w});
      b.wq = lin(w, w); b.bq = Tensor({w});
      b.wk = lin(w, w); b.bk = Tensor({w});
      b.wv = lin(w, w); b.bv = Tensor({w});
      b.wo = Tensor::randn({w, w}, rng, 1.0 / std::sqrt(static_cast<double>(w) * 2.0 *
                                                        static_cast<double>(n_layers)));
      b.bo = Tensor({w});
      b.ln2_g = Tensor::full({w}, 1.0); b.ln2_b = Tensor({w});
      b.w1 = lin(w, ffn); b.b1 = Tensor({ffn});
      b.w2 = Tensor::randn({ffn, w}, rng, 1.0 / std::sqrt(static_cast<double>(ffn) * 2.0 *
                                                          static_cast<double>(n_layers)));
      b.b2 = Tensor({w});
      return b;
    };
    patch_w_ = lin(pd, ew);
    patch_b_ = Tensor({ew});
    enc_pos_ = Tensor::randn({dims_.image_tokens(), ew}, rng, 0.02);
    for (std::size_t i = 0; i < dims_.enc_layers; ++i)
      enc_blocks_.push_back(make_block(ew, dims_.enc_ffn, dims_.enc_layers));
    enc_ln_g_ = Tensor::full({ew}, 1.0);
    enc_ln_b_ = Tensor({ew});
    switch (projector_) {
      case ProjectorVariant::Ffn1:
        proj_w1_ = lin(ew, dw); proj_b1_ = Tensor({dw});
        break;
      case ProjectorVariant::Ffn2:
        proj_w1_ = lin(ew, dims_.proj_hidden); proj_b1_ = Tensor({dims_.proj_hidden});
        proj_w2_ = lin(dims_.proj_hidden, dw); proj_b2_ = Tensor({dw});
        break;
      case ProjectorVariant::CrossAttention:
        proj_queries_ = Tensor::randn({dims_.image_tokens(), dw}, rng, 0.02);
        proj_w1_ = lin(ew, dw); proj_b1_ = Tensor({dw});
        proj_w2_ = lin(ew, dw); proj_b2_ = Tensor({dw});
        proj_wo_ = lin(dw, dw); proj_bo_ = Tensor({dw});
        break;
    }
    tok_emb_ = Tensor::randn({V, dw}, rng, 0.02);
    dec_pos_ = Tensor::randn({dims_.max_seq, dw}, rng, 0.02);
    for (std::size_t i = 0; i < dims_.dec_layers; ++i)
      dec_blocks_.push_back(make_block(dw, dims_.dec_ffn, dims_.dec_layers));
    dec_ln_g_ = Tensor::full({dw}, 1.0);
    dec_ln_b_ = Tensor({dw});
    head_w_ = lin(dw, V);
    head_b_ = Tensor({V});
  }

  std::string model_id_;
  std::uint64_t seed_;
  ProjectorVariant projector_;
  const text::Vocabulary* vocab_;
  ModelDims dims_;

  Tensor patch_w_, patch_b_, enc_pos_, enc_ln_g_, enc_ln_b_;
  std::vector<TransformerBlock> enc_blocks_;
  Tensor proj_queries_, proj_w1_, proj_b1_, proj_w2_, proj_b2_, proj_wo_, proj_bo_;
  Tensor tok_emb_, dec_pos_, dec_ln_g_, dec_ln_b_, head_w_, head_b_;
  std::vector<TransformerBlock> dec_blocks_;
};

}  // namespace refusal::mllm
