#include "tailquant/pipeline.hpp"

#include <chrono>
#include <optional>
#include <stdexcept>

#include "tailquant/linalg.hpp"

namespace tailquant {

LayerCalibConfig PipelineOptions::layer_config() const {
  LayerCalibConfig lc;
  lc.method = method;
  lc.grid_n = grid_n;
  lc.grid_scale = grid_scale;
  lc.lo_frac = lo_frac;
  lc.hi_frac = hi_frac;
  lc.eps_idx = eps_idx;
  lc.weight_bits = weight_bits;
  lc.act_bits = act_bits;
  lc.twin_rounds = twin_rounds;
  lc.twin_threshold = softmax_threshold;
  return lc;
}

void PipelineOptions::validate() const {
  weight_bits.validate();
  act_bits.validate();
  tre_config.validate();
  if (grid_n < 3) throw std::invalid_argument("pipeline: grid_n must be >= 3");
  if (!(lo_frac > 0.0) || !(lo_frac < hi_frac)) throw std::invalid_argument("pipeline: bad grid bounds");
  if (eps_idx < 2) throw std::invalid_argument("pipeline: eps_idx must be >= 2");
  if (twin_rounds < 1) throw std::invalid_argument("pipeline: twin_rounds must be >= 1");
  if (adapter_rank < 1) throw std::invalid_argument("pipeline: adapter_rank must be >= 1");
  if (!(ridge_lambda >= 0.0)) throw std::invalid_argument("pipeline: ridge_lambda must be nonnegative");
}

std::string submodule_name(std::size_t index) {
  return "block" + std::to_string(index / 2) + (index % 2 == 0 ? ".attn" : ".mlp");
}

Tensor stack_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: nothing to stack");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Tensor& t : parts) {
    if (t.cols() != cols) throw std::invalid_argument("stack_rows: column mismatch");
    rows += t.rows();
  }
  Tensor out({rows, cols});
  std::size_t at = 0;
  for (const Tensor& t : parts) {
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + at);
    at += t.size();
  }
  return out;
}

namespace {

using OptQuant = std::optional<QuantParams>;
using OptTwin = std::optional<TwinQuantParams>;

Tensor maybe_quant(const Tensor& t, const OptQuant& p) {
  return p ? quantize_uniform(t, *p) : t;
}

Tensor attn_branch_eval(const ToyNetConfig& cfg, const Tensor& h, const Tensor& wq, const Tensor& wk,
                        const Tensor& wv, const Tensor& wo, const OptQuant& input_p,
                        const OptTwin& probs_p) {
  const Tensor hq = maybe_quant(h, input_p);
  const Tensor q = matmul(hq, transpose(wq));
  const Tensor k = matmul(hq, transpose(wk));
  const Tensor v = matmul(hq, transpose(wv));
  Tensor probs = attention_probs(cfg, q, k);
  if (probs_p) probs = quantize_twin(probs, *probs_p);
  return matmul(attention_context(cfg, probs, v), transpose(wo));
}

Tensor mlp_branch_eval(const ToyNetConfig& cfg, const Tensor& h, const Tensor& w1, const Tensor& w2,
                       const OptQuant& input_p, const OptTwin& gelu_p) {
  (void)cfg;
  const Tensor hq = maybe_quant(h, input_p);
  Tensor a = matmul(hq, transpose(w1));
  for (double& v : a.data()) v = gelu(v);
  if (gelu_p) a = quantize_twin(a, *gelu_p);
  return matmul(a, transpose(w2));
}

// Full-precision run of the remaining submodules, for whole-network
// similarity evaluation.
Tensor forward_suffix(const ToyNet& net, Tensor x, std::size_t from_submodule) {
  const ToyNetConfig& cfg = net.config;
  for (std::size_t idx = from_submodule; idx < cfg.submodule_count(); ++idx) {
    const BlockWeights& blk = net.blocks[idx / 2];
    if (idx % 2 == 0) {
      const Tensor h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
      x = add(x, attn_branch_eval(cfg, h, blk.wq, blk.wk, blk.wv, blk.wo, std::nullopt, std::nullopt));
    } else {
      const Tensor h = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
      x = add(x, mlp_branch_eval(cfg, h, blk.w_fc1, blk.w_fc2, std::nullopt, std::nullopt));
    }
  }
  return x;
}

struct CalibContext {
  const ToyNet& net;
  const PipelineOptions& opt;
  LayerCalibConfig lc;
  std::size_t submodule = 0;
  const std::vector<Tensor>* stream = nullptr;       // inputs to the residual add
  const std::vector<Tensor>* h = nullptr;            // post-norm submodule inputs
  const std::vector<ForwardTaps>* fp_taps = nullptr;
  const std::vector<BackwardResult>* grads = nullptr;
  Tensor fp_final;  // stacked full-precision network outputs
};

SimilarityWeights grads_for(const CalibContext& ctx, Tensor (*pick)(const SubmoduleGrads&)) {
  if (!ctx.grads) return SimilarityWeights::ones();
  std::vector<Tensor> parts;
  parts.reserve(ctx.grads->size());
  for (const auto& g : *ctx.grads) parts.push_back(pick(g.submodules[ctx.submodule]));
  return SimilarityWeights::from(stack_rows(parts));
}

// Search the configured interval scheme for a nonlinearity's values; a
// uniform choice is stored as a degenerate twin with one step for both
// regions, which quantizes identically to the single-interval rule.
TwinQuantParams search_nonlin_interval(const std::string& unit, const Tensor& values,
                                       const BitWidthSpec& bits, ActQuantKind kind, double threshold,
                                       const std::function<double(const TwinQuantParams&)>& sim_of,
                                       const LayerCalibConfig& lc,
                                       std::vector<UnitSearch>& out_searches) {
  if (kind == ActQuantKind::Uniform) {
    auto res = search_uniform_interval(
        unit, values, bits,
        [&](const QuantParams& p) {
          TwinQuantParams tp;
          tp.delta_r1 = tp.delta_r2 = p.delta;
          tp.bitwidth = bits;
          tp.partition = TwinPartition::BySign;
          return sim_of(tp);
        },
        lc);
    TwinQuantParams tp;
    tp.delta_r1 = tp.delta_r2 = res.params.delta;
    tp.bitwidth = bits;
    tp.partition = TwinPartition::BySign;
    out_searches.push_back(std::move(res.search));
    return tp;
  }
  const TwinPartition part =
      kind == ActQuantKind::TwinBySign ? TwinPartition::BySign : TwinPartition::ByThreshold;
  auto twin = search_twin_interval(unit, values, bits, part,
                                   kind == ActQuantKind::TwinByThreshold ? threshold : 0.0, sim_of, lc);
  for (auto& s : twin.searches) out_searches.push_back(std::move(s));
  return twin.params;
}

// Whole-network candidate evaluation: finish the submodule under the given
// partial quantization, add the residual, run the rest at full precision.
template <typename BranchFn>
double final_output_similarity(const CalibContext& ctx, const BranchFn& branch) {
  std::vector<Tensor> outs;
  outs.reserve(ctx.stream->size());
  for (std::size_t s = 0; s < ctx.stream->size(); ++s) {
    Tensor x = add((*ctx.stream)[s], branch(s));
    outs.push_back(forward_suffix(ctx.net, std::move(x), ctx.submodule + 1));
  }
  return similarity(ctx.fp_final, stack_rows(outs), SimilarityWeights::ones());
}

void calibrate_attention(const CalibContext& ctx, SubmoduleQuant& sq, ModuleReport& mr) {
  const ToyNetConfig& cfg = ctx.net.config;
  const BlockWeights& blk = ctx.net.blocks[ctx.submodule / 2];
  const std::vector<Tensor>& h = *ctx.h;
  const std::size_t n_samples = h.size();
  const LayerCalibConfig& lc = ctx.lc;

  struct WeightUnit {
    const char* name;
    const Tensor* w;
    Tensor (*pick)(const SubmoduleGrads&);
  };
  const WeightUnit qkv_units[] = {
      {"wq", &blk.wq, [](const SubmoduleGrads& g) { return g.q; }},
      {"wk", &blk.wk, [](const SubmoduleGrads& g) { return g.k; }},
      {"wv", &blk.wv, [](const SubmoduleGrads& g) { return g.v; }},
  };

  std::vector<Tensor> wq_cand(4);  // chosen quantized wq, wk, wv, wo
  for (const WeightUnit& unit : qkv_units) {
    std::vector<Tensor> fp_parts(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) fp_parts[s] = matmul(h[s], transpose(*unit.w));
    const Tensor ref = stack_rows(fp_parts);
    const SimilarityWeights g = grads_for(ctx, unit.pick);

    std::function<double(const QuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const QuantParams& p) {
        const Tensor wq_t = transpose(quantize_uniform(*unit.w, p));
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) parts[s] = matmul(h[s], wq_t);
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const QuantParams& p) {
        const Tensor cand = quantize_uniform(*unit.w, p);
        const std::size_t cur = sq.weight_params.size();  // 0 = wq, 1 = wk, 2 = wv
        const Tensor& cq = cur == 0 ? cand : wq_cand[0];
        const Tensor& ck = cur == 1 ? cand : (cur > 1 ? wq_cand[1] : blk.wk);
        const Tensor& cv = cur == 2 ? cand : blk.wv;
        return final_output_similarity(ctx, [&](std::size_t s) {
          return attn_branch_eval(cfg, h[s], cq, ck, cv, blk.wo, std::nullopt, std::nullopt);
        });
      };
    }
    auto res = search_uniform_interval(unit.name, *unit.w, lc.weight_bits, sim_of, lc);
    sq.weight_params.push_back(res.params);
    mr.searches.push_back(std::move(res.search));
    wq_cand[sq.weight_params.size() - 1] = quantize_uniform(*unit.w, sq.weight_params.back());
  }

  // Full-precision context is the reference for every remaining unit; the
  // candidate paths run through the already-quantized projections so each
  // search absorbs the error accumulated inside the submodule.
  std::vector<Tensor> ctx_fp(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Tensor q_fp = matmul(h[s], transpose(blk.wq));
    const Tensor k_fp = matmul(h[s], transpose(blk.wk));
    const Tensor v_fp = matmul(h[s], transpose(blk.wv));
    ctx_fp[s] = attention_context(cfg, attention_probs(cfg, q_fp, k_fp), v_fp);
  }
  std::vector<Tensor> ctx_in(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Tensor q = matmul(h[s], transpose(wq_cand[0]));
    const Tensor k = matmul(h[s], transpose(wq_cand[1]));
    const Tensor v = matmul(h[s], transpose(wq_cand[2]));
    ctx_in[s] = attention_context(cfg, attention_probs(cfg, q, k), v);
  }
  {
    std::vector<Tensor> fp_parts(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) fp_parts[s] = matmul(ctx_fp[s], transpose(blk.wo));
    const Tensor ref = stack_rows(fp_parts);
    const SimilarityWeights g = grads_for(ctx, [](const SubmoduleGrads& gr) { return gr.output; });

    std::function<double(const QuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const QuantParams& p) {
        const Tensor wo_t = transpose(quantize_uniform(blk.wo, p));
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) parts[s] = matmul(ctx_in[s], wo_t);
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const QuantParams& p) {
        const Tensor wo_q = quantize_uniform(blk.wo, p);
        return final_output_similarity(ctx, [&](std::size_t s) {
          return attn_branch_eval(cfg, h[s], wq_cand[0], wq_cand[1], wq_cand[2], wo_q, std::nullopt,
                                  std::nullopt);
        });
      };
    }
    auto res = search_uniform_interval("wo", blk.wo, lc.weight_bits, sim_of, lc);
    sq.weight_params.push_back(res.params);
    mr.searches.push_back(std::move(res.search));
    wq_cand[3] = quantize_uniform(blk.wo, sq.weight_params.back());
  }

  // Submodule-input activation interval; the unit output is the stacked
  // q/k/v projections, referenced against the full-precision projections.
  {
    std::vector<Tensor> fp_parts;
    fp_parts.reserve(3 * n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
      fp_parts.push_back(matmul(h[s], transpose(blk.wq)));
      fp_parts.push_back(matmul(h[s], transpose(blk.wk)));
      fp_parts.push_back(matmul(h[s], transpose(blk.wv)));
    }
    const Tensor ref = stack_rows(fp_parts);
    SimilarityWeights g = SimilarityWeights::ones();
    if (ctx.grads) {
      std::vector<Tensor> parts;
      for (const auto& gr : *ctx.grads) {
        parts.push_back(gr.submodules[ctx.submodule].q);
        parts.push_back(gr.submodules[ctx.submodule].k);
        parts.push_back(gr.submodules[ctx.submodule].v);
      }
      g = SimilarityWeights::from(stack_rows(parts));
    }

    const Tensor h_all = stack_rows(h);
    std::function<double(const QuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const QuantParams& p) {
        std::vector<Tensor> parts;
        parts.reserve(3 * n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) {
          const Tensor hq = quantize_uniform(h[s], p);
          parts.push_back(matmul(hq, transpose(wq_cand[0])));
          parts.push_back(matmul(hq, transpose(wq_cand[1])));
          parts.push_back(matmul(hq, transpose(wq_cand[2])));
        }
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const QuantParams& p) {
        return final_output_similarity(ctx, [&](std::size_t s) {
          return attn_branch_eval(cfg, h[s], wq_cand[0], wq_cand[1], wq_cand[2], wq_cand[3], p,
                                  std::nullopt);
        });
      };
    }
    auto res = search_uniform_interval("input", h_all, lc.act_bits, sim_of, lc);
    sq.input_params = res.params;
    mr.searches.push_back(std::move(res.search));
  }

  // Post-softmax probabilities, twin intervals (unsigned codes since
  // probabilities are nonnegative). Candidates run on the fully quantized
  // prefix; the reference is the full-precision context.
  {
    std::vector<Tensor> probs_q(n_samples), v_q(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
      const Tensor hq = quantize_uniform(h[s], sq.input_params);
      const Tensor q = matmul(hq, transpose(wq_cand[0]));
      const Tensor k = matmul(hq, transpose(wq_cand[1]));
      v_q[s] = matmul(hq, transpose(wq_cand[2]));
      probs_q[s] = attention_probs(cfg, q, k);
    }
    const Tensor ref = stack_rows(ctx_fp);
    const SimilarityWeights g = grads_for(ctx, [](const SubmoduleGrads& gr) { return gr.context; });
    const BitWidthSpec probs_bits{lc.act_bits.bits, false};

    std::function<double(const TwinQuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const TwinQuantParams& p) {
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) {
          parts[s] = attention_context(cfg, quantize_twin(probs_q[s], p), v_q[s]);
        }
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const TwinQuantParams& p) {
        return final_output_similarity(ctx, [&](std::size_t s) {
          return attn_branch_eval(cfg, h[s], wq_cand[0], wq_cand[1], wq_cand[2], wq_cand[3],
                                  sq.input_params, p);
        });
      };
    }
    sq.nonlin_params = search_nonlin_interval("softmax", stack_rows(probs_q), probs_bits,
                                              ctx.opt.softmax_quant, ctx.opt.softmax_threshold, sim_of,
                                              lc, mr.searches);
  }
}

void calibrate_mlp(const CalibContext& ctx, SubmoduleQuant& sq, ModuleReport& mr) {
  const ToyNetConfig& cfg = ctx.net.config;
  const BlockWeights& blk = ctx.net.blocks[ctx.submodule / 2];
  const std::vector<Tensor>& h = *ctx.h;
  const std::size_t n_samples = h.size();
  const LayerCalibConfig& lc = ctx.lc;

  Tensor fc1_q, fc2_q;

  // fc1 on the post-norm input.
  {
    std::vector<Tensor> fp_parts(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) fp_parts[s] = matmul(h[s], transpose(blk.w_fc1));
    const Tensor ref = stack_rows(fp_parts);
    const SimilarityWeights g = grads_for(ctx, [](const SubmoduleGrads& gr) { return gr.fc1_out; });

    std::function<double(const QuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const QuantParams& p) {
        const Tensor wt = transpose(quantize_uniform(blk.w_fc1, p));
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) parts[s] = matmul(h[s], wt);
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const QuantParams& p) {
        const Tensor w1_q = quantize_uniform(blk.w_fc1, p);
        return final_output_similarity(ctx, [&](std::size_t s) {
          return mlp_branch_eval(cfg, h[s], w1_q, blk.w_fc2, std::nullopt, std::nullopt);
        });
      };
    }
    auto res = search_uniform_interval("fc1", blk.w_fc1, lc.weight_bits, sim_of, lc);
    sq.weight_params.push_back(res.params);
    mr.searches.push_back(std::move(res.search));
    fc1_q = quantize_uniform(blk.w_fc1, res.params);
  }

  // Full-precision activations are the reference target; the candidate path
  // for fc2 runs on activations produced by the quantized fc1.
  std::vector<Tensor> act_fp(n_samples), act_in(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    act_fp[s] = matmul(h[s], transpose(blk.w_fc1));
    for (double& v : act_fp[s].data()) v = gelu(v);
    act_in[s] = matmul(h[s], transpose(fc1_q));
    for (double& v : act_in[s].data()) v = gelu(v);
  }
  {
    std::vector<Tensor> fp_parts(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) fp_parts[s] = matmul(act_fp[s], transpose(blk.w_fc2));
    const Tensor ref = stack_rows(fp_parts);
    const SimilarityWeights g = grads_for(ctx, [](const SubmoduleGrads& gr) { return gr.output; });

    std::function<double(const QuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const QuantParams& p) {
        const Tensor wt = transpose(quantize_uniform(blk.w_fc2, p));
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) parts[s] = matmul(act_in[s], wt);
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const QuantParams& p) {
        const Tensor w2_q = quantize_uniform(blk.w_fc2, p);
        return final_output_similarity(ctx, [&](std::size_t s) {
          return mlp_branch_eval(cfg, h[s], fc1_q, w2_q, std::nullopt, std::nullopt);
        });
      };
    }
    auto res = search_uniform_interval("fc2", blk.w_fc2, lc.weight_bits, sim_of, lc);
    sq.weight_params.push_back(res.params);
    mr.searches.push_back(std::move(res.search));
    fc2_q = quantize_uniform(blk.w_fc2, res.params);
  }

  // Submodule-input activation interval, referenced against the
  // full-precision first projection.
  {
    std::vector<Tensor> fp_parts(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) fp_parts[s] = matmul(h[s], transpose(blk.w_fc1));
    const Tensor ref = stack_rows(fp_parts);
    const SimilarityWeights g = grads_for(ctx, [](const SubmoduleGrads& gr) { return gr.fc1_out; });
    const Tensor h_all = stack_rows(h);

    std::function<double(const QuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const QuantParams& p) {
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) parts[s] = matmul(quantize_uniform(h[s], p), transpose(fc1_q));
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const QuantParams& p) {
        return final_output_similarity(ctx, [&](std::size_t s) {
          return mlp_branch_eval(cfg, h[s], fc1_q, fc2_q, p, std::nullopt);
        });
      };
    }
    auto res = search_uniform_interval("input", h_all, lc.act_bits, sim_of, lc);
    sq.input_params = res.params;
    mr.searches.push_back(std::move(res.search));
  }

  // Post-GELU activations on the fully quantized prefix, referenced against
  // the full-precision branch output.
  {
    std::vector<Tensor> a_s(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
      a_s[s] = matmul(quantize_uniform(h[s], sq.input_params), transpose(fc1_q));
      for (double& v : a_s[s].data()) v = gelu(v);
    }
    std::vector<Tensor> fp_parts(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) fp_parts[s] = matmul(act_fp[s], transpose(blk.w_fc2));
    const Tensor ref = stack_rows(fp_parts);
    const SimilarityWeights g = grads_for(ctx, [](const SubmoduleGrads& gr) { return gr.output; });

    std::function<double(const TwinQuantParams&)> sim_of;
    if (!ctx.opt.sim_on_final_output) {
      sim_of = [&](const TwinQuantParams& p) {
        std::vector<Tensor> parts(n_samples);
        for (std::size_t s = 0; s < n_samples; ++s) parts[s] = matmul(quantize_twin(a_s[s], p), transpose(fc2_q));
        return similarity(ref, stack_rows(parts), g);
      };
    } else {
      sim_of = [&](const TwinQuantParams& p) {
        return final_output_similarity(ctx, [&](std::size_t s) {
          return mlp_branch_eval(cfg, h[s], fc1_q, fc2_q, sq.input_params, p);
        });
      };
    }
    sq.nonlin_params = search_nonlin_interval("gelu", stack_rows(a_s), lc.act_bits, ctx.opt.gelu_quant,
                                              ctx.opt.softmax_threshold, sim_of, lc, mr.searches);
  }
}

Tensor quant_submodule_forward(const ToyNet& net, std::size_t submodule, const SubmoduleQuant& sq,
                               const std::vector<Tensor>& qw, const Tensor& h) {
  const ToyNetConfig& cfg = net.config;
  if (submodule % 2 == 0) {
    return attn_branch_eval(cfg, h, qw[0], qw[1], qw[2], qw[3], sq.input_params, sq.nonlin_params);
  }
  return mlp_branch_eval(cfg, h, qw[0], qw[1], sq.input_params, sq.nonlin_params);
}

std::vector<Tensor> quantize_submodule_weights(const ToyNet& net, std::size_t submodule,
                                               const SubmoduleQuant& sq) {
  const BlockWeights& blk = net.blocks[submodule / 2];
  std::vector<Tensor> qw;
  if (submodule % 2 == 0) {
    qw.push_back(quantize_uniform(blk.wq, sq.weight_params.at(0)));
    qw.push_back(quantize_uniform(blk.wk, sq.weight_params.at(1)));
    qw.push_back(quantize_uniform(blk.wv, sq.weight_params.at(2)));
    qw.push_back(quantize_uniform(blk.wo, sq.weight_params.at(3)));
  } else {
    qw.push_back(quantize_uniform(blk.w_fc1, sq.weight_params.at(0)));
    qw.push_back(quantize_uniform(blk.w_fc2, sq.weight_params.at(1)));
  }
  return qw;
}

}  // namespace

void refresh_quant_weights(QuantizedToyNet& qnet) {
  qnet.quant_weights.clear();
  for (std::size_t i = 0; i < qnet.modules.size(); ++i) {
    qnet.quant_weights.push_back(quantize_submodule_weights(qnet.net, i, qnet.modules[i]));
  }
}

Tensor quantized_forward_tapped(const QuantizedToyNet& qnet, const Tensor& x_in,
                                QuantizedForwardTaps& taps) {
  const ToyNetConfig& cfg = qnet.net.config;
  if (qnet.modules.size() != cfg.submodule_count() || qnet.quant_weights.size() != qnet.modules.size()) {
    throw std::invalid_argument("quantized_forward: incomplete quantization state");
  }
  taps.inputs.clear();
  taps.pre_adapter.clear();
  taps.post_adapter.clear();
  Tensor x = x_in;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const BlockWeights& blk = qnet.net.blocks[b];
    for (int half = 0; half < 2; ++half) {
      const std::size_t idx = 2 * b + half;
      Tensor h = half == 0 ? layer_norm(x, blk.ln1_gamma, blk.ln1_beta)
                           : layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
      Tensor y = quant_submodule_forward(qnet.net, idx, qnet.modules[idx], qnet.quant_weights[idx], h);
      Tensor y_hat = apply_adapter(qnet.modules[idx].adapter, h, y);
      x = add(x, y_hat);
      taps.inputs.push_back(std::move(h));
      taps.pre_adapter.push_back(std::move(y));
      taps.post_adapter.push_back(std::move(y_hat));
    }
  }
  return x;
}

Tensor quantized_forward(const QuantizedToyNet& qnet, const Tensor& x_in,
                         std::vector<Tensor>* module_outputs) {
  QuantizedForwardTaps taps;
  Tensor out = quantized_forward_tapped(qnet, x_in, taps);
  if (module_outputs) *module_outputs = std::move(taps.post_adapter);
  return out;
}

PipelineResult run_pipeline(const ToyNet& net, const std::vector<Tensor>& calib,
                            const PipelineOptions& opt) {
  opt.validate();
  net.config.validate();
  if (calib.empty()) throw std::invalid_argument("run_pipeline: empty calibration set");
  const ToyNetConfig& cfg = net.config;
  if (opt.adapter_rank > cfg.d_model) {
    throw std::invalid_argument("run_pipeline: adapter rank exceeds model width");
  }

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n_samples = calib.size();

  std::vector<ForwardTaps> fp_taps(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) forward(net, calib[s], &fp_taps[s]);

  std::vector<BackwardResult> grads;
  if (opt.use_gradient_weights) {
    grads.reserve(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) grads.push_back(backward_wrt_activations(net, calib[s]));
  }

  Tensor fp_final;
  if (opt.sim_on_final_output) {
    std::vector<Tensor> outs(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) outs[s] = fp_taps[s].output;
    fp_final = stack_rows(outs);
  }

  QuantizedToyNet qnet;
  qnet.net = net;
  qnet.options = opt;
  PipelineReport report;

  std::vector<Tensor> stream = calib;
  const LayerCalibConfig lc = opt.layer_config();

  for (std::size_t idx = 0; idx < cfg.submodule_count(); ++idx) {
    const BlockWeights& blk = net.blocks[idx / 2];
    const bool is_attn = idx % 2 == 0;

    std::vector<Tensor> h(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
      h[s] = is_attn ? layer_norm(stream[s], blk.ln1_gamma, blk.ln1_beta)
                     : layer_norm(stream[s], blk.ln2_gamma, blk.ln2_beta);
    }

    CalibContext ctx{net, opt, lc, idx, &stream, &h,
                     &fp_taps, opt.use_gradient_weights ? &grads : nullptr, fp_final};

    SubmoduleQuant sq;
    ModuleReport mr;
    mr.name = submodule_name(idx);
    if (is_attn) {
      calibrate_attention(ctx, sq, mr);
    } else {
      calibrate_mlp(ctx, sq, mr);
    }

    const std::vector<Tensor> qw = quantize_submodule_weights(net, idx, sq);
    std::vector<Tensor> y_q(n_samples), y_fp(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
      y_q[s] = quant_submodule_forward(net, idx, sq, qw, h[s]);
      y_fp[s] = fp_taps[s].submodules[idx].output;
    }

    const Tensor x_rows = stack_rows(h);
    const Tensor yq_rows = stack_rows(y_q);
    const Tensor yfp_rows = stack_rows(y_fp);

    if (opt.compensate) {
      sq.adapter = fit_adapter(x_rows, yfp_rows, yq_rows, opt.adapter_rank, opt.ridge_lambda,
                               opt.tre_config, opt.fit_all_adapters);
    } else {
      sq.adapter.rank = opt.adapter_rank;
      sq.adapter.active = false;
      sq.adapter.tre_at_fit = tre(yfp_rows, yq_rows, opt.tre_config);
      sq.adapter.u = Tensor::zeros({cfg.d_model, opt.adapter_rank});
      sq.adapter.v = Tensor::zeros({opt.adapter_rank, cfg.d_model});
      sq.adapter.b = Tensor::zeros({cfg.d_model});
    }

    const Tensor yhat_rows = apply_adapter(sq.adapter, x_rows, yq_rows);
    mr.tre_at_fit = sq.adapter.tre_at_fit;
    mr.adapter_active = sq.adapter.active;
    mr.mse_pre_adapter = mean_squared_error(yq_rows, yfp_rows);
    mr.mse_post_adapter = mean_squared_error(yhat_rows, yfp_rows);
    mr.accumulated_mse = mr.mse_post_adapter;
    mr.accumulated_tre = tre(yfp_rows, yhat_rows, opt.tre_config);
    mr.adapter_bytes = adapter_param_bytes(sq.adapter);
    for (const auto& srch : mr.searches) mr.eval_count += srch.trace.distinct_evaluations();

    for (std::size_t s = 0; s < n_samples; ++s) {
      const Tensor yhat = apply_adapter(sq.adapter, h[s], y_q[s]);
      stream[s] = add(stream[s], yhat);
    }

    report.total_evaluations += mr.eval_count;
    report.total_adapter_bytes += mr.adapter_bytes;
    qnet.modules.push_back(std::move(sq));
    report.modules.push_back(std::move(mr));
  }

  refresh_quant_weights(qnet);
  report.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(qnet), std::move(report)};
}

namespace {

void require_same_architecture(const ToyNetConfig& a, const ToyNetConfig& b) {
  if (a.depth != b.depth || a.d_model != b.d_model || a.n_heads != b.n_heads || a.d_ff != b.d_ff) {
    throw std::invalid_argument("measure_accumulated_error: architecture mismatch");
  }
}

}  // namespace

PipelineResult run_pipeline(const ToyNet& net, const CalibrationPool& pool, std::size_t n_target,
                            std::uint64_t select_seed, const PipelineOptions& opt) {
  Rng rng(select_seed);
  const SelectionResult sel = build_calibration_set(pool, n_target, rng);
  std::vector<Tensor> calib;
  calib.reserve(sel.selected_ids.size());
  for (const auto& id : sel.selected_ids) calib.push_back(pool.by_id(id).payload);
  return run_pipeline(net, calib, opt);
}

std::vector<double> measure_accumulated_error(const ToyNet& fp_net, const QuantizedToyNet& qnet,
                                              const Tensor& probe) {
  require_same_architecture(fp_net.config, qnet.net.config);
  ForwardTaps taps;
  forward(fp_net, probe, &taps);
  std::vector<Tensor> q_outputs;
  quantized_forward(qnet, probe, &q_outputs);

  std::vector<double> curve(taps.submodules.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    curve[i] = mean_squared_error(taps.submodules[i].output, q_outputs[i]);
  }
  return curve;
}

std::vector<double> measure_accumulated_error(const ToyNet& fp_net, const ToyNet& other,
                                              const Tensor& probe) {
  require_same_architecture(fp_net.config, other.config);
  ForwardTaps a, b;
  forward(fp_net, probe, &a);
  forward(other, probe, &b);
  std::vector<double> curve(a.submodules.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    curve[i] = mean_squared_error(a.submodules[i].output, b.submodules[i].output);
  }
  return curve;
}

}  // namespace tailquant
