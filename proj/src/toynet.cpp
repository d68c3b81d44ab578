#include "tailquant/toynet.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "tailquant/linalg.hpp"

namespace tailquant {

void ToyNetConfig::validate() const {
  if (depth == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || seq_len == 0) {
    throw std::invalid_argument("toynet: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("toynet: d_model must be divisible by n_heads");
  }
  if (outlier_channels > d_model) {
    throw std::invalid_argument("toynet: outlier_channels must not exceed d_model");
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * phi;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw std::invalid_argument("layer_norm: parameter size mismatch");
  Tensor out({rows, d});
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x.at(i, j) - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      out.at(i, j) = (x.at(i, j) - mean) * inv * gamma[j] + beta[j];
    }
  }
  return out;
}

namespace {

Tensor gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  return rand_normal(rng, {rows, cols}, 0.0, stddev);
}

void scale_rows(Tensor& w, std::size_t n_rows, double factor) {
  for (std::size_t r = 0; r < std::min(n_rows, w.rows()); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) w.at(r, c) *= factor;
  }
}

}  // namespace

ToyNet make_toynet(const ToyNetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ToyNet net;
  net.config = cfg;
  const double wstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double fstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    BlockWeights blk;
    blk.ln1_gamma = rand_normal(rng, {cfg.d_model}, 1.0, 0.1);
    blk.ln1_beta = rand_normal(rng, {cfg.d_model}, 0.0, 0.1);
    blk.ln2_gamma = rand_normal(rng, {cfg.d_model}, 1.0, 0.1);
    blk.ln2_beta = rand_normal(rng, {cfg.d_model}, 0.0, 0.1);
    blk.wq = gaussian_matrix(rng, cfg.d_model, cfg.d_model, wstd);
    blk.wk = gaussian_matrix(rng, cfg.d_model, cfg.d_model, wstd);
    blk.wv = gaussian_matrix(rng, cfg.d_model, cfg.d_model, wstd);
    blk.wo = gaussian_matrix(rng, cfg.d_model, cfg.d_model, wstd);
    blk.w_fc1 = gaussian_matrix(rng, cfg.d_ff, cfg.d_model, wstd);
    blk.w_fc2 = gaussian_matrix(rng, cfg.d_model, cfg.d_ff, fstd);
    scale_rows(blk.wv, cfg.outlier_channels, cfg.outlier_scale);
    scale_rows(blk.w_fc1, cfg.outlier_channels, cfg.outlier_scale);
    net.blocks.push_back(std::move(blk));
  }
  return net;
}

ToyNet make_zero_toynet(const ToyNetConfig& cfg) {
  cfg.validate();
  ToyNet net;
  net.config = cfg;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    BlockWeights blk;
    blk.ln1_gamma = Tensor::zeros({cfg.d_model});
    blk.ln1_beta = Tensor::zeros({cfg.d_model});
    blk.ln2_gamma = Tensor::zeros({cfg.d_model});
    blk.ln2_beta = Tensor::zeros({cfg.d_model});
    blk.wq = Tensor::zeros({cfg.d_model, cfg.d_model});
    blk.wk = Tensor::zeros({cfg.d_model, cfg.d_model});
    blk.wv = Tensor::zeros({cfg.d_model, cfg.d_model});
    blk.wo = Tensor::zeros({cfg.d_model, cfg.d_model});
    blk.w_fc1 = Tensor::zeros({cfg.d_ff, cfg.d_model});
    blk.w_fc2 = Tensor::zeros({cfg.d_model, cfg.d_ff});
    net.blocks.push_back(std::move(blk));
  }
  return net;
}

Tensor attention_probs(const ToyNetConfig& cfg, const Tensor& q, const Tensor& k) {
  const std::size_t seq = q.rows(), heads = cfg.n_heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor probs({heads * seq, seq});
  std::vector<double> scores(seq);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < seq; ++i) {
      double row_max = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < seq; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q.at(i, hd * dh + c) * k.at(j, hd * dh + c);
        scores[j] = s * scale;
        row_max = std::max(row_max, scores[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < seq; ++j) {
        scores[j] = std::exp(scores[j] - row_max);
        denom += scores[j];
      }
      for (std::size_t j = 0; j < seq; ++j) probs.at(hd * seq + i, j) = scores[j] / denom;
    }
  }
  return probs;
}

Tensor attention_context(const ToyNetConfig& cfg, const Tensor& probs, const Tensor& v) {
  const std::size_t seq = v.rows(), heads = cfg.n_heads, dh = cfg.head_dim();
  Tensor context({seq, cfg.d_model});
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          acc += probs.at(hd * seq + i, j) * v.at(j, hd * dh + c);
        }
        context.at(i, hd * dh + c) = acc;
      }
    }
  }
  return context;
}

namespace {

struct AttnIntermediates {
  Tensor h, q, k, v, probs, context, branch;
};

AttnIntermediates attention_forward(const BlockWeights& blk, const ToyNetConfig& cfg, const Tensor& h) {
  AttnIntermediates mid;
  mid.h = h;
  mid.q = matmul(h, transpose(blk.wq));
  mid.k = matmul(h, transpose(blk.wk));
  mid.v = matmul(h, transpose(blk.wv));
  mid.probs = attention_probs(cfg, mid.q, mid.k);
  return mid;
}

// context then output projection, reusable after the probs were modified.
void attention_finish(const BlockWeights& blk, const ToyNetConfig& cfg, AttnIntermediates& mid) {
  mid.context = attention_context(cfg, mid.probs, mid.v);
  mid.branch = matmul(mid.context, transpose(blk.wo));
}

struct MlpIntermediates {
  Tensor h, z, a, branch;
};

void apply_delta(Tensor& t, const Tensor& delta, const char* where) {
  require_same_shape(t, delta, where);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += delta[i];
}

}  // namespace

Tensor forward(const ToyNet& net, const Tensor& x_in, ForwardTaps* taps, const Perturbation* perturb) {
  const ToyNetConfig& cfg = net.config;
  if (x_in.ndim() != 2 || x_in.cols() != cfg.d_model) {
    throw std::invalid_argument("toynet forward: input must be seq x d_model, got " +
                                shape_to_string(x_in.shape()));
  }
  if (perturb && perturb->submodule >= cfg.submodule_count()) {
    throw std::invalid_argument("toynet forward: perturbation submodule out of range");
  }
  auto maybe_perturb = [&](std::size_t sub, TapPoint point, Tensor& t) {
    if (perturb && perturb->submodule == sub && perturb->point == point) {
      apply_delta(t, perturb->delta, "perturbation");
    }
  };

  Tensor x = x_in;
  if (taps) {
    taps->submodules.assign(cfg.submodule_count(), SubmoduleTaps{});
    taps->block_outputs.clear();
  }

  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const BlockWeights& blk = net.blocks[b];

    const std::size_t attn_idx = 2 * b;
    Tensor h1 = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    maybe_perturb(attn_idx, TapPoint::Input, h1);
    AttnIntermediates attn = attention_forward(blk, cfg, h1);
    maybe_perturb(attn_idx, TapPoint::Nonlin, attn.probs);
    attention_finish(blk, cfg, attn);
    maybe_perturb(attn_idx, TapPoint::Output, attn.branch);
    if (taps) {
      SubmoduleTaps& t = taps->submodules[attn_idx];
      t.input = attn.h;
      t.q = attn.q;
      t.k = attn.k;
      t.v = attn.v;
      t.nonlin = attn.probs;
      t.context = attn.context;
      t.output = attn.branch;
    }
    x = add(x, attn.branch);

    const std::size_t mlp_idx = 2 * b + 1;
    Tensor h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    maybe_perturb(mlp_idx, TapPoint::Input, h2);
    MlpIntermediates mlp;
    mlp.h = h2;
    mlp.z = matmul(h2, transpose(blk.w_fc1));
    mlp.a = mlp.z;
    for (double& v : mlp.a.data()) v = gelu(v);
    maybe_perturb(mlp_idx, TapPoint::Nonlin, mlp.a);
    mlp.branch = matmul(mlp.a, transpose(blk.w_fc2));
    maybe_perturb(mlp_idx, TapPoint::Output, mlp.branch);
    if (taps) {
      SubmoduleTaps& t = taps->submodules[mlp_idx];
      t.input = mlp.h;
      t.fc1_out = mlp.z;
      t.nonlin = mlp.a;
      t.output = mlp.branch;
    }
    x = add(x, mlp.branch);
    if (taps) taps->block_outputs.push_back(x);
  }
  if (taps) taps->output = x;
  return x;
}

namespace {

// Per-token backward through y = (x - mu)/sigma * gamma + beta.
Tensor layer_norm_backward(const Tensor& g_out, const Tensor& x, const Tensor& gamma) {
  const std::size_t rows = x.rows(), d = x.cols();
  Tensor g_x({rows, d});
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x.at(i, j) - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);

    double mean_t = 0.0, mean_tx = 0.0;
    std::vector<double> t(d), xhat(d);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (x.at(i, j) - mean) * inv;
      t[j] = g_out.at(i, j) * gamma[j];
      mean_t += t[j];
      mean_tx += t[j] * xhat[j];
    }
    mean_t /= static_cast<double>(d);
    mean_tx /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      g_x.at(i, j) = inv * (t[j] - mean_t - xhat[j] * mean_tx);
    }
  }
  return g_x;
}

}  // namespace

BackwardResult backward_wrt_activations(const ToyNet& net, const Tensor& x_in, const Tensor* upstream) {
  const ToyNetConfig& cfg = net.config;

  // Forward pass keeping the residual stream before each submodule.
  std::vector<Tensor> stream_before_attn(cfg.depth), stream_before_mlp(cfg.depth);
  std::vector<AttnIntermediates> attn_mid(cfg.depth);
  std::vector<MlpIntermediates> mlp_mid(cfg.depth);
  Tensor x = x_in;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const BlockWeights& blk = net.blocks[b];
    stream_before_attn[b] = x;
    Tensor h1 = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    attn_mid[b] = attention_forward(blk, cfg, h1);
    attention_finish(blk, cfg, attn_mid[b]);
    x = add(x, attn_mid[b].branch);

    stream_before_mlp[b] = x;
    Tensor h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    MlpIntermediates& mlp = mlp_mid[b];
    mlp.h = h2;
    mlp.z = matmul(h2, transpose(blk.w_fc1));
    mlp.a = mlp.z;
    for (double& v : mlp.a.data()) v = gelu(v);
    mlp.branch = matmul(mlp.a, transpose(blk.w_fc2));
    x = add(x, mlp.branch);
  }

  Tensor g = upstream ? *upstream : x;  // d(0.5*||out||^2)/d(out) = out
  require_same_shape(g, x, "backward upstream");

  BackwardResult result;
  result.submodules.assign(cfg.submodule_count(), SubmoduleGrads{});

  const std::size_t heads = cfg.n_heads, dh = cfg.head_dim();
  for (std::size_t b = cfg.depth; b-- > 0;) {
    const BlockWeights& blk = net.blocks[b];

    // MLP branch: x_out = x_mid + a*W2^T.
    {
      SubmoduleGrads& sg = result.submodules[2 * b + 1];
      const MlpIntermediates& mlp = mlp_mid[b];
      sg.output = g;
      Tensor g_a = matmul(g, blk.w_fc2);
      sg.nonlin = g_a;
      Tensor g_z = g_a;
      for (std::size_t i = 0; i < g_z.size(); ++i) g_z[i] *= gelu_derivative(mlp.z[i]);
      sg.fc1_out = g_z;
      Tensor g_h = matmul(g_z, blk.w_fc1);
      sg.input = g_h;
      g = add(g, layer_norm_backward(g_h, stream_before_mlp[b], blk.ln2_gamma));
    }

    // Attention branch: x_mid = x_in + context*Wo^T.
    {
      SubmoduleGrads& sg = result.submodules[2 * b];
      const AttnIntermediates& attn = attn_mid[b];
      const std::size_t seq = attn.h.rows();
      sg.output = g;
      Tensor g_ctx = matmul(g, blk.wo);
      sg.context = g_ctx;

      Tensor g_probs({heads * seq, seq});
      Tensor g_v_full({seq, cfg.d_model});
      for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < seq; ++i) {
          for (std::size_t j = 0; j < seq; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += g_ctx.at(i, hd * dh + c) * attn.v.at(j, hd * dh + c);
            g_probs.at(hd * seq + i, j) = acc;
          }
        }
        for (std::size_t j = 0; j < seq; ++j) {
          for (std::size_t c = 0; c < dh; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < seq; ++i) {
              acc += attn.probs.at(hd * seq + i, j) * g_ctx.at(i, hd * dh + c);
            }
            g_v_full.at(j, hd * dh + c) = acc;
          }
        }
      }
      sg.nonlin = g_probs;

      // Softmax backward per row, then the scaled dot-product.
      const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
      Tensor g_q_full({seq, cfg.d_model}), g_k_full({seq, cfg.d_model});
      for (std::size_t hd = 0; hd < heads; ++hd) {
        Tensor g_scores({seq, seq});
        for (std::size_t i = 0; i < seq; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < seq; ++j) {
            dot += g_probs.at(hd * seq + i, j) * attn.probs.at(hd * seq + i, j);
          }
          for (std::size_t j = 0; j < seq; ++j) {
            const double p = attn.probs.at(hd * seq + i, j);
            g_scores.at(i, j) = p * (g_probs.at(hd * seq + i, j) - dot);
          }
        }
        for (std::size_t i = 0; i < seq; ++i) {
          for (std::size_t c = 0; c < dh; ++c) {
            double accq = 0.0;
            for (std::size_t j = 0; j < seq; ++j) accq += g_scores.at(i, j) * attn.k.at(j, hd * dh + c);
            g_q_full.at(i, hd * dh + c) = accq * scale;
          }
        }
        for (std::size_t j = 0; j < seq; ++j) {
          for (std::size_t c = 0; c < dh; ++c) {
            double acck = 0.0;
            for (std::size_t i = 0; i < seq; ++i) acck += g_scores.at(i, j) * attn.q.at(i, hd * dh + c);
            g_k_full.at(j, hd * dh + c) = acck * scale;
          }
        }
      }
      sg.q = g_q_full;
      sg.k = g_k_full;
      sg.v = g_v_full;

      Tensor g_h = matmul(g_q_full, blk.wq);
      g_h = add(g_h, matmul(g_k_full, blk.wk));
      g_h = add(g_h, matmul(g_v_full, blk.wv));
      sg.input = g_h;
      g = add(g, layer_norm_backward(g_h, stream_before_attn[b], blk.ln1_gamma));
    }
  }
  result.input_grad = g;
  return result;
}

CalibrationPool gen_calibration_pool(const ToyNetConfig& cfg, std::size_t m, double outlier_fraction,
                                     Rng& rng) {
  cfg.validate();
  if (m < 2) throw std::invalid_argument("gen_calibration_pool: need at least 2 samples");
  if (!(outlier_fraction >= 0.0) || !(outlier_fraction <= 1.0)) {
    throw std::invalid_argument("gen_calibration_pool: outlier fraction must be in [0,1]");
  }

  const std::size_t n_outliers =
      static_cast<std::size_t>(std::llround(outlier_fraction * static_cast<double>(m)));
  // Scatter the planted positions deterministically.
  std::vector<std::size_t> perm(m);
  for (std::size_t i = 0; i < m; ++i) perm[i] = i;
  for (std::size_t i = m; i-- > 1;) {
    std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  }
  std::vector<bool> planted(m, false);
  for (std::size_t i = 0; i < n_outliers; ++i) planted[perm[i]] = true;

  CalibrationPool pool;
  for (std::size_t i = 0; i < m; ++i) {
    CalibrationSample s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%03zu", i);
    s.id = buf;
    s.payload = rand_normal(rng, {cfg.seq_len, cfg.d_model});
    if (planted[i]) {
      for (std::size_t r = 0; r < cfg.seq_len; ++r) {
        for (std::size_t c = 0; c < cfg.outlier_channels; ++c) {
          s.payload.at(r, c) += cfg.outlier_scale * rng.student_t(3.0);
        }
      }
      pool.planted_outlier_ids.push_back(s.id);
    }
    s.feature = default_feature_extractor(s.payload);
    pool.samples.push_back(std::move(s));
  }
  return pool;
}

LayerTapModel layer_tap_model(const ToyNet& net) {
  return [&net](const Tensor& payload) {
    ForwardTaps taps;
    forward(net, payload, &taps);
    return taps.block_outputs;
  };
}

}  // namespace tailquant
