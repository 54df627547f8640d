// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "straight_line.hpp"

#include <cmath>

namespace oracle {

namespace {

constexpr double kLnEps = 1e-5;

std::vector<double> vec(const feddat::model::Tensor& t) { return {t.data().begin(), t.data().end()}; }

Mat mat(const feddat::model::Tensor& t) {
  Mat m(t.dim(0), t.dim(1));
  m.v = vec(t);
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k)
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += a(i, k) * b(k, j);
  return out;
}

// a^T b
Mat mul_tn(const Mat& a, const Mat& b) {
  Mat out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k)
    for (std::size_t i = 0; i < a.cols; ++i)
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += a(k, i) * b(k, j);
  return out;
}

// a b^T
Mat mul_nt(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j)
      for (std::size_t k = 0; k < a.cols; ++k) out(i, j) += a(i, k) * b(j, k);
  return out;
}

void add_row(Mat& m, const std::vector<double>& b) {
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) m(i, j) += b[j];
}

Mat plus(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

void axpy(Mat& y, double a, const Mat& x) {
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += a * x.v[i];
}

double gelu(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LnCache {
  Mat xhat;
  std::vector<double> inv_std;
};

Mat layer_norm(const Mat& y, const std::vector<double>& g, const std::vector<double>& s, LnCache& c) {
  Mat out(y.rows, y.cols);
  c.xhat = Mat(y.rows, y.cols);
  c.inv_std.assign(y.rows, 0.0);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) mu += y(i, j);
    mu /= static_cast<double>(y.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) var += (y(i, j) - mu) * (y(i, j) - mu);
    var /= static_cast<double>(y.cols);
    c.inv_std[i] = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t j = 0; j < y.cols; ++j) {
      c.xhat(i, j) = (y(i, j) - mu) * c.inv_std[i];
      out(i, j) = c.xhat(i, j) * g[j] + s[j];
    }
  }
  return out;
}

Mat layer_norm_back(const Mat& dout, const std::vector<double>& g, const LnCache& c) {
  Mat dy(dout.rows, dout.cols);
  const auto n = static_cast<double>(dout.cols);
  for (std::size_t i = 0; i < dout.rows; ++i) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < dout.cols; ++j) {
      const double dx = dout(i, j) * g[j];
      m1 += dx;
      m2 += dx * c.xhat(i, j);
    }
    m1 /= n;
    m2 /= n;
    for (std::size_t j = 0; j < dout.cols; ++j) {
      dy(i, j) = c.inv_std[i] * (dout(i, j) * g[j] - m1 - c.xhat(i, j) * m2);
    }
  }
  return dy;
}

struct AdapterCache {
  Mat z;  // h W_down
  Mat r;  // relu(z)
};

Mat adapter_out(const Adapter& a, const Mat& h, AdapterCache& c) {
  c.z = mul(h, a.down);
  c.r = c.z;
  for (double& x : c.r.v) x = x > 0.0 ? x : 0.0;
  return mul(c.r, a.up);
}

struct LayerCache {
  Mat x, q, k, v;
  std::vector<Mat> p;  // attention probabilities per head
  Mat o;               // concatenated head outputs
  LnCache ln1, ln2;
  Mat x1, f1, g;
  Mat h;
  AdapterCache a0, a1;
};

struct Forward {
  std::vector<LayerCache> layers;
  Mat out;
  std::vector<double> pooled, logits;
};

Mat embed(const Weights& w, const Sample& s) {
  const std::size_t L = w.n_vision + w.n_text;
  Mat x(L, w.d);
  for (std::size_t t = 0; t < w.n_vision; ++t) {
    for (std::size_t j = 0; j < w.d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < w.vision_dim; ++k) acc += s.vision[t * w.vision_dim + k] * w.vision_proj(k, j);
      x(t, j) = acc + w.vision_bias[j] + w.vision_type[j] + w.vision_pos(t, j);
    }
  }
  for (std::size_t t = 0; t < w.n_text; ++t) {
    const auto tok = static_cast<std::size_t>(s.question[t]);
    for (std::size_t j = 0; j < w.d; ++j) {
      x(w.n_vision + t, j) = w.token_embedding(tok, j) + w.text_type[j] + w.text_pos(t, j);
    }
  }
  return x;
}

Forward forward(const Weights& w, const Sample& s, int branch) {
  Forward f;
  Mat x = embed(w, s);
  const std::size_t L = x.rows;
  const std::size_t dh = w.d / w.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const Block& b = w.blocks[l];
    LayerCache c;
    c.x = x;
    c.q = mul(x, b.wq);
    add_row(c.q, b.bq);
    c.k = mul(x, b.wk);
    add_row(c.k, b.bk);
    c.v = mul(x, b.wv);
    add_row(c.v, b.bv);
    c.o = Mat(L, w.d);
    for (std::size_t h = 0; h < w.heads; ++h) {
      Mat p(L, L);
      for (std::size_t i = 0; i < L; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < L; ++j) {
          double sc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) sc += c.q(i, h * dh + e) * c.k(j, h * dh + e);
          p(i, j) = sc * inv_sqrt;
          mx = std::max(mx, p(i, j));
        }
        double total = 0.0;
        for (std::size_t j = 0; j < L; ++j) total += (p(i, j) = std::exp(p(i, j) - mx));
        for (std::size_t j = 0; j < L; ++j) p(i, j) /= total;
      }
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t e = 0; e < dh; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < L; ++j) acc += p(i, j) * c.v(j, h * dh + e);
          c.o(i, h * dh + e) = acc;
        }
      c.p.push_back(std::move(p));
    }
    Mat attn = mul(c.o, b.wo);
    add_row(attn, b.bo);
    c.x1 = layer_norm(plus(x, attn), b.g1, b.s1, c.ln1);
    c.f1 = mul(c.x1, b.w1);
    add_row(c.f1, b.b1);
    c.g = c.f1;
    for (double& v : c.g.v) v = gelu(v);
    Mat ffn = mul(c.g, b.w2);
    add_row(ffn, b.b2);
    c.h = layer_norm(plus(c.x1, ffn), b.g2, b.s2, c.ln2);
    if (branch == 0) {
      x = plus(c.h, adapter_out(w.shared[l], c.h, c.a0));
    } else {
      Mat u0 = adapter_out(w.frozen[l], c.h, c.a0);
      Mat u1 = adapter_out(w.local[l], c.h, c.a1);
      x = c.h;
      axpy(x, 0.5, u0);
      axpy(x, 0.5, u1);
    }
    f.layers.push_back(std::move(c));
  }
  f.out = x;
  f.pooled.assign(w.d, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < w.d; ++j) f.pooled[j] += x(i, j) / static_cast<double>(L);
  f.logits = w.head_b;
  for (std::size_t c = 0; c < f.logits.size(); ++c)
    for (std::size_t j = 0; j < w.d; ++j) f.logits[c] += f.pooled[j] * w.head_w(j, c);
  return f;
}

std::vector<double> log_softmax(const std::vector<double>& z, double temperature) {
  double mx = -1e300;
  for (double v : z) mx = std::max(mx, v / temperature);
  double total = 0.0;
  for (double v : z) total += std::exp(v / temperature - mx);
  std::vector<double> out;
  for (double v : z) out.push_back(v / temperature - mx - std::log(total));
  return out;
}

// d/dz [ CE(z, y) + weight * KL(softmax(z/T) || softmax(t/T)) ] / batch
std::vector<double> logit_grad(const std::vector<double>& z, const std::vector<double>& teacher,
                               int label, double weight, double temperature, double batch) {
  const auto ls = log_softmax(z, 1.0);
  std::vector<double> g(z.size());
  for (std::size_t c = 0; c < z.size(); ++c) {
    g[c] = std::exp(ls[c]) - (static_cast<int>(c) == label ? 1.0 : 0.0);
  }
  if (weight != 0.0) {
    const auto lp = log_softmax(z, temperature);
    const auto lq = log_softmax(teacher, temperature);
    double kl = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) kl += std::exp(lp[c]) * (lp[c] - lq[c]);
    for (std::size_t c = 0; c < z.size(); ++c) {
      g[c] += weight * std::exp(lp[c]) * ((lp[c] - lq[c]) - kl) / temperature;
    }
  }
  for (double& v : g) v /= batch;
  return g;
}

struct Grads {
  Mat head_w;
  std::vector<double> head_b;
  std::vector<Adapter> adapters;  // shared (branch 0) or local (branch 1)
};

void adapter_back(const Adapter& a, const AdapterCache& c, const Mat& h, const Mat& du, double scale,
                  Adapter& grad, Mat& dh) {
  Mat dup = du;
  for (double& v : dup.v) v *= scale;
  axpy(grad.up, 1.0, mul_tn(c.r, dup));
  Mat dr = mul_nt(dup, a.up);
  for (std::size_t i = 0; i < dr.v.size(); ++i) dr.v[i] *= c.z.v[i] > 0.0 ? 1.0 : 0.0;
  axpy(grad.down, 1.0, mul_tn(h, dr));
  axpy(dh, 1.0, mul_nt(dr, a.down));
}

void backward(const Weights& w, const Forward& f, const std::vector<double>& dlogits, int branch,
              Grads& g) {
  const std::size_t L = f.out.rows;
  const std::size_t dh_size = w.d / w.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh_size));
  for (std::size_t c = 0; c < dlogits.size(); ++c) {
    g.head_b[c] += dlogits[c];
    for (std::size_t j = 0; j < w.d; ++j) g.head_w(j, c) += f.pooled[j] * dlogits[c];
  }
  Mat dx(L, w.d);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < w.d; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < dlogits.size(); ++c) acc += w.head_w(j, c) * dlogits[c];
      dx(i, j) = acc / static_cast<double>(L);
    }
  for (std::size_t l = w.blocks.size(); l-- > 0;) {
    const Block& b = w.blocks[l];
    const LayerCache& c = f.layers[l];
    Mat dh = dx;
    if (branch == 0) {
      adapter_back(w.shared[l], c.a0, c.h, dx, 1.0, g.adapters[l], dh);
    } else {
      Adapter unused{Mat(w.frozen[l].down.rows, w.frozen[l].down.cols), Mat(w.frozen[l].up.rows, w.frozen[l].up.cols)};
      adapter_back(w.frozen[l], c.a0, c.h, dx, 0.5, unused, dh);
      adapter_back(w.local[l], c.a1, c.h, dx, 0.5, g.adapters[l], dh);
    }
    Mat dy2 = layer_norm_back(dh, b.g2, c.ln2);
    Mat dx1 = dy2;
    Mat dg = mul_nt(dy2, b.w2);
    for (std::size_t i = 0; i < dg.v.size(); ++i) dg.v[i] *= gelu_grad(c.f1.v[i]);
    axpy(dx1, 1.0, mul_nt(dg, b.w1));
    Mat dy1 = layer_norm_back(dx1, b.g1, c.ln1);
    Mat dprev = dy1;
    Mat d_o = mul_nt(dy1, b.wo);
    Mat dq(L, w.d), dk(L, w.d), dv(L, w.d);
    for (std::size_t h = 0; h < w.heads; ++h) {
      const Mat& p = c.p[h];
      Mat dp(L, L);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh_size; ++e) acc += d_o(i, h * dh_size + e) * c.v(j, h * dh_size + e);
          dp(i, j) = acc;
        }
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t e = 0; e < dh_size; ++e) {
          double acc = 0.0;
          for (std::size_t i = 0; i < L; ++i) acc += p(i, j) * d_o(i, h * dh_size + e);
          dv(j, h * dh_size + e) = acc;
        }
      Mat ds(L, L);
      for (std::size_t i = 0; i < L; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < L; ++j) dot += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < L; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
      }
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t e = 0; e < dh_size; ++e) {
          double aq = 0.0, ak = 0.0;
          for (std::size_t j = 0; j < L; ++j) {
            aq += ds(i, j) * c.k(j, h * dh_size + e);
            ak += ds(j, i) * c.q(j, h * dh_size + e);
          }
          dq(i, h * dh_size + e) = aq;
          dk(i, h * dh_size + e) = ak;
        }
    }
    axpy(dprev, 1.0, mul_nt(dq, b.wq));
    axpy(dprev, 1.0, mul_nt(dk, b.wk));
    axpy(dprev, 1.0, mul_nt(dv, b.wv));
    dx = dprev;
  }
}

Grads zero_grads(const Weights& w) {
  Grads g;
  g.head_w = Mat(w.head_w.rows, w.head_w.cols);
  g.head_b.assign(w.head_b.size(), 0.0);
  for (const auto& a : w.shared) g.adapters.push_back({Mat(a.down.rows, a.down.cols), Mat(a.up.rows, a.up.cols)});
  return g;
}

void apply(Weights& w, std::vector<Adapter>& target, const Grads& g, double lr) {
  axpy(w.head_w, -lr, g.head_w);
  for (std::size_t c = 0; c < w.head_b.size(); ++c) w.head_b[c] -= lr * g.head_b[c];
  for (std::size_t l = 0; l < target.size(); ++l) {
    axpy(target[l].down, -lr, g.adapters[l].down);
    axpy(target[l].up, -lr, g.adapters[l].up);
  }
}

}  // namespace

Weights from_model(const feddat::model::Model& m) {
  const auto& bb = m.backbone();
  const auto& cfg = bb.config;
  Weights w;
  w.d = cfg.d_model;
  w.heads = cfg.n_heads;
  w.n_vision = cfg.n_vision_tokens;
  w.vision_dim = cfg.vision_token_dim;
  w.n_text = cfg.n_text_tokens;
  w.vision_proj = mat(bb.vision_proj);
  w.vision_bias = vec(bb.vision_bias);
  w.token_embedding = mat(bb.token_embedding);
  w.vision_type = vec(bb.vision_type);
  w.text_type = vec(bb.text_type);
  w.vision_pos = mat(bb.vision_pos);
  w.text_pos = mat(bb.text_pos);
  for (const auto& b : bb.blocks) {
    w.blocks.push_back({mat(b.wq), mat(b.wk), mat(b.wv), mat(b.wo), mat(b.w1), mat(b.w2), vec(b.bq),
                        vec(b.bk), vec(b.bv), vec(b.bo), vec(b.b1), vec(b.b2), vec(b.ln1_gain),
                        vec(b.ln1_bias), vec(b.ln2_gain), vec(b.ln2_bias)});
  }
  w.head_w = mat(m.head().weight);
  w.head_b = vec(m.head().bias);
  for (const auto& s : m.shared()->sites) w.shared.push_back({mat(s.down), mat(s.up)});
  for (const auto& s : m.dat()->frozen.sites) w.frozen.push_back({mat(s.down), mat(s.up)});
  for (const auto& s : m.dat()->local.sites) w.local.push_back({mat(s.down), mat(s.up)});
  return w;
}

std::vector<double> logits(const Weights& w, const Sample& s, int branch) {
  return forward(w, s, branch).logits;
}

void dual_adapter_step(Weights& w, const std::vector<Sample>& batch, double alpha, double beta,
                       double temperature, double lr) {
  const auto n = static_cast<double>(batch.size());
  Grads g1 = zero_grads(w);
  for (const auto& s : batch) {
    const Forward student = forward(w, s, 0);
    const auto teacher = forward(w, s, 1).logits;
    backward(w, student, logit_grad(student.logits, teacher, s.label, alpha, temperature, n), 0, g1);
  }
  apply(w, w.shared, g1, lr);

  Grads g2 = zero_grads(w);
  for (const auto& s : batch) {
    const Forward student = forward(w, s, 1);
    const auto teacher = forward(w, s, 0).logits;
    backward(w, student, logit_grad(student.logits, teacher, s.label, beta, temperature, n), 1, g2);
  }
  apply(w, w.local, g2, lr);
}

}  // namespace oracle
