#include "ewcdr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ewcdr/errors.hpp"

namespace ewcdr::ag {

namespace {

Tensor* grad_of(Node& out, std::size_t i) {
  auto& in = out.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

Shape with_last(Shape shape, std::size_t last) {
  if (shape.empty()) return {last};
  shape.back() = last;
  return shape;
}

void require_image(const Var& x, const char* op) {
  if (x.value().rank() != 4) throw ShapeError(std::string(op) + ": expected NHWC tensor, got " + to_string(x.shape()));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return record(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = grad_of(n, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    if (Tensor* g = grad_of(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (Tensor* g = grad_of(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (Tensor* g = grad_of(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return record(std::move(out), {a}, [factor](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * n.grad[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return record(std::move(out), {a}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return record(Tensor({1}, {total}), {a}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (double& v : g->values()) v += n.grad[0];
  });
}

Var mean(const Var& a) {
  if (a.value().empty()) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var matmul(const Var& x, const Var& w) {
  return linear(x, w, Var());
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0)) {
    throw ShapeError("linear: input " + to_string(xv.shape()) + " incompatible with weight " + to_string(wv.shape()));
  }
  const bool has_bias = b.defined();
  if (has_bias && b.value().size() != wv.dim(1)) {
    throw ShapeError("linear: bias " + to_string(b.shape()) + " does not match weight " + to_string(wv.shape()));
  }
  Tensor out(with_last(xv.shape(), wv.dim(1)));
  auto om = as_matrix(out);
  om.noalias() = as_matrix(xv) * as_matrix(wv);
  if (has_bias) {
    Eigen::Map<const Eigen::RowVectorXd> bias(b.value().data(), static_cast<Eigen::Index>(wv.dim(1)));
    om.rowwise() += bias;
  }
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return record(std::move(out), std::move(inputs), [has_bias](Node& n) {
    const Tensor& xin = n.inputs[0]->value;
    const Tensor& win = n.inputs[1]->value;
    auto g = as_matrix(static_cast<const Tensor&>(n.grad));
    if (Tensor* gx = grad_of(n, 0)) as_matrix(*gx).noalias() += g * as_matrix(win).transpose();
    if (Tensor* gw = grad_of(n, 1)) as_matrix(*gw).noalias() += as_matrix(xin).transpose() * g;
    if (has_bias) {
      if (Tensor* gb = grad_of(n, 2)) {
        Eigen::Map<Eigen::RowVectorXd> gbm(gb->data(), static_cast<Eigen::Index>(gb->size()));
        gbm += g.colwise().sum();
      }
    }
  });
}

Var linear_rows(const Var& x, const Var& rows) {
  const Tensor& xv = x.value();
  const Tensor& rv = rows.value();
  const std::size_t k = xv.cols();
  if (rv.rank() != 2 || rv.dim(1) != k + 1) {
    throw ShapeError("linear_rows: input " + to_string(xv.shape()) + " incompatible with rows " + to_string(rv.shape()));
  }
  const std::size_t c = rv.dim(0);
  const std::size_t b = xv.rows();
  Tensor out({b, c});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double* w = rv.data() + j * (k + 1);
      double s = w[k];
      for (std::size_t d = 0; d < k; ++d) s += xv[i * k + d] * w[d];
      out[i * c + j] = s;
    }
  return record(std::move(out), {x, rows}, [b, c, k](Node& n) {
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& rv = n.inputs[1]->value;
    Tensor* gx = grad_of(n, 0);
    Tensor* gr = grad_of(n, 1);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double g = n.grad[i * c + j];
        if (g == 0.0) continue;
        const double* w = rv.data() + j * (k + 1);
        if (gx)
          for (std::size_t d = 0; d < k; ++d) (*gx)[i * k + d] += g * w[d];
        if (gr) {
          double* gw = gr->data() + j * (k + 1);
          for (std::size_t d = 0; d < k; ++d) gw[d] += g * xv[i * k + d];
          gw[k] += g;
        }
      }
  });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return record(std::move(out), {x}, [](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    const Tensor& xv = n.inputs[0]->value;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      (*g)[i] += n.grad[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
    }
  });
}

Var silu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
  return record(std::move(out), {x}, [](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    const Tensor& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      (*g)[i] += n.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  const std::size_t rows = xv.rows();
  if (gamma.value().size() != d || beta.value().size() != d) throw ShapeError("layer_norm: affine size mismatch");
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rs;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return record(std::move(out), {x, gamma, beta}, [xhat, rstd, d, rows](Node& n) {
    const Tensor& gam = n.inputs[1]->value;
    Tensor* gx = grad_of(n, 0);
    Tensor* gg = grad_of(n, 1);
    Tensor* gb = grad_of(n, 2);
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = n.grad.data() + r * d;
      const double* h = xhat->data() + r * d;
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        if (gg) (*gg)[c] += g[c] * h[c];
        if (gb) (*gb)[c] += g[c];
        dxhat[c] = g[c] * gam[c];
        mean_dh += dxhat[c];
        mean_dh_h += dxhat[c] * h[c];
      }
      if (!gx) continue;
      mean_dh /= static_cast<double>(d);
      mean_dh_h /= static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c)
        (*gx)[r * d + c] += (*rstd)[r] * (dxhat[c] - mean_dh - h[c] * mean_dh_h);
    }
  });
}

Var assemble_tokens(const Var& patches, const Var& cls, const Var& pos, std::size_t batch) {
  const Tensor& pv = patches.value();
  const std::size_t d = pv.cols();
  if (batch == 0 || pv.rows() % batch != 0) throw ShapeError("assemble_tokens: patch rows not divisible by batch");
  const std::size_t n_patch = pv.rows() / batch;
  const std::size_t tokens = n_patch + 1;
  if (cls.value().size() != d || pos.value().size() != tokens * d) {
    throw ShapeError("assemble_tokens: cls/pos sizes do not match " + std::to_string(tokens) + " tokens of width " +
                     std::to_string(d));
  }
  Tensor out({batch * tokens, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      double* dst = out.data() + (b * tokens + t) * d;
      const double* src = t == 0 ? cls.value().data() : pv.data() + (b * n_patch + t - 1) * d;
      const double* p = pos.value().data() + t * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] + p[c];
    }
  }
  return record(std::move(out), {patches, cls, pos}, [batch, tokens, n_patch, d](Node& n) {
    Tensor* gp = grad_of(n, 0);
    Tensor* gc = grad_of(n, 1);
    Tensor* gpos = grad_of(n, 2);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < tokens; ++t) {
        const double* g = n.grad.data() + (b * tokens + t) * d;
        double* dst = t == 0 ? (gc ? gc->data() : nullptr) : (gp ? gp->data() + (b * n_patch + t - 1) * d : nullptr);
        if (dst)
          for (std::size_t c = 0; c < d; ++c) dst[c] += g[c];
        if (gpos)
          for (std::size_t c = 0; c < d; ++c) (*gpos)[t * d + c] += g[c];
      }
    }
  });
}

Var take_strided_rows(const Var& x, std::size_t stride) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (stride == 0 || xv.rows() % stride != 0) throw ShapeError("take_strided_rows: rows not divisible by stride");
  const std::size_t count = xv.rows() / stride;
  Tensor out({count, d});
  for (std::size_t b = 0; b < count; ++b)
    std::copy_n(xv.data() + b * stride * d, d, out.data() + b * d);
  return record(std::move(out), {x}, [stride, count, d](Node& n) {
    if (Tensor* g = grad_of(n, 0))
      for (std::size_t b = 0; b < count; ++b)
        for (std::size_t c = 0; c < d; ++c) (*g)[b * stride * d + c] += n.grad[b * d + c];
  });
}

Var attention(const Var& qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const Tensor& in = qkv.value();
  if (in.rows() != batch * tokens || in.cols() % 3 != 0) throw ShapeError("attention: qkv shape " + to_string(in.shape()));
  const std::size_t d = in.cols() / 3;
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * d;

  Tensor out({batch * tokens, d});
  // Attention probabilities per (batch, head): [T, T].
  auto probs = std::make_shared<std::vector<double>>(batch * heads * tokens * tokens);
  std::vector<double> row(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = in.data() + b * tokens * stride;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * tokens * tokens;
      for (std::size_t i = 0; i < tokens; ++i) {
        const double* q = base + i * stride + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double* k = base + j * stride + d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
          row[j] = s * inv_scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* o = out.data() + (b * tokens + i) * d + h * dh;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double pij = row[j] / z;
          p[i * tokens + j] = pij;
          const double* v = base + j * stride + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += pij * v[c];
        }
      }
    }
  }
  return record(std::move(out), {qkv}, [probs, batch, tokens, heads, d, dh, inv_scale, stride](Node& n) {
    Tensor* gin = grad_of(n, 0);
    if (!gin) return;
    const Tensor& in = n.inputs[0]->value;
    std::vector<double> dp(tokens);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* base = in.data() + b * tokens * stride;
      double* gbase = gin->data() + b * tokens * stride;
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + (b * heads + h) * tokens * tokens;
        for (std::size_t i = 0; i < tokens; ++i) {
          const double* go = n.grad.data() + (b * tokens + i) * d + h * dh;
          // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
          double dot = 0.0;
          for (std::size_t j = 0; j < tokens; ++j) {
            const double* v = base + j * stride + 2 * d + h * dh;
            double* gv = gbase + j * stride + 2 * d + h * dh;
            double s = 0.0;
            const double pij = p[i * tokens + j];
            for (std::size_t c = 0; c < dh; ++c) {
              s += go[c] * v[c];
              gv[c] += pij * go[c];
            }
            dp[j] = s;
            dot += s * pij;
          }
          // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik), then through the scaled dot product.
          const double* q = base + i * stride + h * dh;
          double* gq = gbase + i * stride + h * dh;
          for (std::size_t j = 0; j < tokens; ++j) {
            const double ds = p[i * tokens + j] * (dp[j] - dot) * inv_scale;
            if (ds == 0.0) continue;
            const double* k = base + j * stride + d + h * dh;
            double* gk = gbase + j * stride + d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              gq[c] += ds * k[c];
              gk[c] += ds * q[c];
            }
          }
        }
      }
    }
  });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  const std::size_t rows = z.rows();
  const std::size_t classes = z.cols();
  if (labels.size() != rows) throw ShapeError("softmax_cross_entropy: label count does not match rows");
  auto probs = std::make_shared<Tensor>(z.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("label " + std::to_string(y) + " outside " + std::to_string(classes) + " classes");
    }
    const double* row = z.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[y];
    for (std::size_t c = 0; c < classes; ++c) (*probs)[r * classes + c] = std::exp(row[c] - lse);
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return record(Tensor({1}, {total * inv_rows}), {logits}, [probs, labels, classes, inv_rows](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    const double scale = n.grad[0] * inv_rows;
    for (std::size_t r = 0; r < labels.size(); ++r)
      for (std::size_t c = 0; c < classes; ++c) {
        const double target = static_cast<int>(c) == labels[r] ? 1.0 : 0.0;
        (*g)[r * classes + c] += scale * ((*probs)[r * classes + c] - target);
      }
  });
}

Var sigmoid_binary_cross_entropy(const Var& logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (z.shape() != targets.shape()) throw ShapeError("sigmoid_binary_cross_entropy: target shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    total += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double inv_n = 1.0 / static_cast<double>(z.size());
  return record(Tensor({1}, {total * inv_n}), {logits}, [targets, inv_n](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    const Tensor& zv = n.inputs[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-zv[i]));
      (*g)[i] += n.grad[0] * inv_n * (s - targets[i]);
    }
  });
}

Var mean_squared_error(const Var& pred, const Tensor& target) {
  const Tensor& p = pred.value();
  if (p.shape() != target.shape()) {
    throw ShapeError("mean_squared_error: " + to_string(p.shape()) + " vs " + to_string(target.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - target[i]) * (p[i] - target[i]);
  const double inv_n = 1.0 / static_cast<double>(p.size());
  return record(Tensor({1}, {total * inv_n}), {pred}, [target, inv_n](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    const Tensor& pv = n.inputs[0]->value;
    const double s = 2.0 * inv_n * n.grad[0];
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * (pv[i] - target[i]);
  });
}

namespace {

void im2col3x3(const Tensor& x, Tensor& col) {
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t width = 9 * C;
  double* out = col.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        double* row = out + ((b * H + y) * W + xx) * width;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            double* dst = row + (ky * 3 + kx) * C;
            const long sy = static_cast<long>(y + ky) - 1;
            const long sx = static_cast<long>(xx + kx) - 1;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) {
              std::fill_n(dst, C, 0.0);
            } else {
              std::copy_n(x.data() + ((b * H + sy) * W + sx) * C, C, dst);
            }
          }
      }
}

void col2im3x3(const Tensor& col, Tensor& gx) {
  const std::size_t B = gx.dim(0), H = gx.dim(1), W = gx.dim(2), C = gx.dim(3);
  const std::size_t width = 9 * C;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double* row = col.data() + ((b * H + y) * W + xx) * width;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long sy = static_cast<long>(y + ky) - 1;
            const long sx = static_cast<long>(xx + kx) - 1;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
            const double* src = row + (ky * 3 + kx) * C;
            double* dst = gx.data() + ((b * H + sy) * W + sx) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
          }
      }
}

}  // namespace

Var conv3x3(const Var& x, const Var& w, const Var& b) {
  require_image(x, "conv3x3");
  const Tensor& xv = x.value();
  const std::size_t C = xv.dim(3);
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || wv.dim(0) != 9 * C) {
    throw ShapeError("conv3x3: weight " + to_string(wv.shape()) + " for " + std::to_string(C) + " input channels");
  }
  const std::size_t O = wv.dim(1);
  if (b.value().size() != O) throw ShapeError("conv3x3: bias size mismatch");
  auto col = std::make_shared<Tensor>(Shape{xv.dim(0) * xv.dim(1) * xv.dim(2), 9 * C});
  im2col3x3(xv, *col);
  Tensor out({xv.dim(0), xv.dim(1), xv.dim(2), O});
  auto om = as_matrix(out);
  om.noalias() = as_matrix(static_cast<const Tensor&>(*col)) * as_matrix(wv);
  Eigen::Map<const Eigen::RowVectorXd> bias(b.value().data(), static_cast<Eigen::Index>(O));
  om.rowwise() += bias;
  const bool keep = !NoGradGuard::active();
  if (!keep) col.reset();
  return record(std::move(out), {x, w, b}, [col](Node& n) {
    auto g = as_matrix(static_cast<const Tensor&>(n.grad));
    const Tensor& wv = n.inputs[1]->value;
    if (Tensor* gw = grad_of(n, 1)) as_matrix(*gw).noalias() += as_matrix(static_cast<const Tensor&>(*col)).transpose() * g;
    if (Tensor* gb = grad_of(n, 2)) {
      Eigen::Map<Eigen::RowVectorXd> gbm(gb->data(), static_cast<Eigen::Index>(gb->size()));
      gbm += g.colwise().sum();
    }
    if (Tensor* gx = grad_of(n, 0)) {
      Tensor dcol(col->shape());
      as_matrix(dcol).noalias() = g * as_matrix(wv).transpose();
      col2im3x3(dcol, *gx);
    }
  });
}

Var avg_pool2(const Var& x) {
  require_image(x, "avg_pool2");
  const Tensor& xv = x.value();
  const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  if (H % 2 || W % 2) throw ShapeError("avg_pool2: odd spatial size " + to_string(xv.shape()));
  const std::size_t h2 = H / 2, w2 = W / 2;
  Tensor out({B, h2, w2, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < h2; ++y)
      for (std::size_t xx = 0; xx < w2; ++xx) {
        double* dst = out.data() + ((b * h2 + y) * w2 + xx) * C;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const double* src = xv.data() + ((b * H + 2 * y + dy) * W + 2 * xx + dx) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += 0.25 * src[c];
          }
      }
  return record(std::move(out), {x}, [B, H, W, C, h2, w2](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t y = 0; y < h2; ++y)
        for (std::size_t xx = 0; xx < w2; ++xx) {
          const double* src = n.grad.data() + ((b * h2 + y) * w2 + xx) * C;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              double* dst = g->data() + ((b * H + 2 * y + dy) * W + 2 * xx + dx) * C;
              for (std::size_t c = 0; c < C; ++c) dst[c] += 0.25 * src[c];
            }
        }
  });
}

Var upsample2(const Var& x) {
  require_image(x, "upsample2");
  const Tensor& xv = x.value();
  const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  Tensor out({B, 2 * H, 2 * W, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        std::copy_n(xv.data() + ((b * H + y / 2) * W + xx / 2) * C, C, out.data() + ((b * 2 * H + y) * 2 * W + xx) * C);
  return record(std::move(out), {x}, [B, H, W, C](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xx = 0; xx < 2 * W; ++xx) {
          const double* src = n.grad.data() + ((b * 2 * H + y) * 2 * W + xx) * C;
          double* dst = g->data() + ((b * H + y / 2) * W + xx / 2) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows() || av.rank() != bv.rank()) {
    throw ShapeError("concat_channels: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  const std::size_t ca = av.cols(), cb = bv.cols(), rows = av.rows();
  Tensor out(with_last(av.shape(), ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  return record(std::move(out), {a, b}, [ca, cb, rows](Node& n) {
    Tensor* ga = grad_of(n, 0);
    Tensor* gb = grad_of(n, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = n.grad.data() + r * (ca + cb);
      if (ga)
        for (std::size_t c = 0; c < ca; ++c) (*ga)[r * ca + c] += src[c];
      if (gb)
        for (std::size_t c = 0; c < cb; ++c) (*gb)[r * cb + c] += src[ca + c];
    }
  });
}

Var film(const Var& h, const Var& scale_shift) {
  const Tensor& hv = h.value();
  const Tensor& ss = scale_shift.value();
  const std::size_t C = hv.cols();
  const std::size_t B = ss.rows();
  if (ss.cols() != 2 * C || B == 0 || hv.rows() % B != 0) {
    throw ShapeError("film: features " + to_string(hv.shape()) + " vs scale/shift " + to_string(ss.shape()));
  }
  const std::size_t per_image = hv.rows() / B;
  Tensor out(hv.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const double* s = ss.data() + b * 2 * C;
    for (std::size_t p = 0; p < per_image; ++p) {
      const std::size_t off = (b * per_image + p) * C;
      for (std::size_t c = 0; c < C; ++c) out[off + c] = hv[off + c] * (1.0 + s[c]) + s[C + c];
    }
  }
  return record(std::move(out), {h, scale_shift}, [B, C, per_image](Node& n) {
    const Tensor& hv = n.inputs[0]->value;
    const Tensor& ss = n.inputs[1]->value;
    Tensor* gh = grad_of(n, 0);
    Tensor* gs = grad_of(n, 1);
    for (std::size_t b = 0; b < B; ++b) {
      const double* s = ss.data() + b * 2 * C;
      for (std::size_t p = 0; p < per_image; ++p) {
        const std::size_t off = (b * per_image + p) * C;
        for (std::size_t c = 0; c < C; ++c) {
          const double g = n.grad[off + c];
          if (gh) (*gh)[off + c] += g * (1.0 + s[c]);
          if (gs) {
            (*gs)[b * 2 * C + c] += g * hv[off + c];
            (*gs)[b * 2 * C + C + c] += g;
          }
        }
      }
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
  const Tensor& tv = table.value();
  const std::size_t E = tv.cols();
  const std::size_t V = tv.rows();
  Tensor out({ids.size(), E});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw ContractError("embedding id " + std::to_string(ids[i]) + " outside table of " + std::to_string(V));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * E, E, out.data() + i * E);
  }
  return record(std::move(out), {table}, [ids, E](Node& n) {
    Tensor* g = grad_of(n, 0);
    if (!g) return;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < E; ++c) (*g)[static_cast<std::size_t>(ids[i]) * E + c] += n.grad[i * E + c];
  });
}

}  // namespace ewcdr::ag
