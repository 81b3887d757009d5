// SPDX-License-Identifier: Apache-2.0
#include "smd/numcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smd/common/errors.hpp"

namespace smd::num {

using detail::make_result;
using detail::Node;

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Grad buffer of parent i, or nullptr if it does not take gradients.
std::vector<double>* parent_grad(Node& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

std::size_t last_dim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax over an empty last axis");
  }
  return x.shape().back();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* dC = self.grad.data();
    const double* A = self.parents[0]->data.data();
    const double* B = self.parents[1]->data.data();
    if (auto* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* brow = B + p * n;
          const double* drow = dC + i * n;
          for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
          (*ga)[i * k + p] += acc;
        }
      }
    }
    if (auto* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* drow = dC + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          double* grow = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += av * drow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * B[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * A[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.data[i];
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      const auto& X = self.parents[0]->data;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double x = X[i];
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        (*g)[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
      }
    }
  });
}

Tensor softmax_last(const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel(), 0.0);
  const double* X = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X + r * n;
    double* yr = out.data() + r * n;
    double mx = kMaskSentinel;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (xr[j] == kMaskSentinel) continue;
      any = true;
      mx = std::max(mx, xr[j]);
    }
    if (!any) throw DegenerateRowError("softmax row " + std::to_string(r) + " has no visible entry");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (xr[j] == kMaskSentinel) continue;
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  return make_result(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * n;
        const double* dy = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        double* gx = g->data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

Tensor log_softmax_last(const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel(), kMaskSentinel);
  const double* X = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X + r * n;
    double mx = kMaskSentinel;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (xr[j] == kMaskSentinel) continue;
      any = true;
      mx = std::max(mx, xr[j]);
    }
    if (!any) throw DegenerateRowError("log-softmax row " + std::to_string(r) + " has no visible entry");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (xr[j] != kMaskSentinel) s += std::exp(xr[j] - mx);
    }
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) {
      if (xr[j] != kMaskSentinel) out[r * n + j] = xr[j] - lse;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * n;
        const double* dy = self.grad.data() + r * n;
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (y[j] != kMaskSentinel) total += dy[j];
        }
        double* gx = g->data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
          if (y[j] != kMaskSentinel) gx[j] += dy[j] - std::exp(y[j]) * total;
        }
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  require_rank2(a, "sum_last");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.data()[i * n + j];
  return make_result({m}, std::move(out), {a}, [m, n](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[i];
    }
  });
}

Tensor gather_last(const Tensor& x, std::span<const int> ids) {
  require_rank2(x, "gather_last");
  const std::size_t m = x.rows(), n = x.cols();
  if (ids.size() != m) throw DimensionError("gather_last: one id per row required");
  std::vector<std::size_t> idx(m);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw DimensionError("gather_last: id " + std::to_string(ids[i]) + " out of range");
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
    out[i] = x.data()[i * n + idx[i]];
  }
  return make_result({m}, std::move(out), {x}, [idx = std::move(idx), n](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) (*g)[i * n + idx[i]] += self.grad[i];
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<std::size_t> idx(ids.size());
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(v) + " rows");
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.data().data() + idx[i] * d, d, out.data() + i * d);
  }
  return make_result({ids.size(), d}, std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)[idx[i] * d + j] += self.grad[i * d + j];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_rows");
  const std::size_t n = x.cols();
  if (start + count > x.rows()) throw DimensionError("slice_rows: range out of bounds");
  std::vector<double> out(x.data().begin() + start * n, x.data().begin() + (start + count) * n);
  return make_result({count, n}, std::move(out), {x}, [start, n](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[start * n + i] += self.grad[i];
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (start + count > n) throw DimensionError("slice_cols: range out of bounds");
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + start, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), {x}, [m, n, start, count](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) (*g)[i * n + start + j] += self.grad[i * count + j];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * total + off);
    off += w;
  }
  return make_result({m, total}, std::move(out), parts, [m, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (auto* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_rank2(x, "rms_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n) throw DimensionError("rms_norm: gain length must equal cols");
  std::vector<double> out(m * n);
  std::vector<double> inv(m);
  const double* X = x.data().data();
  const double* G = gain.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += X[i * n + j] * X[i * n + j];
    inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] * inv[i] * G[j];
  }
  return make_result({m, n}, std::move(out), {x, gain}, [m, n, inv = std::move(inv)](Node& self) {
    const double* X = self.parents[0]->data.data();
    const double* G = self.parents[1]->data.data();
    const double* dY = self.grad.data();
    if (auto* gx = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dY[i * n + j] * G[j] * X[i * n + j];
        const double r = inv[i];
        const double c = dot * r * r * r / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          (*gx)[i * n + j] += dY[i * n + j] * G[j] * r - X[i * n + j] * c;
        }
      }
    }
    if (auto* gg = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gg)[j] += dY[i * n + j] * X[i * n + j] * inv[i];
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x.data()[i], lo, hi);
  return make_result(x.shape(), std::move(out), {x}, [lo, hi](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      const auto& X = self.parents[0]->data;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (X[i] >= lo && X[i] <= hi) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (A[i] <= B[i]) {
        if (ga) (*ga)[i] += self.grad[i];
      } else if (gb) {
        (*gb)[i] += self.grad[i];
      }
    }
  });
}

Tensor detach(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), false);
}

}  // namespace smd::num
