#include "malvit/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <type_traits>
#include <vector>

#include "malvit/error.hpp"

namespace malvit::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Correctly rounded sum (Shewchuk's partials, as in Python's math.fsum). The
// result does not depend on the order of the terms, which makes the 64-bit
// path exactly equivariant under token permutations.
class ExactSum {
 public:
  void add(double x) {
    std::size_t used = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[used++] = lo;
      x = hi;
    }
    partials_.resize(used);
    partials_.push_back(x);
  }

  double value() const {
    if (partials_.empty()) return 0.0;
    std::size_t i = partials_.size() - 1;
    double hi = partials_[i], lo = 0.0;
    while (i > 0) {
      const double x = hi, y = partials_[--i];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    // Round-half-even correction when the remainder straddles a tie.
    if (i > 0 && ((lo < 0.0 && partials_[i - 1] < 0.0) || (lo > 0.0 && partials_[i - 1] > 0.0))) {
      const double y = lo * 2.0, x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

  void clear() { partials_.clear(); }

 private:
  std::vector<double> partials_;
};

// c[m,n] (+)= op(a)[m,k] * op(b)[k,n]; a is stored [k,m] when transposed, b [n,k].
// The 64-bit path sums every dot product exactly (see ExactSum); it backs the
// reference model used for gradient checks, where speed matters less.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, Index m, Index n, Index k,
          bool accumulate) {
  if constexpr (std::is_same_v<T, double>) {
    const Index as_i = trans_a ? 1 : k, as_p = trans_a ? m : 1;
    const Index bs_p = trans_b ? 1 : n, bs_j = trans_b ? k : 1;
    ExactSum acc;
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < n; ++j) {
        acc.clear();
        if (accumulate) acc.add(c[i * n + j]);
        for (Index p = 0; p < k; ++p) acc.add(a[i * as_i + p * as_p] * b[p * bs_p + j * bs_j]);
        c[i * n + j] = acc.value();
      }
    }
    return;
  }
  Eigen::Map<const RowMat<T>> A(a, trans_a ? k : m, trans_a ? m : k);
  Eigen::Map<const RowMat<T>> B(b, trans_b ? n : k, trans_b ? k : n);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += A * B;
  } else if (trans_a && !trans_b) {
    C.noalias() += A.transpose() * B;
  } else if (!trans_a && trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A.transpose() * B.transpose();
  }
}

template <typename T>
AlignedVector<T>& grad_of(TensorStorage<T>& s) {
  if (s.grad.empty()) s.grad.assign(s.data.size(), T(0));
  return s.grad;
}

template <typename T>
bool any_tracked(const GradientTape<T>& tape, std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t->defined() && tape.tracks(*t)) return true;
  }
  return false;
}

template <typename T>
Tensor<T> result(Shape shape, bool tracked) {
  Tensor<T> out(std::move(shape), T(0));
  out.set_requires_grad(tracked);
  return out;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Returns numel(b) when b's shape equals a suffix of a's shape.
template <typename T>
std::size_t broadcast_inner(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) {
    ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                         shape_str(sa));
  }
  return b.numel();
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

template <typename T>
Tensor<T> matmul(GradientTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.size(-2), k = a.size(-1);
  const std::size_t bk = transpose_b ? b.size(-1) : b.size(-2);
  const std::size_t n = transpose_b ? b.size(-2) : b.size(-1);
  const bool shared_b = b.dim() == 2;
  bool batch_ok = shared_b || b.dim() == a.dim();
  for (std::size_t i = 0; batch_ok && !shared_b && i + 2 < a.dim(); ++i) {
    batch_ok = a.shape()[i] == b.shape()[i];
  }
  if (bk != k || !batch_ok) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  const bool tracked = any_tracked(tape, {&a, &b});
  Tensor<T> out = result<T>(out_shape, tracked);
  const std::size_t batch = a.numel() / (m * k);

  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data().data();
  if (shared_b) {
    gemm(pa, false, pb, transpose_b, pc, Index(batch * m), Index(n), Index(k), false);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      gemm(pa + i * m * k, false, pb + i * k * n, transpose_b, pc + i * m * n, Index(m), Index(n),
           Index(k), false);
    }
  }

  if (tracked) {
    const bool ga = tape.tracks(a), gb = tape.tracks(b);
    tape.record("matmul", [sa = a.storage_ptr(), sb = b.storage_ptr(), so = out.storage_ptr(), ga,
                           gb, shared_b, transpose_b, batch, m, n, k] {
      if (so->grad.empty()) return;
      const T* dc = so->grad.data();
      if (ga) {
        T* da = grad_of(*sa).data();
        // dA = dC * op(B)^T
        if (shared_b) {
          gemm(dc, false, sb->data.data(), !transpose_b, da, Index(batch * m), Index(k), Index(n),
               true);
        } else {
          for (std::size_t i = 0; i < batch; ++i) {
            gemm(dc + i * m * n, false, sb->data.data() + i * k * n, !transpose_b, da + i * m * k,
                 Index(m), Index(k), Index(n), true);
          }
        }
      }
      if (gb) {
        T* db = grad_of(*sb).data();
        // dB = A^T dC, or dB = dC^T A when B enters transposed.
        const std::size_t groups = shared_b ? 1 : batch;
        const std::size_t rows = shared_b ? batch * m : m;
        for (std::size_t i = 0; i < groups; ++i) {
          const T* ai = sa->data.data() + i * m * k;
          const T* dci = dc + i * m * n;
          T* dbi = db + i * k * n;
          if (transpose_b) {
            gemm(dci, true, ai, false, dbi, Index(n), Index(k), Index(rows), true);
          } else {
            gemm(ai, true, dci, false, dbi, Index(k), Index(n), Index(rows), true);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(GradientTape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  if (weight.dim() != 2 || x.size(-1) != weight.size(0)) {
    throw DimensionError("linear shape mismatch: " + shape_str(x.shape()) + " x " +
                         shape_str(weight.shape()));
  }
  const std::size_t k = weight.size(0), n = weight.size(1);
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != n)) {
    throw DimensionError("linear bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = n;
  const bool tracked = any_tracked(tape, {&x, &weight, &bias});
  Tensor<T> out = result<T>(out_shape, tracked);
  const std::size_t rows = x.numel() / k;
  T* po = out.data().data();
  if (bias.defined()) {
    const T* pb = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(pb, pb + n, po + r * n);
  }
  gemm(x.data().data(), false, weight.data().data(), false, po, Index(rows), Index(n), Index(k),
       bias.defined());

  if (tracked) {
    const bool gx = tape.tracks(x), gw = tape.tracks(weight),
               gbias = bias.defined() && tape.tracks(bias);
    std::shared_ptr<TensorStorage<T>> sbias = bias.defined() ? bias.storage_ptr() : nullptr;
    tape.record("linear", [sx = x.storage_ptr(), sw = weight.storage_ptr(), sbias,
                           so = out.storage_ptr(), gx, gw, gbias, rows, n, k] {
      if (so->grad.empty()) return;
      const T* dy = so->grad.data();
      if (gx) gemm(dy, false, sw->data.data(), true, grad_of(*sx).data(), Index(rows), Index(k),
                   Index(n), true);
      if (gw) gemm(sx->data.data(), true, dy, false, grad_of(*sw).data(), Index(k), Index(n),
                   Index(rows), true);
      if (gbias) {
        Eigen::Map<const RowMat<T>> DY(dy, Index(rows), Index(n));
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> DB(grad_of(*sbias).data(), Index(n));
        DB += DY.colwise().sum();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(GradientTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = broadcast_inner(a, b, "add");
  const bool tracked = any_tracked(tape, {&a, &b});
  Tensor<T> out = result<T>(a.shape(), tracked);
  const std::size_t total = a.numel();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < total; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) po[i + j] = pa[i + j] + pb[j];
  }
  if (tracked) {
    const bool ga = tape.tracks(a), gb = tape.tracks(b);
    tape.record("add", [sa = a.storage_ptr(), sb = b.storage_ptr(), so = out.storage_ptr(), ga, gb,
                        inner, total] {
      if (so->grad.empty()) return;
      const T* dy = so->grad.data();
      if (ga) {
        T* da = grad_of(*sa).data();
        for (std::size_t i = 0; i < total; ++i) da[i] += dy[i];
      }
      if (gb) {
        T* db = grad_of(*sb).data();
        for (std::size_t i = 0; i < total; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) db[j] += dy[i + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(GradientTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = broadcast_inner(a, b, "mul");
  const bool tracked = any_tracked(tape, {&a, &b});
  Tensor<T> out = result<T>(a.shape(), tracked);
  const std::size_t total = a.numel();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < total; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) po[i + j] = pa[i + j] * pb[j];
  }
  if (tracked) {
    const bool ga = tape.tracks(a), gb = tape.tracks(b);
    tape.record("mul", [sa = a.storage_ptr(), sb = b.storage_ptr(), so = out.storage_ptr(), ga, gb,
                        inner, total] {
      if (so->grad.empty()) return;
      const T* dy = so->grad.data();
      if (ga) {
        T* da = grad_of(*sa).data();
        for (std::size_t i = 0; i < total; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) da[i + j] += dy[i + j] * sb->data[j];
        }
      }
      if (gb) {
        T* db = grad_of(*sb).data();
        for (std::size_t i = 0; i < total; i += inner) {
          for (std::size_t j = 0; j < inner; ++j) db[j] += dy[i + j] * sa->data[i + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(GradientTape<T>& tape, const Tensor<T>& a, T factor) {
  const bool tracked = any_tracked(tape, {&a});
  Tensor<T> out = result<T>(a.shape(), tracked);
  auto in = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] * factor;
  if (tracked) {
    tape.record("scale", [sa = a.storage_ptr(), so = out.storage_ptr(), factor] {
      if (so->grad.empty()) return;
      auto& da = grad_of(*sa);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += so->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp(GradientTape<T>& tape, const Tensor<T>& a) {
  const bool tracked = any_tracked(tape, {&a});
  Tensor<T> out = result<T>(a.shape(), tracked);
  auto in = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = std::exp(in[i]);
  if (tracked) {
    tape.record("exp", [sa = a.storage_ptr(), so = out.storage_ptr()] {
      if (so->grad.empty()) return;
      auto& da = grad_of(*sa);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += so->grad[i] * so->data[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(GradientTape<T>& tape, const Tensor<T>& a) {
  const bool tracked = any_tracked(tape, {&a});
  Tensor<T> out = result<T>(Shape{}, tracked);
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  out.data()[0] = static_cast<T>(acc);
  if (tracked) {
    tape.record("sum", [sa = a.storage_ptr(), so = out.storage_ptr()] {
      if (so->grad.empty()) return;
      auto& da = grad_of(*sa);
      const T g = so->grad[0];
      for (auto& v : da) v += g;
    });
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> reduce_axis(GradientTape<T>& tape, const Tensor<T>& a, int axis, bool mean) {
  const std::size_t ax = normalize_axis(axis, a.dim());
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const bool tracked = any_tracked(tape, {&a});
  Tensor<T> out = result<T>(out_shape, tracked);
  const T factor = mean ? T(1) / static_cast<T>(s.len) : T(1);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    T* row = po + o * s.inner;
    for (std::size_t l = 0; l < s.len; ++l) {
      const T* src = pa + (o * s.len + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] += src[i];
    }
    for (std::size_t i = 0; i < s.inner; ++i) row[i] *= factor;
  }
  if (tracked) {
    tape.record(mean ? "mean_axis" : "sum_axis", [sa = a.storage_ptr(), so = out.storage_ptr(), s,
                                                  factor] {
      if (so->grad.empty()) return;
      T* da = grad_of(*sa).data();
      const T* dy = so->grad.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.len; ++l) {
          T* dst = da + (o * s.len + l) * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += dy[o * s.inner + i] * factor;
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> sum_axis(GradientTape<T>& tape, const Tensor<T>& a, int axis) {
  return reduce_axis(tape, a, axis, false);
}

template <typename T>
Tensor<T> mean_axis(GradientTape<T>& tape, const Tensor<T>& a, int axis) {
  return reduce_axis(tape, a, axis, true);
}

template <typename T>
Tensor<T> softmax(GradientTape<T>& tape, const Tensor<T>& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.dim());
  const AxisSplit s = split_at(a.shape(), ax);
  if (Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(a.data().data(), Index(a.numel())).hasNaN()) {
    throw NumericError("softmax input contains NaN");
  }
  const bool tracked = any_tracked(tape, {&a});
  Tensor<T> out = result<T>(a.shape(), tracked);
  const T* pa = a.data().data();
  T* po = out.data().data();
  if (s.inner == 1) {
    using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
    // One flat exp over the whole buffer avoids a scalar tail on every short row.
    for (std::size_t o = 0; o < s.outer; ++o) {
      Eigen::Map<const Vec> row(pa + o * s.len, Index(s.len));
      Eigen::Map<Vec>(po + o * s.len, Index(s.len)) = row - row.maxCoeff();
    }
    Eigen::Map<Vec> all(po, Index(out.numel()));
    all = all.exp();
    for (std::size_t o = 0; o < s.outer; ++o) {
      Eigen::Map<Vec> dst(po + o * s.len, Index(s.len));
      T total;
      if constexpr (std::is_same_v<T, double>) {
        ExactSum acc;
        for (double v : dst) acc.add(v);
        total = acc.value();
      } else {
        total = dst.sum();
      }
      dst *= T(1) / total;
    }
  } else {
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T mx = pa[base];
        for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, pa[base + l * s.inner]);
        T denom = 0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const T e = std::exp(pa[base + l * s.inner] - mx);
          po[base + l * s.inner] = e;
          denom += e;
        }
        for (std::size_t l = 0; l < s.len; ++l) po[base + l * s.inner] /= denom;
      }
    }
  }
  if (tracked) {
    tape.record("softmax", [sa = a.storage_ptr(), so = out.storage_ptr(), s] {
      if (so->grad.empty()) return;
      T* da = grad_of(*sa).data();
      const T* dy = so->grad.data();
      const T* y = so->data.data();
      if (s.inner == 1) {
        using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
        for (std::size_t o = 0; o < s.outer; ++o) {
          Eigen::Map<const Vec> Y(y + o * s.len, Index(s.len));
          Eigen::Map<const Vec> DY(dy + o * s.len, Index(s.len));
          Eigen::Map<Vec> DA(da + o * s.len, Index(s.len));
          const T dot = (DY * Y).sum();
          DA += Y * (DY - dot);
        }
        return;
      }
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          T dot = 0;
          for (std::size_t l = 0; l < s.len; ++l) {
            dot += dy[base + l * s.inner] * y[base + l * s.inner];
          }
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t idx = base + l * s.inner;
            da[idx] += y[idx] * (dy[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(GradientTape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  if (x.dim() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = x.size(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dimension of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const bool tracked = any_tracked(tape, {&x, &gamma, &beta});
  Tensor<T> out = result<T>(x.shape(), tracked);
  std::vector<T> xhat(tracked ? x.numel() : 0);
  std::vector<T> rstd(tracked ? rows : 0);
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  T* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    const T mu = static_cast<T>(mean);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * inv;
      po[r * d + j] = h * pg[j] + pb[j];
      if (tracked) xhat[r * d + j] = h;
    }
    if (tracked) rstd[r] = inv;
  }
  if (tracked) {
    const bool gx = tape.tracks(x), gg = tape.tracks(gamma), gb = tape.tracks(beta);
    tape.record("layer_norm", [sx = x.storage_ptr(), sg = gamma.storage_ptr(),
                               sb = beta.storage_ptr(), so = out.storage_ptr(),
                               xhat = std::move(xhat), rstd = std::move(rstd), gx, gg, gb, rows,
                               d] {
      if (so->grad.empty()) return;
      const T* dy = so->grad.data();
      const T* g = sg->data.data();
      T* dx = gx ? grad_of(*sx).data() : nullptr;
      T* dg = gg ? grad_of(*sg).data() : nullptr;
      T* db = gb ? grad_of(*sb).data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dyr = dy + r * d;
        const T* hr = xhat.data() + r * d;
        if (dg || db) {
          for (std::size_t j = 0; j < d; ++j) {
            if (dg) dg[j] += dyr[j] * hr[j];
            if (db) db[j] += dyr[j];
          }
        }
        if (dx) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(dyr[j]) * g[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          T* dxr = dx + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(dyr[j]) * g[j];
            dxr[j] += static_cast<T>(rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(GradientTape<T>& tape, const Tensor<T>& x) {
  const bool tracked = any_tracked(tape, {&x});
  Tensor<T> out = result<T>(x.shape(), tracked);
  const Index n = Index(x.numel());
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> X(x.data().data(), n);
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> Y(out.data().data(), n);
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  // Phi(x) is kept for the backward rule.
  Eigen::Array<T, Eigen::Dynamic, 1> cdf = T(0.5) * (T(1) + (X * inv_sqrt2).erf());
  Y = X * cdf;
  if (tracked) {
    tape.record("gelu", [sx = x.storage_ptr(), so = out.storage_ptr(), cdf = std::move(cdf), n] {
      if (so->grad.empty()) return;
      const T inv_sqrt_2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> X(sx->data.data(), n);
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> DY(so->grad.data(), n);
      Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> DX(grad_of(*sx).data(), n);
      DX += DY * (cdf + X * inv_sqrt_2pi * (T(-0.5) * X.square()).exp());
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(GradientTape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const bool tracked = any_tracked(tape, {&x});
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  out.set_requires_grad(tracked);
  if (tracked) {
    tape.record("reshape", [sx = x.storage_ptr(), so = out.storage_ptr()] {
      if (so->grad.empty()) return;
      auto& dx = grad_of(*sx);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += so->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(GradientTape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.dim();
  std::vector<bool> seen(rank, false);
  bool ok = axes.size() == rank && rank > 0;
  for (std::size_t i = 0; ok && i < rank; ++i) {
    ok = axes[i] < rank && !seen[axes[i]];
    if (ok) seen[axes[i]] = true;
  }
  if (!ok) throw DimensionError("invalid permutation for shape " + shape_str(x.shape()));

  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[axes[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];

  // When the last axis stays last, whole rows of it are contiguous on both
  // sides and are copied as runs.
  const bool keeps_last = axes.back() == rank - 1;
  const std::size_t run = keeps_last ? out_shape.back() : 1;
  const std::size_t outer_rank = keeps_last ? rank - 1 : rank;
  const std::size_t total = x.numel(), runs = total / run;
  std::vector<std::size_t> source(runs);
  {
    std::vector<std::size_t> idx(outer_rank, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < runs; ++o) {
      source[o] = off;
      for (std::size_t d = outer_rank; d-- > 0;) {
        const std::size_t stride = in_strides[axes[d]];
        if (++idx[d] < out_shape[d]) {
          off += stride;
          break;
        }
        off -= stride * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  const bool tracked = any_tracked(tape, {&x});
  Tensor<T> out = result<T>(out_shape, tracked);
  const T* px = x.data().data();
  T* po = out.data().data();
  for (std::size_t o = 0; o < runs; ++o) std::copy(px + source[o], px + source[o] + run, po + o * run);
  if (tracked) {
    tape.record("permute", [sx = x.storage_ptr(), so = out.storage_ptr(), source = std::move(source),
                            run] {
      if (so->grad.empty()) return;
      T* dx = grad_of(*sx).data();
      const T* dy = so->grad.data();
      for (std::size_t o = 0; o < source.size(); ++o) {
        for (std::size_t j = 0; j < run; ++j) dx[source[o] + j] += dy[o * run + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(GradientTape<T>& tape, const Tensor<T>& x, int axis, std::size_t start,
                std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const AxisSplit s = split_at(x.shape(), ax);
  if (length == 0 || start + length > s.len) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis of size " + std::to_string(s.len));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const bool tracked = any_tracked(tape, {&x});
  Tensor<T> out = result<T>(out_shape, tracked);
  const T* px = x.data().data();
  T* po = out.data().data();
  const std::size_t block = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* src = px + (o * s.len + start) * s.inner;
    std::copy(src, src + block, po + o * block);
  }
  if (tracked) {
    tape.record("slice", [sx = x.storage_ptr(), so = out.storage_ptr(), s, start, block] {
      if (so->grad.empty()) return;
      T* dx = grad_of(*sx).data();
      const T* dy = so->grad.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        T* dst = dx + (o * s.len + start) * s.inner;
        for (std::size_t i = 0; i < block; ++i) dst[i] += dy[o * block + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(GradientTape<T>& tape, const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].dim());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw DimensionError("concat rank mismatch");
    a[ax] = b[ax] = 0;
    if (a != b) {
      throw DimensionError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    out_shape[ax] += p.shape()[ax];
    tracked = tracked || tape.tracks(p);
  }
  Tensor<T> out = result<T>(out_shape, tracked);
  const AxisSplit so = split_at(out_shape, ax);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.shape()[ax] * so.inner;
    const T* src = p.data().data();
    T* dst = out.data().data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, dst + o * so.len * so.inner + offset);
    }
    offsets.push_back(offset);
    offset += block;
  }
  if (tracked) {
    std::vector<std::shared_ptr<TensorStorage<T>>> storages;
    std::vector<bool> wants;
    for (const auto& p : parts) {
      storages.push_back(p.storage_ptr());
      wants.push_back(tape.tracks(p));
    }
    tape.record("concat", [storages = std::move(storages), wants = std::move(wants),
                           offsets = std::move(offsets), sout = out.storage_ptr(), so] {
      if (sout->grad.empty()) return;
      for (std::size_t p = 0; p < storages.size(); ++p) {
        if (!wants[p]) continue;
        T* dx = grad_of(*storages[p]).data();
        const std::size_t block = storages[p]->data.size() / so.outer;
        for (std::size_t o = 0; o < so.outer; ++o) {
          const T* src = sout->grad.data() + o * so.len * so.inner + offsets[p];
          for (std::size_t i = 0; i < block; ++i) dx[o * block + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> expand_leading(GradientTape<T>& tape, const Tensor<T>& x, std::size_t count) {
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const bool tracked = any_tracked(tape, {&x});
  Tensor<T> out = result<T>(out_shape, tracked);
  const std::size_t n = x.numel();
  for (std::size_t c = 0; c < count; ++c) {
    std::copy(x.data().begin(), x.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(c * n));
  }
  if (tracked) {
    tape.record("expand_leading", [sx = x.storage_ptr(), so = out.storage_ptr(), count, n] {
      if (so->grad.empty()) return;
      T* dx = grad_of(*sx).data();
      for (std::size_t c = 0; c < count; ++c) {
        for (std::size_t i = 0; i < n; ++i) dx[i] += so->grad[c * n + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> patchify(GradientTape<T>& tape, const Tensor<T>& images, std::size_t patch) {
  if (images.dim() != 4) {
    throw DimensionError("patchify expects [B,H,W,C], got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.size(0), h = images.size(1), w = images.size(2),
                    c = images.size(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  const std::size_t grid_w = w / patch, grid_h = h / patch;
  const std::size_t n_patches = grid_h * grid_w, patch_len = patch * patch * c;
  const bool tracked = any_tracked(tape, {&images});
  Tensor<T> out = result<T>(Shape{batch, n_patches, patch_len}, tracked);
  const std::size_t run = patch * c;
  // Walks every (image, patch, patch-row) run of P*C contiguous values.
  auto for_each_run = [=](auto&& fn) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t pr = 0; pr < grid_h; ++pr) {
        for (std::size_t pc = 0; pc < grid_w; ++pc) {
          const std::size_t p = pr * grid_w + pc;
          for (std::size_t i = 0; i < patch; ++i) {
            const std::size_t src = ((b * h + pr * patch + i) * w + pc * patch) * c;
            const std::size_t dst = (b * n_patches + p) * patch_len + i * run;
            fn(src, dst);
          }
        }
      }
    }
  };
  const T* pi = images.data().data();
  T* po = out.data().data();
  for_each_run([&](std::size_t src, std::size_t dst) { std::copy(pi + src, pi + src + run, po + dst); });
  if (tracked) {
    tape.record("patchify", [si = images.storage_ptr(), so = out.storage_ptr(), for_each_run, run] {
      if (so->grad.empty()) return;
      T* dx = grad_of(*si).data();
      const T* dy = so->grad.data();
      for_each_run([&](std::size_t src, std::size_t dst) {
        for (std::size_t j = 0; j < run; ++j) dx[src + j] += dy[dst + j];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> bce_with_logits(GradientTape<T>& tape, const Tensor<T>& logits,
                          std::span<const std::uint8_t> labels, Reduction reduction) {
  if (logits.dim() != 2 || labels.size() != logits.numel()) {
    throw DimensionError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.size(0), tasks = logits.size(1);
  for (auto y : labels) {
    if (y > 1) throw DataError("binary label outside {0,1}: " + std::to_string(int(y)));
  }
  const bool tracked = any_tracked(tape, {&logits});
  Tensor<T> out = result<T>(Shape{tasks}, tracked);
  const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(batch) : 1.0;
  const T* z = logits.data().data();
  for (std::size_t t = 0; t < tasks; ++t) {
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double zi = z[b * tasks + t];
      acc += softplus(zi) - labels[b * tasks + t] * zi;
    }
    out.data()[t] = static_cast<T>(acc * norm);
  }
  if (tracked) {
    std::vector<std::uint8_t> y(labels.begin(), labels.end());
    tape.record("bce_with_logits", [sz = logits.storage_ptr(), so = out.storage_ptr(),
                                    y = std::move(y), batch, tasks, norm] {
      if (so->grad.empty()) return;
      T* dz = grad_of(*sz).data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < tasks; ++t) {
          const std::size_t i = b * tasks + t;
          const double zi = sz->data[i];
          const double sig = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
          dz[i] += static_cast<T>(so->grad[t] * norm * (sig - y[i]));
        }
      }
    });
  }
  return out;
}

#define MALVIT_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> matmul(GradientTape<T>&, const Tensor<T>&, const Tensor<T>&, bool);         \
  template Tensor<T> linear(GradientTape<T>&, const Tensor<T>&, const Tensor<T>&,                \
                            const Tensor<T>&);                                                   \
  template Tensor<T> add(GradientTape<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul(GradientTape<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(GradientTape<T>&, const Tensor<T>&, T);                               \
  template Tensor<T> exp(GradientTape<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sum(GradientTape<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sum_axis(GradientTape<T>&, const Tensor<T>&, int);                          \
  template Tensor<T> mean_axis(GradientTape<T>&, const Tensor<T>&, int);                         \
  template Tensor<T> softmax(GradientTape<T>&, const Tensor<T>&, int);                           \
  template Tensor<T> layer_norm(GradientTape<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, double);                                       \
  template Tensor<T> gelu(GradientTape<T>&, const Tensor<T>&);                                   \
  template Tensor<T> reshape(GradientTape<T>&, const Tensor<T>&, Shape);                         \
  template Tensor<T> permute(GradientTape<T>&, const Tensor<T>&, const std::vector<std::size_t>&); \
  template Tensor<T> slice(GradientTape<T>&, const Tensor<T>&, int, std::size_t, std::size_t);   \
  template Tensor<T> concat(GradientTape<T>&, const std::vector<Tensor<T>>&, int);               \
  template Tensor<T> expand_leading(GradientTape<T>&, const Tensor<T>&, std::size_t);            \
  template Tensor<T> patchify(GradientTape<T>&, const Tensor<T>&, std::size_t);                  \
  template Tensor<T> bce_with_logits(GradientTape<T>&, const Tensor<T>&,                         \
                                     std::span<const std::uint8_t>, Reduction);

MALVIT_INSTANTIATE_OPS(float)
MALVIT_INSTANTIATE_OPS(double)

}  // namespace malvit::ops
