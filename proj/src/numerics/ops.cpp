#include "ppbench/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ppbench/errors.hpp"

namespace ppb::ops {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Turns `out` into a graph node fed by `inputs`.
template <typename Fn>
void attach(Tensor& out, std::initializer_list<const Tensor*> inputs, Fn&& backward) {
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor* t : inputs) node.parents.push_back(t->node());
  node.backward = std::forward<Fn>(backward);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

struct DimSplit {
  std::size_t outer, n, inner;
};

DimSplit split_at(const Shape& s, std::size_t dim, const char* op) {
  require(dim < s.size(), std::string(op) + ": dim " + std::to_string(dim) + " out of range for " + shape_str(s));
  DimSplit d{1, s[dim], 1};
  for (std::size_t i = 0; i < dim; ++i) d.outer *= s[i];
  for (std::size_t i = dim + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}

// Period with which b repeats across a.
std::size_t broadcast_period(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (b.numel() == 1 && sb.size() <= sa.size()) return 1;
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  require(ok, std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  return b.numel();
}

template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da da, Db db) {
  const std::size_t p = broadcast_period(a, b, op);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i], y[i % p]);
  Tensor r = Tensor::from(a.shape(), std::move(out));
  const bool ta = a.tracked(), tb = b.tracked();
  if (!ta && !tb) return r;
  attach(r, {&a, &b}, [an = a.node(), bn = b.node(), ta, tb, p, da, db](Node& self) {
    const auto& g = self.grad;
    const auto& x = an->data;
    const auto& y = bn->data;
    if (ta) {
      auto& gx = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * da(x[i], y[i % p]);
    }
    if (tb) {
      auto& gy = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gy[i % p] += g[i] * db(x[i], y[i % p]);
    }
  });
  return r;
}

// d(out)/d(in) given input value x and output value y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), deriv](Node& self) {
    auto& gx = an->grad_buffer();
    const auto& x = an->data;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(x[i], self.data[i]);
  });
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  const auto x = a.data();
  Tensor r = Tensor::scalar(std::accumulate(x.begin(), x.end(), 0.0));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node()](Node& self) {
    auto& gx = an->grad_buffer();
    for (auto& v : gx) v += self.grad[0];
  });
  return r;
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_dim(const Tensor& a, std::size_t dim) {
  const auto d = split_at(a.shape(), dim, "sum_dim");
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(dim));
  const auto x = a.data();
  std::vector<double> out(d.outer * d.inner, 0.0);
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t k = 0; k < d.n; ++k)
      for (std::size_t i = 0; i < d.inner; ++i) out[o * d.inner + i] += x[(o * d.n + k) * d.inner + i];
  Tensor r = Tensor::from(std::move(shape), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), d](Node& self) {
    auto& gx = an->grad_buffer();
    for (std::size_t o = 0; o < d.outer; ++o)
      for (std::size_t k = 0; k < d.n; ++k)
        for (std::size_t i = 0; i < d.inner; ++i) gx[(o * d.n + k) * d.inner + i] += self.grad[o * d.inner + i];
  });
  return r;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3;
  require((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]),
          "matmul: unsupported shapes " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  require(sb[sb.size() - 2] == k, "matmul: inner dims differ " + shape_str(sa) + " x " + shape_str(sb));
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MapMat(out.data() + i * m * n, m, n).noalias() =
        ConstMapMat(a.data().data() + i * m * k, m, k) * ConstMapMat(b.data().data() + i * k * n, k, n);
  }
  Tensor r = Tensor::from(batched ? Shape{batch, m, n} : Shape{m, n}, std::move(out));
  const bool ta = a.tracked(), tb = b.tracked();
  if (!ta && !tb) return r;
  attach(r, {&a, &b}, [an = a.node(), bn = b.node(), ta, tb, batch, m, k, n](Node& self) {
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMapMat g(self.grad.data() + i * m * n, m, n);
      if (ta) {
        MapMat(an->grad_buffer().data() + i * m * k, m, k).noalias() +=
            g * ConstMapMat(bn->data.data() + i * k * n, k, n).transpose();
      }
      if (tb) {
        MapMat(bn->grad_buffer().data() + i * k * n, k, n).noalias() +=
            ConstMapMat(an->data.data() + i * m * k, m, k).transpose() * g;
      }
    }
  });
  return r;
}

Tensor eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from({n, n}, std::move(v));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor r = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node()](Node& self) {
    auto& gx = an->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
  return r;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  const std::size_t rank = s.size();
  require(perm.size() == rank, "permute: rank mismatch");
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    require(p < rank && !used[p], "permute: invalid permutation");
    used[p] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);  // input stride for each output dim
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = s[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  // src[i] = input flat index of output element i.
  const std::size_t total = a.numel();
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < total; ++i) {
    src[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto x = a.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = x[src[i]];
  Tensor r = Tensor::from(std::move(out_shape), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), src = std::move(src)](Node& self) {
    auto& gx = an->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += self.grad[i];
  });
  return r;
}

Tensor transpose(const Tensor& a, std::size_t d0, std::size_t d1) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  require(d0 < perm.size() && d1 < perm.size(), "transpose: dim out of range");
  std::swap(perm[d0], perm[d1]);
  return permute(a, perm);
}

Tensor slice(const Tensor& a, std::size_t dim, std::size_t start, std::size_t length) {
  const auto d = split_at(a.shape(), dim, "slice");
  require(start + length <= d.n, "slice: range out of bounds for " + shape_str(a.shape()));
  Shape shape = a.shape();
  shape[dim] = length;
  const auto x = a.data();
  std::vector<double> out;
  out.reserve(d.outer * length * d.inner);
  for (std::size_t o = 0; o < d.outer; ++o) {
    const auto* base = x.data() + (o * d.n + start) * d.inner;
    out.insert(out.end(), base, base + length * d.inner);
  }
  Tensor r = Tensor::from(std::move(shape), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), d, start, length](Node& self) {
    auto& gx = an->grad_buffer();
    const std::size_t chunk = length * d.inner;
    for (std::size_t o = 0; o < d.outer; ++o) {
      double* dst = gx.data() + (o * d.n + start) * d.inner;
      const double* g = self.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
    }
  });
  return r;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  const auto& si = input.shape();
  const auto& sk = kernel.shape();
  require(si.size() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(si));
  require(sk.size() == 4, "conv2d: kernel must be [C',C,kh,kw], got " + shape_str(sk));
  require(sk[1] == si[1], "conv2d: kernel expects " + std::to_string(sk[1]) + " input channels, input has " +
                              std::to_string(si[1]));
  require(stride > 0, "conv2d: stride must be positive");
  const std::size_t B = si[0], C = si[1], H = si[2], W = si[3];
  const std::size_t Co = sk[0], kh = sk[2], kw = sk[3];
  require(kh <= H + 2 * padding && kw <= W + 2 * padding,
          "conv2d: kernel " + shape_str(sk) + " larger than padded input " + shape_str(si));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.shape() == Shape{Co}, "conv2d: bias must be [" + std::to_string(Co) + "]");
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  const std::size_t plane = Ho * Wo;
  const std::size_t ckk = C * kh * kw;
  const std::size_t ncols = B * plane;

  // im2col: rows (c, i, j), columns (b, oy, ox).
  std::vector<double> cols(ckk * ncols);
  const auto x = input.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = cols.data() + ((c * kh + i) * kw + j) * ncols;
        for (std::size_t b = 0; b < B; ++b) {
          const double* img = x.data() + (b * C + c) * H * W;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            double* dst = row + b * plane + oy * Wo;
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
              std::fill(dst, dst + Wo, 0.0);
              continue;
            }
            const double* src = img + static_cast<std::size_t>(iy) * W;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(padding);
              dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? 0.0 : src[ix];
            }
          }
        }
      }

  RowMat prod = ConstMapMat(kernel.data().data(), Co, ckk) * ConstMapMat(cols.data(), ckk, ncols);
  std::vector<double> out(B * Co * plane);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      const double bv = has_bias ? bias.data()[co] : 0.0;
      const double* src = prod.data() + co * ncols + b * plane;
      double* dst = out.data() + (b * Co + co) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
    }
  Tensor r = Tensor::from({B, Co, Ho, Wo}, std::move(out));

  const bool tx = input.tracked(), tk = kernel.tracked(), tbias = has_bias && bias.tracked();
  if (!tx && !tk && !tbias) return r;
  auto backward = [xn = input.node(), kn = kernel.node(), bn = has_bias ? bias.node() : nullptr, tx, tk, tbias,
                   cols = tk ? std::move(cols) : std::vector<double>{}, B, C, H, W, Co, kh, kw, Ho, Wo, stride,
                   padding](Node& self) {
    const std::size_t plane = Ho * Wo, ckk = C * kh * kw, ncols = B * plane;
    RowMat g(Co, ncols);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Co; ++co)
        std::copy_n(self.grad.data() + (b * Co + co) * plane, plane, g.data() + co * ncols + b * plane);
    if (tbias) {
      auto& gb = bn->grad_buffer();
      for (std::size_t co = 0; co < Co; ++co) gb[co] += g.row(static_cast<Eigen::Index>(co)).sum();
    }
    if (tk) MapMat(kn->grad_buffer().data(), Co, ckk).noalias() += g * ConstMapMat(cols.data(), ckk, ncols).transpose();
    if (tx) {
      RowMat dcols = ConstMapMat(kn->data.data(), Co, ckk).transpose() * g;
      auto& gx = xn->grad_buffer();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const double* row = dcols.data() + ((c * kh + i) * kw + j) * ncols;
            for (std::size_t b = 0; b < B; ++b) {
              double* img = gx.data() + (b * C + c) * H * W;
              for (std::size_t oy = 0; oy < Ho; ++oy) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                const double* src = row + b * plane + oy * Wo;
                double* dst = img + static_cast<std::size_t>(iy) * W;
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                  const auto ix =
                      static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(padding);
                  if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ix] += src[ox];
                }
              }
            }
          }
    }
  };
  if (has_bias)
    attach(r, {&input, &kernel, &bias}, std::move(backward));
  else
    attach(r, {&input, &kernel}, std::move(backward));
  return r;
}

Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  const auto& s = input.shape();
  require(s.size() == 4, "max_pool2d: input must be [B,C,H,W], got " + shape_str(s));
  require(kernel > 0 && stride > 0 && kernel <= s[2] && kernel <= s[3], "max_pool2d: bad window for " + shape_str(s));
  const std::size_t BC = s[0] * s[1], H = s[2], W = s[3];
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  const auto x = input.data();
  std::vector<double> out(BC * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t bc = 0; bc < BC; ++bc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = bc * H * W + oy * stride * W + ox * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = bc * H * W + (oy * stride + i) * W + ox * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (bc * Ho + oy) * Wo + ox;
        out[o] = x[best];
        arg[o] = best;
      }
  Tensor r = Tensor::from({s[0], s[1], Ho, Wo}, std::move(out));
  if (!input.tracked()) return r;
  attach(r, {&input}, [xn = input.node(), arg = std::move(arg)](Node& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += self.grad[o];
  });
  return r;
}

SpatialMax spatial_max(const Tensor& input) {
  const auto& s = input.shape();
  require(s.size() == 4, "spatial_max: input must be [B,C,H,W], got " + shape_str(s));
  const std::size_t BC = s[0] * s[1], HW = s[2] * s[3];
  require(HW > 0, "spatial_max: empty spatial extent");
  const auto x = input.data();
  std::vector<double> out(BC);
  std::vector<std::size_t> arg(BC);
  for (std::size_t bc = 0; bc < BC; ++bc) {
    const double* m = x.data() + bc * HW;
    std::size_t best = 0;
    for (std::size_t i = 1; i < HW; ++i)
      if (m[i] > m[best]) best = i;
    out[bc] = m[best];
    arg[bc] = best;
  }
  Tensor r = Tensor::from({s[0], s[1]}, std::move(out));
  if (input.tracked()) {
    attach(r, {&input}, [xn = input.node(), arg, HW](Node& self) {
      auto& gx = xn->grad_buffer();
      for (std::size_t bc = 0; bc < arg.size(); ++bc) gx[bc * HW + arg[bc]] += self.grad[bc];
    });
  }
  return {std::move(r), std::move(arg)};
}

Tensor channel_inner_product(const Tensor& z, const Tensor& protos) {
  const auto& sz = z.shape();
  const auto& sp = protos.shape();
  require(sz.size() == 4, "channel_inner_product: features must be [B,D,H,W], got " + shape_str(sz));
  require(sp.size() == 2 && sp[1] == sz[1], "channel_inner_product: prototypes " + shape_str(sp) +
                                                " do not match feature channels of " + shape_str(sz));
  const std::size_t B = sz[0], D = sz[1], HW = sz[2] * sz[3], M = sp[0];
  std::vector<double> out(B * M * HW);
  ConstMapMat P(protos.data().data(), M, D);
  for (std::size_t b = 0; b < B; ++b)
    MapMat(out.data() + b * M * HW, M, HW).noalias() = P * ConstMapMat(z.data().data() + b * D * HW, D, HW);
  Tensor r = Tensor::from({B, M, sz[2], sz[3]}, std::move(out));
  const bool tz = z.tracked(), tp = protos.tracked();
  if (!tz && !tp) return r;
  attach(r, {&z, &protos}, [zn = z.node(), pn = protos.node(), tz, tp, B, D, HW, M](Node& self) {
    for (std::size_t b = 0; b < B; ++b) {
      ConstMapMat g(self.grad.data() + b * M * HW, M, HW);
      if (tp)
        MapMat(pn->grad_buffer().data(), M, D).noalias() +=
            g * ConstMapMat(zn->data.data() + b * D * HW, D, HW).transpose();
      if (tz)
        MapMat(zn->grad_buffer().data() + b * D * HW, D, HW).noalias() +=
            ConstMapMat(pn->data.data(), M, D).transpose() * g;
    }
  });
  return r;
}

Tensor l2_normalize(const Tensor& a, std::size_t dim, double eps) {
  const auto d = split_at(a.shape(), dim, "l2_normalize");
  const auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> norms(d.outer * d.inner);
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < d.inner; ++i) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d.n; ++k) {
        const double v = x[(o * d.n + k) * d.inner + i];
        ss += v * v;
      }
      const double nrm = std::sqrt(ss);
      norms[o * d.inner + i] = nrm;
      const double denom = std::max(nrm, eps);
      for (std::size_t k = 0; k < d.n; ++k) out[(o * d.n + k) * d.inner + i] = x[(o * d.n + k) * d.inner + i] / denom;
    }
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), d, eps, norms = std::move(norms)](Node& self) {
    auto& gx = an->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < d.outer; ++o)
      for (std::size_t i = 0; i < d.inner; ++i) {
        const double nrm = norms[o * d.inner + i];
        if (nrm > eps) {
          double yg = 0.0;
          for (std::size_t k = 0; k < d.n; ++k) {
            const std::size_t idx = (o * d.n + k) * d.inner + i;
            yg += y[idx] * g[idx];
          }
          for (std::size_t k = 0; k < d.n; ++k) {
            const std::size_t idx = (o * d.n + k) * d.inner + i;
            gx[idx] += (g[idx] - y[idx] * yg) / nrm;
          }
        } else {
          for (std::size_t k = 0; k < d.n; ++k) {
            const std::size_t idx = (o * d.n + k) * d.inner + i;
            gx[idx] += g[idx] / eps;
          }
        }
      }
  });
  return r;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, std::size_t dim, double eps) {
  require(a.shape() == b.shape(), "cosine_similarity: shapes differ " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  return sum_dim(mul(l2_normalize(a, dim, eps), l2_normalize(b, dim, eps)), dim);
}

Tensor softmax(const Tensor& a, std::size_t dim) {
  const auto d = split_at(a.shape(), dim, "softmax");
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < d.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < d.n; ++k) mx = std::max(mx, x[(o * d.n + k) * d.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < d.n; ++k) {
        const std::size_t idx = (o * d.n + k) * d.inner + i;
        out[idx] = std::exp(x[idx] - mx);
        z += out[idx];
      }
      for (std::size_t k = 0; k < d.n; ++k) out[(o * d.n + k) * d.inner + i] /= z;
    }
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), d](Node& self) {
    auto& gx = an->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < d.outer; ++o)
      for (std::size_t i = 0; i < d.inner; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d.n; ++k) {
          const std::size_t idx = (o * d.n + k) * d.inner + i;
          dot += y[idx] * g[idx];
        }
        for (std::size_t k = 0; k < d.n; ++k) {
          const std::size_t idx = (o * d.n + k) * d.inner + i;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
  return r;
}

Tensor log_softmax(const Tensor& a, std::size_t dim) {
  const auto d = split_at(a.shape(), dim, "log_softmax");
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < d.outer; ++o)
    for (std::size_t i = 0; i < d.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < d.n; ++k) mx = std::max(mx, x[(o * d.n + k) * d.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < d.n; ++k) z += std::exp(x[(o * d.n + k) * d.inner + i] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < d.n; ++k) {
        const std::size_t idx = (o * d.n + k) * d.inner + i;
        out[idx] = x[idx] - lse;
      }
    }
  Tensor r = Tensor::from(a.shape(), std::move(out));
  if (!a.tracked()) return r;
  attach(r, {&a}, [an = a.node(), d](Node& self) {
    auto& gx = an->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < d.outer; ++o)
      for (std::size_t i = 0; i < d.inner; ++i) {
        double gs = 0.0;
        for (std::size_t k = 0; k < d.n; ++k) gs += g[(o * d.n + k) * d.inner + i];
        for (std::size_t k = 0; k < d.n; ++k) {
          const std::size_t idx = (o * d.n + k) * d.inner + i;
          gx[idx] += g[idx] - std::exp(y[idx]) * gs;
        }
      }
  });
  return r;
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  require(s.size() == 2, "cross_entropy_logits: logits must be [B,K], got " + shape_str(s));
  require(labels.size() == s[0], "cross_entropy_logits: " + std::to_string(labels.size()) + " labels for batch of " +
                                     std::to_string(s[0]));
  require(s[0] > 0, "cross_entropy_logits: empty batch");
  const std::size_t B = s[0], K = s[1];
  const auto x = logits.data();
  std::vector<double> probs(B * K);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    require(y >= 0 && static_cast<std::size_t>(y) < K, "cross_entropy_logits: label out of range");
    const double* row = x.data() + b * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(row[k] - mx) / z;
    total += mx + std::log(z) - row[y];
  }
  Tensor r = Tensor::scalar(total / static_cast<double>(B));
  if (!logits.tracked()) return r;
  std::vector<int> ys(labels.begin(), labels.end());
  attach(r, {&logits}, [ln = logits.node(), probs = std::move(probs), ys = std::move(ys), B, K](Node& self) {
    auto& gx = ln->grad_buffer();
    const double scale = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k)
        gx[b * K + k] += scale * (probs[b * K + k] - (static_cast<int>(k) == ys[b] ? 1.0 : 0.0));
  });
  return r;
}

namespace {

struct Lerp {
  std::size_t i0, i1;
  double t;
};

std::vector<Lerp> resize_axis(std::size_t in, std::size_t out) {
  std::vector<Lerp> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  const auto& s = input.shape();
  require(s.size() == 4, "bilinear_resize: input must be [B,C,H,W], got " + shape_str(s));
  require(out_h > 0 && out_w > 0 && s[2] > 0 && s[3] > 0, "bilinear_resize: empty extent");
  const std::size_t BC = s[0] * s[1], H = s[2], W = s[3];
  auto ty = resize_axis(H, out_h);
  auto tx = resize_axis(W, out_w);
  const auto x = input.data();
  std::vector<double> out(BC * out_h * out_w);
  for (std::size_t bc = 0; bc < BC; ++bc) {
    const double* m = x.data() + bc * H * W;
    double* dst = out.data() + bc * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ly = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& lx = tx[ox];
        const double a = m[ly.i0 * W + lx.i0], b = m[ly.i0 * W + lx.i1];
        const double c = m[ly.i1 * W + lx.i0], d = m[ly.i1 * W + lx.i1];
        const double top = a + lx.t * (b - a);
        const double bottom = c + lx.t * (d - c);
        dst[oy * out_w + ox] = top + ly.t * (bottom - top);
      }
    }
  }
  Tensor r = Tensor::from({s[0], s[1], out_h, out_w}, std::move(out));
  if (!input.tracked()) return r;
  attach(r, {&input}, [xn = input.node(), ty = std::move(ty), tx = std::move(tx), BC, H, W, out_h, out_w](Node& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t bc = 0; bc < BC; ++bc) {
      double* gm = gx.data() + bc * H * W;
      const double* g = self.grad.data() + bc * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& ly = ty[oy];
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& lx = tx[ox];
          const double v = g[oy * out_w + ox];
          gm[ly.i0 * W + lx.i0] += v * (1.0 - ly.t) * (1.0 - lx.t);
          gm[ly.i0 * W + lx.i1] += v * (1.0 - ly.t) * lx.t;
          gm[ly.i1 * W + lx.i0] += v * ly.t * (1.0 - lx.t);
          gm[ly.i1 * W + lx.i1] += v * ly.t * lx.t;
        }
      }
    }
  });
  return r;
}

Tensor detach(const Tensor& a) { return a.clone(); }

Tensor masked_max(const Tensor& x, std::span<const std::uint8_t> mask) {
  const auto& s = x.shape();
  require(s.size() == 2, "masked_max: input must be [B,M], got " + shape_str(s));
  require(mask.size() == x.numel(), "masked_max: mask size mismatch");
  const std::size_t B = s[0], M = s[1];
  const auto v = x.data();
  std::vector<double> out(B);
  std::vector<std::size_t> arg(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = M;
    for (std::size_t j = 0; j < M; ++j) {
      if (!mask[b * M + j]) continue;
      if (best == M || v[b * M + j] > v[b * M + best]) best = j;
    }
    require(best < M, "masked_max: row " + std::to_string(b) + " selects no entries");
    out[b] = v[b * M + best];
    arg[b] = b * M + best;
  }
  Tensor r = Tensor::from({B}, std::move(out));
  if (!x.tracked()) return r;
  attach(r, {&x}, [xn = x.node(), arg = std::move(arg)](Node& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t b = 0; b < arg.size(); ++b) gx[arg[b]] += self.grad[b];
  });
  return r;
}

}  // namespace ppb::ops
