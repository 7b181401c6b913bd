#include "rest/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rest/error.hpp"

namespace rest {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

using detail::Node;

int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " + std::to_string(r));
  return a;
}

// (outer, length, inner) decomposition of dims around `axis`.
struct AxisSplit {
  std::int64_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Dims& dims, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= dims[static_cast<std::size_t>(i)];
  s.length = dims[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < dims.size(); ++i) s.inner *= dims[i];
  return s;
}

bool is_suffix(const Dims& small, const Dims& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Node* parent(Node& self, std::size_t i) { return self.parents[i].get(); }
bool wants_grad(const Node* n) { return n != nullptr && n->requires_grad; }

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (!is_suffix(b.dims(), a.dims()))
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.dims()) + " and " + to_string(b.dims()) +
                     " are not broadcast-compatible");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % nb];
  return detail::make_result(a.dims(), std::move(out), {a, b}, "add", [nb](Node& self) {
    if (Node* pa = parent(self, 0); wants_grad(pa)) {
      auto g = detail::grad_buffer(*pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (Node* pb = parent(self, 1); wants_grad(pb)) {
      auto g = detail::grad_buffer(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % nb];
  return detail::make_result(a.dims(), std::move(out), {a, b}, "sub", [nb](Node& self) {
    if (Node* pa = parent(self, 0); wants_grad(pa)) {
      auto g = detail::grad_buffer(*pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (Node* pb = parent(self, 1); wants_grad(pb)) {
      auto g = detail::grad_buffer(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % nb];
  return detail::make_result(a.dims(), std::move(out), {a, b}, "mul", [nb](Node& self) {
    Node* pa = parent(self, 0);
    Node* pb = parent(self, 1);
    if (wants_grad(pa)) {
      auto g = detail::grad_buffer(*pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i % nb];
    }
    if (wants_grad(pb)) {
      auto g = detail::grad_buffer(*pb);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nb] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& x, float s) {
  const auto xv = x.values();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = s * xv[i];
  return detail::make_result(x.dims(), std::move(out), {x}, "scale", [s](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, float s) {
  const auto xv = x.values();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + s;
  return detail::make_result(x.dims(), std::move(out), {x}, "add_scalar", [](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Dims& ad = a.dims();
  const Dims& bd = b.dims();
  if (ad.size() < 2 || bd.size() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(ad) + " and " + to_string(bd));
  const std::int64_t m = ad[ad.size() - 2], k = ad.back(), n = bd.back();
  if (bd[bd.size() - 2] != k)
    throw ShapeError("matmul: inner dimensions differ for " + to_string(ad) + " x " + to_string(bd));
  const Dims a_lead(ad.begin(), ad.end() - 2);
  const Dims b_lead(bd.begin(), bd.end() - 2);
  if (!a_lead.empty() && !b_lead.empty() && a_lead != b_lead)
    throw ShapeError("matmul: batch dims of " + to_string(ad) + " and " + to_string(bd) + " are not compatible");
  const Dims& lead = a_lead.empty() ? b_lead : a_lead;
  const std::int64_t batch = product(lead);
  const std::int64_t a_step = a_lead.empty() ? 0 : m * k;
  const std::int64_t b_step = b_lead.empty() ? 0 : k * n;

  Dims od = lead;
  od.push_back(m);
  od.push_back(n);
  std::vector<float> out(static_cast<std::size_t>(batch * m * n));
  const float* ap = a.values().data();
  const float* bp = b.values().data();
  for (std::int64_t z = 0; z < batch; ++z) {
    MutMap c(out.data() + z * m * n, m, n);
    c.noalias() = ConstMap(ap + z * a_step, m, k) * ConstMap(bp + z * b_step, k, n);
  }
  detail::add_flops(static_cast<std::uint64_t>(2 * batch * m * k * n));

  return detail::make_result(std::move(od), std::move(out), {a, b}, "matmul",
                             [=](Node& self) {
    Node* pa = parent(self, 0);
    Node* pb = parent(self, 1);
    for (std::int64_t z = 0; z < batch; ++z) {
      ConstMap g(self.grad.data() + z * m * n, m, n);
      if (wants_grad(pa)) {
        MutMap ga(detail::grad_buffer(*pa).data() + z * a_step, m, k);
        ga.noalias() += g * ConstMap(pb->data.data() + z * b_step, k, n).transpose();
      }
      if (wants_grad(pb)) {
        MutMap gb(detail::grad_buffer(*pb).data() + z * b_step, k, n);
        gb.noalias() += ConstMap(pa->data.data() + z * a_step, m, k).transpose() * g;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

Tensor transpose(const Tensor& x) {
  const Dims& xd = x.dims();
  if (xd.size() < 2) throw ShapeError("transpose: rank < 2 for " + to_string(xd));
  const std::int64_t r = xd[xd.size() - 2], c = xd.back();
  const std::int64_t batch = product(Dims(xd.begin(), xd.end() - 2));
  Dims od = xd;
  std::swap(od[od.size() - 1], od[od.size() - 2]);
  std::vector<float> out(x.values().size());
  const float* xp = x.values().data();
  for (std::int64_t z = 0; z < batch; ++z)
    MutMap(out.data() + z * r * c, c, r) = ConstMap(xp + z * r * c, r, c).transpose();
  return detail::make_result(std::move(od), std::move(out), {x}, "transpose", [=](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (std::int64_t z = 0; z < batch; ++z)
      MutMap(g.data() + z * r * c, r, c) += ConstMap(self.grad.data() + z * r * c, c, r).transpose();
  });
}

Tensor reshape(const Tensor& x, Dims dims) {
  if (product(dims) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.dims()) + " as " + to_string(dims));
  std::vector<float> out(x.values().begin(), x.values().end());
  return detail::make_result(std::move(dims), std::move(out), {x}, "reshape", [](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Dims& first = parts.front().dims();
  const int ax = normalize_axis(axis, first.size(), "concat");
  Dims od = first;
  od[static_cast<std::size_t>(ax)] = 0;
  std::vector<std::int64_t> lengths;
  for (const Tensor& p : parts) {
    const Dims& pd = p.dims();
    bool ok = pd.size() == first.size();
    for (std::size_t i = 0; ok && i < pd.size(); ++i)
      ok = static_cast<int>(i) == ax || pd[i] == first[i];
    if (!ok) throw ShapeError("concat: " + to_string(pd) + " does not match " + to_string(first) + " off axis " + std::to_string(ax));
    lengths.push_back(pd[static_cast<std::size_t>(ax)]);
    od[static_cast<std::size_t>(ax)] += lengths.back();
  }
  const AxisSplit s = split_at(od, ax);
  std::vector<float> out(static_cast<std::size_t>(product(od)));
  std::int64_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::int64_t block = lengths[p] * s.inner;
    const float* src = parts[p].values().data();
    for (std::int64_t o = 0; o < s.outer; ++o)
      std::copy_n(src + o * block, block, out.data() + o * s.length * s.inner + offset);
    offset += block;
  }
  return detail::make_result(std::move(od), std::move(out), parts, "concat", [s, lengths](Node& self) {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < lengths.size(); ++p) {
      const std::int64_t block = lengths[p] * s.inner;
      if (Node* pn = parent(self, p); wants_grad(pn) && block > 0) {
        auto g = detail::grad_buffer(*pn);
        for (std::int64_t o = 0; o < s.outer; ++o) {
          const float* src = self.grad.data() + o * s.length * s.inner + off;
          float* dst = g.data() + o * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      off += block;
    }
  });
}

Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_at(x.dims(), ax);
  if (begin < 0 || end < begin || end > s.length)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside axis of length " +
                     std::to_string(s.length) + " in " + to_string(x.dims()));
  Dims od = x.dims();
  od[static_cast<std::size_t>(ax)] = end - begin;
  const std::int64_t block = (end - begin) * s.inner;
  std::vector<float> out(static_cast<std::size_t>(s.outer * block));
  const float* xp = x.values().data();
  for (std::int64_t o = 0; o < s.outer; ++o)
    std::copy_n(xp + o * s.length * s.inner + begin * s.inner, block, out.data() + o * block);
  return detail::make_result(std::move(od), std::move(out), {x}, "slice", [s, begin, block](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (std::int64_t o = 0; o < s.outer; ++o) {
      float* dst = g.data() + o * s.length * s.inner + begin * s.inner;
      const float* src = self.grad.data() + o * block;
      for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> idx) {
  if (x.rank() < 1) throw ShapeError("gather_rows: scalar input");
  const std::int64_t rows = x.dim(0);
  const std::int64_t width = rows == 0 ? 0 : x.numel() / rows;
  std::vector<std::int64_t> index(idx.begin(), idx.end());
  for (auto r : index)
    if (r < 0 || r >= rows) throw ShapeError("gather_rows: row " + std::to_string(r) + " outside " + to_string(x.dims()));
  Dims od = x.dims();
  od[0] = static_cast<std::int64_t>(index.size());
  std::vector<float> out(static_cast<std::size_t>(od[0] * width));
  const float* xp = x.values().data();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(xp + index[r] * width, width, out.data() + static_cast<std::int64_t>(r) * width);
  return detail::make_result(std::move(od), std::move(out), {x}, "gather_rows",
                             [index = std::move(index), width](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (std::size_t r = 0; r < index.size(); ++r) {
      const float* src = self.grad.data() + static_cast<std::int64_t>(r) * width;
      float* dst = g.data() + index[r] * width;
      for (std::int64_t i = 0; i < width; ++i) dst[i] += src[i];
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.dims(), ax);
  const float* xp = x.values().data();
  std::vector<float> out(x.values().size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.length * s.inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::int64_t l = 0; l < s.length; ++l) mx = std::max(mx, xp[base + l * s.inner]);
      double total = 0.0;
      for (std::int64_t l = 0; l < s.length; ++l) {
        const float e = std::exp(xp[base + l * s.inner] - mx);
        out[static_cast<std::size_t>(base + l * s.inner)] = e;
        total += e;
      }
      for (std::int64_t l = 0; l < s.length; ++l)
        out[static_cast<std::size_t>(base + l * s.inner)] = static_cast<float>(out[static_cast<std::size_t>(base + l * s.inner)] / total);
    }
  }
  return detail::make_result(x.dims(), std::move(out), {x}, "softmax", [s](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    const auto& y = self.data;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.length * s.inner + in;
        double dot = 0.0;
        for (std::int64_t l = 0; l < s.length; ++l) {
          const auto i = static_cast<std::size_t>(base + l * s.inner);
          dot += static_cast<double>(self.grad[i]) * y[i];
        }
        for (std::int64_t l = 0; l < s.length; ++l) {
          const auto i = static_cast<std::size_t>(base + l * s.inner);
          g[i] += static_cast<float>(y[i] * (self.grad[i] - dot));
        }
      }
    }
  });
}

Tensor logsumexp(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "logsumexp");
  const AxisSplit s = split_at(x.dims(), ax);
  if (s.length == 0) throw ShapeError("logsumexp: empty reduction axis in " + to_string(x.dims()));
  Dims od = x.dims();
  od.erase(od.begin() + ax);
  const float* xp = x.values().data();
  std::vector<float> out(static_cast<std::size_t>(s.outer * s.inner));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.length * s.inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::int64_t l = 0; l < s.length; ++l) mx = std::max(mx, xp[base + l * s.inner]);
      double total = 0.0;
      for (std::int64_t l = 0; l < s.length; ++l) total += std::exp(static_cast<double>(xp[base + l * s.inner]) - mx);
      out[static_cast<std::size_t>(o * s.inner + in)] = static_cast<float>(mx + std::log(total));
    }
  }
  return detail::make_result(std::move(od), std::move(out), {x}, "logsumexp", [s](Node& self) {
    Node* px = parent(self, 0);
    auto g = detail::grad_buffer(*px);
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const auto r = static_cast<std::size_t>(o * s.inner + in);
        const std::int64_t base = o * s.length * s.inner + in;
        for (std::int64_t l = 0; l < s.length; ++l) {
          const auto i = static_cast<std::size_t>(base + l * s.inner);
          g[i] += self.grad[r] * static_cast<float>(std::exp(static_cast<double>(px->data[i]) - self.data[r]));
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::int64_t c = x.dim(-1);
  if (gain.defined() && gain.numel() != c) throw ShapeError("layer_norm: gain " + to_string(gain.dims()) + " vs features " + std::to_string(c));
  if (bias.defined() && bias.numel() != c) throw ShapeError("layer_norm: bias " + to_string(bias.dims()) + " vs features " + std::to_string(c));
  const std::int64_t rows = c == 0 ? 0 : x.numel() / c;
  const float* xp = x.values().data();
  const float* gp = gain.defined() ? gain.values().data() : nullptr;
  const float* bp = bias.defined() ? bias.values().data() : nullptr;
  std::vector<float> out(x.values().size());
  std::vector<float> xhat(x.values().size());
  std::vector<float> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = xp + r * c;
    double mu = 0.0;
    for (std::int64_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = static_cast<float>(is);
    for (std::int64_t i = 0; i < c; ++i) {
      const auto k = static_cast<std::size_t>(r * c + i);
      xhat[k] = static_cast<float>((row[i] - mu) * is);
      out[k] = xhat[k] * (gp ? gp[i] : 1.0f) + (bp ? bp[i] : 0.0f);
    }
  }
  return detail::make_result(x.dims(), std::move(out), {x, gain, bias}, "layer_norm",
                             [c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    Node* px = parent(self, 0);
    Node* pg = parent(self, 1);
    Node* pb = parent(self, 2);
    const float* gv = pg ? pg->data.data() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* gy = self.grad.data() + r * c;
      const float* xh = xhat.data() + r * c;
      if (wants_grad(pg)) {
        auto gg = detail::grad_buffer(*pg);
        for (std::int64_t i = 0; i < c; ++i) gg[static_cast<std::size_t>(i)] += gy[i] * xh[i];
      }
      if (wants_grad(pb)) {
        auto gb = detail::grad_buffer(*pb);
        for (std::int64_t i = 0; i < c; ++i) gb[static_cast<std::size_t>(i)] += gy[i];
      }
      if (wants_grad(px)) {
        double m1 = 0.0, m2 = 0.0;
        for (std::int64_t i = 0; i < c; ++i) {
          const double gxh = static_cast<double>(gy[i]) * (gv ? gv[i] : 1.0f);
          m1 += gxh;
          m2 += gxh * xh[i];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        auto gx = detail::grad_buffer(*px);
        for (std::int64_t i = 0; i < c; ++i) {
          const double gxh = static_cast<double>(gy[i]) * (gv ? gv[i] : 1.0f);
          gx[static_cast<std::size_t>(r * c + i)] += static_cast<float>(inv_std[static_cast<std::size_t>(r)] * (gxh - m1 - xh[i] * m2));
        }
      }
    }
  });
}

namespace {
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return detail::make_result(x.dims(), std::move(out), {x}, op, [deriv](Node& self) {
    Node* px = parent(self, 0);
    auto g = detail::grad_buffer(*px);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(px->data[i], self.data[i]);
  });
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor normalize_last(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("normalize_last needs rank >= 1");
  const std::int64_t len = x.dims().back();
  const std::int64_t rows = len == 0 ? 0 : x.numel() / len;
  const float* xp = x.values().data();
  std::vector<float> out(x.values().size(), 0.0f);
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::int64_t c = 0; c < len; ++c) ss += static_cast<double>(xp[r * len + c]) * xp[r * len + c];
    const double n = std::sqrt(ss);
    norms[static_cast<std::size_t>(r)] = n;
    if (n > 0.0)
      for (std::int64_t c = 0; c < len; ++c) out[static_cast<std::size_t>(r * len + c)] = static_cast<float>(xp[r * len + c] / n);
  }
  return detail::make_result(x.dims(), std::move(out), {x}, "normalize_last", [rows, len, norms](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    const auto& y = self.data;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double n = norms[static_cast<std::size_t>(r)];
      if (n == 0.0) continue;
      double dot = 0.0;
      for (std::int64_t c = 0; c < len; ++c) {
        const auto i = static_cast<std::size_t>(r * len + c);
        dot += static_cast<double>(self.grad[i]) * y[i];
      }
      for (std::int64_t c = 0; c < len; ++c) {
        const auto i = static_cast<std::size_t>(r * len + c);
        g[i] += static_cast<float>((self.grad[i] - y[i] * dot) / n);
      }
    }
  });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu",
      [](float v) { return 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](float v, float) {
        const float th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](float v) { return v / (1.0f + std::exp(-v)); },
      [](float v, float) {
        const float s = 1.0f / (1.0f + std::exp(-v));
        return s * (1.0f + v * (1.0f - s));
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.values()) total += v;
  return detail::make_result(Dims{}, {static_cast<float>(total)}, {x}, "sum", [](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto n = static_cast<double>(x.numel());
  if (n == 0) throw ShapeError("mean of an empty tensor");
  double total = 0.0;
  for (float v : x.values()) total += v;
  return detail::make_result(Dims{}, {static_cast<float>(total / n)}, {x}, "mean", [n](Node& self) {
    auto g = detail::grad_buffer(*parent(self, 0));
    const auto d = static_cast<float>(self.grad[0] / n);
    for (auto& v : g) v += d;
  });
}

Tensor sum_squares(const Tensor& x) {
  double total = 0.0;
  for (float v : x.values()) total += static_cast<double>(v) * v;
  return detail::make_result(Dims{}, {static_cast<float>(total)}, {x}, "sum_squares", [](Node& self) {
    Node* px = parent(self, 0);
    auto g = detail::grad_buffer(*px);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * self.grad[0] * px->data[i];
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) throw ShapeError("mse: shapes " + to_string(a.dims()) + " and " + to_string(b.dims()) + " differ");
  const auto av = a.values();
  const auto bv = b.values();
  const auto n = static_cast<double>(av.size());
  if (n == 0) throw ShapeError("mse of empty tensors");
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    total += d * d;
  }
  return detail::make_result(Dims{}, {static_cast<float>(total / n)}, {a, b}, "mse", [n](Node& self) {
    Node* pa = parent(self, 0);
    Node* pb = parent(self, 1);
    const double k = 2.0 * self.grad[0] / n;
    if (wants_grad(pa)) {
      auto g = detail::grad_buffer(*pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<float>(k * (static_cast<double>(pa->data[i]) - pb->data[i]));
    }
    if (wants_grad(pb)) {
      auto g = detail::grad_buffer(*pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= static_cast<float>(k * (static_cast<double>(pa->data[i]) - pb->data[i]));
    }
  });
}

Tensor cosine_sim(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw ShapeError("cosine_sim: shapes " + to_string(a.dims()) + " and " + to_string(b.dims()) + " differ in size");
  const auto av = a.values();
  const auto bv = b.values();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += static_cast<double>(av[i]) * bv[i];
    na += static_cast<double>(av[i]) * av[i];
    nb += static_cast<double>(bv[i]) * bv[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const bool degenerate = na == 0.0 || nb == 0.0;
  const double cos = degenerate ? 0.0 : dot / (na * nb);
  return detail::make_result(Dims{}, {static_cast<float>(cos)}, {a, b}, "cosine_sim",
                             [=](Node& self) {
    if (degenerate) return;
    Node* pa = parent(self, 0);
    Node* pb = parent(self, 1);
    const double g = self.grad[0];
    if (wants_grad(pa)) {
      auto ga = detail::grad_buffer(*pa);
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += static_cast<float>(g * (pb->data[i] / (na * nb) - cos * pa->data[i] / (na * na)));
    }
    if (wants_grad(pb)) {
      auto gb = detail::grad_buffer(*pb);
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] += static_cast<float>(g * (pa->data[i] / (na * nb) - cos * pb->data[i] / (nb * nb)));
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const Dims& qd = q.dims();
  const Dims& kd = k.dims();
  if (qd.size() < 2 || kd != v.dims() || kd.size() != qd.size())
    throw ShapeError("attention: incompatible q " + to_string(qd) + ", k " + to_string(kd) + ", v " + to_string(v.dims()));
  const std::int64_t d = qd.back();
  const std::int64_t tq = qd[qd.size() - 2];
  const std::int64_t tk = kd[kd.size() - 2];
  if (kd.back() != d || !std::equal(qd.begin(), qd.end() - 2, kd.begin()))
    throw ShapeError("attention: q " + to_string(qd) + " and k " + to_string(kd) + " disagree");
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("attention: model dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (tk == 0) throw ShapeError("attention: empty key set");
  const std::int64_t batch = product(Dims(qd.begin(), qd.end() - 2));
  const std::int64_t dh = d / heads;
  const float scl = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<float> out(static_cast<std::size_t>(batch * tq * d));
  std::vector<float> probs(static_cast<std::size_t>(batch * heads * tq * tk));
  const float* qp = q.values().data();
  const float* kp = k.values().data();
  const float* vp = v.values().data();
  RowMat s(tq, tk);
  for (std::int64_t z = 0; z < batch; ++z) {
    for (std::int64_t h = 0; h < heads; ++h) {
      StridedConst qh(qp + z * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
      StridedConst kh(kp + z * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
      StridedConst vh(vp + z * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
      s.noalias() = (qh * kh.transpose()) * scl;
      MutMap p(probs.data() + (z * heads + h) * tq * tk, tq, tk);
      for (std::int64_t r = 0; r < tq; ++r) {
        const float mx = s.row(r).maxCoeff();
        double total = 0.0;
        for (std::int64_t c = 0; c < tk; ++c) {
          const float e = std::exp(s(r, c) - mx);
          p(r, c) = e;
          total += e;
        }
        p.row(r) /= static_cast<float>(total);
      }
      StridedMut oh(out.data() + z * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
      oh.noalias() = p * vh;
    }
  }
  detail::add_flops(static_cast<std::uint64_t>(4 * batch * tq * tk * d));

  return detail::make_result(qd, std::move(out), {q, k, v}, "attention",
                             [=, probs = std::move(probs)](Node& self) {
    Node* pq = parent(self, 0);
    Node* pk = parent(self, 1);
    Node* pv = parent(self, 2);
    float* gq = wants_grad(pq) ? detail::grad_buffer(*pq).data() : nullptr;
    float* gk = wants_grad(pk) ? detail::grad_buffer(*pk).data() : nullptr;
    float* gv = wants_grad(pv) ? detail::grad_buffer(*pv).data() : nullptr;
    RowMat dp(tq, tk);
    for (std::int64_t z = 0; z < batch; ++z) {
      for (std::int64_t h = 0; h < heads; ++h) {
        StridedConst qh(pq->data.data() + z * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
        StridedConst kh(pk->data.data() + z * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
        StridedConst vh(pv->data.data() + z * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
        StridedConst go(self.grad.data() + z * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
        ConstMap p(probs.data() + (z * heads + h) * tq * tk, tq, tk);
        if (gv) {
          StridedMut g(gv + z * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
          g.noalias() += p.transpose() * go;
        }
        if (!gq && !gk) continue;
        dp.noalias() = go * vh.transpose();
        for (std::int64_t r = 0; r < tq; ++r) {
          const float dot = dp.row(r).dot(p.row(r));
          dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
        }
        if (gq) {
          StridedMut g(gq + z * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
          g.noalias() += (dp * kh) * scl;
        }
        if (gk) {
          StridedMut g(gk + z * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
          g.noalias() += (dp.transpose() * qh) * scl;
        }
      }
    }
  });
}

}  // namespace rest
