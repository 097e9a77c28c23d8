#include <Eigen/Core>

#include <cmath>
#include <limits>

#include "abm/num/autograd.hpp"

namespace abm::num {

namespace {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatrixMap = Eigen::Map<RowMatrix<Real>>;
template <typename Real>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Real>>;

void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank) {
    fail(ErrorCode::shape, std::string(op) + " expects a rank-" + std::to_string(rank) +
                               " tensor, got " + shape_string(shape));
  }
}

template <typename Real>
std::span<Real> grad_of(Node<Real>* node) {
  return node->requires_grad ? node->value.grad() : std::span<Real>{};
}

struct Dims4 {
  std::size_t n, c, h, w;
  std::size_t plane() const { return h * w; }
};

Dims4 dims4(const Shape& s) { return {s[0], s[1], s[2], s[3]}; }

// Column matrix [C*9, H*W] for a 3x3 SAME convolution of one [C, H, W] image.
template <typename Real>
void im2col3x3(const Real* image, std::size_t channels, std::size_t h, std::size_t w,
               Real* cols) {
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    const Real* src = image + c * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Real* dst = cols + ((c * 3 + ky) * 3 + kx) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 &&
                                sx < static_cast<long>(w);
            dst[y * w + x] = inside ? src[sy * static_cast<long>(w) + sx] : Real(0);
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im3x3(const Real* cols, std::size_t channels, std::size_t h, std::size_t w,
               Real* image) {
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    Real* dst = image + c * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Real* src = cols + ((c * 3 + ky) * 3 + kx) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            dst[sy * static_cast<long>(w) + sx] += src[y * w + x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
Var<Real> conv2d(const Var<Real>& input, const Var<Real>& kernels, const Var<Real>& bias) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernels.shape(), 4, "conv2d kernels");
  const Dims4 in = dims4(input.shape());
  const Shape& ks = kernels.shape();
  if (ks[2] != 3 || ks[3] != 3) {
    fail(ErrorCode::shape, "conv2d supports 3x3 kernels, got " + shape_string(ks));
  }
  if (ks[1] != in.c) {
    fail(ErrorCode::shape, "conv2d channel mismatch: input " + shape_string(input.shape()) +
                               " vs kernels " + shape_string(ks));
  }
  const std::size_t out_c = ks[0];
  if (bias.value().size() != out_c) {
    fail(ErrorCode::shape, "conv2d bias length " + std::to_string(bias.value().size()) +
                               " does not match " + std::to_string(out_c) + " output channels");
  }
  const std::size_t plane = in.plane();
  const std::size_t patch = in.c * 9;

  auto cols = std::make_shared<AlignedVector<Real>>(in.n * patch * plane);
  Tensor<Real> out(Shape{in.n, out_c, in.h, in.w});
  ConstMatrixMap<Real> k(kernels.value().raw(), out_c, patch);
  const Real* b = bias.value().raw();
  for (std::size_t n = 0; n < in.n; ++n) {
    Real* col = cols->data() + n * patch * plane;
    im2col3x3(input.value().raw() + n * in.c * plane, in.c, in.h, in.w, col);
    MatrixMap<Real> o(out.raw() + n * out_c * plane, out_c, plane);
    o.noalias() = k * ConstMatrixMap<Real>(col, patch, plane);
    for (std::size_t c = 0; c < out_c; ++c) o.row(c).array() += b[c];
  }

  return Var<Real>::make(
      std::move(out), {input, kernels, bias},
      [in, out_c, plane, patch, cols](Node<Real>& self) {
        Node<Real>* x = self.parents[0].get();
        Node<Real>* kn = self.parents[1].get();
        Node<Real>* bn = self.parents[2].get();
        const Real* dy = self.value.grad().data();
        ConstMatrixMap<Real> k(kn->value.raw(), out_c, patch);
        AlignedVector<Real> dcol(x->requires_grad ? patch * plane : 0);
        for (std::size_t n = 0; n < in.n; ++n) {
          ConstMatrixMap<Real> g(dy + n * out_c * plane, out_c, plane);
          const Real* col = cols->data() + n * patch * plane;
          if (kn->requires_grad) {
            MatrixMap<Real> dk(kn->value.grad().data(), out_c, patch);
            dk.noalias() += g * ConstMatrixMap<Real>(col, patch, plane).transpose();
          }
          if (bn->requires_grad) {
            Real* db = bn->value.grad().data();
            for (std::size_t c = 0; c < out_c; ++c) db[c] += g.row(c).sum();
          }
          if (x->requires_grad) {
            MatrixMap<Real> dc(dcol.data(), patch, plane);
            dc.noalias() = k.transpose() * g;
            col2im3x3(dcol.data(), in.c, in.h, in.w,
                      x->value.grad().data() + n * in.c * plane);
          }
        }
      });
}

template <typename Real>
Var<Real> batch_norm(const Var<Real>& input, const Var<Real>& gamma, const Var<Real>& beta,
                     BatchNormStats<Real>& stats, NormMode mode) {
  require_rank(input.shape(), 4, "batch_norm input");
  const Dims4 d = dims4(input.shape());
  if (gamma.value().size() != d.c || beta.value().size() != d.c) {
    fail(ErrorCode::shape, "batch_norm affine parameters must have " + std::to_string(d.c) +
                               " entries");
  }
  const std::size_t plane = d.plane();
  const std::size_t count = d.n * plane;
  const Real eps = static_cast<Real>(kBatchNormEpsilon);
  const Real* x = input.value().raw();

  std::vector<Real> mean(d.c), inv_std(d.c);
  const bool use_batch = mode != NormMode::eval;
  if (use_batch) {
    std::vector<Real> var(d.c);
    for (std::size_t c = 0; c < d.c; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const Real* p = x + (n * d.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const Real* p = x + (n * d.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      mean[c] = static_cast<Real>(m);
      var[c] = static_cast<Real>(sq / static_cast<double>(count));
      inv_std[c] = Real(1) / std::sqrt(var[c] + eps);
    }
    if (mode == NormMode::train) {
      const Real momentum = static_cast<Real>(kBatchNormMomentum);
      const Real unbias = count > 1 ? static_cast<Real>(count) / static_cast<Real>(count - 1)
                                    : Real(1);
      if (!stats.populated) {
        stats.running_mean.assign(d.c, Real(0));
        stats.running_var.assign(d.c, Real(1));
        stats.populated = true;
      }
      for (std::size_t c = 0; c < d.c; ++c) {
        stats.running_mean[c] = (1 - momentum) * stats.running_mean[c] + momentum * mean[c];
        stats.running_var[c] =
            (1 - momentum) * stats.running_var[c] + momentum * var[c] * unbias;
      }
    }
  } else {
    if (!stats.populated) {
      fail(ErrorCode::state, "batch_norm in eval mode needs populated running statistics");
    }
    if (stats.running_mean.size() != d.c) {
      fail(ErrorCode::shape, "batch_norm running statistics have the wrong channel count");
    }
    for (std::size_t c = 0; c < d.c; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = Real(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  auto xhat = std::make_shared<AlignedVector<Real>>(input.value().size());
  Tensor<Real> out(input.shape());
  const Real* g = gamma.value().raw();
  const Real* b = beta.value().raw();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = (n * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const Real h = (x[off + i] - mean[c]) * inv_std[c];
        (*xhat)[off + i] = h;
        out[off + i] = g[c] * h + b[c];
      }
    }
  }

  return Var<Real>::make(
      std::move(out), {input, gamma, beta},
      [d, plane, count, use_batch, xhat, inv_std](Node<Real>& self) {
        Node<Real>* xn = self.parents[0].get();
        Node<Real>* gn = self.parents[1].get();
        Node<Real>* bn = self.parents[2].get();
        const Real* dy = self.value.grad().data();
        const Real* gam = gn->value.raw();
        for (std::size_t c = 0; c < d.c; ++c) {
          Real sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < d.n; ++n) {
            const std::size_t off = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * (*xhat)[off + i];
            }
          }
          if (gn->requires_grad) gn->value.grad()[c] += sum_dy_xhat;
          if (bn->requires_grad) bn->value.grad()[c] += sum_dy;
          if (!xn->requires_grad) continue;
          Real* dx = xn->value.grad().data();
          const Real scale = gam[c] * inv_std[c];
          const Real m = static_cast<Real>(count);
          for (std::size_t n = 0; n < d.n; ++n) {
            const std::size_t off = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (use_batch) {
                dx[off + i] += scale / m *
                               (m * dy[off + i] - sum_dy - (*xhat)[off + i] * sum_dy_xhat);
              } else {
                dx[off + i] += scale * dy[off + i];
              }
            }
          }
        }
      });
}

template <typename Real>
Var<Real> relu(const Var<Real>& input) {
  const Tensor<Real>& x = input.value();
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > Real(0) ? x[i] : Real(0);
  if (DecisionTrace::active()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      word = (word << 1) | (x[i] > Real(0) ? 1U : 0U);
      if (i % 64 == 63) DecisionTrace::record(word), word = 0;
    }
    DecisionTrace::record(word);
  }
  return Var<Real>::make(std::move(out), {input}, [](Node<Real>& self) {
    Node<Real>* xn = self.parents[0].get();
    const Real* x = xn->value.raw();
    const Real* dy = self.value.grad().data();
    Real* dx = xn->value.grad().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      if (x[i] > Real(0)) dx[i] += dy[i];
    }
  });
}

template <typename Real>
Var<Real> max_pool2(const Var<Real>& input) {
  require_rank(input.shape(), 4, "max_pool2 input");
  const Dims4 d = dims4(input.shape());
  const std::size_t oh = (d.h + 1) / 2, ow = (d.w + 1) / 2;
  Tensor<Real> out(Shape{d.n, d.c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const Real* x = input.value().raw();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    const std::size_t base = nc * d.plane();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = base + 2 * y * d.w + 2 * xx;
        for (std::size_t dy = 0; dy < 2 && 2 * y + dy < d.h; ++dy) {
          for (std::size_t dx = 0; dx < 2 && 2 * xx + dx < d.w; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * d.w + 2 * xx + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        (*argmax)[o] = best;
        out[o] = x[best];
        DecisionTrace::record(best);
      }
    }
  }
  return Var<Real>::make(std::move(out), {input}, [argmax](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += dy[i];
  });
}

template <typename Real>
Var<Real> upsample_nearest(const Var<Real>& input, std::size_t height, std::size_t width) {
  require_rank(input.shape(), 4, "upsample_nearest input");
  const Dims4 d = dims4(input.shape());
  if (height < d.h || width < d.w) {
    fail(ErrorCode::shape, "upsample_nearest target " + std::to_string(height) + "x" +
                               std::to_string(width) + " is smaller than input " +
                               shape_string(input.shape()));
  }
  if (height == d.h && width == d.w) return input;
  auto source = std::make_shared<std::vector<std::size_t>>(height * width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      (*source)[i * width + j] = (i * d.h / height) * d.w + (j * d.w / width);
    }
  }
  Tensor<Real> out(Shape{d.n, d.c, height, width});
  const Real* x = input.value().raw();
  const std::size_t out_plane = height * width;
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    for (std::size_t p = 0; p < out_plane; ++p) {
      out[nc * out_plane + p] = x[nc * d.plane() + (*source)[p]];
    }
  }
  return Var<Real>::make(std::move(out), {input}, [d, source, out_plane](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
      for (std::size_t p = 0; p < out_plane; ++p) {
        dx[nc * d.plane() + (*source)[p]] += dy[nc * out_plane + p];
      }
    }
  });
}

template <typename Real>
Var<Real> concat_channels(std::span<const Var<Real>> inputs) {
  if (inputs.empty()) fail(ErrorCode::invalid_argument, "concat_channels needs inputs");
  require_rank(inputs[0].shape(), 4, "concat_channels input");
  const Dims4 first = dims4(inputs[0].shape());
  std::size_t total_c = 0;
  std::vector<std::size_t> channels;
  for (const auto& in : inputs) {
    require_rank(in.shape(), 4, "concat_channels input");
    const Dims4 d = dims4(in.shape());
    if (d.n != first.n || d.h != first.h || d.w != first.w) {
      fail(ErrorCode::shape, "concat_channels inputs disagree: " + shape_string(in.shape()) +
                                 " vs " + shape_string(inputs[0].shape()));
    }
    channels.push_back(d.c);
    total_c += d.c;
  }
  if (inputs.size() == 1) return inputs[0];
  const std::size_t plane = first.plane();
  Tensor<Real> out(Shape{first.n, total_c, first.h, first.w});
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t c0 = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Real* src = inputs[k].value().raw() + n * channels[k] * plane;
      std::copy(src, src + channels[k] * plane, out.raw() + (n * total_c + c0) * plane);
      c0 += channels[k];
    }
  }
  std::vector<Var<Real>> parents(inputs.begin(), inputs.end());
  return Var<Real>::make(
      std::move(out), std::move(parents),
      [first, total_c, channels, plane](Node<Real>& self) {
        const Real* dy = self.value.grad().data();
        for (std::size_t n = 0; n < first.n; ++n) {
          std::size_t c0 = 0;
          for (std::size_t k = 0; k < channels.size(); ++k) {
            Node<Real>* p = self.parents[k].get();
            if (p->requires_grad) {
              Real* dx = p->value.grad().data() + n * channels[k] * plane;
              const Real* src = dy + (n * total_c + c0) * plane;
              for (std::size_t i = 0; i < channels[k] * plane; ++i) dx[i] += src[i];
            }
            c0 += channels[k];
          }
        }
      });
}

template <typename Real>
Var<Real> l2_normalize_channels(const Var<Real>& input) {
  require_rank(input.shape(), 4, "l2_normalize_channels input");
  const Dims4 d = dims4(input.shape());
  const std::size_t plane = d.plane();
  const Real* x = input.value().raw();
  Tensor<Real> out(input.shape());
  auto norms = std::make_shared<AlignedVector<Real>>(d.n * plane);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 1e-12;
      for (std::size_t c = 0; c < d.c; ++c) {
        const Real v = x[(n * d.c + c) * plane + p];
        s += static_cast<double>(v) * v;
      }
      const Real norm = static_cast<Real>(std::sqrt(s));
      (*norms)[n * plane + p] = norm;
      for (std::size_t c = 0; c < d.c; ++c) {
        out[(n * d.c + c) * plane + p] = x[(n * d.c + c) * plane + p] / norm;
      }
    }
  }
  return Var<Real>::make(std::move(out), {input}, [d, plane, norms](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* y = self.value.raw();
    const Real* dy = self.value.grad().data();
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        Real dot = 0;
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t i = (n * d.c + c) * plane + p;
          dot += y[i] * dy[i];
        }
        const Real norm = (*norms)[n * plane + p];
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t i = (n * d.c + c) * plane + p;
          dx[i] += (dy[i] - y[i] * dot) / norm;
        }
      }
    }
  });
}

template <typename Real>
Var<Real> spatial_mean(const Var<Real>& input) {
  require_rank(input.shape(), 4, "spatial_mean input");
  const Dims4 d = dims4(input.shape());
  const std::size_t plane = d.plane();
  Tensor<Real> out(Shape{d.n, d.c});
  const Real* x = input.value().raw();
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += x[nc * plane + p];
    out[nc] = static_cast<Real>(s / static_cast<double>(plane));
  }
  return Var<Real>::make(std::move(out), {input}, [d, plane](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    const Real inv = Real(1) / static_cast<Real>(plane);
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
      for (std::size_t p = 0; p < plane; ++p) dx[nc * plane + p] += dy[nc] * inv;
    }
  });
}

template <typename Real>
Var<Real> gather_pixels(const Var<Real>& field, std::size_t image,
                        std::span<const std::size_t> pixels) {
  require_rank(field.shape(), 4, "gather_pixels field");
  const Dims4 d = dims4(field.shape());
  if (image >= d.n) fail(ErrorCode::invalid_argument, "gather_pixels image index out of range");
  if (pixels.empty()) fail(ErrorCode::invalid_argument, "gather_pixels needs at least one pixel");
  const std::size_t plane = d.plane();
  for (std::size_t p : pixels) {
    if (p >= plane) fail(ErrorCode::invalid_argument, "gather_pixels pixel index out of range");
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(pixels.begin(), pixels.end());
  Tensor<Real> out(Shape{pixels.size(), d.c});
  const Real* x = field.value().raw() + image * d.c * plane;
  for (std::size_t r = 0; r < idx->size(); ++r) {
    for (std::size_t c = 0; c < d.c; ++c) out[r * d.c + c] = x[c * plane + (*idx)[r]];
  }
  return Var<Real>::make(std::move(out), {field}, [d, plane, image, idx](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data() + image * d.c * plane;
    const Real* dy = self.value.grad().data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      for (std::size_t c = 0; c < d.c; ++c) dx[c * plane + (*idx)[r]] += dy[r * d.c + c];
    }
  });
}

template <typename Real>
Var<Real> neg_cosine(const Var<Real>& u, const Var<Real>& v, double eps) {
  require_rank(u.shape(), 2, "neg_cosine lhs");
  require_rank(v.shape(), 2, "neg_cosine rhs");
  const std::size_t p = u.shape()[0], q = v.shape()[0], dim = u.shape()[1];
  if (v.shape()[1] != dim) {
    fail(ErrorCode::shape, "neg_cosine feature dimensions differ: " + shape_string(u.shape()) +
                               " vs " + shape_string(v.shape()));
  }
  ConstMatrixMap<Real> um(u.value().raw(), p, dim);
  ConstMatrixMap<Real> vm(v.value().raw(), q, dim);
  using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  auto nu = std::make_shared<Vec>(um.rowwise().norm());
  auto nv = std::make_shared<Vec>(vm.rowwise().norm());
  auto dot = std::make_shared<RowMatrix<Real>>(um * vm.transpose());
  auto den = std::make_shared<RowMatrix<Real>>(*nu * nv->transpose());
  den->array() += static_cast<Real>(eps);
  Tensor<Real> out(Shape{p, q});
  MatrixMap<Real>(out.raw(), p, q) = -(dot->array() / den->array()).matrix();

  return Var<Real>::make(
      std::move(out), {u, v}, [p, q, dim, nu, nv, dot, den](Node<Real>& self) {
        Node<Real>* un = self.parents[0].get();
        Node<Real>* vn = self.parents[1].get();
        ConstMatrixMap<Real> g(self.value.grad().data(), p, q);
        ConstMatrixMap<Real> um(un->value.raw(), p, dim);
        ConstMatrixMap<Real> vm(vn->value.raw(), q, dim);
        const RowMatrix<Real> a = (g.array() / den->array()).matrix();
        // b(i,j) = g * dot / den^2
        const RowMatrix<Real> b =
            (g.array() * dot->array() / den->array().square()).matrix();
        if (un->requires_grad) {
          MatrixMap<Real> du(un->value.grad().data(), p, dim);
          du.noalias() -= a * vm;
          const Vec coef = b * *nv;
          for (std::size_t i = 0; i < p; ++i) {
            if ((*nu)(i) > Real(0)) du.row(i) += (coef(i) / (*nu)(i)) * um.row(i);
          }
        }
        if (vn->requires_grad) {
          MatrixMap<Real> dv(vn->value.grad().data(), q, dim);
          dv.noalias() -= a.transpose() * um;
          const Vec coef = b.transpose() * *nu;
          for (std::size_t j = 0; j < q; ++j) {
            if ((*nv)(j) > Real(0)) dv.row(j) += (coef(j) / (*nv)(j)) * vm.row(j);
          }
        }
      });
}

template <typename Real>
Var<Real> select_columns(const Var<Real>& matrix, std::span<const std::size_t> columns) {
  require_rank(matrix.shape(), 2, "select_columns matrix");
  const std::size_t rows = matrix.shape()[0], cols = matrix.shape()[1];
  if (columns.size() != rows) {
    fail(ErrorCode::shape, "select_columns needs one column per row");
  }
  auto chosen = std::make_shared<std::vector<std::size_t>>(columns.begin(), columns.end());
  Tensor<Real> out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if ((*chosen)[r] >= cols) fail(ErrorCode::invalid_argument, "select_columns column out of range");
    out[r] = matrix.value()[r * cols + (*chosen)[r]];
    DecisionTrace::record((*chosen)[r]);
  }
  return Var<Real>::make(std::move(out), {matrix}, [cols, chosen](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    for (std::size_t r = 0; r < chosen->size(); ++r) dx[r * cols + (*chosen)[r]] += dy[r];
  });
}

template <typename Real>
Var<Real> softmax_cross_entropy_rows(const Var<Real>& logits,
                                     std::span<const std::size_t> targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy_rows logits");
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (targets.size() != rows) fail(ErrorCode::shape, "softmax_cross_entropy_rows needs one target per row");
  auto probs = std::make_shared<AlignedVector<Real>>(rows * cols);
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  const Real* z = logits.value().raw();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if ((*tgt)[r] >= cols) fail(ErrorCode::invalid_argument, "cross-entropy target out of range");
    const Real* row = z + r * cols;
    const Real mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) {
      (*probs)[r * cols + c] = static_cast<Real>(std::exp(row[c] - lse));
    }
    total += lse - row[(*tgt)[r]];
  }
  Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(total / static_cast<double>(rows)));
  return Var<Real>::make(std::move(out), {logits}, [rows, cols, probs, tgt](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real g = self.value.grad()[0] / static_cast<Real>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const Real onehot = c == (*tgt)[r] ? Real(1) : Real(0);
        dx[r * cols + c] += g * ((*probs)[r * cols + c] - onehot);
      }
    }
  });
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  if (a.value().size() != b.value().size()) {
    fail(ErrorCode::shape, "add operands differ: " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
  }
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var<Real>::make(std::move(out), {a, b}, [](Node<Real>& self) {
    const Real* dy = self.value.grad().data();
    for (int k = 0; k < 2; ++k) {
      Node<Real>* p = self.parents[k].get();
      if (!p->requires_grad) continue;
      Real* dx = p->value.grad().data();
      for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += dy[i];
    }
  });
}

template <typename Real>
Var<Real> scale(const Var<Real>& x, double factor) {
  Tensor<Real> out(x.shape());
  const Real f = static_cast<Real>(factor);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * x.value()[i];
  return Var<Real>::make(std::move(out), {x}, [f](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += f * dy[i];
  });
}

template <typename Real>
Var<Real> mul_scalar(const Var<Real>& x, const Var<Real>& s) {
  const Real sv = s.item();
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x.value()[i];
  return Var<Real>::make(std::move(out), {x, s}, [](Node<Real>& self) {
    Node<Real>* xn = self.parents[0].get();
    Node<Real>* sn = self.parents[1].get();
    const Real* dy = self.value.grad().data();
    const Real sv = sn->value[0];
    if (xn->requires_grad) {
      Real* dx = xn->value.grad().data();
      for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += sv * dy[i];
    }
    if (sn->requires_grad) {
      Real acc = 0;
      for (std::size_t i = 0; i < self.value.size(); ++i) acc += xn->value[i] * dy[i];
      sn->value.grad()[0] += acc;
    }
  });
}

template <typename Real>
Var<Real> exp(const Var<Real>& x) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
  return Var<Real>::make(std::move(out), {x}, [](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += self.value[i] * dy[i];
  });
}

template <typename Real>
Var<Real> sum(const Var<Real>& x) {
  double s = 0.0;
  for (Real v : x.data()) s += v;
  return Var<Real>::make(Tensor<Real>::scalar(static_cast<Real>(s)), {x}, [](Node<Real>& self) {
    Node<Real>* xn = self.parents[0].get();
    const Real g = self.value.grad()[0];
    for (Real& d : xn->value.grad()) d += g;
  });
}

template <typename Real>
Var<Real> mean(const Var<Real>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

template <typename Real>
Var<Real> concat(std::span<const Var<Real>> inputs) {
  if (inputs.empty()) fail(ErrorCode::invalid_argument, "concat needs inputs");
  std::vector<Real> data;
  for (const auto& in : inputs) data.insert(data.end(), in.data().begin(), in.data().end());
  const std::size_t total = data.size();
  std::vector<Var<Real>> parents(inputs.begin(), inputs.end());
  return Var<Real>::make(Tensor<Real>(Shape{total}, std::move(data)), std::move(parents),
                         [](Node<Real>& self) {
                           const Real* dy = self.value.grad().data();
                           std::size_t off = 0;
                           for (auto& p : self.parents) {
                             const std::size_t n = p->value.size();
                             if (p->requires_grad) {
                               Real* dx = p->value.grad().data();
                               for (std::size_t i = 0; i < n; ++i) dx[i] += dy[off + i];
                             }
                             off += n;
                           }
                         });
}

template <typename Real>
Var<Real> log_softmax(const Var<Real>& x) {
  const auto v = x.data();
  const Real mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (Real e : v) s += std::exp(static_cast<double>(e - mx));
  const Real lse = static_cast<Real>(static_cast<double>(mx) + std::log(s));
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return Var<Real>::make(std::move(out), {x}, [](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    Real total = 0;
    for (std::size_t i = 0; i < self.value.size(); ++i) total += dy[i];
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      dx[i] += dy[i] - std::exp(self.value[i]) * total;
    }
  });
}

template <typename Real>
Var<Real> pick(const Var<Real>& x, std::size_t index) {
  if (index >= x.value().size()) fail(ErrorCode::invalid_argument, "pick index out of range");
  return Var<Real>::make(Tensor<Real>::scalar(x.value()[index]), {x},
                         [index](Node<Real>& self) {
                           self.parents[0]->value.grad()[index] += self.value.grad()[0];
                         });
}

template <typename Real>
Var<Real> gather_rows(const Var<Real>& matrix, std::span<const std::size_t> rows) {
  require_rank(matrix.shape(), 2, "gather_rows matrix");
  if (rows.empty()) fail(ErrorCode::invalid_argument, "gather_rows needs at least one row");
  const std::size_t n = matrix.shape()[0], cols = matrix.shape()[1];
  auto picked = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Tensor<Real> out(Shape{rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) fail(ErrorCode::invalid_argument, "gather_rows row out of range");
    std::copy_n(matrix.value().raw() + rows[r] * cols, cols, out.raw() + r * cols);
  }
  return Var<Real>::make(std::move(out), {matrix}, [cols, picked](Node<Real>& self) {
    Real* dx = self.parents[0]->value.grad().data();
    const Real* dy = self.value.grad().data();
    for (std::size_t r = 0; r < picked->size(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) dx[(*picked)[r] * cols + c] += dy[r * cols + c];
    }
  });
}

#define ABM_INSTANTIATE_OPS(Real)                                                              \
  template Var<Real> conv2d(const Var<Real>&, const Var<Real>&, const Var<Real>&);             \
  template Var<Real> batch_norm(const Var<Real>&, const Var<Real>&, const Var<Real>&,          \
                                BatchNormStats<Real>&, NormMode);                              \
  template Var<Real> relu(const Var<Real>&);                                                   \
  template Var<Real> max_pool2(const Var<Real>&);                                              \
  template Var<Real> upsample_nearest(const Var<Real>&, std::size_t, std::size_t);             \
  template Var<Real> concat_channels(std::span<const Var<Real>>);                              \
  template Var<Real> l2_normalize_channels(const Var<Real>&);                                  \
  template Var<Real> spatial_mean(const Var<Real>&);                                           \
  template Var<Real> gather_pixels(const Var<Real>&, std::size_t,                              \
                                   std::span<const std::size_t>);                              \
  template Var<Real> neg_cosine(const Var<Real>&, const Var<Real>&, double);                   \
  template Var<Real> select_columns(const Var<Real>&, std::span<const std::size_t>);           \
  template Var<Real> softmax_cross_entropy_rows(const Var<Real>&,                              \
                                                std::span<const std::size_t>);                 \
  template Var<Real> add(const Var<Real>&, const Var<Real>&);                                  \
  template Var<Real> scale(const Var<Real>&, double);                                          \
  template Var<Real> mul_scalar(const Var<Real>&, const Var<Real>&);                           \
  template Var<Real> exp(const Var<Real>&);                                                    \
  template Var<Real> sum(const Var<Real>&);                                                    \
  template Var<Real> mean(const Var<Real>&);                                                   \
  template Var<Real> concat(std::span<const Var<Real>>);                                       \
  template Var<Real> log_softmax(const Var<Real>&);                                            \
  template Var<Real> pick(const Var<Real>&, std::size_t);                                      \
  template Var<Real> gather_rows(const Var<Real>&, std::span<const std::size_t>);

ABM_INSTANTIATE_OPS(float)
ABM_INSTANTIATE_OPS(double)

}  // namespace abm::num
