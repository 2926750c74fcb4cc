#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "sgla/autodiff.hpp"
#include "sgla/common.hpp"
#include "sgla/tensor.hpp"

// Differentiable kernels. Conventions shared by every op:
//   - outputs are freshly allocated; inputs are never written
//   - image tensors are [batch, channel, height, width]
//   - conv/pool padding is zero padding (max_pool pads with -inf, i.e. padded
//     positions never win)
//   - relu passes gradient only where the input is strictly positive
//   - max ties resolve to the lowest flat index / first operand
//   - reductions run in row-major order so results are reproducible bit for
//     bit; parallel paths keep the same per-coordinate order

namespace sgla {

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* who) {
    require(t.rank() == 4, std::string(who) + ": expected rank-4 input, got rank " +
                               std::to_string(t.rank()));
}

}  // namespace detail

// -------------------- elementwise --------------------

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const T* in = x.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = in[i] > T{0} ? in[i] : T{0};
    return Var<T>::make("relu", std::move(out), {x},
                        [x](typename Var<T>::Node& self) mutable {
                            Tensor<T> gx(x.shape());
                            const T* in = x.value().data();
                            const T* up = self.grad.data();
                            T* g = gx.data();
                            for (std::size_t i = 0; i < gx.numel(); ++i) {
                                g[i] = in[i] > T{0} ? up[i] : T{0};
                            }
                            x.accumulate_grad(gx);
                        });
}

template <typename T>
Var<T> tanh_op(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const T* in = x.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = std::tanh(in[i]);
    return Var<T>::make("tanh", std::move(out), {x},
                        [x](typename Var<T>::Node& self) mutable {
                            Tensor<T> gx(x.shape());
                            const T* y = self.value.data();
                            const T* up = self.grad.data();
                            T* g = gx.data();
                            for (std::size_t i = 0; i < gx.numel(); ++i) {
                                g[i] = up[i] * (T{1} - y[i] * y[i]);
                            }
                            x.accumulate_grad(gx);
                        });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require(a.value().same_shape(b.value()),
                    "add: shapes " + Tensor<T>::shape_string(a.shape()) + " vs " +
                        Tensor<T>::shape_string(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = pa[i] + pb[i];
    return Var<T>::make("add", std::move(out), {a, b},
                        [a, b](typename Var<T>::Node& self) mutable {
                            a.accumulate_grad(self.grad);
                            b.accumulate_grad(self.grad);
                        });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out(x.shape());
    const T* in = x.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = factor * in[i];
    return Var<T>::make("scale", std::move(out), {x},
                        [x, factor](typename Var<T>::Node& self) mutable {
                            Tensor<T> gx(x.shape());
                            const T* up = self.grad.data();
                            T* g = gx.data();
                            for (std::size_t i = 0; i < gx.numel(); ++i) g[i] = factor * up[i];
                            x.accumulate_grad(gx);
                        });
}

// Elementwise max of two same-shaped tensors; ties take the first operand.
template <typename T>
Var<T> elem_max(const Var<T>& a, const Var<T>& b) {
    detail::require(a.value().same_shape(b.value()),
                    "elem_max: shapes " + Tensor<T>::shape_string(a.shape()) + " vs " +
                        Tensor<T>::shape_string(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] = pa[i] >= pb[i] ? pa[i] : pb[i];
    return Var<T>::make("elem_max", std::move(out), {a, b},
                        [a, b](typename Var<T>::Node& self) mutable {
                            Tensor<T> ga(a.shape());
                            Tensor<T> gb(b.shape());
                            const T* pa = a.value().data();
                            const T* pb = b.value().data();
                            const T* up = self.grad.data();
                            for (std::size_t i = 0; i < ga.numel(); ++i) {
                                if (pa[i] >= pb[i]) {
                                    ga[i] = up[i];
                                } else {
                                    gb[i] = up[i];
                                }
                            }
                            a.accumulate_grad(ga);
                            b.accumulate_grad(gb);
                        });
}

// -------------------- broadcasting multiply --------------------

namespace detail {

inline std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                                const std::vector<std::size_t>& b) {
    require(a.size() == b.size(), "broadcast_mul: operands must have equal rank");
    std::vector<std::size_t> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else {
            throw ShapeError("broadcast_mul: axis " + std::to_string(i) + " has extents " +
                             std::to_string(a[i]) + " vs " + std::to_string(b[i]));
        }
    }
    return out;
}

// Row-major strides with 0 on broadcast (size-1) axes.
inline std::vector<std::size_t> broadcast_strides(const std::vector<std::size_t>& shape,
                                                  const std::vector<std::size_t>& out) {
    std::vector<std::size_t> strides(shape.size());
    std::size_t s = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[i] = (shape[i] == 1 && out[i] != 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

// Iterates the output of a broadcast op in row-major order, invoking
// fn(out_flat, a_flat, b_flat).
template <typename Fn>
void broadcast_walk(const std::vector<std::size_t>& out_shape,
                    const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                    Fn&& fn) {
    const std::size_t rank = out_shape.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t total = 1;
    for (std::size_t e : out_shape) total *= e;
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        fn(flat, ia, ib);
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < out_shape[ax]) break;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

}  // namespace detail

// Multiplies with size-1 axes expanded; both operands must share rank.
template <typename T>
Var<T> broadcast_mul(const Var<T>& a, const Var<T>& b) {
    const auto out_shape = detail::broadcast_shape(a.shape(), b.shape());
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    Tensor<T> out(out_shape);
    {
        const T* pa = a.value().data();
        const T* pb = b.value().data();
        T* o = out.data();
        detail::broadcast_walk(out_shape, sa, sb,
                               [&](std::size_t io, std::size_t ia, std::size_t ib) {
                                   o[io] = pa[ia] * pb[ib];
                               });
    }
    return Var<T>::make(
        "broadcast_mul", std::move(out), {a, b},
        [a, b, out_shape, sa, sb](typename Var<T>::Node& self) mutable {
            const T* up = self.grad.data();
            const T* pa = a.value().data();
            const T* pb = b.value().data();
            if (a.requires_grad()) {
                Tensor<T> ga(a.shape());
                T* g = ga.data();
                detail::broadcast_walk(out_shape, sa, sb,
                                       [&](std::size_t io, std::size_t ia, std::size_t ib) {
                                           g[ia] += up[io] * pb[ib];
                                       });
                a.accumulate_grad(ga);
            }
            if (b.requires_grad()) {
                Tensor<T> gb(b.shape());
                T* g = gb.data();
                detail::broadcast_walk(out_shape, sa, sb,
                                       [&](std::size_t io, std::size_t ia, std::size_t ib) {
                                           g[ib] += up[io] * pa[ia];
                                       });
                b.accumulate_grad(gb);
            }
        });
}

// -------------------- shape ops --------------------

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<std::size_t> new_shape) {
    Tensor<T> out(new_shape, x.value().vec());
    detail::require(out.numel() == x.numel(), "reshape: element count must be preserved");
    return Var<T>::make("reshape", std::move(out), {x},
                        [x](typename Var<T>::Node& self) mutable {
                            x.accumulate_grad(Tensor<T>(x.shape(), self.grad.vec()));
                        });
}

namespace detail {

template <typename T>
struct ConcatLayout {
    std::vector<std::size_t> out_shape;
    std::size_t outer = 1;   // product of extents before the axis
    std::size_t inner = 1;   // product of extents after the axis
    std::vector<std::size_t> blocks;  // per input: extent_on_axis * inner
};

template <typename T>
ConcatLayout<T> concat_layout(std::size_t axis, const std::vector<Var<T>>& parts) {
    require(!parts.empty(), "concat: needs at least one input");
    const auto& first = parts.front().shape();
    require(axis < first.size(), "concat: axis out of range");
    ConcatLayout<T> layout;
    layout.out_shape = first;
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        require(s.size() == first.size(), "concat: rank mismatch between inputs");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis) {
                require(s[i] == first[i], "concat: extent mismatch on axis " + std::to_string(i));
            }
        }
        total_axis += s[axis];
    }
    layout.out_shape[axis] = total_axis;
    for (std::size_t i = 0; i < axis; ++i) layout.outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) layout.inner *= first[i];
    for (const auto& p : parts) layout.blocks.push_back(p.shape()[axis] * layout.inner);
    return layout;
}

}  // namespace detail

template <typename T>
Var<T> concat(std::size_t axis, const std::vector<Var<T>>& parts) {
    if (parts.size() == 1) {
        // still a real node so backward routes through the same path
        const Var<T>& x = parts.front();
        return Var<T>::make("concat", Tensor<T>(x.shape(), x.value().vec()), {x},
                            [x](typename Var<T>::Node& self) mutable {
                                x.accumulate_grad(self.grad);
                            });
    }
    auto layout = detail::concat_layout(axis, parts);
    Tensor<T> out(layout.out_shape);
    std::size_t out_stride = out.numel() / layout.outer;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const T* src = parts[k].value().data();
        for (std::size_t o = 0; o < layout.outer; ++o) {
            std::copy(src + o * layout.blocks[k], src + (o + 1) * layout.blocks[k],
                      out.data() + o * out_stride + offset);
        }
        offset += layout.blocks[k];
    }
    return Var<T>::make(
        "concat", std::move(out), parts,
        [parts, layout, out_stride](typename Var<T>::Node& self) mutable {
            const T* up = self.grad.data();
            std::size_t offset = 0;
            for (std::size_t k = 0; k < parts.size(); ++k) {
                if (parts[k].requires_grad()) {
                    Tensor<T> g(parts[k].shape());
                    for (std::size_t o = 0; o < layout.outer; ++o) {
                        std::copy(up + o * out_stride + offset,
                                  up + o * out_stride + offset + layout.blocks[k],
                                  g.data() + o * layout.blocks[k]);
                    }
                    parts[k].accumulate_grad(g);
                }
                offset += layout.blocks[k];
            }
        });
}

// Concatenation along the channel axis of [n,c,...] tensors.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    return concat(1, parts);
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    const auto& shape = x.shape();
    detail::require(axis < shape.size(), "slice: axis out of range");
    detail::require(len >= 1 && start + len <= shape[axis], "slice: range out of bounds");
    std::vector<std::size_t> out_shape = shape;
    out_shape[axis] = len;
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    Tensor<T> out(out_shape);
    const std::size_t in_stride = shape[axis] * inner;
    const std::size_t out_stride = len * inner;
    const T* src = x.value().data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy(src + o * in_stride + start * inner, src + o * in_stride + (start + len) * inner,
                  out.data() + o * out_stride);
    }
    return Var<T>::make(
        "slice", std::move(out), {x},
        [x, outer, inner, in_stride, out_stride, start](typename Var<T>::Node& self) mutable {
            Tensor<T> g(x.shape());
            const T* up = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy(up + o * out_stride, up + (o + 1) * out_stride,
                          g.data() + o * in_stride + start * inner);
            }
            x.accumulate_grad(g);
        });
}

// -------------------- pooling & means --------------------

// Mean over each h x w plane -> [n,c,1,1].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    detail::require_rank4(x.value(), "global_avg_pool");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    Tensor<T> out({n, c, 1, 1});
    const T* in = x.value().data();
    for (std::size_t i = 0; i < n * c; ++i) {
        T acc = 0;
        const T* p = in + i * plane;
        for (std::size_t k = 0; k < plane; ++k) acc += p[k];
        out[i] = acc / static_cast<T>(plane);
    }
    return Var<T>::make("global_avg_pool", std::move(out), {x},
                        [x, n, c, plane](typename Var<T>::Node& self) mutable {
                            Tensor<T> g(x.shape());
                            const T* up = self.grad.data();
                            for (std::size_t i = 0; i < n * c; ++i) {
                                const T v = up[i] / static_cast<T>(plane);
                                T* p = g.data() + i * plane;
                                for (std::size_t k = 0; k < plane; ++k) p[k] = v;
                            }
                            x.accumulate_grad(g);
                        });
}

// Mean across channels at each spatial site -> [n,1,h,w].
template <typename T>
Var<T> channel_mean(const Var<T>& x) {
    detail::require_rank4(x.value(), "channel_mean");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    Tensor<T> out({n, 1, s[2], s[3]});
    const T* in = x.value().data();
    for (std::size_t i = 0; i < n; ++i) {
        T* o = out.data() + i * plane;
        const T* base = in + i * c * plane;
        for (std::size_t k = 0; k < plane; ++k) {
            T acc = 0;
            for (std::size_t ch = 0; ch < c; ++ch) acc += base[ch * plane + k];
            o[k] = acc / static_cast<T>(c);
        }
    }
    return Var<T>::make("channel_mean", std::move(out), {x},
                        [x, n, c, plane](typename Var<T>::Node& self) mutable {
                            Tensor<T> g(x.shape());
                            const T* up = self.grad.data();
                            for (std::size_t i = 0; i < n; ++i) {
                                const T* u = up + i * plane;
                                T* base = g.data() + i * c * plane;
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                    for (std::size_t k = 0; k < plane; ++k) {
                                        base[ch * plane + k] = u[k] / static_cast<T>(c);
                                    }
                                }
                            }
                            x.accumulate_grad(g);
                        });
}

template <typename T>
Var<T> max_pool(const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad = 0) {
    detail::require_rank4(x.value(), "max_pool");
    detail::require(k >= 1 && stride >= 1, "max_pool: kernel and stride must be >= 1");
    detail::require(pad < k, "max_pool: pad must be smaller than the kernel");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
    detail::require(h + 2 * pad >= k && w + 2 * pad >= k,
                    "max_pool: kernel larger than padded input");
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (w + 2 * pad - k) / stride + 1;
    Tensor<T> out({n, c, oh, ow});
    std::vector<std::size_t> argmax(out.numel());
    const T* in = x.value().data();
    for (std::size_t img = 0; img < n * c; ++img) {
        const T* plane = in + img * h * w;
        T* o = out.data() + img * oh * ow;
        std::size_t* am = argmax.data() + img * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_idx = 0;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const long ix =
                            static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const std::size_t idx = static_cast<std::size_t>(iy) * w +
                                                static_cast<std::size_t>(ix);
                        if (plane[idx] > best) {  // strict: first max wins
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                o[oy * ow + ox] = best;
                am[oy * ow + ox] = best_idx;
            }
        }
    }
    return Var<T>::make("max_pool", std::move(out), {x},
                        [x, argmax = std::move(argmax), n, c, h, w, oh,
                         ow](typename Var<T>::Node& self) mutable {
                            Tensor<T> g(x.shape());
                            const T* up = self.grad.data();
                            for (std::size_t img = 0; img < n * c; ++img) {
                                T* plane = g.data() + img * h * w;
                                const T* u = up + img * oh * ow;
                                const std::size_t* am = argmax.data() + img * oh * ow;
                                for (std::size_t o = 0; o < oh * ow; ++o) plane[am[o]] += u[o];
                            }
                            x.accumulate_grad(g);
                        });
}

// -------------------- linear --------------------

// y[i,j] = sum_d x[i,d] * w[j,d] + b[j]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    detail::require(x.value().rank() == 2, "linear: input must be [n,d]");
    detail::require(weight.value().rank() == 2, "linear: weight must be [k,d]");
    const std::size_t n = x.shape()[0], d = x.shape()[1], k = weight.shape()[0];
    detail::require(weight.shape()[1] == d,
                    "linear: weight inner extent " + std::to_string(weight.shape()[1]) +
                        " does not match input features " + std::to_string(d));
    detail::require(bias.value().rank() == 1 && bias.shape()[0] == k,
                    "linear: bias must be [k]");
    Tensor<T> out({n, k});
    const T* px = x.value().data();
    const T* pw = weight.value().data();
    const T* pb = bias.value().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            T acc = 0;
            const T* xr = px + i * d;
            const T* wr = pw + j * d;
            for (std::size_t e = 0; e < d; ++e) acc += xr[e] * wr[e];
            out[i * k + j] = acc + pb[j];
        }
    }
    return Var<T>::make(
        "linear", std::move(out), {x, weight, bias},
        [x, weight, bias, n, d, k](typename Var<T>::Node& self) mutable {
            const T* up = self.grad.data();
            const T* px = x.value().data();
            const T* pw = weight.value().data();
            if (x.requires_grad()) {
                Tensor<T> gx({n, d});
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const T u = up[i * k + j];
                        const T* wr = pw + j * d;
                        T* gr = gx.data() + i * d;
                        for (std::size_t e = 0; e < d; ++e) gr[e] += u * wr[e];
                    }
                }
                x.accumulate_grad(gx);
            }
            if (weight.requires_grad()) {
                Tensor<T> gw({k, d});
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const T u = up[i * k + j];
                        const T* xr = px + i * d;
                        T* gr = gw.data() + j * d;
                        for (std::size_t e = 0; e < d; ++e) gr[e] += u * xr[e];
                    }
                }
                weight.accumulate_grad(gw);
            }
            if (bias.requires_grad()) {
                Tensor<T> gb({k});
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) gb[j] += up[i * k + j];
                }
                bias.accumulate_grad(gb);
            }
        });
}

// -------------------- conv2d --------------------

namespace detail {

struct ConvDims {
    std::size_t n, ci, h, w, co, kh, kw, oh, ow, stride, pad;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride,
                   std::size_t pad) {
    require_rank4(x, "conv2d");
    require(weight.rank() == 4, "conv2d: weight must be [co,ci,kh,kw]");
    require(stride >= 1, "conv2d: stride must be >= 1");
    ConvDims d{};
    d.n = x.extent(0);
    d.ci = x.extent(1);
    d.h = x.extent(2);
    d.w = x.extent(3);
    d.co = weight.extent(0);
    d.kh = weight.extent(2);
    d.kw = weight.extent(3);
    d.stride = stride;
    d.pad = pad;
    if (weight.extent(1) != d.ci) {
        throw ShapeError("conv2d: channel axis mismatch, input has " + std::to_string(d.ci) +
                         " channels but weight expects " + std::to_string(weight.extent(1)));
    }
    if (d.h + 2 * pad < d.kh) {
        throw ShapeError("conv2d: height axis too small, " + std::to_string(d.h) + "+2*" +
                         std::to_string(pad) + " < kernel " + std::to_string(d.kh));
    }
    if (d.w + 2 * pad < d.kw) {
        throw ShapeError("conv2d: width axis too small, " + std::to_string(d.w) + "+2*" +
                         std::to_string(pad) + " < kernel " + std::to_string(d.kw));
    }
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// Valid output range [lo, hi) for one kernel offset: 0 <= ox*stride + k - pad < extent.
inline void conv_span(std::size_t k, std::size_t pad, std::size_t stride, std::size_t extent,
                      std::size_t out_extent, std::size_t& lo, std::size_t& hi) {
    const long shift = static_cast<long>(k) - static_cast<long>(pad);
    long lo_l = 0;
    if (shift < 0) lo_l = (-shift + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long hi_l = static_cast<long>(out_extent);
    const long limit = static_cast<long>(extent) - shift;  // ox*stride < limit
    if (limit <= 0) {
        hi_l = lo_l;
    } else {
        hi_l = std::min<long>(hi_l, (limit + static_cast<long>(stride) - 1) /
                                        static_cast<long>(stride));
    }
    lo = static_cast<std::size_t>(std::max<long>(lo_l, 0));
    hi = static_cast<std::size_t>(std::max<long>(hi_l, lo_l));
}

template <typename T>
void conv_forward_item(const ConvDims& d, const T* x, const T* w, const T* b, T* out) {
    for (std::size_t oc = 0; oc < d.co; ++oc) {
        T* oplane = out + oc * d.oh * d.ow;
        const T bias = b ? b[oc] : T{0};
        for (std::size_t i = 0; i < d.oh * d.ow; ++i) oplane[i] = bias;
        for (std::size_t ic = 0; ic < d.ci; ++ic) {
            const T* xplane = x + ic * d.h * d.w;
            const T* wbase = w + (oc * d.ci + ic) * d.kh * d.kw;
            for (std::size_t ky = 0; ky < d.kh; ++ky) {
                std::size_t oy_lo, oy_hi;
                conv_span(ky, d.pad, d.stride, d.h, d.oh, oy_lo, oy_hi);
                for (std::size_t kx = 0; kx < d.kw; ++kx) {
                    const T wv = wbase[ky * d.kw + kx];
                    if (wv == T{0}) continue;
                    std::size_t ox_lo, ox_hi;
                    conv_span(kx, d.pad, d.stride, d.w, d.ow, ox_lo, ox_hi);
                    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                        const std::size_t iy = oy * d.stride + ky - d.pad;
                        const T* xrow = xplane + iy * d.w;
                        T* orow = oplane + oy * d.ow;
                        std::size_t ix = ox_lo * d.stride + kx - d.pad;
                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox, ix += d.stride) {
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
    const auto d = detail::conv_dims(x.value(), weight.value(), stride, pad);
    const bool has_bias = bias.valid();
    if (has_bias) {
        detail::require(bias.value().rank() == 1 && bias.shape()[0] == d.co,
                        "conv2d: bias must be [co]");
    }
    Tensor<T> out({d.n, d.co, d.oh, d.ow});
    {
        const T* px = x.value().data();
        const T* pw = weight.value().data();
        const T* pb = has_bias ? bias.value().data() : nullptr;
        T* po = out.data();
        parallel_for(d.n, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                detail::conv_forward_item(d, px + i * d.ci * d.h * d.w, pw, pb,
                                          po + i * d.co * d.oh * d.ow);
            }
        });
    }
    std::vector<Var<T>> parents = has_bias ? std::vector<Var<T>>{x, weight, bias}
                                           : std::vector<Var<T>>{x, weight};
    return Var<T>::make(
        "conv2d", std::move(out), std::move(parents),
        [x, weight, bias, has_bias, d](typename Var<T>::Node& self) mutable {
            const T* up = self.grad.data();
            const T* px = x.value().data();
            const T* pw = weight.value().data();
            const std::size_t in_item = d.ci * d.h * d.w;
            const std::size_t out_item = d.co * d.oh * d.ow;
            if (x.requires_grad()) {
                Tensor<T> gx(x.shape());
                T* pg = gx.data();
                parallel_for(d.n, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t i = begin; i < end; ++i) {
                        const T* uitem = up + i * out_item;
                        T* gitem = pg + i * in_item;
                        for (std::size_t oc = 0; oc < d.co; ++oc) {
                            const T* uplane = uitem + oc * d.oh * d.ow;
                            for (std::size_t ic = 0; ic < d.ci; ++ic) {
                                T* gplane = gitem + ic * d.h * d.w;
                                const T* wbase = pw + (oc * d.ci + ic) * d.kh * d.kw;
                                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                                    std::size_t oy_lo, oy_hi;
                                    detail::conv_span(ky, d.pad, d.stride, d.h, d.oh, oy_lo, oy_hi);
                                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                        const T wv = wbase[ky * d.kw + kx];
                                        if (wv == T{0}) continue;
                                        std::size_t ox_lo, ox_hi;
                                        detail::conv_span(kx, d.pad, d.stride, d.w, d.ow, ox_lo,
                                                          ox_hi);
                                        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                                            const std::size_t iy = oy * d.stride + ky - d.pad;
                                            T* grow = gplane + iy * d.w;
                                            const T* urow = uplane + oy * d.ow;
                                            std::size_t ix = ox_lo * d.stride + kx - d.pad;
                                            for (std::size_t ox = ox_lo; ox < ox_hi;
                                                 ++ox, ix += d.stride) {
                                                grow[ix] += wv * urow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                x.accumulate_grad(gx);
            }
            if (weight.requires_grad()) {
                Tensor<T> gw(weight.shape());
                T* pg = gw.data();
                // parallel over output channels; per-coordinate accumulation
                // stays in (item, oy, ox) order
                parallel_for(d.co, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t oc = begin; oc < end; ++oc) {
                        for (std::size_t i = 0; i < d.n; ++i) {
                            const T* uplane = up + (i * d.co + oc) * d.oh * d.ow;
                            const T* xitem = px + i * in_item;
                            for (std::size_t ic = 0; ic < d.ci; ++ic) {
                                const T* xplane = xitem + ic * d.h * d.w;
                                T* gbase = pg + (oc * d.ci + ic) * d.kh * d.kw;
                                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                                    std::size_t oy_lo, oy_hi;
                                    detail::conv_span(ky, d.pad, d.stride, d.h, d.oh, oy_lo, oy_hi);
                                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                        std::size_t ox_lo, ox_hi;
                                        detail::conv_span(kx, d.pad, d.stride, d.w, d.ow, ox_lo,
                                                          ox_hi);
                                        T acc = 0;
                                        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                                            const std::size_t iy = oy * d.stride + ky - d.pad;
                                            const T* xrow = xplane + iy * d.w;
                                            const T* urow = uplane + oy * d.ow;
                                            std::size_t ix = ox_lo * d.stride + kx - d.pad;
                                            for (std::size_t ox = ox_lo; ox < ox_hi;
                                                 ++ox, ix += d.stride) {
                                                acc += urow[ox] * xrow[ix];
                                            }
                                        }
                                        gbase[ky * d.kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                weight.accumulate_grad(gw);
            }
            if (has_bias && bias.requires_grad()) {
                Tensor<T> gb({d.co});
                for (std::size_t i = 0; i < d.n; ++i) {
                    for (std::size_t oc = 0; oc < d.co; ++oc) {
                        const T* uplane = up + (i * d.co + oc) * d.oh * d.ow;
                        T acc = 0;
                        for (std::size_t o = 0; o < d.oh * d.ow; ++o) acc += uplane[o];
                        gb[oc] += acc;
                    }
                }
                bias.accumulate_grad(gb);
            }
        });
}

// Bias-free variant (the attention bottleneck convolutions carry none).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, std::size_t stride, std::size_t pad) {
    return conv2d(x, weight, Var<T>{}, stride, pad);
}

// -------------------- loss & reductions --------------------

// Mean over the batch of -log softmax(logits)[label], stabilized by
// per-row max subtraction.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    detail::require(logits.value().rank() == 2, "softmax_cross_entropy: logits must be [n,K]");
    const std::size_t n = logits.shape()[0], K = logits.shape()[1];
    detail::require(labels.size() == n, "softmax_cross_entropy: one label per row required");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) {
            throw DataError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                            " out of range [0," + std::to_string(K) + ") at row " +
                            std::to_string(i));
        }
    }
    Tensor<T> probs({n, K});
    const T* in = logits.value().data();
    T loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = in + i * K;
        T m = row[0];
        for (std::size_t j = 1; j < K; ++j) m = std::max(m, row[j]);
        T z = 0;
        for (std::size_t j = 0; j < K; ++j) z += std::exp(row[j] - m);
        const T logz = std::log(z);
        for (std::size_t j = 0; j < K; ++j) {
            probs[i * K + j] = std::exp(row[j] - m) / z;
        }
        loss += -(row[static_cast<std::size_t>(labels[i])] - m - logz);
    }
    loss /= static_cast<T>(n);
    return Var<T>::make("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits},
                        [logits, probs = std::move(probs), labels, n,
                         K](typename Var<T>::Node& self) mutable {
                            const T u = self.grad[0];
                            Tensor<T> g({n, K});
                            for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t j = 0; j < K; ++j) {
                                    T v = probs[i * K + j];
                                    if (j == static_cast<std::size_t>(labels[i])) v -= T{1};
                                    g[i * K + j] = u * v / static_cast<T>(n);
                                }
                            }
                            logits.accumulate_grad(g);
                        });
}

// Fixed-weight contraction to a scalar; the gradient checker uses it to
// scalarize tensor-valued ops.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
    detail::require(x.value().same_shape(weights), "weighted_sum: weight shape mismatch");
    T acc = 0;
    const T* in = x.value().data();
    const T* w = weights.data();
    for (std::size_t i = 0; i < x.numel(); ++i) acc += in[i] * w[i];
    return Var<T>::make("weighted_sum", Tensor<T>::scalar(acc), {x},
                        [x, weights](typename Var<T>::Node& self) mutable {
                            Tensor<T> g(x.shape());
                            const T u = self.grad[0];
                            const T* w = weights.data();
                            for (std::size_t i = 0; i < g.numel(); ++i) g[i] = u * w[i];
                            x.accumulate_grad(g);
                        });
}

// -------------------- spatial transformer kernels --------------------

// theta rows are (s_h, s_w, t_x, t_y): a lattice point (u,v) over [-1,1]^2
// maps to source coordinates x = s_w*u + t_x, y = s_h*v + t_y. A 1x1 lattice
// collapses to the single point (0,0).
template <typename T>
Var<T> affine_grid(const Var<T>& theta, std::size_t out_h, std::size_t out_w) {
    detail::require(theta.value().rank() == 2 && theta.shape()[1] == 4,
                    "affine_grid: theta must be [n,4]");
    detail::require(out_h >= 1 && out_w >= 1, "affine_grid: output extents must be >= 1");
    const std::size_t n = theta.shape()[0];
    Tensor<T> grid({n, out_h, out_w, 2});
    const T* th = theta.value().data();
    auto lattice = [](std::size_t i, std::size_t extent) -> T {
        if (extent == 1) return T{0};
        return T{-1} + T{2} * static_cast<T>(i) / static_cast<T>(extent - 1);
    };
    for (std::size_t i = 0; i < n; ++i) {
        const T s_h = th[i * 4 + 0], s_w = th[i * 4 + 1];
        const T t_x = th[i * 4 + 2], t_y = th[i * 4 + 3];
        T* g = grid.data() + i * out_h * out_w * 2;
        for (std::size_t r = 0; r < out_h; ++r) {
            const T v = lattice(r, out_h);
            for (std::size_t col = 0; col < out_w; ++col) {
                const T u = lattice(col, out_w);
                g[(r * out_w + col) * 2 + 0] = s_w * u + t_x;
                g[(r * out_w + col) * 2 + 1] = s_h * v + t_y;
            }
        }
    }
    return Var<T>::make(
        "affine_grid", std::move(grid), {theta},
        [theta, n, out_h, out_w, lattice](typename Var<T>::Node& self) mutable {
            Tensor<T> gt({n, 4});
            const T* up = self.grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                T g_sh = 0, g_sw = 0, g_tx = 0, g_ty = 0;
                const T* u = up + i * out_h * out_w * 2;
                for (std::size_t r = 0; r < out_h; ++r) {
                    const T v = lattice(r, out_h);
                    for (std::size_t col = 0; col < out_w; ++col) {
                        const T uu = lattice(col, out_w);
                        const T ux = u[(r * out_w + col) * 2 + 0];
                        const T uy = u[(r * out_w + col) * 2 + 1];
                        g_sw += ux * uu;
                        g_tx += ux;
                        g_sh += uy * v;
                        g_ty += uy;
                    }
                }
                gt[i * 4 + 0] = g_sh;
                gt[i * 4 + 1] = g_sw;
                gt[i * 4 + 2] = g_tx;
                gt[i * 4 + 3] = g_ty;
            }
            theta.accumulate_grad(gt);
        });
}

// Bilinear sampling with the align-corners convention (-1 -> 0, +1 -> extent-1)
// and zero padding: neighbors outside the image contribute 0.
template <typename T>
Var<T> bilinear_sample(const Var<T>& x, const Var<T>& grid) {
    detail::require_rank4(x.value(), "bilinear_sample");
    detail::require(grid.value().rank() == 4 && grid.shape()[3] == 2,
                    "bilinear_sample: grid must be [n,oh,ow,2]");
    detail::require(grid.shape()[0] == x.shape()[0],
                    "bilinear_sample: batch axis mismatch between grid and input");
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t oh = grid.shape()[1], ow = grid.shape()[2];
    Tensor<T> out({n, c, oh, ow});
    const T* px = x.value().data();
    const T* pg = grid.value().data();

    auto corner = [](T coord, std::size_t extent) -> T {
        return (coord + T{1}) / T{2} * static_cast<T>(extent - 1);
    };

    for (std::size_t i = 0; i < n; ++i) {
        const T* g = pg + i * oh * ow * 2;
        const T* xitem = px + i * c * h * w;
        T* oitem = out.data() + i * c * oh * ow;
        for (std::size_t s = 0; s < oh * ow; ++s) {
            const T fx = corner(g[s * 2 + 0], w);
            const T fy = corner(g[s * 2 + 1], h);
            const long x0 = static_cast<long>(std::floor(fx));
            const long y0 = static_cast<long>(std::floor(fy));
            const T wx = fx - static_cast<T>(x0);
            const T wy = fy - static_cast<T>(y0);
            const bool in_x0 = x0 >= 0 && x0 < static_cast<long>(w);
            const bool in_x1 = x0 + 1 >= 0 && x0 + 1 < static_cast<long>(w);
            const bool in_y0 = y0 >= 0 && y0 < static_cast<long>(h);
            const bool in_y1 = y0 + 1 >= 0 && y0 + 1 < static_cast<long>(h);
            const T w00 = (T{1} - wx) * (T{1} - wy);
            const T w01 = wx * (T{1} - wy);
            const T w10 = (T{1} - wx) * wy;
            const T w11 = wx * wy;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T* plane = xitem + ch * h * w;
                T acc = 0;
                if (in_y0 && in_x0) acc += w00 * plane[y0 * w + x0];
                if (in_y0 && in_x1) acc += w01 * plane[y0 * w + x0 + 1];
                if (in_y1 && in_x0) acc += w10 * plane[(y0 + 1) * w + x0];
                if (in_y1 && in_x1) acc += w11 * plane[(y0 + 1) * w + x0 + 1];
                oitem[ch * oh * ow + s] = acc;
            }
        }
    }
    return Var<T>::make(
        "bilinear_sample", std::move(out), {x, grid},
        [x, grid, n, c, h, w, oh, ow, corner](typename Var<T>::Node& self) mutable {
            const T* up = self.grad.data();
            const T* px = x.value().data();
            const T* pg = grid.value().data();
            const bool need_x = x.requires_grad();
            const bool need_g = grid.requires_grad();
            Tensor<T> gx = need_x ? Tensor<T>(x.shape()) : Tensor<T>();
            Tensor<T> gg = need_g ? Tensor<T>(grid.shape()) : Tensor<T>();
            for (std::size_t i = 0; i < n; ++i) {
                const T* g = pg + i * oh * ow * 2;
                const T* xitem = px + i * c * h * w;
                const T* uitem = up + i * c * oh * ow;
                for (std::size_t s = 0; s < oh * ow; ++s) {
                    const T fx = corner(g[s * 2 + 0], w);
                    const T fy = corner(g[s * 2 + 1], h);
                    const long x0 = static_cast<long>(std::floor(fx));
                    const long y0 = static_cast<long>(std::floor(fy));
                    const T wx = fx - static_cast<T>(x0);
                    const T wy = fy - static_cast<T>(y0);
                    const bool in_x0 = x0 >= 0 && x0 < static_cast<long>(w);
                    const bool in_x1 = x0 + 1 >= 0 && x0 + 1 < static_cast<long>(w);
                    const bool in_y0 = y0 >= 0 && y0 < static_cast<long>(h);
                    const bool in_y1 = y0 + 1 >= 0 && y0 + 1 < static_cast<long>(h);
                    T d_fx = 0, d_fy = 0;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T u = uitem[ch * oh * ow + s];
                        const T* plane = xitem + ch * h * w;
                        const T v00 = (in_y0 && in_x0) ? plane[y0 * w + x0] : T{0};
                        const T v01 = (in_y0 && in_x1) ? plane[y0 * w + x0 + 1] : T{0};
                        const T v10 = (in_y1 && in_x0) ? plane[(y0 + 1) * w + x0] : T{0};
                        const T v11 = (in_y1 && in_x1) ? plane[(y0 + 1) * w + x0 + 1] : T{0};
                        if (need_x) {
                            T* gplane = gx.data() + (i * c + ch) * h * w;
                            if (in_y0 && in_x0) gplane[y0 * w + x0] += u * (T{1} - wx) * (T{1} - wy);
                            if (in_y0 && in_x1) gplane[y0 * w + x0 + 1] += u * wx * (T{1} - wy);
                            if (in_y1 && in_x0) gplane[(y0 + 1) * w + x0] += u * (T{1} - wx) * wy;
                            if (in_y1 && in_x1) gplane[(y0 + 1) * w + x0 + 1] += u * wx * wy;
                        }
                        if (need_g) {
                            d_fx += u * ((T{1} - wy) * (v01 - v00) + wy * (v11 - v10));
                            d_fy += u * ((T{1} - wx) * (v10 - v00) + wx * (v11 - v01));
                        }
                    }
                    if (need_g) {
                        T* grow = gg.data() + (i * oh * ow + s) * 2;
                        grow[0] = d_fx * static_cast<T>(w - 1) / T{2};
                        grow[1] = d_fy * static_cast<T>(h - 1) / T{2};
                    }
                }
            }
            if (need_x) x.accumulate_grad(gx);
            if (need_g) grid.accumulate_grad(gg);
        });
}

}  // namespace sgla
