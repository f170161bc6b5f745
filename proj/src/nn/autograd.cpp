#include "mipr/nn/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mipr/error.hpp"

namespace mipr::nn {

namespace {

thread_local bool g_grad_enabled = true;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void check_same(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::Invalid,
            std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

int conv_out(int size, int kernel, int stride, int padding) {
    return (size + 2 * padding - kernel) / stride + 1;
}

// cols is (C*k*k) x (Ho*Wo), row-major.
void im2col(const double* image, int channels, int height, int width, int kernel, int stride,
            int padding, int out_h, int out_w, double* cols) {
    const int out_size = out_h * out_w;
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
                double* row = cols + ((c * kernel + ky) * kernel + kx) * out_size;
                const double* plane = image + static_cast<std::size_t>(c) * height * width;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    double* dst = row + oy * out_w;
                    if (iy < 0 || iy >= height) {
                        std::fill(dst, dst + out_w, 0.0);
                        continue;
                    }
                    const double* src = plane + iy * width;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        dst[ox] = (ix >= 0 && ix < width) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, int channels, int height, int width, int kernel, int stride,
            int padding, int out_h, int out_w, double* image) {
    const int out_size = out_h * out_w;
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
                const double* row = cols + ((c * kernel + ky) * kernel + kx) * out_size;
                double* plane = image + static_cast<std::size_t>(c) * height * width;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    if (iy < 0 || iy >= height) continue;
                    const double* src = row + oy * out_w;
                    double* dst = plane + iy * width;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        if (ix >= 0 && ix < width) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

Tensor& detail::Node::grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

void detail::Node::accumulate(const Tensor& g) {
    if (grad.empty())
        grad = g;
    else
        grad += g;
}

Var::Var(Tensor value, bool requires_grad)
    : node_(std::make_shared<detail::Node>(detail::Node{std::move(value), {}, requires_grad, {}, {}})) {}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> fn) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    if (!g_grad_enabled) return Var(node);
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v.requires_grad(); });
    if (!any) return Var(node);
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Var& v : inputs) node->parents.push_back(v.node());
    node->backward_fn = std::move(fn);
    return Var(node);
}

void backward(const Var& root) {
    require(root.defined() && root.value().size() == 1, ErrorKind::Invalid,
            "backward requires a scalar root");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Tensor::scalar(1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
            // Interior gradients are not needed once propagated.
            if (!node->parents.empty()) node->grad = Tensor();
        }
    }
}

Var detach(const Var& x) { return Var(x.value(), false); }
Var constant(Tensor value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
    check_same(a.value(), b.value(), "add");
    Tensor out = a.value();
    out += b.value();
    return make_op(std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, [](detail::Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
        if (self.parents[1]->requires_grad) {
            Tensor g = self.grad;
            g *= -1.0;
            self.parents[1]->accumulate(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            Tensor& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.values()) v += s;
    return make_op(std::move(out), {a}, [](detail::Node& self) {
        self.parents[0]->accumulate(self.grad);
    });
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a.value();
    out *= s;
    return make_op(std::move(out), {a}, [s](detail::Node& self) {
        Tensor g = self.grad;
        g *= s;
        self.parents[0]->accumulate(g);
    });
}

Var mul_gate(const Var& x, const Var& gate) {
    const Shape& s = x.shape();
    const Shape& gs = gate.shape();
    require(gs.n == s.n && gs.c == 1 && gs.h == s.h && gs.w == s.w, ErrorKind::Invalid,
            "mul_gate: gate shape " + gs.str() + " incompatible with " + s.str());
    Tensor out = x.value();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            double* dst = out.plane(n, c);
            const double* g = gate.value().plane(n, 0);
            for (std::size_t i = 0; i < s.plane(); ++i) dst[i] *= g[i];
        }
    return make_op(std::move(out), {x, gate}, [](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        const Shape& s = self.value.shape();
        if (px->requires_grad) {
            Tensor& gx = px->grad_buffer();
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const double* g = pg->value.plane(n, 0);
                    const double* up = self.grad.plane(n, c);
                    double* dst = gx.plane(n, c);
                    for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += up[i] * g[i];
                }
        }
        if (pg->requires_grad) {
            Tensor& gg = pg->grad_buffer();
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const double* xv = px->value.plane(n, c);
                    const double* up = self.grad.plane(n, c);
                    double* dst = gg.plane(n, 0);
                    for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += up[i] * xv[i];
                }
        }
    });
}

Var relu(const Var& x) { return leaky_relu(x, 0.0); }

Var leaky_relu(const Var& x, double slope) {
    Tensor out = x.value();
    for (double& v : out.values())
        if (v < 0) v *= slope;
    return make_op(std::move(out), {x}, [slope](detail::Node& self) {
        auto& p = self.parents[0];
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += p->value[i] > 0 ? self.grad[i] : slope * self.grad[i];
    });
}

Var sigmoid(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(std::move(out), {x}, [](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Var tanh(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values()) v = std::tanh(v);
    return make_op(std::move(out), {x}, [](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

Var elu(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values())
        if (v < 0) v = std::expm1(v);
    return make_op(std::move(out), {x}, [](detail::Node& self) {
        auto& p = self.parents[0];
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += p->value[i] > 0 ? self.grad[i] : self.grad[i] * (self.value[i] + 1.0);
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    require(ws.c == xs.c && ws.h == ws.w, ErrorKind::Invalid,
            "conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
    require(!bias.defined() || bias.value().size() == static_cast<std::size_t>(ws.n),
            ErrorKind::Invalid, "conv2d: bias size mismatch");
    const int k = ws.h;
    const int out_h = conv_out(xs.h, k, stride, padding);
    const int out_w = conv_out(xs.w, k, stride, padding);
    require(out_h > 0 && out_w > 0, ErrorKind::Invalid, "conv2d: input too small " + xs.str());
    const int rows = xs.c * k * k;
    const int cols_n = out_h * out_w;
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);

    Tensor out(Shape{xs.n, ws.n, out_h, out_w});
    ConstMatrixMap w(weight.value().data(), ws.n, rows);
    AlignedBuffer cols(pointwise ? 0 : static_cast<std::size_t>(rows) * cols_n);
    for (int n = 0; n < xs.n; ++n) {
        const double* src = x.value().plane(n, 0);
        if (!pointwise) {
            im2col(src, xs.c, xs.h, xs.w, k, stride, padding, out_h, out_w, cols.data());
            src = cols.data();
        }
        MatrixMap y(out.plane(n, 0), ws.n, cols_n);
        y.noalias() = w * ConstMatrixMap(src, rows, cols_n);
        if (bias.defined())
            for (int o = 0; o < ws.n; ++o) y.row(o).array() += bias.value()[o];
    }

    Var b = bias.defined() ? bias : Var(Tensor(Shape{1, ws.n, 1, 1}), false);
    return make_op(std::move(out), {x, weight, b},
                   [=](detail::Node& self) {
                       auto& px = self.parents[0];
                       auto& pw = self.parents[1];
                       auto& pb = self.parents[2];
                       ConstMatrixMap wm(pw->value.data(), ws.n, rows);
                       AlignedBuffer buf(pointwise ? 0 : static_cast<std::size_t>(rows) * cols_n);
                       RowMatrix dcols;
                       for (int n = 0; n < xs.n; ++n) {
                           ConstMatrixMap dy(self.grad.plane(n, 0), ws.n, cols_n);
                           if (pw->requires_grad) {
                               const double* src = px->value.plane(n, 0);
                               if (!pointwise) {
                                   im2col(src, xs.c, xs.h, xs.w, k, stride, padding, out_h, out_w,
                                          buf.data());
                                   src = buf.data();
                               }
                               MatrixMap dw(pw->grad_buffer().data(), ws.n, rows);
                               dw.noalias() += dy * ConstMatrixMap(src, rows, cols_n).transpose();
                           }
                           if (pb->requires_grad) {
                               Tensor& db = pb->grad_buffer();
                               for (int o = 0; o < ws.n; ++o) db[o] += dy.row(o).sum();
                           }
                           if (px->requires_grad) {
                               double* dx = px->grad_buffer().plane(n, 0);
                               if (pointwise) {
                                   MatrixMap(dx, rows, cols_n).noalias() += wm.transpose() * dy;
                               } else {
                                   dcols.noalias() = wm.transpose() * dy;
                                   col2im(dcols.data(), xs.c, xs.h, xs.w, k, stride, padding, out_h,
                                          out_w, dx);
                               }
                           }
                       }
                   });
}

Var upsample_nearest(const Var& x, int factor) {
    const Shape& s = x.shape();
    const int oh = s.h * factor;
    const int ow = s.w * factor;
    Tensor out(Shape{s.n, s.c, oh, ow});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const double* src = x.value().plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / factor) * s.w + xx / factor];
        }
    return make_op(std::move(out), {x}, [factor](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        const Shape& s = g.shape();
        const int ow = s.w * factor;
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const double* up = self.grad.plane(n, c);
                double* dst = g.plane(n, c);
                for (int y = 0; y < s.h * factor; ++y)
                    for (int xx = 0; xx < ow; ++xx) dst[(y / factor) * s.w + xx / factor] += up[y * ow + xx];
            }
    });
}

Var avg_pool(const Var& x, int size) {
    const Shape& s = x.shape();
    require(s.h % size == 0 && s.w % size == 0, ErrorKind::Invalid,
            "avg_pool: " + s.str() + " not divisible by " + std::to_string(size));
    const int oh = s.h / size;
    const int ow = s.w / size;
    const double scale = 1.0 / (size * size);
    Tensor out(Shape{s.n, s.c, oh, ow});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const double* src = x.value().plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx) dst[(y / size) * ow + xx / size] += src[y * s.w + xx] * scale;
        }
    return make_op(std::move(out), {x}, [size, scale](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        const Shape& s = g.shape();
        const int ow = s.w / size;
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const double* up = self.grad.plane(n, c);
                double* dst = g.plane(n, c);
                for (int y = 0; y < s.h; ++y)
                    for (int xx = 0; xx < s.w; ++xx) dst[y * s.w + xx] += up[(y / size) * ow + xx / size] * scale;
            }
    });
}

Var max_pool(const Var& x, int size) {
    const Shape& s = x.shape();
    require(s.h % size == 0 && s.w % size == 0, ErrorKind::Invalid,
            "max_pool: " + s.str() + " not divisible by " + std::to_string(size));
    const int oh = s.h / size;
    const int ow = s.w / size;
    Tensor out(Shape{s.n, s.c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = x.value().offset(n, c, 0, 0);
            double* dst = out.plane(n, c);
            const std::size_t obase = out.offset(n, c, 0, 0);
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    std::size_t best = base + (oy * size) * s.w + ox * size;
                    for (int dy = 0; dy < size; ++dy)
                        for (int dx = 0; dx < size; ++dx) {
                            const std::size_t idx = base + (oy * size + dy) * s.w + ox * size + dx;
                            if (x.value()[idx] > x.value()[best]) best = idx;
                        }
                    dst[oy * ow + ox] = x.value()[best];
                    (*argmax)[obase + oy * ow + ox] = best;
                }
        }
    return make_op(std::move(out), {x}, [argmax](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*argmax)[i]] += self.grad[i];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, ErrorKind::Invalid,
            "concat_channels: " + sa.str() + " vs " + sb.str());
    Tensor out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t na = sa.c * sa.plane();
    const std::size_t nb = sb.c * sb.plane();
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(a.value().plane(n, 0), na, out.plane(n, 0));
        std::copy_n(b.value().plane(n, 0), nb, out.plane(n, sa.c));
    }
    return make_op(std::move(out), {a, b}, [na, nb, ca = sa.c](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const int batch = self.value.shape().n;
        if (pa->requires_grad) {
            Tensor& g = pa->grad_buffer();
            for (int n = 0; n < batch; ++n) {
                const double* src = self.grad.plane(n, 0);
                double* dst = g.plane(n, 0);
                for (std::size_t i = 0; i < na; ++i) dst[i] += src[i];
            }
        }
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (int n = 0; n < batch; ++n) {
                const double* src = self.grad.plane(n, ca);
                double* dst = g.plane(n, 0);
                for (std::size_t i = 0; i < nb; ++i) dst[i] += src[i];
            }
        }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
    const Shape s = x.shape();
    const double count = static_cast<double>(s.n) * s.plane();
    std::vector<double> mean(s.c), inv_std(s.c);
    if (training) {
        for (int c = 0; c < s.c; ++c) {
            double m = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const double* p = x.value().plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) m += p[i];
            }
            m /= count;
            double v = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const double* p = x.value().plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= count;
            mean[c] = m;
            inv_std[c] = 1.0 / std::sqrt(v + eps);
            const double unbiased = count > 1 ? v * count / (count - 1) : v;
            running_mean[c] = (1 - momentum) * running_mean[c] + momentum * m;
            running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < s.c; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }
    Tensor xhat(s);
    Tensor out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const double* p = x.value().plane(n, c);
            double* h = xhat.plane(n, c);
            double* o = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                h[i] = (p[i] - mean[c]) * inv_std[c];
                o[i] = gamma.value()[c] * h[i] + beta.value()[c];
            }
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [s, count, training, inv_std, xhat = std::move(xhat)](detail::Node& self) {
                       auto& px = self.parents[0];
                       auto& pg = self.parents[1];
                       auto& pb = self.parents[2];
                       for (int c = 0; c < s.c; ++c) {
                           double sum_g = 0.0, sum_gh = 0.0;
                           for (int n = 0; n < s.n; ++n) {
                               const double* g = self.grad.plane(n, c);
                               const double* h = xhat.plane(n, c);
                               for (std::size_t i = 0; i < s.plane(); ++i) {
                                   sum_g += g[i];
                                   sum_gh += g[i] * h[i];
                               }
                           }
                           if (pg->requires_grad) pg->grad_buffer()[c] += sum_gh;
                           if (pb->requires_grad) pb->grad_buffer()[c] += sum_g;
                           if (!px->requires_grad) continue;
                           const double scale = pg->value[c] * inv_std[c];
                           Tensor& gx = px->grad_buffer();
                           for (int n = 0; n < s.n; ++n) {
                               const double* g = self.grad.plane(n, c);
                               const double* h = xhat.plane(n, c);
                               double* dst = gx.plane(n, c);
                               for (std::size_t i = 0; i < s.plane(); ++i) {
                                   if (training)
                                       dst[i] += scale * (g[i] - sum_g / count - h[i] * sum_gh / count);
                                   else
                                       dst[i] += scale * g[i];
                               }
                           }
                       }
                   });
}

Var sum(const Var& x) {
    return make_op(Tensor::scalar(x.value().sum()), {x}, [](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        const double up = self.grad[0];
        for (double& v : g.values()) v += up;
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(x.value().size());
    return make_op(Tensor::scalar(x.value().sum() / n), {x}, [n](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        const double up = self.grad[0] / n;
        for (double& v : g.values()) v += up;
    });
}

Var softmax_channels(const Var& x) {
    const Shape s = x.shape();
    Tensor out(s);
    for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            double m = -INFINITY;
            for (int c = 0; c < s.c; ++c) m = std::max(m, x.value().plane(n, c)[i]);
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) {
                const double e = std::exp(x.value().plane(n, c)[i] - m);
                out.plane(n, c)[i] = e;
                z += e;
            }
            for (int c = 0; c < s.c; ++c) out.plane(n, c)[i] /= z;
        }
    return make_op(std::move(out), {x}, [s](detail::Node& self) {
        Tensor& g = self.parents[0]->grad_buffer();
        for (int n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < s.plane(); ++i) {
                double dot = 0.0;
                for (int c = 0; c < s.c; ++c) dot += self.grad.plane(n, c)[i] * self.value.plane(n, c)[i];
                for (int c = 0; c < s.c; ++c) {
                    const double y = self.value.plane(n, c)[i];
                    g.plane(n, c)[i] += y * (self.grad.plane(n, c)[i] - dot);
                }
            }
    });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const Shape s = logits.shape();
    require(labels.size() == static_cast<std::size_t>(s.n) * s.plane(), ErrorKind::Invalid,
            "cross_entropy: label count mismatch");
    Tensor probs(s);
    double loss = 0.0;
    for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
            double m = -INFINITY;
            for (int c = 0; c < s.c; ++c) m = std::max(m, logits.value().plane(n, c)[i]);
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) z += std::exp(logits.value().plane(n, c)[i] - m);
            for (int c = 0; c < s.c; ++c)
                probs.plane(n, c)[i] = std::exp(logits.value().plane(n, c)[i] - m) / z;
            const int label = labels[n * s.plane() + i];
            require(label >= 0 && label < s.c, ErrorKind::Invalid, "cross_entropy: label out of range");
            loss -= logits.value().plane(n, label)[i] - m - std::log(z);
        }
    const double count = static_cast<double>(s.n) * s.plane();
    std::vector<int> lab(labels.begin(), labels.end());
    return make_op(Tensor::scalar(loss / count), {logits},
                   [s, count, probs = std::move(probs), lab = std::move(lab)](detail::Node& self) {
                       Tensor& g = self.parents[0]->grad_buffer();
                       const double up = self.grad[0] / count;
                       for (int n = 0; n < s.n; ++n)
                           for (int c = 0; c < s.c; ++c) {
                               const double* p = probs.plane(n, c);
                               double* dst = g.plane(n, c);
                               for (std::size_t i = 0; i < s.plane(); ++i) {
                                   const double target = lab[n * s.plane() + i] == c ? 1.0 : 0.0;
                                   dst[i] += up * (p[i] - target);
                               }
                           }
                   });
}

Var soft_dice_loss(const Var& probs, std::span<const int> labels, double smooth) {
    const Shape s = probs.shape();
    require(s.c >= 2, ErrorKind::Invalid, "soft_dice_loss: needs a foreground channel");
    require(labels.size() == static_cast<std::size_t>(s.n) * s.plane(), ErrorKind::Invalid,
            "soft_dice_loss: label count mismatch");
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int n = 0; n < s.n; ++n) {
        const double* p = probs.value().plane(n, 1);
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const double g = labels[n * s.plane() + i] == 1 ? 1.0 : 0.0;
            inter += p[i] * g;
            psum += p[i];
            gsum += g;
        }
    }
    const double num = 2.0 * inter + smooth;
    const double den = psum + gsum + smooth;
    std::vector<int> lab(labels.begin(), labels.end());
    return make_op(Tensor::scalar(1.0 - num / den), {probs},
                   [s, num, den, lab = std::move(lab)](detail::Node& self) {
                       Tensor& g = self.parents[0]->grad_buffer();
                       const double up = self.grad[0];
                       for (int n = 0; n < s.n; ++n) {
                           double* dst = g.plane(n, 1);
                           for (std::size_t i = 0; i < s.plane(); ++i) {
                               const double t = lab[n * s.plane() + i] == 1 ? 1.0 : 0.0;
                               // d(1 - num/den)/dp = -(2t*den - num) / den^2
                               dst[i] -= up * (2.0 * t * den - num) / (den * den);
                           }
                       }
                   });
}

Var l1_loss(const Var& a, const Var& b) {
    check_same(a.value(), b.value(), "l1_loss");
    const double n = static_cast<double>(a.value().size());
    double total = 0.0;
    for (std::size_t i = 0; i < a.value().size(); ++i) total += std::abs(a.value()[i] - b.value()[i]);
    return make_op(Tensor::scalar(total / n), {a, b}, [n](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double up = self.grad[0] / n;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const double d = pa->value[i] - pb->value[i];
            const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
            if (pa->requires_grad) pa->grad_buffer()[i] += up * sgn;
            if (pb->requires_grad) pb->grad_buffer()[i] -= up * sgn;
        }
    });
}

}  // namespace mipr::nn
