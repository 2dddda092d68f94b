#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "dnpm/tensor.hpp"

namespace dnpm::ad {

// Reverse-mode tape. Backward passes append ordinary nodes to the same tape,
// so gradients are themselves differentiable (needed for the R1 penalty and
// for exact gradient checks of composite losses).
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
  public:
    // ---- node access -------------------------------------------------------

    const Tensor& val(Var v) const { return nodes_[check(v)].value; }
    const std::vector<int>& shape(Var v) const { return val(v).shape(); }
    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // ---- leaves ------------------------------------------------------------

    Var leaf(Tensor value, bool requires_grad_flag = true) {
        return make(std::move(value), {}, requires_grad_flag);
    }

    Var constant(Tensor value) { return make(std::move(value), {}, false); }

    Var scalar_const(double v) { return constant(Tensor::scalar(v)); }

    // ---- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        require(val(a).same_shape(val(b)), "add: shape mismatch");
        Tensor out = val(a);
        out.mat() += val(b).mat();
        Var r = make(std::move(out), {a, b});
        set_vjp(r, [](Tape&, Var, Var g) { return std::vector<Var>{g, g}; });
        return r;
    }

    Var sub(Var a, Var b) {
        require(val(a).same_shape(val(b)), "sub: shape mismatch");
        Tensor out = val(a);
        out.mat() -= val(b).mat();
        Var r = make(std::move(out), {a, b});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{g, t.neg(g)}; });
        return r;
    }

    Var neg(Var a) {
        Tensor out = val(a);
        out.mat() = -out.mat();
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.neg(g)}; });
        return r;
    }

    Var mul(Var a, Var b) {
        require(val(a).same_shape(val(b)), "mul: shape mismatch");
        Tensor out = val(a);
        out.mat() = out.mat().cwiseProduct(val(b).mat());
        Var r = make(std::move(out), {a, b});
        set_vjp(r, [a, b](Tape& t, Var, Var g) {
            return std::vector<Var>{t.mul(g, b), t.mul(g, a)};
        });
        return r;
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        out.mat() *= c;
        Var r = make(std::move(out), {a});
        set_vjp(r, [c](Tape& t, Var, Var g) { return std::vector<Var>{t.scale(g, c)}; });
        return r;
    }

    Var add_const(Var a, double c) {
        Tensor out = val(a);
        out.mat().array() += c;
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape&, Var, Var g) { return std::vector<Var>{g}; });
        return r;
    }

    // Elementwise power with constant exponent. Fractional/negative exponents
    // assume a strictly positive base.
    Var powc(Var a, double p) {
        Tensor out = val(a);
        for (auto& v : out.vec()) v = std::pow(v, p);
        Var r = make(std::move(out), {a});
        set_vjp(r, [a, p](Tape& t, Var, Var g) {
            Var d = t.scale(t.powc(a, p - 1.0), p);
            return std::vector<Var>{t.mul(g, d)};
        });
        return r;
    }

    Var exp(Var a) {
        Tensor out = val(a);
        for (auto& v : out.vec()) v = std::exp(v);
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var self, Var g) { return std::vector<Var>{t.mul(g, self)}; });
        return r;
    }

    Var log(Var a) {
        Tensor out = val(a);
        for (auto& v : out.vec()) v = std::log(v);
        Var r = make(std::move(out), {a});
        set_vjp(r, [a](Tape& t, Var, Var g) {
            return std::vector<Var>{t.mul(g, t.powc(a, -1.0))};
        });
        return r;
    }

    Var lrelu(Var a, double slope) {
        Tensor out = val(a);
        Tensor mask(out.shape());
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            const bool pos = out[i] > 0.0;
            mask[i] = pos ? 1.0 : slope;
            out[i] = pos ? out[i] : out[i] * slope;
        }
        Var r = make(std::move(out), {a});
        set_vjp(r, [m = std::move(mask)](Tape& t, Var, Var g) {
            return std::vector<Var>{t.mul(g, t.constant(m))};
        });
        return r;
    }

    Var relu(Var a) { return lrelu(a, 0.0); }

    Var abs(Var a) {
        Tensor out = val(a);
        Tensor sign(out.shape());
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            sign[i] = out[i] > 0.0 ? 1.0 : (out[i] < 0.0 ? -1.0 : 0.0);
            out[i] = std::abs(out[i]);
        }
        Var r = make(std::move(out), {a});
        set_vjp(r, [s = std::move(sign)](Tape& t, Var, Var g) {
            return std::vector<Var>{t.mul(g, t.constant(s))};
        });
        return r;
    }

    Var tanh(Var a) {
        Tensor out = val(a);
        for (auto& v : out.vec()) v = std::tanh(v);
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var self, Var g) {
            Var ones = t.constant(Tensor::full(t.shape(self), 1.0));
            return std::vector<Var>{t.mul(g, t.sub(ones, t.mul(self, self)))};
        });
        return r;
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (auto& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var self, Var g) {
            Var ones = t.constant(Tensor::full(t.shape(self), 1.0));
            return std::vector<Var>{t.mul(g, t.mul(self, t.sub(ones, self)))};
        });
        return r;
    }

    Var softplus(Var a) {
        Tensor out = val(a);
        for (auto& v : out.vec()) v = v > 30.0 ? v : std::log1p(std::exp(v));
        Var r = make(std::move(out), {a});
        set_vjp(r, [a](Tape& t, Var, Var g) { return std::vector<Var>{t.mul(g, t.sigmoid(a))}; });
        return r;
    }

    // ---- matrix ops --------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0), "matmul: bad shapes");
        Tensor out({A.dim(0), B.dim(1)});
        out.mat().noalias() = A.mat() * B.mat();
        Var r = make(std::move(out), {a, b});
        set_vjp(r, [a, b](Tape& t, Var, Var g) {
            return std::vector<Var>{t.matmul(g, t.transpose(b)), t.matmul(t.transpose(a), g)};
        });
        return r;
    }

    Var transpose(Var a) {
        const Tensor& A = val(a);
        require(A.rank() == 2, "transpose: rank-2 only");
        Tensor out({A.dim(1), A.dim(0)});
        out.mat() = A.mat().transpose();
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.transpose(g)}; });
        return r;
    }

    Var reshape(Var a, std::vector<int> shape) {
        Tensor out = val(a).reshaped(std::move(shape));
        Var r = make(std::move(out), {a});
        set_vjp(r, [orig = val(a).shape()](Tape& t, Var, Var g) {
            return std::vector<Var>{t.reshape(g, orig)};
        });
        return r;
    }

    // [m,n] -> [m,1]
    Var rowsum(Var a) {
        const Tensor& A = val(a);
        require(A.rank() == 2, "rowsum: rank-2 only");
        Tensor out({A.dim(0), 1});
        out.mat() = A.mat().rowwise().sum();
        Var r = make(std::move(out), {a});
        set_vjp(r, [n = val(a).dim(1)](Tape& t, Var, Var g) {
            return std::vector<Var>{t.rep_cols(g, n)};
        });
        return r;
    }

    // [m,1] -> [m,n]
    Var rep_cols(Var a, int n) {
        const Tensor& A = val(a);
        require(A.rank() == 2 && A.dim(1) == 1, "rep_cols: expects [m,1]");
        Tensor out({A.dim(0), n});
        out.mat() = A.mat() * Eigen::RowVectorXd::Ones(n);
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.rowsum(g)}; });
        return r;
    }

    // [m,n] -> [1,n]
    Var colsum(Var a) {
        const Tensor& A = val(a);
        require(A.rank() == 2, "colsum: rank-2 only");
        Tensor out({1, A.dim(1)});
        out.mat() = A.mat().colwise().sum();
        Var r = make(std::move(out), {a});
        set_vjp(r, [m = val(a).dim(0)](Tape& t, Var, Var g) {
            return std::vector<Var>{t.rep_rows(g, m)};
        });
        return r;
    }

    // [1,n] -> [m,n]
    Var rep_rows(Var a, int m) {
        const Tensor& A = val(a);
        require(A.rank() == 2 && A.dim(0) == 1, "rep_rows: expects [1,n]");
        Tensor out({m, A.dim(1)});
        out.mat() = Eigen::VectorXd::Ones(m) * A.mat();
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.colsum(g)}; });
        return r;
    }

    Var sum_all(Var a) {
        Tensor out({1});
        out[0] = val(a).sum();
        Var r = make(std::move(out), {a});
        set_vjp(r, [sh = val(a).shape()](Tape& t, Var, Var g) {
            return std::vector<Var>{t.broadcast_scalar(g, sh)};
        });
        return r;
    }

    Var broadcast_scalar(Var a, std::vector<int> shape) {
        require(val(a).numel() == 1, "broadcast_scalar: scalar input expected");
        Tensor out = Tensor::full(std::move(shape), val(a)[0]);
        Var r = make(std::move(out), {a});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.sum_all(g)}; });
        return r;
    }

    Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(val(a).numel())); }

    // Contiguous slice along axis 0.
    Var slice_rows(Var a, int r0, int r1) {
        const Tensor& A = val(a);
        require(A.rank() >= 1 && 0 <= r0 && r0 <= r1 && r1 <= A.dim(0), "slice_rows: bad range");
        std::vector<int> sh = A.shape();
        sh[0] = r1 - r0;
        const std::int64_t row = A.numel() / std::max(1, A.dim(0));
        Tensor out(sh);
        std::copy(A.data() + r0 * row, A.data() + r1 * row, out.data());
        Var r = make(std::move(out), {a});
        set_vjp(r, [r0, total = val(a).dim(0)](Tape& t, Var, Var g) {
            return std::vector<Var>{t.pad_rows(g, total, r0)};
        });
        return r;
    }

    // Zero-embed along axis 0 at offset r0 into `total` rows.
    Var pad_rows(Var a, int total, int r0) {
        const Tensor& A = val(a);
        require(A.rank() >= 1 && r0 + A.dim(0) <= total, "pad_rows: bad range");
        std::vector<int> sh = A.shape();
        sh[0] = total;
        const std::int64_t row = A.numel() / std::max(1, A.dim(0));
        Tensor out(sh);
        std::copy(A.data(), A.data() + A.numel(), out.data() + r0 * row);
        Var r = make(std::move(out), {a});
        set_vjp(r, [r0, n = val(a).dim(0)](Tape& t, Var, Var g) {
            return std::vector<Var>{t.slice_rows(g, r0, r0 + n)};
        });
        return r;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows: empty");
        std::vector<int> sh = val(parts[0]).shape();
        int total = 0;
        for (Var p : parts) {
            const auto& s = val(p).shape();
            require(s.size() == sh.size(), "concat_rows: rank mismatch");
            for (std::size_t i = 1; i < s.size(); ++i)
                require(s[i] == sh[i], "concat_rows: trailing shape mismatch");
            total += s[0];
        }
        sh[0] = total;
        Tensor out(sh);
        const std::int64_t row = out.numel() / std::max(1, total);
        std::int64_t off = 0;
        std::vector<int> row_counts;
        for (Var p : parts) {
            const Tensor& P = val(p);
            std::copy(P.data(), P.data() + P.numel(), out.data() + off);
            off += P.numel();
            row_counts.push_back(P.dim(0));
        }
        Var r = make(std::move(out), parts);
        set_vjp(r, [row_counts](Tape& t, Var, Var g) {
            std::vector<Var> grads;
            int r0 = 0;
            for (int n : row_counts) {
                grads.push_back(t.slice_rows(g, r0, r0 + n));
                r0 += n;
            }
            return grads;
        });
        return r;
    }

    // ---- image ops ([C,H,W] layout) ----------------------------------------

    // Patch extraction for GEMM convolution: output [C*kh*kw, Ho*Wo].
    Var im2col(Var x, int kh, int kw, int stride, int pad) {
        const Tensor& X = val(x);
        require(X.rank() == 3, "im2col: expects [C,H,W]");
        const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        require(Ho > 0 && Wo > 0, "im2col: kernel larger than padded input");
        Tensor out({C * kh * kw, Ho * Wo});
        const double* src = X.data();
        double* dst = out.data();
        for (int c = 0; c < C; ++c)
            for (int u = 0; u < kh; ++u)
                for (int v = 0; v < kw; ++v) {
                    double* drow = dst + (static_cast<std::int64_t>((c * kh + u) * kw + v)) * Ho * Wo;
                    for (int oi = 0; oi < Ho; ++oi) {
                        const int i = oi * stride + u - pad;
                        for (int oj = 0; oj < Wo; ++oj) {
                            const int j = oj * stride + v - pad;
                            drow[oi * Wo + oj] =
                                (i >= 0 && i < H && j >= 0 && j < W) ? src[(c * H + i) * static_cast<std::int64_t>(W) + j] : 0.0;
                        }
                    }
                }
        Var r = make(std::move(out), {x});
        set_vjp(r, [C, H, W, kh, kw, stride, pad](Tape& t, Var, Var g) {
            return std::vector<Var>{t.col2im(g, C, H, W, kh, kw, stride, pad)};
        });
        return r;
    }

    // Adjoint of im2col: scatter-add patches back into an image.
    Var col2im(Var cols, int C, int H, int W, int kh, int kw, int stride, int pad) {
        const Tensor& G = val(cols);
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        require(G.rank() == 2 && G.dim(0) == C * kh * kw && G.dim(1) == Ho * Wo, "col2im: bad shape");
        Tensor out({C, H, W});
        const double* src = G.data();
        double* dst = out.data();
        for (int c = 0; c < C; ++c)
            for (int u = 0; u < kh; ++u)
                for (int v = 0; v < kw; ++v) {
                    const double* srow = src + (static_cast<std::int64_t>((c * kh + u) * kw + v)) * Ho * Wo;
                    for (int oi = 0; oi < Ho; ++oi) {
                        const int i = oi * stride + u - pad;
                        if (i < 0 || i >= H) continue;
                        for (int oj = 0; oj < Wo; ++oj) {
                            const int j = oj * stride + v - pad;
                            if (j < 0 || j >= W) continue;
                            dst[(c * H + i) * static_cast<std::int64_t>(W) + j] += srow[oi * Wo + oj];
                        }
                    }
                }
        Var r = make(std::move(out), {cols});
        set_vjp(r, [kh, kw, stride, pad](Tape& t, Var, Var g) {
            return std::vector<Var>{t.im2col(g, kh, kw, stride, pad)};
        });
        return r;
    }

    // Nearest-neighbor 2x upsample.
    Var upsample2(Var x) {
        const Tensor& X = val(x);
        require(X.rank() == 3, "upsample2: expects [C,H,W]");
        const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        Tensor out({C, 2 * H, 2 * W});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const double v = X[(c * H + i) * static_cast<std::int64_t>(W) + j];
                    double* base = out.data() + (static_cast<std::int64_t>(c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                    base[0] = v;
                    base[1] = v;
                    base[2 * W] = v;
                    base[2 * W + 1] = v;
                }
        Var r = make(std::move(out), {x});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.sumpool2(g)}; });
        return r;
    }

    // Sum over non-overlapping 2x2 blocks (adjoint of upsample2).
    Var sumpool2(Var x) {
        const Tensor& X = val(x);
        require(X.rank() == 3 && X.dim(1) % 2 == 0 && X.dim(2) % 2 == 0, "sumpool2: even dims expected");
        const int C = X.dim(0), H = X.dim(1) / 2, W = X.dim(2) / 2;
        Tensor out({C, H, W});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const double* base = X.data() + (static_cast<std::int64_t>(c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                    out[(c * H + i) * static_cast<std::int64_t>(W) + j] = base[0] + base[1] + base[2 * W] + base[2 * W + 1];
                }
        Var r = make(std::move(out), {x});
        set_vjp(r, [](Tape& t, Var, Var g) { return std::vector<Var>{t.upsample2(g)}; });
        return r;
    }

    // ---- backward ----------------------------------------------------------

    // Gradients of a scalar root with respect to `wrt`. The returned vars live
    // on this tape and are themselves differentiable.
    std::vector<Var> gradients(Var root, const std::vector<Var>& wrt) {
        require(val(root).numel() == 1, "gradients: scalar root expected");
        std::vector<Var> grad_of(nodes_.size());
        grad_of[static_cast<std::size_t>(root.id)] = constant(Tensor::full(shape(root), 1.0));
        for (int i = root.id; i >= 0; --i) {
            Var g = grad_of[static_cast<std::size_t>(i)];
            if (!g.valid()) continue;
            if (!nodes_[static_cast<std::size_t>(i)].requires_grad || !nodes_[static_cast<std::size_t>(i)].vjp) continue;
            // Copy before invoking: the vjp appends nodes and may reallocate.
            const std::vector<int> parents = nodes_[static_cast<std::size_t>(i)].parents;
            const auto vjp = nodes_[static_cast<std::size_t>(i)].vjp;
            std::vector<Var> pgrads = vjp(*this, Var{i}, g);
            require(pgrads.size() == parents.size(), "vjp arity mismatch");
            for (std::size_t k = 0; k < pgrads.size(); ++k) {
                const int p = parents[k];
                if (!pgrads[k].valid() || !nodes_[static_cast<std::size_t>(p)].requires_grad) continue;
                Var& slot = grad_of[static_cast<std::size_t>(p)];
                slot = slot.valid() ? add(slot, pgrads[k]) : pgrads[k];
            }
        }
        std::vector<Var> out;
        out.reserve(wrt.size());
        for (Var w : wrt) {
            Var g = grad_of[static_cast<std::size_t>(check(w))];
            out.push_back(g.valid() ? g : constant(Tensor::zeros(shape(w))));
        }
        return out;
    }

    Var gradient(Var root, Var wrt) { return gradients(root, {wrt})[0]; }

  private:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        std::function<std::vector<Var>(Tape&, Var, Var)> vjp;
        bool requires_grad = false;
    };

    int check(Var v) const {
        require(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid var");
        return v.id;
    }

    Var make(Tensor value, const std::vector<Var>& parents, bool force_requires = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = force_requires;
        for (Var p : parents) {
            n.parents.push_back(check(p));
            n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
        }
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void set_vjp(Var v, std::function<std::vector<Var>(Tape&, Var, Var)> fn) {
        nodes_[static_cast<std::size_t>(check(v))].vjp = std::move(fn);
    }

    std::vector<Node> nodes_;
};

// ---- composite helpers ------------------------------------------------------

inline Var linear(Tape& t, Var x, Var w, Var b) {
    Var y = t.matmul(x, w);
    return t.add(y, t.rep_rows(b, t.val(y).dim(0)));
}

// x [Cin,H,W], w [Cout, Cin*kh*kw], b [Cout,1]  ->  [Cout,Ho,Wo]
inline Var conv2d(Tape& t, Var x, Var w, Var b, int kh, int kw, int stride, int pad) {
    const auto& xs = t.shape(x);
    const int H = xs[1], W = xs[2];
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    Var cols = t.im2col(x, kh, kw, stride, pad);
    Var y = t.matmul(w, cols);
    y = t.add(y, t.rep_cols(b, Ho * Wo));
    return t.reshape(y, {t.val(w).dim(0), Ho, Wo});
}

// Row-wise softmax with detached max subtraction (exact: rows of the softmax
// Jacobian are orthogonal to constant shifts).
inline Var softmax_rows(Tape& t, Var x) {
    const Tensor& X = t.val(x);
    const int m = X.dim(0), n = X.dim(1);
    Tensor mx({m, 1});
    mx.mat() = X.mat().rowwise().maxCoeff();
    Var shifted = t.sub(x, t.rep_cols(t.constant(mx), n));
    Var e = t.exp(shifted);
    Var s = t.rowsum(e);
    return t.mul(e, t.rep_cols(t.powc(s, -1.0), n));
}

// Row-wise layer norm with affine parameters gamma/beta of shape [1,n].
inline Var layernorm_rows(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5) {
    const int m = t.val(x).dim(0), n = t.val(x).dim(1);
    Var mean = t.scale(t.rowsum(x), 1.0 / n);
    Var xc = t.sub(x, t.rep_cols(mean, n));
    Var var = t.scale(t.rowsum(t.mul(xc, xc)), 1.0 / n);
    Var inv = t.powc(t.add_const(var, eps), -0.5);
    Var xn = t.mul(xc, t.rep_cols(inv, n));
    return t.add(t.mul(xn, t.rep_rows(gamma, m)), t.rep_rows(beta, m));
}

inline Var l1_mean(Tape& t, Var a, Var b) { return t.mean_all(t.abs(t.sub(a, b))); }

// sqrt(sum((a-b)^2) + eps) -- the eps keeps the root differentiable at 0.
inline Var l2_norm_diff(Tape& t, Var a, Var b, double eps = 1e-12) {
    Var d = t.sub(a, b);
    return t.powc(t.add_const(t.sum_all(t.mul(d, d)), eps), 0.5);
}

}  // namespace dnpm::ad
