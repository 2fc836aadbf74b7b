#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hmseg/dual.hpp"
#include "hmseg/tensor.hpp"

namespace hmseg {

enum class Activation { Silu, Tanh, Relu };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Silu: return "silu";
        case Activation::Tanh: return "tanh";
        case Activation::Relu: return "relu";
    }
    return "?";
}

inline Activation parse_activation(const std::string& s) {
    if (s == "silu") return Activation::Silu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    fail(ErrClass::config, "unknown activation '" + s + "'");
}

namespace detail {

template <typename S>
S stable_sigmoid(S x) {
    using std::exp;
    if (x >= S(0)) {
        S e = exp(-x);
        return S(1) / (S(1) + e);
    }
    S e = exp(x);
    return e / (S(1) + e);
}

}  // namespace detail

// Reverse-mode tape over Tensor<S>. Ops append nodes that only reference
// earlier nodes, so a single reverse sweep from the loss id is a valid
// topological order. Instantiating with S = Dual turns one reverse sweep
// into an exact Hessian-vector product (forward-over-reverse).
template <typename S>
class Tape {
public:
    using Id = int32_t;

    Id leaf(Tensor<S> v) { return push(std::move(v)); }

    const Tensor<S>& val(Id id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Tensor<S>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }
    size_t size() const { return nodes_.size(); }

    // Single reverse sweep seeding d(root)/d(root) = 1. The root must be a
    // scalar. May be called once per tape.
    void backward(Id root) {
        require(!swept_, ErrClass::precondition, "tape backward already ran");
        require(val(root).size() == 1, ErrClass::precondition, "backward root must be scalar");
        swept_ = true;
        nodes_[static_cast<size_t>(root)].grad[0] = S(1);
        for (Id i = root; i >= 0; --i)
            if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this);
    }

    // ---- ops ----

    // 3D convolution, odd kernel k in {1,3,...}, stride 1, zero padding k/2.
    // x (Cin,D,H,W), w (Cout,Cin,k,k,k), b (Cout) -> (Cout,D,H,W).
    Id conv3d(Id x, Id w, Id b) {
        const Tensor<S>& xv = val(x);
        const Tensor<S>& wv = val(w);
        const Tensor<S>& bv = val(b);
        require(xv.rank() == 4 && wv.rank() == 5 && bv.rank() == 1, ErrClass::precondition,
                "conv3d shape ranks");
        const int cin = xv.dim(0), d = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
        const int cout = wv.dim(0), k = wv.dim(2);
        require(wv.dim(1) == cin && wv.dim(3) == k && wv.dim(4) == k && bv.dim(0) == cout,
                ErrClass::precondition, "conv3d weight shape mismatch");
        require(k % 2 == 1, ErrClass::precondition, "conv3d kernel must be odd");

        Tensor<S> y({cout, d, h, wd});
        conv_accumulate(xv, wv, y, cin, cout, d, h, wd, k, /*transpose=*/false);
        const int64_t vol = static_cast<int64_t>(d) * h * wd;
        for (int co = 0; co < cout; ++co) {
            S* yp = y.ptr() + co * vol;
            for (int64_t u = 0; u < vol; ++u) yp[u] += bv[co];
        }
        Id self = push(std::move(y));
        set_back(self, [self, x, w, b, cin, cout, d, h, wd, k, vol](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            {
                Tensor<S>& gb = t.grad_mut(b);
                for (int co = 0; co < cout; ++co) {
                    const S* gp = gy.ptr() + co * vol;
                    S acc = S(0);
                    for (int64_t u = 0; u < vol; ++u) acc += gp[u];
                    gb[co] += acc;
                }
            }
            conv_accumulate(gy, t.val(w), t.grad_mut(x), cin, cout, d, h, wd, k,
                            /*transpose=*/true);
            conv_weight_grad(t.val(x), gy, t.grad_mut(w), cin, cout, d, h, wd, k);
        });
        return self;
    }

    // 2x2x2 mean pooling, stride 2; dims must be even.
    Id avg_pool2(Id x) {
        const Tensor<S>& xv = val(x);
        require(xv.rank() == 4, ErrClass::precondition, "avg_pool2 expects (C,D,H,W)");
        const int c = xv.dim(0), d = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        require(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, ErrClass::precondition,
                "avg_pool2 requires even spatial dims, got " + std::to_string(d) + "x" +
                    std::to_string(h) + "x" + std::to_string(w));
        const int od = d / 2, oh = h / 2, ow = w / 2;
        Tensor<S> y({c, od, oh, ow});
        const S inv8 = S(1.0 / 8.0);
        for (int ci = 0; ci < c; ++ci)
            for (int z = 0; z < od; ++z)
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx) {
                        S acc = S(0);
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    acc += xv[idx4(ci, 2 * z + dz, 2 * yy + dy, 2 * xx + dx, d, h,
                                                   w)];
                        y[idx4(ci, z, yy, xx, od, oh, ow)] = acc * inv8;
                    }
        Id self = push(std::move(y));
        set_back(self, [self, x, c, d, h, w, od, oh, ow](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            Tensor<S>& gx = t.grad_mut(x);
            const S inv8 = S(1.0 / 8.0);
            for (int ci = 0; ci < c; ++ci)
                for (int z = 0; z < od; ++z)
                    for (int yy = 0; yy < oh; ++yy)
                        for (int xx = 0; xx < ow; ++xx) {
                            S g = gy[idx4(ci, z, yy, xx, od, oh, ow)] * inv8;
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        gx[idx4(ci, 2 * z + dz, 2 * yy + dy, 2 * xx + dx, d, h,
                                                w)] += g;
                        }
        });
        return self;
    }

    // Nearest-neighbor 2x upsampling.
    Id upsample2(Id x) {
        const Tensor<S>& xv = val(x);
        require(xv.rank() == 4, ErrClass::precondition, "upsample2 expects (C,D,H,W)");
        const int c = xv.dim(0), d = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        const int od = 2 * d, oh = 2 * h, ow = 2 * w;
        Tensor<S> y({c, od, oh, ow});
        for (int ci = 0; ci < c; ++ci)
            for (int z = 0; z < od; ++z)
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx)
                        y[idx4(ci, z, yy, xx, od, oh, ow)] =
                            xv[idx4(ci, z / 2, yy / 2, xx / 2, d, h, w)];
        Id self = push(std::move(y));
        set_back(self, [self, x, c, d, h, w, od, oh, ow](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            Tensor<S>& gx = t.grad_mut(x);
            for (int ci = 0; ci < c; ++ci)
                for (int z = 0; z < od; ++z)
                    for (int yy = 0; yy < oh; ++yy)
                        for (int xx = 0; xx < ow; ++xx)
                            gx[idx4(ci, z / 2, yy / 2, xx / 2, d, h, w)] +=
                                gy[idx4(ci, z, yy, xx, od, oh, ow)];
        });
        return self;
    }

    Id activation(Id x, Activation a) {
        const Tensor<S>& xv = val(x);
        Tensor<S> y(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) {
            S v = xv[i];
            switch (a) {
                case Activation::Silu: y[i] = v * detail::stable_sigmoid(v); break;
                case Activation::Tanh: {
                    using std::tanh;
                    y[i] = tanh(v);
                    break;
                }
                case Activation::Relu: y[i] = v > S(0) ? v : S(0); break;
            }
        }
        Id self = push(std::move(y));
        set_back(self, [self, x, a](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            const Tensor<S>& xv = t.val(x);
            const Tensor<S>& yv = t.val(self);
            Tensor<S>& gx = t.grad_mut(x);
            for (int64_t i = 0; i < xv.size(); ++i) {
                S dv;
                switch (a) {
                    case Activation::Silu: {
                        S sg = detail::stable_sigmoid(xv[i]);
                        dv = sg * (S(1) + xv[i] * (S(1) - sg));
                        break;
                    }
                    case Activation::Tanh: dv = S(1) - yv[i] * yv[i]; break;
                    default: dv = xv[i] > S(0) ? S(1) : S(0); break;
                }
                gx[i] += gy[i] * dv;
            }
        });
        return self;
    }

    Id sigmoid(Id x) {
        const Tensor<S>& xv = val(x);
        Tensor<S> y(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) y[i] = detail::stable_sigmoid(xv[i]);
        Id self = push(std::move(y));
        set_back(self, [self, x](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            const Tensor<S>& yv = t.val(self);
            Tensor<S>& gx = t.grad_mut(x);
            for (int64_t i = 0; i < yv.size(); ++i) gx[i] += gy[i] * yv[i] * (S(1) - yv[i]);
        });
        return self;
    }

    // Parameter-free per-channel standardization over the spatial dims:
    // y_c = (x_c - mean_c) / sqrt(var_c + eps). Keeps decoder inputs
    // comparable across modality-subset sizes.
    Id channel_norm(Id x, double eps = 1e-5) {
        const Tensor<S>& xv = val(x);
        require(xv.rank() == 4, ErrClass::precondition, "channel_norm expects (C,D,H,W)");
        const int c = xv.dim(0);
        const int64_t vol = xv.size() / c;
        Tensor<S> y(xv.shape);
        std::vector<S> inv_sigma(static_cast<size_t>(c));
        const S invn = S(1.0 / static_cast<double>(vol));
        for (int ci = 0; ci < c; ++ci) {
            const S* xp = xv.ptr() + ci * vol;
            S mu = S(0);
            for (int64_t u = 0; u < vol; ++u) mu += xp[u];
            mu = mu * invn;
            S var = S(0);
            for (int64_t u = 0; u < vol; ++u) {
                S d = xp[u] - mu;
                var += d * d;
            }
            var = var * invn;
            using std::sqrt;
            S is = S(1) / sqrt(var + S(eps));
            inv_sigma[static_cast<size_t>(ci)] = is;
            S* yp = y.ptr() + ci * vol;
            for (int64_t u = 0; u < vol; ++u) yp[u] = (xp[u] - mu) * is;
        }
        Id self = push(std::move(y));
        set_back(self, [self, x, c, vol, inv_sigma, invn](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            const Tensor<S>& yv = t.val(self);
            Tensor<S>& gx = t.grad_mut(x);
            for (int ci = 0; ci < c; ++ci) {
                const S* gp = gy.ptr() + ci * vol;
                const S* yp = yv.ptr() + ci * vol;
                S* gxp = gx.ptr() + ci * vol;
                S mean_g = S(0), mean_gy = S(0);
                for (int64_t u = 0; u < vol; ++u) {
                    mean_g += gp[u];
                    mean_gy += gp[u] * yp[u];
                }
                mean_g = mean_g * invn;
                mean_gy = mean_gy * invn;
                const S is = inv_sigma[static_cast<size_t>(ci)];
                for (int64_t u = 0; u < vol; ++u)
                    gxp[u] += is * (gp[u] - mean_g - yp[u] * mean_gy);
            }
        });
        return self;
    }

    // Global average pooling (C,D,H,W) -> (C).
    Id gap(Id x) {
        const Tensor<S>& xv = val(x);
        require(xv.rank() == 4, ErrClass::precondition, "gap expects (C,D,H,W)");
        const int c = xv.dim(0);
        const int64_t vol = xv.size() / c;
        require(vol > 0, ErrClass::precondition, "gap on empty spatial dims");
        Tensor<S> y({c});
        const S inv = S(1.0 / static_cast<double>(vol));
        for (int ci = 0; ci < c; ++ci) {
            const S* xp = xv.ptr() + ci * vol;
            S acc = S(0);
            for (int64_t u = 0; u < vol; ++u) acc += xp[u];
            y[ci] = acc * inv;
        }
        Id self = push(std::move(y));
        set_back(self, [self, x, c, vol](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            Tensor<S>& gx = t.grad_mut(x);
            const S inv = S(1.0 / static_cast<double>(vol));
            for (int ci = 0; ci < c; ++ci) {
                S g = gy[ci] * inv;
                S* gp = gx.ptr() + ci * vol;
                for (int64_t u = 0; u < vol; ++u) gp[u] += g;
            }
        });
        return self;
    }

    // Channel concatenation of two (C,D,H,W) maps with equal spatial dims.
    Id concat_channels(Id a, Id b) {
        const Tensor<S>& av = val(a);
        const Tensor<S>& bv = val(b);
        require(av.rank() == 4 && bv.rank() == 4 && av.dim(1) == bv.dim(1) &&
                    av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
                ErrClass::precondition, "concat_channels spatial mismatch");
        Tensor<S> y({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2), av.dim(3)});
        std::copy(av.data.begin(), av.data.end(), y.data.begin());
        std::copy(bv.data.begin(), bv.data.end(), y.data.begin() + av.size());
        Id self = push(std::move(y));
        set_back(self, [self, a, b](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            Tensor<S>& ga = t.grad_mut(a);
            const int64_t na = ga.size();
            for (int64_t i = 0; i < na; ++i) ga[i] += gy[i];
            Tensor<S>& gb = t.grad_mut(b);
            for (int64_t i = 0; i < gb.size(); ++i) gb[i] += gy[na + i];
        });
        return self;
    }

    // Concatenation of per-slot channel vectors with zeros imputed at
    // disengaged slots: `slots` has one optional (C) vector per modality;
    // result is (M*C) in canonical slot order.
    Id zero_imputed_concat(const std::vector<std::optional<Id>>& slots, int per_slot) {
        const int m = static_cast<int>(slots.size());
        Tensor<S> y({m * per_slot});
        for (int j = 0; j < m; ++j) {
            if (!slots[static_cast<size_t>(j)]) continue;
            const Tensor<S>& sv = val(*slots[static_cast<size_t>(j)]);
            require(sv.size() == per_slot, ErrClass::precondition,
                    "slot vector length mismatch in zero_imputed_concat");
            std::copy(sv.data.begin(), sv.data.end(), y.data.begin() + j * per_slot);
        }
        Id self = push(std::move(y));
        auto slots_copy = slots;
        set_back(self, [self, slots_copy, per_slot](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            for (size_t j = 0; j < slots_copy.size(); ++j) {
                if (!slots_copy[j]) continue;
                Tensor<S>& gs = t.grad_mut(*slots_copy[j]);
                for (int i = 0; i < per_slot; ++i)
                    gs[i] += gy[static_cast<int64_t>(j) * per_slot + i];
            }
        });
        return self;
    }

    // Dense layer: x (n), w (m,n), b (m) -> (m).
    Id affine(Id x, Id w, Id b) {
        const Tensor<S>& xv = val(x);
        const Tensor<S>& wv = val(w);
        const Tensor<S>& bv = val(b);
        require(wv.rank() == 2 && xv.size() == wv.dim(1) && bv.size() == wv.dim(0),
                ErrClass::precondition, "affine shape mismatch");
        const int m = wv.dim(0), n = wv.dim(1);
        Tensor<S> y({m});
        for (int i = 0; i < m; ++i) {
            const S* wr = wv.ptr() + static_cast<int64_t>(i) * n;
            S acc = bv[i];
            for (int j = 0; j < n; ++j) acc += wr[j] * xv[j];
            y[i] = acc;
        }
        Id self = push(std::move(y));
        set_back(self, [self, x, w, b, m, n](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            const Tensor<S>& xv = t.val(x);
            const Tensor<S>& wv = t.val(w);
            Tensor<S>& gx = t.grad_mut(x);
            Tensor<S>& gw = t.grad_mut(w);
            Tensor<S>& gb = t.grad_mut(b);
            for (int i = 0; i < m; ++i) {
                S g = gy[i];
                gb[i] += g;
                const S* wr = wv.ptr() + static_cast<int64_t>(i) * n;
                S* gwr = gw.ptr() + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    gwr[j] += g * xv[j];
                    gx[j] += g * wr[j];
                }
            }
        });
        return self;
    }

    // Sum of per-modality features scaled by their attention weights:
    // y = sum_j weights[slot_j] * feats[j]. `weights` has one entry per
    // modality slot; only engaged slots are touched.
    Id weighted_sum(const std::vector<Id>& feats, const std::vector<int>& slots, Id weights) {
        require(!feats.empty() && feats.size() == slots.size(), ErrClass::precondition,
                "weighted_sum slot/feature mismatch");
        const Tensor<S>& f0 = val(feats[0]);
        Tensor<S> y(f0.shape);
        const Tensor<S>& wv = val(weights);
        for (size_t j = 0; j < feats.size(); ++j) {
            const Tensor<S>& fv = val(feats[j]);
            require(fv.same_shape(f0), ErrClass::precondition, "weighted_sum feature shapes");
            S wj = wv[slots[j]];
            for (int64_t i = 0; i < fv.size(); ++i) y[i] += wj * fv[i];
        }
        Id self = push(std::move(y));
        auto feats_copy = feats;
        auto slots_copy = slots;
        set_back(self, [self, feats_copy, slots_copy, weights](Tape& t) {
            const Tensor<S>& gy = t.grad(self);
            const Tensor<S>& wv = t.val(weights);
            Tensor<S>& gw = t.grad_mut(weights);
            for (size_t j = 0; j < feats_copy.size(); ++j) {
                const Tensor<S>& fv = t.val(feats_copy[j]);
                Tensor<S>& gf = t.grad_mut(feats_copy[j]);
                S wj = wv[slots_copy[j]];
                S acc = S(0);
                for (int64_t i = 0; i < fv.size(); ++i) {
                    gf[i] += wj * gy[i];
                    acc += fv[i] * gy[i];
                }
                gw[slots_copy[j]] += acc;
            }
        });
        return self;
    }

    // Soft Dice loss over V classes: 1 - (2/V) sum_v [sum GP / (sum G^2 +
    // sum P^2 + eps)]. gt is a constant.
    Id dice_loss(Id pred, Tensor<S> gt, double eps) {
        const Tensor<S>& pv = val(pred);
        require(pv.same_shape(gt), ErrClass::precondition, "dice_loss shape mismatch");
        require(pv.rank() >= 1, ErrClass::precondition, "dice_loss needs class dim");
        const int v = pv.dim(0);
        const int64_t u = pv.size() / v;
        std::vector<S> num(static_cast<size_t>(v)), den(static_cast<size_t>(v));
        S acc = S(0);
        for (int c = 0; c < v; ++c) {
            const S* p = pv.ptr() + c * u;
            const S* g = gt.ptr() + c * u;
            S n = S(0), gg = S(0), pp = S(0);
            for (int64_t i = 0; i < u; ++i) {
                n += g[i] * p[i];
                gg += g[i] * g[i];
                pp += p[i] * p[i];
            }
            num[static_cast<size_t>(c)] = n;
            den[static_cast<size_t>(c)] = gg + pp + S(eps);
            acc += n / den[static_cast<size_t>(c)];
        }
        Id self = push(Tensor<S>::scalar(S(1) - S(2.0 / v) * acc));
        auto gt_holder = std::make_shared<Tensor<S>>(std::move(gt));
        set_back(self, [self, pred, gt_holder, num, den, v, u](Tape& t) {
            S g0 = t.grad(self)[0];
            Tensor<S>& gp = t.grad_mut(pred);
            const Tensor<S>& pv = t.val(pred);
            const S coef = S(-2.0 / v) * g0;
            for (int c = 0; c < v; ++c) {
                const S* p = pv.ptr() + c * u;
                const S* g = gt_holder->ptr() + c * u;
                S* gpp = gp.ptr() + c * u;
                S n = num[static_cast<size_t>(c)], d = den[static_cast<size_t>(c)];
                S inv_d2 = S(1) / (d * d);
                for (int64_t i = 0; i < u; ++i)
                    gpp[i] += coef * (g[i] * d - n * S(2) * p[i]) * inv_d2;
            }
        });
        return self;
    }

    // Mean binary cross-entropy over the components of a probability vector,
    // with probabilities clamped to [clamp_eps, 1-clamp_eps]; the gradient is
    // zero where the clamp is active.
    Id bce_mean(Id pred, Tensor<S> target, double clamp_eps) {
        const Tensor<S>& pv = val(pred);
        require(pv.same_shape(target), ErrClass::precondition, "bce shape mismatch");
        const int64_t n = pv.size();
        require(n > 0, ErrClass::precondition, "bce on empty vector");
        using std::log;
        const S lo = S(clamp_eps), hi = S(1.0 - clamp_eps);
        S acc = S(0);
        for (int64_t i = 0; i < n; ++i) {
            S p = pv[i];
            if (p < lo) p = lo;
            if (p > hi) p = hi;
            S t = target[i];
            acc += -(t * log(p) + (S(1) - t) * log(S(1) - p));
        }
        Id self = push(Tensor<S>::scalar(acc / S(static_cast<double>(n))));
        auto tgt = std::make_shared<Tensor<S>>(std::move(target));
        set_back(self, [self, pred, tgt, n, lo, hi](Tape& t) {
            S g0 = t.grad(self)[0] / S(static_cast<double>(n));
            const Tensor<S>& pv = t.val(pred);
            Tensor<S>& gp = t.grad_mut(pred);
            for (int64_t i = 0; i < n; ++i) {
                S p = pv[i];
                if (p < lo || p > hi) continue;
                gp[i] += g0 * (p - (*tgt)[i]) / (p * (S(1) - p));
            }
        });
        return self;
    }

    // ca*a + cb*b on scalars.
    Id axpby(double ca, Id a, double cb, Id b) {
        require(val(a).size() == 1 && val(b).size() == 1, ErrClass::precondition,
                "axpby expects scalars");
        Id self = push(Tensor<S>::scalar(S(ca) * val(a)[0] + S(cb) * val(b)[0]));
        set_back(self, [self, a, b, ca, cb](Tape& t) {
            S g = t.grad(self)[0];
            t.grad_mut(a)[0] += S(ca) * g;
            t.grad_mut(b)[0] += S(cb) * g;
        });
        return self;
    }

    Id scale(Id a, double c) {
        require(val(a).size() == 1, ErrClass::precondition, "scale expects a scalar");
        Id self = push(Tensor<S>::scalar(S(c) * val(a)[0]));
        set_back(self, [self, a, c](Tape& t) { t.grad_mut(a)[0] += S(c) * t.grad(self)[0]; });
        return self;
    }

    Id add(Id a, Id b) { return axpby(1.0, a, 1.0, b); }

    Id zero_scalar() { return leaf(Tensor<S>::scalar(S(0))); }

private:
    struct Node {
        Tensor<S> val;
        Tensor<S> grad;
        std::function<void(Tape&)> back;
    };

    static int64_t idx4(int c, int z, int y, int x, int d, int h, int w) {
        return ((static_cast<int64_t>(c) * d + z) * h + y) * w + x;
    }

    // Shared kernel for conv forward (transpose=false: out[ypos] += w *
    // in[xpos]) and the input-gradient scatter (transpose=true: out[xpos] +=
    // w * in[ypos]).
    static void conv_accumulate(const Tensor<S>& in, const Tensor<S>& w, Tensor<S>& out, int cin,
                                int cout, int d, int h, int wd, int k, bool transpose) {
        const int p = k / 2;
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int kz = 0; kz < k; ++kz)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            S wv = w[(((static_cast<int64_t>(co) * cin + ci) * k + kz) * k + ky) *
                                         k +
                                     kx];
                            const int oz = kz - p, oy = ky - p, ox = kx - p;
                            const int z0 = std::max(0, -oz), z1 = std::min(d, d - oz);
                            const int y0 = std::max(0, -oy), y1 = std::min(h, h - oy);
                            const int x0 = std::max(0, -ox), x1 = std::min(wd, wd - ox);
                            for (int z = z0; z < z1; ++z)
                                for (int yy = y0; yy < y1; ++yy) {
                                    if (!transpose) {
                                        S* orow = out.ptr() + idx4(co, z, yy, x0, d, h, wd);
                                        const S* irow =
                                            in.ptr() + idx4(ci, z + oz, yy + oy, x0 + ox, d, h, wd);
                                        for (int xx = 0; xx < x1 - x0; ++xx)
                                            orow[xx] += wv * irow[xx];
                                    } else {
                                        const S* irow = in.ptr() + idx4(co, z, yy, x0, d, h, wd);
                                        S* orow = out.ptr() +
                                                  idx4(ci, z + oz, yy + oy, x0 + ox, d, h, wd);
                                        for (int xx = 0; xx < x1 - x0; ++xx)
                                            orow[xx] += wv * irow[xx];
                                    }
                                }
                        }
    }

    static void conv_weight_grad(const Tensor<S>& x, const Tensor<S>& gy, Tensor<S>& gw, int cin,
                                 int cout, int d, int h, int wd, int k) {
        const int p = k / 2;
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int kz = 0; kz < k; ++kz)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int oz = kz - p, oy = ky - p, ox = kx - p;
                            const int z0 = std::max(0, -oz), z1 = std::min(d, d - oz);
                            const int y0 = std::max(0, -oy), y1 = std::min(h, h - oy);
                            const int x0 = std::max(0, -ox), x1 = std::min(wd, wd - ox);
                            S acc = S(0);
                            for (int z = z0; z < z1; ++z)
                                for (int yy = y0; yy < y1; ++yy) {
                                    const S* grow = gy.ptr() + idx4(co, z, yy, x0, d, h, wd);
                                    const S* xrow =
                                        x.ptr() + idx4(ci, z + oz, yy + oy, x0 + ox, d, h, wd);
                                    for (int xx = 0; xx < x1 - x0; ++xx)
                                        acc += grow[xx] * xrow[xx];
                                }
                            gw[(((static_cast<int64_t>(co) * cin + ci) * k + kz) * k + ky) * k +
                               kx] += acc;
                        }
    }

    Tensor<S>& grad_mut(Id id) { return nodes_[static_cast<size_t>(id)].grad; }

    Id push(Tensor<S>&& v) {
        Node n;
        n.grad = Tensor<S>(v.shape);
        n.val = std::move(v);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    void set_back(Id id, std::function<void(Tape&)> b) {
        nodes_[static_cast<size_t>(id)].back = std::move(b);
    }

    std::vector<Node> nodes_;
    bool swept_ = false;
};

}  // namespace hmseg
