#include "mman/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace mman {

namespace debug {
bool corrupt_tanh_adjoint = false;
} // namespace debug

namespace {

using Node = std::shared_ptr<TensorNode>;

bool recording(const Tensor& a) {
    return Tape::active() != nullptr && a.requires_grad();
}

bool recording(const Tensor& a, const Tensor& b) {
    return Tape::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

bool recording(const Tensor& a, const Tensor& b, const Tensor& c) {
    return Tape::active() != nullptr &&
           (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

// Marks the output for recording and pre-sizes grad buffers so backward
// closures can index them without checks.
void arm(Tensor& out, std::initializer_list<const Tensor*> inputs) {
    out.set_requires_grad(true);
    out.node()->ensure_grad();
    for (const Tensor* t : inputs) {
        if ((*t).requires_grad()) (*t).node()->ensure_grad();
    }
}

// ---- generic elementwise machinery ----

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
    require_same_shape(name, a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    if (recording(a, b)) {
        arm(out, {&a, &b});
        Node an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, bwd, n] {
            for (std::size_t i = 0; i < n; ++i) {
                double da = 0.0, db = 0.0;
                bwd(on->grad[i], an->value[i], bn->value[i], on->value[i], da, db);
                if (an->requires_grad) an->grad[i] += da;
                if (bn->requires_grad) bn->grad[i] += db;
            }
        });
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    const double* px = x.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, bwd, n] {
            for (std::size_t i = 0; i < n; ++i) {
                xn->grad[i] += bwd(on->grad[i], xn->value[i], on->value[i]);
            }
        });
    }
    return out;
}

double stable_sigmoid(double x) {
    double r;
    if (x >= 0.0) {
        const double e = std::exp(-x);
        r = 1.0 / (1.0 + e);
    } else {
        const double e = std::exp(x);
        r = e / (1.0 + e);
    }
    // keep the output strictly inside (0, 1)
    if (r <= 0.0) r = std::numeric_limits<double>::min();
    if (r >= 1.0) r = std::nextafter(1.0, 0.0);
    return r;
}

// Broadcast layout of batched matmul operands.
struct BatchPlan {
    std::size_t count = 1;              // number of output batch blocks
    Shape out_batch;
    std::vector<std::size_t> a_stride;  // per out-batch dim, in blocks
    std::vector<std::size_t> b_stride;
};

BatchPlan plan_batches(const char* op, const Shape& sa, const Shape& sb) {
    const std::size_t la = sa.size() - 2, lb = sb.size() - 2;
    const std::size_t l = std::max(la, lb);
    BatchPlan plan;
    plan.out_batch.resize(l);
    std::vector<std::size_t> da(l, 1), db(l, 1);
    for (std::size_t i = 0; i < l; ++i) {
        if (i >= l - la) da[i] = sa[i - (l - la)];
        if (i >= l - lb) db[i] = sb[i - (l - lb)];
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
            throw ShapeError(std::string(op) + ": batch extents incompatible " +
                             shape_str(sa) + " vs " + shape_str(sb));
        }
        plan.out_batch[i] = std::max(da[i], db[i]);
        plan.count *= plan.out_batch[i];
    }
    plan.a_stride.assign(l, 0);
    plan.b_stride.assign(l, 0);
    std::size_t acca = 1, accb = 1;
    for (std::size_t i = l; i-- > 0;) {
        plan.a_stride[i] = (da[i] == 1) ? 0 : acca;
        plan.b_stride[i] = (db[i] == 1) ? 0 : accb;
        acca *= da[i];
        accb *= db[i];
    }
    return plan;
}

void batch_offsets(const BatchPlan& plan, std::size_t beta, std::size_t& a_block,
                   std::size_t& b_block) {
    a_block = 0;
    b_block = 0;
    for (std::size_t i = plan.out_batch.size(); i-- > 0;) {
        const std::size_t digit = beta % plan.out_batch[i];
        beta /= plan.out_batch[i];
        a_block += digit * plan.a_stride[i];
        b_block += digit * plan.b_stride[i];
    }
}

Tensor matmul_impl(const char* op, const Tensor& a, const Tensor& b, bool nt) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError(std::string(op) + ": operands must have rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const std::size_t p = sa[sa.size() - 2], q = sa[sa.size() - 1];
    const std::size_t br = nt ? sb[sb.size() - 2] : sb[sb.size() - 1];
    const std::size_t bq = nt ? sb[sb.size() - 1] : sb[sb.size() - 2];
    if (q != bq) {
        throw ShapeError(std::string(op) + ": inner extents differ, " +
                         shape_str(sa) + " x " + shape_str(sb));
    }
    const std::size_t r = br;
    BatchPlan plan = plan_batches(op, sa, sb);

    Shape out_shape = plan.out_batch;
    out_shape.push_back(p);
    out_shape.push_back(r);
    Tensor out = Tensor::zeros(out_shape);

    const std::size_t asz = p * q, bsz = q * r, osz = p * r;
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t beta = 0; beta < plan.count; ++beta) {
        std::size_t ab, bb;
        batch_offsets(plan, beta, ab, bb);
        const double* A = pa + ab * asz;
        const double* B = pb + bb * bsz;
        double* O = po + beta * osz;
        if (!nt) {
            for (std::size_t i = 0; i < p; ++i) {
                double* orow = O + i * r;
                const double* arow = A + i * q;
                for (std::size_t k = 0; k < q; ++k) {
                    const double aik = arow[k];
                    const double* brow = B + k * r;
                    for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
                }
            }
        } else {
            for (std::size_t i = 0; i < p; ++i) {
                const double* arow = A + i * q;
                double* orow = O + i * r;
                for (std::size_t j = 0; j < r; ++j) {
                    const double* brow = B + j * q;
                    double s = 0.0;
                    for (std::size_t k = 0; k < q; ++k) s += arow[k] * brow[k];
                    orow[j] = s;
                }
            }
        }
    }

    if (recording(a, b)) {
        arm(out, {&a, &b});
        Node an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, plan, p, q, r, asz, bsz, osz, nt] {
            for (std::size_t beta = 0; beta < plan.count; ++beta) {
                std::size_t ab, bb;
                batch_offsets(plan, beta, ab, bb);
                const double* A = an->value.data() + ab * asz;
                const double* B = bn->value.data() + bb * bsz;
                const double* G = on->grad.data() + beta * osz;
                if (an->requires_grad) {
                    double* dA = an->grad.data() + ab * asz;
                    if (!nt) {
                        // dA = G * B^T
                        for (std::size_t i = 0; i < p; ++i) {
                            const double* grow = G + i * r;
                            double* darow = dA + i * q;
                            for (std::size_t k = 0; k < q; ++k) {
                                const double* brow = B + k * r;
                                double s = 0.0;
                                for (std::size_t j = 0; j < r; ++j) s += grow[j] * brow[j];
                                darow[k] += s;
                            }
                        }
                    } else {
                        // dA = G * B
                        for (std::size_t i = 0; i < p; ++i) {
                            const double* grow = G + i * r;
                            double* darow = dA + i * q;
                            for (std::size_t j = 0; j < r; ++j) {
                                const double g = grow[j];
                                const double* brow = B + j * q;
                                for (std::size_t k = 0; k < q; ++k) darow[k] += g * brow[k];
                            }
                        }
                    }
                }
                if (bn->requires_grad) {
                    double* dB = bn->grad.data() + bb * bsz;
                    if (!nt) {
                        // dB = A^T * G
                        for (std::size_t i = 0; i < p; ++i) {
                            const double* arow = A + i * q;
                            const double* grow = G + i * r;
                            for (std::size_t k = 0; k < q; ++k) {
                                const double aik = arow[k];
                                double* dbrow = dB + k * r;
                                for (std::size_t j = 0; j < r; ++j) dbrow[j] += aik * grow[j];
                            }
                        }
                    } else {
                        // dB = G^T * A
                        for (std::size_t i = 0; i < p; ++i) {
                            const double* arow = A + i * q;
                            const double* grow = G + i * r;
                            for (std::size_t j = 0; j < r; ++j) {
                                const double g = grow[j];
                                double* dbrow = dB + j * q;
                                for (std::size_t k = 0; k < q; ++k) dbrow[k] += g * arow[k];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

} // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double, double y, double o, double& da, double& db) {
            da = g / y;
            db = -g * o / y;
        });
}

Tensor scalar_mul(const Tensor& a, double c) {
    return unary_elementwise(
        a, [c](double x) { return c * x; },
        [c](double g, double, double) { return g * c; });
}

Tensor scalar_add(const Tensor& a, double c) {
    return unary_elementwise(
        a, [c](double x) { return x + c; },
        [](double g, double, double) { return g; });
}

// ---- activations ----

Tensor sigmoid(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return stable_sigmoid(v); },
        [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor tanh_act(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return std::tanh(v); },
        [](double g, double, double y) {
            double d = g * (1.0 - y * y);
            if (debug::corrupt_tanh_adjoint) d *= 2.0;
            return d;
        });
}

Tensor relu(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

// ---- structure ----

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor out = Tensor::from_data(std::move(shape), x.values());
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on] {
            const std::size_t n = xn->value.size();
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.rank();
    if (perm.size() != rank) throw ShapeError("permute: perm rank mismatch");
    std::vector<bool> seen(rank, false);
    for (std::size_t p : perm) {
        if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
    Tensor out = Tensor::zeros(out_shape);

    // contrib[j]: output stride of input dim j
    std::vector<std::size_t> out_stride(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) out_stride[i] = out_stride[i + 1] * out_shape[i + 1];
    std::vector<std::size_t> contrib(rank, 0);
    for (std::size_t i = 0; i < rank; ++i) contrib[perm[i]] = out_stride[i];

    const Shape in_shape = x.shape();
    const std::size_t n = x.numel();
    auto for_each_pair = [in_shape, contrib, n, rank](double* dst, const double* src,
                                                      bool accumulate) {
        std::vector<std::size_t> digits(rank, 0);
        std::size_t lin_out = 0;
        for (std::size_t lin_in = 0; lin_in < n; ++lin_in) {
            if (accumulate) {
                dst[lin_in] += src[lin_out];
            } else {
                dst[lin_out] = src[lin_in];
            }
            for (std::size_t j = rank; j-- > 0;) {
                ++digits[j];
                lin_out += contrib[j];
                if (digits[j] < in_shape[j]) break;
                lin_out -= in_shape[j] * contrib[j];
                digits[j] = 0;
            }
        }
    };

    for_each_pair(out.values().data(), x.values().data(), /*accumulate=*/false);

    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, for_each_pair] {
            for_each_pair(xn->grad.data(), on->grad.data(), /*accumulate=*/true);
        });
    }
    return out;
}

Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("transpose: rank must be >= 2");
    std::vector<std::size_t> perm(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i) perm[i] = i;
    std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
    return permute(x, perm);
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 1) {
        throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ShapeError("concat: leading extents differ " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
        }
    }
    const std::size_t p = a.dim(a.rank() - 1), q = b.dim(b.rank() - 1);
    const std::size_t rows = a.numel() / p;
    Shape out_shape = a.shape();
    out_shape.back() = p + q;
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(out.values().data() + r * (p + q), a.values().data() + r * p,
                    p * sizeof(double));
        std::memcpy(out.values().data() + r * (p + q) + p, b.values().data() + r * q,
                    q * sizeof(double));
    }
    if (recording(a, b)) {
        arm(out, {&a, &b});
        Node an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, rows, p, q] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = on->grad.data() + r * (p + q);
                if (an->requires_grad) {
                    for (std::size_t i = 0; i < p; ++i) an->grad[r * p + i] += g[i];
                }
                if (bn->requires_grad) {
                    for (std::size_t i = 0; i < q; ++i) bn->grad[r * q + i] += g[p + i];
                }
            }
        });
    }
    return out;
}

// ---- broadcast arithmetic ----

namespace {

template <bool Multiply>
Tensor channels_op(const char* name, const Tensor& x, const Tensor& v) {
    if (x.rank() < 1 || v.numel() != x.dim(0)) {
        throw ShapeError(std::string(name) + ": v " + shape_str(v.shape()) +
                         " does not match dim0 of " + shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0), tail = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.values().data();
    const double* pv = v.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t t = 0; t < tail; ++t) {
            po[i * tail + t] =
                Multiply ? px[i * tail + t] * pv[i] : px[i * tail + t] + pv[i];
        }
    }
    if (recording(x, v)) {
        arm(out, {&x, &v});
        Node xn = x.node(), vn = v.node(), on = out.node();
        Tape::active()->record([xn, vn, on, c, tail] {
            for (std::size_t i = 0; i < c; ++i) {
                for (std::size_t t = 0; t < tail; ++t) {
                    const double g = on->grad[i * tail + t];
                    if (xn->requires_grad) {
                        xn->grad[i * tail + t] += Multiply ? g * vn->value[i] : g;
                    }
                    if (vn->requires_grad) {
                        vn->grad[i] += Multiply ? g * xn->value[i * tail + t] : g;
                    }
                }
            }
        });
    }
    return out;
}

template <bool Multiply>
Tensor features_op(const char* name, const Tensor& x, const Tensor& v) {
    const Shape& sx = x.shape();
    const Shape& sv = v.shape();
    if (sv.size() > sx.size() ||
        !std::equal(sv.rbegin(), sv.rend(), sx.rbegin())) {
        throw ShapeError(std::string(name) + ": v " + shape_str(sv) +
                         " is not a trailing suffix of " + shape_str(sx));
    }
    const std::size_t f = v.numel(), lead = x.numel() / f;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.values().data();
    const double* pv = v.values().data();
    double* po = out.values().data();
    for (std::size_t l = 0; l < lead; ++l) {
        for (std::size_t i = 0; i < f; ++i) {
            po[l * f + i] = Multiply ? px[l * f + i] * pv[i] : px[l * f + i] + pv[i];
        }
    }
    if (recording(x, v)) {
        arm(out, {&x, &v});
        Node xn = x.node(), vn = v.node(), on = out.node();
        Tape::active()->record([xn, vn, on, lead, f] {
            for (std::size_t l = 0; l < lead; ++l) {
                for (std::size_t i = 0; i < f; ++i) {
                    const double g = on->grad[l * f + i];
                    if (xn->requires_grad) {
                        xn->grad[l * f + i] += Multiply ? g * vn->value[i] : g;
                    }
                    if (vn->requires_grad) {
                        vn->grad[i] += Multiply ? g * xn->value[l * f + i] : g;
                    }
                }
            }
        });
    }
    return out;
}

} // namespace

Tensor scale_channels(const Tensor& x, const Tensor& v) {
    return channels_op<true>("scale_channels", x, v);
}
Tensor shift_channels(const Tensor& x, const Tensor& v) {
    return channels_op<false>("shift_channels", x, v);
}
Tensor scale_features(const Tensor& x, const Tensor& v) {
    return features_op<true>("scale_features", x, v);
}
Tensor shift_features(const Tensor& x, const Tensor& v) {
    return features_op<false>("shift_features", x, v);
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    return matmul_impl("matmul", a, b, /*nt=*/false);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    return matmul_impl("matmul_nt", a, b, /*nt=*/true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1) {
        throw ShapeError("linear: want x[..xp], w[pxq], b[q], got " +
                         shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                         shape_str(b.shape()));
    }
    const std::size_t p = w.dim(0), q = w.dim(1);
    if (x.dim(x.rank() - 1) != p || b.dim(0) != q) {
        throw ShapeError("linear: extents do not align, x " + shape_str(x.shape()) +
                         ", w " + shape_str(w.shape()) + ", b " + shape_str(b.shape()));
    }
    const std::size_t rows = x.numel() / p;
    Shape out_shape = x.shape();
    out_shape.back() = q;
    Tensor out = Tensor::zeros(out_shape);
    const double* px = x.values().data();
    const double* pw = w.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* orow = po + r * q;
        for (std::size_t j = 0; j < q; ++j) orow[j] = pb[j];
        const double* xrow = px + r * p;
        for (std::size_t k = 0; k < p; ++k) {
            const double xk = xrow[k];
            const double* wrow = pw + k * q;
            for (std::size_t j = 0; j < q; ++j) orow[j] += xk * wrow[j];
        }
    }
    if (recording(x, w, b)) {
        arm(out, {&x, &w, &b});
        Node xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
        Tape::active()->record([xn, wn, bn, on, rows, p, q] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = on->grad.data() + r * q;
                const double* xrow = xn->value.data() + r * p;
                if (xn->requires_grad) {
                    double* dx = xn->grad.data() + r * p;
                    for (std::size_t k = 0; k < p; ++k) {
                        const double* wrow = wn->value.data() + k * q;
                        double s = 0.0;
                        for (std::size_t j = 0; j < q; ++j) s += grow[j] * wrow[j];
                        dx[k] += s;
                    }
                }
                if (wn->requires_grad) {
                    for (std::size_t k = 0; k < p; ++k) {
                        const double xk = xrow[k];
                        double* dw = wn->grad.data() + k * q;
                        for (std::size_t j = 0; j < q; ++j) dw[j] += xk * grow[j];
                    }
                }
                if (bn->requires_grad) {
                    for (std::size_t j = 0; j < q; ++j) bn->grad[j] += grow[j];
                }
            }
        });
    }
    return out;
}

// ---- reductions ----

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on] {
            const double g = on->grad[0];
            for (double& d : xn->grad) d += g;
        });
    }
    return out;
}

Tensor mean_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("mean_lastdim: rank must be >= 1");
    const std::size_t k = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / k;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) s += x.values()[r * k + i];
        out.values()[r] = s / static_cast<double>(k);
    }
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, rows, k] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double g = on->grad[r] / static_cast<double>(k);
                for (std::size_t i = 0; i < k; ++i) xn->grad[r * k + i] += g;
            }
        });
    }
    return out;
}

Tensor masked_mean_dim0(const Tensor& x, const Mask& mask) {
    if (x.rank() < 2) throw ShapeError("masked_mean_dim0: rank must be >= 2");
    if (mask.size() != x.dim(0)) {
        throw ShapeError("masked_mean_dim0: mask length " + std::to_string(mask.size()) +
                         " vs dim0 " + std::to_string(x.dim(0)));
    }
    std::size_t count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    if (count == 0) throw ContractError("masked_mean_dim0: no unmasked rows");
    const std::size_t n = x.dim(0), tail = x.numel() / n;
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        for (std::size_t t = 0; t < tail; ++t) out.values()[t] += x.values()[i * tail + t];
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (double& v : out.values()) v *= inv;
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, mask, n, tail, inv] {
            for (std::size_t i = 0; i < n; ++i) {
                if (!mask[i]) continue;
                for (std::size_t t = 0; t < tail; ++t) {
                    xn->grad[i * tail + t] += on->grad[t] * inv;
                }
            }
        });
    }
    return out;
}

Tensor norm_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("norm_lastdim: rank must be >= 1");
    const std::size_t k = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / k;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double v = x.values()[r * k + i];
            s += v * v;
        }
        out.values()[r] = std::sqrt(s);
    }
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, rows, k] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double nrm = on->value[r];
                if (nrm == 0.0) continue;
                const double g = on->grad[r] / nrm;
                for (std::size_t i = 0; i < k; ++i) {
                    xn->grad[r * k + i] += g * xn->value[r * k + i];
                }
            }
        });
    }
    return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ContractError("stack_rows: no rows");
    const std::size_t len = rows[0].numel();
    for (const Tensor& r : rows) {
        if (r.numel() != len) {
            throw ShapeError("stack_rows: row sizes differ, " + std::to_string(len) + " vs " +
                             std::to_string(r.numel()));
        }
    }
    Tensor out = Tensor::zeros({rows.size(), len});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::memcpy(out.values().data() + i * len, rows[i].values().data(),
                    len * sizeof(double));
    }
    bool any_grad = false;
    for (const Tensor& r : rows) any_grad = any_grad || r.requires_grad();
    if (Tape::active() && any_grad) {
        out.set_requires_grad(true);
        out.node()->ensure_grad();
        std::vector<Node> row_nodes;
        row_nodes.reserve(rows.size());
        for (const Tensor& r : rows) {
            if (r.requires_grad()) r.node()->ensure_grad();
            row_nodes.push_back(r.node());
        }
        Node on = out.node();
        Tape::active()->record([row_nodes, on, len] {
            for (std::size_t i = 0; i < row_nodes.size(); ++i) {
                if (!row_nodes[i]->requires_grad) continue;
                const double* g = on->grad.data() + i * len;
                for (std::size_t j = 0; j < len; ++j) row_nodes[i]->grad[j] += g[j];
            }
        });
    }
    return out;
}

// ---- attention pieces ----

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax: rank must be >= 1");
    const std::size_t k = x.dim(x.rank() - 1);
    if (k < 1) throw ShapeError("softmax: empty last dimension");
    const std::size_t rows = x.numel() / k;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.values().data();
    double* po = out.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xrow = px + r * k;
        double* orow = po + r * k;
        double mx = xrow[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, xrow[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            orow[i] = std::exp(xrow[i] - mx);
            sum += orow[i];
        }
        for (std::size_t i = 0; i < k; ++i) orow[i] /= sum;
    }
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, rows, k] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * k;
                const double* g = on->grad.data() + r * k;
                double dot = 0.0;
                for (std::size_t i = 0; i < k; ++i) dot += g[i] * y[i];
                for (std::size_t i = 0; i < k; ++i) {
                    xn->grad[r * k + i] += y[i] * (g[i] - dot);
                }
            }
        });
    }
    return out;
}

Tensor mask_scores(const Tensor& scores, const Mask& key_mask) {
    if (scores.rank() < 1 || scores.dim(scores.rank() - 1) != key_mask.size()) {
        throw ShapeError("mask_scores: last extent " + shape_str(scores.shape()) +
                         " vs mask length " + std::to_string(key_mask.size()));
    }
    constexpr double kMaskedScore = -1e30;
    const std::size_t k = key_mask.size();
    const std::size_t rows = scores.numel() / k;
    Tensor out = Tensor::zeros(scores.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < k; ++i) {
            out.values()[r * k + i] =
                key_mask[i] ? scores.values()[r * k + i] : kMaskedScore;
        }
    }
    if (recording(scores)) {
        arm(out, {&scores});
        Node xn = scores.node(), on = out.node();
        Tape::active()->record([xn, on, key_mask, rows, k] {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t i = 0; i < k; ++i) {
                    if (key_mask[i]) xn->grad[r * k + i] += on->grad[r * k + i];
                }
            }
        });
    }
    return out;
}

// ---- nn layers ----

Tensor conv1d(const Tensor& x, const Tensor& kernels, std::size_t stride) {
    if (x.rank() != 2 || kernels.rank() != 3) {
        throw ShapeError("conv1d: want x[CxL], kernels[OxCxK], got " +
                         shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
    }
    const std::size_t c = x.dim(0), len = x.dim(1);
    const std::size_t o = kernels.dim(0), kc = kernels.dim(1), k = kernels.dim(2);
    if (kc != c) {
        throw ShapeError("conv1d: channel mismatch x " + shape_str(x.shape()) +
                         " vs kernels " + shape_str(kernels.shape()));
    }
    if (k > len) {
        throw ShapeError("conv1d: kernel length " + std::to_string(k) +
                         " exceeds input length " + std::to_string(len));
    }
    if (stride == 0) throw ContractError("conv1d: stride must be >= 1");
    const std::size_t out_len = (len - k) / stride + 1;
    Tensor out = Tensor::zeros({o, out_len});
    const double* px = x.values().data();
    const double* pk = kernels.values().data();
    double* po = out.values().data();
    for (std::size_t oc = 0; oc < o; ++oc) {
        for (std::size_t t = 0; t < out_len; ++t) {
            double s = 0.0;
            const std::size_t base = t * stride;
            for (std::size_t ic = 0; ic < c; ++ic) {
                const double* xrow = px + ic * len + base;
                const double* krow = pk + (oc * c + ic) * k;
                for (std::size_t i = 0; i < k; ++i) s += xrow[i] * krow[i];
            }
            po[oc * out_len + t] = s;
        }
    }
    if (recording(x, kernels)) {
        arm(out, {&x, &kernels});
        Node xn = x.node(), kn = kernels.node(), on = out.node();
        Tape::active()->record([xn, kn, on, c, len, o, k, stride, out_len] {
            for (std::size_t oc = 0; oc < o; ++oc) {
                for (std::size_t t = 0; t < out_len; ++t) {
                    const double g = on->grad[oc * out_len + t];
                    if (g == 0.0) continue;
                    const std::size_t base = t * stride;
                    for (std::size_t ic = 0; ic < c; ++ic) {
                        const std::size_t xoff = ic * len + base;
                        const std::size_t koff = (oc * c + ic) * k;
                        for (std::size_t i = 0; i < k; ++i) {
                            if (xn->requires_grad) {
                                xn->grad[xoff + i] += g * kn->value[koff + i];
                            }
                            if (kn->requires_grad) {
                                kn->grad[koff + i] += g * xn->value[xoff + i];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride_h,
              std::size_t stride_w) {
    if (x.rank() != 3 || kernels.rank() != 4) {
        throw ShapeError("conv2d: want x[CxHxW], kernels[OxCxKhxKw], got " +
                         shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
    }
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t o = kernels.dim(0), kc = kernels.dim(1);
    const std::size_t kh = kernels.dim(2), kw = kernels.dim(3);
    if (kc != c) {
        throw ShapeError("conv2d: channel mismatch x " + shape_str(x.shape()) +
                         " vs kernels " + shape_str(kernels.shape()));
    }
    if (kh > h || kw > w) {
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds input " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (stride_h == 0 || stride_w == 0) throw ContractError("conv2d: strides must be >= 1");
    const std::size_t oh = (h - kh) / stride_h + 1;
    const std::size_t ow = (w - kw) / stride_w + 1;
    Tensor out = Tensor::zeros({o, oh, ow});
    for (std::size_t oc = 0; oc < o; ++oc) {
        for (std::size_t ty = 0; ty < oh; ++ty) {
            for (std::size_t tx = 0; tx < ow; ++tx) {
                double s = 0.0;
                for (std::size_t ic = 0; ic < c; ++ic) {
                    for (std::size_t iy = 0; iy < kh; ++iy) {
                        const double* xrow =
                            x.values().data() + (ic * h + ty * stride_h + iy) * w + tx * stride_w;
                        const double* krow =
                            kernels.values().data() + ((oc * c + ic) * kh + iy) * kw;
                        for (std::size_t ix = 0; ix < kw; ++ix) s += xrow[ix] * krow[ix];
                    }
                }
                out.values()[(oc * oh + ty) * ow + tx] = s;
            }
        }
    }
    if (recording(x, kernels)) {
        arm(out, {&x, &kernels});
        Node xn = x.node(), kn = kernels.node(), on = out.node();
        Tape::active()->record([xn, kn, on, c, h, w, o, kh, kw, stride_h, stride_w, oh, ow] {
            for (std::size_t oc = 0; oc < o; ++oc) {
                for (std::size_t ty = 0; ty < oh; ++ty) {
                    for (std::size_t tx = 0; tx < ow; ++tx) {
                        const double g = on->grad[(oc * oh + ty) * ow + tx];
                        if (g == 0.0) continue;
                        for (std::size_t ic = 0; ic < c; ++ic) {
                            for (std::size_t iy = 0; iy < kh; ++iy) {
                                const std::size_t xoff =
                                    (ic * h + ty * stride_h + iy) * w + tx * stride_w;
                                const std::size_t koff = ((oc * c + ic) * kh + iy) * kw;
                                for (std::size_t ix = 0; ix < kw; ++ix) {
                                    if (xn->requires_grad) {
                                        xn->grad[xoff + ix] += g * kn->value[koff + ix];
                                    }
                                    if (kn->requires_grad) {
                                        kn->grad[koff + ix] += g * xn->value[xoff + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor max_pool1d(const Tensor& x, std::size_t window, std::size_t stride) {
    if (x.rank() != 2) throw ShapeError("max_pool1d: want x[CxL], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), len = x.dim(1);
    if (window == 0 || stride == 0 || window > len) {
        throw ShapeError("max_pool1d: window " + std::to_string(window) +
                         " incompatible with length " + std::to_string(len));
    }
    const std::size_t out_len = (len - window) / stride + 1;
    Tensor out = Tensor::zeros({c, out_len});
    auto arg = std::make_shared<std::vector<std::size_t>>(c * out_len);
    for (std::size_t ic = 0; ic < c; ++ic) {
        for (std::size_t t = 0; t < out_len; ++t) {
            std::size_t best = ic * len + t * stride;
            double v = x.values()[best];
            for (std::size_t i = 1; i < window; ++i) {
                const std::size_t idx = ic * len + t * stride + i;
                if (x.values()[idx] > v) {
                    v = x.values()[idx];
                    best = idx;
                }
            }
            out.values()[ic * out_len + t] = v;
            (*arg)[ic * out_len + t] = best;
        }
    }
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, arg] {
            for (std::size_t i = 0; i < arg->size(); ++i) {
                xn->grad[(*arg)[i]] += on->grad[i];
            }
        });
    }
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding: table must be Vxd, got " + shape_str(table.shape()));
    }
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw ContractError("embedding: id " + std::to_string(id) +
                                " out of range [0, " + std::to_string(v) + ")");
        }
    }
    Tensor out = Tensor::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(out.values().data() + i * d,
                    table.values().data() + static_cast<std::size_t>(ids[i]) * d,
                    d * sizeof(double));
    }
    if (recording(table)) {
        arm(out, {&table});
        Node tn = table.node(), on = out.node();
        const std::vector<int> idcopy = ids;
        Tape::active()->record([tn, on, idcopy, d] {
            for (std::size_t i = 0; i < idcopy.size(); ++i) {
                double* dst = tn->grad.data() + static_cast<std::size_t>(idcopy[i]) * d;
                const double* g = on->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    const std::size_t k = x.dim(x.rank() - 1);
    if (gain.numel() != k || bias.numel() != k) {
        throw ShapeError("layer_norm: gain/bias extent must match last dim " +
                         std::to_string(k));
    }
    const std::size_t rows = x.numel() / k;
    Tensor out = Tensor::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xrow = x.values().data() + r * k;
        double mean = 0.0;
        for (std::size_t i = 0; i < k; ++i) mean += xrow[i];
        mean /= static_cast<double>(k);
        double var = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double d = xrow[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(k);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t i = 0; i < k; ++i) {
            const double xh = (xrow[i] - mean) * is;
            (*xhat)[r * k + i] = xh;
            out.values()[r * k + i] = gain.values()[i] * xh + bias.values()[i];
        }
    }
    if (recording(x, gain, bias)) {
        arm(out, {&x, &gain, &bias});
        Node xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape::active()->record([xn, gn, bn, on, xhat, inv_std, rows, k] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = on->grad.data() + r * k;
                const double* xh = xhat->data() + r * k;
                if (gn->requires_grad || bn->requires_grad) {
                    for (std::size_t i = 0; i < k; ++i) {
                        if (gn->requires_grad) gn->grad[i] += g[i] * xh[i];
                        if (bn->requires_grad) bn->grad[i] += g[i];
                    }
                }
                if (xn->requires_grad) {
                    double sum_gy = 0.0, sum_gy_xh = 0.0;
                    for (std::size_t i = 0; i < k; ++i) {
                        const double gy = g[i] * gn->value[i];
                        sum_gy += gy;
                        sum_gy_xh += gy * xh[i];
                    }
                    const double inv_k = 1.0 / static_cast<double>(k);
                    for (std::size_t i = 0; i < k; ++i) {
                        const double gy = g[i] * gn->value[i];
                        xn->grad[r * k + i] +=
                            (gy - sum_gy * inv_k - xh[i] * sum_gy_xh * inv_k) * (*inv_std)[r];
                    }
                }
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto mask = std::make_shared<std::vector<double>>(x.numel());
    for (double& m : *mask) m = (unif(rng) >= rate) ? keep_scale : 0.0;
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out.values()[i] = x.values()[i] * (*mask)[i];
    }
    if (recording(x)) {
        arm(out, {&x});
        Node xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, mask] {
            for (std::size_t i = 0; i < mask->size(); ++i) {
                xn->grad[i] += on->grad[i] * (*mask)[i];
            }
        });
    }
    return out;
}

} // namespace mman
