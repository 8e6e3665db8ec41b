#include "histovit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "histovit/error.hpp"
#include "histovit/kernels.hpp"

namespace histovit {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

struct OpAccess {
    static const Impl& impl(const Tensor& t) { return t.impl_; }
    static Tensor wrap(Impl impl) { return Tensor(std::move(impl)); }
};

namespace detail {
void tape_push(Tape& tape, std::function<void()> step) { tape.steps_.push_back(std::move(step)); }
}  // namespace detail

namespace {

const double kInvSqrt2 = 0.70710678118654752440084436210485;
const double kInvSqrt2Pi = 0.39894228040143267793994605993438;

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Impl make_impl(std::vector<std::size_t> shape, double fill) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(numel(shape), fill);
    impl->shape = std::move(shape);
    return impl;
}

const Impl& impl_of(const Tensor& t) {
    if (!t.defined()) throw Error(ErrorCategory::state, "operation on an undefined tensor");
    return OpAccess::impl(t);
}

bool flows(const TensorImpl& t) { return t.requires_grad || t.tracked; }

bool should_record(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs) {
        if (flows(*impl_of(*t))) return true;
    }
    return false;
}

void require_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2)
        throw Error(ErrorCategory::shape,
                    std::string(who) + " expects a 2-d tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw Error(ErrorCategory::shape, std::string(who) + " shape mismatch: " +
                                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_finite(const Tensor& t, const char* who) {
    for (double v : t.values()) {
        if (!std::isfinite(v))
            throw Error(ErrorCategory::numeric, std::string(who) + ": non-finite input value");
    }
}

// Rows/width view of the trailing axis, treating rank-1 as a single row.
std::pair<std::size_t, std::size_t> rows_width(const Tensor& t) {
    const auto& s = t.shape();
    if (s.empty()) throw Error(ErrorCategory::shape, "expected at least one axis");
    std::size_t w = s.back();
    return {t.size() / w, w};
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    auto impl = make_impl(std::move(shape), 0.0);
    impl->requires_grad = requires_grad;
    return OpAccess::wrap(std::move(impl));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    auto impl = make_impl(std::move(shape), value);
    impl->requires_grad = requires_grad;
    return OpAccess::wrap(std::move(impl));
}

Tensor Tensor::from_vector(std::vector<std::size_t> shape, std::vector<double> values,
                           bool requires_grad) {
    if (numel(shape) != values.size())
        throw Error(ErrorCategory::shape, "from_vector: " + shape_str(shape) + " needs " +
                                              std::to_string(numel(shape)) + " values, got " +
                                              std::to_string(values.size()));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return OpAccess::wrap(std::move(impl));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

const std::vector<std::size_t>& Tensor::shape() const { return impl_of(*this)->shape; }

std::size_t Tensor::size() const { return impl_of(*this)->data.size(); }

std::span<const double> Tensor::values() const { return impl_of(*this)->data; }

std::span<double> Tensor::mutable_values() { return impl_of(*this)->data; }

double Tensor::item() const {
    if (size() != 1)
        throw Error(ErrorCategory::shape, "item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_of(*this)->data.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
    const auto& impl = impl_of(*this);
    if (impl->shape.size() != 2) throw Error(ErrorCategory::shape, "at(i,j) needs a 2-d tensor");
    return impl->data.at(i * impl->shape[1] + j);
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    const auto& impl = impl_of(*this);
    if (impl->shape.size() != 3) throw Error(ErrorCategory::shape, "at(i,j,k) needs a 3-d tensor");
    return impl->data.at((i * impl->shape[1] + j) * impl->shape[2] + k);
}

bool Tensor::requires_grad() const { return impl_of(*this)->requires_grad; }

void Tensor::set_requires_grad(bool value) { impl_of(*this)->requires_grad = value; }

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    const auto& impl = impl_of(*this);
    if (impl->grad.empty())
        throw Error(ErrorCategory::state, "gradient not populated; run backward first");
    return impl->grad;
}

std::span<double> Tensor::mutable_grad() {
    impl_of(*this)->ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (defined() && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::tracked() const { return impl_of(*this)->tracked; }

Tensor Tensor::clone() const {
    const auto& impl = impl_of(*this);
    auto copy = std::make_shared<TensorImpl>();
    copy->shape = impl->shape;
    copy->data = impl->data;
    copy->requires_grad = impl->requires_grad;
    return OpAccess::wrap(std::move(copy));
}

// ---------------------------------------------------------------------------
// Tape

void Tape::backward(const Tensor& loss) {
    const auto& impl = impl_of(loss);
    if (impl->data.size() != 1)
        throw Error(ErrorCategory::shape,
                    "backward requires a scalar loss, got " + shape_str(impl->shape));
    if (!impl->tracked)
        throw Error(ErrorCategory::state, "backward on a loss that was not recorded on a tape");
    impl->ensure_grad();
    impl->grad[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// Op helpers

namespace {

// Marks the output tracked and registers the backward step.
void record(Tape* tape, const Tensor& out, std::function<void()> step) {
    impl_of(out)->tracked = true;
    detail::tape_push(*tape, std::move(step));
}

// True when the upstream node has received any gradient; nodes off the path
// to the loss never allocate one.
bool has_upstream(const Impl& out) { return !out->grad.empty(); }

}  // namespace

// ---------------------------------------------------------------------------
// matmul / transpose

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw Error(ErrorCategory::shape, "matmul inner dimensions disagree: " +
                                              shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    const auto& ops = kernels::active();
    ops.gemm_nn(a.values().data(), b.values().data(), out.mutable_values().data(), m, k, n, false);

    if (should_record(tape, {&a, &b})) {
        Impl ai = impl_of(a), bi = impl_of(b), oi = impl_of(out);
        record(tape, out, [ai, bi, oi, m, k, n]() {
            if (!has_upstream(oi)) return;
            const auto& ker = kernels::active();
            if (flows(*ai)) {
                ai->ensure_grad();
                std::vector<double> bt(k * n);
                ker.transpose(bi->data.data(), bt.data(), k, n);  // -> [n x k]
                ker.gemm_nn(oi->grad.data(), bt.data(), ai->grad.data(), m, n, k, true);
            }
            if (flows(*bi)) {
                bi->ensure_grad();
                std::vector<double> at(m * k);
                ker.transpose(ai->data.data(), at.data(), m, k);  // -> [k x m]
                ker.gemm_nn(at.data(), oi->grad.data(), bi->grad.data(), k, m, n, true);
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a, Tape* tape) {
    require_rank2(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({c, r});
    kernels::active().transpose(a.values().data(), out.mutable_values().data(), r, c);
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, r, c]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            std::vector<double> gt(r * c);
            kernels::active().transpose(oi->grad.data(), gt.data(), c, r);
            kernels::active().axpy(1.0, gt.data(), ai->grad.data(), r * c);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    kernels::active().add(a.values().data(), b.values().data(), out.mutable_values().data(),
                          a.size());
    if (should_record(tape, {&a, &b})) {
        Impl ai = impl_of(a), bi = impl_of(b), oi = impl_of(out);
        record(tape, out, [ai, bi, oi]() {
            if (!has_upstream(oi)) return;
            const std::size_t n = oi->grad.size();
            if (flows(*ai)) {
                ai->ensure_grad();
                kernels::active().axpy(1.0, oi->grad.data(), ai->grad.data(), n);
            }
            if (flows(*bi)) {
                bi->ensure_grad();
                kernels::active().axpy(1.0, oi->grad.data(), bi->grad.data(), n);
            }
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v, Tape* tape) {
    require_rank2(a, "add_rowvec");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (v.size() != c || v.rank() > 2)
        throw Error(ErrorCategory::shape, "add_rowvec: vector " + shape_str(v.shape()) +
                                              " does not match row width " + std::to_string(c));
    Tensor out = Tensor::zeros({r, c});
    const double* av = a.values().data();
    const double* vv = v.values().data();
    double* ov = out.mutable_values().data();
    for (std::size_t i = 0; i < r; ++i) {
        kernels::active().add(av + i * c, vv, ov + i * c, c);
    }
    if (should_record(tape, {&a, &v})) {
        Impl ai = impl_of(a), vi = impl_of(v), oi = impl_of(out);
        record(tape, out, [ai, vi, oi, r, c]() {
            if (!has_upstream(oi)) return;
            if (flows(*ai)) {
                ai->ensure_grad();
                kernels::active().axpy(1.0, oi->grad.data(), ai->grad.data(), r * c);
            }
            if (flows(*vi)) {
                vi->ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    kernels::active().axpy(1.0, oi->grad.data() + i * c, vi->grad.data(), c);
                }
            }
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double cval, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape());
    const double* av = a.values().data();
    double* ov = out.mutable_values().data();
    for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] + cval;
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            kernels::active().axpy(1.0, oi->grad.data(), ai->grad.data(), oi->grad.size());
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    kernels::active().mul(a.values().data(), b.values().data(), out.mutable_values().data(),
                          a.size());
    if (should_record(tape, {&a, &b})) {
        Impl ai = impl_of(a), bi = impl_of(b), oi = impl_of(out);
        record(tape, out, [ai, bi, oi]() {
            if (!has_upstream(oi)) return;
            const std::size_t n = oi->grad.size();
            if (flows(*ai)) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
            }
            if (flows(*bi)) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape());
    kernels::active().scale(a.values().data(), s, out.mutable_values().data(), a.size());
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, s]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            kernels::active().axpy(s, oi->grad.data(), ai->grad.data(), oi->grad.size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-wise nonlinearities

Tensor softmax_rows(const Tensor& a, Tape* tape) {
    require_finite(a, "softmax");
    const auto [rows, width] = rows_width(a);
    Tensor out = Tensor::zeros(a.shape());
    const double* av = a.values().data();
    double* ov = out.mutable_values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av + r * width;
        double* y = ov + r * width;
        double mx = x[0];
        for (std::size_t i = 1; i < width; ++i) mx = std::max(mx, x[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
            y[i] = std::exp(x[i] - mx);
            denom += y[i];
        }
        for (std::size_t i = 0; i < width; ++i) y[i] /= denom;
    }
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, rows, width]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = oi->data.data() + r * width;
                const double* gy = oi->grad.data() + r * width;
                double* gx = ai->grad.data() + r * width;
                double dot = 0.0;
                for (std::size_t i = 0; i < width; ++i) dot += gy[i] * y[i];
                for (std::size_t i = 0; i < width; ++i) gx[i] += y[i] * (gy[i] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax_rows(const Tensor& a, Tape* tape) {
    require_finite(a, "log_softmax");
    const auto [rows, width] = rows_width(a);
    Tensor out = Tensor::zeros(a.shape());
    const double* av = a.values().data();
    double* ov = out.mutable_values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av + r * width;
        double* y = ov + r * width;
        double mx = x[0];
        for (std::size_t i = 1; i < width; ++i) mx = std::max(mx, x[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < width; ++i) denom += std::exp(x[i] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t i = 0; i < width; ++i) y[i] = x[i] - lse;
    }
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, rows, width]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = oi->data.data() + r * width;
                const double* gy = oi->grad.data() + r * width;
                double* gx = ai->grad.data() + r * width;
                double gsum = 0.0;
                for (std::size_t i = 0; i < width; ++i) gsum += gy[i];
                for (std::size_t i = 0; i < width; ++i) gx[i] += gy[i] - std::exp(y[i]) * gsum;
            }
        });
    }
    return out;
}

namespace {

double std_normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
double std_normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

Tensor gelu(const Tensor& a, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape());
    const double* x = a.values().data();
    double* y = out.mutable_values().data();
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = x[i] * std_normal_cdf(x[i]);
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                const double xi = ai->data[i];
                ai->grad[i] += oi->grad[i] * (std_normal_cdf(xi) + xi * std_normal_pdf(xi));
            }
        });
    }
    return out;
}

Tensor gelu_tanh(const Tensor& a, Tape* tape) {
    const double c0 = 0.7978845608028653558798921198687;  // sqrt(2/pi)
    const double c1 = 0.044715;
    Tensor out = Tensor::zeros(a.shape());
    const double* x = a.values().data();
    double* y = out.mutable_values().data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double u = c0 * (x[i] + c1 * x[i] * x[i] * x[i]);
        y[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
    }
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, c0, c1]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                const double xi = ai->data[i];
                const double u = c0 * (xi + c1 * xi * xi * xi);
                const double t = std::tanh(u);
                const double sech2 = 1.0 - t * t;
                const double du = c0 * (1.0 + 3.0 * c1 * xi * xi);
                ai->grad[i] += oi->grad[i] * (0.5 * (1.0 + t) + 0.5 * xi * sech2 * du);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps, Tape* tape) {
    const auto [rows, width] = rows_width(x);
    if (gain.size() != width || bias.size() != width)
        throw Error(ErrorCategory::shape,
                    "layer_norm gain/bias must match the normalized width " +
                        std::to_string(width) + ", got " + shape_str(gain.shape()) + " and " +
                        shape_str(bias.shape()));
    Tensor out = Tensor::zeros(x.shape());
    const double* xv = x.values().data();
    const double* gv = gain.values().data();
    const double* bv = bias.values().data();
    double* yv = out.mutable_values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv + r * width;
        double* yr = yv + r * width;
        double mean = 0.0;
        for (std::size_t i = 0; i < width; ++i) mean += xr[i];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
            const double d = xr[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(width);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < width; ++i) {
            yr[i] = gv[i] * ((xr[i] - mean) * inv_std) + bv[i];
        }
    }
    if (should_record(tape, {&x, &gain, &bias})) {
        Impl xi = impl_of(x), gi = impl_of(gain), bi = impl_of(bias), oi = impl_of(out);
        record(tape, out, [xi, gi, bi, oi, rows, width, eps]() {
            if (!has_upstream(oi)) return;
            std::vector<double> xhat(width), dxhat(width);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xi->data.data() + r * width;
                const double* gy = oi->grad.data() + r * width;
                double mean = 0.0;
                for (std::size_t i = 0; i < width; ++i) mean += xr[i];
                mean /= static_cast<double>(width);
                double var = 0.0;
                for (std::size_t i = 0; i < width; ++i) {
                    const double d = xr[i] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(width);
                const double inv_std = 1.0 / std::sqrt(var + eps);
                for (std::size_t i = 0; i < width; ++i) xhat[i] = (xr[i] - mean) * inv_std;
                if (flows(*gi)) {
                    gi->ensure_grad();
                    for (std::size_t i = 0; i < width; ++i) gi->grad[i] += gy[i] * xhat[i];
                }
                if (flows(*bi)) {
                    bi->ensure_grad();
                    for (std::size_t i = 0; i < width; ++i) bi->grad[i] += gy[i];
                }
                if (flows(*xi)) {
                    xi->ensure_grad();
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t i = 0; i < width; ++i) {
                        dxhat[i] = gy[i] * gi->data[i];
                        mean_dxhat += dxhat[i];
                        mean_dxhat_xhat += dxhat[i] * xhat[i];
                    }
                    mean_dxhat /= static_cast<double>(width);
                    mean_dxhat_xhat /= static_cast<double>(width);
                    double* gx = xi->grad.data() + r * width;
                    for (std::size_t i = 0; i < width; ++i) {
                        gx[i] += inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses / reductions

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Tape* tape) {
    require_rank2(logits, "cross_entropy");
    require_finite(logits, "cross_entropy");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (targets.size() != batch)
        throw Error(ErrorCategory::shape, "cross_entropy: " + std::to_string(targets.size()) +
                                              " targets for batch " + std::to_string(batch));
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= classes)
            throw Error(ErrorCategory::label, "cross_entropy target " + std::to_string(t) +
                                                  " outside [0, " + std::to_string(classes) + ")");
    }
    const double* zv = logits.values().data();
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        const double* z = zv + r * classes;
        double mx = z[0];
        for (std::size_t i = 1; i < classes; ++i) mx = std::max(mx, z[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < classes; ++i) denom += std::exp(z[i] - mx);
        total += mx + std::log(denom) - z[targets[r]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    if (should_record(tape, {&logits})) {
        Impl zi = impl_of(logits), oi = impl_of(out);
        std::vector<int> tgt(targets.begin(), targets.end());
        record(tape, out, [zi, oi, tgt, batch, classes]() {
            if (!has_upstream(oi) || !flows(*zi)) return;
            zi->ensure_grad();
            const double g = oi->grad[0] / static_cast<double>(batch);
            for (std::size_t r = 0; r < batch; ++r) {
                const double* z = zi->data.data() + r * classes;
                double* gz = zi->grad.data() + r * classes;
                double mx = z[0];
                for (std::size_t i = 1; i < classes; ++i) mx = std::max(mx, z[i]);
                double denom = 0.0;
                for (std::size_t i = 0; i < classes; ++i) denom += std::exp(z[i] - mx);
                for (std::size_t i = 0; i < classes; ++i) {
                    const double p = std::exp(z[i] - mx) / denom;
                    const double onehot = (static_cast<std::size_t>(tgt[r]) == i) ? 1.0 : 0.0;
                    gz[i] += g * (p - onehot);
                }
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a, Tape* tape) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    Tensor out = Tensor::scalar(total);
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (double& v : ai->grad) v += g;
        });
    }
    return out;
}

Tensor weighted_sum(const Tensor& a, std::span<const double> weights, Tape* tape) {
    if (weights.size() != a.size())
        throw Error(ErrorCategory::shape, "weighted_sum: " + std::to_string(weights.size()) +
                                              " weights for " + std::to_string(a.size()) +
                                              " elements");
    const double* av = a.values().data();
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += weights[i] * av[i];
    Tensor out = Tensor::scalar(total);
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        std::vector<double> w(weights.begin(), weights.end());
        record(tape, out, [ai, oi, w = std::move(w)]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            kernels::active().axpy(oi->grad[0], w.data(), ai->grad.data(), w.size());
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape, Tape* tape) {
    if (numel(new_shape) != a.size())
        throw Error(ErrorCategory::shape, "reshape " + shape_str(a.shape()) + " -> " +
                                              shape_str(new_shape) + " changes element count");
    Tensor out = Tensor::from_vector(std::move(new_shape),
                                     {a.values().begin(), a.values().end()});
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            kernels::active().axpy(1.0, oi->grad.data(), ai->grad.data(), oi->grad.size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Slicing / concatenation

Tensor row(const Tensor& a, std::size_t index, Tape* tape) {
    require_rank2(a, "row");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (index >= r)
        throw Error(ErrorCategory::shape,
                    "row " + std::to_string(index) + " out of range for " + shape_str(a.shape()));
    Tensor out = Tensor::zeros({1, c});
    std::copy_n(a.values().data() + index * c, c, out.mutable_values().data());
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, index, c]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            kernels::active().axpy(1.0, oi->grad.data(), ai->grad.data() + index * c, c);
        });
    }
    return out;
}

Tensor cols(const Tensor& a, std::size_t first, std::size_t last, Tape* tape) {
    require_rank2(a, "cols");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (first >= last || last > c)
        throw Error(ErrorCategory::shape, "cols [" + std::to_string(first) + ", " +
                                              std::to_string(last) + ") invalid for " +
                                              shape_str(a.shape()));
    const std::size_t w = last - first;
    Tensor out = Tensor::zeros({r, w});
    const double* av = a.values().data();
    double* ov = out.mutable_values().data();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(av + i * c + first, w, ov + i * w);
    if (should_record(tape, {&a})) {
        Impl ai = impl_of(a), oi = impl_of(out);
        record(tape, out, [ai, oi, r, c, first, w]() {
            if (!has_upstream(oi) || !flows(*ai)) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                kernels::active().axpy(1.0, oi->grad.data() + i * w,
                                       ai->grad.data() + i * c + first, w);
            }
        });
    }
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts, Tape* tape) {
    if (parts.empty()) throw Error(ErrorCategory::shape, "concat_rows of nothing");
    const std::size_t c = parts.front().dim(1);
    std::size_t total_rows = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != c)
            throw Error(ErrorCategory::shape, "concat_rows width mismatch: " +
                                                  shape_str(parts.front().shape()) + " vs " +
                                                  shape_str(p.shape()));
        total_rows += p.dim(0);
    }
    Tensor out = Tensor::zeros({total_rows, c});
    double* ov = out.mutable_values().data();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.values().data(), p.size(), ov + offset);
        offset += p.size();
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || flows(*impl_of(p));
    if (tape && any) {
        std::vector<Impl> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(impl_of(p));
        Impl oi = impl_of(out);
        record(tape, out, [impls, oi]() {
            if (!has_upstream(oi)) return;
            std::size_t offset = 0;
            for (const Impl& pi : impls) {
                if (flows(*pi)) {
                    pi->ensure_grad();
                    kernels::active().axpy(1.0, oi->grad.data() + offset, pi->grad.data(),
                                           pi->data.size());
                }
                offset += pi->data.size();
            }
        });
    }
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts, Tape* tape) {
    if (parts.empty()) throw Error(ErrorCategory::shape, "concat_cols of nothing");
    const std::size_t r = parts.front().dim(0);
    std::size_t total_cols = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.dim(0) != r)
            throw Error(ErrorCategory::shape, "concat_cols height mismatch: " +
                                                  shape_str(parts.front().shape()) + " vs " +
                                                  shape_str(p.shape()));
        total_cols += p.dim(1);
    }
    Tensor out = Tensor::zeros({r, total_cols});
    double* ov = out.mutable_values().data();
    std::size_t col_offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        const double* pv = p.values().data();
        for (std::size_t i = 0; i < r; ++i) {
            std::copy_n(pv + i * w, w, ov + i * total_cols + col_offset);
        }
        col_offset += w;
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || flows(*impl_of(p));
    if (tape && any) {
        std::vector<Impl> impls;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            impls.push_back(impl_of(p));
            widths.push_back(p.dim(1));
        }
        Impl oi = impl_of(out);
        record(tape, out, [impls, widths, oi, r, total_cols]() {
            if (!has_upstream(oi)) return;
            std::size_t col_offset = 0;
            for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                const Impl& part = impls[pi];
                const std::size_t w = widths[pi];
                if (flows(*part)) {
                    part->ensure_grad();
                    for (std::size_t i = 0; i < r; ++i) {
                        kernels::active().axpy(1.0, oi->grad.data() + i * total_cols + col_offset,
                                               part->grad.data() + i * w, w);
                    }
                }
                col_offset += w;
            }
        });
    }
    return out;
}

Tensor im2patches(const Tensor& image, std::size_t patch_size, Tape* tape) {
    if (image.rank() != 3)
        throw Error(ErrorCategory::shape,
                    "im2patches expects [H x W x C], got " + shape_str(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h != w)
        throw Error(ErrorCategory::shape, "im2patches expects a square image, got " +
                                              shape_str(image.shape()));
    if (patch_size == 0 || h % patch_size != 0)
        throw Error(ErrorCategory::shape, "image size " + std::to_string(h) +
                                              " not divisible by patch size " +
                                              std::to_string(patch_size));
    if (tape && flows(*impl_of(image)))
        throw Error(ErrorCategory::state, "gradients w.r.t. raw images are not supported");
    const std::size_t grid = h / patch_size;
    const std::size_t patch_dim = patch_size * patch_size * c;
    Tensor out = Tensor::zeros({grid * grid, patch_dim});
    const double* iv = image.values().data();
    double* ov = out.mutable_values().data();
    for (std::size_t py = 0; py < grid; ++py) {
        for (std::size_t px = 0; px < grid; ++px) {
            double* dst = ov + (py * grid + px) * patch_dim;
            for (std::size_t yy = 0; yy < patch_size; ++yy) {
                const double* src = iv + ((py * patch_size + yy) * w + px * patch_size) * c;
                std::copy_n(src, patch_size * c, dst);
                dst += patch_size * c;
            }
        }
    }
    return out;
}

}  // namespace histovit
