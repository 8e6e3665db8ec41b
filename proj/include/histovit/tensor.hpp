#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace histovit {

class Tape;

namespace detail {

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool tracked = false;  // produced by an op recorded on a tape

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

void tape_push(Tape& tape, std::function<void()> step);

}  // namespace detail

// Dense row-major double tensor. Values are immutable through the op API;
// mutable access exists for initialization and the optimizer, which own their
// tensors exclusively.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from_vector(std::vector<std::size_t> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const { return shape().at(axis); }
    std::size_t size() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;  // scalar tensors only
    double at(std::size_t i) const;
    double at(std::size_t i, std::size_t j) const;
    double at(std::size_t i, std::size_t j, std::size_t k) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();  // allocates zeros on first use
    void zero_grad();
    bool tracked() const;

    Tensor clone() const;  // deep copy of values; grad/tape state not copied

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<detail::TensorImpl> impl_;

    friend class Tape;
    friend struct OpAccess;
};

// Records executed ops in order; backward replays the exact reverse. A tape
// is owned by one training step at a time and must not be shared across
// concurrent steps. Gradients accumulate additively into every reachable
// tensor that requires or carries grad.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Tensor& loss);
    std::size_t recorded_ops() const { return steps_.size(); }
    void clear() { steps_.clear(); }

  private:
    std::vector<std::function<void()>> steps_;

    friend void detail::tape_push(Tape& tape, std::function<void()> step);
};

// Differentiable ops. Passing tape == nullptr runs pure inference: nothing is
// recorded and outputs are untracked. All ops validate shapes up front.
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor transpose(const Tensor& a, Tape* tape = nullptr);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor add_rowvec(const Tensor& a, const Tensor& v, Tape* tape = nullptr);
Tensor add_scalar(const Tensor& a, double c, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, double s, Tape* tape = nullptr);
Tensor softmax_rows(const Tensor& a, Tape* tape = nullptr);
Tensor log_softmax_rows(const Tensor& a, Tape* tape = nullptr);
Tensor gelu(const Tensor& a, Tape* tape = nullptr);       // exact erf form
Tensor gelu_tanh(const Tensor& a, Tape* tape = nullptr);  // opt-in approximation
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                  Tape* tape = nullptr);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);
Tensor weighted_sum(const Tensor& a, std::span<const double> weights, Tape* tape = nullptr);
Tensor reshape(const Tensor& a, std::vector<std::size_t> new_shape, Tape* tape = nullptr);
Tensor row(const Tensor& a, std::size_t index, Tape* tape = nullptr);
Tensor cols(const Tensor& a, std::size_t first, std::size_t last, Tape* tape = nullptr);
Tensor concat_rows(std::span<const Tensor> parts, Tape* tape = nullptr);
Tensor concat_cols(std::span<const Tensor> parts, Tape* tape = nullptr);

// Gathers non-overlapping patch rows from an [H x W x C] image. Gradients
// w.r.t. raw images are out of scope; tracked image inputs are rejected.
Tensor im2patches(const Tensor& image, std::size_t patch_size, Tape* tape = nullptr);

}  // namespace histovit
