#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mose/error.hpp"

namespace mose {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the reverse-mode tape. Leaves are parameters or constants;
// interior nodes carry a closure that scatters the node's grad into its
// parents' grads.
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::uint64_t version = 0;  // bumped on in-place mutation of data
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantic handle over a tape node. Copies share the node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool valid() const { return static_cast<bool>(p_); }

    const std::vector<int>& shape() const { return p_->shape; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    std::size_t size() const { return p_->data.size(); }

    // 2-D accessors; rank-1 tensors are treated as a single row.
    int rows() const;
    int cols() const;
    double at(int r, int c) const { return p_->data[static_cast<std::size_t>(r) * cols() + c]; }

    std::vector<double>& data() { return p_->data; }
    const std::vector<double>& data() const { return p_->data; }
    std::vector<double>& grad() { p_->ensure_grad(); return p_->grad; }
    const std::vector<double>& grad_view() const { return p_->grad; }

    bool requires_grad() const { return p_->requires_grad; }
    std::uint64_t version() const { return p_->version; }
    void bump_version() { ++p_->version; }

    void zero_grad() { if (p_) p_->grad.assign(p_->data.size(), 0.0); }

    // Reverse pass from this (scalar) node through the reachable tape.
    void backward() const;

    TensorNode* node() const { return p_.get(); }
    const NodePtr& ptr() const { return p_; }

    bool same_node(const Tensor& o) const { return p_ == o.p_; }

private:
    explicit Tensor(NodePtr p) : p_(std::move(p)) {}
    NodePtr p_;

    friend Tensor make_op(std::vector<int> shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward);
};

// Builds an interior node. Grad tracking is dropped when no parent requires
// it or a NoGradGuard is active.
Tensor make_op(std::vector<int> shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward);

// Scoped switch that turns off tape construction (evaluation paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();

private:
    bool prev_;
};

std::string shape_str(const std::vector<int>& shape);

} // namespace mose
