#include "mose/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace mose {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_no_grad = false;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

} // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data.assign(n, 0.0);
    node->requires_grad = requires_grad && !NoGradGuard::active();
    node->id = g_next_id.fetch_add(1);
    return Tensor(std::move(node));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    if (n != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad && !NoGradGuard::active();
    node->id = g_next_id.fetch_add(1);
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

int Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return p_->shape[0];
    throw DimensionError("rows() requires rank 1 or 2, got " + shape_str(p_->shape));
}

int Tensor::cols() const {
    if (rank() == 1) return p_->shape[0];
    if (rank() == 2) return p_->shape[1];
    throw DimensionError("cols() requires rank 1 or 2, got " + shape_str(p_->shape));
}

Tensor make_op(std::vector<int> shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward) {
    Tensor out = Tensor::from(std::move(shape), std::move(data), false);
    bool track = !NoGradGuard::active();
    bool any = false;
    if (track) {
        for (const Tensor& p : parents)
            if (p.valid() && p.requires_grad()) { any = true; break; }
    }
    if (any) {
        out.node()->requires_grad = true;
        out.node()->parents.reserve(parents.size());
        for (Tensor& p : parents) out.node()->parents.push_back(p.ptr());
        out.node()->backward_fn = std::move(backward);
    }
    return out;
}

void Tensor::backward() const {
    if (!p_) throw ContractError("backward() on empty tensor");
    if (p_->data.size() != 1)
        throw ContractError("backward() requires a scalar, got shape " + shape_str(p_->shape));
    if (!p_->requires_grad) return;

    // Collect the reachable grad-requiring subgraph.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack{p_.get()};
    seen.insert(p_.get());
    while (!stack.empty()) {
        TensorNode* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const NodePtr& par : n->parents) {
            if (par->requires_grad && seen.insert(par.get()).second)
                stack.push_back(par.get());
        }
    }
    // Parents always have smaller ids than children, so descending id order
    // is a valid reverse topological order.
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->id > b->id; });

    for (TensorNode* n : order) n->ensure_grad();
    p_->grad[0] = 1.0;
    for (TensorNode* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

NoGradGuard::NoGradGuard() : prev_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = prev_; }
bool NoGradGuard::active() { return g_no_grad; }

} // namespace mose
