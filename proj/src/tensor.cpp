#include "jemb/tensor.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "jemb/binary_io.hpp"
#include "jemb/error.hpp"

namespace jemb {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() {
    if (impl_->node) {
        throw Error("mutable_data: tensor produced by '" + impl_->node->op + "' is not a leaf");
    }
    return impl_->data;
}

double Tensor::item() const {
    if (impl_->data.size() != 1) {
        throw ShapeError("item: expected a single value, got shape " + shape_str(impl_->shape));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (!flag) impl_->grad.clear();
    return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::grad_buffer() const {
    if (!impl_->requires_grad) {
        throw Error("grad_buffer: tensor does not require grad");
    }
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->requires_grad) return;
    impl_->grad.assign(impl_->data.size(), 0.0);
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

const std::shared_ptr<GraphNode>& Tensor::node() const { return impl_->node; }

Tensor Tensor::clone() const {
    Tensor t(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::string op,
                           std::vector<Tensor> parents,
                           std::function<void(std::span<const double>, std::span<const double>)>
                               backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (any && g_grad_enabled) {
        out.impl_->requires_grad = true;
        auto node = std::make_shared<GraphNode>();
        node->op = std::move(op);
        node->parents = std::move(parents);
        node->backward = std::move(backward_fn);
        out.impl_->node = std::move(node);
    }
    return out;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1 || loss.rank() != 0) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.node()) {
        throw Error("backward: loss has no graph node (nothing requires grad)");
    }

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<Tensor> order;
    std::vector<Tensor> leaves;
    std::unordered_set<const TensorImpl*> visited;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    visited.insert(loss.impl());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        const auto& node = t.node();
        if (node && next < node->parents.size()) {
            const Tensor parent = node->parents[next++];
            if (parent.requires_grad() && !visited.count(parent.impl())) {
                visited.insert(parent.impl());
                if (parent.node()) {
                    stack.emplace_back(parent, 0);
                } else {
                    leaves.push_back(parent);
                }
            }
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }

    // This call's contribution is summed in isolation and added to the previous
    // leaf gradient once, so repeated calls accumulate exactly.
    std::vector<std::vector<double>> previous;
    previous.reserve(leaves.size());
    for (auto& leaf : leaves) {
        previous.push_back(std::move(leaf.impl()->grad));
        leaf.zero_grad();
    }
    for (auto& t : order) t.zero_grad();
    Tensor root = loss;
    root.grad_buffer()[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const auto& node = it->node();
        node->backward(it->data(), it->grad());
    }

    for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto& prev = previous[i];
        if (prev.empty()) continue;
        auto g = leaves[i].grad_buffer();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = prev[j] + g[j];
    }
}

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write("TSR1", 4);
    binary::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto extent : t.shape()) binary::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    const auto values = t.data();
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
    binary::expect_magic(in, "TSR1");
    const auto rank = binary::read_pod<std::uint32_t>(in, "TSR1 rank");
    if (rank > 8) {
        throw FormatError("TSR1 rank " + std::to_string(rank) + " exceeds limit",
                          binary::position(in) - 4);
    }
    Shape shape(rank);
    for (auto& extent : shape) extent = binary::read_pod<std::uint32_t>(in, "TSR1 extent");
    const auto n = shape_numel(shape);
    const auto offset = binary::position(in);
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double))) {
        throw FormatError("truncated TSR1 payload, expected " + std::to_string(n) + " values", offset);
    }
    return Tensor(std::move(shape), std::move(values));
}

std::size_t tensor_byte_size(const Tensor& t) { return 8 + 4 * t.rank() + 8 * t.numel(); }

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_tensor(out, t);
    if (!out) throw Error("failed writing '" + path + "'");
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    return read_tensor(in);
}

}  // namespace jemb
