#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace jemb {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
struct GraphNode;

/// Dense row-major array of doubles with an optional autodiff graph node.
///
/// While alive, operations on this thread record no graph nodes.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

/// Tensor is a shared handle: copies alias the same storage, which is what lets
/// a parameter appear in many graph nodes and collect a single gradient. Use
/// clone() for an independent deep copy.
class Tensor {
  public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Mutable view of the values. Only valid on tensors without a graph node
    /// (leaves); mutating an interior value would corrupt saved activations.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);

    bool has_grad() const;
    std::span<const double> grad() const;
    /// Gradient buffer, allocated (zeroed) on first access. Requires requires_grad.
    std::span<double> grad_buffer() const;
    void zero_grad();

    bool is_leaf() const;
    const std::shared_ptr<GraphNode>& node() const;

    /// Deep copy of values; the copy is a leaf with the same requires_grad flag
    /// and no gradient.
    Tensor clone() const;
    /// Leaf sharing no graph with this tensor and requires_grad=false.
    Tensor detach() const;

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

    TensorImpl* impl() const noexcept { return impl_.get(); }

    /// Result tensor of an op. The node is attached only when any parent requires grad.
    static Tensor make_result(Shape shape, std::vector<double> values, std::string op,
                              std::vector<Tensor> parents,
                              std::function<void(std::span<const double> out,
                                                 std::span<const double> out_grad)>
                                  backward_fn);

  private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first allocation
    std::shared_ptr<GraphNode> node;
};

/// One recorded operation. Parents are held strongly; the node never refers to
/// its own output, so graphs are acyclic and released with their last handle.
struct GraphNode {
    std::string op;
    std::vector<Tensor> parents;
    std::function<void(std::span<const double> out, std::span<const double> out_grad)> backward;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed from zero on every call.
void backward(const Tensor& loss);

// TSR1 binary format: "TSR1", u32 rank, u32 extents, f64 data (all little-endian).
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
std::size_t tensor_byte_size(const Tensor& t);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace jemb
