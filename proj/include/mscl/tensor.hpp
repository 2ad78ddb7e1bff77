#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mscl {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

enum class PadMode { zero, reflect };

// Dense row-major f64 tensor with a dynamic reverse-mode tape. Each tensor
// produced by an op holds references to its parents and a closure that
// scatters adjoints back into them; backward() replays the closures in
// reverse creation order. Tensors are immutable after creation except for
// grad accumulation.
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same extent as data

    // Tape record: creation order is a topological order of the graph.
    std::int64_t node_id = 0;
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;

    Tensor(std::vector<std::int64_t> s, std::vector<double> d, bool req);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t ndim() const { return static_cast<std::int64_t>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }
    double item() const;
    void ensure_grad();
    void zero_grad();

    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;
};

std::string shape_str(const std::vector<std::int64_t>& shape);
std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

// Factories.
TensorPtr make_tensor(std::vector<std::int64_t> shape, std::vector<double> data,
                      bool requires_grad = false);
TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
TensorPtr full(std::vector<std::int64_t> shape, double value, bool requires_grad = false);
TensorPtr scalar_tensor(double value, bool requires_grad = false);

// Populates grads of every requires_grad tensor reachable from root.
// root must be a scalar produced through recorded ops.
void backward(const TensorPtr& root);

// Elementwise (same shape).
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr exp(const TensorPtr& a);
TensorPtr log(const TensorPtr& a);
TensorPtr relu(const TensorPtr& a);

// Shape ops.
TensorPtr reshape(const TensorPtr& a, std::vector<std::int64_t> shape);
TensorPtr permute(const TensorPtr& a, const std::vector<int>& perm);
TensorPtr transpose2d(const TensorPtr& a);
TensorPtr select0(const TensorPtr& a, std::int64_t index);
TensorPtr concat(const std::vector<TensorPtr>& parts, int axis);

// Linear algebra.
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_rowvec(const TensorPtr& m, const TensorPtr& v);

// Reductions and normalizations.
TensorPtr sum_axis(const TensorPtr& a, int axis);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr mean_all(const TensorPtr& a);
TensorPtr softmax(const TensorPtr& a, int axis);
TensorPtr l2_normalize(const TensorPtr& a, int axis);
TensorPtr diag2d(const TensorPtr& a);

// Convolutions (cross-correlation). Output extent per axis:
// E' = (E + 2p - k) / s + 1, floored. kernel layouts:
//   conv3d: x (N,C,T,H,W), k (C',C,kt,kh,kw), stride/pad (t,h,w)
//   conv2d: x (N,C,H,W),   k (C',C,kh,kw),    stride/pad (h,w)
// bias may be null; when present it is one value per output channel.
TensorPtr conv3d(const TensorPtr& x, const TensorPtr& k, const TensorPtr& bias,
                 const std::array<int, 3>& stride, const std::array<int, 3>& pad,
                 PadMode mode = PadMode::zero);
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& k, const TensorPtr& bias,
                 const std::array<int, 2>& stride, const std::array<int, 2>& pad,
                 PadMode mode = PadMode::zero);

// Pooling and resampling.
TensorPtr spatial_pool(const TensorPtr& a);    // (N,C,T,H,W) -> (N,C,T), mean over H,W
TensorPtr st_pool(const TensorPtr& a);         // (N,C,T,H,W) -> (N,C), mean over T,H,W
TensorPtr spatial_pool2d(const TensorPtr& a);  // (N,C,H,W) -> (N,C), mean over H,W
TensorPtr upsample_spatial(const TensorPtr& a, int factor);   // nearest, (N,C,T,H,W)
TensorPtr upsample_temporal(const TensorPtr& a, int factor);  // nearest, (N,C,T,H,W)

}  // namespace mscl
