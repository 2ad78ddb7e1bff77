#include "mscl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "mscl/kernels.hpp"

namespace mscl {

namespace {

std::int64_t next_node_id() {
    static std::int64_t counter = 0;
    return ++counter;
}

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

// Attach the tape record. Called only when the output requires grad.
void record(const TensorPtr& out, std::vector<TensorPtr> parents, std::function<void()> fn) {
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

bool any_grad(std::initializer_list<const TensorPtr*> ts) {
    for (const auto* t : ts) {
        if (*t && (*t)->requires_grad) return true;
    }
    return false;
}

// Decompose a shape around `axis` into (outer, len, inner) for row-major
// iteration: flat = (o * len + l) * inner + i.
struct AxisSplit {
    std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const std::vector<std::int64_t>& shape, int axis) {
    AxisSplit s;
    s.len = shape[static_cast<std::size_t>(axis)];
    for (int d = 0; d < axis; ++d) s.outer *= shape[static_cast<std::size_t>(d)];
    for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < shape.size(); ++d) {
        s.inner *= shape[d];
    }
    return s;
}

int normalize_axis(const TensorPtr& a, int axis, const char* op) {
    const int nd = static_cast<int>(a->ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) {
        fail(std::string(op) + ": axis out of range for shape " + shape_str(a->shape));
    }
    return axis;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> d, bool req)
    : shape(std::move(s)), data(std::move(d)), requires_grad(req), node_id(next_node_id()) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        fail("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
             shape_str(shape));
    }
}

double Tensor::item() const {
    check(is_scalar(), "item(): tensor of shape " + shape_str(shape) + " is not scalar");
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
    check(static_cast<std::int64_t>(idx.size()) == ndim(), "at(): rank mismatch");
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (auto i : idx) {
        check(i >= 0 && i < shape[d], "at(): index out of bounds");
        flat = flat * shape[d] + i;
        ++d;
    }
    return data[static_cast<std::size_t>(flat)];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return const_cast<Tensor*>(this)->at(idx);
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

TensorPtr make_tensor(std::vector<std::int64_t> shape, std::vector<double> data,
                      bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                       requires_grad);
}

TensorPtr full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                       requires_grad);
}

TensorPtr scalar_tensor(double value, bool requires_grad) {
    return make_tensor({}, {value}, requires_grad);
}

void backward(const TensorPtr& root) {
    check(root != nullptr, "backward: null root");
    check(root->is_scalar(),
          "backward: root must be scalar, got shape " + shape_str(root->shape));
    check(root->requires_grad, "backward: root does not require grad");

    // Reachable nodes, then reverse creation order (a valid topological
    // order, since parents are always created before children).
    std::vector<TensorPtr> nodes;
    std::unordered_set<const Tensor*> seen;
    std::vector<TensorPtr> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        TensorPtr t = std::move(stack.back());
        stack.pop_back();
        for (const auto& p : t->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
        }
        nodes.push_back(std::move(t));
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorPtr& a, const TensorPtr& b) { return a->node_id > b->node_id; });

    root->ensure_grad();
    root->grad[0] = 1.0;  // d root / d root
    for (const auto& t : nodes) {
        if (t->backward_fn) t->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

TensorPtr binary_same_shape(const TensorPtr& a, const TensorPtr& b, const char* name) {
    check(a && b, std::string(name) + ": null input");
    if (a->shape != b->shape) {
        fail(std::string(name) + ": shape mismatch " + shape_str(a->shape) + " vs " +
             shape_str(b->shape));
    }
    return zeros(a->shape, a->requires_grad || b->requires_grad);
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    TensorPtr out = binary_same_shape(a, b, "add");
    kernels::add(a->data.data(), b->data.data(), out->data.data(), out->data.size());
    if (out->requires_grad) {
        record(out, {a, b}, [a, b, o = out.get()]() {
            const std::size_t n = o->data.size();
            if (a->requires_grad) {
                a->ensure_grad();
                kernels::axpy(1.0, o->grad.data(), a->grad.data(), n);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kernels::axpy(1.0, o->grad.data(), b->grad.data(), n);
            }
        });
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    TensorPtr out = binary_same_shape(a, b, "sub");
    kernels::sub(a->data.data(), b->data.data(), out->data.data(), out->data.size());
    if (out->requires_grad) {
        record(out, {a, b}, [a, b, o = out.get()]() {
            const std::size_t n = o->data.size();
            if (a->requires_grad) {
                a->ensure_grad();
                kernels::axpy(1.0, o->grad.data(), a->grad.data(), n);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kernels::axpy(-1.0, o->grad.data(), b->grad.data(), n);
            }
        });
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    TensorPtr out = binary_same_shape(a, b, "mul");
    kernels::mul(a->data.data(), b->data.data(), out->data.data(), out->data.size());
    if (out->requires_grad) {
        record(out, {a, b}, [a, b, o = out.get()]() {
            const std::size_t n = o->data.size();
            if (a->requires_grad) {
                a->ensure_grad();
                kernels::mul_add(o->grad.data(), b->data.data(), a->grad.data(), n);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kernels::mul_add(o->grad.data(), a->data.data(), b->grad.data(), n);
            }
        });
    }
    return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
    check(a != nullptr, "scale: null input");
    TensorPtr out = zeros(a->shape, a->requires_grad);
    kernels::scale(a->data.data(), c, out->data.data(), out->data.size());
    if (out->requires_grad) {
        record(out, {a}, [a, c, o = out.get()]() {
            a->ensure_grad();
            kernels::axpy(c, o->grad.data(), a->grad.data(), o->data.size());
        });
    }
    return out;
}

TensorPtr exp(const TensorPtr& a) {
    check(a != nullptr, "exp: null input");
    TensorPtr out = zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = std::exp(a->data[i]);
    if (out->requires_grad) {
        record(out, {a}, [a, o = out.get()]() {
            a->ensure_grad();
            kernels::mul_add(o->grad.data(), o->data.data(), a->grad.data(), o->data.size());
        });
    }
    return out;
}

TensorPtr log(const TensorPtr& a) {
    check(a != nullptr, "log: null input");
    TensorPtr out = zeros(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = std::log(a->data[i]);
    if (out->requires_grad) {
        record(out, {a}, [a, o = out.get()]() {
            a->ensure_grad();
            kernels::div_add(o->grad.data(), a->data.data(), a->grad.data(), o->data.size());
        });
    }
    return out;
}

TensorPtr relu(const TensorPtr& a) {
    check(a != nullptr, "relu: null input");
    TensorPtr out = zeros(a->shape, a->requires_grad);
    kernels::relu(a->data.data(), out->data.data(), out->data.size());
    if (out->requires_grad) {
        record(out, {a}, [a, o = out.get()]() {
            a->ensure_grad();
            kernels::relu_grad(a->data.data(), o->grad.data(), a->grad.data(), o->data.size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops

TensorPtr reshape(const TensorPtr& a, std::vector<std::int64_t> shape) {
    check(a != nullptr, "reshape: null input");
    if (shape_numel(shape) != a->numel()) {
        fail("reshape: cannot view " + shape_str(a->shape) + " as " + shape_str(shape));
    }
    TensorPtr out = make_tensor(std::move(shape), a->data, a->requires_grad);
    if (out->requires_grad) {
        record(out, {a}, [a, o = out.get()]() {
            a->ensure_grad();
            kernels::axpy(1.0, o->grad.data(), a->grad.data(), o->data.size());
        });
    }
    return out;
}

TensorPtr permute(const TensorPtr& a, const std::vector<int>& perm) {
    check(a != nullptr, "permute: null input");
    const int nd = static_cast<int>(a->ndim());
    check(static_cast<int>(perm.size()) == nd, "permute: perm rank mismatch");
    std::vector<bool> used(static_cast<std::size_t>(nd), false);
    std::vector<std::int64_t> out_shape(static_cast<std::size_t>(nd));
    for (int d = 0; d < nd; ++d) {
        const int p = perm[static_cast<std::size_t>(d)];
        check(p >= 0 && p < nd && !used[static_cast<std::size_t>(p)], "permute: invalid perm");
        used[static_cast<std::size_t>(p)] = true;
        out_shape[static_cast<std::size_t>(d)] = a->shape[static_cast<std::size_t>(p)];
    }

    // src[i] = flat index into a for out flat index i.
    std::vector<std::int64_t> in_strides(static_cast<std::size_t>(nd), 1);
    for (int d = nd - 2; d >= 0; --d) {
        in_strides[static_cast<std::size_t>(d)] =
            in_strides[static_cast<std::size_t>(d + 1)] * a->shape[static_cast<std::size_t>(d + 1)];
    }
    const std::int64_t n = a->numel();
    auto src = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t flat_in = 0;
        for (int d = 0; d < nd; ++d) {
            flat_in += idx[static_cast<std::size_t>(d)] *
                       in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
        }
        (*src)[static_cast<std::size_t>(i)] = flat_in;
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }

    TensorPtr out = zeros(out_shape, a->requires_grad);
    for (std::int64_t i = 0; i < n; ++i) {
        out->data[static_cast<std::size_t>(i)] =
            a->data[static_cast<std::size_t>((*src)[static_cast<std::size_t>(i)])];
    }
    if (out->requires_grad) {
        record(out, {a}, [a, src, o = out.get()]() {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->data.size(); ++i) {
                a->grad[static_cast<std::size_t>((*src)[i])] += o->grad[i];
            }
        });
    }
    return out;
}

TensorPtr transpose2d(const TensorPtr& a) {
    check(a && a->ndim() == 2, "transpose2d: expected rank-2 tensor");
    return permute(a, {1, 0});
}

TensorPtr select0(const TensorPtr& a, std::int64_t index) {
    check(a && a->ndim() >= 1, "select0: expected rank >= 1");
    const std::int64_t n0 = a->shape[0];
    check(index >= 0 && index < n0,
          "select0: index " + std::to_string(index) + " out of range for " + shape_str(a->shape));
    std::vector<std::int64_t> out_shape(a->shape.begin() + 1, a->shape.end());
    const std::int64_t block = shape_numel(out_shape);
    TensorPtr out = zeros(out_shape, a->requires_grad);
    std::copy_n(a->data.begin() + index * block, block, out->data.begin());
    if (out->requires_grad) {
        record(out, {a}, [a, index, block, o = out.get()]() {
            a->ensure_grad();
            kernels::axpy(1.0, o->grad.data(), a->grad.data() + index * block,
                          static_cast<std::size_t>(block));
        });
    }
    return out;
}

TensorPtr concat(const std::vector<TensorPtr>& parts, int axis) {
    check(!parts.empty(), "concat: empty input list");
    const int ax = normalize_axis(parts[0], axis, "concat");
    std::vector<std::int64_t> out_shape = parts[0]->shape;
    bool req = false;
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check(p->ndim() == parts[0]->ndim(), "concat: rank mismatch");
        for (int d = 0; d < static_cast<int>(out_shape.size()); ++d) {
            if (d != ax && p->shape[static_cast<std::size_t>(d)] !=
                               out_shape[static_cast<std::size_t>(d)]) {
                fail("concat: shape mismatch " + shape_str(p->shape) + " vs " +
                     shape_str(parts[0]->shape));
            }
        }
        total += p->shape[static_cast<std::size_t>(ax)];
        req = req || p->requires_grad;
    }
    out_shape[static_cast<std::size_t>(ax)] = total;
    TensorPtr out = zeros(out_shape, req);

    const AxisSplit s = split_axis(out_shape, ax);
    std::int64_t offset = 0;  // running extent along ax
    for (const auto& p : parts) {
        const std::int64_t len = p->shape[static_cast<std::size_t>(ax)];
        for (std::int64_t o = 0; o < s.outer; ++o) {
            std::copy_n(p->data.begin() + o * len * s.inner, len * s.inner,
                        out->data.begin() + (o * total + offset) * s.inner);
        }
        offset += len;
    }
    if (req) {
        record(out, parts, [parts, s, ax, total, o = out.get()]() {
            std::int64_t offset = 0;
            for (const auto& p : parts) {
                const std::int64_t plen = p->shape[static_cast<std::size_t>(ax)];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::int64_t ob = 0; ob < s.outer; ++ob) {
                        kernels::axpy(1.0, o->grad.data() + (ob * total + offset) * s.inner,
                                      p->grad.data() + ob * plen * s.inner,
                                      static_cast<std::size_t>(plen * s.inner));
                    }
                }
                offset += plen;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    check(a && b, "matmul: null input");
    check(a->ndim() == 2 && b->ndim() == 2, "matmul: expected rank-2 tensors, got " +
                                                shape_str(a->shape) + " and " +
                                                shape_str(b->shape));
    const std::int64_t m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
    if (k != k2) {
        fail("matmul: inner dimension mismatch " + shape_str(a->shape) + " x " +
             shape_str(b->shape));
    }
    TensorPtr out = zeros({m, n}, any_grad({&a, &b}));
    kernels::gemm_nn(static_cast<std::size_t>(m), static_cast<std::size_t>(k),
                     static_cast<std::size_t>(n), a->data.data(), b->data.data(),
                     out->data.data());
    if (out->requires_grad) {
        record(out, {a, b}, [a, b, m, k, n, o = out.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                // dA(m,k) += G(m,n) * B(k,n)^T
                kernels::gemm_nt(static_cast<std::size_t>(m), static_cast<std::size_t>(n),
                                 static_cast<std::size_t>(k), o->grad.data(), b->data.data(),
                                 a->grad.data());
            }
            if (b->requires_grad) {
                b->ensure_grad();
                // dB(k,n) += A(m,k)^T * G(m,n)
                kernels::gemm_tn(static_cast<std::size_t>(k), static_cast<std::size_t>(m),
                                 static_cast<std::size_t>(n), a->data.data(), o->grad.data(),
                                 b->grad.data());
            }
        });
    }
    return out;
}

TensorPtr add_rowvec(const TensorPtr& m, const TensorPtr& v) {
    check(m && v, "add_rowvec: null input");
    check(m->ndim() == 2 && v->ndim() == 1 && m->shape[1] == v->shape[0],
          "add_rowvec: shape mismatch " + shape_str(m->shape) + " + " + shape_str(v->shape));
    const std::int64_t rows = m->shape[0], cols = m->shape[1];
    TensorPtr out = zeros(m->shape, any_grad({&m, &v}));
    for (std::int64_t r = 0; r < rows; ++r) {
        kernels::add(m->data.data() + r * cols, v->data.data(), out->data.data() + r * cols,
                     static_cast<std::size_t>(cols));
    }
    if (out->requires_grad) {
        record(out, {m, v}, [m, v, rows, cols, o = out.get()]() {
            if (m->requires_grad) {
                m->ensure_grad();
                kernels::axpy(1.0, o->grad.data(), m->grad.data(), o->data.size());
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    kernels::axpy(1.0, o->grad.data() + r * cols, v->grad.data(),
                                  static_cast<std::size_t>(cols));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

TensorPtr sum_axis(const TensorPtr& a, int axis) {
    check(a != nullptr, "sum_axis: null input");
    const int ax = normalize_axis(a, axis, "sum_axis");
    const AxisSplit s = split_axis(a->shape, ax);
    std::vector<std::int64_t> out_shape;
    for (int d = 0; d < static_cast<int>(a->ndim()); ++d) {
        if (d != ax) out_shape.push_back(a->shape[static_cast<std::size_t>(d)]);
    }
    TensorPtr out = zeros(out_shape, a->requires_grad);
    for (std::int64_t o = 0; o < s.outer; ++o) {
        double* dst = out->data.data() + o * s.inner;
        for (std::int64_t l = 0; l < s.len; ++l) {
            kernels::axpy(1.0, a->data.data() + (o * s.len + l) * s.inner, dst,
                          static_cast<std::size_t>(s.inner));
        }
    }
    if (out->requires_grad) {
        record(out, {a}, [a, s, o = out.get()]() {
            a->ensure_grad();
            for (std::int64_t ob = 0; ob < s.outer; ++ob) {
                const double* g = o->grad.data() + ob * s.inner;
                for (std::int64_t l = 0; l < s.len; ++l) {
                    kernels::axpy(1.0, g, a->grad.data() + (ob * s.len + l) * s.inner,
                                  static_cast<std::size_t>(s.inner));
                }
            }
        });
    }
    return out;
}

TensorPtr sum_all(const TensorPtr& a) {
    check(a != nullptr, "sum_all: null input");
    TensorPtr out = scalar_tensor(kernels::sum(a->data.data(), a->data.size()), a->requires_grad);
    if (out->requires_grad) {
        record(out, {a}, [a, o = out.get()]() {
            a->ensure_grad();
            const double g = o->grad[0];
            for (auto& v : a->grad) v += g;
        });
    }
    return out;
}

TensorPtr mean_all(const TensorPtr& a) {
    check(a && a->numel() > 0, "mean_all: empty input");
    return scale(sum_all(a), 1.0 / static_cast<double>(a->numel()));
}

TensorPtr softmax(const TensorPtr& a, int axis) {
    check(a != nullptr, "softmax: null input");
    const int ax = normalize_axis(a, axis, "softmax");
    const AxisSplit s = split_axis(a->shape, ax);
    TensorPtr out = zeros(a->shape, a->requires_grad);
    // Max-subtraction per line keeps exp() in range for any finite input.
    std::vector<double> line(static_cast<std::size_t>(s.len));
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
            const std::int64_t base = o * s.len * s.inner + i;
            for (std::int64_t l = 0; l < s.len; ++l) {
                line[static_cast<std::size_t>(l)] =
                    a->data[static_cast<std::size_t>(base + l * s.inner)];
            }
            const double mx = kernels::vmax(line.data(), line.size());
            double total = 0.0;
            for (auto& v : line) {
                v = std::exp(v - mx);
                total += v;
            }
            for (std::int64_t l = 0; l < s.len; ++l) {
                out->data[static_cast<std::size_t>(base + l * s.inner)] =
                    line[static_cast<std::size_t>(l)] / total;
            }
        }
    }
    if (out->requires_grad) {
        record(out, {a}, [a, s, o = out.get()]() {
            a->ensure_grad();
            for (std::int64_t ob = 0; ob < s.outer; ++ob) {
                for (std::int64_t i = 0; i < s.inner; ++i) {
                    const std::int64_t base = ob * s.len * s.inner + i;
                    double gy = 0.0;
                    for (std::int64_t l = 0; l < s.len; ++l) {
                        const auto f = static_cast<std::size_t>(base + l * s.inner);
                        gy += o->grad[f] * o->data[f];
                    }
                    for (std::int64_t l = 0; l < s.len; ++l) {
                        const auto f = static_cast<std::size_t>(base + l * s.inner);
                        a->grad[f] += o->data[f] * (o->grad[f] - gy);
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr l2_normalize(const TensorPtr& a, int axis) {
    check(a != nullptr, "l2_normalize: null input");
    const int ax = normalize_axis(a, axis, "l2_normalize");
    const AxisSplit s = split_axis(a->shape, ax);
    TensorPtr out = zeros(a->shape, a->requires_grad);
    auto norms = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(s.outer * s.inner));
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
            const std::int64_t base = o * s.len * s.inner + i;
            double sq = 0.0;
            for (std::int64_t l = 0; l < s.len; ++l) {
                const double v = a->data[static_cast<std::size_t>(base + l * s.inner)];
                sq += v * v;
            }
            const double nrm = std::sqrt(sq);
            if (!(nrm > 0.0)) fail("l2_normalize: cannot normalize zero vector");
            (*norms)[static_cast<std::size_t>(o * s.inner + i)] = nrm;
            for (std::int64_t l = 0; l < s.len; ++l) {
                const auto f = static_cast<std::size_t>(base + l * s.inner);
                out->data[f] = a->data[f] / nrm;
            }
        }
    }
    if (out->requires_grad) {
        record(out, {a}, [a, s, norms, o = out.get()]() {
            a->ensure_grad();
            for (std::int64_t ob = 0; ob < s.outer; ++ob) {
                for (std::int64_t i = 0; i < s.inner; ++i) {
                    const std::int64_t base = ob * s.len * s.inner + i;
                    const double nrm = (*norms)[static_cast<std::size_t>(ob * s.inner + i)];
                    double gy = 0.0;
                    for (std::int64_t l = 0; l < s.len; ++l) {
                        const auto f = static_cast<std::size_t>(base + l * s.inner);
                        gy += o->grad[f] * o->data[f];
                    }
                    for (std::int64_t l = 0; l < s.len; ++l) {
                        const auto f = static_cast<std::size_t>(base + l * s.inner);
                        a->grad[f] += (o->grad[f] - o->data[f] * gy) / nrm;
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr diag2d(const TensorPtr& a) {
    check(a && a->ndim() == 2 && a->shape[0] == a->shape[1],
          "diag2d: expected square matrix, got " + shape_str(a ? a->shape : std::vector<std::int64_t>{}));
    const std::int64_t n = a->shape[0];
    TensorPtr out = zeros({n}, a->requires_grad);
    for (std::int64_t i = 0; i < n; ++i) {
        out->data[static_cast<std::size_t>(i)] = a->data[static_cast<std::size_t>(i * n + i)];
    }
    if (out->requires_grad) {
        record(out, {a}, [a, n, o = out.get()]() {
            a->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                a->grad[static_cast<std::size_t>(i * n + i)] += o->grad[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution: im2col gather + GEMM. The gather is an index map built per
// call; -1 marks zero-padding. Backward reuses the same map for the
// col2im scatter, so forward and backward are exactly adjoint for every
// pad mode.

namespace {

std::int64_t out_extent(std::int64_t e, int k, int s, int p, const char* axis) {
    if (e + 2 * p < k) {
        fail(std::string("conv: kernel extent ") + std::to_string(k) + " exceeds padded input " +
             std::to_string(e + 2 * p) + " on " + axis + " axis");
    }
    return (e + 2 * p - k) / s + 1;
}

// Border rule for one axis. reflect mirrors without repeating the border
// sample (index -1 -> 1, index E -> E-2).
std::int64_t map_border(std::int64_t i, std::int64_t e, PadMode mode) {
    if (i >= 0 && i < e) return i;
    if (mode == PadMode::zero) return -1;
    if (e == 1) return 0;
    while (i < 0 || i >= e) {
        if (i < 0) i = -i;
        if (i >= e) i = 2 * e - 2 - i;
    }
    return i;
}

struct ConvPlan {
    std::int64_t k_rows = 0;   // C * prod(kernel extents)
    std::int64_t l_cols = 0;   // prod(output extents)
    std::vector<std::int64_t> out_dims;
    std::vector<std::int64_t> src;  // k_rows * l_cols, offset within one sample or -1
};

// dims/kdims/stride/pad are ordered (t,h,w) or (h,w); c is input channels.
ConvPlan build_plan(std::int64_t c, const std::vector<std::int64_t>& dims,
                    const std::vector<int>& kdims, const std::vector<int>& stride,
                    const std::vector<int>& pad, PadMode mode) {
    const int nd = static_cast<int>(dims.size());
    for (int d = 0; d < nd; ++d) {
        check(stride[static_cast<std::size_t>(d)] >= 1, "conv: stride must be >= 1");
        check(pad[static_cast<std::size_t>(d)] >= 0, "conv: padding must be >= 0");
    }
    static const char* axis_names3[] = {"temporal", "height", "width"};
    static const char* axis_names2[] = {"height", "width"};
    const char** names = nd == 3 ? axis_names3 : axis_names2;

    ConvPlan plan;
    plan.out_dims.resize(static_cast<std::size_t>(nd));
    std::int64_t kvol = 1, lcols = 1;
    for (int d = 0; d < nd; ++d) {
        plan.out_dims[static_cast<std::size_t>(d)] =
            out_extent(dims[static_cast<std::size_t>(d)], kdims[static_cast<std::size_t>(d)],
                       stride[static_cast<std::size_t>(d)], pad[static_cast<std::size_t>(d)],
                       names[d]);
        kvol *= kdims[static_cast<std::size_t>(d)];
        lcols *= plan.out_dims[static_cast<std::size_t>(d)];
    }
    plan.k_rows = c * kvol;
    plan.l_cols = lcols;
    plan.src.assign(static_cast<std::size_t>(plan.k_rows * plan.l_cols), -1);

    std::vector<std::int64_t> in_strides(static_cast<std::size_t>(nd), 1);
    for (int d = nd - 2; d >= 0; --d) {
        in_strides[static_cast<std::size_t>(d)] =
            in_strides[static_cast<std::size_t>(d + 1)] * dims[static_cast<std::size_t>(d + 1)];
    }
    const std::int64_t chan_stride = dims[0] * in_strides[0];

    std::vector<std::int64_t> kidx(static_cast<std::size_t>(nd), 0);
    for (std::int64_t kr = 0; kr < plan.k_rows; ++kr) {
        const std::int64_t ch = kr / kvol;
        std::int64_t rem = kr % kvol;
        for (int d = nd - 1; d >= 0; --d) {
            kidx[static_cast<std::size_t>(d)] = rem % kdims[static_cast<std::size_t>(d)];
            rem /= kdims[static_cast<std::size_t>(d)];
        }
        std::vector<std::int64_t> oidx(static_cast<std::size_t>(nd), 0);
        for (std::int64_t l = 0; l < plan.l_cols; ++l) {
            std::int64_t off = ch * chan_stride;
            bool valid = true;
            for (int d = 0; d < nd; ++d) {
                const std::int64_t pos = oidx[static_cast<std::size_t>(d)] *
                                             stride[static_cast<std::size_t>(d)] +
                                         kidx[static_cast<std::size_t>(d)] -
                                         pad[static_cast<std::size_t>(d)];
                const std::int64_t m = map_border(pos, dims[static_cast<std::size_t>(d)], mode);
                if (m < 0) {
                    valid = false;
                    break;
                }
                off += m * in_strides[static_cast<std::size_t>(d)];
            }
            if (valid) plan.src[static_cast<std::size_t>(kr * plan.l_cols + l)] = off;
            for (int d = nd - 1; d >= 0; --d) {
                if (++oidx[static_cast<std::size_t>(d)] < plan.out_dims[static_cast<std::size_t>(d)]) {
                    break;
                }
                oidx[static_cast<std::size_t>(d)] = 0;
            }
        }
    }
    return plan;
}

void gather_col(const double* sample, const ConvPlan& plan, double* col) {
    const std::size_t n = plan.src.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t s = plan.src[i];
        col[i] = s < 0 ? 0.0 : sample[s];
    }
}

TensorPtr conv_common(const TensorPtr& x, const TensorPtr& k, const TensorPtr& bias,
                      const std::vector<int>& stride, const std::vector<int>& pad, PadMode mode,
                      int nd) {
    check(x && k, "conv: null input");
    check(x->ndim() == nd + 2, "conv: input rank mismatch, got " + shape_str(x->shape));
    check(k->ndim() == nd + 2, "conv: kernel rank mismatch, got " + shape_str(k->shape));
    if (x->shape[1] != k->shape[1]) {
        fail("conv: input channels " + std::to_string(x->shape[1]) +
             " do not match kernel channels " + std::to_string(k->shape[1]) + " (input " +
             shape_str(x->shape) + ", kernel " + shape_str(k->shape) + ")");
    }
    const std::int64_t batch = x->shape[0];
    const std::int64_t cin = x->shape[1];
    const std::int64_t cout = k->shape[0];
    if (bias) {
        check(bias->ndim() == 1 && bias->shape[0] == cout,
              "conv: bias shape " + shape_str(bias->shape) + " does not match " +
                  std::to_string(cout) + " output channels");
    }

    std::vector<std::int64_t> dims(x->shape.begin() + 2, x->shape.end());
    std::vector<int> kdims;
    for (int d = 0; d < nd; ++d) kdims.push_back(static_cast<int>(k->shape[static_cast<std::size_t>(d) + 2]));

    auto plan = std::make_shared<ConvPlan>(build_plan(cin, dims, kdims, stride, pad, mode));

    std::vector<std::int64_t> out_shape{batch, cout};
    out_shape.insert(out_shape.end(), plan->out_dims.begin(), plan->out_dims.end());
    TensorPtr out = zeros(out_shape, any_grad({&x, &k, &bias}));

    const std::int64_t in_sample = cin * shape_numel(dims);
    const std::int64_t out_sample = cout * plan->l_cols;
    std::vector<double> col(static_cast<std::size_t>(plan->k_rows * plan->l_cols));
    for (std::int64_t n = 0; n < batch; ++n) {
        gather_col(x->data.data() + n * in_sample, *plan, col.data());
        kernels::gemm_nn(static_cast<std::size_t>(cout), static_cast<std::size_t>(plan->k_rows),
                         static_cast<std::size_t>(plan->l_cols), k->data.data(), col.data(),
                         out->data.data() + n * out_sample);
        if (bias) {
            double* base = out->data.data() + n * out_sample;
            for (std::int64_t c = 0; c < cout; ++c) {
                const double b = bias->data[static_cast<std::size_t>(c)];
                double* row = base + c * plan->l_cols;
                for (std::int64_t l = 0; l < plan->l_cols; ++l) row[l] += b;
            }
        }
    }

    if (out->requires_grad) {
        std::vector<TensorPtr> parents{x, k};
        if (bias) parents.push_back(bias);
        record(out, std::move(parents),
               [x, k, bias, plan, batch, cin, cout, in_sample, out_sample, o = out.get()]() {
                   const std::int64_t krows = plan->k_rows, lcols = plan->l_cols;
                   std::vector<double> col(static_cast<std::size_t>(krows * lcols));
                   std::vector<double> dcol;
                   (void)cin;
                   if (x->requires_grad) {
                       x->ensure_grad();
                       dcol.resize(static_cast<std::size_t>(krows * lcols));
                   }
                   if (k->requires_grad) k->ensure_grad();
                   if (bias && bias->requires_grad) bias->ensure_grad();
                   for (std::int64_t n = 0; n < batch; ++n) {
                       const double* gout = o->grad.data() + n * out_sample;
                       if (k->requires_grad) {
                           // dK(cout,krows) += G(cout,lcols) * Col(krows,lcols)^T
                           gather_col(x->data.data() + n * in_sample, *plan, col.data());
                           kernels::gemm_nt(static_cast<std::size_t>(cout),
                                            static_cast<std::size_t>(lcols),
                                            static_cast<std::size_t>(krows), gout, col.data(),
                                            k->grad.data());
                       }
                       if (bias && bias->requires_grad) {
                           for (std::int64_t c = 0; c < cout; ++c) {
                               bias->grad[static_cast<std::size_t>(c)] += kernels::sum(
                                   gout + c * lcols, static_cast<std::size_t>(lcols));
                           }
                       }
                       if (x->requires_grad) {
                           // dCol(krows,lcols) = K(cout,krows)^T * G(cout,lcols)
                           std::fill(dcol.begin(), dcol.end(), 0.0);
                           kernels::gemm_tn(static_cast<std::size_t>(krows),
                                            static_cast<std::size_t>(cout),
                                            static_cast<std::size_t>(lcols), k->data.data(), gout,
                                            dcol.data());
                           double* gx = x->grad.data() + n * in_sample;
                           for (std::size_t i = 0; i < plan->src.size(); ++i) {
                               const std::int64_t s = plan->src[i];
                               if (s >= 0) gx[s] += dcol[i];
                           }
                       }
                   }
               });
    }
    return out;
}

}  // namespace

TensorPtr conv3d(const TensorPtr& x, const TensorPtr& k, const TensorPtr& bias,
                 const std::array<int, 3>& stride, const std::array<int, 3>& pad, PadMode mode) {
    return conv_common(x, k, bias, {stride[0], stride[1], stride[2]}, {pad[0], pad[1], pad[2]},
                       mode, 3);
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& k, const TensorPtr& bias,
                 const std::array<int, 2>& stride, const std::array<int, 2>& pad, PadMode mode) {
    return conv_common(x, k, bias, {stride[0], stride[1]}, {pad[0], pad[1]}, mode, 2);
}

// ---------------------------------------------------------------------------
// Pooling and resampling

namespace {

// Mean over the trailing `block` elements of each group.
TensorPtr block_mean(const TensorPtr& a, std::vector<std::int64_t> out_shape,
                     std::int64_t groups, std::int64_t block, const char* name) {
    check(a != nullptr, std::string(name) + ": null input");
    TensorPtr out = zeros(std::move(out_shape), a->requires_grad);
    const double inv = 1.0 / static_cast<double>(block);
    for (std::int64_t g = 0; g < groups; ++g) {
        out->data[static_cast<std::size_t>(g)] =
            inv * kernels::sum(a->data.data() + g * block, static_cast<std::size_t>(block));
    }
    if (out->requires_grad) {
        record(out, {a}, [a, groups, block, inv, o = out.get()]() {
            a->ensure_grad();
            for (std::int64_t g = 0; g < groups; ++g) {
                const double gv = o->grad[static_cast<std::size_t>(g)] * inv;
                double* dst = a->grad.data() + g * block;
                for (std::int64_t i = 0; i < block; ++i) dst[i] += gv;
            }
        });
    }
    return out;
}

}  // namespace

TensorPtr spatial_pool(const TensorPtr& a) {
    check(a && a->ndim() == 5, "spatial_pool: expected (N,C,T,H,W), got " +
                                   shape_str(a ? a->shape : std::vector<std::int64_t>{}));
    const auto& s = a->shape;
    return block_mean(a, {s[0], s[1], s[2]}, s[0] * s[1] * s[2], s[3] * s[4], "spatial_pool");
}

TensorPtr st_pool(const TensorPtr& a) {
    check(a && a->ndim() == 5, "st_pool: expected (N,C,T,H,W), got " +
                                   shape_str(a ? a->shape : std::vector<std::int64_t>{}));
    const auto& s = a->shape;
    return block_mean(a, {s[0], s[1]}, s[0] * s[1], s[2] * s[3] * s[4], "st_pool");
}

TensorPtr spatial_pool2d(const TensorPtr& a) {
    check(a && a->ndim() == 4, "spatial_pool2d: expected (N,C,H,W), got " +
                                   shape_str(a ? a->shape : std::vector<std::int64_t>{}));
    const auto& s = a->shape;
    return block_mean(a, {s[0], s[1]}, s[0] * s[1], s[2] * s[3], "spatial_pool2d");
}

namespace {

// Shared nearest-neighbor upsample over the last `spatial` axes selected by
// per-axis factors (N,C,T,H,W layout).
TensorPtr upsample5d(const TensorPtr& a, int ft, int fh, int fw, const char* name) {
    check(a && a->ndim() == 5, std::string(name) + ": expected (N,C,T,H,W), got " +
                                   shape_str(a ? a->shape : std::vector<std::int64_t>{}));
    check(ft >= 1 && fh >= 1 && fw >= 1, std::string(name) + ": factor must be >= 1");
    const std::int64_t n = a->shape[0], c = a->shape[1], t = a->shape[2], h = a->shape[3],
                       w = a->shape[4];
    const std::int64_t to = t * ft, ho = h * fh, wo = w * fw;
    TensorPtr out = zeros({n, c, to, ho, wo}, a->requires_grad);
    auto src_index = [=](std::int64_t nc, std::int64_t tt, std::int64_t hh, std::int64_t ww) {
        return ((nc * t + tt / ft) * h + hh / fh) * w + ww / fw;
    };
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        for (std::int64_t tt = 0; tt < to; ++tt) {
            for (std::int64_t hh = 0; hh < ho; ++hh) {
                double* dst = out->data.data() + ((nc * to + tt) * ho + hh) * wo;
                for (std::int64_t ww = 0; ww < wo; ++ww) {
                    dst[ww] = a->data[static_cast<std::size_t>(src_index(nc, tt, hh, ww))];
                }
            }
        }
    }
    if (out->requires_grad) {
        record(out, {a}, [a, n, c, t, h, w, to, ho, wo, ft, fh, fw, o = out.get()]() {
            a->ensure_grad();
            for (std::int64_t nc = 0; nc < n * c; ++nc) {
                for (std::int64_t tt = 0; tt < to; ++tt) {
                    for (std::int64_t hh = 0; hh < ho; ++hh) {
                        const double* g = o->grad.data() + ((nc * to + tt) * ho + hh) * wo;
                        for (std::int64_t ww = 0; ww < wo; ++ww) {
                            const std::int64_t src =
                                ((nc * t + tt / ft) * h + hh / fh) * w + ww / fw;
                            a->grad[static_cast<std::size_t>(src)] += g[ww];
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

TensorPtr upsample_spatial(const TensorPtr& a, int factor) {
    return upsample5d(a, 1, factor, factor, "upsample_spatial");
}

TensorPtr upsample_temporal(const TensorPtr& a, int factor) {
    return upsample5d(a, factor, 1, 1, "upsample_temporal");
}

}  // namespace mscl
