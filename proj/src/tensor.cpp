#include "dnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace dnet {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::graph: return "graph";
    case ErrorCode::io: return "io";
    case ErrorCode::parse: return "parse";
    case ErrorCode::config: return "config";
  }
  return "unknown";
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(h) + "," +
         std::to_string(w) + "," + std::to_string(c) + ")";
}

namespace {

void check_shape(const Shape& s) {
  if (s.n < 0 || s.h < 0 || s.w < 0 || s.c < 0) {
    throw Error(ErrorCode::invalid_argument, "negative extent in shape " + s.str());
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw Error(ErrorCode::shape_mismatch, std::string(op) + ": " +
                                               a.shape().str() + " vs " +
                                               b.shape().str());
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  check_shape(shape);
  node_->shape = shape;
  node_->data.assign(shape.size(), T(0));
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  check_shape(shape);
  if (data.size() != shape.size()) {
    throw Error(ErrorCode::shape_mismatch,
                "data length " + std::to_string(data.size()) +
                    " does not match shape " + shape.str());
  }
  node_->shape = shape;
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(shape);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw Error(ErrorCode::shape_mismatch, "item() on non-scalar " + shape().str());
  }
  return node_->data[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(size(), T(0));
  return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data);
}

template <typename T>
Graph<T> Graph<T>::trace(const Tensor<T>& root) {
  enum class Mark { open, done };
  Graph g;
  std::unordered_map<const detail::Node<T>*, Mark> marks;
  // Iterative post-order DFS; (node, next input index).
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  detail::Node<T>* start = root.node().get();
  stack.emplace_back(start, 0);
  marks[start] = Mark::open;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node<T>* child = node->inputs[next++].get();
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks[child] = Mark::open;
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::open) {
        throw Error(ErrorCode::graph, "cycle in recorded computation graph");
      }
      continue;
    }
    marks[node] = Mark::done;
    g.order_.push_back(node);
    stack.pop_back();
  }
  return g;
}

template <typename T>
bool Graph<T>::contains(const Tensor<T>& t) const {
  return std::find(order_.begin(), order_.end(), t.node().get()) != order_.end();
}

template <typename T>
void backward(const Tensor<T>& loss, const Graph<T>& graph) {
  if (loss.size() != 1) {
    throw Error(ErrorCode::shape_mismatch,
                "backward needs a scalar loss, got " + loss.shape().str());
  }
  if (!graph.contains(loss)) {
    throw Error(ErrorCode::graph, "loss is not part of the given graph");
  }
  auto* root = loss.node().get();
  root->grad_buffer()[0] += T(1);
  auto nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  backward(loss, Graph<T>::trace(loss));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> rule) {
  Tensor<T> out(shape, std::move(data));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.node());
  node->backward = std::move(rule);
  return out;
}

namespace {

// Accumulates `g` into input `idx` of `self` if that input wants a gradient.
template <typename T, typename F>
void accumulate(detail::Node<T>& self, std::size_t idx, F&& per_element) {
  auto& in = *self.inputs[idx];
  if (!in.requires_grad) return;
  auto& gin = in.grad_buffer();
  for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += per_element(i);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [](detail::Node<T>& self) {
                          const auto& g = self.grad;
                          accumulate(self, 0, [&](std::size_t i) { return g[i]; });
                          accumulate(self, 1, [&](std::size_t i) { return g[i]; });
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [](detail::Node<T>& self) {
                          const auto& g = self.grad;
                          accumulate(self, 0, [&](std::size_t i) { return g[i]; });
                          accumulate(self, 1, [&](std::size_t i) { return -g[i]; });
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [](detail::Node<T>& self) {
                          const auto& g = self.grad;
                          const auto& va = self.inputs[0]->data;
                          const auto& vb = self.inputs[1]->data;
                          accumulate(self, 0, [&](std::size_t i) { return g[i] * vb[i]; });
                          accumulate(self, 1, [&](std::size_t i) { return g[i] * va[i]; });
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * factor;
  return make_result<T>(x.shape(), std::move(out), {x},
                        [factor](detail::Node<T>& self) {
                          const auto& g = self.grad;
                          accumulate(self, 0, [&](std::size_t i) { return g[i] * factor; });
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = std::accumulate(x.data().begin(), x.data().end(), T(0));
  return make_result<T>({1, 1, 1, 1}, {total}, {x}, [](detail::Node<T>& self) {
    const T g = self.grad[0];
    accumulate(self, 0, [&](std::size_t) { return g; });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.empty()) throw Error(ErrorCode::invalid_argument, "mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) {
    throw Error(ErrorCode::invalid_argument, "concat_channels needs at least one part");
  }
  Shape out_shape = parts[0].shape();
  out_shape.c = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != out_shape.n || s.h != out_shape.h || s.w != out_shape.w) {
      throw Error(ErrorCode::shape_mismatch, "concat_channels: " +
                                                 parts[0].shape().str() + " vs " +
                                                 s.str());
    }
    offsets.push_back(out_shape.c);
    out_shape.c += s.c;
  }
  const std::size_t pixels = static_cast<std::size_t>(out_shape.n) * out_shape.h * out_shape.w;
  const int total_c = out_shape.c;
  std::vector<T> out(out_shape.size());
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int pc = parts[k].shape().c;
    auto src = parts[k].data();
    for (std::size_t p = 0; p < pixels; ++p) {
      std::copy_n(src.begin() + p * pc, pc, out.begin() + p * total_c + offsets[k]);
    }
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  return make_result<T>(out_shape, std::move(out), std::move(inputs),
                        [offsets, pixels, total_c](detail::Node<T>& self) {
                          for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                            auto& in = *self.inputs[k];
                            if (!in.requires_grad) continue;
                            const int pc = in.shape.c;
                            auto& gin = in.grad_buffer();
                            for (std::size_t p = 0; p < pixels; ++p) {
                              for (int c = 0; c < pc; ++c) {
                                gin[p * pc + c] += self.grad[p * total_c + offsets[k] + c];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count) {
  const Shape& s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw Error(ErrorCode::invalid_argument,
                "slice_channels [" + std::to_string(begin) + ", +" +
                    std::to_string(count) + ") out of range for " + s.str());
  }
  Shape out_shape{s.n, s.h, s.w, count};
  const std::size_t pixels = static_cast<std::size_t>(s.n) * s.h * s.w;
  std::vector<T> out(out_shape.size());
  auto src = x.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(src.begin() + p * s.c + begin, count, out.begin() + p * count);
  }
  const int total_c = s.c;
  return make_result<T>(out_shape, std::move(out), {x},
                        [=](detail::Node<T>& self) {
                          auto& in = *self.inputs[0];
                          if (!in.requires_grad) return;
                          auto& gin = in.grad_buffer();
                          for (std::size_t p = 0; p < pixels; ++p) {
                            for (int c = 0; c < count; ++c) {
                              gin[p * total_c + begin + c] += self.grad[p * count + c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] > T(0) ? dx[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    const auto& g = self.grad;
    const auto& v = self.inputs[0]->data;
    accumulate(self, 0, [&](std::size_t i) { return v[i] > T(0) ? g[i] : T(0); });
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Split by sign so exp never overflows.
    const T v = dx[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    const auto& g = self.grad;
    const auto& y = self.data;
    accumulate(self, 0, [&](std::size_t i) { return g[i] * y[i] * (T(1) - y[i]); });
  });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum, T eps) {
  const Shape& s = x.shape();
  const int C = s.c;
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->size() != static_cast<std::size_t>(C)) {
      throw Error(ErrorCode::shape_mismatch,
                  "batch_norm parameter " + p->shape().str() + " for input " + s.str());
    }
  }
  const std::size_t pixels = static_cast<std::size_t>(s.n) * s.h * s.w;
  if (pixels == 0) throw Error(ErrorCode::invalid_argument, "batch_norm of empty tensor");
  auto dx = x.data();
  std::vector<T> mu(C, T(0));
  std::vector<T> var(C, T(0));
  if (training) {
    for (std::size_t p = 0; p < pixels; ++p)
      for (int c = 0; c < C; ++c) mu[c] += dx[p * C + c];
    for (int c = 0; c < C; ++c) mu[c] /= static_cast<T>(pixels);
    for (std::size_t p = 0; p < pixels; ++p)
      for (int c = 0; c < C; ++c) {
        const T d = dx[p * C + c] - mu[c];
        var[c] += d * d;
      }
    for (int c = 0; c < C; ++c) var[c] /= static_cast<T>(pixels);
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (int c = 0; c < C; ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    std::copy(running_mean.data().begin(), running_mean.data().end(), mu.begin());
    std::copy(running_var.data().begin(), running_var.data().end(), var.begin());
  }
  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

  auto g = gamma.data();
  auto b = beta.data();
  std::vector<T> out(x.size());
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < C; ++c) {
      const std::size_t i = p * C + c;
      out[i] = g[c] * (dx[i] - mu[c]) * inv_std[c] + b[c];
    }

  return make_result<T>(
      s, std::move(out), {x, gamma, beta},
      [mu, inv_std, pixels, C, training](detail::Node<T>& self) {
        const auto& gout = self.grad;
        const auto& xv = self.inputs[0]->data;
        const auto& gv = self.inputs[1]->data;
        std::vector<T> sum_g(C, T(0));
        std::vector<T> sum_gx(C, T(0));
        for (std::size_t p = 0; p < pixels; ++p)
          for (int c = 0; c < C; ++c) {
            const std::size_t i = p * C + c;
            const T xhat = (xv[i] - mu[c]) * inv_std[c];
            sum_g[c] += gout[i];
            sum_gx[c] += gout[i] * xhat;
          }
        if (self.inputs[1]->requires_grad) {
          auto& gg = self.inputs[1]->grad_buffer();
          for (int c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (self.inputs[2]->requires_grad) {
          auto& gb = self.inputs[2]->grad_buffer();
          for (int c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (!self.inputs[0]->requires_grad) return;
        auto& gx = self.inputs[0]->grad_buffer();
        const T m = static_cast<T>(pixels);
        for (std::size_t p = 0; p < pixels; ++p)
          for (int c = 0; c < C; ++c) {
            const std::size_t i = p * C + c;
            if (training) {
              const T xhat = (xv[i] - mu[c]) * inv_std[c];
              gx[i] += gv[c] * inv_std[c] *
                       (gout[i] - sum_g[c] / m - xhat * sum_gx[c] / m);
            } else {
              gx[i] += gv[c] * inv_std[c] * gout[i];
            }
          }
      });
}

#define DNET_INSTANTIATE(T)                                                      \
  template class Tensor<T>;                                                      \
  template class Graph<T>;                                                       \
  template void backward<T>(const Tensor<T>&);                                   \
  template void backward<T>(const Tensor<T>&, const Graph<T>&);                  \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::vector<Tensor<T>>, \
                                    std::function<void(detail::Node<T>&)>);      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                  \
  template Tensor<T> concat_channels<T>(std::span<const Tensor<T>>);             \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, int, int);              \
  template Tensor<T> relu<T>(const Tensor<T>&);                                  \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                               \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&,           \
                                   const Tensor<T>&, Tensor<T>&, Tensor<T>&,     \
                                   bool, T, T);

DNET_INSTANTIATE(float)
DNET_INSTANTIATE(double)

}  // namespace dnet
