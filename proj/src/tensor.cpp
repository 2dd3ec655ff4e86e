#include "s2vc/tensor.hpp"

#include <algorithm>

namespace s2vc {

std::string shape_string(std::span<const std::size_t> shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> acc(n * m, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* out = acc.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const T* brow = bd.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) out[j] += av * static_cast<double>(brow[j]);
    }
  }
  BasicTensor<T> c({n, m});
  for (std::size_t i = 0; i < acc.size(); ++i) c[i] = static_cast<T>(acc[i]);
  return c;
}

template <typename T>
double sum(const BasicTensor<T>& a) {
  double s = 0.0;
  for (const T v : a.data()) s += static_cast<double>(v);
  return s;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
double norm(const BasicTensor<T>& a) {
  double s = 0.0;
  for (const T v : a.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template Tensor matmul(const Tensor&, const Tensor&);
template Tensor64 matmul(const Tensor64&, const Tensor64&);
template double sum(const Tensor&);
template double sum(const Tensor64&);
template double max_abs_diff(const Tensor&, const Tensor&);
template double max_abs_diff(const Tensor64&, const Tensor64&);
template double norm(const Tensor&);
template double norm(const Tensor64&);

}  // namespace s2vc
