#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace phanes {

/// Row-major H x W grid.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw std::invalid_argument("negative grid size");
    data_.assign(static_cast<std::size_t>(height) * width, fill);
  }
  Grid(int height, int width, std::vector<T> data) : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("grid data size mismatch");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int r, int c) noexcept { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  const T& operator()(int r, int c) const noexcept { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  template <class U>
  bool same_shape(const Grid<U>& o) const noexcept {
    return height_ == o.height() && width_ == o.width();
  }

  bool operator==(const Grid& o) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

/// Grayscale image with values in [0, 1] once normalized.
class Image : public Grid<double> {
 public:
  using Grid<double>::Grid;
  Image() = default;
  explicit Image(Grid<double> g, std::string id = {}) : Grid<double>(std::move(g)), id(std::move(id)) {}

  std::string id;
};

/// Nonnegative per-pixel scores aligned with an image.
class ScoreMap : public Grid<double> {
 public:
  using Grid<double>::Grid;
  ScoreMap() = default;
  explicit ScoreMap(Grid<double> g) : Grid<double>(std::move(g)) {}
};

/// {0, 1} mask; 1 marks anomalous / to-be-filled pixels.
class BinaryMask : public Grid<std::uint8_t> {
 public:
  using Grid<std::uint8_t>::Grid;
  BinaryMask() = default;
  explicit BinaryMask(Grid<std::uint8_t> g) : Grid<std::uint8_t>(std::move(g)) {}

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto v : values()) n += v != 0;
    return n;
  }
  double fraction() const noexcept { return empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(size()); }
};

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" + std::to_string(a.height()) + "x" +
                                std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                                std::to_string(b.width()) + ")");
}

/// p-th percentile (0 < p <= 100) with linear interpolation between the
/// closest ranks: position (p/100)(n-1) in the sorted sample.
double percentile(std::vector<double> values, double p);

/// Percentile of a span without copying the caller's data order.
inline double percentile(std::span<const double> values, double p) {
  return percentile(std::vector<double>(values.begin(), values.end()), p);
}

/// Clamp every value into [0, 1].
Image clip01(Image image);

}  // namespace phanes
