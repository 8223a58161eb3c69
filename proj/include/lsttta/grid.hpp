#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsttta {

/// Thrown for malformed inputs to raster operations and file readers.
class GridError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major 2-D raster of finite doubles.
///
/// LST grids hold kelvin, index grids hold unitless values in [-1, 1].
/// Construction rejects non-finite values, so every Grid in flight is finite.
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t height, std::size_t width, double fill = 0.0);
  Grid(std::size_t height, std::size_t width, std::vector<double> values);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double operator()(std::size_t row, std::size_t col) const {
    return values_[row * width_ + col];
  }
  double& operator()(std::size_t row, std::size_t col) {
    return values_[row * width_ + col];
  }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  /// Arithmetic mean over the whole lattice.
  double mean() const;

  /// Copy of the window [row, row+h) x [col, col+w).
  Grid crop(std::size_t row, std::size_t col, std::size_t h,
            std::size_t w) const;

  bool same_shape(const Grid& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> values_;
};

/// NDVI / NDWI / NDBI on a common lattice.
struct IndexStack {
  Grid ndvi;
  Grid ndwi;
  Grid ndbi;

  /// Throws GridError if shapes differ or any value leaves [-1, 1].
  void validate() const;
  std::size_t height() const { return ndvi.height(); }
  std::size_t width() const { return ndvi.width(); }
  const Grid& operator[](std::size_t k) const;
  IndexStack crop(std::size_t row, std::size_t col, std::size_t h,
                  std::size_t w) const;
};

/// Mean of each factor x factor block. Throws if an axis is not divisible.
Grid block_aggregate(const Grid& g, std::size_t factor);

/// Replicates every pixel into a factor x factor block.
Grid upsample_replicate(const Grid& g, std::size_t factor);

/// Elementwise (a - b) / (a + b), 0 where a + b == 0. Inputs must be >= 0.
Grid normalized_difference(const Grid& a, const Grid& b);

/// Top-left anchor of a square patch.
struct PatchAnchor {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const PatchAnchor&, const PatchAnchor&) = default;
};

/// Row-major anchors of every size x size window reachable with the stride.
std::vector<PatchAnchor> extract_patches(std::size_t height, std::size_t width,
                                         std::size_t size, std::size_t stride);

inline std::vector<PatchAnchor> extract_patches(const Grid& g, std::size_t size,
                                                std::size_t stride) {
  return extract_patches(g.height(), g.width(), size, stride);
}

// GRD1 format: "GRD1 <h> <w>\n" then h*w little-endian IEEE-754 doubles.
void write_grid(const Grid& g, const std::filesystem::path& path);
Grid read_grid(const std::filesystem::path& path);

/// Writes `<base>.ndvi`, `<base>.ndwi`, `<base>.ndbi`.
void write_index_stack(const IndexStack& s, const std::filesystem::path& base);
IndexStack read_index_stack(const std::filesystem::path& base);

}  // namespace lsttta
