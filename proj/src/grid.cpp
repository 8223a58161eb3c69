#include "lsttta/grid.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lsttta {

namespace {

void check_finite(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw GridError("non-finite value at offset " + std::to_string(i));
    }
  }
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0x00000000000000FFull) << 56) | ((v & 0x000000000000FF00ull) << 40) |
        ((v & 0x0000000000FF0000ull) << 24) | ((v & 0x00000000FF000000ull) << 8) |
        ((v & 0x000000FF00000000ull) >> 8) | ((v & 0x0000FF0000000000ull) >> 24) |
        ((v & 0x00FF000000000000ull) >> 40) | ((v & 0xFF00000000000000ull) >> 56);
  }
  return v;
}

}  // namespace

Grid::Grid(std::size_t height, std::size_t width, double fill)
    : height_(height), width_(width), values_(height * width, fill) {
  if (!std::isfinite(fill)) throw GridError("non-finite fill value");
}

Grid::Grid(std::size_t height, std::size_t width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != height * width) {
    throw GridError("grid expects " + std::to_string(height * width) +
                    " values, got " + std::to_string(values_.size()));
  }
  check_finite(values_);
}

double Grid::mean() const {
  if (values_.empty()) throw GridError("mean of an empty grid");
  double sum = 0.0;
  for (double v : values_) sum += v;
  return sum / static_cast<double>(values_.size());
}

Grid Grid::crop(std::size_t row, std::size_t col, std::size_t h,
                std::size_t w) const {
  if (row + h > height_ || col + w > width_) {
    throw GridError("crop window exceeds grid bounds");
  }
  Grid out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    const double* src = values_.data() + (row + r) * width_ + col;
    std::copy(src, src + w, out.values_.data() + r * w);
  }
  return out;
}

void IndexStack::validate() const {
  if (!ndvi.same_shape(ndwi) || !ndvi.same_shape(ndbi)) {
    throw GridError("index stack grids differ in shape");
  }
  for (const Grid* g : {&ndvi, &ndwi, &ndbi}) {
    for (double v : g->values()) {
      if (v < -1.0 || v > 1.0) throw GridError("index value outside [-1, 1]");
    }
  }
}

const Grid& IndexStack::operator[](std::size_t k) const {
  switch (k) {
    case 0: return ndvi;
    case 1: return ndwi;
    case 2: return ndbi;
    default: throw GridError("index stack has three layers");
  }
}

IndexStack IndexStack::crop(std::size_t row, std::size_t col, std::size_t h,
                            std::size_t w) const {
  return {ndvi.crop(row, col, h, w), ndwi.crop(row, col, h, w),
          ndbi.crop(row, col, h, w)};
}

Grid block_aggregate(const Grid& g, std::size_t factor) {
  if (factor == 0) throw GridError("aggregation factor must be positive");
  if (g.height() % factor != 0) {
    throw GridError("height " + std::to_string(g.height()) +
                    " not divisible by factor " + std::to_string(factor));
  }
  if (g.width() % factor != 0) {
    throw GridError("width " + std::to_string(g.width()) +
                    " not divisible by factor " + std::to_string(factor));
  }
  const std::size_t oh = g.height() / factor;
  const std::size_t ow = g.width() / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Grid out(oh, ow);
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      const double first = g(r * factor, c * factor);
      double sum = 0.0;
      bool constant = true;
      for (std::size_t dr = 0; dr < factor; ++dr) {
        for (std::size_t dc = 0; dc < factor; ++dc) {
          const double v = g(r * factor + dr, c * factor + dc);
          constant = constant && v == first;
          sum += v;
        }
      }
      // A constant block averages to itself; the rounded sum might not.
      out(r, c) = constant ? first : sum * inv;
    }
  }
  return out;
}

Grid upsample_replicate(const Grid& g, std::size_t factor) {
  if (factor == 0) throw GridError("upsampling factor must be positive");
  Grid out(g.height() * factor, g.width() * factor);
  for (std::size_t r = 0; r < out.height(); ++r) {
    for (std::size_t c = 0; c < out.width(); ++c) {
      out(r, c) = g(r / factor, c / factor);
    }
  }
  return out;
}

Grid normalized_difference(const Grid& a, const Grid& b) {
  if (!a.same_shape(b)) throw GridError("normalized_difference: shape mismatch");
  Grid out(a.height(), a.width());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] < 0.0 || bv[i] < 0.0) {
      throw GridError("normalized_difference: negative input");
    }
    const double s = av[i] + bv[i];
    ov[i] = s == 0.0 ? 0.0 : (av[i] - bv[i]) / s;
  }
  return out;
}

std::vector<PatchAnchor> extract_patches(std::size_t height, std::size_t width,
                                         std::size_t size, std::size_t stride) {
  if (stride == 0) throw GridError("patch stride must be positive");
  if (size == 0 || size > height || size > width) {
    throw GridError("patch size " + std::to_string(size) +
                    " exceeds grid " + std::to_string(height) + "x" +
                    std::to_string(width));
  }
  std::vector<PatchAnchor> anchors;
  for (std::size_t r = 0; r + size <= height; r += stride) {
    for (std::size_t c = 0; c + size <= width; c += stride) {
      anchors.push_back({r, c});
    }
  }
  return anchors;
}

void write_grid(const Grid& g, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw GridError("cannot open " + path.string() + " for writing");
  out << "GRD1 " << g.height() << ' ' << g.width() << '\n';
  std::vector<char> payload(g.size() * 8);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(g.values()[i]));
    std::memcpy(payload.data() + i * 8, &bits, 8);
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw GridError("write failed for " + path.string());
}

Grid read_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw GridError("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) {
    throw GridError(path.string() + ": missing GRD1 header");
  }
  std::istringstream hs(header);
  std::string magic;
  long long h = -1;
  long long w = -1;
  std::string extra;
  if (!(hs >> magic >> h >> w) || magic != "GRD1" || h < 0 || w < 0 ||
      (hs >> extra)) {
    throw GridError(path.string() + ": malformed GRD1 header '" + header + "'");
  }
  const auto n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<char> payload(n * 8);
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size()) {
    throw GridError(path.string() + ": truncated payload");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw GridError(path.string() + ": trailing bytes after payload");
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, payload.data() + i * 8, 8);
    values[i] = std::bit_cast<double>(to_le(bits));
  }
  try {
    return Grid(static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                std::move(values));
  } catch (const GridError& e) {
    throw GridError(path.string() + ": " + e.what());
  }
}

void write_index_stack(const IndexStack& s, const std::filesystem::path& base) {
  write_grid(s.ndvi, base.string() + ".ndvi");
  write_grid(s.ndwi, base.string() + ".ndwi");
  write_grid(s.ndbi, base.string() + ".ndbi");
}

IndexStack read_index_stack(const std::filesystem::path& base) {
  IndexStack s{read_grid(base.string() + ".ndvi"),
               read_grid(base.string() + ".ndwi"),
               read_grid(base.string() + ".ndbi")};
  s.validate();
  return s;
}

}  // namespace lsttta
