#include <algorithm>
#include <cmath>
#include <fstream>

#include "mbf/harness.hpp"

namespace mbf::harness {

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path.string() + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

IdxArray read_idx(const std::filesystem::path& path, std::uint32_t expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  IdxArray a;
  a.magic = read_be32(in, path);
  if (a.magic != expected_magic) {
    throw FormatError(path.string() + ": IDX magic " + std::to_string(a.magic) + ", expected " +
                      std::to_string(expected_magic));
  }
  const std::uint32_t ndims = a.magic & 0xFF;
  std::size_t total = 1;
  for (std::uint32_t d = 0; d < ndims; ++d) {
    a.dims.push_back(read_be32(in, path));
    total *= a.dims.back();
  }
  a.data.resize(total);
  if (!in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(total))) {
    throw FormatError(path.string() + ": payload shorter than the header declares");
  }
  return a;
}

void write_idx(const std::filesystem::path& path, const IdxArray& a) {
  std::size_t total = 1;
  for (auto d : a.dims) total *= d;
  if (total != a.data.size()) throw FormatError(path.string() + ": IDX dims do not match payload size");
  if ((a.magic & 0xFF) != a.dims.size()) throw FormatError(path.string() + ": IDX magic disagrees with dim count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_be32(out, a.magic);
  for (auto d : a.dims) write_be32(out, d);
  out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

nn::Batch load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, LabelMode mode,
                   std::size_t classes) {
  const IdxArray img = read_idx(images, kIdxImagesMagic);
  const IdxArray lab = read_idx(labels, kIdxLabelsMagic);
  const std::size_t n = img.dims[0], d = std::size_t{img.dims[1]} * img.dims[2];
  if (lab.dims[0] != n) {
    throw ConsistencyError(images.string() + " holds " + std::to_string(n) + " images but " + labels.string() +
                           " holds " + std::to_string(lab.dims[0]) + " labels");
  }
  nn::Batch b{Matrix(n, d), Matrix(n, mode == LabelMode::one_hot ? classes : 1)};
  for (std::size_t k = 0; k < n * d; ++k) b.x.data()[k] = img.data[k] / 255.0;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t label = lab.data[s];
    if (mode == LabelMode::raw) {
      b.y(s, 0) = static_cast<double>(label);
    } else {
      if (label >= classes) {
        throw FormatError(labels.string() + ": label " + std::to_string(label) + " outside " +
                          std::to_string(classes) + " classes");
      }
      b.y(s, label) = 1.0;
    }
  }
  return b;
}

void write_idx_batch(const nn::Batch& batch, std::size_t rows, std::size_t cols, const std::filesystem::path& images,
                     const std::filesystem::path& labels) {
  const std::size_t n = batch.size();
  if (batch.x.cols() != rows * cols) throw ConsistencyError("write_idx_batch: image size does not match rows*cols");
  IdxArray img{kIdxImagesMagic, {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(rows),
                                 static_cast<std::uint32_t>(cols)}, {}};
  img.data.reserve(batch.x.size());
  for (double v : batch.x.values()) {
    img.data.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)));
  }
  IdxArray lab{kIdxLabelsMagic, {static_cast<std::uint32_t>(n)}, {}};
  for (std::size_t s = 0; s < n; ++s) {
    const auto row = batch.y.row(s);
    const std::size_t label = row.size() == 1 ? static_cast<std::size_t>(std::lround(row[0]))
                                              : static_cast<std::size_t>(std::max_element(row.begin(), row.end()) -
                                                                         row.begin());
    lab.data.push_back(static_cast<std::uint8_t>(label));
  }
  write_idx(images, img);
  write_idx(labels, lab);
}

Matrix resize_area(const Matrix& images, std::size_t src, std::size_t dst) {
  if (images.cols() != src * src) throw ConsistencyError("resize_area: rows are not src x src images");
  if (dst == 0) throw ConfigError("resize_area: target side must be positive");
  // Overlap weights of each destination cell with each source cell along one axis.
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  Matrix w(dst, src);
  for (std::size_t o = 0; o < dst; ++o) {
    const double lo = o * scale, hi = (o + 1) * scale;
    for (std::size_t i = 0; i < src; ++i) {
      const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0) w(o, i) = overlap / scale;
    }
  }
  Matrix out(images.rows(), dst * dst);
  for (std::size_t s = 0; s < images.rows(); ++s) {
    const Matrix img(src, src, std::vector<double>(images.row(s).begin(), images.row(s).end()));
    const Matrix r = linalg::matmul(linalg::matmul(w, img), w, false, true);
    std::copy_n(r.data(), dst * dst, out.row(s).begin());
  }
  return out;
}

}  // namespace mbf::harness
