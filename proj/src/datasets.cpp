#include "mtl/datasets.hpp"

#include <zlib.h>

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <string>

#include "mtl/errors.hpp"
#include "mtl/rng.hpp"

namespace mtl {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError("short write to " + path);
}

bool is_gzip(const std::vector<unsigned char>& bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in, const std::string& path) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) throw ParseError("zlib init failed for " + path);
  std::vector<unsigned char> out(std::max<std::size_t>(in.size() * 4, 1 << 16));
  zs.next_in = const_cast<unsigned char*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::size_t produced = 0;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (produced == out.size()) out.resize(out.size() * 2);
    zs.next_out = out.data() + produced;
    zs.avail_out = static_cast<uInt>(out.size() - produced);
    rc = inflate(&zs, Z_NO_FLUSH);
    produced = out.size() - zs.avail_out;
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw ParseError("corrupt gzip stream in " + path);
    }
  }
  inflateEnd(&zs);
  out.resize(produced);
  return out;
}

std::vector<unsigned char> gzip_bytes(const std::vector<unsigned char>& in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                   Z_DEFAULT_STRATEGY) != Z_OK) {
    throw Error("zlib deflate init failed");
  }
  std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<unsigned char*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  if (deflate(&zs, Z_FINISH) != Z_STREAM_END) {
    deflateEnd(&zs);
    throw Error("gzip compression failed");
  }
  out.resize(out.size() - zs.avail_out);
  deflateEnd(&zs);
  return out;
}

std::uint32_t read_u32_be(const std::vector<unsigned char>& b, std::size_t off,
                          const std::string& path) {
  if (off + 4 > b.size()) {
    throw ParseError(path + " truncated at byte " + std::to_string(b.size()) +
                     " while reading a u32 at offset " + std::to_string(off));
  }
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void push_u32_be(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

template <typename T>
void push_raw(std::vector<unsigned char>& b, const T* data, std::size_t count) {
  const auto* p = reinterpret_cast<const unsigned char*>(data);
  b.insert(b.end(), p, p + count * sizeof(T));
}

template <typename T>
void read_raw(const std::vector<unsigned char>& b, std::size_t& off, T* data,
              std::size_t count, const std::string& path) {
  const std::size_t bytes = count * sizeof(T);
  if (off + bytes > b.size()) {
    throw ParseError(path + " truncated at byte " + std::to_string(b.size()) +
                     " while reading " + std::to_string(bytes) + " bytes at offset " +
                     std::to_string(off));
  }
  std::memcpy(data, b.data() + off, bytes);
  off += bytes;
}

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

// Seven-segment layout: A top, B top-right, C bottom-right, D bottom,
// E bottom-left, F top-left, G middle. Bit t set = segment lit for digit.
constexpr int kSegmentsByClass[10] = {
    0b0111111,  // 0: ABCDEF
    0b0000110,  // 1: BC
    0b1011011,  // 2: ABDEG
    0b1001111,  // 3: ABCDG
    0b1100110,  // 4: BCFG
    0b1101101,  // 5: ACDFG
    0b1111101,  // 6: ACDEFG
    0b0000111,  // 7: ABC
    0b1111111,  // 8: all
    0b1101111,  // 9: ABCDFG
};

void draw_hline(std::vector<double>& img, int y, int x0, int x1, double v) {
  for (int t = 0; t < 2; ++t) {
    for (int x = x0; x <= x1; ++x) img[(y + t) * 28 + x] = v;
  }
}

void draw_vline(std::vector<double>& img, int x, int y0, int y1, double v) {
  for (int t = 0; t < 2; ++t) {
    for (int y = y0; y <= y1; ++y) img[y * 28 + x + t] = v;
  }
}

}  // namespace

void MultiTaskDataset::validate() const {
  const std::size_t count = n();
  if (count == 0) throw DimensionError("dataset has no examples");
  if (classification) {
    if (classes.empty()) throw DimensionError("classification dataset with no label tasks");
    for (const auto& task : classes) {
      if (task.size() != count) {
        throw DimensionError("task has " + std::to_string(task.size()) + " labels for " +
                             std::to_string(count) + " examples");
      }
    }
  } else {
    if (regression.empty()) throw DimensionError("regression dataset with no label tasks");
    for (const auto& task : regression) {
      if (task.size() != count) {
        throw DimensionError("task has " + std::to_string(task.size()) + " labels for " +
                             std::to_string(count) + " examples");
      }
    }
  }
}

std::pair<std::vector<int>, std::vector<int>> frequency_sets() {
  std::vector<int> w1, w2;
  for (int i = 0; i <= 29; ++i) w1.push_back(i);
  for (int i = 50; i <= 79; ++i) w1.push_back(i);
  for (int i = 100; i <= 129; ++i) w1.push_back(i);
  for (int i = 25; i <= 49; ++i) w2.push_back(i);
  for (int i = 75; i <= 99; ++i) w2.push_back(i);
  for (int i = 125; i <= 149; ++i) w2.push_back(i);
  return {w1, w2};
}

namespace {

MultiTaskDataset gen_synthetic_split(const SyntheticSpec& spec, const Rng& stream,
                                     std::size_t n) {
  const auto [w1, w2] = frequency_sets();
  const std::vector<int>* sets[2] = {&w1, &w2};
  MultiTaskDataset ds;
  ds.classification = false;
  ds.regression.assign(2, std::vector<double>(n));
  std::vector<double> inputs(n * spec.input_dim);
  for (std::size_t i = 0; i < n; ++i) {
    Rng ex = stream.derive(static_cast<std::uint64_t>(i));
    double x = 0.0;
    for (std::size_t d = 0; d < spec.input_dim; ++d) {
      const double v = ex.uniform(-0.5, 0.5);
      inputs[i * spec.input_dim + d] = v;
      x += v;
    }
    for (int t = 0; t < 2; ++t) {
      const double e = ex.normal();
      double signal = 0.0;
      if (spec.label_form == LabelForm::kSinusoidal) {
        for (int w : *sets[t]) signal += std::sin(w * x);
      } else {
        double wsum = 0.0;
        for (int w : *sets[t]) wsum += w;
        signal = wsum * x;
      }
      ds.regression[t][i] = signal + static_cast<double>(sets[t]->size()) * spec.noise * e;
    }
  }
  ds.inputs = Tensor({n, spec.input_dim}, std::move(inputs));
  ds.validate();
  return ds;
}

}  // namespace

std::pair<MultiTaskDataset, MultiTaskDataset> gen_synthetic(const SyntheticSpec& spec) {
  if (spec.input_dim == 0) throw ConfigError("synthetic input_dim must be >= 1");
  if (spec.noise < 0.0) throw ConfigError("synthetic noise must be >= 0");
  if (spec.n_train == 0 || spec.n_test == 0) {
    throw ConfigError("synthetic splits must be nonempty");
  }
  Rng root(spec.seed);
  return {gen_synthetic_split(spec, root.derive("train"), spec.n_train),
          gen_synthetic_split(spec, root.derive("test"), spec.n_test)};
}

IdxFile load_idx(const std::string& path) {
  std::vector<unsigned char> bytes = read_file(path);
  if (is_gzip(bytes)) bytes = gunzip(bytes, path);
  const std::uint32_t magic = read_u32_be(bytes, 0, path);
  IdxFile out;
  if (magic == kImagesMagic) {
    out.is_images = true;
    const std::size_t n = read_u32_be(bytes, 4, path);
    out.rows = read_u32_be(bytes, 8, path);
    out.cols = read_u32_be(bytes, 12, path);
    const std::size_t need = 16 + n * out.rows * out.cols;
    if (bytes.size() < need) {
      throw ParseError(path + " truncated at byte " + std::to_string(bytes.size()) +
                       ", image payload needs " + std::to_string(need));
    }
    std::vector<double> px(n * out.rows * out.cols);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = bytes[16 + i] / 255.0;
    out.images = Tensor({n, out.rows * out.cols}, std::move(px));
  } else if (magic == kLabelsMagic) {
    const std::size_t n = read_u32_be(bytes, 4, path);
    const std::size_t need = 8 + n;
    if (bytes.size() < need) {
      throw ParseError(path + " truncated at byte " + std::to_string(bytes.size()) +
                       ", label payload needs " + std::to_string(need));
    }
    out.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.labels.push_back(bytes[8 + i]);
  } else {
    throw ParseError(path + " has bad IDX magic at byte 0");
  }
  return out;
}

void save_idx_images(const std::string& path, const Tensor& images, std::size_t rows,
                     std::size_t cols, bool gzip_compress) {
  if (images.ndim() != 2 || images.cols() != rows * cols) {
    throw DimensionError("images " + shape_str(images.shape()) + " do not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::vector<unsigned char> bytes;
  push_u32_be(bytes, kImagesMagic);
  push_u32_be(bytes, static_cast<std::uint32_t>(images.rows()));
  push_u32_be(bytes, static_cast<std::uint32_t>(rows));
  push_u32_be(bytes, static_cast<std::uint32_t>(cols));
  for (double v : images.data()) {
    bytes.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  write_file(path, gzip_compress ? gzip_bytes(bytes) : bytes);
}

void save_idx_labels(const std::string& path, const std::vector<int>& labels,
                     bool gzip_compress) {
  std::vector<unsigned char> bytes;
  push_u32_be(bytes, kLabelsMagic);
  push_u32_be(bytes, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw ConfigError("label " + std::to_string(l) + " not a byte");
    bytes.push_back(static_cast<unsigned char>(l));
  }
  write_file(path, gzip_compress ? gzip_bytes(bytes) : bytes);
}

Tensor composite_multimnist(const Tensor& a, const Tensor& b) {
  if (a.size() != 784 || b.size() != 784) {
    throw DimensionError("compositor expects 28x28 sources, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  Tensor canvas({36, 36});
  // 2-pixel pad puts source (0,0) of A at canvas (2,2); B shifts 4 more.
  for (std::size_t r = 0; r < 28; ++r) {
    for (std::size_t c = 0; c < 28; ++c) {
      canvas.at(r + 2, c + 2) = a[r * 28 + c];
    }
  }
  for (std::size_t r = 0; r < 28; ++r) {
    for (std::size_t c = 0; c < 28; ++c) {
      double& px = canvas.at(r + 6, c + 6);
      px = std::max(px, b[r * 28 + c]);
    }
  }
  return canvas;
}

MultiTaskDataset make_multitask_image_dataset(const Tensor& images,
                                              const std::vector<int>& labels,
                                              std::size_t n_pairs, std::uint64_t seed) {
  if (images.ndim() != 2 || images.rows() == 0) throw ConfigError("empty image source");
  if (images.rows() != labels.size()) {
    throw DimensionError(std::to_string(labels.size()) + " labels for " +
                         std::to_string(images.rows()) + " images");
  }
  if (n_pairs == 0) throw ConfigError("n_pairs must be >= 1");
  const std::size_t n = images.rows();
  Rng pairs = Rng(seed).derive("pairs");
  MultiTaskDataset ds;
  ds.classification = true;
  ds.classes.assign(2, std::vector<int>(n_pairs));
  std::vector<double> inputs(n_pairs * 1296);
  std::vector<double> row_a(784), row_b(784);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Rng ex = pairs.derive(static_cast<std::uint64_t>(i));
    const std::size_t ia = ex.next_below(n);
    const std::size_t ib = ex.next_below(n);
    std::copy_n(images.data().data() + ia * 784, 784, row_a.begin());
    std::copy_n(images.data().data() + ib * 784, 784, row_b.begin());
    Tensor canvas = composite_multimnist(Tensor({784}, row_a), Tensor({784}, row_b));
    std::copy_n(canvas.data().data(), 1296, inputs.begin() + i * 1296);
    ds.classes[0][i] = labels[ia];
    ds.classes[1][i] = labels[ib];
  }
  ds.inputs = Tensor({n_pairs, 1296}, std::move(inputs));
  ds.validate();
  return ds;
}

std::pair<Tensor, std::vector<int>> glyph_corpus(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("glyph corpus needs n >= 1");
  Rng root = Rng(seed).derive("glyphs");
  std::vector<double> data(n * 784);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng ex = root.derive(static_cast<std::uint64_t>(i));
    const int cls = static_cast<int>(i % 10);
    const int dx = static_cast<int>(ex.next_below(5)) - 2;
    const int dy = static_cast<int>(ex.next_below(5)) - 2;
    const double ink = ex.uniform(0.7, 1.0);
    std::vector<double> img(784, 0.0);
    const int seg = kSegmentsByClass[cls];
    const int x0 = 8 + dx, x1 = 18 + dx, yt = 5 + dy, ym = 13 + dy, yb = 21 + dy;
    if (seg & 0b0000001) draw_hline(img, yt, x0, x1, ink);          // A
    if (seg & 0b0000010) draw_vline(img, x1, yt, ym, ink);          // B
    if (seg & 0b0000100) draw_vline(img, x1, ym, yb, ink);          // C
    if (seg & 0b0001000) draw_hline(img, yb, x0, x1, ink);          // D
    if (seg & 0b0010000) draw_vline(img, x0, ym, yb, ink);          // E
    if (seg & 0b0100000) draw_vline(img, x0, yt, ym, ink);          // F
    if (seg & 0b1000000) draw_hline(img, ym, x0, x1, ink);          // G
    for (double& px : img) {
      px = std::clamp(px + ex.uniform(0.0, 0.08), 0.0, 1.0);
    }
    std::copy(img.begin(), img.end(), data.begin() + i * 784);
    labels[i] = cls;
  }
  return {Tensor({n, 784}, std::move(data)), std::move(labels)};
}

void save_dataset(const std::string& path, const MultiTaskDataset& ds) {
  ds.validate();
  nlohmann::json header{{"n", ds.n()},
                        {"dim", ds.dim()},
                        {"classification", ds.classification},
                        {"tasks", ds.num_tasks()}};
  const std::string hs = header.dump();
  std::vector<unsigned char> bytes;
  const char magic[6] = {'M', 'T', 'D', 'S', '0', '1'};
  push_raw(bytes, magic, 6);
  const std::uint64_t hlen = hs.size();
  push_raw(bytes, &hlen, 1);
  push_raw(bytes, hs.data(), hs.size());
  push_raw(bytes, ds.inputs.data().data(), ds.inputs.size());
  for (std::size_t t = 0; t < ds.num_tasks(); ++t) {
    if (ds.classification) {
      std::vector<std::int32_t> ls(ds.classes[t].begin(), ds.classes[t].end());
      push_raw(bytes, ls.data(), ls.size());
    } else {
      push_raw(bytes, ds.regression[t].data(), ds.regression[t].size());
    }
  }
  write_file(path, bytes);
}

MultiTaskDataset load_dataset(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  std::size_t off = 0;
  char magic[6];
  read_raw(bytes, off, magic, 6, path);
  if (std::memcmp(magic, "MTDS01", 6) != 0) {
    throw ParseError(path + " has bad dataset magic at byte 0");
  }
  std::uint64_t hlen = 0;
  read_raw(bytes, off, &hlen, 1, path);
  if (off + hlen > bytes.size()) {
    throw ParseError(path + " truncated at byte " + std::to_string(bytes.size()) +
                     " inside the header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<long>(off),
                                   bytes.begin() + static_cast<long>(off + hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + " header is not valid JSON: " + e.what());
  }
  off += hlen;
  const std::size_t n = header.at("n").get<std::size_t>();
  const std::size_t dim = header.at("dim").get<std::size_t>();
  const std::size_t tasks = header.at("tasks").get<std::size_t>();
  MultiTaskDataset ds;
  ds.classification = header.at("classification").get<bool>();
  std::vector<double> inputs(n * dim);
  read_raw(bytes, off, inputs.data(), inputs.size(), path);
  ds.inputs = Tensor({n, dim}, std::move(inputs));
  for (std::size_t t = 0; t < tasks; ++t) {
    if (ds.classification) {
      std::vector<std::int32_t> ls(n);
      read_raw(bytes, off, ls.data(), n, path);
      ds.classes.emplace_back(ls.begin(), ls.end());
    } else {
      std::vector<double> ys(n);
      read_raw(bytes, off, ys.data(), n, path);
      ds.regression.push_back(std::move(ys));
    }
  }
  if (off != bytes.size()) {
    throw ParseError(path + " has " + std::to_string(bytes.size() - off) +
                     " trailing bytes at offset " + std::to_string(off));
  }
  ds.validate();
  return ds;
}

void write_synthetic_csv(const std::string& path, const MultiTaskDataset& ds) {
  ds.validate();
  if (ds.classification) throw ConfigError("CSV export is for the synthetic regression data");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  for (std::size_t d = 0; d < ds.dim(); ++d) out << 'x' << (d + 1) << ',';
  for (std::size_t t = 0; t < ds.num_tasks(); ++t) {
    out << 'y' << (t + 1) << (t + 1 < ds.num_tasks() ? ',' : '\n');
  }
  char buf[32];
  auto emit = [&out, &buf](double v, char sep) {
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    out.write(buf, p - buf);
    out.put(sep);
  };
  for (std::size_t i = 0; i < ds.n(); ++i) {
    for (std::size_t d = 0; d < ds.dim(); ++d) emit(ds.inputs.at(i, d), ',');
    for (std::size_t t = 0; t < ds.num_tasks(); ++t) {
      emit(ds.regression[t][i], t + 1 < ds.num_tasks() ? ',' : '\n');
    }
  }
  if (!out) throw ParseError("short write to " + path);
}

}  // namespace mtl
