#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtl/tensor.hpp"

namespace mtl {

// The two overlapping integer frequency sets of the synthetic benchmark:
// W1 = [0,29] u [50,79] u [100,129], W2 = [25,49] u [75,99] u [125,149].
std::pair<std::vector<int>, std::vector<int>> frequency_sets();

enum class LabelForm { kSinusoidal, kLinear };

struct SyntheticSpec {
  std::size_t input_dim = 200;
  std::size_t n_train = 100000;
  std::size_t n_test = 10000;
  double noise = 0.2;
  LabelForm label_form = LabelForm::kSinusoidal;
  std::uint64_t seed = 0;
};

// Inputs plus per-task labels. Exactly one of `regression`/`classes` is
// populated, both indexed [task][example].
struct MultiTaskDataset {
  Tensor inputs;  // n x dim, images flattened row-major
  std::vector<std::vector<double>> regression;
  std::vector<std::vector<int>> classes;
  bool classification = false;

  std::size_t n() const { return inputs.ndim() == 2 ? inputs.shape()[0] : 0; }
  std::size_t dim() const { return inputs.ndim() == 2 ? inputs.shape()[1] : 0; }
  std::size_t num_tasks() const { return classification ? classes.size() : regression.size(); }
  void validate() const;
};

// Two-task regression data per the synthetic recipe: x_d ~ U[-1/2,1/2),
// x = sum_d x_d, e_t ~ N(0,1) per example, and
//   sinusoidal: y_t = sum_{w in W_t} sin(w x)  + |W_t| * noise * e_t
//   linear:     y_t = (sum_{w in W_t} w) * x   + |W_t| * noise * e_t.
// Train and test come from disjoint named rng streams of `seed`; each
// example's stream derives from its index, so generation is order-free.
std::pair<MultiTaskDataset, MultiTaskDataset> gen_synthetic(const SyntheticSpec& spec);

// IDX (MNIST container format) reading and writing. Gzip files are detected
// by magic bytes and inflated transparently. Pixels map to [0,1] on read.
struct IdxFile {
  bool is_images = false;
  std::size_t rows = 0, cols = 0;
  Tensor images;  // n x (rows*cols)
  std::vector<int> labels;
};

IdxFile load_idx(const std::string& path);
void save_idx_images(const std::string& path, const Tensor& images, std::size_t rows,
                     std::size_t cols, bool gzip_compress = false);
void save_idx_labels(const std::string& path, const std::vector<int>& labels,
                     bool gzip_compress = false);

// Overlays two 28x28 digits: each is zero-padded to 32x32 (2 per side), the
// first lands at canvas offset (0,0), the second at (4,4), overlaps resolve
// by pixelwise max. Canvas is always 36x36.
Tensor composite_multimnist(const Tensor& a, const Tensor& b);

// n_pairs composited examples with task labels (class of A, class of B);
// source indices drawn uniformly from per-pair seeded streams.
MultiTaskDataset make_multitask_image_dataset(const Tensor& images,
                                              const std::vector<int>& labels,
                                              std::size_t n_pairs, std::uint64_t seed);

// Deterministic 10-class seven-segment glyph corpus (28x28, labels i mod 10,
// per-example jitter and noise). Stands in for MNIST-format files in offline
// smoke tests; written and read through the real IDX pipeline.
std::pair<Tensor, std::vector<int>> glyph_corpus(std::size_t n, std::uint64_t seed);

// Binary dataset container: JSON header + little-endian payload.
void save_dataset(const std::string& path, const MultiTaskDataset& ds);
MultiTaskDataset load_dataset(const std::string& path);

// Plain-text export for the synthetic case: x1..xD,y1,y2 per row.
void write_synthetic_csv(const std::string& path, const MultiTaskDataset& ds);

}  // namespace mtl
