#include "ueraser/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ueraser/error.hpp"
#include "ueraser/rng.hpp"

namespace ueraser {

void LabeledDataset::validate() const {
  if (images.size() != labels.size())
    throw ConfigError("dataset: image/label count mismatch");
  if (num_classes < 1) throw ConfigError("dataset: num_classes must be positive");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ConfigError("dataset: label out of range at index " + std::to_string(i));
    const Tensor& img = images[i];
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != height() || img.dim(2) != width())
      throw ConfigError("dataset: inconsistent image shape at index " + std::to_string(i));
    for (std::size_t k = 0; k < img.size(); ++k)
      if (!(img[k] >= 0.0f && img[k] <= 1.0f))
        throw ConfigError("dataset: pixel outside [0,1] at index " + std::to_string(i));
  }
}

std::vector<int> LabeledDataset::class_histogram() const {
  std::vector<int> h(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

void SynthSpec::validate() const {
  if (height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0)
    throw ConfigError("synth spec: H,W must be >= 8 and divisible by 4");
  if (num_classes < 2) throw ConfigError("synth spec: need at least 2 classes");
  if (train_per_class < 1 || test_per_class < 1)
    throw ConfigError("synth spec: per-class counts must be positive");
  if (class_strength < 0.0f || noise_std < 0.0f)
    throw ConfigError("synth spec: strength and noise std must be >= 0");
}

namespace {

// Per-class spatial template: 4x4 grid of +-1 blocks, same across channels.
Tensor class_template(const SynthSpec& spec, int cls) {
  RngStream rng = derive_stream(spec.seed, "synth.template", static_cast<std::uint64_t>(cls));
  const int bh = spec.height / 4, bw = spec.width / 4;
  Tensor t({spec.height, spec.width});
  for (int by = 0; by < 4; ++by) {
    for (int bx = 0; bx < 4; ++bx) {
      const float sign = rng.coin(0.5) ? 1.0f : -1.0f;
      for (int y = by * bh; y < (by + 1) * bh; ++y)
        for (int x = bx * bw; x < (bx + 1) * bw; ++x) t.at(y, x) = sign;
    }
  }
  return t;
}

LabeledDataset synth_split(const SynthSpec& spec, const std::vector<Tensor>& templates,
                           int per_class, const char* split_label, DatasetTag tag) {
  LabeledDataset ds;
  ds.num_classes = spec.num_classes;
  ds.tag = tag;
  ds.images.reserve(static_cast<std::size_t>(per_class) * spec.num_classes);
  ds.labels.reserve(ds.images.capacity());
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      RngStream rng = derive_stream(spec.seed, split_label, static_cast<std::uint64_t>(cls),
                                    static_cast<std::uint64_t>(i));
      Tensor img({3, spec.height, spec.width});
      const Tensor& tpl = templates[static_cast<std::size_t>(cls)];
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < spec.height; ++y)
          for (int x = 0; x < spec.width; ++x) {
            const float v = spec.noise_std * static_cast<float>(rng.normal()) +
                            spec.class_strength * tpl.at(y, x);
            img.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
          }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(cls);
    }
  }
  return ds;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> synth_dataset(const SynthSpec& spec) {
  spec.validate();
  std::vector<Tensor> templates;
  templates.reserve(static_cast<std::size_t>(spec.num_classes));
  for (int cls = 0; cls < spec.num_classes; ++cls) templates.push_back(class_template(spec, cls));

  LabeledDataset train = synth_split(spec, templates, spec.train_per_class, "synth.train",
                                     DatasetTag::train);
  LabeledDataset test = synth_split(spec, templates, spec.test_per_class, "synth.test",
                                    DatasetTag::test);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarRecord = 1 + 3 * kCifarDim * kCifarDim;  // 3073
constexpr int kCifarPerBatch = 10000;

void load_cifar_batch(const std::filesystem::path& file, LabeledDataset& out) {
  std::error_code ec;
  const auto fsize = std::filesystem::file_size(file, ec);
  if (ec) throw FormatError("cifar10: cannot stat " + file.string());
  if (fsize != static_cast<std::uintmax_t>(kCifarRecord) * kCifarPerBatch)
    throw FormatError("cifar10: wrong file size in " + file.string() + " (expected " +
                      std::to_string(kCifarRecord * kCifarPerBatch) + " bytes, got " +
                      std::to_string(fsize) + ")");

  std::ifstream is(file, std::ios::binary);
  if (!is) throw FormatError("cifar10: cannot open " + file.string());
  std::vector<unsigned char> record(kCifarRecord);
  for (int r = 0; r < kCifarPerBatch; ++r) {
    is.read(reinterpret_cast<char*>(record.data()), kCifarRecord);
    if (!is) throw FormatError("cifar10: truncated read in " + file.string());
    const int label = record[0];
    if (label > 9) throw FormatError("cifar10: label byte > 9 in " + file.string());
    Tensor img({3, kCifarDim, kCifarDim});
    for (std::size_t k = 0; k < 3u * kCifarDim * kCifarDim; ++k)
      img[k] = byte_to_pixel(record[1 + k]);
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
}

}  // namespace

std::uint8_t pixel_to_byte(float v) {
  const long b = std::lround(static_cast<double>(v) * 255.0);
  return static_cast<std::uint8_t>(std::clamp(b, 0l, 255l));
}

float byte_to_pixel(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

std::pair<LabeledDataset, LabeledDataset> load_cifar10(const std::filesystem::path& dir) {
  LabeledDataset train, test;
  train.num_classes = test.num_classes = 10;
  train.tag = DatasetTag::train;
  test.tag = DatasetTag::test;
  for (int i = 1; i <= 5; ++i)
    load_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), train);
  load_cifar_batch(dir / "test_batch.bin", test);
  return {std::move(train), std::move(test)};
}

namespace {

void write_cifar_records(std::ofstream& os, const LabeledDataset& ds, std::size_t begin,
                         std::size_t end) {
  std::vector<unsigned char> record(kCifarRecord);
  for (std::size_t i = begin; i < end; ++i) {
    record[0] = static_cast<unsigned char>(ds.labels[i]);
    const Tensor& img = ds.images[i];
    for (std::size_t k = 0; k < img.size(); ++k) record[1 + k] = pixel_to_byte(img[k]);
    os.write(reinterpret_cast<const char*>(record.data()), kCifarRecord);
  }
}

}  // namespace

void save_cifar10(const std::filesystem::path& dir, const LabeledDataset& train,
                  const LabeledDataset& test) {
  if (train.size() != 5u * kCifarPerBatch || test.size() != kCifarPerBatch)
    throw ConfigError("save_cifar10: expects 50000 train / 10000 test records");
  if (train.height() != kCifarDim || train.width() != kCifarDim)
    throw ConfigError("save_cifar10: expects 32x32 images");
  std::filesystem::create_directories(dir);
  for (int b = 0; b < 5; ++b) {
    std::ofstream os(dir / ("data_batch_" + std::to_string(b + 1) + ".bin"),
                     std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("save_cifar10: cannot write batch file");
    write_cifar_records(os, train, static_cast<std::size_t>(b) * kCifarPerBatch,
                        static_cast<std::size_t>(b + 1) * kCifarPerBatch);
  }
  std::ofstream os(dir / "test_batch.bin", std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("save_cifar10: cannot write test file");
  write_cifar_records(os, test, 0, test.size());
}

// ---------------------------------------------------------------------------
// Generic dataset file: header + CIFAR record layout

namespace {
constexpr char kDatasetMagic[4] = {'U', 'E', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open dataset file for writing: " + path.string());
  os.write(kDatasetMagic, 4);
  auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  w32(kDatasetVersion);
  w32(static_cast<std::uint32_t>(ds.height()));
  w32(static_cast<std::uint32_t>(ds.width()));
  w32(static_cast<std::uint32_t>(ds.num_classes));
  w32(static_cast<std::uint32_t>(ds.size()));
  const std::uint8_t tag = static_cast<std::uint8_t>(ds.tag);
  os.write(reinterpret_cast<const char*>(&tag), 1);

  std::vector<unsigned char> record;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor& img = ds.images[i];
    record.assign(1 + img.size(), 0);
    record[0] = static_cast<unsigned char>(ds.labels[i]);
    for (std::size_t k = 0; k < img.size(); ++k) record[1 + k] = pixel_to_byte(img[k]);
    os.write(reinterpret_cast<const char*>(record.data()),
             static_cast<std::streamsize>(record.size()));
  }
  if (!os) throw FormatError("dataset write failed: " + path.string());
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset file: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw FormatError("dataset: bad magic in " + path.string());
  auto r32 = [&]() {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  if (r32() != kDatasetVersion) throw FormatError("dataset: unsupported version");
  const int h = static_cast<int>(r32());
  const int w = static_cast<int>(r32());
  const int ncls = static_cast<int>(r32());
  const std::uint32_t count = r32();
  std::uint8_t tag = 0;
  is.read(reinterpret_cast<char*>(&tag), 1);
  if (!is || h < 1 || w < 1 || ncls < 1) throw FormatError("dataset: bad header");

  LabeledDataset ds;
  ds.num_classes = ncls;
  ds.tag = static_cast<DatasetTag>(tag);
  const std::size_t rec = 1 + 3u * h * w;
  std::vector<unsigned char> record(rec);
  for (std::uint32_t i = 0; i < count; ++i) {
    is.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(rec));
    if (!is) throw FormatError("dataset: truncated record in " + path.string());
    if (record[0] >= ncls) throw FormatError("dataset: label out of range");
    Tensor img({3, h, w});
    for (std::size_t k = 0; k + 1 < rec; ++k) img[k] = byte_to_pixel(record[1 + k]);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(record[0]);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Minibatches

std::vector<std::size_t> epoch_permutation(std::size_t n, int epoch, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  RngStream rng = derive_stream(seed, "data.shuffle", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.bounded(i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

std::vector<Minibatch> minibatches(const LabeledDataset& ds, int batch_size, int epoch,
                                   std::uint64_t seed) {
  if (batch_size < 1 || static_cast<std::size_t>(batch_size) > ds.size())
    throw ConfigError("minibatches: batch size must be in [1, dataset size]");
  const int h = ds.height(), w = ds.width();
  const std::vector<std::size_t> perm = epoch_permutation(ds.size(), epoch, seed);

  std::vector<Minibatch> out;
  for (std::size_t start = 0; start < perm.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(batch_size, perm.size() - start);
    Minibatch mb;
    mb.images = Tensor({static_cast<int>(count), 3, h, w});
    mb.labels.resize(count);
    mb.indices.resize(count);
    const std::size_t stride = 3u * h * w;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t idx = perm[start + k];
      mb.indices[k] = idx;
      mb.labels[k] = ds.labels[idx];
      std::memcpy(mb.images.data() + k * stride, ds.images[idx].data(), stride * sizeof(float));
    }
    out.push_back(std::move(mb));
  }
  return out;
}

}  // namespace ueraser
