#include "ueraser/poison.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ueraser/error.hpp"
#include "ueraser/parallel.hpp"
#include "ueraser/rng.hpp"

namespace ueraser {

void PoisonSpec::validate() const {
  // epsilon 0 is allowed and yields all-zero deltas
  if (!(epsilon >= 0.0f)) throw ConfigError("poison spec: epsilon must be >= 0");
  if (fraction < 0.0 || fraction > 1.0)
    throw ConfigError("poison spec: fraction must be in [0,1]");
  if (surrogate_steps_per_round < 1 || delta_steps < 1 || max_rounds < 1)
    throw ConfigError("poison spec: schedule constants must be positive");
  if (stop_train_accuracy <= 0.0f || stop_train_accuracy > 1.0f)
    throw ConfigError("poison spec: stop accuracy must be in (0,1]");
}

namespace {

// Surrogate training accuracy on x+delta, no augmentation.
double fit_accuracy(const ModelParams& params, const LabeledDataset& ds,
                    const std::vector<Tensor>& deltas) {
  const int h = ds.height(), w = ds.width();
  const std::size_t stride = 3u * h * w;
  const std::size_t chunk = 256;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t count = std::min(chunk, ds.size() - start);
    Tensor batch({static_cast<int>(count), 3, h, w});
    for (std::size_t i = 0; i < count; ++i) {
      const Tensor& x = ds.images[start + i];
      const Tensor& d = deltas[start + i];
      float* out = batch.data() + i * stride;
      for (std::size_t j = 0; j < stride; ++j) out[j] = std::clamp(x[j] + d[j], 0.0f, 1.0f);
    }
    const Tensor logits = forward(params, batch);
    for (std::size_t i = 0; i < count; ++i) {
      int arg = 0;
      for (int c = 1; c < logits.dim(1); ++c)
        if (logits.at(static_cast<int>(i), c) > logits.at(static_cast<int>(i), arg)) arg = c;
      if (arg == ds.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

PerturbationSet em_poison_impl(const LabeledDataset& ds, const PoisonSpec& spec,
                               const AdaptiveAugs& augs) {
  spec.validate();
  ds.validate();
  const std::size_t n = ds.size();
  const int h = ds.height(), w = ds.width();
  const std::size_t stride = 3u * h * w;
  const float eps = spec.epsilon;
  const float step = spec.step_size > 0.0f ? spec.step_size : eps / 10.0f;

  PerturbationSet pset;
  pset.kind = augs.any() ? PoisonKind::adaptive_em : PoisonKind::em;
  pset.norm = spec.norm;
  pset.epsilon = eps;
  pset.granularity = Granularity::sample_wise;
  pset.seed = spec.seed;
  pset.deltas.assign(n, Tensor({3, h, w}));

  ModelParams surrogate = ModelParams::init(h, w, ds.num_classes,
                                            derive_key(spec.seed, "poison.surrogate"));
  const TrainConfig& tc = spec.surrogate;
  const int bsz = std::min<int>(tc.batch_size, static_cast<int>(n));

  for (int round = 1; round <= spec.max_rounds; ++round) {
    // (a) M surrogate SGD steps on the current poisoned data
    const std::vector<Minibatch> batches =
        minibatches(ds, bsz, round, derive_key(spec.seed, "poison.batches"));
    const int m_steps = std::min<int>(spec.surrogate_steps_per_round,
                                      static_cast<int>(batches.size()));
    for (int m = 0; m < m_steps; ++m) {
      const Minibatch& mb = batches[static_cast<std::size_t>(m)];
      const int count = mb.images.dim(0);
      Tensor batch(mb.images.shape());
      parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
        const float* x = mb.images.data() + i * stride;
        const Tensor& d = pset.deltas[mb.indices[i]];
        float* out = batch.data() + i * stride;
        for (std::size_t j = 0; j < stride; ++j) out[j] = std::clamp(x[j] + d[j], 0.0f, 1.0f);
        if (augs.any()) {
          RngStream rng = derive_stream(spec.seed, "poison.train_aug",
                                        static_cast<std::uint64_t>(round), mb.indices[i],
                                        static_cast<std::uint64_t>(m));
          PolicySample sample =
              sample_adaptive_policy(rng, augs.plasma, augs.trivial, augs.channel_shuffle);
          Tensor img({3, h, w});
          std::memcpy(img.data(), out, stride * sizeof(float));
          const Tensor aug = apply(sample, img);
          std::memcpy(out, aug.data(), stride * sizeof(float));
        }
      });
      GradTape tape;
      forward(surrogate, batch, &tape);
      Gradients grads = backward(surrogate, tape, mb.labels);
      sgd_step(surrogate, grads, tc.lr, tc.momentum, tc.weight_decay);
    }

    // Convergence means the surrogate has learned the perturbed data, so
    // the check sits after the training phase; right after the delta phase
    // it would trivially hold against the current decision boundary.
    pset.fit_accuracy = fit_accuracy(surrogate, ds, pset.deltas);
    if (round > 1 && pset.fit_accuracy >= spec.stop_train_accuracy) {
      pset.converged = true;
      return pset;
    }

    // (b) per-image signed-gradient descent on the loss w.r.t. delta
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(bsz)) {
      const std::size_t count = std::min<std::size_t>(bsz, n - start);
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = ds.labels[start + i];

      for (int t = 0; t < spec.delta_steps; ++t) {
        Tensor batch({static_cast<int>(count), 3, h, w});
        std::vector<PolicySample> samples(count);
        parallel_for(count, [&](std::size_t i) {
          const Tensor& x = ds.images[start + i];
          const Tensor& d = pset.deltas[start + i];
          float* out = batch.data() + i * stride;
          for (std::size_t j = 0; j < stride; ++j) out[j] = x[j] + d[j];
          if (augs.any()) {
            RngStream rng = derive_stream(spec.seed, "poison.delta_aug",
                                          static_cast<std::uint64_t>(round), start + i,
                                          static_cast<std::uint64_t>(t));
            samples[i] =
                sample_adaptive_policy(rng, augs.plasma, augs.trivial, augs.channel_shuffle);
            Tensor img({3, h, w});
            std::memcpy(img.data(), out, stride * sizeof(float));
            const Tensor aug = apply(samples[i], img);
            std::memcpy(out, aug.data(), stride * sizeof(float));
          }
        });

        GradTape tape;
        forward(surrogate, batch, &tape);
        const Tensor ginput = backward_input(surrogate, tape, labels);

        parallel_for(count, [&](std::size_t i) {
          const Tensor& x = ds.images[start + i];
          Tensor& d = pset.deltas[start + i];
          Tensor g({3, h, w});
          std::memcpy(g.data(), ginput.data() + i * stride, stride * sizeof(float));
          if (augs.any()) {
            Tensor poisoned({3, h, w});
            for (std::size_t j = 0; j < stride; ++j) poisoned[j] = x[j] + d[j];
            g = apply_vjp(samples[i], poisoned, g);
          }
          for (std::size_t j = 0; j < stride; ++j) {
            const float s = g[j] > 0.0f ? 1.0f : (g[j] < 0.0f ? -1.0f : 0.0f);
            d[j] -= step * s;  // descend: minimize the loss
          }
          project(d, spec.norm, eps);
          clamp_delta_to_valid(x, d);
          if (spec.norm == NormKind::linf && linf_norm(d) > eps + 1e-6)
            throw StateError("em_poison: budget violated after projection");
        });
      }
    }

  }
  pset.fit_accuracy = fit_accuracy(surrogate, ds, pset.deltas);
  pset.converged = false;  // best-so-far at the round cap
  return pset;
}

}  // namespace

PerturbationSet em_poison(const LabeledDataset& ds, const PoisonSpec& spec) {
  if (spec.kind != PoisonKind::em) throw ConfigError("em_poison: spec.kind must be em");
  return em_poison_impl(ds, spec, AdaptiveAugs{});
}

PerturbationSet adaptive_em_poison(const LabeledDataset& ds, const PoisonSpec& spec) {
  if (spec.kind != PoisonKind::adaptive_em)
    throw ConfigError("adaptive_em_poison: spec.kind must be adaptive_em");
  PerturbationSet pset = em_poison_impl(ds, spec, spec.adaptive);
  pset.kind = PoisonKind::adaptive_em;
  return pset;
}

PerturbationSet lsp_poison(const LabeledDataset& ds, const PoisonSpec& spec) {
  if (spec.kind != PoisonKind::lsp) throw ConfigError("lsp_poison: spec.kind must be lsp");
  spec.validate();
  ds.validate();
  const int h = ds.height(), w = ds.width();
  const int side = std::max(h / 8, 2);

  PerturbationSet pset;
  pset.kind = PoisonKind::lsp;
  pset.norm = NormKind::l2;
  pset.epsilon = spec.epsilon;
  pset.granularity = Granularity::class_wise;
  pset.seed = spec.seed;
  pset.converged = true;

  for (int cls = 0; cls < ds.num_classes; ++cls) {
    RngStream rng = derive_stream(spec.seed, "poison.lsp", static_cast<std::uint64_t>(cls));
    Tensor d({3, h, w});
    for (int c = 0; c < 3; ++c)
      for (int by = 0; by < h; by += side)
        for (int bx = 0; bx < w; bx += side) {
          const float v = static_cast<float>(rng.normal());
          for (int y = by; y < std::min(by + side, h); ++y)
            for (int x = bx; x < std::min(bx + side, w); ++x) d.at(c, y, x) = v;
        }
    const double norm = l2_norm(d);
    const float s = static_cast<float>(static_cast<double>(spec.epsilon) / norm);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= s;
    pset.deltas.push_back(std::move(d));
  }
  return pset;
}

LabeledDataset apply_poison(const LabeledDataset& ds, const PerturbationSet& pset,
                            double fraction, std::optional<int> targeted_class,
                            std::uint64_t seed) {
  ds.validate();
  if (fraction < 0.0 || fraction > 1.0) throw InputError("apply_poison: fraction not in [0,1]");
  if (targeted_class && (*targeted_class < 0 || *targeted_class >= ds.num_classes))
    throw InputError("apply_poison: targeted class out of range");
  if (pset.granularity == Granularity::sample_wise && pset.deltas.size() != ds.size())
    throw InputError("apply_poison: sample-wise delta count != dataset size");
  if (pset.granularity == Granularity::class_wise &&
      pset.deltas.size() != static_cast<std::size_t>(ds.num_classes))
    throw InputError("apply_poison: class-wise delta count != class count");

  std::vector<char> affected(ds.size(), 0);
  if (targeted_class) {
    for (std::size_t i = 0; i < ds.size(); ++i)
      affected[i] = ds.labels[i] == *targeted_class ? 1 : 0;
  } else {
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream rng = derive_stream(seed, "poison.apply.subset");
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.bounded(i)]);
    const std::size_t count = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(ds.size())));
    for (std::size_t i = 0; i < count && i < order.size(); ++i) affected[order[i]] = 1;
  }

  LabeledDataset out;
  out.num_classes = ds.num_classes;
  out.tag = DatasetTag::poisoned;
  out.labels = ds.labels;
  out.images.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor img = ds.images[i];
    if (affected[i]) {
      const Tensor& d = pset.granularity == Granularity::sample_wise
                            ? pset.deltas[i]
                            : pset.deltas[static_cast<std::size_t>(ds.labels[i])];
      check_same_shape(img, d, "apply_poison");
      for (std::size_t j = 0; j < img.size(); ++j)
        img[j] = std::clamp(img[j] + d[j], 0.0f, 1.0f);
    }
    out.images.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PerturbationSet io

namespace {
constexpr char kPsetMagic[4] = {'U', 'E', 'P', 'S'};
constexpr std::uint32_t kPsetVersion = 1;
}  // namespace

void PerturbationSet::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open perturbation file for writing: " + path.string());
  os.write(kPsetMagic, 4);
  auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  w32(kPsetVersion);
  const std::uint8_t hdr[4] = {static_cast<std::uint8_t>(kind), static_cast<std::uint8_t>(norm),
                               static_cast<std::uint8_t>(granularity),
                               static_cast<std::uint8_t>(converged ? 1 : 0)};
  os.write(reinterpret_cast<const char*>(hdr), 4);
  os.write(reinterpret_cast<const char*>(&epsilon), 4);
  os.write(reinterpret_cast<const char*>(&seed), 8);
  w32(static_cast<std::uint32_t>(deltas.size()));
  const int h = deltas.empty() ? 0 : deltas.front().dim(1);
  const int w = deltas.empty() ? 0 : deltas.front().dim(2);
  w32(static_cast<std::uint32_t>(h));
  w32(static_cast<std::uint32_t>(w));
  for (const Tensor& d : deltas)
    os.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * 4));
  if (!os) throw FormatError("perturbation write failed: " + path.string());
}

PerturbationSet PerturbationSet::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open perturbation file: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kPsetMagic, 4) != 0)
    throw FormatError("perturbation file: bad magic in " + path.string());
  auto r32 = [&]() {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  if (r32() != kPsetVersion) throw FormatError("perturbation file: unsupported version");

  PerturbationSet p;
  std::uint8_t hdr[4];
  is.read(reinterpret_cast<char*>(hdr), 4);
  p.kind = static_cast<PoisonKind>(hdr[0]);
  p.norm = static_cast<NormKind>(hdr[1]);
  p.granularity = static_cast<Granularity>(hdr[2]);
  p.converged = hdr[3] != 0;
  is.read(reinterpret_cast<char*>(&p.epsilon), 4);
  is.read(reinterpret_cast<char*>(&p.seed), 8);
  const std::uint32_t count = r32();
  const int h = static_cast<int>(r32());
  const int w = static_cast<int>(r32());
  if (!is || h < 1 || w < 1) throw FormatError("perturbation file: bad header");
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor d({3, h, w});
    is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 4));
    if (!is) throw FormatError("perturbation file: truncated data");
    p.deltas.push_back(std::move(d));
  }
  return p;
}

}  // namespace ueraser
