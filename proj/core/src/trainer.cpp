#include "ueraser/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include "ueraser/error.hpp"
#include "ueraser/parallel.hpp"
#include "ueraser/rng.hpp"

namespace ueraser {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::lite: return "lite";
    case Variant::ueraser: return "ueraser";
    case Variant::max: return "max";
    case Variant::at: return "at";
  }
  return "unknown";
}

Variant variant_from_name(const std::string& name) {
  if (name == "plain") return Variant::plain;
  if (name == "lite") return Variant::lite;
  if (name == "ueraser") return Variant::ueraser;
  if (name == "max") return Variant::max;
  if (name == "at") return Variant::at;
  throw ConfigError("unknown variant '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (repeats < 1) throw ConfigError("config: K must be >= 1");
  if (warmup < 0 || warmup > epochs) throw ConfigError("config: W must be in [0, E]");
  if (batch_size < 1) throw ConfigError("config: batch size must be >= 1");
  if (!(lr > 0.0f)) throw ConfigError("config: learning rate must be positive");
  if (variant == Variant::lite && repeats != 1) throw ConfigError("Lite requires K=1");
  if (variant == Variant::max && warmup != epochs) throw ConfigError("Max requires W=E");
  if (variant == Variant::at) {
    if (!(at_epsilon > 0.0f)) throw ConfigError("config: adversarial epsilon must be positive");
    if (at_steps < 0) throw ConfigError("config: adversarial steps must be >= 0");
  }
}

// ---------------------------------------------------------------------------
// max_loss_select

SelectResult max_loss_select(const ModelParams& params, const Tensor& images,
                             const std::vector<int>& labels, int k, std::uint64_t seed,
                             int epoch, const std::vector<std::size_t>& image_indices,
                             bool full_pipeline) {
  if (k < 1) throw ConfigError("max_loss_select: K must be >= 1");
  const int bsz = images.dim(0);
  const int h = images.dim(2), w = images.dim(3);
  const std::size_t stride = 3u * h * w;

  Tensor aug({bsz * k, 3, h, w});
  std::vector<PolicySample> all_samples(static_cast<std::size_t>(bsz) * k);

  parallel_for(static_cast<std::size_t>(bsz) * k, [&](std::size_t t) {
    const std::size_t i = t / static_cast<std::size_t>(k);
    const int j = static_cast<int>(t % static_cast<std::size_t>(k));
    RngStream rng = policy_stream(seed, epoch, image_indices[i], j);
    const PolicySample sample =
        full_pipeline ? sample_policy(rng) : sample_standard_policy(rng);
    Tensor img({3, h, w});
    std::memcpy(img.data(), images.data() + i * stride, stride * sizeof(float));
    const Tensor out = apply(sample, img);
    std::memcpy(aug.data() + t * stride, out.data(), stride * sizeof(float));
    all_samples[t] = sample;
  });

  std::vector<int> rep_labels(static_cast<std::size_t>(bsz) * k);
  for (int i = 0; i < bsz; ++i)
    for (int j = 0; j < k; ++j) rep_labels[static_cast<std::size_t>(i) * k + j] = labels[i];

  const Tensor logits = forward(params, aug);
  const Tensor losses = cross_entropy(logits, rep_labels);

  SelectResult res;
  res.images = Tensor({bsz, 3, h, w});
  res.samples.resize(static_cast<std::size_t>(bsz));
  res.winner_index.resize(static_cast<std::size_t>(bsz));
  res.selected_losses.resize(static_cast<std::size_t>(bsz));
  res.first_losses.resize(static_cast<std::size_t>(bsz));
  res.all_losses.assign(static_cast<std::size_t>(bsz), std::vector<float>(k));

  for (int i = 0; i < bsz; ++i) {
    int best = 0;
    float best_loss = losses[static_cast<std::size_t>(i) * k];
    for (int j = 0; j < k; ++j) {
      const float lj = losses[static_cast<std::size_t>(i) * k + j];
      res.all_losses[i][j] = lj;
      if (lj > best_loss) {  // strict: ties resolve to the lowest j
        best_loss = lj;
        best = j;
      }
    }
    res.winner_index[i] = best;
    res.selected_losses[i] = best_loss;
    res.first_losses[i] = res.all_losses[i][0];
    res.samples[i] = all_samples[static_cast<std::size_t>(i) * k + best];
    std::memcpy(res.images.data() + static_cast<std::size_t>(i) * stride,
                aug.data() + (static_cast<std::size_t>(i) * k + best) * stride,
                stride * sizeof(float));
  }
  return res;
}

// ---------------------------------------------------------------------------
// training loops

namespace {

struct EpochStats {
  double loss_sum = 0.0;
  double selected_sum = 0.0;
  double first_sum = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

void clip_gradients(Gradients& grads, float max_norm) {
  if (max_norm <= 0.0f) return;
  const double n = grads.param_norm();
  if (n > static_cast<double>(max_norm))
    grads.scale(static_cast<float>(static_cast<double>(max_norm) / n));
}

void accumulate_train_stats(EpochStats& stats, const Tensor& logits, const Tensor& losses,
                            const std::vector<int>& labels) {
  const int bsz = logits.dim(0), ncls = logits.dim(1);
  for (int i = 0; i < bsz; ++i) {
    int arg = 0;
    for (int c = 1; c < ncls; ++c)
      if (logits.at(i, c) > logits.at(i, arg)) arg = c;
    if (arg == labels[i]) ++stats.correct;
    stats.loss_sum += losses[static_cast<std::size_t>(i)];
    ++stats.count;
  }
}

using BatchFn = std::function<void(const Minibatch&, int epoch, int batch_index, EpochStats&)>;

TrainResult run_epochs(const TrainConfig& config, const LabeledDataset& train_ds,
                       const LabeledDataset& test_ds, ModelParams& params,
                       const BatchFn& train_batch, const MetricsSink& on_metrics,
                       const CheckpointSink& on_checkpoint, int start_epoch) {
  TrainResult result;
  result.best_test_accuracy = -1.0;

  for (int epoch = start_epoch + 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochStats stats;

    const std::vector<Minibatch> batches =
        minibatches(train_ds, config.batch_size, epoch, config.seed);
    for (std::size_t bi = 0; bi < batches.size(); ++bi)
      train_batch(batches[bi], epoch, static_cast<int>(bi), stats);

    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    MetricsRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = "train";
    train_rec.accuracy = stats.count ? static_cast<double>(stats.correct) / stats.count : 0.0;
    train_rec.mean_loss = stats.count ? stats.loss_sum / stats.count : 0.0;
    train_rec.wall_ms = wall_ms;
    train_rec.selected_loss_mean = stats.count ? stats.selected_sum / stats.count : 0.0;
    train_rec.preselect_loss_mean = stats.count ? stats.first_sum / stats.count : 0.0;
    result.metrics.push_back(train_rec);
    if (on_metrics) on_metrics(train_rec);

    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      const auto e0 = std::chrono::steady_clock::now();
      const Evaluation ev = evaluate(params, test_ds);
      MetricsRecord test_rec;
      test_rec.epoch = epoch;
      test_rec.split = "test";
      test_rec.accuracy = ev.accuracy;
      test_rec.mean_loss = ev.mean_loss;
      test_rec.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - e0)
              .count();
      result.metrics.push_back(test_rec);
      if (on_metrics) on_metrics(test_rec);

      result.final_test_accuracy = ev.accuracy;
      if (ev.accuracy > result.best_test_accuracy) {
        result.best_test_accuracy = ev.accuracy;
        result.best_epoch = epoch;
      }
    }
    if (on_checkpoint) on_checkpoint(params, epoch);
  }

  result.params = params;
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const LabeledDataset& train_ds,
                  const LabeledDataset& test_ds, const MetricsSink& on_metrics,
                  const CheckpointSink& on_checkpoint, const ModelParams* resume_params,
                  int start_epoch) {
  config.validate();
  if (config.variant == Variant::at)
    return adversarial_train(config, train_ds, test_ds, on_metrics, on_checkpoint, resume_params,
                             start_epoch);
  train_ds.validate();

  ModelParams params = resume_params
                           ? *resume_params
                           : ModelParams::init(train_ds.height(), train_ds.width(),
                                               train_ds.num_classes,
                                               derive_key(config.seed, "trainer.init"));

  const bool full_pipeline = config.variant != Variant::plain;

  auto batch_fn = [&, full_pipeline](const Minibatch& mb, int epoch, int batch_index,
                                     EpochStats& stats) {
    // Epochs 1..W select the max-loss policy out of K; afterwards K=1.
    const bool maximizing = (config.variant == Variant::ueraser || config.variant == Variant::max)
                                ? epoch <= config.warmup
                                : false;
    const int k_eff = maximizing ? config.repeats : 1;

    ModelParams& p = params;
    SelectResult sel;
    GradTape tape;
    Tensor logits;
    Tensor losses;
    try {
      sel = max_loss_select(p, mb.images, mb.labels, k_eff, config.seed, epoch, mb.indices,
                            full_pipeline);
      logits = forward(p, sel.images, &tape);
      losses = cross_entropy(logits, mb.labels);
      for (std::size_t i = 0; i < losses.size(); ++i)
        if (!std::isfinite(losses[i])) throw DivergenceError("non-finite loss");
      Gradients grads = backward(p, tape, mb.labels);
      clip_gradients(grads, config.grad_clip);
      sgd_step(p, grads, config.lr, config.momentum, config.weight_decay);
    } catch (const DivergenceError& e) {
      throw DivergenceError("epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch_index) + ": " + e.what());
    }

    accumulate_train_stats(stats, logits, losses, mb.labels);
    for (std::size_t i = 0; i < sel.selected_losses.size(); ++i) {
      stats.selected_sum += sel.selected_losses[i];
      stats.first_sum += sel.first_losses[i];
    }
  };

  return run_epochs(config, train_ds, test_ds, params, batch_fn, on_metrics,
                    on_checkpoint, start_epoch);
}

TrainResult adversarial_train(const TrainConfig& config, const LabeledDataset& train_ds,
                              const LabeledDataset& test_ds, const MetricsSink& on_metrics,
                              const CheckpointSink& on_checkpoint,
                              const ModelParams* resume_params, int start_epoch) {
  config.validate();
  train_ds.validate();

  ModelParams params = resume_params
                           ? *resume_params
                           : ModelParams::init(train_ds.height(), train_ds.width(),
                                               train_ds.num_classes,
                                               derive_key(config.seed, "trainer.init"));

  const float eps = config.at_epsilon;
  const int steps = config.at_steps;
  const float step_size = steps > 0 ? 2.5f * eps / static_cast<float>(steps) : 0.0f;

  auto batch_fn = [&](const Minibatch& mb, int epoch, int batch_index, EpochStats& stats) {
    ModelParams& p = params;
    GradTape tape;
    Tensor batch;
    Tensor logits;
    Tensor losses;
    try {
      // standard crop/flip first, as in plain training
      SelectResult sel =
          max_loss_select(p, mb.images, mb.labels, 1, config.seed, epoch, mb.indices, false);

      batch = sel.images;
      const int bsz = batch.dim(0);
      const std::size_t stride = batch.size() / static_cast<std::size_t>(bsz);

      if (steps > 0) {
        Tensor delta(batch.shape());
        parallel_for(static_cast<std::size_t>(bsz), [&](std::size_t i) {
          RngStream rng = derive_stream(config.seed, "trainer.pgd",
                                        static_cast<std::uint64_t>(epoch), mb.indices[i]);
          float* d = delta.data() + i * stride;
          const float* x = batch.data() + i * stride;
          for (std::size_t j = 0; j < stride; ++j) {
            d[j] = static_cast<float>(rng.uniform(-eps, eps));
            d[j] = std::clamp(x[j] + d[j], 0.0f, 1.0f) - x[j];
          }
        });

        for (int s = 0; s < steps; ++s) {
          Tensor adv(batch.shape());
          for (std::size_t j = 0; j < adv.size(); ++j) adv[j] = batch[j] + delta[j];
          GradTape step_tape;
          forward(p, adv, &step_tape);
          const Tensor g = backward_input(p, step_tape, mb.labels);
          for (std::size_t j = 0; j < delta.size(); ++j) {
            float d = delta[j] + step_size * (g[j] > 0.0f ? 1.0f : (g[j] < 0.0f ? -1.0f : 0.0f));
            d = std::clamp(d, -eps, eps);
            delta[j] = std::clamp(batch[j] + d, 0.0f, 1.0f) - batch[j];
          }
        }
        for (std::size_t j = 0; j < batch.size(); ++j)
          batch[j] = std::clamp(batch[j] + delta[j], 0.0f, 1.0f);
      }

      logits = forward(p, batch, &tape);
      losses = cross_entropy(logits, mb.labels);
      for (std::size_t i = 0; i < losses.size(); ++i)
        if (!std::isfinite(losses[i])) throw DivergenceError("non-finite loss");
      Gradients grads = backward(p, tape, mb.labels);
      clip_gradients(grads, config.grad_clip);
      sgd_step(p, grads, config.lr, config.momentum, config.weight_decay);
    } catch (const DivergenceError& e) {
      throw DivergenceError("epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch_index) + ": " + e.what());
    }

    accumulate_train_stats(stats, logits, losses, mb.labels);
    for (std::size_t i = 0; i < losses.size(); ++i) {
      stats.selected_sum += losses[i];
      stats.first_sum += losses[i];
    }
  };

  return run_epochs(config, train_ds, test_ds, params, batch_fn, on_metrics,
                    on_checkpoint, start_epoch);
}

Evaluation evaluate(const ModelParams& params, const LabeledDataset& ds) {
  Evaluation ev;
  ev.confusion.assign(static_cast<std::size_t>(params.num_classes),
                      std::vector<int>(static_cast<std::size_t>(params.num_classes), 0));
  if (ds.size() == 0) return ev;

  const int h = ds.height(), w = ds.width();
  const std::size_t stride = 3u * h * w;
  const std::size_t chunk = 256;
  std::size_t correct = 0;
  double loss_sum = 0.0;

  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t count = std::min(chunk, ds.size() - start);
    Tensor batch({static_cast<int>(count), 3, h, w});
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::memcpy(batch.data() + i * stride, ds.images[start + i].data(),
                  stride * sizeof(float));
      labels[i] = ds.labels[start + i];
    }
    const Tensor logits = forward(params, batch);
    const Tensor losses = cross_entropy(logits, labels);
    for (std::size_t i = 0; i < count; ++i) {
      int arg = 0;
      for (int c = 1; c < params.num_classes; ++c)
        if (logits.at(static_cast<int>(i), c) > logits.at(static_cast<int>(i), arg)) arg = c;
      ++ev.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(arg)];
      if (arg == labels[i]) ++correct;
      loss_sum += losses[i];
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  ev.mean_loss = loss_sum / static_cast<double>(ds.size());
  return ev;
}

}  // namespace ueraser
