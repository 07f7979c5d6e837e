// Adam over trainable parameters only, warmup + inverse-sqrt learning-rate
// schedule, and cycle-level gradient accumulation.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "graftmt/model.hpp"

namespace graftmt {

struct Schedule {
  std::size_t warmup_steps = 100;
  double max_lr = 1e-3;

  // Frozen-BART, mBART and multilingual fine-tuning settings.
  static Schedule frozen_bart() { return {5000, 7e-4}; }
  static Schedule mbart() { return {2500, 3e-5}; }
  static Schedule multilingual() { return {4000, 1e-4}; }

  // Linear warmup to max_lr, then max_lr * sqrt(warmup / step).
  [[nodiscard]] double lr(std::size_t step) const {
    if (warmup_steps == 0) return max_lr;
    if (step <= warmup_steps) return max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    return max_lr * std::sqrt(static_cast<double>(warmup_steps) / static_cast<double>(step));
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Schedule, warmup_steps, max_lr)

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
  Schedule schedule;
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  [[nodiscard]] const AdamOptions& options() const { return options_; }
  [[nodiscard]] std::size_t step_count() const { return step_; }
  [[nodiscard]] double current_lr() const { return options_.schedule.lr(step_); }

  // Moment buffers, present only for tensors that have been trainable at a step.
  [[nodiscard]] const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
  [[nodiscard]] const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }
  [[nodiscard]] std::size_t state_scalars() const {
    std::size_t n = 0;
    for (const auto& [k, b] : m_) n += b.size();
    for (const auto& [k, b] : v_) n += b.size();
    return n;
  }

  // One bias-corrected update of every trainable tensor, then zeroes grads.
  void step(ParamTree<T>& params) {
    for (auto& [path, t] : params) {
      if (t.requires_grad() && !t.has_grad()) {
        throw StateError("adam: trainable parameter '" + path + "' has no gradient; run backward first");
      }
    }
    ++step_;
    const double lr = options_.schedule.lr(step_);
    double clip = 1.0;
    if (options_.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (auto& [path, t] : params)
        if (t.requires_grad())
          for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > options_.max_grad_norm) clip = options_.max_grad_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (auto& [path, t] : params) {
      if (!t.requires_grad()) continue;
      auto& m = m_[path];
      auto& v = v_[path];
      if (m.empty()) {
        m.assign(t.numel(), T{0});
        v.assign(t.numel(), T{0});
      }
      auto w = t.data();
      auto g = t.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * clip;
        const double mi = options_.beta1 * static_cast<double>(m[i]) + (1.0 - options_.beta1) * gi;
        const double vi = options_.beta2 * static_cast<double>(v[i]) + (1.0 - options_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + options_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
      std::fill(g.begin(), g.end(), T{0});
    }
  }

  // Restores state saved alongside a checkpoint.
  void restore(std::size_t step, std::map<std::string, std::vector<T>> m, std::map<std::string, std::vector<T>> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamOptions options_;
  std::size_t step_ = 0;
  std::map<std::string, std::vector<T>> m_;
  std::map<std::string, std::vector<T>> v_;
};

struct CycleResult {
  std::vector<double> batch_losses;  // per-token loss of each batch, in order
  std::size_t forward_backward_passes = 0;
  std::size_t updates = 0;
  std::size_t tokens = 0;
};

struct CycleOptions {
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;  // dropout stream of the first batch; batch i uses stream + i
  std::function<void(std::size_t)> after_backward;  // observer hook, called after each batch
};

// Sums gradients over every batch, normalised by the total target-token count
// of the cycle, then applies exactly one optimizer step.
template <typename T>
CycleResult accumulate_cycle(Adam<T>& optimizer, Seq2SeqModel<T>& model, const std::vector<PairBatch>& batches,
                             const CycleOptions& options = {}) {
  if (batches.empty()) throw ContractError("accumulate_cycle: no batches");
  CycleResult result;
  for (const auto& b : batches) {
    if (b.src.batch == 0 || b.target_tokens == 0) throw ContractError("accumulate_cycle: empty batch in cycle");
    result.tokens += b.target_tokens;
  }
  model.params().zero_grad();
  const double norm = static_cast<double>(result.tokens);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Tape<T> tape(model.tape_options(options.seed, options.stream + i));
    auto loss = model.loss(tape, batches[i], options.label_smoothing, norm);
    tape.backward(loss);
    result.batch_losses.push_back(static_cast<double>(loss.item()) * norm /
                                  static_cast<double>(batches[i].target_tokens));
    ++result.forward_backward_passes;
    if (options.after_backward) options.after_backward(i);
  }
  optimizer.step(model.params());
  ++result.updates;
  return result;
}

}  // namespace graftmt
