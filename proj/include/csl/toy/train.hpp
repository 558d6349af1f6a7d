#pragma once

#include "csl/toy/model.hpp"
#include "csl/toy/task.hpp"

#include <chrono>
#include <cstdio>

namespace csl::toy {

struct TrainConfig {
  int steps = 4000;
  int batch = 16;
  int num_demos = 8;
  double lr = 3e-3;
  int warmup = 200;
  double min_lr_frac = 0.05;
  double weight_decay = 0.0;
  double clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
  std::uint64_t seed = 0;
  int eval_contexts = 5;
  int log_every = 0;  // 0 disables progress output on stderr
};

inline json to_json(const TrainConfig& c) {
  return {{"steps", c.steps}, {"batch", c.batch}, {"num_demos", c.num_demos},     {"lr", c.lr},
          {"warmup", c.warmup}, {"min_lr_frac", c.min_lr_frac}, {"weight_decay", c.weight_decay},
          {"clip", c.clip}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"seed", c.seed},
          {"eval_contexts", c.eval_contexts}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.num_demos = j.value("num_demos", c.num_demos);
  c.lr = j.value("lr", c.lr);
  c.warmup = j.value("warmup", c.warmup);
  c.min_lr_frac = j.value("min_lr_frac", c.min_lr_frac);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip = j.value("clip", c.clip);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.seed = j.value("seed", c.seed);
  c.eval_contexts = j.value("eval_contexts", c.eval_contexts);
  return c;
}

/// Linear warmup then cosine decay to min_lr_frac * lr.
inline double learning_rate(const TrainConfig& c, int step) {
  if (step < c.warmup) return c.lr * double(step + 1) / double(c.warmup);
  const double progress = double(step - c.warmup) / double(std::max(1, c.steps - c.warmup));
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
  return c.lr * (c.min_lr_frac + (1.0 - c.min_lr_frac) * cosine);
}

/// Token sequence with the query answer appended, plus next-token targets: each
/// delimiter predicts the following label and each label predicts the newline.
inline std::pair<std::vector<int>, std::vector<int>> training_sequence(const TaskWorld& world, const Prompt& p) {
  std::vector<int> toks = p.tokens;
  toks.push_back(p.target);
  toks.push_back(kNewlineToken);
  std::vector<int> targets(toks.size(), -1);
  for (std::size_t t = 0; t + 1 < toks.size(); ++t) {
    if (toks[t] == kDelimiterToken) targets[t] = toks[t + 1];
    if (world.is_label_token(toks[t]) && toks[t + 1] == kNewlineToken) targets[t] = kNewlineToken;
  }
  toks.pop_back();
  targets.pop_back();
  return {toks, targets};
}

/// Greedy continuation until the newline token or `max_new` tokens.
template <typename S>
std::vector<int> greedy_decode(const Model<S>& model, std::vector<int> tokens, int max_new = 4) {
  std::vector<int> out;
  for (int i = 0; i < max_new && static_cast<int>(tokens.size()) < model.config().context_len; ++i) {
    const auto res = model.forward(tokens);
    Eigen::Index arg;
    res.logits.maxCoeff(&arg);
    const int tok = static_cast<int>(arg);
    out.push_back(tok);
    if (tok == kNewlineToken) break;
    tokens.push_back(tok);
  }
  return out;
}

struct ExactMatchItem {
  std::vector<int> prompt;
  int gold = 0;
  std::vector<int> synonyms;
};

struct ExactMatchRecord {
  std::vector<int> generation;  // truncated at the first newline
  bool correct = false;
};

struct ExactMatchReport {
  double accuracy = 0;
  std::vector<ExactMatchRecord> items;
};

/// Scores generations by truncating at the first newline and requiring the
/// remainder to be exactly the gold label or one listed synonym. `generate`
/// maps a prompt to the tokens it produces.
template <typename Generate>
ExactMatchReport evaluate_exact_match(std::span<const ExactMatchItem> items, Generate&& generate) {
  ExactMatchReport rep;
  int correct = 0;
  for (const auto& it : items) {
    ExactMatchRecord rec;
    std::vector<int> gen = generate(it.prompt);
    auto nl = std::find(gen.begin(), gen.end(), kNewlineToken);
    rec.generation.assign(gen.begin(), nl);
    auto matches = [&](int tok) { return rec.generation.size() == 1 && rec.generation[0] == tok; };
    rec.correct = matches(it.gold) || std::any_of(it.synonyms.begin(), it.synonyms.end(), matches);
    correct += rec.correct ? 1 : 0;
    rep.items.push_back(std::move(rec));
  }
  rep.accuracy = items.empty() ? 0.0 : double(correct) / double(items.size());
  return rep;
}

template <typename S>
ExactMatchReport evaluate_exact_match(const Model<S>& model, std::span<const ExactMatchItem> items) {
  return evaluate_exact_match(items, [&](const std::vector<int>& p) { return greedy_decode(model, p); });
}

inline std::vector<ExactMatchItem> exact_match_items(const TaskRun& run) {
  std::vector<ExactMatchItem> items;
  for (const auto& p : run.prompts) items.push_back({p.tokens, p.target, {}});
  return items;
}

/// Held-out accuracy over `contexts` evaluation contexts (seeds disjoint from
/// the training stream) with N demonstrations each.
template <typename S>
double heldout_accuracy(const Model<S>& model, const TaskWorld& world, int num_demos, int contexts,
                        std::uint64_t seed) {
  double total = 0;
  int count = 0;
  for (int c = 0; c < contexts; ++c) {
    const auto run = generate_task(world, derive_seed(seed, 0xe7a1ULL + std::uint64_t(c)), num_demos);
    const auto items = exact_match_items(run);
    const auto rep = evaluate_exact_match(model, std::span<const ExactMatchItem>(items));
    total += rep.accuracy * double(items.size());
    count += static_cast<int>(items.size());
  }
  return count ? total / count : 0.0;
}

struct TrainReport {
  int steps = 0;
  double final_loss = 0;
  double final_train_accuracy = 0;
  double heldout_accuracy = 0;
  std::vector<double> loss_curve;  // mean loss per logged window
  double seconds = 0;
};

inline json to_json(const TrainReport& r) {
  return {{"steps", r.steps},
          {"final_loss", r.final_loss},
          {"final_train_accuracy", r.final_train_accuracy},
          {"heldout_accuracy", r.heldout_accuracy},
          {"loss_curve", r.loss_curve}};
}

/// Adam on the label-position cross-entropy. Deterministic for a fixed seed:
/// sequences are generated from one stream and gradients are accumulated in
/// batch order on a single thread.
inline std::pair<Model<float>, TrainReport> train(const ModelConfig& mcfg, const TaskWorld& world,
                                                  const TrainConfig& tcfg) {
  require(world.config().vocab_needed() <= mcfg.vocab, "model vocabulary too small for the task");
  require(tcfg.steps >= 0 && tcfg.batch >= 1, "invalid training schedule");
  const auto start = std::chrono::steady_clock::now();
  Model<float> model = Model<float>::initialized(mcfg);
  const std::size_t np = model.params().size();
  std::vector<float> grad(np), m1(np, 0.f), m2(np, 0.f);
  Rng rng = make_rng(tcfg.seed, 0x7ea1ULL);
  TrainReport rep;
  double window_loss = 0, window_correct = 0, window_count = 0;
  const int window = 100;

  for (int step = 0; step < tcfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.f);
    std::vector<std::pair<std::vector<int>, std::vector<int>>> batch;
    int n_targets = 0;
    for (int b = 0; b < tcfg.batch; ++b) {
      batch.push_back(training_sequence(world, world.sample_training_prompt(tcfg.num_demos, rng)));
      for (int t : batch.back().second) n_targets += t >= 0 ? 1 : 0;
    }
    double loss = 0;
    int correct = 0;
    const float weight = 1.0f / float(n_targets);
    for (const auto& [toks, targets] : batch) {
      auto [l, c] = model.loss_and_grad(toks, targets, weight, grad);
      loss += l;
      correct += c;
    }
    loss /= n_targets;
    if (!std::isfinite(loss)) {
      fail_compute("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                   ", lr " + std::to_string(learning_rate(tcfg, step)) + ")");
    }
    double gnorm = 0;
    for (float g : grad) gnorm += double(g) * g;
    gnorm = std::sqrt(gnorm);
    const double clip_scale = (tcfg.clip > 0 && gnorm > tcfg.clip) ? tcfg.clip / gnorm : 1.0;
    const double lr = learning_rate(tcfg, step);
    const double bc1 = 1.0 - std::pow(tcfg.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(tcfg.beta2, step + 1);
    auto& p = model.params();
    for (std::size_t i = 0; i < np; ++i) {
      const float g = static_cast<float>(grad[i] * clip_scale);
      m1[i] = static_cast<float>(tcfg.beta1 * m1[i] + (1 - tcfg.beta1) * g);
      m2[i] = static_cast<float>(tcfg.beta2 * m2[i] + (1 - tcfg.beta2) * double(g) * g);
      const double upd = (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + 1e-8) + tcfg.weight_decay * p[i];
      p[i] = static_cast<float>(p[i] - lr * upd);
    }
    window_loss += loss;
    window_correct += double(correct) / n_targets;
    window_count += 1;
    if ((step + 1) % window == 0 || step + 1 == tcfg.steps) {
      rep.loss_curve.push_back(window_loss / window_count);
      rep.final_loss = window_loss / window_count;
      rep.final_train_accuracy = window_correct / window_count;
      if (tcfg.log_every > 0 && ((step + 1) % tcfg.log_every == 0))
        std::fprintf(stderr, "step %d loss %.4f acc %.3f lr %.2e\n", step + 1, rep.final_loss,
                     rep.final_train_accuracy, lr);
      window_loss = window_correct = window_count = 0;
    }
  }
  rep.steps = tcfg.steps;
  rep.heldout_accuracy = heldout_accuracy(model, world, tcfg.num_demos, tcfg.eval_contexts, tcfg.seed);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), rep};
}

}  // namespace csl::toy
