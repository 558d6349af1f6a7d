#include "csl/toy/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace csl;
using namespace csl::toy;

namespace {

TaskWorld small_world(std::uint64_t seed = 3) {
  TaskConfig c;
  c.num_concepts = 12;
  c.seed = seed;
  return TaskWorld(c);
}

ModelConfig small_model(const TaskWorld& w, int layers = 2) {
  ModelConfig m;
  m.vocab = w.config().vocab_needed();
  m.dim = 16;
  m.layers = layers;
  m.heads = 2;
  m.mlp_mult = 2;
  m.context_len = 64;
  m.seed = 5;
  return m;
}

}  // namespace

// --- task -------------------------------------------------------------------

TEST(Task, SpansCoverTheRenderedPrompt) {
  const auto w = small_world();
  const auto run = generate_task(w, 7, 2);
  ASSERT_FALSE(run.prompts.empty());
  for (const auto& p : run.prompts) {
    EXPECT_NO_THROW(validate_spans(p.spans));
    EXPECT_EQ(p.spans.prompt_length, int(p.tokens.size()));
    EXPECT_EQ(p.tokens.back(), kDelimiterToken);
    EXPECT_EQ(p.spans[SpanClass::FinalDelimiter], (std::vector<TokenRange>{{p.last_position(), p.last_position() + 1}}));
    EXPECT_EQ(p.spans[SpanClass::DemoLabels].size(), 2u);
    for (const auto& r : p.spans[SpanClass::DemoLabels]) EXPECT_TRUE(w.is_label_token(p.tokens[std::size_t(r.begin)]));
    EXPECT_EQ(p.target, w.label_token(p.query_concept, run.language));
  }
}

TEST(Task, QueriesAreDisjointFromThePoolAndRowsAlignAcrossRuns) {
  const auto w = small_world();
  const auto pool = w.demo_pool();
  const auto a = generate_task(w, 1, 2), b = generate_task(w, 2, 2);
  EXPECT_EQ(a.concept_ids(), b.concept_ids());
  for (const auto& p : a.prompts) EXPECT_FALSE(std::binary_search(pool.begin(), pool.end(), p.query_concept));
  for (const auto& d : a.demos) EXPECT_TRUE(std::binary_search(pool.begin(), pool.end(), d.concept_id));
  EXPECT_EQ(int(a.prompts.size()), w.num_concepts() - int(pool.size()));
}

TEST(Task, GenerationIsDeterministic) {
  const auto w = small_world();
  const auto a = generate_task(w, 9, 3), b = generate_task(w, 9, 3);
  for (std::size_t i = 0; i < a.prompts.size(); ++i) EXPECT_EQ(a.prompts[i].tokens, b.prompts[i].tokens);
}

TEST(Task, LanguagesDisagreeOnEveryLabel) {
  const auto w = small_world();
  for (int c = 0; c < w.num_concepts(); ++c) EXPECT_NE(w.label_token(c, 0), w.label_token(c, 1));
}

TEST(Task, TooFewConceptsIsAnError) {
  const auto w = small_world();
  try {
    generate_task(w, 1, 2, 50);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("too few concepts"), std::string::npos);
  }
  EXPECT_THROW(generate_task(w, 1, 12), ValidationError);
}

TEST(Task, CorruptionChangesOnlyTheTargetedSpanAndKeepsLength) {
  const auto w = small_world();
  const auto run = generate_task(w, 4, 2);
  const auto& p = run.prompts.front();
  for (auto cond : {Corruption::Description, Corruption::Label, Corruption::Query}) {
    const auto c = corrupt_prompt(w, p, cond, 11);
    ASSERT_EQ(c.tokens.size(), p.tokens.size());
    EXPECT_EQ(c.spans, p.spans);
    const SpanClass target = cond == Corruption::Description ? SpanClass::DemoDescriptions
                             : cond == Corruption::Label     ? SpanClass::DemoLabels
                                                             : SpanClass::Query;
    std::set<int> allowed;
    for (const auto& r : p.spans[target])
      for (int t = r.begin; t < r.end; ++t) allowed.insert(t);
    bool changed = false;
    for (int t = 0; t < int(p.tokens.size()); ++t) {
      if (c.tokens[std::size_t(t)] != p.tokens[std::size_t(t)]) {
        EXPECT_TRUE(allowed.count(t)) << to_string(cond) << " touched token " << t;
        changed = true;
      }
    }
    EXPECT_TRUE(changed) << to_string(cond);
  }
  EXPECT_THROW(corrupt_prompt(w, p, Corruption::None, 1), ValidationError);
  EXPECT_THROW(corruption_from_string("bogus"), ValidationError);
}

TEST(Task, ZeroShotPromptCanStillCorruptTheQuery) {
  const auto w = small_world();
  const auto run = generate_task(w, 4, 0);
  EXPECT_NO_THROW(corrupt_prompt(w, run.prompts.front(), Corruption::Query, 2));
  EXPECT_THROW(corrupt_prompt(w, run.prompts.front(), Corruption::Label, 2), ValidationError);
}

// --- model ------------------------------------------------------------------

TEST(Model, CausalMaskMakesEarlierLogitsIgnoreLaterTokens) {
  const auto w = small_world();
  const auto m = Model<double>::initialized(small_model(w));
  const auto p = generate_task(w, 1, 2).prompts.front();
  std::vector<int> alt = p.tokens;
  alt.back() = kNewlineToken;
  alt[alt.size() - 2] = w.keyword_token(0, 0);
  ForwardOptions opt;
  opt.all_logits = true;
  const auto a = m.forward(p.tokens, opt), b = m.forward(alt, opt);
  const Index keep = Index(p.tokens.size()) - 2;
  EXPECT_EQ((a.all_logits.topRows(keep) - b.all_logits.topRows(keep)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT((a.all_logits.bottomRows(1) - b.all_logits.bottomRows(1)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, ResidualStreamIsTheSumOfComponentOutputs) {
  const auto w = small_world();
  const auto m = Model<double>::initialized(small_model(w, 3));
  const auto p = generate_task(w, 1, 2).prompts.front();
  ForwardOptions opt;
  opt.trace = true;
  const auto tr = *m.forward(p.tokens, opt).trace;
  ASSERT_EQ(tr.hidden.size(), 4u);
  for (int l = 1; l <= 3; ++l) {
    ColVec<double> sum = tr.hidden[std::size_t(l - 1)] + tr.mlp[std::size_t(l - 1)];
    for (const auto& a : tr.heads[std::size_t(l - 1)]) sum += a;
    EXPECT_LT((sum - tr.hidden[std::size_t(l)]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Model, NoOpHooksLeaveLogitsBitIdentical) {
  const auto w = small_world();
  const auto m = Model<double>::initialized(small_model(w));
  const auto p = generate_task(w, 1, 2).prompts.front();
  Intervention<double> iv;
  iv.residual = [](int, Eigen::Ref<ColVec<double>>) {};
  iv.head_output = [](int, int, Eigen::Ref<ColVec<double>>) {};
  iv.mlp_output = [](int, Eigen::Ref<ColVec<double>>) {};
  EXPECT_EQ(m.forward(p.tokens).logits, m.forward(p.tokens, {}, &iv).logits);
}

TEST(Model, AttentionRowsAreCausalDistributions) {
  const auto w = small_world();
  const auto m = Model<double>::initialized(small_model(w));
  const auto p = generate_task(w, 1, 2).prompts.front();
  ForwardOptions opt;
  opt.attention = true;
  const auto tr = *m.forward(p.tokens, opt).trace;
  for (const auto& layer : tr.attention)
    for (const auto& row : layer) {
      EXPECT_EQ(row.size(), Index(p.tokens.size()));
      EXPECT_NEAR(row.sum(), 1.0, 1e-12);
      EXPECT_GE(row.minCoeff(), 0.0);
    }
}

TEST(Model, OverlongPromptIsRejected) {
  const auto w = small_world();
  const auto m = Model<double>::initialized(small_model(w));
  std::vector<int> tokens(65, kNewlineToken);
  EXPECT_THROW(m.forward(tokens), ValidationError);
}

TEST(Model, GradientMatchesFiniteDifferences) {
  const auto w = small_world();
  const auto m = Model<double>::initialized(small_model(w));
  Rng rng = make_rng(2, 0);
  const auto [toks, targets] = training_sequence(w, w.sample_training_prompt(2, rng));
  std::vector<double> grad(m.params().size(), 0.0);
  m.loss_and_grad(toks, targets, 1.0, grad);

  const auto& L = m.layout();
  const auto& b = L.blocks.front();
  std::vector<std::size_t> probes = {L.tok_emb + 40, L.pos_emb + 3, b.ln1_g + 1, b.wq + 17, b.wk + 5,  b.wv + 33,
                                     b.wo + 60,      b.ln2_b + 2,   b.w1 + 9,    b.b1 + 4,  b.w2 + 21, L.blocks.back().b2,
                                     L.unembed + 7,  L.unembed_b + kDelimiterToken};
  for (std::size_t i : probes) {
    Model<double> plus = m, minus = m;
    const double eps = 1e-5;
    plus.params()[i] += eps;
    minus.params()[i] -= eps;
    std::vector<double> scratch(m.params().size());
    const double lp = plus.loss_and_grad(toks, targets, 1.0, scratch).first;
    const double lm = minus.loss_and_grad(toks, targets, 1.0, scratch).first;
    const double fd = (lp - lm) / (2 * eps);
    EXPECT_NEAR(grad[i], fd, 1e-6 + 1e-5 * std::abs(fd)) << "param " << i;
  }
}

TEST(Model, CheckpointRoundTripPreservesForward) {
  const auto w = small_world();
  const auto m = Model<float>::initialized(small_model(w));
  const auto path = std::filesystem::temp_directory_path() / "csl_toy_ckpt.actb";
  save_checkpoint(path, m, {{"note", "x"}});
  const auto back = load_checkpoint<float>(path);
  EXPECT_EQ(back.params(), m.params());
  const auto p = generate_task(w, 1, 2).prompts.front();
  EXPECT_EQ(back.forward(p.tokens).logits, m.forward(p.tokens).logits);
  // A double copy agrees with the float model to float precision.
  const auto md = back.cast<double>();
  EXPECT_LT((md.forward(p.tokens).logits.cast<float>() - m.forward(p.tokens).logits).cwiseAbs().maxCoeff(), 1e-4);
}

// --- exact match / training -------------------------------------------------

TEST(ExactMatch, TruncatesAtNewlineAndAcceptsSynonyms) {
  const std::vector<ExactMatchItem> items = {
      {{0}, 5, {}},      // "5\n" -> correct
      {{0}, 5, {}},      // "5 6" -> wrong (extra token)
      {{0}, 5, {7}},     // "7\n" -> synonym
      {{0}, 5, {}},      // "\n" -> empty, wrong
  };
  std::vector<std::vector<int>> gens = {{5, kNewlineToken, 9}, {5, 6}, {7, kNewlineToken}, {kNewlineToken}};
  std::size_t i = 0;
  const auto rep = evaluate_exact_match(std::span<const ExactMatchItem>(items), [&](const std::vector<int>&) { return gens[i++]; });
  EXPECT_TRUE(rep.items[0].correct);
  EXPECT_FALSE(rep.items[1].correct);
  EXPECT_TRUE(rep.items[2].correct);
  EXPECT_FALSE(rep.items[3].correct);
  EXPECT_EQ(rep.items[0].generation, std::vector<int>{5});
  EXPECT_DOUBLE_EQ(rep.accuracy, 0.5);
}

TEST(Train, TargetsSitOnDelimitersAndLabels) {
  const auto w = small_world();
  Rng rng = make_rng(1, 0);
  const auto p = w.sample_training_prompt(2, rng);
  const auto [toks, targets] = training_sequence(w, p);
  ASSERT_EQ(toks.size(), targets.size());
  EXPECT_EQ(targets[p.tokens.size() - 1], p.target);
  for (std::size_t t = 0; t < toks.size(); ++t)
    if (targets[t] >= 0) {
      EXPECT_TRUE(toks[t] == kDelimiterToken || w.is_label_token(toks[t]));
    }
}

TEST(Train, ShortRunLowersLossAndIsDeterministic) {
  const auto w = small_world();
  TrainConfig t;
  t.steps = 60;
  t.batch = 4;
  t.num_demos = 2;
  t.warmup = 10;
  t.eval_contexts = 1;
  const auto [m1, r1] = train(small_model(w), w, t);
  const auto [m2, r2] = train(small_model(w), w, t);
  EXPECT_EQ(m1.params(), m2.params());
  ASSERT_GE(r1.loss_curve.size(), 1u);
  const auto fresh = Model<float>::initialized(small_model(w));
  Rng rng = make_rng(99, 0);
  double before = 0, after = 0;
  for (int i = 0; i < 20; ++i) {
    const auto [toks, targets] = training_sequence(w, w.sample_training_prompt(2, rng));
    std::vector<float> g(fresh.params().size());
    before += fresh.loss_and_grad(toks, targets, 1.f, g).first;
    after += m1.loss_and_grad(toks, targets, 1.f, g).first;
  }
  EXPECT_LT(after, before);
}

TEST(Train, UntrainedModelIsNearChance) {
  const TaskWorld w{TaskConfig{}};
  ModelConfig cfg;
  cfg.vocab = w.config().vocab_needed();
  const auto m = Model<float>::initialized(cfg);
  // ~500 queries at N = 8; an untrained model has no way to pick the right label.
  const double acc = heldout_accuracy(m, w, 8, 21, 11);
  EXPECT_LE(acc, 3.0 / w.config().num_concepts);
}
