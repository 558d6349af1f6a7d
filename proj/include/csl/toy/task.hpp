#pragma once

// Synthetic reverse-dictionary task for the toy transformer.
//
// Every concept owns a small set of description keywords and one label in each
// of several "languages"; a language is a permutation of the shared label
// tokens. A prompt is
//
//   desc_1 => y_1 \n  desc_2 => y_2 \n ... desc_N => y_N \n  desc_q =>
//
// and the correct continuation is the query concept's label in the prompt's
// language. A demonstration agrees with the prompt language with probability
// `demo_fidelity` (otherwise it uses another language), so the language has to
// be inferred from (description, label) pairs and more demonstrations give a
// more reliable estimate. The query concept never appears among the
// demonstrations.

#include "csl/common.hpp"
#include "csl/tensorstore.hpp"

#include <algorithm>
#include <set>

namespace csl::toy {

inline constexpr int kDelimiterToken = 0;  // "=>"
inline constexpr int kNewlineToken = 1;
inline constexpr int kFirstLabelToken = 2;

struct TaskConfig {
  int num_concepts = 32;
  int keywords_per_concept = 4;
  int description_length = 3;
  int num_languages = 2;
  double demo_fidelity = 0.9;
  double demo_pool_fraction = 0.2;
  std::uint64_t seed = 0;

  int first_keyword_token() const { return kFirstLabelToken + num_concepts; }
  int vocab_needed() const { return first_keyword_token() + num_concepts * keywords_per_concept; }
};

inline json to_json(const TaskConfig& c) {
  return {{"num_concepts", c.num_concepts},       {"keywords_per_concept", c.keywords_per_concept},
          {"description_length", c.description_length}, {"num_languages", c.num_languages},
          {"demo_fidelity", c.demo_fidelity},     {"demo_pool_fraction", c.demo_pool_fraction},
          {"seed", c.seed}};
}

inline TaskConfig task_config_from_json(const json& j) {
  TaskConfig c;
  c.num_concepts = j.value("num_concepts", c.num_concepts);
  c.keywords_per_concept = j.value("keywords_per_concept", c.keywords_per_concept);
  c.description_length = j.value("description_length", c.description_length);
  c.num_languages = j.value("num_languages", c.num_languages);
  c.demo_fidelity = j.value("demo_fidelity", c.demo_fidelity);
  c.demo_pool_fraction = j.value("demo_pool_fraction", c.demo_pool_fraction);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct Demo {
  int concept_id = 0;
  std::vector<int> description;
  int label = 0;
  int language = 0;  // language the label was rendered in
};

enum class Corruption { None, Description, Label, Query };

inline std::string to_string(Corruption c) {
  switch (c) {
    case Corruption::None: return "none";
    case Corruption::Description: return "description";
    case Corruption::Label: return "label";
    case Corruption::Query: return "query";
  }
  return "?";
}

inline Corruption corruption_from_string(const std::string& s) {
  if (s == "none") return Corruption::None;
  if (s == "description") return Corruption::Description;
  if (s == "label") return Corruption::Label;
  if (s == "query") return Corruption::Query;
  fail_validation("invalid corruption condition '" + s + "'");
}

/// A structured prompt; tokens and spans are derived by render().
struct Prompt {
  int language = 0;
  std::vector<Demo> demos;
  int query_concept = 0;
  std::vector<int> query_description;
  int target = 0;  // correct label token for the query
  Corruption corruption = Corruption::None;

  std::vector<int> tokens;
  SpanTable spans;

  int last_position() const { return static_cast<int>(tokens.size()) - 1; }
};

/// Lays out tokens and span offsets from the structured fields.
inline void render(Prompt& p) {
  p.tokens.clear();
  SpanTable s;
  auto emit_range = [&](const std::vector<int>& toks, SpanClass cls) {
    const int b = static_cast<int>(p.tokens.size());
    p.tokens.insert(p.tokens.end(), toks.begin(), toks.end());
    s[cls].push_back({b, static_cast<int>(p.tokens.size())});
  };
  auto emit_one = [&](int tok, std::optional<SpanClass> cls) {
    const int b = static_cast<int>(p.tokens.size());
    p.tokens.push_back(tok);
    if (cls) s[*cls].push_back({b, b + 1});
  };
  for (const auto& d : p.demos) {
    emit_range(d.description, SpanClass::DemoDescriptions);
    emit_one(kDelimiterToken, SpanClass::MappingDelimiters);
    emit_one(d.label, SpanClass::DemoLabels);
    emit_one(kNewlineToken, std::nullopt);
  }
  emit_range(p.query_description, SpanClass::Query);
  emit_one(kDelimiterToken, SpanClass::FinalDelimiter);
  s.prompt_length = static_cast<int>(p.tokens.size());
  p.spans = std::move(s);
}

/// Concept vocabulary, languages and the demonstration pool, fixed by a seed.
class TaskWorld {
 public:
  explicit TaskWorld(TaskConfig cfg) : cfg_(cfg) {
    require(cfg_.num_concepts >= 2, "task needs at least 2 concepts");
    require(cfg_.keywords_per_concept >= 1 && cfg_.description_length >= 1, "invalid description shape");
    require(cfg_.num_languages >= 1, "task needs at least one language");
    require(cfg_.demo_fidelity > 0.0 && cfg_.demo_fidelity <= 1.0, "demo_fidelity must lie in (0, 1]");
    require(cfg_.demo_pool_fraction > 0.0 && cfg_.demo_pool_fraction < 1.0, "demo pool fraction must lie in (0, 1)");
    Rng rng = make_rng(cfg_.seed, 1);
    const int c = cfg_.num_concepts;
    languages_.resize(static_cast<std::size_t>(cfg_.num_languages));
    languages_[0].resize(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) languages_[0][static_cast<std::size_t>(i)] = i;
    for (int k = 1; k < cfg_.num_languages; ++k) {
      // Re-draw until the permutation moves every concept off every earlier language.
      for (;;) {
        std::vector<int> perm = languages_[0];
        shuffle(perm, rng);
        bool ok = true;
        for (int prev = 0; prev < k && ok; ++prev)
          for (int i = 0; i < c && ok; ++i)
            ok = perm[static_cast<std::size_t>(i)] != languages_[static_cast<std::size_t>(prev)][static_cast<std::size_t>(i)];
        if (ok) {
          languages_[static_cast<std::size_t>(k)] = std::move(perm);
          break;
        }
      }
    }
    std::vector<int> order = languages_[0];
    Rng pool_rng = make_rng(cfg_.seed, 2);
    shuffle(order, pool_rng);
    concept_order_ = order;
  }

  const TaskConfig& config() const { return cfg_; }
  int num_concepts() const { return cfg_.num_concepts; }

  int label_token(int concept_id, int language) const {
    return kFirstLabelToken + languages_.at(static_cast<std::size_t>(language)).at(static_cast<std::size_t>(concept_id));
  }

  bool is_label_token(int tok) const { return tok >= kFirstLabelToken && tok < kFirstLabelToken + cfg_.num_concepts; }

  int keyword_token(int concept_id, int j) const {
    return cfg_.first_keyword_token() + concept_id * cfg_.keywords_per_concept + j;
  }

  std::vector<int> sample_description(int concept_id, Rng& rng) const {
    std::vector<int> d(static_cast<std::size_t>(cfg_.description_length));
    for (auto& t : d)
      t = keyword_token(concept_id, static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg_.keywords_per_concept))));
    return d;
  }

  /// Demonstration pool: round(fraction * C) concepts, enlarged to `min_size`
  /// when N demonstrations need more distinct concepts than that.
  std::vector<int> demo_pool(int min_size = 0) const {
    int size = static_cast<int>(std::lround(cfg_.demo_pool_fraction * cfg_.num_concepts));
    size = std::max({size, min_size, 1});
    require(size < cfg_.num_concepts, "demo pool would leave no query concepts");
    std::vector<int> pool(concept_order_.begin(), concept_order_.begin() + size);
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  /// Concepts outside the pool, ascending.
  std::vector<int> query_concepts(int min_pool_size = 0) const {
    const auto pool = demo_pool(min_pool_size);
    std::vector<int> out;
    for (int c = 0; c < cfg_.num_concepts; ++c)
      if (!std::binary_search(pool.begin(), pool.end(), c)) out.push_back(c);
    return out;
  }

  Demo make_demo(int concept_id, int prompt_language, Rng& rng) const {
    Demo d;
    d.concept_id = concept_id;
    d.description = sample_description(concept_id, rng);
    d.language = prompt_language;
    if (cfg_.num_languages > 1 && uniform01(rng) >= cfg_.demo_fidelity) {
      int other = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg_.num_languages - 1)));
      d.language = other >= prompt_language ? other + 1 : other;
    }
    d.label = label_token(concept_id, d.language);
    return d;
  }

  /// One training sequence: demonstrations over all concepts, then the query
  /// with its label and newline appended (teacher forcing).
  Prompt sample_training_prompt(int num_demos, Rng& rng) const {
    require(num_demos + 1 <= cfg_.num_concepts, "too many demonstrations for the concept count");
    std::vector<int> concepts(static_cast<std::size_t>(cfg_.num_concepts));
    for (int i = 0; i < cfg_.num_concepts; ++i) concepts[static_cast<std::size_t>(i)] = i;
    shuffle(concepts, rng);
    Prompt p;
    p.language = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg_.num_languages)));
    for (int i = 0; i < num_demos; ++i) p.demos.push_back(make_demo(concepts[static_cast<std::size_t>(i)], p.language, rng));
    p.query_concept = concepts[static_cast<std::size_t>(num_demos)];
    p.query_description = sample_description(p.query_concept, rng);
    p.target = label_token(p.query_concept, p.language);
    render(p);
    return p;
  }

 private:
  TaskConfig cfg_;
  std::vector<std::vector<int>> languages_;
  std::vector<int> concept_order_;
};

/// A context (one demonstration set and language) with one prompt per query
/// concept. All prompts share the demonstrations, so rows line up across runs.
struct TaskRun {
  std::string run_id;
  std::uint64_t seed = 0;
  int language = 0;
  int num_demos = 0;
  std::vector<Demo> demos;
  std::vector<Prompt> prompts;

  std::vector<std::string> concept_ids() const {
    std::vector<std::string> ids;
    for (const auto& p : prompts) ids.push_back("c" + std::to_string(p.query_concept));
    return ids;
  }
  std::vector<SpanTable> span_tables() const {
    std::vector<SpanTable> out;
    for (const auto& p : prompts) out.push_back(p.spans);
    return out;
  }
};

/// Builds a context of N demonstrations drawn from the 20% pool and prompts for
/// the first `n_queries` query concepts (all of them when n_queries <= 0).
inline TaskRun generate_task(const TaskWorld& world, std::uint64_t seed, int num_demos, int n_queries = 0,
                             std::optional<int> language = std::nullopt) {
  const int c = world.num_concepts();
  require(num_demos >= 0, "number of demonstrations must be non-negative");
  require(c >= num_demos + 1, "too few concepts: need C >= N + 1");
  const auto pool = world.demo_pool(num_demos);
  const auto queries = world.query_concepts(num_demos);
  require(n_queries <= static_cast<int>(queries.size()),
          "too few concepts: " + std::to_string(queries.size()) + " query concepts available, " +
              std::to_string(n_queries) + " requested");

  Rng rng = make_rng(seed, 0x7a5cULL);
  TaskRun run;
  run.seed = seed;
  run.num_demos = num_demos;
  run.run_id = "run-s" + std::to_string(seed) + "-n" + std::to_string(num_demos);
  run.language = language ? *language
                          : static_cast<int>(uniform_index(rng, static_cast<std::size_t>(world.config().num_languages)));
  require(run.language >= 0 && run.language < world.config().num_languages, "language out of range");

  std::vector<int> chosen = pool;
  shuffle(chosen, rng);
  chosen.resize(static_cast<std::size_t>(num_demos));
  for (int cid : chosen) run.demos.push_back(world.make_demo(cid, run.language, rng));

  const int nq = n_queries > 0 ? n_queries : static_cast<int>(queries.size());
  for (int i = 0; i < nq; ++i) {
    Prompt p;
    p.language = run.language;
    p.demos = run.demos;
    p.query_concept = queries[static_cast<std::size_t>(i)];
    p.query_description = world.sample_description(p.query_concept, rng);
    p.target = world.label_token(p.query_concept, run.language);
    render(p);
    run.prompts.push_back(std::move(p));
  }
  return run;
}

/// Replaces the targeted field with that of a different concept drawn
/// uniformly from the demonstration pool. Token lengths are preserved, so the
/// span table keeps its offsets.
inline Prompt corrupt_prompt(const TaskWorld& world, const Prompt& prompt, Corruption condition, std::uint64_t seed) {
  const auto pool = world.demo_pool(static_cast<int>(prompt.demos.size()));
  Rng rng = make_rng(seed, 0xc0ffeeULL);
  auto other_than = [&](int cid) {
    std::vector<int> candidates;
    for (int c : pool)
      if (c != cid) candidates.push_back(c);
    require(!candidates.empty(), "demo pool too small to corrupt");
    return candidates[uniform_index(rng, candidates.size())];
  };
  Prompt out = prompt;
  out.corruption = condition;
  switch (condition) {
    case Corruption::Description:
      require(!prompt.demos.empty(), "description corruption needs at least one demonstration");
      for (auto& d : out.demos) d.description = world.sample_description(other_than(d.concept_id), rng);
      break;
    case Corruption::Label:
      require(!prompt.demos.empty(), "label corruption needs at least one demonstration");
      for (auto& d : out.demos) d.label = world.label_token(other_than(d.concept_id), d.language);
      break;
    case Corruption::Query:
      out.query_description = world.sample_description(other_than(prompt.query_concept), rng);
      break;
    case Corruption::None:
      fail_validation("invalid corruption condition 'none'");
  }
  render(out);
  return out;
}

}  // namespace csl::toy
