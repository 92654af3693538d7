// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#include "json.hpp"
#include "weakground/engine.hpp"

using namespace wg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Tensor t(Shape{r, c});
  std::normal_distribution<double> n;
  for (auto& v : t.values()) v = n(rng);
  return t;
}

GenConfig small_gen() {
  GenConfig g;
  g.train_scenes = 40;
  g.test_scenes = 12;
  return g;
}

TrainConfig small_train() {
  TrainConfig t;
  t.epochs = 3;
  t.embed_dim = 16;
  t.heads = 2;
  t.text_layers = 1;
  t.fusion_layers = 1;
  t.negatives = 4;
  return t;
}

// ------------------------------------------------------------------ 1

Outcome gradient_suite(const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string data = (dir / "grad.jsonl").string();
  GenConfig g = small_gen();
  g.train_scenes = 20;
  g.test_scenes = 0;
  build_dataset(g, 3, data);
  const DatasetMeta meta = load_meta(data);
  const auto scenes = load_dataset(data, LoadMode::full);

  ModelConfig mc = default_model_config(meta);
  mc.embed_dim = 8;
  mc.heads = 2;
  mc.text_layers = 1;
  mc.fusion_layers = 1;

  const char* names[] = {"L_se", "L_PN", "L_phr", "L_rel", "total"};
  double worst = 0;
  std::string worst_where;
  std::size_t checked = 0, failures = 0;
  const std::size_t seeds = 20;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Model model(mc, seed);
    const Scene& s0 = scenes[(2 * seed) % scenes.size()];
    const Scene& s1 = scenes[(2 * seed + 1) % scenes.size()];
    auto relational = [](const Scene& s) -> const QueryRecord& {
      for (const auto& q : s.queries)
        if (q.meta && q.meta->relation) return q;
      return s.queries.front();
    };
    const ParsedQuery p0 = parse(relational(s0).text, meta.vocab);
    const ParsedQuery p1 = parse(relational(s1).text, meta.vocab);
    const NegativeQuerySet negs = generate_negatives(p0, meta.vocab, model.phrase_embeddings(), 3);

    // L_se takes the classifier column as a fixed target, so the reference
    // function freezes P_s at the current parameters.
    Tensor P_s;
    {
      Tape t;
      P_s = model.encode(t, {&s0.proposals}, {{0, &p0}}).queries[0].P_s.value();
    }

    // which: 0..3 a single loss, 4 the weighted total.
    auto objective = [&](int which) {
      return [&, which](Tape& t) {
        std::vector<QueryInput> qs = {{0, &p0}, {1, &p1}, {1, &p0}, {0, &p1}};
        for (const auto& n : negs.parsed) qs.push_back({0, &n, false, false});
        const BatchEncoding b = model.encode(t, {&s0.proposals, &s1.proposals}, qs);
        const QueryEncoding& e = b.queries[0];
        std::vector<Var> neg_rows;
        for (std::size_t i = 4; i < b.queries.size(); ++i) neg_rows.push_back(b.queries[i].F_se);
        LossTerms terms;
        if (which == 0 || which == 4)
          terms.se = loss_se(e.F_po, e.F_se, t.constant(P_s), *p0.target_phrase().category, 0.1);
        if (which == 1 || which == 4) terms.pn = loss_pn(e.F_po, e.F_se, concat_rows(neg_rows), 0.1);
        if (which == 2 || which == 4) {
          auto S = [&](std::size_t k) { return phrase_scene_score(b.queries[k].F_phr, b.queries[k].F_po); };
          terms.phr = loss_phr(concat_rows({concat_cols({S(0), S(2)}), concat_cols({S(3), S(1)})}), 0.1);
        }
        if (which == 3 || which == 4) terms.rel = loss_rel(t, model, p0, e.F_phr, e.F_po).loss;
        return *total_loss(terms, LossWeights{}, nullptr);
      };
    };
    const GradCheckOptions opt{.max_entries_per_param = 2, .seed = seed};
    for (int which = 0; which < 5; ++which) {
      if (which == 3 && p0.relation_triples.empty()) continue;
      const GradCheckReport r = grad_check(objective(which), model.params(), opt);
      checked += r.checked;
      if (!r.passed) ++failures;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_where = std::string(names[which]) + "/" + r.worst_param;
      }
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures == 0 && secs < 60.0;
  o.detail = fmt("%zu seeds, %zu entries, %zu failing checks, worst rel err %.2e (%s), %.1f s", seeds, checked,
                 failures, worst, worst_where.c_str(), secs);
  return o;
}

// ------------------------------------------------------------------ 2

Outcome phrase_score_oracle() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> nd(1, 16), md(1, 24);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = nd(rng), m = md(rng);
    const Tensor sim = random_matrix(n, m, rng);
    double oracle = 0;
    for (std::size_t x = 0; x < n; ++x) {
      double best = -INFINITY;
      for (std::size_t y = 0; y < m; ++y) best = std::max(best, sim.at(x, y));
      oracle += best;
    }
    Tape tape;
    worst = std::max(worst, std::abs(phrase_scene_score(sim) - oracle));
    worst = std::max(worst, std::abs(phrase_scene_score_from_similarity(tape.constant(sim)).item() - oracle));
  }
  return {worst <= 1e-12, fmt("1000 matrices, max |diff| %.1e", worst)};
}

// ------------------------------------------------------------------ 3

Outcome phrase_loss_closed_forms() {
  Tape tape;
  // Row 1 is the transposed pair so each query sees the same scores.
  const double pair = loss_phr(tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})), 1.0).item();
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  bool ok = std::abs(pair - 0.3133) < 1e-4 && std::abs(pair - expect) < 1e-12;
  double worst_uniform = 0;
  for (std::size_t b : {2, 3, 5, 8}) {
    const double l = loss_phr(tape.constant(Tensor(Shape{b, b}, 0.7)), 0.1).item();
    worst_uniform = std::max(worst_uniform, std::abs(l - std::log(static_cast<double>(b))));
  }
  ok = ok && worst_uniform <= 1e-9;
  const double single = loss_phr(tape.constant(Tensor::matrix(1, 1, {4.2})), 0.1).item();
  ok = ok && single == 0.0;
  return {ok, fmt("pair %.6f, uniform max err %.1e, b=1 -> %g", pair, worst_uniform, single)};
}

// ------------------------------------------------------------------ 4

Outcome info_nce_closed_forms() {
  bool ok = true;
  double worst = 0;
  for (std::size_t k : {1, 2, 5, 25}) {
    const std::vector<double> negs(k, 0.3);
    worst = std::max(worst, std::abs(info_nce(0.3, negs, 0.1) - std::log(static_cast<double>(k + 1))));
    Tape tape;
    const double v = info_nce(tape.constant(Tensor::matrix(1, 1, {0.3})),
                              tape.constant(Tensor(Shape{k, 1}, 0.3)), 0.1)
                         .item();
    worst = std::max(worst, std::abs(v - std::log(static_cast<double>(k + 1))));
  }
  ok = worst <= 1e-9;
  const bool empty = info_nce(1.7, std::span<const double>{}, 0.1) == 0.0;
  ok = ok && empty;

  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::size_t violations = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const double pos = nd(rng);
    std::vector<double> negs(1 + trial % 7);
    for (auto& v : negs) v = nd(rng);
    const double base = info_nce(pos, negs, 0.5);
    if (!(info_nce(pos + 1e-3, negs, 0.5) < base)) ++violations;
    auto bumped = negs;
    bumped[trial % negs.size()] += 1e-3;
    if (!(info_nce(pos, bumped, 0.5) > base)) ++violations;
  }
  ok = ok && violations == 0;
  return {ok, fmt("uniform max err %.1e, empty negatives %s, %zu monotonicity violations in 1000 perturbations",
                  worst, empty ? "0" : "nonzero", violations)};
}

// ------------------------------------------------------------------ 5

Outcome iou_cases() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(-2, 2), size(0.1, 2);
  double sym = 0, ident = 0;
  for (int i = 0; i < 1000; ++i) {
    const Box3 a = Box3::make({pos(rng), pos(rng), pos(rng)}, {size(rng), size(rng), size(rng)});
    const Box3 b = Box3::make({pos(rng), pos(rng), pos(rng)}, {size(rng), size(rng), size(rng)});
    sym = std::max(sym, std::abs(iou_3d(a, b) - iou_3d(b, a)));
    ident = std::max(ident, std::abs(iou_3d(a, a) - 1.0));
  }
  const Box3 unit = Box3::make({0, 0, 0}, {1, 1, 1});
  const double disjoint = iou_3d(unit, Box3::make({3, 0, 0}, {1, 1, 1}));
  const double shifted = iou_3d(unit, Box3::make({0.5, 0, 0}, {1, 1, 1}));

  // A lone proposal whose IoU with the target is exactly 0.25 must not count.
  DatasetMeta meta;
  meta.vocab = make_vocab(10, 2, 4, 0);
  meta.room = {8, 8, 3};
  Scene s;
  s.id = "boundary";
  s.split = "test";
  const Box3 target = Box3::make({0.5, 0.5, 0.5}, {1, 1, 1});
  const Box3 guess = Box3::make({1.25, 0.5, 0.5}, {1.5, 1, 1});
  s.objects.push_back({0, 0, target, meta.vocab.prototypes[0]});
  Proposal p;
  p.box = guess;
  p.det_likelihood.assign(meta.vocab.size(), 1.0 / static_cast<double>(meta.vocab.size()));
  p.appearance = meta.vocab.prototypes[0];
  s.proposals.push_back(p);
  QueryRecord q;
  q.text = "the " + meta.vocab.names[0];
  q.eval_target = 0;
  s.queries.push_back(q);
  ModelConfig mc = default_model_config(meta);
  mc.embed_dim = 8;
  mc.heads = 2;
  Model model(mc, 0);
  const EvalReport r = evaluate(model, {s}, meta, EvalMode::detector);
  const double boundary = iou_3d(target, guess);

  const bool ok = sym == 0.0 && ident <= 1e-12 && disjoint == 0.0 && std::abs(shifted - 1.0 / 3.0) <= 1e-9 &&
                  boundary == 0.25 && r.acc25 == 0.0;
  return {ok, fmt("symmetry err %.1e, identity err %.1e, disjoint %g, shifted cube %.12f, IoU 0.25 scored %g",
                  sym, ident, disjoint, shifted, r.acc25)};
}

// ------------------------------------------------------------------ 6

Outcome parser_corpus() {
  const auto t0 = std::chrono::steady_clock::now();
  const CategoryVocab vocab = make_vocab(10, 2, 16, 0);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> cat(0, vocab.size() - 1), rel(0, kRelationCount - 1);
  std::uniform_int_distribution<int> variant(0, 2);
  std::size_t target_ok = 0, triple_ok = 0;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) {
    TemplateMeta m;
    m.target_category = cat(rng);
    m.template_variant = variant(rng);
    m.phrase_variant = variant(rng);
    if (i % 4 != 0) {
      m.relation = kRelationLibrary[rel(rng)];
      do m.anchor_category = cat(rng);
      while (*m.anchor_category == m.target_category);
    }
    const ParsedQuery p = parse(render_query(m, vocab), vocab);
    target_ok += p.target_phrase().category == m.target_category;
    if (m.relation) {
      triple_ok += p.relation_triples.size() == 1 && p.relation_triples[0].relation == *m.relation &&
                   p.relation_triples[0].subject == p.target &&
                   p.noun_phrases[p.relation_triples[0].anchor].category == m.anchor_category;
    } else {
      triple_ok += p.relation_triples.empty();
    }
  }
  const double secs = seconds_since(t0);
  return {target_ok == n && triple_ok == n && secs < 10.0,
          fmt("targets %zu/%zu, triples %zu/%zu, %.2f s", target_ok, n, triple_ok, n, secs)};
}

// ------------------------------------------------------------------ 7

void zero_numbers(nlohmann::json& j) {
  if (j.is_number()) j = 0;
  else if (j.is_array() || j.is_object())
    for (auto& v : j) zero_numbers(v);
}

Outcome firewall(const fs::path& dir) {
  const std::string full = (dir / "fw.jsonl").string(), zeroed = (dir / "fw_zeroed.jsonl").string();
  build_dataset(small_gen(), 7, full);
  fs::copy_file(full + ".meta.json", zeroed + ".meta.json", fs::copy_options::overwrite_existing);
  std::ifstream in(full);
  std::ofstream out(zeroed, std::ios::binary);
  std::string line;
  std::size_t touched = 0;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    if (j.contains("eval")) {
      zero_numbers(j["eval"]);
      ++touched;
    }
    out << j.dump() << "\n";
  }
  out.close();

  const TrainConfig cfg = small_train();
  const std::string a = fnv1a(train_from_file(full, cfg).serialize());
  const std::string b = fnv1a(train_from_file(zeroed, cfg).serialize());
  return {a == b && touched > 0 && slurp(full) != slurp(zeroed),
          fmt("%zu eval sections zeroed, checksum full %s, zeroed %s", touched, a.c_str(), b.c_str())};
}

// ------------------------------------------------------------------ 8

Outcome benchmark(const fs::path& dir) {
  const std::string data = (dir / "bench.jsonl").string();
  build_dataset(GenConfig{}, 0, data);
  const DatasetMeta meta = load_meta(data);
  const auto train_scenes = load_dataset(data, LoadMode::weak, "train");
  const auto test = load_dataset(data, LoadMode::full, "test");
  const double ceiling = category_only_ceiling(test);
  const std::size_t threads = env_threads();

  auto run = [&](const AblationFlags& flags, double* secs) {
    TrainConfig cfg;
    cfg.flags = flags;
    Model model(model_config_for(meta, cfg), cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();
    train(model, train_scenes, meta.vocab, cfg);
    if (secs) *secs = seconds_since(t0);
    return evaluate(model, test, meta, EvalMode::gt_proposals, threads);
  };
  double full_secs = 0;
  const EvalReport full = run(AblationFlags{}, &full_secs);
  const EvalReport c1 = run(AblationFlags{true, false, false, false}, nullptr);

  const bool a = full.acc >= 0.70;
  const bool b = std::abs(c1.acc - ceiling) <= 0.10;
  const bool c = full.acc - c1.acc >= 0.15;
  const bool t = full_secs < 600.0;
  return {a && b && c && t,
          fmt("(a) full Acc %.3f %s 0.70; (b) {c1} Acc %.3f vs ceiling %.3f %s; (c) gain %+.1f pts %s 15; "
              "full branches %zu category / %zu instance; training %.0f s",
              full.acc, a ? ">=" : "<", c1.acc, ceiling, b ? "within 10 pts" : "off by > 10 pts",
              100 * (full.acc - c1.acc), c ? ">=" : "<", full.category_branch, full.instance_branch, full_secs)};
}

// ------------------------------------------------------------------ 9

Outcome ablation_harness(const fs::path& dir) {
  const std::string data = (dir / "abl.jsonl").string();
  build_dataset(small_gen(), 9, data);
  TrainConfig cfg = small_train();
  cfg.epochs = 2;
  const auto rows = ablate(data, cfg, env_threads());
  const std::string csv = ablation_csv(rows);

  bool ok = rows.size() == 4;
  const auto expected = ablation_configs();
  for (std::size_t i = 0; ok && i < rows.size(); ++i) {
    const AblationFlags& f = rows[i].flags;
    const LossCounters& k = rows[i].counters;
    ok = f.c1 && f.c2 == (i >= 1) && f.i1 == (i >= 2) && f.i2 == (i >= 3) && f.c1 == expected[i].c1 &&
         (k.se > 0) && ((k.pn > 0) == f.c2) && ((k.phr > 0) == f.i1) && ((k.rel > 0) == f.i2);
  }
  std::istringstream lines(csv);
  std::string header, line;
  std::getline(lines, header);
  std::size_t data_lines = 0;
  while (std::getline(lines, line)) data_lines += !line.empty();
  ok = ok && header == "c1,c2,i1,i2,Acc@.25,Acc@.50,Acc" && data_lines == 4;
  std::string counters;
  for (const auto& r : rows)
    counters += fmt(" [%zu %zu %zu %zu]", r.counters.se, r.counters.pn, r.counters.phr, r.counters.rel);
  return {ok, fmt("%zu rows, header '%s', loss counters (se pn phr rel):%s", rows.size(), header.c_str(),
                  counters.c_str())};
}

// ------------------------------------------------------------------ 10

Outcome determinism(const fs::path& dir) {
  std::vector<std::string> sums;
  bool ok = true;
  std::string first;
  for (int rep = 0; rep < 2; ++rep) {
    const std::string base = (dir / ("det" + std::to_string(rep))).string();
    build_dataset(small_gen(), 10, base + ".jsonl");
    const Model m = train_from_file(base + ".jsonl", small_train());
    m.save(base + ".ckpt");
    const EvalReport r = evaluate_file(base + ".jsonl", base + ".ckpt", EvalMode::detector, env_threads());
    write_report(base + ".report", r);
    write_records_csv(base + ".csv", r);
    std::string all;
    for (const char* ext : {".jsonl", ".jsonl.meta.json", ".ckpt", ".report", ".csv"})
      all += (all.empty() ? "" : " ") + fnv1a(slurp(base + ext));
    if (rep == 0) first = all;
    else ok = all == first;
  }
  return {ok, "dataset/meta/checkpoint/report/records checksums " + first};
}

}  // namespace

// With arguments, only the listed criterion numbers run.
int main(int argc, char** argv) {
  const fs::path dir = fs::temp_directory_path() / ("weakground_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);

  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"gradient suite", [&] { return gradient_suite(dir); }},
      {"phrase-scene score oracle", phrase_score_oracle},
      {"phrase loss closed forms", phrase_loss_closed_forms},
      {"InfoNCE closed forms", info_nce_closed_forms},
      {"IoU", iou_cases},
      {"parser corpus", parser_corpus},
      {"weak-supervision firewall", [&] { return firewall(dir); }},
      {"end-to-end benchmark", [&] { return benchmark(dir); }},
      {"ablation harness", [&] { return ablation_harness(dir); }},
      {"determinism", [&] { return determinism(dir); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (argc > 1 && std::find_if(argv + 1, argv + argc, [&](const char* a) { return std::to_string(i + 1) == a; }) ==
                        argv + argc)
      continue;
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(dir);
  return failed == 0 ? 0 : 1;
}
