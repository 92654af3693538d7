#include "weakground/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace wg {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("train: batch size must be >= 1");
  if (!flags.any()) throw ContractError("train: every loss is disabled");
  if (!(lr >= 0.0) || !(momentum >= 0.0) || momentum >= 1.0 || !(clip_norm >= 0.0))
    throw ContractError("train: bad optimizer settings");
  weights.validate();
}

ModelConfig model_config_for(const DatasetMeta& meta, const TrainConfig& cfg) {
  ModelConfig m = default_model_config(meta);
  m.embed_dim = cfg.embed_dim;
  m.text_layers = cfg.text_layers;
  m.fusion_layers = cfg.fusion_layers;
  m.heads = cfg.heads;
  return m;
}

namespace {

struct Item {
  std::size_t scene;
  ParsedQuery parsed;
};

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Var mean_of(const std::vector<Var>& vs) {
  Var total = vs[0];
  for (std::size_t i = 1; i < vs.size(); ++i) total = add(total, vs[i]);
  return scale(total, 1.0 / static_cast<double>(vs.size()));
}

struct Running {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

}  // namespace

TrainResult train(Model& model, const std::vector<Scene>& scenes, const CategoryVocab& vocab, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
#if defined(__GLIBC__)
  // Activations are freed and reallocated every batch; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  TrainResult result;
  LossCounters& counters = result.counters;

  std::vector<Item> items;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    if (scenes[s].proposals.empty()) continue;
    for (const auto& q : scenes[s].queries) {
      try {
        ParsedQuery p = parse(q.text, vocab, cfg.parse);
        if (!p.target_phrase().category) throw ParseError("no target category");
        items.push_back({s, std::move(p)});
      } catch (const ParseError&) {
        ++counters.skipped_queries;
      }
    }
  }
  if (items.empty()) throw TrainingError("train: dataset has no usable (scene, query) pairs");

  // Detector argmax labels for the classifier.
  std::vector<std::vector<std::size_t>> labels(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& p : scenes[s].proposals) labels[s].push_back(argmax(p.det_likelihood));

  ParamStore& store = model.params();
  std::vector<Tensor> velocity;
  for (ParamId id = 0; id < store.count(); ++id) velocity.emplace_back(store.value(id).shape(), 0.0);

  const AblationFlags& f = cfg.flags;
  const LossWeights& w = cfg.weights;
  const bool use_aux = f.c1 && w.aux_weight > 0.0;
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    std::set<std::size_t> in_batch;
    for (std::size_t idx : order) {
      if (batches.empty() || batches.back().size() == cfg.batch_size || in_batch.count(items[idx].scene)) {
        batches.emplace_back();
        in_batch.clear();
      }
      batches.back().push_back(idx);
      in_batch.insert(items[idx].scene);
    }

    Running r_se, r_pn, r_phr, r_rel, r_aux, r_total;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      const std::size_t b = batch.size();
      const auto phrase_now =
          f.c2 && cfg.negatives > 0 ? model.phrase_embeddings() : std::vector<std::vector<double>>{};

      std::vector<const std::vector<Proposal>*> batch_scenes;
      for (std::size_t idx : batch) batch_scenes.push_back(&scenes[items[idx].scene].proposals);

      std::vector<NegativeQuerySet> negs(b);
      std::vector<QueryInput> inputs;
      for (std::size_t i = 0; i < b; ++i)
        inputs.push_back({i, &items[batch[i]].parsed, f.i1 || f.i2, f.c1});
      std::vector<std::pair<std::size_t, std::size_t>> neg_range(b);
      if (f.c2 && cfg.negatives > 0) {
        for (std::size_t i = 0; i < b; ++i) {
          negs[i] = generate_negatives(items[batch[i]].parsed, vocab, phrase_now, cfg.negatives);
          neg_range[i].first = inputs.size();
          for (const auto& np : negs[i].parsed) inputs.push_back({i, &np, false, false});
          neg_range[i].second = inputs.size();
        }
      }
      std::vector<std::vector<std::size_t>> cross(b, std::vector<std::size_t>(b, 0));
      const bool cross_pass = f.i1 && cfg.cross_fusion && b > 1;
      if (cross_pass)
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j)
            if (i != j) {
              cross[i][j] = inputs.size();
              inputs.push_back({j, &items[batch[i]].parsed, true, false});
            }

      Tape tape;
      const BatchEncoding enc = model.encode(tape, batch_scenes, inputs);
      counters.truncated_queries += enc.truncated_queries;

      std::vector<Var> se, pn, rel, aux;
      for (std::size_t i = 0; i < b; ++i) {
        const QueryEncoding& e = enc.queries[i];
        const Item& item = items[batch[i]];
        if (f.c1) {
          se.push_back(loss_se(e.F_po, e.F_se, e.P_s, *item.parsed.target_phrase().category, w.tau_se));
          ++counters.se;
          if (use_aux) {
            aux.push_back(classifier_loss(e.class_logits, labels[item.scene]));
            ++counters.aux;
          }
        }
        if (f.c2) {
          std::optional<Var> neg_states;
          if (neg_range[i].second > neg_range[i].first) {
            std::vector<Var> rows;
            for (std::size_t k = neg_range[i].first; k < neg_range[i].second; ++k) rows.push_back(enc.queries[k].F_se);
            neg_states = rows.size() == 1 ? rows[0] : concat_rows(rows);
          }
          pn.push_back(loss_pn(e.F_po, e.F_se, neg_states, w.tau));
          ++counters.pn;
        }
        if (f.i2) {
          RelationLoss rl = loss_rel(tape, model, item.parsed, e.F_phr, e.F_po);
          if (rl.loss) {
            rel.push_back(*rl.loss);
            ++counters.rel;
          }
        }
      }
      LossTerms terms;
      if (!se.empty()) terms.se = mean_of(se);
      if (!pn.empty()) terms.pn = mean_of(pn);
      if (!rel.empty()) terms.rel = mean_of(rel);
      if (!aux.empty()) terms.aux = mean_of(aux);
      if (f.i1) {
        std::vector<Var> rows;
        for (std::size_t i = 0; i < b; ++i) {
          std::vector<Var> row;
          for (std::size_t j = 0; j < b; ++j) {
            if (i == j) {
              row.push_back(phrase_scene_score(enc.queries[i].F_phr, enc.queries[i].F_po));
            } else if (cross_pass) {
              const QueryEncoding& e = enc.queries[cross[i][j]];
              row.push_back(phrase_scene_score(e.F_phr, e.F_po));
            } else {
              row.push_back(phrase_scene_score(enc.queries[i].F_phr, enc.queries[j].F_po));
            }
          }
          rows.push_back(row.size() == 1 ? row[0] : concat_cols(row));
        }
        terms.phr = loss_phr(rows.size() == 1 ? rows[0] : concat_rows(rows), w.tau);
        ++counters.phr;
      }

      LossBundle bundle;
      const std::optional<Var> objective = total_loss(terms, w, &bundle);
      if (!std::isfinite(bundle.objective))
        throw TrainingError("train: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(bi));
      if (bundle.has_se) r_se.add(bundle.se);
      if (bundle.has_pn) r_pn.add(bundle.pn);
      if (bundle.has_phr) r_phr.add(bundle.phr);
      if (bundle.has_rel) r_rel.add(bundle.rel);
      if (bundle.has_aux) r_aux.add(bundle.aux);
      r_total.add(bundle.total);
      if (!objective) continue;

      store.zero_grad();
      tape.backward(*objective);
      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (ParamId id = 0; id < store.count(); ++id)
          for (double g : store.grad(id).values()) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm)
          for (ParamId id = 0; id < store.count(); ++id)
            for (double& g : store.grad(id).values()) g *= cfg.clip_norm / norm;
      }
      for (ParamId id = 0; id < store.count(); ++id) {
        Tensor& v = velocity[id];
        Tensor& p = store.value(id);
        const Tensor& g = store.grad(id);
        for (std::size_t k = 0; k < p.size(); ++k) {
          v[k] = cfg.momentum * v[k] + g[k];
          p[k] -= cfg.lr * v[k];
        }
      }
    }
    EpochLog log{epoch, r_se.mean(), r_pn.mean(), r_phr.mean(), r_rel.mean(), r_aux.mean(), r_total.mean()};
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

Model train_from_file(const std::string& data_path, const TrainConfig& cfg, TrainResult* result,
                      const EpochCallback& on_epoch) {
  const DatasetMeta meta = load_meta(data_path);
  const std::vector<Scene> scenes = load_dataset(data_path, LoadMode::weak, "train");
  if (scenes.empty()) throw TrainingError("train: no training scenes in '" + data_path + "'");
  Model model(model_config_for(meta, cfg), cfg.seed);
  TrainResult r = train(model, scenes, meta.vocab, cfg, on_epoch);
  if (result) *result = std::move(r);
  return model;
}

void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write training log '" + path + "'");
  out << "epoch,L_se,L_PN,L_phr,L_rel,total,aux\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.se, e.pn, e.phr, e.rel, e.total,
                  e.aux);
    out << buf;
  }
}

// ---------------------------------------------------------------- inference

const char* branch_name(Branch b) { return b == Branch::category ? "category" : "instance"; }

Decision decide(const std::vector<double>& p_c, const std::vector<double>& p_f) {
  if (p_c.empty()) throw ContractError("decide: no proposals");
  if (!p_f.empty() && p_f.size() != p_c.size()) throw DimensionError("decide: branch score lengths differ");
  const std::size_t ic = argmax(p_c);
  if (p_f.empty()) return {ic, Branch::category};
  const std::size_t jf = argmax(p_f);
  if (p_c[ic] >= p_f[jf]) return {ic, Branch::category};
  return {jf, Branch::instance};
}

InferResult infer(Model& model, const std::vector<Proposal>& proposals, const std::string& query,
                  const CategoryVocab& vocab) {
  if (proposals.empty()) throw ContractError("infer: zero proposals");
  ParsedQuery parsed;
  bool phrases = true;
  try {
    parsed = parse(query, vocab);
  } catch (const ParseError&) {
    parsed.tokens = tokenize(query);
    if (parsed.tokens.empty()) throw ParseError("infer: query has no tokens");
    phrases = false;
  }
  Tape tape;
  const BatchEncoding enc = model.encode(tape, {&proposals}, {QueryInput{0, &parsed, phrases, false}});
  const QueryEncoding& e = enc.queries[0];
  InferResult r;
  const Tensor& F_po = e.F_po.value();
  const Tensor& F_se = e.F_se.value();
  for (std::size_t y = 0; y < F_po.rows(); ++y) r.p_c.push_back(cosine_sim(F_se.row(0), F_po.row(y)));
  if (phrases) {
    const Tensor& F_phr = e.F_phr.value();
    for (std::size_t y = 0; y < F_po.rows(); ++y) {
      double best = -INFINITY;
      for (std::size_t x = 0; x < F_phr.rows(); ++x) best = std::max(best, cosine_sim(F_phr.row(x), F_po.row(y)));
      r.p_f.push_back(best);
    }
  }
  r.decision = decide(r.p_c, r.p_f);
  return r;
}

// ---------------------------------------------------------------- evaluation

EvalReport aggregate(EvalMode mode, std::vector<QueryRecordOut> records) {
  EvalReport r;
  r.mode = mode;
  r.queries = records.size();
  std::size_t c25 = 0, c50 = 0, c = 0;
  for (const auto& q : records) {
    c25 += q.correct25;
    c50 += q.correct50;
    c += q.correct;
    (q.branch == Branch::category ? r.category_branch : r.instance_branch)++;
  }
  if (r.queries) {
    const double n = static_cast<double>(r.queries);
    r.acc25 = static_cast<double>(c25) / n;
    r.acc50 = static_cast<double>(c50) / n;
    r.acc = static_cast<double>(c) / n;
  }
  r.records = std::move(records);
  return r;
}

EvalReport evaluate(Model& model, const std::vector<Scene>& scenes, const DatasetMeta& meta, EvalMode mode,
                    std::size_t threads) {
  struct Job {
    const Scene* scene;
    const QueryRecord* query;
  };
  std::vector<Job> jobs;
  for (const auto& s : scenes)
    for (const auto& q : s.queries) {
      if (!q.eval_target) throw DatasetError("evaluate: scene " + s.id + " has no eval targets (weak load?)");
      jobs.push_back({&s, &q});
    }
  if (jobs.empty()) throw DatasetError("evaluate: no test queries");

  std::vector<QueryRecordOut> records(jobs.size());
  auto run = [&](std::size_t begin, std::size_t step) {
    for (std::size_t k = begin; k < jobs.size(); k += step) {
      const Scene& s = *jobs[k].scene;
      const QueryRecord& q = *jobs[k].query;
      const SceneObject* target = s.object(*q.eval_target);
      if (!target) throw DatasetError("evaluate: eval target missing from scene " + s.id);
      const std::vector<Proposal> gt = mode == EvalMode::gt_proposals ? gt_proposals(s, meta.vocab, meta.noise)
                                                                       : std::vector<Proposal>{};
      const std::vector<Proposal>& props = mode == EvalMode::gt_proposals ? gt : s.proposals;
      QueryRecordOut& out = records[k];
      out.scene_id = s.id;
      out.query = q.text;
      const InferResult r = infer(model, props, q.text, meta.vocab);
      out.branch = r.decision.branch;
      out.chosen = r.decision.proposal;
      out.max_pc = *std::max_element(r.p_c.begin(), r.p_c.end());
      out.max_pf = r.p_f.empty() ? NAN : *std::max_element(r.p_f.begin(), r.p_f.end());
      const Proposal& chosen = props[out.chosen];
      out.iou = iou_3d(chosen.box, target->box);
      out.correct25 = out.iou > 0.25;
      out.correct50 = out.iou > 0.5;
      out.correct = chosen.matched_object && *chosen.matched_object == target->id;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          run(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return aggregate(mode, std::move(records));
}

EvalReport evaluate_file(const std::string& data_path, const std::string& ckpt_path, EvalMode mode,
                         std::size_t threads) {
  Model model = Model::load(ckpt_path);
  const DatasetMeta meta = load_meta(data_path);
  const std::vector<Scene> scenes = load_dataset(data_path, LoadMode::full, "test");
  if (scenes.empty()) throw DatasetError("evaluate: no test scenes in '" + data_path + "'");
  return evaluate(model, scenes, meta, mode, threads);
}

namespace {

std::string histogram_line(const std::vector<QueryRecordOut>& recs, bool pc) {
  std::vector<std::size_t> bins(10, 0);
  for (const auto& r : recs) {
    const double v = pc ? r.max_pc : r.max_pf;
    if (std::isnan(v)) continue;
    const auto b = static_cast<std::size_t>(std::clamp((v + 1.0) / 2.0 * 10.0, 0.0, 9.0));
    ++bins[b];
  }
  std::string out;
  for (std::size_t b = 0; b < bins.size(); ++b) out += (b ? " " : "") + std::to_string(bins[b]);
  return out;
}

}  // namespace

std::string report_text(const EvalReport& r) {
  char buf[128];
  std::string out;
  out += std::string("mode: ") + (r.mode == EvalMode::detector ? "detector" : "gt") + "\n";
  out += "queries: " + std::to_string(r.queries) + "\n";
  std::snprintf(buf, sizeof buf, "acc@0.25: %.4f\nacc@0.50: %.4f\nacc: %.4f\n", r.acc25, r.acc50, r.acc);
  out += buf;
  out += "branch.category: " + std::to_string(r.category_branch) + "\n";
  out += "branch.instance: " + std::to_string(r.instance_branch) + "\n";
  out += "hist.max_pc [-1,1] x10: " + histogram_line(r.records, true) + "\n";
  out += "hist.max_pf [-1,1] x10: " + histogram_line(r.records, false) + "\n";
  return out;
}

void write_report(const std::string& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write report '" + path + "'");
  out << report_text(r);
}

namespace {

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace

void write_records_csv(const std::string& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write records '" + path + "'");
  out << "scene_id,query,branch,chosen_proposal,iou,correct25,correct50,correct\n";
  char buf[64];
  for (const auto& q : r.records) {
    std::snprintf(buf, sizeof buf, "%.6f", q.iou);
    out << csv_quote(q.scene_id) << ',' << csv_quote(q.query) << ',' << branch_name(q.branch) << ',' << q.chosen << ','
        << buf << ',' << q.correct25 << ',' << q.correct50 << ',' << q.correct << '\n';
  }
}

double category_only_ceiling(const std::vector<Scene>& scenes) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : scenes)
    for (const auto& q : s.queries) {
      if (!q.eval_target) continue;
      const SceneObject* t = s.object(*q.eval_target);
      if (!t) continue;
      const auto same = std::count_if(s.objects.begin(), s.objects.end(),
                                      [&](const SceneObject& o) { return o.category == t->category; });
      total += 1.0 / static_cast<double>(same);
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------- ablation

std::vector<AblationFlags> ablation_configs() {
  return {{true, false, false, false}, {true, true, false, false}, {true, true, true, false}, {true, true, true, true}};
}

std::vector<AblationRow> ablate(const std::string& data_path, const TrainConfig& base, std::size_t threads,
                                const std::function<void(const AblationRow&)>& on_row) {
  const DatasetMeta meta = load_meta(data_path);
  const std::vector<Scene> train_scenes = load_dataset(data_path, LoadMode::weak, "train");
  const std::vector<Scene> test_scenes = load_dataset(data_path, LoadMode::full, "test");
  std::vector<AblationRow> rows;
  for (const AblationFlags& flags : ablation_configs()) {
    TrainConfig cfg = base;
    cfg.flags = flags;
    Model model(model_config_for(meta, cfg), cfg.seed);
    AblationRow row;
    row.flags = flags;
    row.counters = train(model, train_scenes, meta.vocab, cfg).counters;
    row.detector = evaluate(model, test_scenes, meta, EvalMode::detector, threads);
    row.gt = evaluate(model, test_scenes, meta, EvalMode::gt_proposals, threads);
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "c1,c2,i1,i2,Acc@.25,Acc@.50,Acc\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,%.4f,%.4f,%.4f\n", r.flags.c1, r.flags.c2, r.flags.i1, r.flags.i2,
                  r.detector.acc25, r.detector.acc50, r.gt.acc);
    out += buf;
  }
  return out;
}

std::size_t env_threads() {
  const char* v = std::getenv("WEAKGROUND_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ContractError(std::string("WEAKGROUND_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

}  // namespace wg
