#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "weakground/engine.hpp"

using namespace wg;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

GenConfig small_gen(std::size_t train, std::size_t test) {
  GenConfig g;
  g.train_scenes = train;
  g.test_scenes = test;
  return g;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.text_layers = 1;
  cfg.fusion_layers = 1;
  cfg.batch_size = 4;
  cfg.negatives = 3;
  return cfg;
}

// Scenes with one object per category and exact appearance, so a hand-set
// model can read the category off each proposal.
GenConfig oracle_gen() {
  GenConfig g = small_gen(0, 20);
  g.min_instances = g.max_instances = 1;
  g.relational_queries = 0;
  g.unique_queries = 2;
  g.noise.appearance_std = 0;
  g.noise.box_jitter = 0;
  g.noise.false_positive_rate = 0;
  g.noise.drop_rate = 0;
  return g;
}

Model oracle_model(const DatasetMeta& meta) {
  ModelConfig cfg = default_model_config(meta);
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.text_layers = 0;
  cfg.fusion_layers = 0;
  Model model(cfg, 0);
  ParamStore& ps = model.params();
  for (ParamId id = 0; id < ps.count(); ++id) ps.value(id).fill(0.0);

  // vis.l1 fires only for the exact category prototype.
  const double gain = 10.0;
  Tensor& w1 = ps.value("vis.l1.w");
  Tensor& b1 = ps.value("vis.l1.b");
  for (std::size_t c = 0; c < meta.vocab.size(); ++c) {
    for (std::size_t k = 0; k < cfg.appearance_dim; ++k) w1.at(7 + k, c) = gain * meta.vocab.prototypes[c][k];
    b1[c] = -gain * 0.97;
  }
  Tensor& w2 = ps.value("vis.l2.w");
  for (std::size_t d = 0; d < cfg.embed_dim; ++d) w2.at(d, d) = 1.0;

  // Mean of a category name's word rows is the category's unit vector.
  Tensor& tok = ps.value("txt.tok");
  for (std::size_t c = 0; c < meta.vocab.size(); ++c) {
    const auto ids = model.token_ids(tokenize(meta.vocab.names[c]));
    if (ids.size() == 1) tok.at(ids[0], c) = 1.0;
  }
  for (std::size_t c = 0; c < meta.vocab.size(); ++c) {
    const auto ids = model.token_ids(tokenize(meta.vocab.names[c]));
    if (ids.size() != 2) continue;
    // The second word may name a category of its own ("end table").
    const bool shared = meta.vocab.find(cfg.token_vocab[ids[1]]).has_value();
    if (shared) {
      const std::size_t other = *meta.vocab.find(cfg.token_vocab[ids[1]]);
      tok.at(ids[0], c) = 2.0;
      tok.at(ids[0], other) = -1.0;
    } else {
      tok.at(ids[0], c) = 1.0;
      tok.at(ids[1], c) = 1.0;
    }
  }
  return model;
}

}  // namespace

TEST_CASE("decide examples") {
  // Category branch at proposal 2 beats the instance branch at proposal 5.
  std::vector<double> pc{0.1, 0.2, 0.8, 0.3, 0.0, 0.1}, pf{0.0, 0.1, 0.2, 0.3, 0.4, 0.6};
  Decision d = decide(pc, pf);
  CHECK(d.proposal == 2);
  CHECK(d.branch == Branch::category);

  pf[5] = 0.9;
  d = decide(pc, pf);
  CHECK(d.proposal == 5);
  CHECK(d.branch == Branch::instance);

  pf[5] = 0.8;
  CHECK(decide(pc, pf).branch == Branch::category);

  // Lowest index inside a branch.
  CHECK(decide({0.5, 0.9, 0.9}, {0.1, 0.2, 0.3}).proposal == 1);
  CHECK(decide({0.1, 0.2, 0.3}, {0.7, 0.7, 0.2}).proposal == 0);
  CHECK(decide({0.4, 0.6}, {}).branch == Branch::category);
  CHECK_THROWS_AS(decide({}, {}), ContractError);
  CHECK_THROWS_AS(decide({0.1, 0.2}, {0.1}), DimensionError);
}

TEST_CASE("decide is invariant to a shared positive scale") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> pc(5), pf(5);
    for (auto& v : pc) v = u(rng);
    for (auto& v : pf) v = u(rng);
    const Decision d = decide(pc, pf);
    for (double s : {0.25, 3.0}) {
      std::vector<double> a = pc, b = pf;
      for (auto& v : a) v *= s;
      for (auto& v : b) v *= s;
      const Decision e = decide(a, b);
      CHECK(e.proposal == d.proposal);
      CHECK(e.branch == d.branch);
    }
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = {};
  cfg.flags = {false, false, false, false};
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = {};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("training with zero learning rate leaves parameters unchanged") {
  const std::string path = "test_engine_lr0.jsonl";
  build_dataset(small_gen(6, 1), 1, path);
  const DatasetMeta meta = load_meta(path);
  const auto scenes = load_dataset(path, LoadMode::weak, "train");
  TrainConfig cfg = tiny_train(1);
  cfg.lr = 0.0;
  Model model(model_config_for(meta, cfg), cfg.seed);
  const std::string before = model.serialize();
  const TrainResult r = train(model, scenes, meta.vocab, cfg);
  CHECK(model.serialize() == before);
  CHECK(r.log.size() == 1);
  CHECK(r.counters.se > 0);
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("training is deterministic and blind to eval sections") {
  const std::string path = "test_engine_det.jsonl";
  build_dataset(small_gen(8, 2), 2, path);
  TrainConfig cfg = tiny_train(2);
  const Model a = train_from_file(path, cfg);
  const Model b = train_from_file(path, cfg);
  CHECK(a.serialize() == b.serialize());

  // Full-mode scenes carry targets and objects; the trainer must not care.
  const DatasetMeta meta = load_meta(path);
  Model c(model_config_for(meta, cfg), cfg.seed);
  train(c, load_dataset(path, LoadMode::full, "train"), meta.vocab, cfg);
  CHECK(c.params().checksum() == a.params().checksum());

  cfg.seed = 1;
  const Model d = train_from_file(path, cfg);
  CHECK(d.params().checksum() != a.params().checksum());
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("loss availability counters follow the ablation flags") {
  const std::string path = "test_engine_flags.jsonl";
  build_dataset(small_gen(6, 1), 3, path);
  const DatasetMeta meta = load_meta(path);
  const auto scenes = load_dataset(path, LoadMode::weak, "train");
  TrainConfig cfg = tiny_train(1);
  cfg.flags = {true, false, false, false};
  Model m(model_config_for(meta, cfg), 0);
  const TrainResult r = train(m, scenes, meta.vocab, cfg);
  CHECK(r.counters.se > 0);
  CHECK(r.counters.aux > 0);
  CHECK(r.counters.pn == 0);
  CHECK(r.counters.phr == 0);
  CHECK(r.counters.rel == 0);
  CHECK(r.log[0].pn == 0.0);

  cfg.flags = {false, false, false, true};
  Model m2(model_config_for(meta, cfg), 0);
  const TrainResult r2 = train(m2, scenes, meta.vocab, cfg);
  CHECK(r2.counters.se == 0);
  CHECK(r2.counters.rel > 0);
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("training loss decreases") {
  const std::string path = "test_engine_loss.jsonl";
  build_dataset(small_gen(40, 1), 4, path);
  TrainConfig cfg = tiny_train(15);
  cfg.embed_dim = 16;
  TrainResult r;
  train_from_file(path, cfg, &r);
  REQUIRE(r.log.size() == 15);
  CHECK(r.log.back().total < r.log.front().total);
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("training log csv") {
  const std::string path = "test_engine_log.csv";
  write_training_log(path, {{1, 0.5, 0.25, 0.125, 1.0, 0.0, 2.0}});
  const std::string text = slurp(path);
  CHECK(text.rfind("epoch,L_se,L_PN,L_phr,L_rel,total,aux\n", 0) == 0);
  CHECK(text.find("\n1,0.5,0.25,0.125,1,2,0\n") != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("oracle model reaches perfect accuracy") {
  const std::string path = "test_engine_oracle.jsonl";
  build_dataset(oracle_gen(), 5, path);
  const DatasetMeta meta = load_meta(path);
  const auto test = load_dataset(path, LoadMode::full, "test");
  Model model = oracle_model(meta);

  const EvalReport gt = evaluate(model, test, meta, EvalMode::gt_proposals);
  CHECK(gt.queries > 0);
  CHECK(gt.acc == 1.0);
  CHECK(gt.acc25 == 1.0);
  CHECK(gt.acc50 == 1.0);
  CHECK(gt.instance_branch == gt.queries);

  const EvalReport det = evaluate(model, test, meta, EvalMode::detector);
  CHECK(det.acc25 == 1.0);
  CHECK(det.acc50 == 1.0);

  // Re-aggregation from the records.
  const EvalReport again = aggregate(gt.mode, gt.records);
  CHECK(again.acc == gt.acc);
  CHECK(again.acc25 == gt.acc25);
  CHECK(again.category_branch + again.instance_branch == again.queries);
  CHECK(report_text(again) == report_text(gt));

  // Threaded evaluation gives identical records.
  const EvalReport threaded = evaluate(model, test, meta, EvalMode::gt_proposals, 3);
  CHECK(report_text(threaded) == report_text(gt));

  // Evaluation never touches parameters.
  const std::uint64_t sum = model.params().checksum();
  evaluate(model, test, meta, EvalMode::detector, 2);
  CHECK(model.params().checksum() == sum);

  CHECK_THROWS_AS(evaluate(model, load_dataset(path, LoadMode::weak, "test"), meta, EvalMode::gt_proposals),
                  DatasetError);
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("IoU threshold is strict") {
  std::vector<QueryRecordOut> recs(2);
  recs[0].iou = 0.25;
  recs[0].correct25 = recs[0].iou > 0.25;
  recs[1].iou = 0.2500001;
  recs[1].correct25 = recs[1].iou > 0.25;
  const EvalReport r = aggregate(EvalMode::detector, recs);
  CHECK(r.acc25 == 0.5);

  // Two unit cubes offset so their IoU is exactly 0.25 (overlap 0.4, union 1.6).
  const Box3 a{{0, 0, 0}, {1, 1, 1}}, b{{0.6, 0, 0}, {1, 1, 1}};
  CHECK(iou_3d(a, b) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("random model scores near chance on two-instance scenes") {
  const std::string path = "test_engine_chance.jsonl";
  GenConfig g = small_gen(0, 150);
  g.min_instances = g.max_instances = 2;
  build_dataset(g, 6, path);
  const DatasetMeta meta = load_meta(path);
  const auto test = load_dataset(path, LoadMode::full, "test");
  ModelConfig cfg = default_model_config(meta);
  cfg.embed_dim = 16;
  cfg.heads = 2;
  Model model(cfg, 99);
  const EvalReport r = evaluate(model, test, meta, EvalMode::gt_proposals);
  double chance = 0;
  for (const auto& s : test)
    for (std::size_t q = 0; q < s.queries.size(); ++q) chance += 1.0 / static_cast<double>(s.objects.size());
  chance /= static_cast<double>(r.queries);
  const double n = static_cast<double>(r.queries);
  const double half_width = 2.576 * std::sqrt(chance * (1 - chance) / n);
  CHECK(r.acc >= chance - half_width);
  CHECK(r.acc <= chance + half_width);
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("infer falls back to the category branch") {
  const CategoryVocab vocab = make_vocab(10, 2, 16, 0);
  DatasetMeta meta;
  meta.vocab = vocab;
  meta.room = {8, 8, 3};
  ModelConfig cfg = default_model_config(meta);
  cfg.embed_dim = 8;
  cfg.heads = 2;
  Model model(cfg, 1);
  std::vector<Proposal> props(3);
  for (std::size_t i = 0; i < 3; ++i) {
    props[i].box = {{1.0 + i, 2, 0.5}, {0.5, 0.5, 1}};
    props[i].appearance = vocab.prototypes[i];
  }
  const InferResult r = infer(model, props, "something unrelated", vocab);
  CHECK(r.p_f.empty());
  CHECK(r.p_c.size() == 3);
  CHECK(r.decision.branch == Branch::category);
  const InferResult ok = infer(model, props, "the chair", vocab);
  CHECK(ok.p_f.size() == 3);
  CHECK_THROWS_AS(infer(model, props, "   ", vocab), ParseError);
  CHECK_THROWS_AS(infer(model, {}, "the chair", vocab), ContractError);
}

TEST_CASE("report and csv outputs") {
  std::vector<QueryRecordOut> recs(1);
  recs[0].scene_id = "scene_00001";
  recs[0].query = "the chair, left";
  recs[0].branch = Branch::instance;
  recs[0].chosen = 3;
  recs[0].iou = 0.75;
  recs[0].correct25 = recs[0].correct50 = recs[0].correct = true;
  recs[0].max_pc = 0.1;
  recs[0].max_pf = 0.9;
  const EvalReport r = aggregate(EvalMode::detector, recs);
  const std::string path = "test_engine_records.csv";
  write_records_csv(path, r);
  CHECK(slurp(path) ==
        "scene_id,query,branch,chosen_proposal,iou,correct25,correct50,correct\n"
        "scene_00001,\"the chair, left\",instance,3,0.750000,1,1,1\n");
  std::remove(path.c_str());
  const std::string text = report_text(r);
  CHECK(text.find("acc@0.25: 1.0000") != std::string::npos);
  CHECK(text.find("branch.instance: 1") != std::string::npos);
}

TEST_CASE("category-only ceiling") {
  Scene s;
  for (int i = 0; i < 4; ++i) {
    SceneObject o;
    o.id = i;
    o.category = i < 3 ? 0 : 1;
    s.objects.push_back(o);
  }
  QueryRecord q1, q2;
  q1.eval_target = 0;
  q2.eval_target = 3;
  s.queries = {q1, q2};
  CHECK(category_only_ceiling({s}) == doctest::Approx((1.0 / 3 + 1.0) / 2));
}

TEST_CASE("ablation rows and csv") {
  const auto configs = ablation_configs();
  REQUIRE(configs.size() == 4);
  CHECK((configs[0].c1 && !configs[0].c2 && !configs[0].i1 && !configs[0].i2));
  CHECK((configs[3].c1 && configs[3].c2 && configs[3].i1 && configs[3].i2));

  const std::string path = "test_engine_ablate.jsonl";
  build_dataset(small_gen(6, 2), 7, path);
  const auto rows = ablate(path, tiny_train(1));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].counters.pn == 0);
  CHECK(rows[0].counters.phr == 0);
  CHECK(rows[0].counters.rel == 0);
  CHECK(rows[1].counters.pn > 0);
  CHECK(rows[1].counters.phr == 0);
  CHECK(rows[2].counters.phr > 0);
  CHECK(rows[2].counters.rel == 0);
  CHECK(rows[3].counters.rel > 0);
  const std::string csv = ablation_csv(rows);
  CHECK(csv.rfind("c1,c2,i1,i2,Acc@.25,Acc@.50,Acc\n1,0,0,0,", 0) == 0);
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  CHECK(lines == 5);
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}
