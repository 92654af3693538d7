#include "weakground/cli.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "CLI11.hpp"

namespace wg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(d)) throw UsageError(key + ": expected a number, got '" + v + "'");
  return d;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw UsageError(key + ": expected a boolean, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Key {
  const char* name;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

#define WG_SIZE(key, field) \
  Key{key, [](Settings& s, const std::string& v) { s.field = to_size(key, v); }, \
      [](const Settings& s) { return std::to_string(s.field); }}
#define WG_DOUBLE(key, field) \
  Key{key, [](Settings& s, const std::string& v) { s.field = to_double(key, v); }, \
      [](const Settings& s) { return fmt(s.field); }}
#define WG_BOOL(key, field) \
  Key{key, [](Settings& s, const std::string& v) { s.field = to_bool(key, v); }, \
      [](const Settings& s) { return std::string(s.field ? "1" : "0"); }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"seed", [](Settings& s, const std::string& v) { s.seed = to_u64("seed", v); },
          [](const Settings& s) { return std::to_string(s.seed); }},
      WG_SIZE("gen.train_scenes", gen.train_scenes),
      WG_SIZE("gen.test_scenes", gen.test_scenes),
      WG_SIZE("gen.categories", gen.categories),
      WG_SIZE("gen.confusable_pairs", gen.confusable_pairs),
      WG_SIZE("gen.appearance_dim", gen.appearance_dim),
      WG_SIZE("gen.min_objects", gen.min_objects),
      WG_SIZE("gen.max_objects", gen.max_objects),
      WG_SIZE("gen.min_instances", gen.min_instances),
      WG_SIZE("gen.max_instances", gen.max_instances),
      WG_SIZE("gen.relational_queries", gen.relational_queries),
      WG_SIZE("gen.unique_queries", gen.unique_queries),
      WG_DOUBLE("gen.room_x", gen.room.x),
      WG_DOUBLE("gen.room_y", gen.room.y),
      WG_DOUBLE("gen.room_z", gen.room.z),
      WG_DOUBLE("relation.margin", gen.relation.margin),
      WG_DOUBLE("relation.proximity", gen.relation.proximity),
      WG_DOUBLE("noise.box_jitter", gen.noise.box_jitter),
      WG_DOUBLE("noise.class_temperature", gen.noise.class_temperature),
      WG_DOUBLE("noise.class_noise", gen.noise.class_noise),
      WG_DOUBLE("noise.false_positive_rate", gen.noise.false_positive_rate),
      WG_DOUBLE("noise.drop_rate", gen.noise.drop_rate),
      WG_DOUBLE("noise.appearance_std", gen.noise.appearance_std),
      WG_DOUBLE("noise.confidence_threshold", gen.noise.confidence_threshold),
      WG_SIZE("noise.max_proposals", gen.noise.max_proposals),
      WG_SIZE("model.embed_dim", train.embed_dim),
      WG_SIZE("model.text_layers", train.text_layers),
      WG_SIZE("model.fusion_layers", train.fusion_layers),
      WG_SIZE("model.heads", train.heads),
      WG_SIZE("train.batch_size", train.batch_size),
      WG_SIZE("train.epochs", train.epochs),
      WG_DOUBLE("train.lr", train.lr),
      WG_DOUBLE("train.momentum", train.momentum),
      WG_DOUBLE("train.clip_norm", train.clip_norm),
      WG_SIZE("train.negatives", train.negatives),
      WG_BOOL("train.cross_fusion", train.cross_fusion),
      WG_DOUBLE("loss.lambda1", train.weights.lambda1),
      WG_DOUBLE("loss.lambda2", train.weights.lambda2),
      WG_DOUBLE("loss.lambda3", train.weights.lambda3),
      WG_DOUBLE("loss.lambda4", train.weights.lambda4),
      WG_DOUBLE("loss.tau", train.weights.tau),
      WG_DOUBLE("loss.tau_se", train.weights.tau_se),
      WG_DOUBLE("loss.aux_weight", train.weights.aux_weight),
      WG_BOOL("ablation.c1", train.flags.c1),
      WG_BOOL("ablation.c2", train.flags.c2),
      WG_BOOL("ablation.i1", train.flags.i1),
      WG_BOOL("ablation.i2", train.flags.i2),
      WG_DOUBLE("parse.target_keep_prob", train.parse.target_keep_prob),
  };
  return table;
}

#undef WG_SIZE
#undef WG_DOUBLE
#undef WG_BOOL

void apply(Settings& s, const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    const auto it = std::find_if(keys().begin(), keys().end(), [&](const Key& key) { return k == key.name; });
    if (it == keys().end()) throw UsageError("unknown config key '" + k + "'");
    it->set(s, v);
  }
}

// ---------------------------------------------------------------- commands

struct Common {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> set;
  std::optional<std::size_t> epochs, batch_size, embed_dim;
  std::optional<double> lr;
};

void add_common(CLI::App* app, Common& c, bool training) {
  app->add_option("--config", c.config, "flat key=value config file, or 'default'");
  app->add_option("--seed", c.seed, "random seed (default 0)");
  app->add_option("--out", c.out, "output path");
  app->add_option("--set", c.set, "override one config key, key=value")->take_all();
  if (training) {
    app->add_option("--epochs", c.epochs, "train.epochs");
    app->add_option("--batch-size", c.batch_size, "train.batch_size");
    app->add_option("--lr", c.lr, "train.lr");
    app->add_option("--embed-dim", c.embed_dim, "model.embed_dim");
  }
}

Settings settings_for(const Common& c) {
  KeyValues flags;
  for (const auto& item : c.set) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + item + "'");
    flags[trim(item.substr(0, eq))] = trim(item.substr(eq + 1));
  }
  if (c.seed) flags["seed"] = std::to_string(*c.seed);
  if (c.epochs) flags["train.epochs"] = std::to_string(*c.epochs);
  if (c.batch_size) flags["train.batch_size"] = std::to_string(*c.batch_size);
  if (c.embed_dim) flags["model.embed_dim"] = std::to_string(*c.embed_dim);
  if (c.lr) flags["train.lr"] = fmt(*c.lr);
  Settings s = resolve_settings(load_config_file(c.config), flags);
  s.train.seed = s.seed;
  return s;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

EvalMode parse_mode(const std::string& m) {
  if (m == "detector") return EvalMode::detector;
  if (m == "gt") return EvalMode::gt_proposals;
  throw UsageError("--mode must be 'detector' or 'gt', got '" + m + "'");
}

void print_epoch(std::ostream& out, const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "epoch %zu L_se %.6f L_PN %.6f L_phr %.6f L_rel %.6f total %.6f aux %.6f\n", e.epoch,
                e.se, e.pn, e.phr, e.rel, e.total, e.aux);
  out << buf << std::flush;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) rows.push_back(split_csv_line(line));
  return rows;
}

std::string digest(const std::string& text) {
  std::ostringstream out;
  char buf[256];
  const auto rows = csv_rows(text);
  if (rows.empty()) throw DatasetError("report: empty input");
  const auto& head = rows[0];

  if (!head.empty() && head[0] == "epoch") {
    out << "training log: " << rows.size() - 1 << " epochs\n";
    if (rows.size() < 2) return out.str();
    for (std::size_t c = 1; c < head.size(); ++c) {
      const double first = to_double(head[c], rows[1].at(c)), last = to_double(head[c], rows.back().at(c));
      double best = first;
      for (std::size_t r = 1; r < rows.size(); ++r) best = std::min(best, to_double(head[c], rows[r].at(c)));
      std::snprintf(buf, sizeof buf, "  %-6s first %.6f last %.6f min %.6f\n", head[c].c_str(), first, last, best);
      out << buf;
    }
    return out.str();
  }
  if (head.size() >= 8 && head[0] == "scene_id") {
    std::vector<QueryRecordOut> recs;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      QueryRecordOut q;
      q.scene_id = rows[r].at(0);
      q.branch = rows[r].at(2) == "instance" ? Branch::instance : Branch::category;
      q.iou = to_double("iou", rows[r].at(4));
      q.correct25 = rows[r].at(5) == "1";
      q.correct50 = rows[r].at(6) == "1";
      q.correct = rows[r].at(7) == "1";
      recs.push_back(q);
    }
    const EvalReport rep = aggregate(EvalMode::detector, recs);
    double mean_iou = 0;
    for (const auto& q : rep.records) mean_iou += q.iou;
    if (rep.queries) mean_iou /= static_cast<double>(rep.queries);
    std::snprintf(buf, sizeof buf,
                  "per-query records: %zu queries\n  acc@0.25 %.4f\n  acc@0.50 %.4f\n  acc %.4f\n  mean iou %.4f\n",
                  rep.queries, rep.acc25, rep.acc50, rep.acc, mean_iou);
    out << buf;
    out << "  branch category " << rep.category_branch << ", instance " << rep.instance_branch << "\n";
    return out.str();
  }
  if (head.size() == 7 && head[0] == "c1") {
    out << "ablation table: " << rows.size() - 1 << " rows\n";
    std::snprintf(buf, sizeof buf, "  %-14s %8s %8s %8s %8s\n", "components", "Acc@.25", "Acc@.50", "Acc", "dAcc");
    out << buf;
    const double base = rows.size() > 1 ? to_double("Acc", rows[1].at(6)) : 0.0;
    static const char* names[] = {"c1", "c2", "i1", "i2"};
    for (std::size_t r = 1; r < rows.size(); ++r) {
      std::string comps;
      for (std::size_t c = 0; c < 4; ++c)
        if (rows[r].at(c) == "1") comps += (comps.empty() ? "" : "+") + std::string(names[c]);
      const double acc = to_double("Acc", rows[r].at(6));
      std::snprintf(buf, sizeof buf, "  %-14s %8.4f %8.4f %8.4f %+8.4f\n", comps.c_str(),
                    to_double("Acc@.25", rows[r].at(4)), to_double("Acc@.50", rows[r].at(5)), acc, acc - base);
      out << buf;
    }
    return out.str();
  }
  if (text.rfind("mode:", 0) == 0) {
    out << "evaluation report\n";
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
      if (line.rfind("hist.", 0) != 0) out << "  " << line << "\n";
    return out.str();
  }
  throw DatasetError("report: unrecognized input format");
}

}  // namespace

KeyValues parse_config_text(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(n) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues load_config_file(const std::string& path) {
  if (path.empty() || path == "default") return {};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

Settings resolve_settings(const KeyValues& file, const KeyValues& flags) {
  Settings s;
  apply(s, file);
  apply(s, flags);
  s.train.seed = s.seed;
  return s;
}

std::string dump_settings(const Settings& s) {
  std::string out;
  for (const auto& k : keys()) out += std::string(k.name) + "=" + k.get(s) + "\n";
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"weakground: weakly supervised 3D grounding on synthetic scenes"};
  app.require_subcommand(1);
  Common c;
  std::string data, ckpt, mode = "detector", report, records, query, scene_id, in, log_path;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, c, false);

  CLI::App* train = app.add_subcommand("train", "train a model on the train split");
  add_common(train, c, true);
  train->add_option("--data", data, "dataset path");
  train->add_option("--log", log_path, "training log CSV (default <out>.log.csv)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, c, false);
  eval->add_option("--data", data, "dataset path");
  eval->add_option("--ckpt", ckpt, "checkpoint path");
  eval->add_option("--mode", mode, "detector or gt");
  eval->add_option("--report", report, "report file");
  eval->add_option("--records", records, "per-query CSV (default <report>.csv)");

  CLI::App* inf = app.add_subcommand("infer", "ground one query in one scene");
  add_common(inf, c, false);
  inf->add_option("--ckpt", ckpt, "checkpoint path");
  inf->add_option("--data", data, "dataset containing the scene");
  inf->add_option("--scene-id", scene_id, "scene id");
  inf->add_option("--query", query, "query text");
  inf->add_option("--mode", mode, "detector or gt proposals");

  CLI::App* prs = app.add_subcommand("parse", "parse a query");
  add_common(prs, c, false);
  prs->add_option("--query", query, "query text");
  prs->add_option("--data", data, "take the vocabulary from this dataset");

  CLI::App* abl = app.add_subcommand("ablate", "train and evaluate the four cumulative configurations");
  add_common(abl, c, true);
  abl->add_option("--data", data, "dataset path");

  CLI::App* rep = app.add_subcommand("report", "summarize a log, report or CSV");
  add_common(rep, c, false);
  rep->add_option("--in", in, "input file");

  std::vector<std::string> argv_store{"weakground"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    const Settings s = settings_for(c);
    if (gen->parsed()) {
      require(c.out, "--out");
      const DatasetSummary sum = build_dataset(s.gen, s.seed, c.out);
      out << "dataset: " << c.out << "\n"
          << "train_scenes: " << sum.train_scenes << "\n"
          << "test_scenes: " << sum.test_scenes << "\n"
          << "train_queries: " << sum.train_queries << "\n"
          << "test_queries: " << sum.test_queries << "\n"
          << "skipped_scenes: " << sum.skipped_scenes << "\n";
    } else if (train->parsed()) {
      require(data, "--data");
      require(c.out, "--out");
      TrainResult result;
      const Model model = train_from_file(data, s.train, &result, [&](const EpochLog& e) { print_epoch(out, e); });
      model.save(c.out);
      write_training_log(log_path.empty() ? c.out + ".log.csv" : log_path, result.log);
      const LossCounters& k = result.counters;
      out << "checkpoint: " << c.out << "\n"
          << "evaluated: L_se " << k.se << ", L_PN " << k.pn << ", L_phr " << k.phr << ", L_rel " << k.rel << ", aux "
          << k.aux << "\n"
          << "skipped_queries: " << k.skipped_queries << "\n"
          << "truncated_queries: " << k.truncated_queries << "\n";
    } else if (eval->parsed()) {
      require(data, "--data");
      require(ckpt, "--ckpt");
      const EvalReport r = evaluate_file(data, ckpt, parse_mode(mode), env_threads());
      out << report_text(r);
      const std::string report_path = !report.empty() ? report : c.out;
      if (!report_path.empty()) {
        write_report(report_path, r);
        write_records_csv(records.empty() ? report_path + ".csv" : records, r);
      } else if (!records.empty()) {
        write_records_csv(records, r);
      }
    } else if (inf->parsed()) {
      require(ckpt, "--ckpt");
      require(data, "--data");
      require(scene_id, "--scene-id");
      require(query, "--query");
      const EvalMode m = parse_mode(mode);
      const DatasetMeta meta = load_meta(data);
      const auto scenes = load_dataset(data, m == EvalMode::gt_proposals ? LoadMode::full : LoadMode::weak);
      const auto it = std::find_if(scenes.begin(), scenes.end(), [&](const Scene& sc) { return sc.id == scene_id; });
      if (it == scenes.end()) throw DatasetError("infer: no scene '" + scene_id + "' in '" + data + "'");
      const std::vector<Proposal> props = m == EvalMode::gt_proposals ? gt_proposals(*it, meta.vocab, meta.noise)
                                                                      : it->proposals;
      Model model = Model::load(ckpt);
      const InferResult r = infer(model, props, query, meta.vocab);
      const Box3& b = props[r.decision.proposal].box;
      char buf[256];
      std::snprintf(buf, sizeof buf, "proposal %zu branch %s box %.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n", r.decision.proposal,
                    branch_name(r.decision.branch), b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z);
      out << buf;
    } else if (prs->parsed()) {
      require(query, "--query");
      const CategoryVocab vocab = !data.empty() ? load_meta(data).vocab
                                                : make_vocab(s.gen.categories, s.gen.confusable_pairs,
                                                             s.gen.appearance_dim, s.seed);
      const ParsedQuery p = parse(query, vocab, s.train.parse);
      out << "tokens:";
      for (const auto& t : p.tokens) out << " " << t;
      out << "\n";
      for (std::size_t i = 0; i < p.noun_phrases.size(); ++i) {
        const NounPhrase& np = p.noun_phrases[i];
        out << "phrase " << i << ": " << np.surface << " [" << np.begin << "," << np.end << ")";
        if (np.category) out << " category=" << vocab.names[*np.category];
        out << (i == p.target ? " target" : "") << "\n";
      }
      const NounPhrase& t = p.target_phrase();
      out << "target: " << (t.category ? vocab.names[*t.category] : t.surface) << "\n";
      for (const auto& tr : p.relation_triples)
        out << "triple: (" << relation_name(tr.relation) << ", " << p.noun_phrases[tr.subject].surface << ", "
            << p.noun_phrases[tr.anchor].surface << ")\n";
      if (p.dropped_phrases) out << "dropped_phrases: " << p.dropped_phrases << "\n";
    } else if (abl->parsed()) {
      require(data, "--data");
      const auto rows = ablate(data, s.train, env_threads(), [&](const AblationRow& r) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "row c1=%d c2=%d i1=%d i2=%d Acc@.25 %.4f Acc@.50 %.4f Acc %.4f\n", r.flags.c1,
                      r.flags.c2, r.flags.i1, r.flags.i2, r.detector.acc25, r.detector.acc50, r.gt.acc);
        out << buf << std::flush;
      });
      const std::string csv = ablation_csv(rows);
      if (!c.out.empty()) {
        std::ofstream f(c.out, std::ios::binary | std::ios::trunc);
        if (!f) throw DatasetError("cannot write '" + c.out + "'");
        f << csv;
      }
      out << csv;
    } else if (rep->parsed()) {
      require(in, "--in");
      out << digest(read_file(in));
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace wg
