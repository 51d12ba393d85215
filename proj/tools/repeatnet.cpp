// repeatnet: session-based recommender with a repeat-explore mechanism.
// Subcommands: prepare, synth, stats, train, eval, recommend.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "rpn/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rpn;

namespace {

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

std::array<std::size_t, 3> parse_split(const std::string& text) {
  std::array<std::size_t, 3> out{};
  std::size_t part = 0, value = 0;
  bool any = false;
  for (char c : text) {
    if (c == ':') {
      if (part >= 2 || !any) throw UsageError("bad --split '" + text + "'");
      out[part++] = value;
      value = 0;
      any = false;
    } else if (c >= '0' && c <= '9') {
      value = value * 10 + static_cast<std::size_t>(c - '0');
      any = true;
    } else {
      throw UsageError("bad --split '" + text + "'");
    }
  }
  if (part != 2 || !any) throw UsageError("bad --split '" + text + "'");
  out[2] = value;
  return out;
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::size_t value = 0;
  bool any = false;
  for (char c : text) {
    if (c == ',') {
      if (!any) throw UsageError("bad --k '" + text + "'");
      ks.push_back(value);
      value = 0;
      any = false;
    } else if (c >= '0' && c <= '9') {
      value = value * 10 + static_cast<std::size_t>(c - '0');
      any = true;
    } else {
      throw UsageError("bad --k '" + text + "'");
    }
  }
  if (!any) throw UsageError("bad --k '" + text + "'");
  ks.push_back(value);
  for (std::size_t k : ks)
    if (k < 1) throw UsageError("--k entries must be >= 1");
  return ks;
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// resolved-config echo written next to every command's outputs
void write_config_echo(const fs::path& path,
                       const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

struct TrainCli {
  TrainConfig cfg;
  std::string ablation = "full";

  std::vector<std::pair<std::string, std::string>> echo() const {
    return {
        {"lr", fmt(cfg.lr)},
        {"beta1", fmt(cfg.beta1)},
        {"beta2", fmt(cfg.beta2)},
        {"epsilon", fmt(cfg.epsilon)},
        {"clip", fmt(cfg.clip)},
        {"batch-size", std::to_string(cfg.batch_size)},
        {"dropout", fmt(cfg.dropout)},
        {"dropout-emb", cfg.dropout_emb ? "true" : "false"},
        {"dropout-hybrid", cfg.dropout_hybrid ? "true" : "false"},
        {"lr-halve-every", std::to_string(cfg.lr_halve_every)},
        {"max-epochs", std::to_string(cfg.max_epochs)},
        {"joint-mode-loss", cfg.joint_mode_loss ? "true" : "false"},
        {"seed", std::to_string(cfg.seed)},
        {"ablation", ablation_name(cfg.ablation)},
        {"d-emb", std::to_string(cfg.d_emb)},
        {"d-hid", std::to_string(cfg.d_hid)},
        {"d-att", std::to_string(cfg.att_dim())},
    };
  }
};

void add_train_options(CLI::App* cmd, TrainCli& t, std::string& config_path) {
  cmd->add_option("--lr", t.cfg.lr, "learning rate");
  cmd->add_option("--beta1", t.cfg.beta1, "Adam beta1");
  cmd->add_option("--beta2", t.cfg.beta2, "Adam beta2");
  cmd->add_option("--epsilon", t.cfg.epsilon, "Adam epsilon");
  cmd->add_option("--clip", t.cfg.clip, "gradient clip bound");
  cmd->add_option("--batch-size", t.cfg.batch_size, "mini-batch size");
  cmd->add_option("--dropout", t.cfg.dropout, "dropout probability");
  cmd->add_option("--dropout-emb", t.cfg.dropout_emb,
                  "dropout on item embeddings");
  cmd->add_option("--dropout-hybrid", t.cfg.dropout_hybrid,
                  "dropout on the hybrid explore state");
  cmd->add_option("--lr-halve-every", t.cfg.lr_halve_every,
                  "halve the learning rate every N epochs");
  cmd->add_option("--max-epochs", t.cfg.max_epochs, "number of epochs");
  cmd->add_option("--joint-mode-loss", t.cfg.joint_mode_loss,
                  "train L_rec + L_mode jointly");
  cmd->add_option("--seed", t.cfg.seed, "run seed");
  cmd->add_option("--ablation", t.ablation,
                  "model variant: full, no-repeat, no-attention");
  cmd->add_option("--d-emb", t.cfg.d_emb, "item embedding size");
  cmd->add_option("--d-hid", t.cfg.d_hid, "GRU hidden size");
  cmd->add_option("--d-att", t.cfg.d_att, "attention size (0: same as d-hid)");
  cmd->add_option("--config", config_path,
                  "key=value config file (flags win)");
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config: bad boolean for " + key + ": '" + v + "'");
}

// applies key=value pairs for options not already given on the command line
void apply_config_file(const std::string& path, const CLI::App* cmd,
                       TrainCli& t) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config " + path + ":" + std::to_string(lineno) +
                       ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (cmd->count("--" + key) > 0) continue;  // explicit flag wins
    try {
      if (key == "lr") t.cfg.lr = std::stod(value);
      else if (key == "beta1") t.cfg.beta1 = std::stod(value);
      else if (key == "beta2") t.cfg.beta2 = std::stod(value);
      else if (key == "epsilon") t.cfg.epsilon = std::stod(value);
      else if (key == "clip") t.cfg.clip = std::stod(value);
      else if (key == "batch-size") t.cfg.batch_size = std::stoul(value);
      else if (key == "dropout") t.cfg.dropout = std::stod(value);
      else if (key == "dropout-emb") t.cfg.dropout_emb = parse_bool(value, key);
      else if (key == "dropout-hybrid")
        t.cfg.dropout_hybrid = parse_bool(value, key);
      else if (key == "lr-halve-every")
        t.cfg.lr_halve_every = std::stoul(value);
      else if (key == "max-epochs") t.cfg.max_epochs = std::stoul(value);
      else if (key == "joint-mode-loss")
        t.cfg.joint_mode_loss = parse_bool(value, key);
      else if (key == "seed") t.cfg.seed = std::stoull(value);
      else if (key == "ablation") t.ablation = value;
      else if (key == "d-emb") t.cfg.d_emb = std::stoul(value);
      else if (key == "d-hid") t.cfg.d_hid = std::stoul(value);
      else if (key == "d-att") t.cfg.d_att = std::stoul(value);
      else
        throw UsageError("config " + path + ":" + std::to_string(lineno) +
                         ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw UsageError("config " + path + ":" + std::to_string(lineno) +
                       ": bad value for " + key);
    }
  }
}

void print_split_stats(const DatasetSplit& split, std::ostream& os) {
  auto block = [&](const char* name, const std::vector<Session>& sessions) {
    std::size_t clicks = 0;
    for (const auto& s : sessions) clicks += s.items.size();
    os << name << ": sessions=" << sessions.size();
    if (!sessions.empty()) {
      auto examples = unroll(sessions);
      os << " examples=" << examples.size() << " clicks=" << clicks
         << " repeat_ratio=" << fmt(repeat_ratio(examples));
    } else {
      os << " examples=0 clicks=0 repeat_ratio=n/a";
    }
    os << '\n';
  };
  os << "items: " << split.vocab.size() << '\n';
  block("train", split.train);
  block("validation", split.validation);
  block("test", split.test);
}

const std::vector<Session>& pick_split(const DatasetSplit& data,
                                       const std::string& name) {
  if (name == "train") return data.train;
  if (name == "validation" || name == "val") return data.validation;
  if (name == "test") return data.test;
  throw UsageError("unknown --split '" + name + "'");
}

Ablation parse_ablation(const std::string& name) {
  auto a = ablation_from_name(name);
  if (!a) throw UsageError("unknown --ablation '" + name + "'");
  return *a;
}

// ---- commands ----

int cmd_prepare(const std::string& input, const std::string& output,
                std::size_t min_item_count, std::size_t min_session_len,
                std::size_t max_session_len, const std::string& split_text,
                const std::string& split_by, std::uint64_t seed) {
  IngestOptions opts;
  opts.min_item_count = min_item_count;
  opts.min_session_len = min_session_len;
  if (max_session_len > 0) opts.max_session_len = max_session_len;

  auto ratios = parse_split(split_text);
  SplitMode mode;
  if (split_by == "chrono") mode = SplitMode::chronological;
  else if (split_by == "random") mode = SplitMode::random;
  else throw UsageError("unknown --split-by '" + split_by + "'");

  IngestResult ingested = ingest(input, opts);
  DatasetSplit split = split_sessions(std::move(ingested.sessions),
                                      std::move(ingested.vocab), ratios, mode,
                                      seed);
  save_dataset(output, split);
  write_config_echo(output + ".cfg",
                    {{"command", "prepare"},
                     {"input", input},
                     {"output", output},
                     {"min-item-count", std::to_string(min_item_count)},
                     {"min-session-len", std::to_string(min_session_len)},
                     {"max-session-len", std::to_string(max_session_len)},
                     {"split", split_text},
                     {"split-by", split_by},
                     {"seed", std::to_string(seed)}});
  std::cout << "wrote " << output << '\n';
  print_split_stats(split, std::cout);
  return 0;
}

int cmd_synth(std::size_t items, std::size_t sessions, std::size_t len_min,
              std::size_t len_max, double repeat_prob, double zipf,
              std::uint64_t seed, const std::string& output) {
  SynthOptions opts;
  opts.num_items = items;
  opts.num_sessions = sessions;
  opts.len_min = len_min;
  opts.len_max = len_max;
  opts.repeat_prob = repeat_prob;
  opts.zipf_exponent = zipf;
  opts.seed = seed;
  auto synthetic = synthesize(opts);
  std::vector<std::string> ids;
  ids.reserve(items);
  for (std::size_t i = 0; i < items; ++i) ids.push_back(synth_item_id(i));
  write_sessions_csv(output, synthetic, ids);
  write_config_echo(output + ".cfg",
                    {{"command", "synth"},
                     {"items", std::to_string(items)},
                     {"sessions", std::to_string(sessions)},
                     {"len-min", std::to_string(len_min)},
                     {"len-max", std::to_string(len_max)},
                     {"repeat-prob", fmt(repeat_prob)},
                     {"zipf", fmt(zipf)},
                     {"seed", std::to_string(seed)},
                     {"output", output}});
  std::cout << "wrote " << output << " (" << synthetic.size()
            << " sessions, repeat_ratio="
            << fmt(repeat_ratio(unroll(synthetic))) << ")\n";
  return 0;
}

int cmd_stats(const std::string& data_path) {
  DatasetSplit split = load_dataset(data_path);
  std::cout << "dataset: " << data_path << '\n';
  print_split_stats(split, std::cout);
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& out_dir,
              TrainCli& t) {
  t.cfg.ablation = parse_ablation(t.ablation);
  t.cfg.validate();
  DatasetSplit data = load_dataset(data_path);

  fs::create_directories(out_dir);
  auto echo = t.echo();
  echo.insert(echo.begin(), {"command", "train"});
  echo.emplace_back("data", data_path);
  write_config_echo(fs::path(out_dir) / "run.cfg", echo);

  TrainResult result = train(data, t.cfg);

  std::ofstream log(fs::path(out_dir) / "train_log.jsonl", std::ios::binary);
  for (const auto& rec : result.log) {
    json j;
    j["epoch"] = rec.epoch;
    j["lr"] = rec.lr;
    j["train_loss"] = rec.train_loss;
    j["val_mrr20"] = rec.val_mrr20;
    j["val_recall20"] = rec.val_recall20;
    log << j.dump() << '\n';
    std::cout << "epoch " << rec.epoch << ": lr=" << fmt(rec.lr)
              << " train_loss=" << fmt(rec.train_loss)
              << " val_mrr20=" << fmt(rec.val_mrr20)
              << " val_recall20=" << fmt(rec.val_recall20) << '\n';
  }

  CheckpointMeta meta;
  meta.vocab = data.vocab.size();
  meta.d_emb = t.cfg.d_emb;
  meta.d_hid = t.cfg.d_hid;
  meta.d_att = t.cfg.att_dim();
  meta.ablation = t.cfg.ablation;
  meta.joint_mode_loss = t.cfg.joint_mode_loss;
  meta.seed = t.cfg.seed;
  meta.vocab_hash = data.vocab.hash();
  const fs::path ckpt = fs::path(out_dir) / "best.ckpt";
  save_checkpoint(ckpt.string(), result.best, meta);
  std::cout << "best epoch " << result.best_epoch << ", checkpoint "
            << ckpt.string() << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             const std::string& split_name, const std::string& k_text,
             const std::string& breakdown, const std::string& ablation_text,
             const std::string& baseline, const std::string& out_dir) {
  DatasetSplit data = load_dataset(data_path);
  const auto& sessions = pick_split(data, split_name);
  auto examples = unroll(sessions);
  auto ks = parse_ks(k_text);
  if (!breakdown.empty() && breakdown != "repeat")
    throw UsageError("unknown --breakdown '" + breakdown + "'");
  const bool want_breakdown = breakdown == "repeat";

  std::string model_label;
  std::string ablation_label = "n/a";
  MetricReport report;
  if (!baseline.empty()) {
    if (baseline == "pop") {
      PopRanker ranker(data.vocab);
      report = evaluate(ranker, examples, ks, want_breakdown);
    } else if (baseline == "spop") {
      SpopRanker ranker(data.vocab);
      report = evaluate(ranker, examples, ks, want_breakdown);
    } else {
      throw UsageError("unknown --baseline '" + baseline + "'");
    }
    model_label = baseline;
  } else {
    if (checkpoint.empty())
      throw UsageError("--checkpoint or --baseline is required");
    Checkpoint ckpt = load_checkpoint(checkpoint, data.vocab.size());
    if (ckpt.meta.vocab_hash != data.vocab.hash())
      throw DataError("checkpoint vocabulary hash does not match " +
                      data_path);
    Ablation ablation = ablation_text.empty()
                            ? ckpt.meta.ablation
                            : parse_ablation(ablation_text);
    ablation_label = ablation_name(ablation);
    ScoreRanker ranker([&](const PrefixExample& ex) {
      return predict(ckpt.params, ex.prefix, ablation).final_dist;
    });
    report = evaluate(ranker, examples, ks, want_breakdown);
    model_label = "checkpoint";
  }

  std::cout << "model=" << model_label << " ablation=" << ablation_label
            << '\n';
  const std::string text = format_report(report, split_name);
  std::cout << text;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream txt(fs::path(out_dir) / "report.txt", std::ios::binary);
    txt << "model=" << model_label << " ablation=" << ablation_label << '\n'
        << text;
    std::ofstream jl(fs::path(out_dir) / "report.jsonl", std::ios::binary);
    auto emit = [&](std::size_t k, const char* segment,
                    const SegmentMetrics& m) {
      json j;
      j["split"] = split_name;
      j["k"] = k;
      j["segment"] = segment;
      j["mrr"] = m.mrr;
      j["recall"] = m.recall;
      j["count"] = m.count;
      j["model"] = model_label;
      j["ablation"] = ablation_label;
      jl << j.dump() << '\n';
    };
    for (std::size_t k : report.ks) {
      emit(k, "overall", report.overall(k));
      if (want_breakdown) {
        emit(k, "repeat", report.repeat(k));
        emit(k, "non_repeat", report.non_repeat(k));
      }
    }
    write_config_echo(fs::path(out_dir) / "run.cfg",
                      {{"command", "eval"},
                       {"checkpoint", checkpoint},
                       {"data", data_path},
                       {"split", split_name},
                       {"k", k_text},
                       {"breakdown", breakdown},
                       {"ablation", ablation_label},
                       {"baseline", baseline}});
  }
  return 0;
}

int cmd_recommend(const std::string& checkpoint, const std::string& data_path,
                  const std::string& session_text, std::size_t top_k) {
  DatasetSplit data = load_dataset(data_path);
  Checkpoint ckpt = load_checkpoint(checkpoint, data.vocab.size());
  if (ckpt.meta.vocab_hash != data.vocab.hash())
    throw DataError("checkpoint vocabulary hash does not match " + data_path);

  auto raw = split_commas(session_text);
  std::vector<std::string> dropped;
  auto prefix = map_items(data.vocab, raw, &dropped);
  for (const auto& id : dropped)
    std::cerr << "warning: unknown item '" << id << "' dropped\n";
  if (prefix.empty()) throw UsageError("session has no known items");

  Prediction pred = predict(ckpt.params, prefix, ckpt.meta.ablation);
  std::cout << "p_repeat=" << fmt(pred.p_repeat)
            << " p_explore=" << fmt(pred.p_explore) << '\n';

  RankedList ranked = rank(pred.final_dist, top_k);
  for (std::size_t pos = 0; pos < ranked.items.size(); ++pos) {
    const std::size_t item = ranked.items[pos];
    const bool in_session =
        std::find(prefix.begin(), prefix.end(), item) != prefix.end();
    std::cout << pos + 1 << ". " << data.vocab.id_of[item] << ' '
              << fmt(pred.final_dist[item]) << ' '
              << (in_session ? "repeat" : "explore") << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RepeatNet session-based recommender"};
  app.require_subcommand(1);

  // prepare
  std::string in_csv, out_data, split_text = "8:1:1", split_by = "chrono";
  std::size_t min_item_count = 5, min_session_len = 2, max_session_len = 0;
  std::uint64_t prep_seed = 1;
  auto* prepare = app.add_subcommand("prepare", "filter, index, and split a CSV");
  prepare->add_option("--input", in_csv, "input CSV")->required();
  prepare->add_option("--output", out_data, "output dataset file")->required();
  prepare->add_option("--min-item-count", min_item_count,
                      "drop items seen fewer times");
  prepare->add_option("--min-session-len", min_session_len,
                      "drop shorter sessions");
  prepare->add_option("--max-session-len", max_session_len,
                      "drop longer sessions (0: no limit)");
  prepare->add_option("--split", split_text, "train:val:test ratio");
  prepare->add_option("--split-by", split_by, "chrono or random");
  prepare->add_option("--seed", prep_seed, "seed for --split-by random");

  // synth
  std::size_t items = 50, sessions = 1000, len_min = 3, len_max = 10;
  double repeat_prob = 0.5, zipf = 1.0;
  std::uint64_t synth_seed = 42;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic session CSV");
  synth->add_option("--items", items, "vocabulary size");
  synth->add_option("--sessions", sessions, "number of sessions");
  synth->add_option("--len-min", len_min, "minimum session length");
  synth->add_option("--len-max", len_max, "maximum session length");
  synth->add_option("--repeat-prob", repeat_prob,
                    "probability of repeating a prefix item");
  synth->add_option("--zipf", zipf, "popularity exponent");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--output", synth_out, "output CSV")->required();

  // stats
  std::string stats_data;
  auto* stats = app.add_subcommand("stats", "print dataset statistics");
  stats->add_option("--data", stats_data, "prepared dataset")->required();

  // train
  std::string train_data, train_out, train_config;
  TrainCli train_cli;
  auto* train_cmd = app.add_subcommand("train", "train RepeatNet");
  train_cmd->add_option("--data", train_data, "prepared dataset")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  add_train_options(train_cmd, train_cli, train_config);

  // eval
  std::string eval_ckpt, eval_data, eval_split = "test", k_text = "10,20";
  std::string breakdown, eval_ablation, baseline, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or baseline");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained checkpoint");
  eval_cmd->add_option("--data", eval_data, "prepared dataset")->required();
  eval_cmd->add_option("--split", eval_split, "train, validation, or test");
  eval_cmd->add_option("--k", k_text, "cutoffs, e.g. 10,20");
  eval_cmd->add_option("--breakdown", breakdown, "'repeat' for segment reports");
  eval_cmd->add_option("--ablation", eval_ablation,
                       "override the checkpoint's forward variant");
  eval_cmd->add_option("--baseline", baseline, "evaluate 'pop' or 'spop'");
  eval_cmd->add_option("--out", eval_out, "report directory");

  // recommend
  std::string rec_ckpt, rec_data, rec_session;
  std::size_t rec_top = 10;
  auto* rec = app.add_subcommand("recommend", "rank items for one session");
  rec->add_option("--checkpoint", rec_ckpt, "trained checkpoint")->required();
  rec->add_option("--data", rec_data, "prepared dataset")->required();
  rec->add_option("--session", rec_session, "comma-separated item ids")
      ->required();
  rec->add_option("--top", rec_top, "list length");

  try {
    app.parse(argc, argv);
    if (prepare->parsed())
      return cmd_prepare(in_csv, out_data, min_item_count, min_session_len,
                         max_session_len, split_text, split_by, prep_seed);
    if (synth->parsed())
      return cmd_synth(items, sessions, len_min, len_max, repeat_prob, zipf,
                       synth_seed, synth_out);
    if (stats->parsed()) return cmd_stats(stats_data);
    if (train_cmd->parsed()) {
      if (!train_config.empty())
        apply_config_file(train_config, train_cmd, train_cli);
      return cmd_train(train_data, train_out, train_cli);
    }
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_split, k_text, breakdown,
                      eval_ablation, baseline, eval_out);
    if (rec->parsed())
      return cmd_recommend(rec_ckpt, rec_data, rec_session, rec_top);
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
