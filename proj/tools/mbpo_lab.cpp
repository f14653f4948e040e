// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

// mbpo_lab: command-line driver for the toy pipeline.
//
//   mbpo_lab gen-data | pretrain | sft | iig | mine | train | eval | verify | plot
//
// Exit status: 0 on success, 2 on usage errors and missing inputs, 1 on any
// other failure. Failures print one JSON object on stderr.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mbpo/lab.hpp"

namespace fs = std::filesystem;
using namespace mbpo;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

class MissingInput : public Error {
 public:
  MissingInput(const std::string& what, const std::string& path)
      : Error(what + " not found: " + path), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = "mbpo_out";
  std::optional<std::size_t> threads;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::string require_file(const std::string& what, const std::string& path) {
  if (!fs::is_regular_file(path)) throw MissingInput(what, path);
  return path;
}

struct Context {
  LabConfig cfg;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  fs::path out;

  fs::path at(const std::string& name) const { return out / name; }
  CorpusFiles data() const { return {out / "data"}; }
};

Context make_context(const Globals& g) {
  Context c;
  if (!g.config.empty()) c.cfg = load_lab_config(require_file("config", g.config));
  c.seed = c.cfg.train.seed;
  if (const char* env = std::getenv("MBPO_LAB_SEED"); env && *env) {
    try {
      c.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("MBPO_LAB_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  if (g.seed) c.seed = *g.seed;
  c.cfg.train.seed = c.seed;
  c.threads = g.threads.value_or(c.cfg.train.threads);
  if (c.threads == 0) c.threads = default_threads();
  c.cfg.train.threads = c.threads;
  c.out = g.out_dir;
  fs::create_directories(c.out);
  return c;
}

std::string pick(const std::string& given, const fs::path& fallback) { return given.empty() ? fallback.string() : given; }

// ---------------------------------------------------------------------------

void cmd_gen_data(const Context& c, const std::string& out) {
  const CorpusFiles files{pick(out, c.data().dir)};
  write_corpus(files, generate_corpus(c.cfg.data, c.seed));
  log_line("gen-data: wrote corpus to " + files.dir.string());
}

void cmd_pretrain(const Context& c, const std::string& data_dir, const std::string& out,
                  std::optional<std::size_t> steps) {
  const CorpusFiles files{pick(data_dir, c.data().dir)};
  const auto sft_records = read_instruct(require_file("dataset", files.sft().string()));
  const auto text = read_closed(require_file("dataset", files.text().string()));
  const Vocab vocab = Vocab::standard();
  Policy policy = initial_policy(c.cfg.model, c.seed);
  StageConfig stage = c.cfg.pretrain;
  if (steps) stage.steps = *steps;
  const auto corpus = pretrain_corpus(vocab, c.cfg.model, sft_records, text);
  const auto losses = pretrain_text(policy, corpus, supervised_config(stage, c.seed, kPretrainStage, c.threads));
  const std::string path = pick(out, c.at("pretrain.ckpt"));
  save_policy(path, policy, {{"stage", "pretrain"}, {"steps", stage.steps}, {"seed", c.seed}});
  write_text_file(c.at("pretrain_loss.csv"), losses_csv(losses));
  log_line("pretrain: " + std::to_string(stage.steps) + " steps, checkpoint " + path);
}

void cmd_sft(const Context& c, const std::string& data_dir, const std::string& init, const std::string& out,
             std::optional<std::size_t> steps) {
  const CorpusFiles files{pick(data_dir, c.data().dir)};
  const auto sft_records = read_instruct(require_file("dataset", files.sft().string()));
  const auto text = read_closed(require_file("dataset", files.text().string()));
  const auto sft_closed = read_closed(require_file("dataset", files.sft_closed().string()));
  const Vocab vocab = Vocab::standard();
  Policy policy = load_policy(require_file("checkpoint", pick(init, c.at("pretrain.ckpt"))));
  StageConfig stage = c.cfg.sft;
  if (steps) stage.steps = *steps;
  const auto corpus = sft_corpus(vocab, policy.config(), sft_records, text, sft_closed);
  const auto losses = sft(policy, corpus, supervised_config(stage, c.seed, kSftStage, c.threads));
  const std::string path = pick(out, c.at("sft.ckpt"));
  save_policy(path, policy, {{"stage", "sft"}, {"steps", stage.steps}, {"seed", c.seed}});
  write_text_file(c.at("sft_loss.csv"), losses_csv(losses));
  log_line("sft: " + std::to_string(stage.steps) + " steps, checkpoint " + path);
}

void cmd_iig(const Context& c, const std::string& checkpoint, const std::string& in, const std::string& out,
             const std::string& selected_out, std::optional<std::size_t> top_k) {
  const std::string scorer =
      !checkpoint.empty() ? checkpoint
                          : (!c.cfg.iig.scorer_checkpoint.empty() ? c.cfg.iig.scorer_checkpoint : c.at("sft.ckpt").string());
  const Policy policy = load_policy(require_file("checkpoint", scorer));
  const auto records = read_instruct(require_file("dataset", pick(in, c.data().offline_pool())));
  const std::size_t k = std::min(top_k.value_or(c.cfg.iig.top_k), records.size());
  const Selection sel = select_top_k(records, policy, Vocab::standard(), k, c.threads);
  write_jsonl(pick(out, c.at("iig.jsonl")), iig_rows(sel.scores));
  write_jsonl(pick(selected_out, c.at("selected.jsonl")), to_json_rows(sel.selected));
  log_line("iig: scored " + std::to_string(records.size()) + " records, selected " + std::to_string(k));
}

void cmd_mine(const Context& c, const std::string& checkpoint, const std::string& in, const std::string& out,
              std::optional<std::size_t> iters, std::optional<double> step255, std::optional<double> ball255,
              bool random_noise) {
  MineConfig m = c.cfg.mine;
  if (iters) m.attack.iterations = *iters;
  if (step255) m.attack.step = *step255 / 255.0;
  if (ball255) m.attack.ball = *ball255 / 255.0;
  m.random_noise = m.random_noise || random_noise;
  const Policy policy = load_policy(require_file("checkpoint", pick(checkpoint, c.at("sft.ckpt"))));
  const auto records = read_instruct(require_file("dataset", pick(in, c.at("selected.jsonl"))));
  const std::string out_path = pick(out, c.at("offline.jsonl"));
  const MiningResult res = build_offline(records, policy, Vocab::standard(), mining_options(m, c.threads),
                                         derive_seed(c.seed, {kMineStage}), [](const MiningSkip& s) {
                                           log_line("mine: skipped record " + std::to_string(s.id) + ": " + s.reason);
                                         });
  write_jsonl(out_path, to_json_rows(res.records));
  std::vector<nlohmann::json> skipped;
  for (const auto& s : res.skipped) skipped.push_back({{"id", s.id}, {"reason", s.reason}});
  write_jsonl((fs::path(out_path).parent_path() / "mine_skipped.jsonl").string(), skipped);
  log_line("mine: " + std::to_string(res.records.size()) + " pairs, " + std::to_string(res.skipped.size()) +
           " skipped" + (m.random_noise ? " (random-noise baseline)" : ""));
}

struct TrainArgs {
  std::string init, offline, online, eval, out, metrics;
  std::optional<std::size_t> steps;
  std::optional<double> offline_weight, online_weight;
};

void cmd_train(const Context& c, const TrainArgs& a) {
  TrainConfig tc = c.cfg.train;
  if (a.steps) tc.steps = *a.steps;
  if (a.offline_weight) tc.offline_weight = *a.offline_weight;
  if (a.online_weight) tc.online_weight = *a.online_weight;
  tc.validate();
  const bool want_offline = !(tc.offline_weight && *tc.offline_weight == 0.0);
  const bool want_online = !(tc.online_weight && *tc.online_weight == 0.0);
  const std::string offline_path = pick(a.offline, c.at("offline.jsonl"));
  const std::string online_path = pick(a.online, c.data().online());
  const std::string eval_path = pick(a.eval, c.data().eval_closed());
  const std::string init = require_file("checkpoint", pick(a.init, c.at("sft.ckpt")));
  std::vector<PreferenceRecord> offline;
  std::vector<ClosedRecord> online, eval;
  if (want_offline) offline = read_preferences(require_file("dataset", offline_path));
  if (want_online) online = read_closed(require_file("dataset", online_path));
  if (fs::is_regular_file(eval_path)) eval = read_closed(eval_path);

  Policy policy = load_policy(init);
  const Vocab vocab = Vocab::standard();
  const std::string metrics_path = pick(a.metrics, c.at("metrics.csv"));
  std::vector<MetricsRow> rows;
  TrainHooks hooks;
  hooks.failure_dump = c.at("failed_batch.json").string();
  const auto t0 = std::chrono::steady_clock::now();
  hooks.on_row = [&](const MetricsRow& r) {
    rows.push_back(r);
    if (r.step % 10 == 0 || !std::isnan(r.eval_acc)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log_line("train: step " + std::to_string(r.step) + " reward " + format_metric(r.reward_online) + " iig_w " +
               format_metric(r.iig_chosen) + " iig_l " + format_metric(r.iig_rejected) + " kl " +
               format_metric(r.kl) + " eval " + format_metric(r.eval_acc) + " t " + format_metric(secs) + "s");
    }
  };
  mbpo_train(policy, vocab, TrainData{offline, online, eval}, tc, hooks);
  write_text_file(metrics_path, metrics_csv(rows));
  const std::string out = pick(a.out, c.at("policy.ckpt"));
  save_policy(out, policy, {{"stage", "train"}, {"config", tc}});
  log_line("train: " + std::to_string(tc.steps) + " steps, metrics " + metrics_path + ", checkpoint " + out);
}

void cmd_eval(const Context& c, const std::string& checkpoint, const std::string& closed_path,
              const std::string& open_path, const std::string& out, const std::string& responses) {
  const Policy policy = load_policy(require_file("checkpoint", pick(checkpoint, c.at("policy.ckpt"))));
  const auto closed = read_closed(require_file("dataset", pick(closed_path, c.data().eval_closed())));
  std::vector<InstructRecord> open;
  const std::string op = pick(open_path, c.data().eval_open());
  if (fs::is_regular_file(op)) open = read_instruct(op);
  const EvalReport rep = evaluate(policy, Vocab::standard(), closed, open, c.threads);
  write_text_file(pick(out, c.at("eval.json")), to_json(rep).dump(2) + "\n");
  std::vector<nlohmann::json> rows;
  for (const auto& it : rep.items) rows.push_back(to_json(it));
  write_jsonl(pick(responses, c.at("eval_responses.jsonl")), rows);
  std::cout << to_json(rep).dump() << std::endl;
}

// A verify input line: {"response": "...", "record": {closed record}}. The
// record image is not needed and may be omitted.
ClosedRecord verify_record(const nlohmann::json& j) {
  ClosedRecord r;
  r.id = j.value("id", std::uint64_t{0});
  r.question = j.value("question", std::string());
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "mc" && kind != "yn") throw Error("verify: unknown record kind '" + kind + "'");
  r.kind = kind == "mc" ? ClosedKind::kMultipleChoice : ClosedKind::kYesNo;
  if (j.contains("options")) r.options = j.at("options").get<std::vector<std::string>>();
  r.answer = j.at("answer").get<std::string>();
  return r;
}

void cmd_verify(const Context& c, const std::string& in, const std::string& out) {
  std::vector<nlohmann::json> rows;
  for (const auto& line : read_jsonl(require_file("input", in))) {
    const ClosedRecord r = verify_record(line.at("record"));
    nlohmann::json v = to_json(reward(line.at("response").get<std::string>(), r));
    v["id"] = r.id;
    rows.push_back(std::move(v));
  }
  write_jsonl(pick(out, c.at("verdicts.jsonl")), rows);
  log_line("verify: " + std::to_string(rows.size()) + " verdicts");
}

void cmd_plot(const Context& c, const std::string& in, const std::string& out_dir) {
  const std::string path = require_file("metrics", pick(in, c.at("metrics.csv")));
  const auto rows = parse_metrics_csv(read_file(path));
  const fs::path dir = pick(out_dir, c.at("plots"));
  auto smoothed = [&](double MetricsRow::*f) {
    const auto col = column(rows, f);
    return smooth(col);
  };
  const std::vector<Series> reward = {{"online reward (smoothed)", smoothed(&MetricsRow::reward_online), "#1f77b4"}};
  const std::vector<Series> iig = {{"chosen (smoothed)", smoothed(&MetricsRow::iig_chosen), "#2ca02c"},
                                   {"rejected (smoothed)", smoothed(&MetricsRow::iig_rejected), "#d62728"}};
  const std::vector<Series> loss = {{"loss", column(rows, &MetricsRow::loss), "#7f7f7f"},
                                    {"kl", column(rows, &MetricsRow::kl), "#9467bd"}};
  const std::vector<Series> acc = {{"eval accuracy", column(rows, &MetricsRow::eval_acc), "#ff7f0e"}};
  write_text_file(dir / "reward.svg", line_chart_svg("Reward of the online closed-ended data", reward));
  write_text_file(dir / "iig.svg", line_chart_svg("IIG of chosen and rejected responses", iig));
  write_text_file(dir / "loss.svg", line_chart_svg("Loss and KL", loss));
  write_text_file(dir / "eval.svg", line_chart_svg("Held-out accuracy", acc));
  log_line("plot: wrote charts to " + dir.string());
}

std::string json_error(const std::string& kind, const std::string& message,
                       const std::optional<std::string>& path = std::nullopt) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (path) j["path"] = *path;
  return j.dump();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbpo_lab: toy multimodal preference optimization pipeline"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "run seed (falls back to MBPO_LAB_SEED, then the config)");
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--out-dir", g.out_dir, "directory for outputs")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (0 = hardware concurrency)");

  std::string data_dir, in, out, init, checkpoint, selected, responses, open_path;
  std::optional<std::size_t> steps, top_k, iters;
  std::optional<double> step255, ball255;
  bool random_noise = false;
  TrainArgs ta;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen->add_option("--out", out, "data directory (default <out-dir>/data)");

  auto* pre = app.add_subcommand("pretrain", "text-only pretraining under the blank image");
  pre->add_option("--data", data_dir, "data directory");
  pre->add_option("--out", out, "checkpoint to write");
  pre->add_option("--steps", steps, "optimizer steps");

  auto* sf = app.add_subcommand("sft", "supervised fine-tuning on image-grounded instructions");
  sf->add_option("--data", data_dir, "data directory");
  sf->add_option("--init", init, "starting checkpoint");
  sf->add_option("--out", out, "checkpoint to write");
  sf->add_option("--steps", steps, "optimizer steps");

  auto* ig = app.add_subcommand("iig", "score open records by image information gain and select the top k");
  ig->add_option("--checkpoint", checkpoint, "scoring policy");
  ig->add_option("--in", in, "open records (JSONL)");
  ig->add_option("--out", out, "scores (JSONL of id, iig)");
  ig->add_option("--selected", selected, "selected records (JSONL)");
  ig->add_option("--top-k", top_k, "number of records to keep");

  auto* mi = app.add_subcommand("mine", "mine rejected responses on adversarial images");
  mi->add_option("--checkpoint", checkpoint, "policy under attack");
  mi->add_option("--in", in, "selected open records (JSONL)");
  mi->add_option("--out", out, "preference records (JSONL)");
  mi->add_option("--iters", iters, "PGD iterations");
  mi->add_option("--step", step255, "PGD step size in units of 1/255");
  mi->add_option("--ball", ball255, "l-inf radius in units of 1/255");
  mi->add_flag("--offline-random-noise", random_noise, "clipped unit-Gaussian noise instead of PGD");

  auto* tr = app.add_subcommand("train", "hybrid offline/online policy optimization");
  tr->add_option("--init", ta.init, "starting checkpoint (also the reference policy)");
  tr->add_option("--offline", ta.offline, "preference records (JSONL)");
  tr->add_option("--online", ta.online, "closed-ended records (JSONL)");
  tr->add_option("--eval", ta.eval, "held-out closed-ended records (JSONL)");
  tr->add_option("--out", ta.out, "checkpoint to write");
  tr->add_option("--metrics", ta.metrics, "metrics CSV to write");
  tr->add_option("--steps", ta.steps, "training steps");
  tr->add_option("--offline-weight", ta.offline_weight, "offline sampling weight");
  tr->add_option("--online-weight", ta.online_weight, "online sampling weight");

  auto* ev = app.add_subcommand("eval", "greedy held-out evaluation");
  ev->add_option("--checkpoint", checkpoint, "policy to evaluate");
  ev->add_option("--closed", in, "closed-ended records (JSONL)");
  ev->add_option("--open", open_path, "open records for mean IIG (JSONL)");
  ev->add_option("--out", out, "report (JSON)");
  ev->add_option("--responses", responses, "per-record responses and verdicts (JSONL)");

  auto* ve = app.add_subcommand("verify", "score responses against closed-ended records");
  ve->add_option("--in", in, "JSONL of {response, record}")->required();
  ve->add_option("--out", out, "verdicts (JSONL)");

  auto* pl = app.add_subcommand("plot", "SVG charts from a metrics CSV");
  pl->add_option("--in", in, "metrics CSV");
  pl->add_option("--out", out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    std::cerr << json_error("usage", e.what()) << std::endl;
    return 2;
  }

  try {
    const Context c = make_context(g);
    if (app.got_subcommand(gen)) cmd_gen_data(c, out);
    else if (app.got_subcommand(pre)) cmd_pretrain(c, data_dir, out, steps);
    else if (app.got_subcommand(sf)) cmd_sft(c, data_dir, init, out, steps);
    else if (app.got_subcommand(ig)) cmd_iig(c, checkpoint, in, out, selected, top_k);
    else if (app.got_subcommand(mi)) cmd_mine(c, checkpoint, in, out, iters, step255, ball255, random_noise);
    else if (app.got_subcommand(tr)) cmd_train(c, ta);
    else if (app.got_subcommand(ev)) cmd_eval(c, checkpoint, in, open_path, out, responses);
    else if (app.got_subcommand(ve)) cmd_verify(c, in, out);
    else if (app.got_subcommand(pl)) cmd_plot(c, in, out);
  } catch (const MissingInput& e) {
    std::cerr << json_error("missing_input", e.what(), e.path()) << std::endl;
    return 2;
  } catch (const UsageError& e) {
    std::cerr << json_error("usage", e.what()) << std::endl;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << json_error("config", e.what()) << std::endl;
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << json_error("checkpoint", e.what()) << std::endl;
    return 1;
  } catch (const TrainingError& e) {
    std::cerr << json_error("training", e.what()) << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json_error("runtime", e.what()) << std::endl;
    return 1;
  }
  return 0;
}
