// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

// mbpo_acceptance: checks the acceptance criteria of the toy pipeline and
// prints one PASS/FAIL line per criterion.
//
//   mbpo_acceptance [--only 1,2,...] [--cache DIR] [--lab PATH] [--threads N]
//
// Criteria 5, 6, 8 and 9 need a post-SFT policy and mined records. They are
// built once with the default configuration and cached under --cache.
// Exit status is 0 iff every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mbpo/lab.hpp"
#include "support/fixture.hpp"
#include "support/loss_fixtures.hpp"
#include "support/oracles.hpp"
#include "support/primitive_cases.hpp"

namespace fs = std::filesystem;
using namespace mbpo;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

// ---------------------------------------------------------------------------

Outcome autodiff() {
  Outcome o;
  const auto t0 = clk::now();
  const auto& cases = testing::primitive_cases();
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const double e = testing::primitive_worst_error(i, derive_seed(101, {i}), 100);
    if (!(e <= worst)) {
      worst = e;
      worst_name = cases[i].first;
    }
  }
  o.require(worst < 1e-4, std::to_string(cases.size()) + " primitives x 100 trials, worst " + fmt(worst) + " (" +
                              worst_name + ")");
  double loss_worst = 0.0;
  for (std::uint64_t t = 0; t < 100; ++t) loss_worst = std::max(loss_worst, testing::loss_gradient_trial(derive_seed(102, {t})));
  o.require(loss_worst < 1e-4, "mbpo_loss x 100 trials, worst " + fmt(loss_worst));
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "suite " + fmt(secs) + " s");
  return o;
}

Outcome advantages() {
  Outcome o;
  auto adv = [](std::vector<double> r) { return group_advantages(r); };
  o.require(adv({2, 0}) == std::vector<double>{1, -1}, "{2,0} -> {+1,-1}");
  o.require(adv({2, 2, 0, 0}) == std::vector<double>{1, 1, -1, -1}, "{2,2,0,0} -> {1,1,-1,-1}");
  bool zeros = true;
  for (std::size_t n = 2; n <= 16; ++n) {
    for (double v : {0.0, 2.0, -3.5}) {
      for (double a : adv(std::vector<double>(n, v))) zeros = zeros && a == 0.0;
    }
  }
  o.require(zeros, "degenerate groups all zero");
  Rng rng(103);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> r(2 + rng.below(15)), scaled;
    for (auto& v : r) v = rng.uniform(-5, 5);
    const double c = rng.uniform(0.01, 100);
    for (double v : r) scaled.push_back(c * v);
    const auto a = adv(r), b = adv(scaled);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  bool exact = true;
  for (double c : {0.25, 0.5, 2.0, 8.0}) {
    const std::vector<double> r = {2, 0, 0, 2, 2, 0, 2}, scaled = {2 * c, 0, 0, 2 * c, 2 * c, 0, 2 * c};
    exact = exact && adv(r) == adv(scaled);
  }
  o.require(exact, "invariant bit-exactly under power-of-two scaling");
  o.require(worst <= 1e-12, "invariant under random scaling, worst " + fmt(worst));
  return o;
}

Outcome kl() {
  Outcome o;
  Rng rng(104);
  std::vector<double> ref(100000), cur(100000);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref[i] = -rng.uniform(0, 20);
    cur[i] = -rng.uniform(0, 20);
  }
  const auto same = kl_k3(ref, ref);
  o.require(std::all_of(same.begin(), same.end(), [](double v) { return v == 0.0; }), "zero at identical policies");
  const auto k = kl_k3(ref, cur);
  o.require(std::all_of(k.begin(), k.end(), [](double v) { return v >= 0.0; }), "non-negative on 1e5 pairs");
  const double r2 = kl_k3(std::vector<double>{std::log(0.5)}, std::vector<double>{std::log(0.25)})[0];
  const double expected = 2.0 - std::log(2.0) - 1.0;
  o.require(std::abs(r2 - expected) <= 1e-12, "r=2 gives " + fmt(r2) + ", error " + fmt(std::abs(r2 - expected)));
  return o;
}

Outcome anchor() {
  Outcome o;
  Policy p(ModelConfig{}, 105);
  const std::size_t b = TrainConfig{}.batch_size;
  for (auto [off, on] : {std::pair<std::size_t, std::size_t>{b, 0}, {0, b}, {b / 2, b / 2}}) {
    const LossBreakdown lb = mbpo_loss(testing::mixed_batch(p, p, p, off, on, 106), p, {});
    o.require(std::abs(lb.total) <= 1e-9 && lb.n_offline == off && lb.n_online == on,
              "(" + std::to_string(off) + "," + std::to_string(on) + ") loss " + fmt(lb.total));
  }
  return o;
}

Outcome budget(testing::Fixture& fx) {
  Outcome o;
  const auto& cfg = fx.config().mine.attack;
  const auto& mined = fx.mined();
  std::size_t ok = 0;
  double worst = 0.0;
  for (const auto& r : mined) {
    double d = 0.0;
    bool in_range = true;
    for (std::size_t i = 0; i < r.adv_image.size(); ++i) {
      d = std::max(d, std::abs(r.adv_image[i] - r.source.image[i]));
      in_range = in_range && r.adv_image[i] >= 0.0 && r.adv_image[i] <= 1.0;
    }
    worst = std::max(worst, d);
    ok += (d <= cfg.ball && in_range);
  }
  o.require(!mined.empty() && ok == mined.size(), std::to_string(ok) + "/" + std::to_string(mined.size()) +
                                                      " mined images in budget, max distance " + fmt(worst) +
                                                      " (eps " + fmt(cfg.ball) + ")");
  const Policy& p = fx.sft_policy();
  bool identity = true;
  double fgsm = 0.0;
  const auto records = std::span(fx.corpus().offline_pool).first(100);
  for (const auto& r : records) {
    const Prompt prompt = make_prompt(fx.vocab(), r.question, r.image);
    const Response chosen = make_response(fx.vocab(), r.chosen);
    AttackConfig c = cfg;
    c.iterations = 0;
    identity = identity && pgd_attack(p, prompt, chosen, c).values() == r.image.values();
    c.iterations = 1;
    const Image adv = pgd_attack(p, prompt, chosen, c);
    const Image expected = testing::oracle_fgsm(r.image, image_gradient(p, prompt, chosen), c.step);
    fgsm = std::max(fgsm, linf_distance(adv, expected));
  }
  o.require(identity, "T=0 identity (bit-exact, 100 records)");
  o.require(fgsm <= 1e-12, "T=1 matches FGSM oracle, worst " + fmt(fgsm));
  return o;
}

Outcome effectiveness(testing::Fixture& fx) {
  Outcome o;
  const Policy& p = fx.sft_policy();
  const auto& mined = fx.mined();
  std::vector<int> lowered(mined.size());
  std::vector<double> iig_w(mined.size()), iig_l(mined.size());
  parallel_for(mined.size(), fx.threads(), [&](std::size_t i) {
    const auto& r = mined[i];
    const Prompt clean = make_prompt(fx.vocab(), r.source.question, r.source.image);
    const Prompt adv{clean.question, r.adv_image};
    const std::size_t max_len = p.config().max_response_len;
    const Response w = make_response(fx.vocab(), r.source.chosen, max_len);
    const Response l = make_response(fx.vocab(), r.rejected, max_len);
    lowered[i] = log_prob(p, adv, w).total < log_prob(p, clean, w).total;
    iig_w[i] = iig(p, clean, w);
    iig_l[i] = iig(p, clean, l);
  });
  const double n = static_cast<double>(mined.size());
  const double frac = std::accumulate(lowered.begin(), lowered.end(), 0.0) / n;
  const double mw = std::accumulate(iig_w.begin(), iig_w.end(), 0.0) / n;
  const double ml = std::accumulate(iig_l.begin(), iig_l.end(), 0.0) / n;
  o.require(mined.size() >= 200, std::to_string(mined.size()) + " mined records");
  o.require(frac >= 0.95, "log p(chosen) lowered by the attack in " + fmt(100 * frac) + "%");
  o.require(ml < mw, "mean IIG rejected " + fmt(ml) + " < chosen " + fmt(mw));
  return o;
}

Outcome iig_identities(testing::Fixture& fx) {
  Outcome o;
  const Policy& p = fx.sft_policy();
  const auto records = std::span(fx.corpus().eval_open).first(50);
  bool blank_zero = true;
  double worst = 0.0;
  for (const auto& r : records) {
    const Response w = make_response(fx.vocab(), r.chosen);
    blank_zero = blank_zero && iig(p, make_prompt(fx.vocab(), r.question, blank_image(p.config())), w) == 0.0;
    const Prompt prompt = make_prompt(fx.vocab(), r.question, r.image);
    worst = std::max(worst, std::abs(iig(p, prompt, w) - testing::oracle_iig(p, prompt, w)));
  }
  o.require(blank_zero, "IIG == 0 on the blank image (50 records)");
  o.require(worst <= 1e-9, "full-softmax oracle, worst " + fmt(worst));
  return o;
}

double chance_reward(std::span<const ClosedRecord> records) {
  double s = 0.0;
  for (const auto& r : records) s += r.kind == ClosedKind::kYesNo ? 0.5 : 0.25;
  return 2.0 * s / static_cast<double>(records.size());
}

// Groups per step for the online-only run.
constexpr std::size_t kOnlineBatch = 64;

Outcome online_dynamics(testing::Fixture& fx) {
  Outcome o;
  Policy p = fx.sft_policy();
  TrainConfig tc = fx.config().train;
  tc.offline_weight = 0.0;
  tc.online_weight = 1.0;
  tc.batch_size = kOnlineBatch;
  const auto& online = fx.corpus().online;
  const auto t0 = clk::now();
  const auto rows = mbpo_train(p, fx.vocab(), TrainData{{}, online, {}}, tc, {});
  const double secs = seconds_since(t0);
  const auto sm = smooth(column(rows, &MetricsRow::reward_online));
  const double chance = chance_reward(online);
  const double start = sm.at(0);
  std::optional<std::size_t> reached;
  for (std::size_t i = 0; i < sm.size() && !reached; ++i) {
    if (sm[i] >= 1.8) reached = i;
  }
  const double best = *std::max_element(sm.begin(), sm.end());
  o.require(online.size() == 2000 && tc.steps <= 500, std::to_string(online.size()) + " records, " +
                                                          std::to_string(tc.steps) + " steps, batch " + std::to_string(tc.batch_size));
  o.require(std::abs(start - chance) <= 0.25, "initial reward " + fmt(start) + " (chance " + fmt(chance) +
                                                  ", smoothed " + fmt(sm.at(kSmoothingWindow - 1)) + " after one window)");
  o.require(reached.has_value(), reached ? "smoothed reward >= 1.8 at step " + std::to_string(*reached)
                                         : "smoothed reward peaks at " + fmt(best) + ", final " + fmt(sm.back()));
  o.require(secs <= 1800.0, "wall-clock " + fmt(secs) + " s");
  return o;
}

// Least-squares slope of y against its index.
double slope(std::span<const double> y) {
  const double n = static_cast<double>(y.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double x = static_cast<double>(i);
    sx += x;
    sy += y[i];
    sxx += x * x;
    sxy += x * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

Outcome offline_dynamics(testing::Fixture& fx) {
  Outcome o;
  Policy p = fx.sft_policy();
  TrainConfig tc = fx.config().train;
  tc.offline_weight = 1.0;
  tc.online_weight = 0.0;
  const auto rows = mbpo_train(p, fx.vocab(), TrainData{fx.mined(), {}, {}}, tc, {});
  const auto w = smooth(column(rows, &MetricsRow::iig_chosen)), l = smooth(column(rows, &MetricsRow::iig_rejected));
  std::size_t violations = 0, first_violation = 0;
  for (std::size_t i = kSmoothingWindow - 1; i < w.size(); ++i) {
    if (!(w[i] > l[i]) && violations++ == 0) first_violation = i;
  }
  o.require(violations == 0, violations == 0 ? "smoothed chosen IIG > rejected at every step after warmup"
                                             : std::to_string(violations) + " steps with chosen <= rejected, first " +
                                                   std::to_string(first_violation));
  const auto after = std::span(w).subspan(kSmoothingWindow - 1);
  const double s = slope(after);
  o.require(s > 0.0 && after.back() > after.front(), "chosen IIG " + fmt(after.front()) + " -> " +
                                                         fmt(after.back()) + ", slope " + fmt(s) + "/step");
  return o;
}

ClosedRecord mc_record(std::vector<std::string> options, std::string answer) {
  ClosedRecord r;
  r.kind = ClosedKind::kMultipleChoice;
  r.options = std::move(options);
  r.answer = std::move(answer);
  return r;
}

ClosedRecord yn_record(std::string answer) {
  ClosedRecord r;
  r.kind = ClosedKind::kYesNo;
  r.answer = std::move(answer);
  return r;
}

Outcome verifier_table() {
  Outcome o;
  const std::vector<std::string> opts = {"blue", "green", "red", "yellow"};
  int failed = 0, total = 0;
  auto check = [&](bool ok, const std::string& what) {
    ++total;
    if (!ok) {
      ++failed;
      o.require(false, what);
    }
  };
  check(extract_mc("The answer is B", opts) == 'B', "\"The answer is B\" -> B");
  check(extract_mc("red", opts) == 'C', "\"red\" -> C");
  check(extract_mc("A or B", opts) == std::nullopt, "\"A or B\" -> none");
  check(extract_yn("Yes, there is a triangle.") == "yes", "\"Yes, there is a triangle.\" -> yes");
  check(extract_yn("yes and no") == std::nullopt, "\"yes and no\" -> none");
  check(extract_yn("There is a triangle.") == std::nullopt, "\"There is a triangle.\" -> none");
  const Verdict b = reward("B", mc_record(opts, "B"));
  check(b.extracted == "B" && b.correct && b.reward == 2.0, "extracted B, key B -> 2.0");
  const Verdict none = reward("nothing", mc_record(opts, "B"));
  check(none.extracted == "none" && !none.correct && none.reward == 0.0, "extracted none -> 0.0");
  const Verdict yes = reward("yes", yn_record("no"));
  check(yes.extracted == "yes" && !yes.correct && yes.reward == 0.0, "extracted yes, key no -> 0.0");
  if (failed == 0) o.require(true, std::to_string(total) + "/" + std::to_string(total) + " table rows");

  const Vocab vocab = Vocab::standard();
  Rng rng(107);
  std::set<double> values;
  for (const auto& r : gen_closed(108, 2000, 0.5)) {
    std::string text;
    const std::size_t n = rng.below(6);
    for (std::size_t i = 0; i < n; ++i) text += (i ? " " : "") + vocab.word(static_cast<TokenId>(rng.below(vocab.size())));
    const Verdict v = reward(text, r);
    values.insert(v.reward);
    if (v.reward != (v.correct ? 2.0 : 0.0)) values.insert(-1.0);
  }
  const bool binary = std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0 || v == 2.0; });
  o.require(binary && values.size() == 2, "rewards over 2000 random responses take only {0, 2}");
  return o;
}

// Runs the command-line pipeline twice with one configuration and compares
// the metrics CSVs byte for byte.
Outcome reproducibility(const std::string& lab, const fs::path& scratch, std::size_t threads) {
  Outcome o;
  const nlohmann::json cfg = {
      {"seed", 11},
      {"steps", 12},
      {"batch_size", 4},
      {"group_size", 4},
      {"eval_every", 6},
      {"threads", threads},
      {"attack", {{"iterations", 3}}},
      {"data", {{"offline_pool", 40}, {"sft", 40}, {"online", 40}, {"eval_closed", 20}, {"eval_open", 10}, {"text", 40}, {"sft_closed", 20}}},
      {"pretrain", {{"steps", 5}, {"batch_size", 4}}},
      {"sft", {{"steps", 5}, {"batch_size", 4}}},
      {"iig", {{"top_k", 12}}}};
  fs::create_directories(scratch);
  const fs::path cfg_path = scratch / "config.json";
  write_file(cfg_path.string(), cfg.dump(2));
  std::vector<std::string> csv;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = scratch / ("run" + std::to_string(run));
    fs::remove_all(out);
    bool ok = true;
    for (const char* stage : {"gen-data", "pretrain", "sft", "iig", "mine", "train", "eval"}) {
      const std::string cmd = "\"" + lab + "\" --config \"" + cfg_path.string() + "\" --out-dir \"" + out.string() +
                              "\" " + stage + " > \"" + (out.string() + "." + stage + ".log") + "\" 2>&1";
      fs::create_directories(out);
      if (std::system(cmd.c_str()) != 0) {
        o.require(false, std::string("run ") + std::to_string(run) + " stage " + stage + " failed, see " + out.string() +
                             "." + stage + ".log");
        ok = false;
        break;
      }
    }
    if (!ok) return o;
    csv.push_back(read_file((out / "metrics.csv").string()));
  }
  const std::size_t lines = static_cast<std::size_t>(std::count(csv[0].begin(), csv[0].end(), '\n'));
  o.require(csv[0] == csv[1] && lines > 1,
            "gen-data..eval twice: metrics.csv byte-identical (" + std::to_string(csv[0].size()) + " bytes, " +
                std::to_string(lines - 1) + " rows)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbpo_acceptance: acceptance criteria of the toy pipeline"};
  std::vector<int> only;
  std::string cache = MBPO_ACCEPTANCE_CACHE;
  std::string lab = MBPO_LAB_BINARY;
  std::size_t threads = 0;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--cache", cache, "directory for cached checkpoints and mined records")->capture_default_str();
  app.add_option("--lab", lab, "mbpo_lab binary used for the pipeline runs")->capture_default_str();
  app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)");
  CLI11_PARSE(app, argc, argv);
  if (threads == 0) threads = default_threads();

  std::set<int> selected(only.begin(), only.end());
  if (selected.empty()) {
    for (int i = 1; i <= 11; ++i) selected.insert(i);
  }
  std::optional<testing::Fixture> fixture;
  auto fx = [&]() -> testing::Fixture& {
    if (!fixture) fixture.emplace(fs::path(cache), threads);
    return *fixture;
  };
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"autodiff soundness", autodiff},
      {"group advantages", advantages},
      {"k3 KL estimator", kl},
      {"loss anchor at coinciding policies", anchor},
      {"attack budget", [&] { return budget(fx()); }},
      {"attack effectiveness", [&] { return effectiveness(fx()); }},
      {"IIG identities", [&] { return iig_identities(fx()); }},
      {"online-only reward dynamics", [&] { return online_dynamics(fx()); }},
      {"offline-only IIG dynamics", [&] { return offline_dynamics(fx()); }},
      {"verifier table", verifier_table},
      {"pipeline reproducibility", [&] { return reproducibility(lab, fs::path(cache) / "repro", threads); }},
  };
  bool all = true;
  for (int id : selected) {
    const auto& [name, run] = criteria[static_cast<std::size_t>(id - 1)];
    const auto t0 = clk::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.require(false, std::string("error: ") + e.what());
    }
    all = all && o.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
