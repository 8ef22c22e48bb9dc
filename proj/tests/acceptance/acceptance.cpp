// Acceptance run: prints one PASS/FAIL line per criterion. Criteria 6-8 train
// (or reuse) the desk-scale pipeline in --run-dir; criterion 10 runs a
// miniature pipeline twice. The exit status is nonzero when a criterion could
// not be evaluated, or with --strict when any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "checks.hpp"
#include "vallex/codec.hpp"
#include "vallex/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace vallex;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Timed {
  Outcome outcome;
  double seconds = 0.0;
};

Timed timed(const std::function<Outcome()>& f) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  return {o, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Outcome loss_oracles() {
  const auto mar = checks::mar_loss_oracle(101);
  const auto mnar = checks::mnar_loss_oracle(202);
  const auto rt = checks::recotrans_loss_oracle(303);
  const double worst =
      std::max({mar.worst, mnar.worst, rt.speech.worst, rt.text.worst, rt.finetune.worst});
  return {worst < 1e-6, "worst relative difference " + fmt(worst) + " (mar " + fmt(mar.worst) + ", mnar " +
                            fmt(mnar.worst) + ", speech " + fmt(rt.speech.worst) + ", text " + fmt(rt.text.worst) +
                            ", finetune " + fmt(rt.finetune.worst) + ")"};
}

Outcome gradients() {
  bool ok = true;
  std::string detail;
  for (const auto& g : checks::gradient_suite(77, 24)) {
    ok = ok && g.result.checked >= 20 && g.result.worst < 1e-3;
    detail += g.loss + " " + fmt(g.result.worst) + "/" + std::to_string(g.result.checked) + "  ";
  }
  return {ok, detail};
}

Outcome causality() {
  const auto c = checks::mar_future_blindness(31, 20);
  const bool iso = checks::mnar_level_isolation(32, 20);
  return {c.past_identical && c.future_changed && iso,
          std::string("mar past identical ") + (c.past_identical ? "yes" : "no") + ", future reaches later rows " +
              (c.future_changed ? "yes" : "no") + ", mnar level isolation " + (iso ? "yes" : "no")};
}

MatrixF stack_eval_frames(const Corpus& corpus, const CodecParams& p) {
  std::vector<MatrixF> parts;
  Eigen::Index rows = 0;
  for (const auto* u : corpus.split(true)) {
    parts.push_back(analyze(corpus.waveform(*u), p).frames);
    rows += parts.back().rows();
  }
  MatrixF out(rows, p.dims);
  Eigen::Index r = 0;
  for (const auto& m : parts) {
    out.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  return out;
}

Outcome rvq(const Corpus& corpus, const RvqModel& model) {
  const MatrixF eval = stack_eval_frames(corpus, model.params);
  const FrameFeatures f{eval, model.params.hop, model.params.sample_rate};
  MatrixD residual;
  const AcousticTokenGrid g = rvq_encode(f, model, &residual);
  const MatrixD gap = eval.cast<double>() - rvq_decode(g, model).frames.cast<double>() - residual;
  // Codebooks are float32; the identity holds up to accumulated rounding.
  const double tele = gap.cwiseAbs().maxCoeff();
  bool monotone = true;
  double prev = INFINITY;
  std::string mses;
  for (int l = 1; l <= model.layers(); ++l) {
    const double mse = (eval - rvq_decode(g, model, l).frames).squaredNorm() / eval.rows();
    monotone = monotone && mse <= prev;
    prev = mse;
    mses += fmt(mse) + " ";
  }
  int checked = 0;
  const double agree = checks::rvq_brute_force_agreement(17, 1000, &checked);
  return {tele < 1e-3 && monotone && agree == 1.0 && checked >= 1000,
          "telescoping max gap " + fmt(tele) + ", layer MSE " + mses + "(" + (monotone ? "monotone" : "NOT monotone") +
              "), brute-force agreement " + fmt(agree) + " on " + std::to_string(checked) + " frames"};
}

Outcome ctc() {
  int cases = 0;
  const double worst = checks::ctc_enumeration_check(55, &cases);
  return {worst < 1e-6 && cases > 0, "worst relative difference " + fmt(worst) + " over " + std::to_string(cases) + " cases"};
}

Outcome xtts(const EvalReport& r) {
  const double per = r.find("xtts_per").interval.mean;
  const double f0 = r.find("f0_within_10pct").interval.mean;
  return {per <= 0.15 && f0 >= 0.8, "phoneme error rate " + fmt(per) + " (<= 0.15), f0 within 10% on " + fmt(f0) +
                                        " of " + std::to_string(r.records.size()) + " items (>= 0.8)"};
}

Outcome s2st(const EvalReport& r) {
  const double src = r.find("sim_hyp_src").interval.mean;
  const double tgt = r.find("sim_hyp_tgt").interval.mean;
  return {r.bleu_oracle_text > r.bleu_s2st && std::abs(src - tgt) <= 0.1,
          "BLEU oracle text " + fmt(r.bleu_oracle_text) + " vs end-to-end " + fmt(r.bleu_s2st) +
              ", similarity hyp-src " + fmt(src) + " vs hyp-tgt " + fmt(tgt)};
}

Outcome lid(const EvalReport& r) {
  const Interval tn = r.find("accent_target_minus_none").interval;
  const Interval nw = r.find("accent_none_minus_wrong").interval;
  const Interval sim = r.find("sim_none_minus_target").interval;
  // Paired 90% bootstrap intervals of the per-item differences.
  const bool a = tn.lo > 0.0, b = nw.hi >= 0.0, c = sim.hi >= 0.0;
  return {a && b && c, "accent target " + fmt(r.find("accent_target").interval.mean) + " none " +
                           fmt(r.find("accent_none").interval.mean) + " wrong " +
                           fmt(r.find("accent_wrong").interval.mean) + "; target-none [" + fmt(tn.lo) + ", " +
                           fmt(tn.hi) + "], none-wrong [" + fmt(nw.lo) + ", " + fmt(nw.hi) + "], sim none-target [" +
                           fmt(sim.lo) + ", " + fmt(sim.hi) + "]"};
}

Outcome metrics() {
  double worst = 0.0;
  std::string bad;
  for (const auto& c : checks::metric_cases()) {
    const double d = std::abs(c.got - c.want);
    worst = std::max(worst, d);
    if (d > 1e-9) bad += c.name + " ";
  }
  return {bad.empty(), "worst absolute difference " + fmt(worst) + (bad.empty() ? "" : ", failing: " + bad)};
}

PipelineConfig mini_config(const fs::path& dir) {
  PipelineConfig c = PipelineConfig::desk();
  c.run_dir = dir;
  c.corpus.num_speakers = 4;
  c.corpus.utts_per_speaker = 6;
  c.corpus.eval_speakers = 2;
  c.corpus.eval_utts = 1;
  c.rvq_layers = 3;
  c.rvq_codebook_size = 16;
  c.rvq_iterations = 5;
  for (auto* t : {&c.mar_train, &c.mnar_train, &c.recotrans_pretrain, &c.recotrans_finetune}) {
    t->steps = 10;
    t->batch_size = 4;
    t->adam.warmup_steps = 5;
    t->log_every = 1000;
  }
  c.mar.layers = c.mnar.layers = 1;
  c.mar.attention_dim = c.mnar.attention_dim = 32;
  c.mar.ffn_dim = c.mnar.ffn_dim = 64;
  c.mar.heads = c.mnar.heads = 2;
  c.recotrans.attention_dim = 32;
  c.recotrans.ffn_dim = 64;
  c.recotrans.heads = 2;
  c.recotrans.enc1_layers = c.recotrans.enc2_layers = c.recotrans.dec_layers = 1;
  c.recotrans.prenet_channels = 16;
  c.decode.max_frames = 60;
  c.eval_bootstrap = 200;
  return c;
}

Outcome reproducibility(const fs::path& root, const LogFn& log) {
  std::vector<EvalReport> reports;
  for (const char* name : {"repro_a", "repro_b"}) {
    fs::remove_all(root / name);
    reports.push_back(run_pipeline(mini_config(root / name), log, true));
  }
  const auto& a = reports[0];
  const auto& b = reports[1];
  bool same = a.aggregates.size() == b.aggregates.size() && !a.aggregates.empty();
  for (size_t i = 0; same && i < a.aggregates.size(); ++i) {
    const auto &x = a.aggregates[i].interval, &y = b.aggregates[i].interval;
    same = a.aggregates[i].name == b.aggregates[i].name && x.mean == y.mean && x.lo == y.lo && x.hi == y.hi;
  }
  same = same && a.bleu_s2st == b.bleu_s2st && a.bleu_oracle_text == b.bleu_oracle_text;
  return {same, std::to_string(a.aggregates.size()) + " aggregates over " + std::to_string(a.records.size()) +
                    " items, bitwise " + (same ? "identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string run_dir = "acceptance_run";
  bool skip_e2e = false;
  bool strict = false;
  app.add_option("--run-dir", run_dir, "Directory for the desk-scale run (reused when already trained)");
  app.add_flag("--skip-e2e", skip_e2e, "Skip criteria that need the trained desk pipeline (6, 7, 8)");
  app.add_flag("--strict", strict, "Exit nonzero when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  const fs::path root(run_dir);
  fs::create_directories(root);
  std::ofstream log_file(root / "acceptance.log", std::ios::app);
  const auto start = std::chrono::steady_clock::now();
  const LogFn log = [&](const std::string& line) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log_file << "t=" << fmt(t) << " " << line << "\n" << std::flush;
  };

  std::ofstream summary(root / "acceptance_summary.txt");

  struct Criterion {
    int id;
    std::string name;
    double limit;  // seconds; 0 = none
    Timed result;
  };
  std::vector<Criterion> results;
  auto record = [&](int id, const std::string& name, double limit, const std::function<Outcome()>& f) {
    Criterion c{id, name, limit, timed(f)};
    if (limit > 0 && c.result.seconds >= limit) {
      c.result.outcome.pass = false;
      c.result.outcome.detail += " (runtime limit " + fmt(limit) + " s exceeded)";
    }
    char line[2048];
    std::snprintf(line, sizeof line, "%s %2d %-28s %8.3fs  %s\n", c.result.outcome.pass ? "PASS" : "FAIL", id,
                  name.c_str(), c.result.seconds, c.result.outcome.detail.c_str());
    std::fputs(line, stdout);
    std::fflush(stdout);
    summary << line << std::flush;
    results.push_back(c);
  };

  PipelineConfig desk = PipelineConfig::desk();
  desk.run_dir = root / "desk";
  std::unique_ptr<EvalReport> report;
  double pipeline_seconds = 0.0;
  if (!skip_e2e) {
    const Timed t = timed([&] {
      report = std::make_unique<EvalReport>(run_pipeline(desk, log));
      return Outcome{true, ""};
    });
    pipeline_seconds = t.seconds;
    if (!t.outcome.pass) std::printf("desk pipeline failed: %s\n", t.outcome.detail.c_str());
    else std::printf("desk pipeline ready in %.1fs; report in %s\n", pipeline_seconds, RunPaths{desk.run_dir}.report().c_str());
  }

  record(1, "loss oracles", 10, loss_oracles);
  record(2, "gradient checks", 60, gradients);
  record(3, "causality / level isolation", 10, causality);
  {
    // Corpus generation and codec training are not part of the timed check.
    const Corpus corpus = prepare_corpus(desk, log);
    const RunPaths paths{desk.run_dir};
    const RvqModel model = fs::exists(paths.codec()) ? RvqModel::load(paths.codec()) : train_codec(desk, corpus, log);
    record(4, "RVQ identities", 30, [&] { return rvq(corpus, model); });
  }
  record(5, "CTC enumeration", 5, ctc);
  if (report) {
    record(6, "end-to-end XTTS", 0, [&] { return xtts(*report); });
    record(7, "S2ST ordering", 0, [&] { return s2st(*report); });
    record(8, "LID ablation ordering", 0, [&] { return lid(*report); });
  } else {
    for (int id : {6, 7, 8}) {
      const std::string why = skip_e2e ? "skipped" : "exception: desk pipeline unavailable";
      std::printf("FAIL %2d %-28s %8.3fs  %s\n", id, "end-to-end", 0.0, why.c_str());
      summary << "FAIL " << id << " end-to-end " << why << "\n";
      results.push_back({id, "end-to-end", 0, {{false, why}, 0}});
    }
  }
  record(9, "metric hand examples", 0, metrics);
  record(10, "reproducibility", 0, [&] { return reproducibility(root, log); });

  int failed = 0, errors = 0;
  for (const auto& c : results) {
    failed += !c.result.outcome.pass;
    errors += c.result.outcome.detail.rfind("exception", 0) == 0;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  summary << results.size() - failed << " of " << results.size() << " criteria passed\n";
  if (errors > 0) return 2;
  return strict && failed > 0 ? 1 : 0;
}
