#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "checks.hpp"
#include "vallex/codec.hpp"
#include "vallex/common.hpp"
#include "vallex/corpus.hpp"
#include "vallex/dsp.hpp"
#include "vallex/metrics.hpp"
#include "vallex/oracle.hpp"

using namespace vallex;
namespace fs = std::filesystem;

namespace {

const Corpus& corpus() {
  static const Corpus c = [] {
    CorpusSpec s;
    s.num_speakers = 4;
    s.utts_per_speaker = 8;
    s.eval_speakers = 2;
    s.eval_utts = 2;
    return generate_corpus(s, 11);
  }();
  return c;
}

MatrixF stack_frames(const std::vector<const Utterance*>& utts, const CodecParams& p) {
  std::vector<MatrixF> parts;
  Eigen::Index rows = 0;
  for (const auto* u : utts) {
    parts.push_back(analyze(corpus().waveform(*u), p).frames);
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

const RvqModel& trained() {
  static const RvqModel m = train_rvq(stack_frames(corpus().split(false), CodecParams{}), 8, 64, 20, 5, CodecParams{});
  return m;
}

double phoneme_accuracy(const std::vector<const Utterance*>& utts, const std::function<std::vector<float>(const Utterance&)>& f) {
  long errors = 0, total = 0;
  for (const auto* u : utts) {
    const OracleResult r = oracle_decode(f(*u), corpus().voice);
    errors += edit_distance(r.phonemes.ids, u->phonemes.ids);
    total += static_cast<long>(u->phonemes.ids.size());
  }
  return 1.0 - static_cast<double>(errors) / total;
}

}  // namespace

TEST_CASE("analyze frame count and log floor") {
  const CodecParams p;
  const std::vector<float> one_second(8000, 0.0f);
  const FrameFeatures f = analyze(one_second, p);
  CHECK(f.num_frames() == 100);
  CHECK(f.dims() == p.dims);
  CHECK((f.frames.array() == kFeatureFloorDb).all());
  CHECK(analyze(std::vector<float>(8001, 0.0f), p).num_frames() == 101);
  CHECK_THROWS_AS(analyze(std::vector<float>{}, p), InvalidArgument);
}

TEST_CASE("doubling the amplitude shifts features by 20 log10 2 dB") {
  Rng rng(2);
  const CodecParams p;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<float> x(1600), y(1600);
    for (size_t i = 0; i < x.size(); ++i) {
      x[i] = static_cast<float>(0.1 * rng.normal());
      y[i] = 2.0f * x[i];
    }
    const MatrixF fx = analyze(x, p).frames, fy = analyze(y, p).frames;
    for (Eigen::Index i = 0; i < fx.size(); ++i)
      if (fx.data()[i] > -60.0f) CHECK(fy.data()[i] - fx.data()[i] == doctest::Approx(20.0 * std::log10(2.0)).epsilon(1e-3));
  }
}

TEST_CASE("synthesize output length and silence") {
  const CodecParams p;
  FrameFeatures f;
  f.frames = MatrixF::Constant(37, p.dims, kFeatureFloorDb);
  f.hop = p.hop;
  f.sample_rate = p.sample_rate;
  const auto w = synthesize(f, p);
  CHECK(w.size() == 37u * p.hop);
  CHECK(dsp::rms(w) < 1e-3);
}

TEST_CASE("analysis/synthesis preserves oracle phoneme decoding") {
  const CodecParams p;
  std::vector<const Utterance*> all;
  for (const auto& u : corpus().manifest.entries) all.push_back(&u);
  const double acc = phoneme_accuracy(all, [&](const Utterance& u) { return synthesize(analyze(corpus().waveform(u), p), p); });
  MESSAGE("resynthesis phoneme accuracy " << acc);
  CHECK(acc >= 0.99);
}

TEST_CASE("codec round trip with 8 layers decodes on the eval split") {
  const RvqModel& m = trained();
  const double acc = phoneme_accuracy(corpus().split(true), [&](const Utterance& u) {
    return synthesize(rvq_decode(rvq_encode(analyze(corpus().waveform(u), m.params), m), m), m.params);
  });
  MESSAGE("round-trip phoneme accuracy " << acc);
  CHECK(acc >= 0.95);
}

TEST_CASE("k-means recovers K distinct repeated frames exactly") {
  Rng rng(4);
  const int K = 8;
  MatrixF distinct(K, 3);
  for (Eigen::Index i = 0; i < distinct.size(); ++i) distinct.data()[i] = static_cast<float>(rng.normal() * 5);
  MatrixF data(K * 12, 3);
  for (int i = 0; i < data.rows(); ++i) data.row(i) = distinct.row(i % K);
  CodecParams p;
  p.dims = 3;
  const RvqModel m = train_rvq(data, 1, K, 30, 9, p);
  FrameFeatures f{data, p.hop, p.sample_rate};
  const FrameFeatures back = rvq_decode(rvq_encode(f, m), m);
  CHECK((back.frames - data).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("train_rvq is deterministic and residuals shrink with depth") {
  Rng rng(5);
  MatrixF data(800, 4);
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = static_cast<float>(rng.normal());
  CodecParams p;
  p.dims = 4;
  RvqTrainStats s;
  const RvqModel a = train_rvq(data, 4, 16, 15, 3, p, &s);
  const RvqModel b = train_rvq(data, 4, 16, 15, 3, p);
  for (int l = 0; l < 4; ++l) CHECK(a.codebooks[l].vectors == b.codebooks[l].vectors);
  for (int l = 0; l < 4; ++l) CHECK(a.codebooks[l].layer_index == l + 1);
  REQUIRE(s.mean_residual_norm.size() == 4);
  for (int l = 1; l < 4; ++l) CHECK(s.mean_residual_norm[l] <= s.mean_residual_norm[l - 1]);
  CHECK_THROWS_AS(train_rvq(data.topRows(100), 1, 16, 5, 1, p), InvalidArgument);
}

TEST_CASE("zero residual gives [row, 0, 0, ...]") {
  RvqModel m;
  m.params.dims = 3;
  Rng rng(6);
  for (int l = 0; l < 4; ++l) {
    Codebook cb;
    cb.vectors = MatrixF(6, 3);
    for (Eigen::Index i = 0; i < cb.vectors.size(); ++i) cb.vectors.data()[i] = static_cast<float>(rng.normal());
    if (l > 0) cb.vectors.row(0).setZero();
    cb.layer_index = l + 1;
    m.codebooks.push_back(cb);
  }
  FrameFeatures f{m.codebooks[0].vectors.row(5), 80, 8000};
  const AcousticTokenGrid g = rvq_encode(f, m);
  CHECK(g.tokens == std::vector<int>{5, 0, 0, 0});

  const AcousticTokenGrid zeros(2, 4);
  const FrameFeatures d = rvq_decode(zeros, m);
  Eigen::RowVectorXf want = Eigen::RowVectorXf::Zero(3);
  for (const auto& cb : m.codebooks) want += cb.vectors.row(0);
  CHECK((d.frames.row(0) - want).cwiseAbs().maxCoeff() < 1e-6f);
  AcousticTokenGrid bad(1, 4);
  bad.at(0, 2) = 6;
  CHECK_THROWS_AS(rvq_decode(bad, m), InvalidArgument);
  FrameFeatures wrong{MatrixF::Zero(1, 4), 80, 8000};
  CHECK_THROWS_AS(rvq_encode(wrong, m), InvalidArgument);
}

TEST_CASE("greedy encode matches the brute-force oracle") {
  int checked = 0;
  CHECK(checks::rvq_brute_force_agreement(17, 1000, &checked) == 1.0);
  CHECK(checked >= 1000);
}

TEST_CASE("residual telescoping and monotone refinement on held-out speech") {
  const RvqModel& m = trained();
  const MatrixF eval = stack_frames(corpus().split(true), m.params);
  FrameFeatures f{eval, m.params.hop, m.params.sample_rate};
  MatrixD residual;
  const AcousticTokenGrid g = rvq_encode(f, m, &residual);
  const FrameFeatures full = rvq_decode(g, m);
  const MatrixD diff = eval.cast<double>() - full.frames.cast<double>() - residual;
  CHECK(diff.cwiseAbs().maxCoeff() < 1e-3);
  double prev = INFINITY;
  for (int l = 1; l <= m.layers(); ++l) {
    const double mse = (eval - rvq_decode(g, m, l).frames).squaredNorm() / eval.rows();
    CHECK(mse <= prev);
    prev = mse;
  }
}

TEST_CASE("rvq model file format") {
  const RvqModel& m = trained();
  const fs::path p = fs::temp_directory_path() / "vallex_test.rvq";
  m.save(p);
  std::ifstream in(p, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "RVQ1");
  uint32_t header[5];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  CHECK(header[0] == 8);
  CHECK(header[1] == 64);
  CHECK(header[2] == static_cast<uint32_t>(m.params.dims));
  CHECK(header[3] == 80);
  CHECK(header[4] == 8000);
  const RvqModel back = RvqModel::load(p);
  for (int l = 0; l < m.layers(); ++l) CHECK(back.codebooks[l].vectors == m.codebooks[l].vectors);
  fs::remove(p);
}
