#include <doctest.h>

#include <cmath>

#include "checks.hpp"
#include "vallex/common.hpp"
#include "vallex/ctc.hpp"
#include "vallex/recotrans.hpp"

using namespace vallex;
using checks::random_ids;

namespace {

RecoTransConfig small_config() {
  RecoTransConfig c = checks::tiny_recotrans();
  c.attention_dim = 32;
  c.heads = 2;
  c.ffn_dim = 64;
  c.prenet_channels = 16;
  c.num_phonemes = 6;
  c.mask = MaskSpec{0.2, 3};
  return c;
}

template <typename T>
std::vector<nn::Mat<T>> snapshot(const nn::ParamList<T>& p) {
  std::vector<nn::Mat<T>> out;
  for (const auto& [n, x] : p) out.push_back(x->value());
  return out;
}

}  // namespace

// ---------------------------------------------------------------- CTC

TEST_CASE("run-length collapse") {
  CHECK(collapse_repeats(std::vector<int>{0, 0, 1, 1, 1, 0}) == std::vector<int>{0, 1, 0});
  CHECK(collapse_repeats(std::vector<int>{}).empty());
  CHECK(collapse_repeats(std::vector<int>{3}) == std::vector<int>{3});
}

TEST_CASE("CTC certain single frame has zero loss") {
  nn::Mat<double> lp(1, 3);
  lp << std::log(1e-300), 0.0, std::log(1e-300);
  CHECK(ctc_nll(lp, std::vector<int>{1}, 2) == doctest::Approx(0.0));
}

TEST_CASE("CTC matches full alignment enumeration") {
  int cases = 0;
  CHECK(checks::ctc_enumeration_check(55, &cases) < 1e-6);
  CHECK(cases > 40);
}

TEST_CASE("CTC rejects inadmissible lengths") {
  nn::Mat<double> lp = nn::Mat<double>::Constant(2, 3, std::log(1.0 / 3));
  CHECK_THROWS_AS(ctc_nll(lp, std::vector<int>{0, 1, 0}, 2), InvalidArgument);
  CHECK_THROWS_AS(ctc_nll(lp, std::vector<int>{1, 1}, 2), InvalidArgument);
  CHECK_NOTHROW(ctc_nll(lp, std::vector<int>{0, 1}, 2));
}

TEST_CASE("CTC gradient matches finite differences") {
  Rng rng(6);
  nn::Parameter<double> z(5, 4);
  for (int i = 0; i < 20; ++i) z.value().data()[i] = rng.normal();
  const std::vector<int> target{0, 2, 2};
  nn::ParamList<double> params{{"z", &z}};
  const auto r = checks::gradient_check<double>(
      params, [&] { return ctc_loss(nn::log_softmax(z.var()), std::span<const int>(target), 3); }, 20, 7);
  CHECK(r.worst < 1e-3);
}

TEST_CASE("greedy CTC decode of a one-hot path") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int T = 1 + static_cast<int>(rng.below(10)), V = 4, blank = 3;
    nn::Mat<float> scores = nn::Mat<float>::Constant(T, V, -1e9f);
    std::vector<int> path(T);
    for (int t = 0; t < T; ++t) {
      path[t] = static_cast<int>(rng.below(V));
      scores(t, path[t]) = 0.0f;
    }
    std::vector<int> expect;
    for (int id : collapse_repeats(path))
      if (id != blank) expect.push_back(id);
    CHECK(ctc_greedy_decode(scores, blank) == expect);
  }
}

// ---------------------------------------------------------------- pre-net

TEST_CASE("pre-net arithmetic") {
  RecoTransConfig full_stack;
  full_stack.kernels = {10, 3, 3, 3, 3, 2, 2};
  full_stack.strides = {5, 2, 2, 2, 2, 2, 2};
  CHECK(full_stack.downsample() == 320);
  const RecoTransConfig desk;
  CHECK(desk.downsample() == 80);
  CHECK(desk.receptive_field() == 120);
  for (const RecoTransConfig& c : {full_stack, desk, checks::tiny_recotrans()}) {
    for (int n = 1; n < 2000; n += 7) {
      int frames = n;
      bool ok = true;
      for (size_t i = 0; i < c.kernels.size() && ok; ++i) {
        if (frames < c.kernels[i]) ok = false;
        else frames = (frames - c.kernels[i]) / c.strides[i] + 1;
      }
      const int closed = n < c.receptive_field() ? 0 : (n - c.receptive_field()) / c.downsample() + 1;
      CHECK(c.frames_for(n) == (ok ? frames : 0));
      CHECK(c.frames_for(n) == closed);
    }
  }
  RecoTransModel m(checks::tiny_recotrans(), 1);
  Rng rng(1);
  CHECK(m.prenet_forward(checks::random_wave(rng, 30)).rows() == checks::tiny_recotrans().frames_for(30));
  CHECK_THROWS_AS(m.prenet_forward(checks::random_wave(rng, 5)), InvalidArgument);
}

TEST_CASE("silent input gives identical bias-only pre-net frames") {
  RecoTransModel m(small_config(), 2);
  const auto a = m.prenet_forward(std::vector<float>(40, 0.0f)).value();
  const auto b = m.prenet_forward(std::vector<float>(40, 0.0f)).value();
  CHECK(a == b);
  for (int r = 1; r < a.rows(); ++r) CHECK(a.row(r) == a.row(0));
}

TEST_CASE("frame targets use the receptive-field center") {
  const RecoTransConfig c = checks::tiny_recotrans();  // hop 4, receptive field 6
  const std::vector<int> ph{5, 6, 7};
  const std::vector<int> bounds{0, 6, 11, 30};
  // Centers at 2.5, 6.5, 10.5, 14.5, 18.5.
  CHECK(frame_targets(ph, bounds, 5, c) == std::vector<int>{5, 6, 6, 7, 7});
  CHECK_THROWS_AS(frame_targets(ph, std::vector<int>{0, 30}, 5, c), InvalidArgument);
}

TEST_CASE("mask sampling") {
  Rng rng(3);
  const MaskSpec spec{0.08, 10};
  long masked = 0, total = 0;
  for (int t = 0; t < 200; ++t) {
    const auto m = sample_mask(300, spec, rng);
    for (bool b : m) masked += b;
    total += 300;
  }
  // Probability a frame is covered: 1 - (1 - p)^span away from the start.
  const double want = 1.0 - std::pow(1.0 - spec.mask_prob, spec.span_len);
  CHECK(static_cast<double>(masked) / total == doctest::Approx(want).epsilon(0.05));
  CHECK_THROWS_AS(sample_mask(10, MaskSpec{0.0, 10}, rng), InvalidArgument);
  CHECK_THROWS_AS(sample_mask(10, MaskSpec{0.1, 0}, rng), InvalidArgument);
}

TEST_CASE("recognizer config round trip") {
  RecoTransConfig c = small_config();
  c.ctc_weight = 0.3;
  CHECK(RecoTransConfig::parse(c.serialize()) == c);
  c.kernels = {4};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

// ---------------------------------------------------------------- losses

TEST_CASE("zeroed heads give uniform speech and text losses") {
  const RecoTransConfig c = checks::tiny_recotrans();
  RecoTransModelT<double> m(c, 4);
  for (auto* lin : {&m.head1, &m.head2, &m.dec_head}) {
    lin->w.value().setZero();
    lin->b.value().setZero();
  }
  Rng rng(4);
  std::vector<std::vector<bool>> masks;
  const auto speech = checks::random_speech_batch(rng, c, 3, &masks);
  long masked = 0;
  for (const auto& mk : masks)
    for (bool b : mk) masked += b;
  Rng unused(0);
  CHECK(speech_pretrain_loss(m, std::span<const SpeechSample>(speech), unused, &masks).item() ==
        doctest::Approx(2.0 * masked * std::log(c.vocab()) / 3).epsilon(1e-9));
  const auto text = checks::random_text_batch(rng, c, 3);
  long positions = 0;
  for (const auto& t : text) positions += static_cast<long>(t.target.size()) + 1;
  CHECK(text_pretrain_loss(m, std::span<const TextPair>(text)).item() ==
        doctest::Approx(positions * std::log(c.vocab()) / 3).epsilon(1e-9));
}

TEST_CASE("recognizer losses match the independent oracle") {
  const auto r = checks::recotrans_loss_oracle(303);
  CHECK(r.speech.worst < 1e-6);
  CHECK(r.text.worst < 1e-6);
  CHECK(r.finetune.worst < 1e-6);
}

TEST_CASE("unmasked frames do not contribute to the speech loss") {
  const RecoTransConfig c = checks::tiny_recotrans();
  RecoTransModelT<double> m(c, 5);
  Rng rng(5);
  std::vector<std::vector<bool>> masks;
  auto speech = checks::random_speech_batch(rng, c, 2, &masks);
  Rng unused(0);
  const double before = speech_pretrain_loss(m, std::span<const SpeechSample>(speech), unused, &masks).item();
  for (size_t b = 0; b < speech.size(); ++b)
    for (size_t f = 0; f < masks[b].size(); ++f)
      if (!masks[b][f]) speech[b].frame_labels[f] = (speech[b].frame_labels[f] + 1) % c.num_phonemes;
  CHECK(speech_pretrain_loss(m, std::span<const SpeechSample>(speech), unused, &masks).item() == before);
}

TEST_CASE("an all-empty mask set is an error") {
  const RecoTransConfig c = checks::tiny_recotrans();
  RecoTransModelT<double> m(c, 5);
  Rng rng(5);
  std::vector<std::vector<bool>> masks;
  const auto speech = checks::random_speech_batch(rng, c, 1, &masks);
  masks[0].assign(masks[0].size(), false);
  CHECK_THROWS_AS(speech_pretrain_loss(m, std::span<const SpeechSample>(speech), rng, &masks), InvalidArgument);
}

TEST_CASE("finetune loss is 0.2 CTC plus CE") {
  RecoTransConfig c = checks::tiny_recotrans();
  RecoTransModelT<double> m(c, 6);
  Rng rng(6);
  const auto batch = checks::random_finetune_batch(rng, c, 3);
  FinetuneParts parts;
  const double total = finetune_loss(m, std::span<const FinetuneSample>(batch), nullptr, &parts).item();
  CHECK(total == doctest::Approx(0.2 * parts.ctc + parts.ce).epsilon(1e-12));
  c.ctc_weight = 0.0;
  RecoTransModelT<double> no_ctc(c, 6);
  const double ce_only = finetune_loss(no_ctc, std::span<const FinetuneSample>(batch)).item();
  CHECK(total - ce_only == doctest::Approx(0.2 * parts.ctc).epsilon(1e-12));
}

TEST_CASE("pre-training loss is additive") {
  const RecoTransConfig c = small_config();
  RecoTransModel m(c, 7);
  nn::AdamConfig ac;
  ac.max_lr = 0.0;
  nn::Adam<float> opt(m.parameters(), ac);
  Rng rng(7);
  std::vector<SpeechSample> speech;
  for (int b = 0; b < 2; ++b) {
    SpeechSample s{checks::random_wave(rng, 66), {}};
    s.frame_labels = random_ids(rng, c.frames_for(66), c.num_phonemes);
    speech.push_back(s);
  }
  const auto text = checks::random_text_batch(rng, c, 2);
  const auto before = snapshot(m.parameters());
  Rng m1(11), m2(11);
  const PretrainLosses both = pretrain_step(m, opt, speech, text, m1);
  const PretrainLosses speech_only = pretrain_step(m, opt, speech, {}, m2);
  CHECK(both.speech == speech_only.speech);
  CHECK(speech_only.text == 0.0);
  Rng m3(11);
  CHECK(pretrain_step(m, opt, {}, text, m3).text == both.text);
  CHECK(snapshot(m.parameters()) == before);
  CHECK_THROWS_AS(pretrain_step(m, opt, {}, {}, m3), InvalidArgument);
}

TEST_CASE("text pre-training overfits 50 pairs") {
  const RecoTransConfig c = small_config();
  RecoTransModel m(c, 8);
  Rng rng(8);
  std::vector<TextPair> data;
  for (int i = 0; i < 50; ++i) {
    TextPair p{random_ids(rng, 3 + rng.below(3), c.num_phonemes), {}};
    for (int s : p.source) p.target.push_back((s + 1) % c.num_phonemes);
    data.push_back(p);
  }
  nn::AdamConfig ac;
  ac.max_lr = 3e-3;
  ac.warmup_steps = 20;
  nn::Adam<float> opt(m.parameters(), ac);
  Rng mask_rng(1);
  const double initial = text_pretrain_loss(m, std::span<const TextPair>(data)).item();
  for (int step = 0; step < 300; ++step) pretrain_step(m, opt, {}, data, mask_rng);
  const double final_loss = text_pretrain_loss(m, std::span<const TextPair>(data)).item();
  MESSAGE("text overfit " << initial << " -> " << final_loss);
  CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("fine-tuned toy model transcribes and translates its training set exactly") {
  const RecoTransConfig c = small_config();
  RecoTransModel m(c, 9);
  Rng rng(9);
  std::vector<FinetuneSample> data;
  for (int i = 0; i < 4; ++i) {
    FinetuneSample s{checks::random_wave(rng, 66), random_ids(rng, 3, c.num_phonemes), random_ids(rng, 3, c.num_phonemes)};
    data.push_back(s);
  }
  nn::AdamConfig ac;
  ac.max_lr = 3e-3;
  ac.warmup_steps = 20;
  nn::Adam<float> opt(m.parameters(), ac);
  for (int step = 0; step < 400; ++step) finetune_step(m, opt, data);
  for (const auto& s : data) {
    const Transcription t = transcribe_translate(m, s.waveform);
    CHECK(t.source == collapse_repeats(s.source));
    CHECK(t.target == s.target);
    CHECK_FALSE(t.flagged());
    const Transcription again = transcribe_translate(m, s.waveform);
    CHECK(again.source == t.source);
    CHECK(again.target == t.target);
  }
}

TEST_CASE("silent input decodes within the target budget") {
  const RecoTransConfig c = small_config();
  RecoTransModel m(c, 10);
  const Transcription t = transcribe_translate(m, std::vector<float>(66, 0.0f), 5);
  CHECK(t.source.size() <= static_cast<size_t>(c.frames_for(66)));
  CHECK(t.target.size() <= 5);
  CHECK(t.source_empty == t.source.empty());
  CHECK(t.target_empty == t.target.empty());
}

TEST_CASE("zero learning rate leaves the recognizer unchanged") {
  const RecoTransConfig c = small_config();
  RecoTransModel m(c, 11);
  const auto before = snapshot(m.parameters());
  nn::AdamConfig ac;
  ac.max_lr = 0.0;
  nn::Adam<float> opt(m.parameters(), ac);
  Rng rng(11);
  const std::vector<FinetuneSample> batch{
      FinetuneSample{checks::random_wave(rng, 66), {1, 2}, {3}}};
  finetune_step(m, opt, batch);
  CHECK(snapshot(m.parameters()) == before);
}
