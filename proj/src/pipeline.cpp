#include "vallex/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "vallex/common.hpp"
#include "vallex/nn/checkpoint.hpp"
#include "vallex/oracle.hpp"
#include "vallex/phonemizer.hpp"

namespace vallex {

namespace fs = std::filesystem;

namespace {

// Stream tags for derive_seed.
enum : uint64_t {
  kTagCodec = 1,
  kTagMarInit,
  kTagMarData,
  kTagMarDropout,
  kTagMnarInit,
  kTagMnarData,
  kTagMnarLevel,
  kTagMnarDropout,
  kTagRecoInit,
  kTagRecoData,
  kTagRecoMask,
  kTagRecoDropout,
  kTagEval,
  kTagBootstrap,
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void load_schedule(const KeyValues& kv, const std::string& p, TrainSchedule& s) {
  s.steps = kv.get_int(p + ".steps", s.steps);
  s.batch_size = kv.get_int(p + ".batch_size", s.batch_size);
  s.adam.max_lr = kv.get_double(p + ".lr", s.adam.max_lr);
  s.adam.warmup_steps = kv.get_int(p + ".warmup", s.adam.warmup_steps);
  s.adam.clip_norm = kv.get_double(p + ".clip_norm", s.adam.clip_norm);
  s.log_every = kv.get_int(p + ".log_every", s.log_every);
  if (s.steps < 0 || s.batch_size < 1 || s.log_every < 1 || s.adam.warmup_steps < 1)
    throw InvalidArgument("config: bad training schedule under " + p);
}

void save_schedule(KeyValues& kv, const std::string& p, const TrainSchedule& s) {
  kv.set(p + ".steps", s.steps);
  kv.set(p + ".batch_size", s.batch_size);
  kv.set(p + ".lr", s.adam.max_lr);
  kv.set(p + ".warmup", s.adam.warmup_steps);
  kv.set(p + ".clip_norm", s.adam.clip_norm);
  kv.set(p + ".log_every", s.log_every);
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const KeyValues kv = PipelineConfig{}.to_key_values();
    for (const auto& [key, _] : kv.entries()) k.insert(key);
    return k;
  }();
  return keys;
}

}  // namespace

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.corpus.num_languages = 2;
  c.corpus.num_speakers = 8;
  c.corpus.utts_per_speaker = 125;
  c.corpus.eval_speakers = 6;
  c.corpus.eval_utts = 4;
  c.corpus.num_concepts = 16;

  c.mar.layers = 4;
  c.mar.attention_dim = 128;
  c.mar.ffn_dim = 512;
  c.mar.heads = 4;
  c.mar.max_len = 1024;
  c.mar.dropout = 0.1;
  c.mar_train.steps = 16000;
  c.mar_train.batch_size = 16;
  c.mar_train.adam.max_lr = 1e-3;
  c.mar_train.adam.warmup_steps = 400;
  c.mar_train.adam.clip_norm = 1.0;

  c.mnar.layers = 4;
  c.mnar.attention_dim = 128;
  c.mnar.ffn_dim = 512;
  c.mnar.heads = 4;
  c.mnar.max_len = 1024;
  c.mnar.dropout = 0.1;
  c.mnar_train = c.mar_train;
  c.mnar_train.steps = 4000;

  c.recotrans_pretrain.steps = 1500;
  c.recotrans_pretrain.batch_size = 8;
  c.recotrans_pretrain.adam.max_lr = 1e-3;
  c.recotrans_pretrain.adam.warmup_steps = 300;
  c.recotrans_pretrain.adam.clip_norm = 1.0;
  c.recotrans_finetune = c.recotrans_pretrain;
  c.recotrans_finetune.steps = 1500;
  c.recotrans_finetune.adam.max_lr = 5e-4;

  // Evaluation decodes greedily; sampling stays available through --temperature.
  c.decode.temperature = 0.0;
  return c;
}

KeyValues PipelineConfig::to_key_values() const {
  KeyValues kv;
  kv.set("run_dir", run_dir.string());
  kv.set("seed", seed);
  kv.set("train_seed", train_seed);
  kv.set("corpus.num_languages", corpus.num_languages);
  kv.set("corpus.num_speakers", corpus.num_speakers);
  kv.set("corpus.utts_per_speaker", corpus.utts_per_speaker);
  kv.set("corpus.eval_speakers", corpus.eval_speakers);
  kv.set("corpus.eval_utts", corpus.eval_utts);
  kv.set("corpus.num_concepts", corpus.num_concepts);
  kv.set("corpus.min_words", corpus.min_words);
  kv.set("corpus.max_words", corpus.max_words);
  kv.set("corpus.sample_rate", corpus.sample_rate);
  kv.set("codec.hop", codec.hop);
  kv.set("codec.dims", codec.dims);
  kv.set("codec.rvq_layers", rvq_layers);
  kv.set("codec.codebook_size", rvq_codebook_size);
  kv.set("codec.iterations", rvq_iterations);
  kv.set("mar.layers", mar.layers);
  kv.set("mar.attention_dim", mar.attention_dim);
  kv.set("mar.ffn_dim", mar.ffn_dim);
  kv.set("mar.heads", mar.heads);
  kv.set("mar.max_len", mar.max_len);
  kv.set("mar.dropout", mar.dropout);
  kv.set("mar.lid_dropout", lid_dropout);
  kv.set("mar.pair_prob", pair_prob);
  save_schedule(kv, "mar", mar_train);
  kv.set("mnar.layers", mnar.layers);
  kv.set("mnar.attention_dim", mnar.attention_dim);
  kv.set("mnar.ffn_dim", mnar.ffn_dim);
  kv.set("mnar.heads", mnar.heads);
  kv.set("mnar.max_len", mnar.max_len);
  kv.set("mnar.dropout", mnar.dropout);
  save_schedule(kv, "mnar", mnar_train);
  const KeyValues rt = KeyValues::parse(recotrans.serialize());
  for (const auto& [k, v] : rt.entries())
    if (k != "num_phonemes") kv.set("recotrans." + k, v);
  save_schedule(kv, "recotrans_pretrain", recotrans_pretrain);
  save_schedule(kv, "recotrans_finetune", recotrans_finetune);
  kv.set("decode.temperature", decode.temperature);
  kv.set("decode.top_k", decode.top_k);
  kv.set("decode.max_frames", decode.max_frames);
  kv.set("eval.bootstrap", eval_bootstrap);
  kv.set("eval.confidence", eval_confidence);
  return kv;
}

PipelineConfig PipelineConfig::from_key_values(const KeyValues& kv, const PipelineConfig& base) {
  kv.require_known(known_keys());
  PipelineConfig c = base;
  c.run_dir = kv.get_string("run_dir", c.run_dir.string());
  c.seed = kv.get_u64("seed", c.seed);
  c.train_seed = kv.get_u64("train_seed", c.train_seed);
  c.corpus.num_languages = kv.get_int("corpus.num_languages", c.corpus.num_languages);
  c.corpus.num_speakers = kv.get_int("corpus.num_speakers", c.corpus.num_speakers);
  c.corpus.utts_per_speaker = kv.get_int("corpus.utts_per_speaker", c.corpus.utts_per_speaker);
  c.corpus.eval_speakers = kv.get_int("corpus.eval_speakers", c.corpus.eval_speakers);
  c.corpus.eval_utts = kv.get_int("corpus.eval_utts", c.corpus.eval_utts);
  c.corpus.num_concepts = kv.get_int("corpus.num_concepts", c.corpus.num_concepts);
  c.corpus.min_words = kv.get_int("corpus.min_words", c.corpus.min_words);
  c.corpus.max_words = kv.get_int("corpus.max_words", c.corpus.max_words);
  c.corpus.sample_rate = kv.get_int("corpus.sample_rate", c.corpus.sample_rate);
  c.codec.hop = kv.get_int("codec.hop", c.codec.hop);
  c.codec.dims = kv.get_int("codec.dims", c.codec.dims);
  c.rvq_layers = kv.get_int("codec.rvq_layers", c.rvq_layers);
  c.rvq_codebook_size = kv.get_int("codec.codebook_size", c.rvq_codebook_size);
  c.rvq_iterations = kv.get_int("codec.iterations", c.rvq_iterations);
  c.mar.layers = kv.get_int("mar.layers", c.mar.layers);
  c.mar.attention_dim = kv.get_int("mar.attention_dim", c.mar.attention_dim);
  c.mar.ffn_dim = kv.get_int("mar.ffn_dim", c.mar.ffn_dim);
  c.mar.heads = kv.get_int("mar.heads", c.mar.heads);
  c.mar.max_len = kv.get_int("mar.max_len", c.mar.max_len);
  c.mar.dropout = kv.get_double("mar.dropout", c.mar.dropout);
  c.lid_dropout = kv.get_double("mar.lid_dropout", c.lid_dropout);
  c.pair_prob = kv.get_double("mar.pair_prob", c.pair_prob);
  load_schedule(kv, "mar", c.mar_train);
  c.mnar.layers = kv.get_int("mnar.layers", c.mnar.layers);
  c.mnar.attention_dim = kv.get_int("mnar.attention_dim", c.mnar.attention_dim);
  c.mnar.ffn_dim = kv.get_int("mnar.ffn_dim", c.mnar.ffn_dim);
  c.mnar.heads = kv.get_int("mnar.heads", c.mnar.heads);
  c.mnar.max_len = kv.get_int("mnar.max_len", c.mnar.max_len);
  c.mnar.dropout = kv.get_double("mnar.dropout", c.mnar.dropout);
  load_schedule(kv, "mnar", c.mnar_train);
  KeyValues rt = KeyValues::parse(c.recotrans.serialize());
  rt.merge(kv.section("recotrans"));
  rt.set("num_phonemes", std::max(1, c.recotrans.num_phonemes));
  const int keep_phonemes = c.recotrans.num_phonemes;
  c.recotrans = RecoTransConfig::parse(rt.to_string());
  c.recotrans.num_phonemes = keep_phonemes;
  load_schedule(kv, "recotrans_pretrain", c.recotrans_pretrain);
  load_schedule(kv, "recotrans_finetune", c.recotrans_finetune);
  c.decode.temperature = kv.get_double("decode.temperature", c.decode.temperature);
  c.decode.top_k = kv.get_int("decode.top_k", c.decode.top_k);
  c.decode.max_frames = kv.get_int("decode.max_frames", c.decode.max_frames);
  c.eval_bootstrap = kv.get_int("eval.bootstrap", c.eval_bootstrap);
  c.eval_confidence = kv.get_double("eval.confidence", c.eval_confidence);
  if (c.lid_dropout < 0.0 || c.lid_dropout > 1.0 || c.pair_prob < 0.0 || c.pair_prob > 1.0)
    throw InvalidArgument("config: mar.lid_dropout and mar.pair_prob must be probabilities");
  if (c.decode.top_k < 0 || c.decode.max_frames < 1) throw InvalidArgument("config: bad decode parameters");
  if (c.eval_bootstrap < 1 || !(c.eval_confidence > 0.0 && c.eval_confidence < 1.0))
    throw InvalidArgument("config: bad evaluation parameters");
  return c;
}

void PipelineConfig::finalize(const PhonemeInventory& inventory, int num_languages) {
  if (num_languages != corpus.num_languages) throw InvalidArgument("config: corpus language count mismatch");
  if (codec.sample_rate != corpus.sample_rate) codec.sample_rate = corpus.sample_rate;
  mar.phoneme_vocab = inventory.size();
  mar.acoustic_vocab = rvq_codebook_size + 1;
  mar.num_languages = num_languages;
  mnar.phoneme_vocab = inventory.size();
  mnar.acoustic_vocab = rvq_codebook_size;
  mnar.num_acoustic_layers = rvq_layers;
  recotrans.num_phonemes = inventory.num_phonemes();
  if (recotrans.vocab() != inventory.size()) throw InvalidArgument("config: inventory specials do not match");
  if (recotrans.downsample() != codec.hop)
    throw InvalidArgument("config: recognizer pre-net downsampling must equal the codec hop");
  mar.validate();
  mnar.validate();
  recotrans.validate();
}

namespace {

PipelineConfig finalized(const PipelineConfig& config, const Corpus& corpus) {
  PipelineConfig c = config;
  c.finalize(corpus.inventory, static_cast<int>(corpus.languages.size()));
  return c;
}

void log_step(const LogFn& log, const std::string& stage, long step, double loss, double lr, const std::string& extra = "") {
  if (!log) return;
  log("stage=" + stage + " step=" + std::to_string(step) + " loss=" + fmt("%.6g", loss) + " lr=" + fmt("%.6g", lr) +
      (extra.empty() ? "" : " " + extra));
}

template <typename Model>
void save_model(const fs::path& path, const std::string& kind, Model& model, const std::string& config, long step,
                const Rng& rng) {
  nn::make_checkpoint(kind, config, model.parameters(), static_cast<uint64_t>(step), rng.state()).save(path);
}

/// Cycles through a shuffled index list, reshuffling at every epoch.
class EpochSampler {
 public:
  EpochSampler(size_t n, Rng& rng) : order_(n), rng_(rng) {
    if (n == 0) throw InvalidArgument("no training examples");
    for (size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_.begin(), order_.end());
  }
  size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(order_.begin(), order_.end());
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<size_t> order_;
  Rng& rng_;
  size_t pos_ = 0;
};

std::vector<int> int_boundaries(const std::vector<long>& b) { return std::vector<int>(b.begin(), b.end()); }

}  // namespace

Corpus prepare_corpus(const PipelineConfig& config, const LogFn& log) {
  const RunPaths paths{config.run_dir};
  if (fs::exists(paths.corpus() / "manifest.tsv")) {
    if (log) log("stage=corpus action=load dir=" + paths.corpus().string());
    return Corpus::load(paths.corpus());
  }
  Corpus c = generate_corpus(config.corpus, config.train_seed);
  fs::create_directories(paths.corpus());
  c.save(paths.corpus());
  if (log)
    log("stage=corpus action=generate utterances=" + std::to_string(c.manifest.entries.size()) +
        " dir=" + paths.corpus().string());
  return c;
}

RvqModel train_codec(const PipelineConfig& config, const Corpus& corpus, const LogFn& log) {
  CodecParams params = config.codec;
  params.sample_rate = corpus.voice.sample_rate;
  std::vector<MatrixF> parts;
  Eigen::Index rows = 0;
  for (const Utterance* u : corpus.split(false)) {
    parts.push_back(analyze(corpus.waveform(*u), params).frames);
    rows += parts.back().rows();
  }
  MatrixF frames(rows, params.dims);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    frames.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  RvqTrainStats stats;
  RvqModel model = train_rvq(frames, config.rvq_layers, config.rvq_codebook_size, config.rvq_iterations,
                             derive_seed(config.train_seed, kTagCodec), params, &stats);
  if (log) {
    std::string norms;
    for (double v : stats.mean_residual_norm) norms += (norms.empty() ? "" : ",") + fmt("%.4g", v);
    log("stage=codec frames=" + std::to_string(rows) + " residual_norms=" + norms +
        " empty_cluster_splits=" + std::to_string(stats.empty_cluster_splits));
  }
  return model;
}

std::map<std::string, AcousticTokenGrid> encode_corpus(const Corpus& corpus, const RvqModel& rvq) {
  std::map<std::string, AcousticTokenGrid> out;
  for (const auto& u : corpus.manifest.entries) out[u.utt_id] = rvq_encode(analyze(corpus.waveform(u), rvq.params), rvq);
  return out;
}

namespace {

struct MarDataIndex {
  std::vector<const Utterance*> train;
  std::map<std::pair<std::string, int>, std::vector<const Utterance*>> by_speaker_language;
};

MarDataIndex index_training(const Corpus& corpus) {
  MarDataIndex idx;
  idx.train = corpus.split(false);
  for (const Utterance* u : idx.train)
    idx.by_speaker_language[{u->speaker_id, corpus.language_index(u->language)}].push_back(u);
  return idx;
}

PromptLayoutAR make_mar_example(const Utterance& u, const MarDataIndex& idx, const Corpus& corpus,
                                const std::map<std::string, AcousticTokenGrid>& tokens, const PipelineConfig& config,
                                Rng& rng) {
  const int nl = static_cast<int>(corpus.languages.size());
  const int lang_u = corpus.language_index(u.language);
  PromptLayoutAR layout;
  layout.phoneme_segments.push_back(u.phonemes.ids);
  const std::vector<int> a_u = tokens.at(u.utt_id).layer(0);
  layout.acoustic = a_u;
  layout.acoustic_language.assign(a_u.size(), lang_u);
  layout.target_language = lang_u;
  if (rng.bernoulli(config.pair_prob)) {
    const int lang_v = static_cast<int>(rng.below(nl));
    auto it = idx.by_speaker_language.find({u.speaker_id, lang_v});
    if (it != idx.by_speaker_language.end()) {
      std::vector<const Utterance*> pool;
      for (const Utterance* v : it->second)
        if (v != &u) pool.push_back(v);
      if (!pool.empty()) {
        const Utterance& v = *pool[rng.below(static_cast<int64_t>(pool.size()))];
        layout.phoneme_segments.push_back(v.phonemes.ids);
        const std::vector<int> a_v = tokens.at(v.utt_id).layer(0);
        layout.acoustic.insert(layout.acoustic.end(), a_v.begin(), a_v.end());
        layout.acoustic_language.insert(layout.acoustic_language.end(), a_v.size(), lang_v);
        layout.target_language = lang_v;
      }
    }
  }
  if (rng.bernoulli(config.lid_dropout)) {
    std::fill(layout.acoustic_language.begin(), layout.acoustic_language.end(), nl);
    layout.target_language = nl;
  }
  return layout;
}

}  // namespace

std::vector<PromptLayoutAR> mar_examples(const Corpus& corpus, const std::map<std::string, AcousticTokenGrid>& tokens,
                                         const PipelineConfig& config, Rng& rng) {
  const MarDataIndex idx = index_training(corpus);
  std::vector<const Utterance*> order = idx.train;
  rng.shuffle(order.begin(), order.end());
  std::vector<PromptLayoutAR> out;
  for (const Utterance* u : order) out.push_back(make_mar_example(*u, idx, corpus, tokens, config, rng));
  return out;
}

void train_mar(const PipelineConfig& config_in, const Corpus& corpus,
               const std::map<std::string, AcousticTokenGrid>& tokens, const LogFn& log) {
  const PipelineConfig config = finalized(config_in, corpus);
  MarModel model(config.mar, derive_seed(config.train_seed, kTagMarInit));
  nn::Adam<float> opt(model.parameters(), config.mar_train.adam);
  Rng data_rng(derive_seed(config.train_seed, kTagMarData));
  Rng drop_rng(derive_seed(config.train_seed, kTagMarDropout));
  const MarDataIndex idx = index_training(corpus);
  EpochSampler sampler(idx.train.size(), data_rng);
  if (log) log("stage=mar parameters=" + std::to_string(nn::count_parameters(model.parameters())));
  double running = 0.0;
  int in_window = 0;
  for (int step = 1; step <= config.mar_train.steps; ++step) {
    std::vector<PromptLayoutAR> batch;
    for (int b = 0; b < config.mar_train.batch_size; ++b)
      batch.push_back(make_mar_example(*idx.train[sampler.next()], idx, corpus, tokens, config, data_rng));
    running += mar_train_step(model, opt, batch, &drop_rng);
    ++in_window;
    if (step % config.mar_train.log_every == 0 || step == config.mar_train.steps) {
      log_step(log, "mar", step, running / in_window,
               nn::inverse_sqrt_lr(step, config.mar_train.adam.max_lr, config.mar_train.adam.warmup_steps));
      running = 0.0;
      in_window = 0;
    }
  }
  save_model(RunPaths{config.run_dir}.mar(), "mar", model, config.mar.serialize(), config.mar_train.steps, data_rng);
}

void train_mnar(const PipelineConfig& config_in, const Corpus& corpus,
                const std::map<std::string, AcousticTokenGrid>& tokens, const LogFn& log) {
  const PipelineConfig config = finalized(config_in, corpus);
  std::vector<MnarSample> samples;
  for (const Utterance* u : corpus.split(false)) {
    if (!u->prev_utt) continue;
    const Utterance& ref = adjacent_pair(*u, corpus.manifest);
    samples.push_back(MnarSample{u->phonemes.ids, tokens.at(ref.utt_id), tokens.at(u->utt_id)});
  }
  MnarModel model(config.mnar, derive_seed(config.train_seed, kTagMnarInit));
  nn::Adam<float> opt(model.parameters(), config.mnar_train.adam);
  Rng data_rng(derive_seed(config.train_seed, kTagMnarData));
  Rng level_rng(derive_seed(config.train_seed, kTagMnarLevel));
  Rng drop_rng(derive_seed(config.train_seed, kTagMnarDropout));
  EpochSampler sampler(samples.size(), data_rng);
  if (log)
    log("stage=mnar parameters=" + std::to_string(nn::count_parameters(model.parameters())) +
        " samples=" + std::to_string(samples.size()));
  double running = 0.0;
  int in_window = 0;
  for (int step = 1; step <= config.mnar_train.steps; ++step) {
    std::vector<MnarSample> batch;
    for (int b = 0; b < config.mnar_train.batch_size; ++b) batch.push_back(samples[sampler.next()]);
    int level = 0;
    running += mnar_train_step(model, opt, batch, level_rng, &level, &drop_rng);
    ++in_window;
    if (step % config.mnar_train.log_every == 0 || step == config.mnar_train.steps) {
      log_step(log, "mnar", step, running / in_window,
               nn::inverse_sqrt_lr(step, config.mnar_train.adam.max_lr, config.mnar_train.adam.warmup_steps),
               "last_level=" + std::to_string(level));
      running = 0.0;
      in_window = 0;
    }
  }
  save_model(RunPaths{config.run_dir}.mnar(), "mnar", model, config.mnar.serialize(), config.mnar_train.steps, data_rng);
}

namespace {

/// Translation target language used by the recognizer: the next language in
/// corpus order.
int translation_language(int source, int num_languages) { return (source + 1) % num_languages; }

std::vector<int> translated_phonemes(const Corpus& corpus, const Utterance& u) {
  const int nl = static_cast<int>(corpus.languages.size());
  const std::string& to = corpus.languages[translation_language(corpus.language_index(u.language), nl)];
  const std::string text = corpus.translate(u.text, u.language, to);
  return phonemize(text, corpus.lexicons.find(to)->second, corpus.inventory).ids;
}

}  // namespace

void pretrain_recotrans(const PipelineConfig& config_in, const Corpus& corpus, const LogFn& log) {
  const PipelineConfig config = finalized(config_in, corpus);
  const auto& rc = config.recotrans;
  std::vector<SpeechSample> speech;
  std::vector<TextPair> text;
  for (const Utterance* u : corpus.split(false)) {
    std::vector<float> wave = corpus.waveform(*u);
    const int frames = rc.frames_for(static_cast<int>(wave.size()));
    const auto bounds = int_boundaries(segment_boundaries(u->phonemes, corpus.speaker(u->speaker_id), u->language, corpus.voice));
    speech.push_back(SpeechSample{std::move(wave), frame_targets(u->phonemes.ids, bounds, frames, rc)});
    text.push_back(TextPair{u->phonemes.ids, translated_phonemes(corpus, *u)});
  }
  RecoTransModel model(rc, derive_seed(config.train_seed, kTagRecoInit));
  nn::Adam<float> opt(model.parameters(), config.recotrans_pretrain.adam);
  Rng data_rng(derive_seed(config.train_seed, kTagRecoData));
  Rng mask_rng(derive_seed(config.train_seed, kTagRecoMask));
  Rng drop_rng(derive_seed(config.train_seed, kTagRecoDropout));
  EpochSampler speech_sampler(speech.size(), data_rng);
  EpochSampler text_sampler(text.size(), data_rng);
  if (log) log("stage=recotrans_pretrain parameters=" + std::to_string(nn::count_parameters(model.parameters())));
  PretrainLosses running;
  int in_window = 0;
  const auto& sched = config.recotrans_pretrain;
  for (int step = 1; step <= sched.steps; ++step) {
    std::vector<SpeechSample> sb;
    std::vector<TextPair> tb;
    for (int b = 0; b < sched.batch_size; ++b) {
      sb.push_back(speech[speech_sampler.next()]);
      tb.push_back(text[text_sampler.next()]);
    }
    const PretrainLosses l = pretrain_step(model, opt, sb, tb, mask_rng, &drop_rng);
    running.speech += l.speech;
    running.text += l.text;
    ++in_window;
    if (step % sched.log_every == 0 || step == sched.steps) {
      log_step(log, "recotrans_pretrain", step, (running.speech + running.text) / in_window,
               nn::inverse_sqrt_lr(step, sched.adam.max_lr, sched.adam.warmup_steps),
               "l_speech=" + fmt("%.6g", running.speech / in_window) + " l_text=" + fmt("%.6g", running.text / in_window));
      running = {};
      in_window = 0;
    }
  }
  save_model(RunPaths{config.run_dir}.recotrans_pretrained(), "recotrans", model, rc.serialize(), sched.steps, data_rng);
}

void finetune_recotrans(const PipelineConfig& config_in, const Corpus& corpus, const LogFn& log) {
  const PipelineConfig config = finalized(config_in, corpus);
  const auto& rc = config.recotrans;
  const RunPaths paths{config.run_dir};
  RecoTransModel model(rc, derive_seed(config.train_seed, kTagRecoInit));
  if (fs::exists(paths.recotrans_pretrained())) {
    nn::restore_parameters(nn::Checkpoint::load(paths.recotrans_pretrained()), model.parameters());
  } else if (log) {
    log("stage=recotrans_finetune warning=no_pretrained_checkpoint");
  }
  std::vector<FinetuneSample> samples;
  for (const Utterance* u : corpus.split(false))
    samples.push_back(FinetuneSample{corpus.waveform(*u), u->phonemes.ids, translated_phonemes(corpus, *u)});
  nn::Adam<float> opt(model.parameters(), config.recotrans_finetune.adam);
  Rng data_rng(derive_seed(config.train_seed, kTagRecoData + 100));
  Rng drop_rng(derive_seed(config.train_seed, kTagRecoDropout + 100));
  EpochSampler sampler(samples.size(), data_rng);
  double running = 0.0;
  int in_window = 0;
  const auto& sched = config.recotrans_finetune;
  for (int step = 1; step <= sched.steps; ++step) {
    std::vector<FinetuneSample> batch;
    for (int b = 0; b < sched.batch_size; ++b) batch.push_back(samples[sampler.next()]);
    running += finetune_step(model, opt, batch, &drop_rng);
    ++in_window;
    if (step % sched.log_every == 0 || step == sched.steps) {
      log_step(log, "recotrans_finetune", step, running / in_window,
               nn::inverse_sqrt_lr(step, sched.adam.max_lr, sched.adam.warmup_steps));
      running = 0.0;
      in_window = 0;
    }
  }
  save_model(paths.recotrans(), "recotrans", model, rc.serialize(), sched.steps, data_rng);
}

Models load_models(const PipelineConfig& config) {
  const RunPaths paths{config.run_dir};
  Models m;
  if (!fs::exists(paths.codec())) throw InvalidArgument("no trained codec in " + config.run_dir.string());
  m.rvq = RvqModel::load(paths.codec());
  auto check_kind = [](const nn::Checkpoint& c, const std::string& kind, const fs::path& p) {
    if (c.kind != kind) throw FormatError(p.string() + ": expected a " + kind + " checkpoint, found " + c.kind);
  };
  if (fs::exists(paths.mar())) {
    const auto ckpt = nn::Checkpoint::load(paths.mar());
    check_kind(ckpt, "mar", paths.mar());
    m.mar = std::make_unique<MarModel>(MarConfig::parse(ckpt.config), 0);
    nn::restore_parameters(ckpt, m.mar->parameters());
  }
  if (fs::exists(paths.mnar())) {
    const auto ckpt = nn::Checkpoint::load(paths.mnar());
    check_kind(ckpt, "mnar", paths.mnar());
    m.mnar = std::make_unique<MnarModel>(MnarConfig::parse(ckpt.config), 0);
    nn::restore_parameters(ckpt, m.mnar->parameters());
  }
  if (fs::exists(paths.recotrans())) {
    const auto ckpt = nn::Checkpoint::load(paths.recotrans());
    check_kind(ckpt, "recotrans", paths.recotrans());
    m.recotrans = std::make_unique<RecoTransModel>(RecoTransConfig::parse(ckpt.config), 0);
    nn::restore_parameters(ckpt, m.recotrans->parameters());
  }
  if (m.mar && m.mar->config().acoustic_vocab != m.rvq.codebook_size() + 1)
    throw InvalidArgument("AR model vocabulary does not match the codec");
  if (m.mnar && (m.mnar->config().acoustic_vocab != m.rvq.codebook_size() ||
                 m.mnar->config().num_acoustic_layers != m.rvq.layers()))
    throw InvalidArgument("NAR model does not match the codec");
  return m;
}

SynthesisResult xtts_synthesize(const Models& models, std::span<const float> source_waveform,
                                std::span<const int> source_phonemes, std::span<const int> target_phonemes,
                                int source_language, int target_language, const DecodeParams& decode, LidMode lid) {
  if (!models.mar || !models.mnar) throw InvalidArgument("synthesis needs trained AR and NAR models");
  if (target_phonemes.empty()) throw InvalidArgument("empty target phoneme sequence");
  const int nl = models.mar->config().num_languages;
  if (source_language < 0 || source_language >= nl || target_language < 0 || target_language >= nl)
    throw InvalidArgument("language index out of range");
  const AcousticTokenGrid source_grid = rvq_encode(analyze(source_waveform, models.rvq.params), models.rvq);
  PromptLayoutAR layout;
  layout.phoneme_segments = {std::vector<int>(source_phonemes.begin(), source_phonemes.end()),
                             std::vector<int>(target_phonemes.begin(), target_phonemes.end())};
  layout.acoustic = source_grid.layer(0);
  const int neutral = models.mar->config().neutral_language();
  const int prompt_lid = lid == LidMode::kNone ? neutral : source_language;
  layout.acoustic_language.assign(layout.acoustic.size(), prompt_lid);
  layout.target_language = lid == LidMode::kTarget ? target_language : lid == LidMode::kNone ? neutral : source_language;
  const MarSample sample = mar_sample(*models.mar, layout, decode);
  SynthesisResult out;
  out.truncated = sample.truncated;
  if (sample.tokens.empty()) return out;
  AcousticTokenGrid first(static_cast<int>(sample.tokens.size()), 1);
  first.set_layer(0, sample.tokens);
  out.grid = mnar_infer(*models.mnar, target_phonemes, source_grid, first);
  out.waveform = synthesize(rvq_decode(out.grid, models.rvq), models.rvq.params);
  return out;
}

SynthesisResult xtts_synthesize(const Models& models, const Corpus& corpus, std::span<const float> source_waveform,
                                const std::string& source_text, const std::string& source_language,
                                const std::string& target_text, const std::string& target_language,
                                const DecodeParams& decode) {
  auto lexicon = [&](const std::string& lang) -> const Lexicon& {
    auto it = corpus.lexicons.find(lang);
    if (it == corpus.lexicons.end()) throw InvalidArgument("unknown language '" + lang + "'");
    return it->second;
  };
  const PhonemeSequence s = phonemize(source_text, lexicon(source_language), corpus.inventory);
  const PhonemeSequence t = phonemize(target_text, lexicon(target_language), corpus.inventory);
  return xtts_synthesize(models, source_waveform, s.ids, t.ids, corpus.language_index(source_language),
                         corpus.language_index(target_language), decode);
}

S2stResult s2st_translate(const Models& models, std::span<const float> source_waveform, int source_language,
                          int target_language, const DecodeParams& decode) {
  if (!models.recotrans) throw InvalidArgument("speech translation needs a trained recognizer");
  S2stResult out;
  out.transcription = transcribe_translate(*models.recotrans, source_waveform);
  if (out.transcription.target.empty()) return out;
  out.synthesis = xtts_synthesize(models, source_waveform, out.transcription.source, out.transcription.target,
                                  source_language, target_language, decode);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation report

namespace {

const char* kRecordHeader =
    "#utt_id\ttarget_language\txtts_per\tf0_ratio\taccent_target\taccent_none\taccent_wrong\tsim_src_target\t"
    "sim_src_none\ts2st_per\tsim_hyp_src\tsim_hyp_tgt\ttruncated\tflagged\treference\ts2st_hyp\toracle_hyp";

std::string g17(double v) { return fmt("%.17g", v); }

std::string join(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_ids(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  int v;
  while (in >> v) out.push_back(v);
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t t = line.find('\t', start);
    out.push_back(line.substr(start, t == std::string::npos ? std::string::npos : t - start));
    if (t == std::string::npos) break;
    start = t + 1;
  }
  return out;
}

}  // namespace

void EvalReport::aggregate(int resamples, double confidence, uint64_t seed) {
  aggregates.clear();
  if (records.empty()) return;
  auto add = [&](const std::string& name, const std::function<double(const EvalRecord&)>& f) {
    std::vector<double> v;
    for (const auto& r : records) v.push_back(f(r));
    aggregates.push_back({name, bootstrap_mean(v, confidence, resamples, derive_seed(seed, aggregates.size()))});
  };
  add("xtts_per", [](const EvalRecord& r) { return r.xtts_per; });
  add("f0_within_10pct", [](const EvalRecord& r) { return std::abs(r.f0_ratio - 1.0) <= 0.1 ? 1.0 : 0.0; });
  add("accent_target", [](const EvalRecord& r) { return r.accent_target; });
  add("accent_none", [](const EvalRecord& r) { return r.accent_none; });
  add("accent_wrong", [](const EvalRecord& r) { return r.accent_wrong; });
  add("accent_target_minus_none", [](const EvalRecord& r) { return r.accent_target - r.accent_none; });
  add("accent_none_minus_wrong", [](const EvalRecord& r) { return r.accent_none - r.accent_wrong; });
  add("sim_src_target", [](const EvalRecord& r) { return r.sim_src_target; });
  add("sim_src_none", [](const EvalRecord& r) { return r.sim_src_none; });
  add("sim_none_minus_target", [](const EvalRecord& r) { return r.sim_src_none - r.sim_src_target; });
  add("s2st_per", [](const EvalRecord& r) { return r.s2st_per; });
  add("sim_hyp_src", [](const EvalRecord& r) { return r.sim_hyp_src; });
  add("sim_hyp_tgt", [](const EvalRecord& r) { return r.sim_hyp_tgt; });
  add("truncated", [](const EvalRecord& r) { return r.truncated ? 1.0 : 0.0; });
  add("flagged", [](const EvalRecord& r) { return r.flagged ? 1.0 : 0.0; });
  std::vector<std::vector<int>> refs, s2st, oracle;
  for (const auto& r : records) {
    refs.push_back(r.reference);
    s2st.push_back(r.s2st_hyp);
    oracle.push_back(r.oracle_hyp);
  }
  bleu_s2st = bleu(s2st, refs);
  bleu_oracle_text = bleu(oracle, refs);
}

const EvalAggregate& EvalReport::find(const std::string& name) const {
  for (const auto& a : aggregates)
    if (a.name == name) return a;
  throw InvalidArgument("no aggregate named " + name);
}

void EvalReport::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << kRecordHeader << "\n";
  for (const auto& r : records) {
    out << r.utt_id << '\t' << r.target_language << '\t' << g17(r.xtts_per) << '\t' << g17(r.f0_ratio) << '\t'
        << g17(r.accent_target) << '\t' << g17(r.accent_none) << '\t' << g17(r.accent_wrong) << '\t'
        << g17(r.sim_src_target) << '\t' << g17(r.sim_src_none) << '\t' << g17(r.s2st_per) << '\t'
        << g17(r.sim_hyp_src) << '\t' << g17(r.sim_hyp_tgt) << '\t' << int(r.truncated) << '\t' << int(r.flagged)
        << '\t' << join(r.reference) << '\t' << join(r.s2st_hyp) << '\t' << join(r.oracle_hyp) << "\n";
  }
  for (const auto& a : aggregates)
    out << "#aggregate\t" << a.name << '\t' << g17(a.interval.mean) << '\t' << g17(a.interval.lo) << '\t'
        << g17(a.interval.hi) << "\n";
  out << "#bleu\ts2st\t" << g17(bleu_s2st) << "\n";
  out << "#bleu\toracle_text\t" << g17(bleu_oracle_text) << "\n";
}

EvalReport EvalReport::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  EvalReport rep;
  std::string line;
  auto num = [&](const std::string& s) {
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad number '" + s + "'");
    }
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f[0] == "#aggregate") {
      if (f.size() != 5) throw FormatError(path.string() + ": bad aggregate line");
      rep.aggregates.push_back({f[1], Interval{num(f[2]), num(f[3]), num(f[4])}});
    } else if (f[0] == "#bleu") {
      if (f.size() != 3) throw FormatError(path.string() + ": bad bleu line");
      (f[1] == "s2st" ? rep.bleu_s2st : rep.bleu_oracle_text) = num(f[2]);
    } else if (line[0] == '#') {
      continue;
    } else {
      if (f.size() != 17) throw FormatError(path.string() + ": expected 17 fields per record");
      EvalRecord r;
      r.utt_id = f[0];
      r.target_language = f[1];
      r.xtts_per = num(f[2]);
      r.f0_ratio = num(f[3]);
      r.accent_target = num(f[4]);
      r.accent_none = num(f[5]);
      r.accent_wrong = num(f[6]);
      r.sim_src_target = num(f[7]);
      r.sim_src_none = num(f[8]);
      r.s2st_per = num(f[9]);
      r.sim_hyp_src = num(f[10]);
      r.sim_hyp_tgt = num(f[11]);
      r.truncated = f[12] == "1";
      r.flagged = f[13] == "1";
      r.reference = parse_ids(f[14]);
      r.s2st_hyp = parse_ids(f[15]);
      r.oracle_hyp = parse_ids(f[16]);
      rep.records.push_back(std::move(r));
    }
  }
  return rep;
}

std::string EvalReport::summary() const {
  std::string s = "items=" + std::to_string(records.size()) + "\n";
  for (const auto& a : aggregates)
    s += a.name + " mean=" + fmt("%.4f", a.interval.mean) + " ci=[" + fmt("%.4f", a.interval.lo) + ", " +
         fmt("%.4f", a.interval.hi) + "]\n";
  s += "bleu_s2st=" + fmt("%.4f", bleu_s2st) + " bleu_oracle_text=" + fmt("%.4f", bleu_oracle_text) + "\n";
  return s;
}

EvalReport evaluate(const PipelineConfig& config, const Corpus& corpus, const Models& models, const LogFn& log,
                    int max_items) {
  struct Item {
    const Utterance* source;
    const Utterance* target;
  };
  std::vector<Item> items;
  for (const Utterance* u : corpus.split(true))
    for (const auto& lang : corpus.languages)
      if (lang != u->language)
        if (const Utterance* v = corpus.parallel(*u, lang)) items.push_back({u, v});
  if (max_items >= 0 && static_cast<int>(items.size()) > max_items) items.resize(max_items);

  EvalReport rep;
  const VoiceModel& voice = corpus.voice;
  for (size_t k = 0; k < items.size(); ++k) {
    const Utterance& src = *items[k].source;
    const Utterance& tgt = *items[k].target;
    const int ls = corpus.language_index(src.language);
    const int lt = corpus.language_index(tgt.language);
    const std::vector<float> src_wave = corpus.waveform(src);
    const std::vector<float> tgt_wave = corpus.waveform(tgt);
    const OracleResult src_dec = oracle_decode(src_wave, voice);
    const OracleResult tgt_dec = oracle_decode(tgt_wave, voice);
    const SpeakerProfile& speaker = corpus.speaker(src.speaker_id);
    auto params_for = [&](uint64_t variant) {
      DecodeParams p = config.decode;
      p.seed = derive_seed(derive_seed(config.seed, kTagEval), k * 8 + variant);
      return p;
    };

    EvalRecord r;
    r.utt_id = src.utt_id;
    r.target_language = tgt.language;
    r.reference = tgt.phonemes.ids;
    bool flagged = src_dec.low_confidence || tgt_dec.low_confidence;

    const auto run = [&](LidMode mode, uint64_t variant) {
      const SynthesisResult s = xtts_synthesize(models, src_wave, src.phonemes.ids, tgt.phonemes.ids, ls, lt,
                                                params_for(variant), mode);
      r.truncated = r.truncated || s.truncated;
      return oracle_decode(s.waveform, voice);
    };
    const OracleResult with_target = run(LidMode::kTarget, 0);
    const OracleResult with_none = run(LidMode::kNone, 1);
    const OracleResult with_source = run(LidMode::kSource, 2);
    r.xtts_per = wer(with_target.phonemes.ids, r.reference);
    r.f0_ratio = with_target.f0 / speaker.f0;
    const ScoredValue at = accent_score(with_target, tgt.language, corpus);
    const ScoredValue an = accent_score(with_none, tgt.language, corpus);
    const ScoredValue aw = accent_score(with_source, tgt.language, corpus);
    r.accent_target = at.value;
    r.accent_none = an.value;
    r.accent_wrong = aw.value;
    const ScoredValue st = speaker_similarity(with_target, src_dec);
    const ScoredValue sn = speaker_similarity(with_none, src_dec);
    r.sim_src_target = st.value;
    r.sim_src_none = sn.value;
    flagged = flagged || at.flagged || an.flagged || aw.flagged || st.flagged || sn.flagged;

    if (models.recotrans) {
      const S2stResult s2 = s2st_translate(models, src_wave, ls, lt, params_for(3));
      r.truncated = r.truncated || s2.synthesis.truncated;
      flagged = flagged || s2.transcription.flagged();
      const OracleResult hyp = oracle_decode(s2.synthesis.waveform, voice);
      r.s2st_hyp = hyp.phonemes.ids;
      r.s2st_per = wer(r.s2st_hyp, r.reference);
      const ScoredValue hs = speaker_similarity(hyp, src_dec);
      const ScoredValue ht = speaker_similarity(hyp, tgt_dec);
      r.sim_hyp_src = hs.value;
      r.sim_hyp_tgt = ht.value;
      flagged = flagged || hs.flagged || ht.flagged;
      const SynthesisResult oracle_text = xtts_synthesize(models, src_wave, s2.transcription.source, r.reference, ls,
                                                          lt, params_for(3));
      r.truncated = r.truncated || oracle_text.truncated;
      r.oracle_hyp = oracle_decode(oracle_text.waveform, voice).phonemes.ids;
    }
    r.flagged = flagged;
    if (log)
      log("stage=eval item=" + std::to_string(k + 1) + "/" + std::to_string(items.size()) + " utt=" + src.utt_id +
          " to=" + tgt.language + " per=" + fmt("%.3f", r.xtts_per) + " f0_ratio=" + fmt("%.3f", r.f0_ratio) +
          " accent=" + fmt("%.3f", r.accent_target) + "/" + fmt("%.3f", r.accent_none) + "/" +
          fmt("%.3f", r.accent_wrong) + " s2st_per=" + fmt("%.3f", r.s2st_per));
    rep.records.push_back(std::move(r));
  }
  rep.aggregate(config.eval_bootstrap, config.eval_confidence, derive_seed(config.seed, kTagBootstrap));
  return rep;
}

EvalReport run_pipeline(const PipelineConfig& config, const LogFn& log, bool force) {
  const RunPaths paths{config.run_dir};
  fs::create_directories(paths.root);
  if (force) {
    for (const auto& p : {paths.codec(), paths.mar(), paths.mnar(), paths.recotrans_pretrained(), paths.recotrans()})
      fs::remove(p);
    fs::remove_all(paths.corpus());
  }
  config.to_key_values().save(paths.config());
  const Corpus corpus = prepare_corpus(config, log);
  RvqModel rvq;
  if (fs::exists(paths.codec())) {
    rvq = RvqModel::load(paths.codec());
  } else {
    rvq = train_codec(config, corpus, log);
    rvq.save(paths.codec());
  }
  if (!fs::exists(paths.mar()) || !fs::exists(paths.mnar())) {
    const auto tokens = encode_corpus(corpus, rvq);
    if (!fs::exists(paths.mar())) train_mar(config, corpus, tokens, log);
    if (!fs::exists(paths.mnar())) train_mnar(config, corpus, tokens, log);
  }
  if (!fs::exists(paths.recotrans())) {
    if (!fs::exists(paths.recotrans_pretrained())) pretrain_recotrans(config, corpus, log);
    finetune_recotrans(config, corpus, log);
  }
  const Models models = load_models(config);
  EvalReport report = evaluate(config, corpus, models, log);
  report.save(paths.report());
  return report;
}

}  // namespace vallex
