#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vallex/codec.hpp"
#include "vallex/config.hpp"
#include "vallex/corpus.hpp"
#include "vallex/mar.hpp"
#include "vallex/metrics.hpp"
#include "vallex/mnar.hpp"
#include "vallex/nn/optim.hpp"
#include "vallex/recotrans.hpp"

namespace vallex {

struct TrainSchedule {
  int steps = 1000;
  int batch_size = 16;
  nn::AdamConfig adam;
  int log_every = 50;
};

struct PipelineConfig {
  std::filesystem::path run_dir = "run";
  uint64_t seed = 1;          // sampling and evaluation
  uint64_t train_seed = 1;    // corpus, codec and model training

  CorpusSpec corpus;
  CodecParams codec;
  int rvq_layers = 8;
  int rvq_codebook_size = 64;
  int rvq_iterations = 20;

  MarConfig mar;              // vocab sizes are filled from the corpus and codec
  TrainSchedule mar_train;
  double lid_dropout = 0.1;   // fraction of samples trained with the neutral LID
  double pair_prob = 0.5;     // fraction of samples built from two same-speaker utterances

  MnarConfig mnar;
  TrainSchedule mnar_train;

  RecoTransConfig recotrans;
  TrainSchedule recotrans_pretrain;
  TrainSchedule recotrans_finetune;

  DecodeParams decode;

  int eval_bootstrap = 2000;
  double eval_confidence = 0.9;

  /// Desk-scale defaults for the full experiment.
  static PipelineConfig desk();
  static PipelineConfig from_key_values(const KeyValues& kv, const PipelineConfig& base);
  KeyValues to_key_values() const;
  /// Fills derived vocabulary sizes and checks cross-component consistency.
  void finalize(const PhonemeInventory& inventory, int num_languages);
};

using LogFn = std::function<void(const std::string&)>;

/// Trained components of a run, loaded read-only.
struct Models {
  RvqModel rvq;
  std::unique_ptr<MarModel> mar;
  std::unique_ptr<MnarModel> mnar;
  std::unique_ptr<RecoTransModel> recotrans;
};

/// Run-directory layout.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path codec() const { return root / "codec.rvq"; }
  std::filesystem::path mar() const { return root / "mar.ckpt"; }
  std::filesystem::path mnar() const { return root / "mnar.ckpt"; }
  std::filesystem::path recotrans_pretrained() const { return root / "recotrans_pretrain.ckpt"; }
  std::filesystem::path recotrans() const { return root / "recotrans.ckpt"; }
  std::filesystem::path report() const { return root / "eval_report.tsv"; }
  std::filesystem::path config() const { return root / "config.txt"; }
};

Corpus prepare_corpus(const PipelineConfig& config, const LogFn& log);
RvqModel train_codec(const PipelineConfig& config, const Corpus& corpus, const LogFn& log);

/// Acoustic token grids of every utterance, keyed by utt_id.
std::map<std::string, AcousticTokenGrid> encode_corpus(const Corpus& corpus, const RvqModel& rvq);

/// Training examples for the AR model built from the training split.
std::vector<PromptLayoutAR> mar_examples(const Corpus& corpus, const std::map<std::string, AcousticTokenGrid>& tokens,
                                         const PipelineConfig& config, Rng& rng);

void train_mar(const PipelineConfig& config, const Corpus& corpus, const std::map<std::string, AcousticTokenGrid>& tokens,
               const LogFn& log);
void train_mnar(const PipelineConfig& config, const Corpus& corpus,
                const std::map<std::string, AcousticTokenGrid>& tokens, const LogFn& log);
void pretrain_recotrans(const PipelineConfig& config, const Corpus& corpus, const LogFn& log);
void finetune_recotrans(const PipelineConfig& config, const Corpus& corpus, const LogFn& log);

/// Loads whichever trained components exist in the run directory.
Models load_models(const PipelineConfig& config);

/// Which LID the generated positions carry.
enum class LidMode { kTarget, kNone, kSource };

struct SynthesisResult {
  std::vector<float> waveform;
  AcousticTokenGrid grid;
  bool truncated = false;
};

/// Zero-shot cross-lingual TTS from phoneme inputs.
SynthesisResult xtts_synthesize(const Models& models, std::span<const float> source_waveform,
                                std::span<const int> source_phonemes, std::span<const int> target_phonemes,
                                int source_language, int target_language, const DecodeParams& decode,
                                LidMode lid = LidMode::kTarget);

/// Text front end: phonemizes both transcripts with their languages' lexicons.
SynthesisResult xtts_synthesize(const Models& models, const Corpus& corpus, std::span<const float> source_waveform,
                                const std::string& source_text, const std::string& source_language,
                                const std::string& target_text, const std::string& target_language,
                                const DecodeParams& decode);

struct S2stResult {
  SynthesisResult synthesis;
  Transcription transcription;
};

S2stResult s2st_translate(const Models& models, std::span<const float> source_waveform, int source_language,
                          int target_language, const DecodeParams& decode);

/// One evaluated (prompt, target language) item.
struct EvalRecord {
  std::string utt_id;             // source prompt utterance
  std::string target_language;
  double xtts_per = 0.0;          // phoneme error rate of the correct-LID synthesis
  double f0_ratio = 0.0;          // decoded f0 / prompt speaker f0
  double accent_target = 0.0;     // accent score, correct LID
  double accent_none = 0.0;       // accent score, neutral LID
  double accent_wrong = 0.0;      // accent score, source LID on generated positions
  double sim_src_target = 0.0;    // similarity to the source prompt, correct LID
  double sim_src_none = 0.0;      // similarity to the source prompt, neutral LID
  double s2st_per = 0.0;          // end-to-end phoneme error rate vs the reference
  double sim_hyp_src = 0.0;       // S2ST output vs source speech
  double sim_hyp_tgt = 0.0;       // S2ST output vs reference target speech
  bool truncated = false;
  bool flagged = false;           // any low-confidence decode or empty transcription
  std::vector<int> reference;     // target phonemes
  std::vector<int> s2st_hyp;      // oracle-decoded phonemes of the S2ST output
  std::vector<int> oracle_hyp;    // oracle-decoded phonemes, oracle target text variant
};

struct EvalAggregate {
  std::string name;
  Interval interval;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  std::vector<EvalAggregate> aggregates;
  double bleu_s2st = 0.0;
  double bleu_oracle_text = 0.0;

  /// Recomputes aggregates (means with bootstrap intervals) and BLEU from records.
  void aggregate(int resamples, double confidence, uint64_t seed);
  const EvalAggregate& find(const std::string& name) const;
  /// Tab-separated, one record per line, then "#aggregate" lines.
  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
  std::string summary() const;
};

/// Evaluates every unseen-speaker utterance in every other language.
EvalReport evaluate(const PipelineConfig& config, const Corpus& corpus, const Models& models, const LogFn& log,
                    int max_items = -1);

/// Full workflow: corpus, codec, models (skipping stages whose outputs exist
/// unless `force`), then evaluation.
EvalReport run_pipeline(const PipelineConfig& config, const LogFn& log, bool force = false);

}  // namespace vallex
