// Command-line driver for the training workflows and the two synthesis tasks.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vallex/common.hpp"
#include "vallex/pipeline.hpp"
#include "vallex/wav.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;
using namespace vallex;

struct GlobalOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string run_dir;
  int64_t seed = -1;
  double temperature = -1.0;
  int top_k = -1;
  int max_frames = -1;
};

class Logger {
 public:
  explicit Logger(const fs::path& file) : start_(std::chrono::steady_clock::now()) {
    fs::create_directories(file.parent_path());
    out_.open(file, std::ios::app);
  }
  void operator()(const std::string& line) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    char prefix[32];
    std::snprintf(prefix, sizeof prefix, "t=%.1f ", t);
    std::cerr << prefix << line << "\n";
    if (out_) out_ << prefix << line << "\n" << std::flush;
  }

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

PipelineConfig resolve_config(const GlobalOptions& g) {
  KeyValues kv;
  if (!g.config_file.empty()) kv = KeyValues::load(g.config_file);
  kv.apply_environment("VALLEX_", environ);
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (!g.run_dir.empty()) kv.set("run_dir", g.run_dir);
  if (g.seed >= 0) kv.set("seed", static_cast<uint64_t>(g.seed));
  if (g.temperature >= 0.0) kv.set("decode.temperature", g.temperature);
  if (g.top_k >= 0) kv.set("decode.top_k", g.top_k);
  if (g.max_frames >= 0) kv.set("decode.max_frames", g.max_frames);
  return PipelineConfig::from_key_values(kv, PipelineConfig::desk());
}

Corpus load_corpus(const PipelineConfig& c) {
  const RunPaths paths{c.run_dir};
  if (!fs::exists(paths.corpus() / "manifest.tsv"))
    throw InvalidArgument("no corpus in " + c.run_dir.string() + "; run corpus-gen first");
  return Corpus::load(paths.corpus());
}

std::map<std::string, AcousticTokenGrid> corpus_tokens(const PipelineConfig& c, const Corpus& corpus) {
  const RunPaths paths{c.run_dir};
  if (!fs::exists(paths.codec())) throw InvalidArgument("no codec in " + c.run_dir.string() + "; run codec-train first");
  return encode_corpus(corpus, RvqModel::load(paths.codec()));
}

std::string labels(const std::vector<int>& ids, const PhonemeInventory& inv) { return detokenize(ids, inv); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-lingual codec language model toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("-c,--config", g.config_file, "Key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config key (key=value), repeatable");
  app.add_option("--run-dir", g.run_dir, "Run directory holding all outputs");
  app.add_option("--seed", g.seed, "Sampling/evaluation seed (training uses train_seed)");
  app.add_option("--temperature", g.temperature, "Sampling temperature (0 = argmax)");
  app.add_option("--top-k", g.top_k, "Keep the k most likely tokens (0 = all)");
  app.add_option("--max-frames", g.max_frames, "Maximum generated frames");

  auto* corpus_gen = app.add_subcommand("corpus-gen", "Generate the synthetic corpus");
  auto* codec_train = app.add_subcommand("codec-train", "Train the residual vector quantizer");
  auto* ar_train = app.add_subcommand("lm-train-ar", "Train the autoregressive codec language model");
  auto* nar_train = app.add_subcommand("lm-train-nar", "Train the non-autoregressive codec language model");
  auto* rt_pre = app.add_subcommand("recotrans-pretrain", "Pre-train the recognition/translation model");
  auto* rt_ft = app.add_subcommand("recotrans-finetune", "Fine-tune the recognition/translation model");
  auto* run = app.add_subcommand("run", "Run every missing stage, then evaluate");

  std::string prompt_wav, prompt_text, prompt_lang, text, out_wav;
  std::string lang;
  auto* synth = app.add_subcommand("synth-xtts", "Cross-lingual synthesis from a speech prompt");
  synth->add_option("--prompt", prompt_wav, "Prompt waveform")->required()->check(CLI::ExistingFile);
  synth->add_option("--prompt-text", prompt_text, "Prompt transcript")->required();
  synth->add_option("--prompt-lang", prompt_lang, "Prompt language code")->required();
  synth->add_option("--text", text, "Text to speak")->required();
  synth->add_option("--lang", lang, "Target language code")->required();
  synth->add_option("-o,--out", out_wav, "Output waveform")->required();

  std::string input_wav, source_lang;
  auto* s2st = app.add_subcommand("translate-s2st", "Speech-to-speech translation");
  s2st->add_option("--input", input_wav, "Source waveform")->required()->check(CLI::ExistingFile);
  s2st->add_option("--source-lang", source_lang, "Source language code")->required();
  s2st->add_option("--lang", lang, "Target language code")->required();
  s2st->add_option("-o,--out", out_wav, "Output waveform")->required();

  auto* transcribe = app.add_subcommand("transcribe", "Print source phonemes recognized from a waveform");
  transcribe->add_option("--input", input_wav, "Waveform")->required()->check(CLI::ExistingFile);
  auto* translate = app.add_subcommand("translate", "Print translated phonemes for a waveform");
  translate->add_option("--input", input_wav, "Waveform")->required()->check(CLI::ExistingFile);

  int max_items = -1;
  auto* eval = app.add_subcommand("eval", "Evaluate a finished run and write its report");
  eval->add_option("--max-items", max_items, "Evaluate at most this many items");
  bool force = false;
  run->add_flag("--force", force, "Retrain every stage");

  CLI11_PARSE(app, argc, argv);

  try {
    const PipelineConfig config = resolve_config(g);
    const RunPaths paths{config.run_dir};
    fs::create_directories(paths.root);
    Logger logger(paths.root / "log.txt");
    const LogFn log = [&logger](const std::string& s) { logger(s); };

    if (*corpus_gen) {
      config.to_key_values().save(paths.config());
      prepare_corpus(config, log);
    } else if (*codec_train) {
      const Corpus corpus = load_corpus(config);
      train_codec(config, corpus, log).save(paths.codec());
    } else if (*ar_train) {
      const Corpus corpus = load_corpus(config);
      train_mar(config, corpus, corpus_tokens(config, corpus), log);
    } else if (*nar_train) {
      const Corpus corpus = load_corpus(config);
      train_mnar(config, corpus, corpus_tokens(config, corpus), log);
    } else if (*rt_pre) {
      pretrain_recotrans(config, load_corpus(config), log);
    } else if (*rt_ft) {
      finetune_recotrans(config, load_corpus(config), log);
    } else if (*run) {
      const EvalReport rep = run_pipeline(config, log, force);
      std::cout << rep.summary();
    } else if (*synth) {
      const Corpus corpus = load_corpus(config);
      const Models models = load_models(config);
      const Waveform w = read_wav(prompt_wav);
      DecodeParams d = config.decode;
      d.seed = config.seed;
      const SynthesisResult r = xtts_synthesize(models, corpus, w.samples, prompt_text, prompt_lang, text, lang, d);
      write_wav(out_wav, r.waveform, models.rvq.params.sample_rate);
      if (r.truncated) log("stage=synth-xtts warning=truncated frames=" + std::to_string(r.grid.frames));
    } else if (*s2st) {
      const Corpus corpus = load_corpus(config);
      const Models models = load_models(config);
      const Waveform w = read_wav(input_wav);
      DecodeParams d = config.decode;
      d.seed = config.seed;
      const S2stResult r =
          s2st_translate(models, w.samples, corpus.language_index(source_lang), corpus.language_index(lang), d);
      std::cout << "source: " << labels(r.transcription.source, corpus.inventory) << "\n"
                << "target: " << labels(r.transcription.target, corpus.inventory) << "\n";
      if (r.transcription.flagged()) log("stage=translate-s2st warning=low_confidence_transcription");
      write_wav(out_wav, r.synthesis.waveform, models.rvq.params.sample_rate);
    } else if (*transcribe || *translate) {
      const Corpus corpus = load_corpus(config);
      const Models models = load_models(config);
      if (!models.recotrans) throw InvalidArgument("no trained recognizer in " + config.run_dir.string());
      const Transcription t = transcribe_translate(*models.recotrans, read_wav(input_wav).samples);
      std::cout << labels(*transcribe ? t.source : t.target, corpus.inventory) << "\n";
      if (t.flagged()) log("warning=low_confidence_transcription");
    } else if (*eval) {
      const Corpus corpus = load_corpus(config);
      const Models models = load_models(config);
      const EvalReport rep = evaluate(config, corpus, models, log, max_items);
      rep.save(paths.report());
      std::cout << rep.summary();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
