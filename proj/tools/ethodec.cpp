// ethodec: synthetic data, language-model preparation, query embedding,
// decoder training, evaluation and reporting.
//
// Exit codes: 0 success, 1 usage or validation error, 2 any other failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ethodec/config.hpp"
#include "ethodec/ethodec.hpp"

using namespace ethodec;
namespace fs = std::filesystem;

namespace {

// Options shared by every subcommand.
struct Common {
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, const std::string& out_help) {
  sub->add_option("--out", c.out, out_help)->required();
  sub->add_option("--config", c.config, "JSON config file; flags override its values")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "random seed (fallback: ETHODEC_SEED, then 0)");
}

// defaults < ETHODEC_SEED < config file < flags
RunConfig base_config(const Common& c) {
  RunConfig cfg;
  if (const auto env = seed_from_env()) cfg.seed = *env;
  if (!c.config.empty()) cfg = load_config(c.config, cfg);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

template <typename T>
void apply(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

void write_config(const fs::path& path, const RunConfig& cfg) {
  io::write_text(path, to_json(cfg).dump(2) + "\n");
}

fs::path default_ethogram(const std::string& flag, const std::string& manifest) {
  if (!flag.empty()) return flag;
  return fs::path(manifest).parent_path() / "ethogram.tsv";
}

std::string fmt_metric(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

void print_summary(const MetricsReport& r) {
  if (r.task == Task::kMulticlass) {
    std::cout << "top1 " << fmt_metric(r.top1) << "  class_avg " << fmt_metric(r.class_avg);
  } else {
    std::cout << "mAP " << fmt_metric(r.map_all);
  }
  std::cout << "  head " << fmt_metric(r.segment_head) << "  middle "
            << fmt_metric(r.segment_middle) << "  tail " << fmt_metric(r.segment_tail) << "\n";
}

// ---- synth ----

struct SynthArgs {
  Common common;
  std::optional<std::string> task;
  std::optional<std::size_t> classes, dim, clips_per_class, run_min, run_max;
  std::optional<double> noise, tail_exponent, test_fraction, val_fraction;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* s = app.add_subcommand("synth", "generate a synthetic ethogram, manifest and features");
  add_common(s, a.common, "output directory");
  s->add_option("--task", a.task, "multiclass or multilabel");
  s->add_option("--classes", a.classes, "number of behaviours");
  s->add_option("--dim", a.dim, "feature width; must match the language-model width");
  s->add_option("--clips-per-class", a.clips_per_class, "clips of the most frequent class");
  s->add_option("--noise", a.noise, "per-frame Gaussian noise standard deviation");
  s->add_option("--tail-exponent", a.tail_exponent, "class-size decay; 0 keeps classes balanced");
  s->add_option("--test-fraction", a.test_fraction, "share of clips in the test split");
  s->add_option("--val-fraction", a.val_fraction, "share of clips in the val split");
  s->add_option("--run-min", a.run_min, "shortest behaviour run in frames");
  s->add_option("--run-max", a.run_max, "longest behaviour run in frames");
}

int run_synth(const SynthArgs& a) {
  RunConfig cfg = base_config(a.common);
  if (a.task) cfg.synth.task = parse_task(*a.task);
  apply(a.classes, cfg.synth.classes);
  apply(a.dim, cfg.synth.dim);
  apply(a.clips_per_class, cfg.synth.clips_per_class);
  apply(a.run_min, cfg.synth.run_min);
  apply(a.run_max, cfg.synth.run_max);
  apply(a.noise, cfg.synth.noise);
  apply(a.tail_exponent, cfg.synth.tail_exponent);
  apply(a.test_fraction, cfg.synth.test_fraction);
  apply(a.val_fraction, cfg.synth.val_fraction);
  SyntheticSpec spec = cfg.synth;
  spec.seed = cfg.seed;
  const auto ds = generate_synthetic(spec);
  write_synthetic(ds, a.common.out);
  write_config(fs::path(a.common.out) / "config.json", cfg);
  std::cout << "wrote " << ds.manifest.records.size() << " clips, " << ds.ethogram.size()
            << " behaviours to " << a.common.out << "\n";
  return 0;
}

// ---- lm-train ----

struct LmArgs {
  Common common;
  std::string ethogram, corpus, init;
  std::optional<std::string> mode;
  std::optional<std::size_t> dim, layers, heads, epochs, batch_size, max_len, mlp_hidden;
  std::optional<double> lr, mask_prob;
};

void add_lm(CLI::App& app, LmArgs& a) {
  auto* s = app.add_subcommand("lm-train", "prepare the text encoder (pt: as given, ft: MLM fine-tuned)");
  add_common(s, a.common, "output directory; receives lm.edwt");
  s->add_option("--ethogram", a.ethogram, "ethogram TSV")->required()->check(CLI::ExistingFile);
  s->add_option("--corpus", a.corpus, "extra training sentences, one per line")
      ->check(CLI::ExistingFile);
  s->add_option("--init", a.init, "starting encoder checkpoint (default: seeded random init)")
      ->check(CLI::ExistingFile);
  s->add_option("--lm-mode", a.mode, "pt or ft");
  s->add_option("--dim", a.dim, "encoder width");
  s->add_option("--layers", a.layers, "encoder layers");
  s->add_option("--heads", a.heads, "attention heads");
  s->add_option("--mlp-hidden", a.mlp_hidden, "MLP hidden width (0: 4 x dim)");
  s->add_option("--max-len", a.max_len, "maximum sequence length");
  s->add_option("--epochs", a.epochs, "fine-tuning epochs");
  s->add_option("--batch-size", a.batch_size, "fine-tuning batch size");
  s->add_option("--lr", a.lr, "fine-tuning learning rate");
  s->add_option("--mask-prob", a.mask_prob, "masking proportion");
}

int run_lm(const LmArgs& a) {
  RunConfig cfg = base_config(a.common);
  if (a.mode) cfg.lm_mode = parse_lm_mode(*a.mode);
  apply(a.dim, cfg.lm.dim);
  apply(a.layers, cfg.lm.layers);
  apply(a.heads, cfg.lm.heads);
  apply(a.mlp_hidden, cfg.lm.mlp_hidden);
  apply(a.max_len, cfg.lm.max_len);
  apply(a.epochs, cfg.lm.epochs);
  apply(a.batch_size, cfg.lm.batch_size);
  apply(a.lr, cfg.lm.lr);
  apply(a.mask_prob, cfg.lm.mask_prob);
  cfg.lm.seed = cfg.seed;
  cfg.lm.validate();

  const Ethogram ethogram = parse_ethogram(a.ethogram);
  const auto extra = a.corpus.empty() ? std::vector<std::string>{} : read_lines(a.corpus);
  const auto sentences = ethogram_corpus(ethogram, extra);

  EncoderWeights w;
  if (!a.init.empty()) {
    w = load_encoder(a.init);
    cfg.lm.dim = w.dim;
    cfg.lm.heads = w.heads;
    cfg.lm.layers = w.layers.size();
    cfg.lm.max_len = w.max_len;
    cfg.lm.mlp_hidden = w.mlp_hidden;
    w.mode = LmMode::kPretrained;
  } else {
    std::string text;
    for (const auto& s : sentences) text += s + "\n";
    w = EncoderWeights::init(Vocabulary::build(text), cfg.lm, cfg.seed);
  }

  const fs::path out(a.common.out);
  if (cfg.lm_mode == LmMode::kFinetuned) {
    std::vector<MlmEpochLog> log;
    w = mlm_finetune(sentences, cfg.lm, w, &log);
    std::string csv = "epoch,mean_loss\n";
    for (const auto& l : log) csv += std::to_string(l.epoch) + "," + detail::fmt_double(l.mean_loss) + "\n";
    io::write_text(out / "lm_log.csv", csv);
    if (!log.empty()) std::cout << "final MLM loss " << log.back().mean_loss << "\n";
  }
  save_encoder(out / "lm.edwt", w);
  write_config(out / "config.json", cfg);
  std::cout << "encoder " << to_string(w.mode) << " hash " << hash_hex(w.hash()) << " -> "
            << (out / "lm.edwt").string() << "\n";
  return 0;
}

// ---- embed-queries ----

struct EmbedArgs {
  Common common;
  std::string ethogram, lm;
  std::optional<std::string> source, reduction;
};

void add_embed(CLI::App& app, EmbedArgs& a) {
  auto* s = app.add_subcommand("embed-queries", "embed ethogram entries into a query bank");
  add_common(s, a.common, "query bank checkpoint path; the resolved config goes to <stem>.config.json");
  s->add_option("--ethogram", a.ethogram, "ethogram TSV")->required()->check(CLI::ExistingFile);
  s->add_option("--lm", a.lm, "encoder checkpoint from lm-train")->required()->check(CLI::ExistingFile);
  s->add_option("--source,--query-source", a.source, "names or descriptions");
  s->add_option("--reduction", a.reduction, "mean or cls");
}

int run_embed(const EmbedArgs& a) {
  RunConfig cfg = base_config(a.common);
  if (a.source) cfg.query_source = parse_query_source(*a.source);
  if (a.reduction) cfg.reduction = parse_reduction(*a.reduction);
  const Ethogram ethogram = parse_ethogram(a.ethogram);
  const EncoderWeights lm = load_encoder(a.lm);
  cfg.lm_mode = lm.mode;
  const QueryBank bank = init_queries(ethogram, cfg.query_source, lm, cfg.reduction);
  const fs::path out(a.common.out);
  save_query_bank(out, bank);
  fs::path conf = out;
  conf.replace_extension(".config.json");
  write_config(conf, cfg);
  std::cout << "queries [" << bank.classes() << ", " << bank.dim() << "] from "
            << to_string(cfg.query_source) << " -> " << out.string() << "\n";
  return 0;
}

// ---- shared sampling flags ----

struct SamplingArgs {
  std::optional<std::size_t> clip_length, run_threshold;
  std::optional<std::string> mode;
};

void add_sampling(CLI::App* s, SamplingArgs& a) {
  s->add_option("--clip-length", a.clip_length, "frames sampled per clip");
  s->add_option("--run-threshold", a.run_threshold, "minimum behaviour run length (multiclass)");
  s->add_option("--sampling", a.mode, "uniform or contiguous frame sampling");
}

void apply_sampling(const SamplingArgs& a, RunConfig& cfg) {
  apply(a.clip_length, cfg.sampling.clip_length);
  apply(a.run_threshold, cfg.sampling.run_threshold);
  if (a.mode) cfg = merge_config(nlohmann::json{{"sampling", {{"mode", *a.mode}}}}, cfg);
}

void check_task(const std::optional<std::string>& flag, const DatasetManifest& m) {
  if (flag && parse_task(*flag) != m.task) {
    throw ValidationError("--task " + *flag + " does not match the " + to_string(m.task) +
                          " manifest");
  }
}

void check_class_order(const std::vector<int>& ids, const Ethogram& ethogram,
                       const std::string& what) {
  std::vector<int> expected;
  for (const auto& e : ethogram) expected.push_back(e.class_id);
  if (ids != expected) throw ValidationError(what + " classes do not match the ethogram order");
}

// ---- train ----

struct TrainArgs {
  Common common;
  std::string queries, manifest, ethogram;
  std::optional<std::string> task;
  std::optional<std::size_t> epochs, warmup_epochs, batch_size, layers, heads, mlp_hidden,
      pooled_length;
  std::optional<double> lr, start_lr, weight_decay;
  bool no_norm = false;
  SamplingArgs sampling;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* s = app.add_subcommand("train", "train the query decoder on a manifest");
  add_common(s, a.common, "output directory; receives model.edwt and train_log.csv");
  s->add_option("--queries", a.queries, "query bank from embed-queries")
      ->required()->check(CLI::ExistingFile);
  s->add_option("--manifest", a.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--ethogram", a.ethogram, "ethogram TSV (default: next to the manifest)");
  s->add_option("--task", a.task, "multiclass or multilabel; must match the manifest");
  s->add_option("--epochs", a.epochs, "training epochs");
  s->add_option("--warmup-epochs", a.warmup_epochs, "linear warm-up epochs");
  s->add_option("--batch-size", a.batch_size, "minibatch size");
  s->add_option("--lr", a.lr, "peak learning rate");
  s->add_option("--start-lr", a.start_lr, "learning rate at step 0");
  s->add_option("--weight-decay", a.weight_decay, "AdamW decoupled weight decay");
  s->add_option("--layers", a.layers, "decoder layers");
  s->add_option("--heads", a.heads, "attention heads");
  s->add_option("--mlp-hidden", a.mlp_hidden, "MLP hidden width (0: 4 x D)");
  s->add_option("--pooled-length", a.pooled_length, "temporal length after adaptive pooling");
  s->add_flag("--no-norm", a.no_norm, "disable the pre-norm layer normalisation");
  add_sampling(s, a.sampling);
}

int run_train(const TrainArgs& a) {
  RunConfig cfg = base_config(a.common);
  apply(a.epochs, cfg.train.schedule.total_epochs);
  apply(a.warmup_epochs, cfg.train.schedule.warmup_epochs);
  apply(a.batch_size, cfg.train.batch_size);
  apply(a.lr, cfg.train.schedule.peak_lr);
  apply(a.start_lr, cfg.train.schedule.start_lr);
  apply(a.weight_decay, cfg.train.optimizer.weight_decay);
  apply(a.layers, cfg.model.layers);
  apply(a.heads, cfg.model.heads);
  apply(a.mlp_hidden, cfg.model.mlp_hidden);
  apply(a.pooled_length, cfg.model.pooled_length);
  if (a.no_norm) cfg.model.norm = false;
  apply_sampling(a.sampling, cfg);
  cfg.train.seed = cfg.seed;

  const Ethogram ethogram = parse_ethogram(default_ethogram(a.ethogram, a.manifest));
  const DatasetManifest manifest = parse_manifest(a.manifest, &ethogram, true);
  check_task(a.task, manifest);
  QueryBank bank = load_query_bank(a.queries);
  check_class_order(bank.class_ids, ethogram, "query bank");
  cfg.query_source = bank.source;
  cfg.reduction = bank.reduction;
  cfg.lm_mode = bank.lm_mode;

  const auto train = build_samples(manifest, ethogram, Split::kTrain, cfg.sampling);
  const auto val = build_samples(manifest, ethogram, Split::kVal, cfg.sampling);
  if (!train.empty() && train.front().features.dim(1) != bank.dim()) {
    throw ValidationError("feature width " + std::to_string(train.front().features.dim(1)) +
                          " differs from query width " + std::to_string(bank.dim()));
  }
  Model model = Model::init(cfg.model, std::move(bank), manifest.task, cfg.seed);
  const fs::path out(a.common.out);
  write_config(out / "config.json", cfg);
  const FitResult r = fit(model, train, val, cfg.train, [](const EpochLog& l) {
    std::cout << "epoch " << l.epoch << " lr " << l.lr << " loss " << l.train_loss;
    if (l.val_metric) std::cout << " val " << *l.val_metric;
    std::cout << "\n";
  });
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  save_model(out / "model.edwt", model);
  io::write_text(out / "train_log.csv", training_log_csv(r.epochs));
  std::cout << "model -> " << (out / "model.edwt").string() << "\n";
  return 0;
}

// ---- eval ----

struct EvalArgs {
  Common common;
  std::string model, manifest, ethogram, split = "test";
  SamplingArgs sampling;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* s = app.add_subcommand("eval", "score a split and emit predictions and the report");
  add_common(s, a.common, "output directory");
  s->add_option("--model", a.model, "model checkpoint from train")->required()->check(CLI::ExistingFile);
  s->add_option("--manifest", a.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--ethogram", a.ethogram, "ethogram TSV (default: next to the manifest)");
  s->add_option("--split", a.split, "train, val or test")->capture_default_str();
  add_sampling(s, a.sampling);
}

int run_eval(const EvalArgs& a) {
  RunConfig cfg = base_config(a.common);
  apply_sampling(a.sampling, cfg);
  const Ethogram ethogram = parse_ethogram(default_ethogram(a.ethogram, a.manifest));
  const DatasetManifest manifest = parse_manifest(a.manifest, &ethogram, true);
  const Model model = load_model(a.model);
  if (model.task != manifest.task) throw ValidationError("model task differs from the manifest");
  check_class_order(model.queries.class_ids, ethogram, "model");
  cfg.model = model.config;
  cfg.query_source = model.queries.source;
  cfg.reduction = model.queries.reduction;
  cfg.lm_mode = model.queries.lm_mode;

  const auto samples = build_samples(manifest, ethogram, parse_split(a.split), cfg.sampling);
  const auto freq = manifest_frequencies(manifest, ethogram, Split::kTrain, cfg.sampling);
  const Evaluation e = evaluate(model, samples);
  const MetricsReport report = build_report(model, e, freq, ethogram, cfg.segments);
  const fs::path out(a.common.out);
  io::write_text(out / "predictions.csv", predictions_csv(to_predictions(model, e)));
  emit_report(report, out);
  write_config(out / "config.json", cfg);
  print_summary(report);
  return 0;
}

// ---- report ----

struct ReportArgs {
  Common common;
  std::string predictions, manifest, ethogram;
  SamplingArgs sampling;
};

void add_report(CLI::App& app, ReportArgs& a) {
  auto* s = app.add_subcommand("report", "rebuild the report from a predictions CSV");
  add_common(s, a.common, "output directory");
  s->add_option("--predictions", a.predictions, "predictions CSV from eval")
      ->required()->check(CLI::ExistingFile);
  s->add_option("--manifest", a.manifest, "manifest supplying task and training frequencies")
      ->required()->check(CLI::ExistingFile);
  s->add_option("--ethogram", a.ethogram, "ethogram TSV (default: next to the manifest)");
  add_sampling(s, a.sampling);
}

int run_report(const ReportArgs& a) {
  RunConfig cfg = base_config(a.common);
  apply_sampling(a.sampling, cfg);
  const Ethogram ethogram = parse_ethogram(default_ethogram(a.ethogram, a.manifest));
  const DatasetManifest manifest = parse_manifest(a.manifest, &ethogram);
  const Predictions p = parse_predictions(io::read_text(a.predictions), a.predictions);
  check_class_order(p.class_ids, ethogram, "prediction");
  const auto freq = manifest_frequencies(manifest, ethogram, Split::kTrain, cfg.sampling);
  MetricsReport report;
  if (manifest.task == Task::kMulticlass) {
    std::vector<std::size_t> truth;
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
      const auto& row = p.labels[i];
      if (std::count(row.begin(), row.end(), 1) != 1) {
        throw ValidationError("sample " + p.sample_ids[i] + " needs exactly one positive label");
      }
      truth.push_back(static_cast<std::size_t>(std::find(row.begin(), row.end(), 1) - row.begin()));
    }
    report = build_multiclass_report(p.scores, truth, freq, class_info(ethogram), cfg.segments);
  } else {
    report = build_multilabel_report(p.scores, p.labels, freq, class_info(ethogram), cfg.segments);
  }
  emit_report(report, a.common.out);
  write_config(fs::path(a.common.out) / "config.json", cfg);
  print_summary(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ethogram-initialised query decoder for behaviour recognition", "ethodec"};
  app.require_subcommand(1);
  SynthArgs synth;
  LmArgs lm;
  EmbedArgs embed;
  TrainArgs train;
  EvalArgs eval;
  ReportArgs report;
  add_synth(app, synth);
  add_lm(app, lm);
  add_embed(app, embed);
  add_train(app, train);
  add_eval(app, eval);
  add_report(app, report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (app.got_subcommand("synth")) return run_synth(synth);
    if (app.got_subcommand("lm-train")) return run_lm(lm);
    if (app.got_subcommand("embed-queries")) return run_embed(embed);
    if (app.got_subcommand("train")) return run_train(train);
    if (app.got_subcommand("eval")) return run_eval(eval);
    if (app.got_subcommand("report")) return run_report(report);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
