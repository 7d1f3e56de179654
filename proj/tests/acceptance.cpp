// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fail.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ethodec/config.hpp"
#include "ethodec/ethodec.hpp"

using namespace ethodec;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
int known_gap_failures = 0;
std::vector<std::string> known_gaps;  // reported as FAIL, excluded from the exit status

void verdict(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (pass) return;
  if (std::find(known_gaps.begin(), known_gaps.end(), name) != known_gaps.end()) {
    ++known_gap_failures;
  } else {
    ++failures;
  }
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

Tensor random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v), grad);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

EncoderWeights random_lm(const std::vector<std::string>& sentences, std::size_t dim,
                         std::uint64_t seed) {
  MlmConfig cfg;
  cfg.dim = dim;
  cfg.heads = 4;
  cfg.layers = 2;
  cfg.max_len = 64;
  std::string text;
  for (const auto& s : sentences) text += s + "\n";
  return EncoderWeights::init(Vocabulary::build(text), cfg, seed);
}

// ---- gradient correctness ----

void gradient_check() {
  const auto t0 = Clock::now();
  Rng rng(11);
  constexpr std::size_t kClasses = 5, kFrames = 8, kDim = 16;
  VideoClip clip;
  std::vector<double> px(kFrames * 3 * 3 * 3);
  for (auto& v : px) v = rng.uniform(0.0, 1.0);
  clip.frames = Tensor({kFrames, 3, 3, 3}, px);
  const ToyVideoEncoder encoder = ToyVideoEncoder::init(kDim, rng);
  DecoderConfig cfg;
  cfg.layers = 3;
  cfg.heads = 4;
  cfg.mlp_hidden = 32;
  cfg.pooled_length = 4;
  QueryBank bank;
  bank.tokens = random_tensor({kClasses, kDim}, rng, true);
  bank.class_ids = {0, 1, 2, 3, 4};
  double worst = 0.0;
  for (Task task : {Task::kMulticlass, Task::kMultilabel}) {
    const Model m = Model::init(cfg, bank, task, 12);
    NamedTensors named = m.parameters();
    encoder.collect("encoder", named);
    std::vector<Tensor> params;
    for (const auto& [name, t] : named) params.push_back(t);
    auto loss = [&](Tape& tape) {
      const Tensor logits = model_forward(tape, m, encode_video(tape, clip, encoder));
      if (task == Task::kMulticlass) return softmax_ce_loss(tape, logits, {2});
      return bce_loss(tape, logits, {1, 0, 0, 1, 0});
    };
    worst = std::max(worst, finite_difference_check(loss, params));
  }
  const double secs = seconds_since(t0);
  verdict("gradient_check", worst < 1e-4 && secs < 60.0,
          "max relative error " + num(worst) + " (< 1e-4) over both losses in " + num(secs, 3) +
              " s (< 60 s)");
}

// ---- equation form ----

void equation_form() {
  Rng rng(2);
  const Tensor q = random_tensor({6, 8}, rng);
  const Tensor x = random_tensor({10, 8}, rng);
  std::vector<DecoderLayerWeights> layers(3, DecoderLayerWeights::zeros(8, 32));
  Tape tape;
  const Tensor z = decode(tape, q, x, layers, 2, false);
  verdict("equation_form", z.values() == q.values(),
          "no norm, zero sub-block weights: decode(q, x) == q bitwise over 3 layers");
}

// ---- joint permutation equivariance ----

void permutation_equivariance() {
  SyntheticSpec spec;
  spec.classes = 8;
  spec.dim = 16;
  spec.clips_per_class = 2;
  const auto ds = generate_synthetic(spec);
  const EncoderWeights lm = random_lm(ethogram_corpus(ds.ethogram), 16, 4);
  DecoderConfig cfg;
  cfg.pooled_length = 8;
  const Model m =
      Model::init(cfg, init_queries(ds.ethogram, QuerySource::kDescriptions, lm), Task::kMultilabel, 5);
  Rng rng(6);
  const Tensor x = random_tensor({20, 16}, rng);
  const auto base = predict_logits(m, x);
  std::size_t exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    Ethogram permuted;
    for (auto p : perm) permuted.push_back(ds.ethogram[p]);
    Model pm = m;
    pm.queries = init_queries(permuted, QuerySource::kDescriptions, lm);
    Tape tape;
    pm.head.weight = gather_rows(tape, m.head.weight, perm);
    pm.head.bias = reshape(tape, gather_rows(tape, reshape(tape, m.head.bias, {8, 1}), perm), {8});
    const auto logits = predict_logits(pm, x);
    bool same = true;
    for (std::size_t c = 0; c < 8; ++c) same = same && logits[c] == base[perm[c]];
    exact += same;
  }
  verdict("permutation_equivariance", exact == 100,
          std::to_string(exact) + "/100 random permutations of (ethogram, queries, classifier) "
                                  "permute the logits bitwise at C=8");
}

// ---- overfit oracle ----

struct Prepared {
  SyntheticDataset ds;
  DatasetManifest manifest;
};

Prepared prepare(const SyntheticSpec& spec, const std::string& name) {
  Prepared p;
  p.ds = generate_synthetic(spec);
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  write_synthetic(p.ds, dir);
  p.manifest = parse_manifest(dir / "manifest.json", &p.ds.ethogram, true);
  return p;
}

// Reference optimiser settings, stretched to the 200-epoch budget.
TrainConfig overfit_train_config() {
  TrainConfig t;
  t.schedule.total_epochs = 200;
  t.seed = 1;
  return t;
}

void overfit(Task task) {
  const auto t0 = Clock::now();
  SyntheticSpec spec;
  spec.task = task;
  spec.classes = 6;
  spec.noise = 0.1;
  const auto p = prepare(spec, "ethodec_acceptance_overfit_" + to_string(task));
  const auto train = build_samples(p.manifest, p.ds.ethogram, Split::kTrain);
  const EncoderWeights lm = random_lm(ethogram_corpus(p.ds.ethogram), spec.dim, 2);
  Model m = Model::init(DecoderConfig{},
                        init_queries(p.ds.ethogram, QuerySource::kDescriptions, lm), task, 3);
  std::optional<std::size_t> reached;
  double best = 0.0;
  const double target = task == Task::kMulticlass ? 1.0 : 0.95;
  fit(m, train, train, overfit_train_config(), [&](const EpochLog& log) {
    const double v = log.val_metric.value_or(0.0);
    best = std::max(best, v);
    if (!reached && v >= target) reached = log.epoch + 1;
  });
  const double secs = seconds_since(t0);
  const std::string metric = task == Task::kMulticlass ? "train top-1" : "train mAP";
  verdict("overfit_" + to_string(task), reached.has_value() && secs < 300.0,
          metric + " best " + num(best) + (reached ? ", reached " + num(target) + " at epoch " +
                                                         std::to_string(*reached)
                                               : ", never reached " + num(target)) +
              " (<= 200), " + num(secs, 3) + " s (< 300 s)");
}

// ---- ethogram effect ----

// Reference settings throughout: encoder fine-tuning with the MlmConfig
// defaults, decoder training with the TrainConfig defaults.
double tail_map(QuerySource source, LmMode mode, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.task = Task::kMultilabel;
  spec.classes = 12;
  spec.clips_per_class = 150;
  spec.tail_exponent = 2.0;
  spec.seed = seed;
  const auto p = prepare(spec, "ethodec_acceptance_effect_" + std::to_string(seed));
  const auto corpus = ethogram_corpus(p.ds.ethogram, p.ds.corpus);
  EncoderWeights lm = random_lm(corpus, spec.dim, seed);
  if (mode == LmMode::kFinetuned) {
    MlmConfig mlm;
    mlm.dim = lm.dim;
    mlm.heads = lm.heads;
    mlm.layers = lm.layers.size();
    mlm.max_len = lm.max_len;
    mlm.seed = seed;
    lm = mlm_finetune(corpus, mlm, lm);
  }
  const auto train = build_samples(p.manifest, p.ds.ethogram, Split::kTrain);
  const auto test = build_samples(p.manifest, p.ds.ethogram, Split::kTest);
  Model m = Model::init(DecoderConfig{}, init_queries(p.ds.ethogram, source, lm),
                        Task::kMultilabel, seed);
  TrainConfig t;
  t.seed = seed;
  fit(m, train, {}, t);
  const auto freq = sample_frequencies(train, Task::kMultilabel, spec.classes);
  const auto e = evaluate(m, test);
  const auto r = macro_map(e.logits, e.labels, freq);
  if (!r.tail) throw ValidationError("tail segment has no positive test sample");
  return *r.tail;
}

void ethogram_effect() {
  const auto t0 = Clock::now();
  double dsc_ft = 0.0, cls_pt = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double a = tail_map(QuerySource::kDescriptions, LmMode::kFinetuned, seed);
    const double b = tail_map(QuerySource::kNames, LmMode::kPretrained, seed);
    dsc_ft += a / 5.0;
    cls_pt += b / 5.0;
    per_seed += " [" + std::to_string(seed) + ": " + num(a, 4) + " vs " + num(b, 4) + "]";
  }
  verdict("ethogram_effect", dsc_ft >= cls_pt,
          "mean tail mAP DSC+FT " + num(dsc_ft, 4) + " vs CLS+PT " + num(cls_pt, 4) + " over seeds 0-4;" +
              per_seed + " in " + num(seconds_since(t0), 3) + " s");
}

// ---- metrics oracle ----

double brute_ap(const std::vector<double>& s, const std::vector<int>& y) {
  double total = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++pos;
    std::size_t rank = 0, hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] > s[i] || (s[j] == s[i] && j <= i)) {
        ++rank;
        hits += y[j];
      }
    }
    total += static_cast<double>(hits) / static_cast<double>(rank);
  }
  return pos ? total / static_cast<double>(pos) : -1.0;
}

void metrics_oracle() {
  Rng rng(21);
  constexpr std::size_t kN = 50, kC = 8;
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    ScoreMatrix scores(kN, std::vector<double>(kC));
    std::vector<std::vector<int>> labels(kN, std::vector<int>(kC));
    std::vector<std::size_t> truth(kN);
    for (std::size_t i = 0; i < kN; ++i) {
      truth[i] = rng.below(kC);
      for (std::size_t c = 0; c < kC; ++c) {
        // Coarse scores so ties occur.
        scores[i][c] = std::round(rng.normal() * 4.0) / 4.0;
        labels[i][c] = rng.bernoulli(0.2);
      }
      labels[i][rng.below(kC)] = 1;
    }
    std::vector<double> freq(kC, 1.0 / kC);
    double ap_sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < kC; ++c) {
      std::vector<double> col(kN);
      std::vector<int> y(kN);
      for (std::size_t i = 0; i < kN; ++i) {
        col[i] = scores[i][c];
        y[i] = labels[i][c];
      }
      const double ap = brute_ap(col, y);
      if (ap >= 0.0) {
        ap_sum += ap;
        ++defined;
      }
    }
    worst = std::max(worst, std::abs(macro_map(scores, labels, freq).all -
                                     ap_sum / static_cast<double>(defined)));

    std::vector<double> hit(kC, 0.0), seen(kC, 0.0);
    for (std::size_t i = 0; i < kN; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 0; c < kC; ++c)
        if (scores[i][c] > scores[i][best]) best = c;
      seen[truth[i]] += 1.0;
      hit[truth[i]] += best == truth[i];
    }
    double acc = 0.0, present = 0.0;
    for (std::size_t c = 0; c < kC; ++c)
      if (seen[c] > 0) {
        acc += hit[c] / seen[c];
        present += 1.0;
      }
    worst = std::max(worst, std::abs(class_avg_accuracy(scores, truth) - acc / present));
  }
  verdict("metrics_oracle", worst <= 1e-9,
          "max |library - brute force| " + num(worst) +
              " (<= 1e-9) for macro_map and class_avg over 100 instances, N=50, C=8");
}

// ---- masking statistics ----

void masking_statistics() {
  const auto vocab = Vocabulary::build("a b c d e f g h");
  MlmConfig cfg;
  Rng rng(8);
  std::size_t maskable = 0, selected = 0;
  const TokenSeq seq = tokenize("a b c d e f g h a b c d e f g h a b c d", vocab, 512);
  while (maskable < 20000) {
    const MaskedSeq m = mask_tokens(seq, cfg, vocab.size(), rng);
    maskable += seq.size() - 1;
    selected += m.positions.size();
  }
  const double rate = static_cast<double>(selected) / static_cast<double>(maskable);
  verdict("masking_rate", rate >= 0.18 && rate <= 0.22,
          "selected " + num(rate) + " of " + std::to_string(maskable) +
              " maskable positions at m=0.2 (in [0.18, 0.22])");
}

// ---- schedule anchors ----

void schedule_anchors() {
  LrSchedule s;
  s.steps_per_epoch = 7;
  const std::size_t end_warmup = s.warmup_epochs * s.steps_per_epoch;
  const double slope = (s.peak_lr - s.start_lr) / static_cast<double>(end_warmup);
  const double left = lr_at(end_warmup - 1, s) + slope;
  const double right = lr_at(end_warmup, s);
  const bool anchors = lr_at(0, s) == 1e-5 && right == 1e-4;
  const double gap = std::abs(left - right);
  verdict("schedule_anchors", anchors && gap <= 1e-12,
          "lr(0)=" + num(lr_at(0, s), 17) + ", lr(end of warm-up)=" + num(right, 17) +
              ", junction gap " + num(gap) + " (<= 1e-12)");
}

// ---- frozen language model ----

void frozen_lm() {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.clips_per_class = 4;
  const auto p = prepare(spec, "ethodec_acceptance_frozen");
  const EncoderWeights lm = random_lm(ethogram_corpus(p.ds.ethogram), spec.dim, 9);
  const auto before = lm.hash();
  DecoderConfig cfg;
  cfg.layers = 1;
  Model m = Model::init(cfg, init_queries(p.ds.ethogram, QuerySource::kDescriptions, lm),
                        Task::kMulticlass, 1);
  const auto queries_before = m.queries.tokens.values();
  TrainConfig t;
  t.batch_size = 8;
  t.schedule.total_epochs = 3;
  t.schedule.warmup_epochs = 1;
  t.schedule.peak_lr = 1e-3;
  fit(m, build_samples(p.manifest, p.ds.ethogram, Split::kTrain), {}, t);
  const bool queries_moved = m.queries.tokens.values() != queries_before;
  verdict("frozen_lm", lm.hash() == before && queries_moved,
          "encoder hash " + hash_hex(before) + " -> " + hash_hex(lm.hash()) +
              " across behaviour training; query tokens " + (queries_moved ? "updated" : "unchanged"));
}

// ---- sampling protocol ----

void protocol_checks() {
  std::vector<int> labels(15, 1);
  labels.push_back(0);
  labels.insert(labels.end(), 16, 2);
  const auto runs = filter_by_run_length(labels, 16);
  const bool run_ok = runs.size() == 1 && runs[0].behaviour == 2 && runs[0].length == 16;

  const auto idx = subsample_uniform(32, 16);
  bool even = idx.size() == 16;
  for (std::size_t i = 0; even && i < 16; ++i) even = idx[i] == 2 * i;

  Rng rng(13);
  std::size_t convex = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 1 + rng.below(64), tp = 1 + rng.below(64);
    const Tensor w = adaptive_pool_matrix(t, tp);
    bool ok = true;
    for (std::size_t i = 0; i < tp; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        ok = ok && w.at(i, j) >= 0.0;
        row += w.at(i, j);
      }
      ok = ok && std::abs(row - 1.0) <= 1e-12;
    }
    std::vector<double> col(t);
    for (auto& v : col) v = rng.normal();
    const auto lo = *std::min_element(col.begin(), col.end());
    const auto hi = *std::max_element(col.begin(), col.end());
    Tape tape;
    const Tensor pooled = adaptive_pool_1d(tape, Tensor({t, 1}, col), tp);
    for (double v : pooled.values()) ok = ok && v >= lo - 1e-12 && v <= hi + 1e-12;
    convex += ok;
  }
  verdict("protocol_checks", run_ok && even && convex == 1000,
          std::string("run of 16 kept and 15 dropped: ") + (run_ok ? "yes" : "no") +
              "; subsample_uniform(32,16) even indices: " + (even ? "yes" : "no") +
              "; pooling convex on " + std::to_string(convex) + "/1000 (T, T') pairs");
}

// ---- end-to-end determinism ----

int run(const std::string& args) {
  const std::string cmd = std::string(ETHODEC_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool pipeline(const fs::path& dir) {
  const std::string d = dir.string();
  return run("synth --task multilabel --classes 6 --dim 16 --clips-per-class 8 --seed 4 --out " +
             d + "/data") == 0 &&
         run("lm-train --ethogram " + d + "/data/ethogram.tsv --lm-mode ft --dim 16 --heads 2 "
             "--layers 1 --epochs 5 --batch-size 4 --lr 1e-3 --seed 4 --out " + d + "/lm") == 0 &&
         run("embed-queries --ethogram " + d + "/data/ethogram.tsv --source descriptions --lm " +
             d + "/lm/lm.edwt --out " + d + "/q.edwt") == 0 &&
         run("train --task multilabel --queries " + d + "/q.edwt --manifest " + d +
             "/data/manifest.json --epochs 5 --warmup-epochs 1 --batch-size 8 --lr 1e-3 "
             "--heads 2 --seed 4 --out " + d + "/run") == 0 &&
         run("eval --model " + d + "/run/model.edwt --manifest " + d +
             "/data/manifest.json --out " + d + "/eval") == 0;
}

void determinism() {
  const auto a = fs::temp_directory_path() / "ethodec_acceptance_det_a";
  const auto b = fs::temp_directory_path() / "ethodec_acceptance_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const bool ran = pipeline(a) && pipeline(b);
  std::size_t same = 0;
  const std::vector<std::string> files{"lm/lm.edwt", "q.edwt", "run/model.edwt",
                                       "eval/predictions.csv", "eval/per_class.csv",
                                       "eval/report.json", "eval/report.svg"};
  for (const auto& f : files)
    same += ran && fs::exists(a / f) && slurp(a / f) == slurp(b / f);
  verdict("determinism", ran && same == files.size(),
          std::string("two seeded synth -> lm-train -> embed-queries -> train -> eval runs: ") +
              std::to_string(same) + "/" + std::to_string(files.size()) +
              " artifacts bitwise identical");
}

std::vector<std::string> selected;

template <typename F>
void guarded(const std::string& name, F&& f) {
  if (!selected.empty() && std::find(selected.begin(), selected.end(), name) == selected.end())
    return;
  try {
    f();
  } catch (const std::exception& e) {
    verdict(name, false, std::string("threw: ") + e.what());
  }
}

}  // namespace

// Usage: acceptance [--known-gap NAME]... [CRITERION]...
// Named criteria restrict the run; default is all of them.
int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--known-gap" && i + 1 < argc) {
      known_gaps.emplace_back(argv[++i]);
    } else {
      selected.push_back(arg);
    }
  }
  guarded("gradient_check", gradient_check);
  guarded("equation_form", equation_form);
  guarded("permutation_equivariance", permutation_equivariance);
  guarded("overfit_multiclass", [] { overfit(Task::kMulticlass); });
  guarded("overfit_multilabel", [] { overfit(Task::kMultilabel); });
  guarded("ethogram_effect", ethogram_effect);
  guarded("metrics_oracle", metrics_oracle);
  guarded("masking_rate", masking_statistics);
  guarded("schedule_anchors", schedule_anchors);
  guarded("frozen_lm", frozen_lm);
  guarded("protocol_checks", protocol_checks);
  guarded("determinism", determinism);
  if (known_gap_failures) {
    std::cout << known_gap_failures << " known-gap criteria failed (not counted)" << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all other criteria passed")
            << std::endl;
  return failures ? 1 : 0;
}
