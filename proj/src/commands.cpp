#include "susan/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "susan/serialize.hpp"

namespace susan {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void say(const CommandContext& ctx, const std::string& msg) {
  if (ctx.log) ctx.log(msg);
}

std::string exact(double v) {
  if (!std::isfinite(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string lambda_label(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string dataset_name(const ExperimentConfig& c) { return to_string(c.target_domain); }

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::string net_prefix(TrainMode method, bool backward) {
  if (method == TrainMode::supervised) return "baseline";
  return backward ? "B" : "F";
}

// Best checkpoint of a finished run, checked against the configuration.
std::vector<NamedTensor> load_best(const CommandContext& ctx, const fs::path& dir, const TrainConfig& expected) {
  if (!fs::exists(dir / "best.susn")) {
    throw ConfigError("no checkpoint in " + dir.string() + " (run the train command first)");
  }
  auto [tensors, info] = read_checkpoint(dir, "best");
  if (info.config_hash != expected.hash()) {
    throw ConfigError("checkpoint in " + dir.string() + " was trained with a different configuration (hash " +
                      info.config_hash + ", expected " + expected.hash() + ")");
  }
  if (fs::exists(dir / "last.txt")) {
    const auto last = CheckpointInfo::decode(read_file(dir / "last.txt"));
    say(ctx, dir.filename().string() + ": best checkpoint from iteration " + std::to_string(info.iteration) +
                 " of " + std::to_string(last.iteration) + " trained");
  }
  return std::move(tensors);
}

template <typename T>
RNet<T> load_rnet(const TrainConfig& cfg, const std::string& prefix, const std::vector<NamedTensor>& tensors) {
  RNetConfig g = cfg.generator;
  g.translation_head = prefix != "baseline";
  RNet<T> net(g, prefix, 0);
  load_network(net, tensors);
  return net;
}

template <typename T>
TrainResult run_training(const CommandContext& ctx, const fs::path& dir, const TrainConfig& cfg,
                         const TrainingData& data, bool resume) {
  TrainOptions o;
  o.checkpoint_dir = dir;
  o.resume = resume;
  o.stop_after = ctx.stop_after;
  const std::string name = dir.filename().string();
  o.on_validation = [&](const ValidationRecord& v) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s: epoch %zu, iteration %llu, validation loss %.5f (cycle %.4f, seg %.4f)",
                  name.c_str(), v.epoch, static_cast<unsigned long long>(v.iteration), v.selection, v.loss.cycle,
                  v.loss.seg);
    say(ctx, buf);
  };
  return cfg.mode == TrainMode::susan ? train<T>(cfg, data, o) : train_supervised<T>(cfg, data, o);
}

// Train into `dir`. Existing runs are resumed when allowed, replaced with force, else refused.
TrainResult train_into(const CommandContext& ctx, const Dataset& dataset, const ExperimentConfig& config,
                       TrainMode method, const fs::path& dir, bool resume) {
  if (non_empty_dir(dir) && !resume) {
    if (!ctx.force) {
      throw ConfigError(dir.string() + " already holds a run; pass --force to replace it or --resume to continue");
    }
    fs::remove_all(dir);
  }
  const TrainConfig cfg = config.train_config(method);
  fs::create_directories(dir);
  write_file(dir / "train-config.txt", cfg.canonical());
  const TrainingData data = training_data(dataset, config, method);
  const TrainResult r = ctx.precision == Precision::f32 ? run_training<float>(ctx, dir, cfg, data, resume)
                                                        : run_training<double>(ctx, dir, cfg, data, resume);
  if (method == TrainMode::susan && !r.audit.clean()) {
    throw LeakageError("leakage audit failed: target mask batches reached the segmentation loss");
  }
  if (r.diverged) say(ctx, dir.filename().string() + ": stopped by the divergence guard");
  return r;
}

template <typename T>
std::vector<SubjectScores> score_subjects(RNet<T>& net, const ExperimentConfig& config, const Dataset& dataset,
                                          const std::vector<std::string>& ids) {
  std::vector<SubjectScores> out;
  for (const auto& id : ids) {
    const Subject& s = dataset.subjects.at(id);
    if (s.masks.size() != s.slices.size()) throw ConfigError("missing ground-truth masks for test subject " + id);
    const SliceSet set = make_slice_set({s}, config.image_size, true);
    const auto pred = segment_target(net, stack_images<T>(set, all_indices(set.size())));
    out.push_back(score_subject(pred, set.masks, preprocessed_spacing(config, s.spacing)));
  }
  return out;
}

template <typename T>
MethodEvaluation evaluate_method(const CommandContext& ctx, const Dataset& dataset, const ExperimentConfig& config,
                                 TrainMode method, const fs::path& dir) {
  const TrainConfig cfg = config.train_config(method);
  const auto tensors = load_best(ctx, dir, cfg);
  RNet<T> net = load_rnet<T>(cfg, net_prefix(method, true), tensors);
  MethodEvaluation e;
  e.method = method;
  e.subjects = dataset.split.target_test;
  e.scores = score_subjects(net, config, dataset, e.subjects);
  e.rows = summarize(dataset_name(config), to_string(method), e.scores);
  return e;
}

std::vector<bool> absent_classes(const SliceSet& labeled) {
  std::vector<bool> seen(kNumClasses, false);
  for (const auto& m : labeled.masks) {
    for (auto l : m.labels) seen[l] = true;
  }
  std::vector<bool> absent(kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) absent[c] = !seen[c];
  return absent;
}

// Classifier trained on real target images, scored on real target test slices and on
// reference validation slices translated by F.
template <typename T>
FcnScores fcn_scores(const CommandContext& ctx, const Dataset& dataset, const ExperimentConfig& config,
                     const std::vector<NamedTensor>& susan_state) {
  // The classifier belongs to the base configuration even when `config` is a sweep variant.
  const TrainConfig base_cfg = ctx.config.train_config(TrainMode::supervised);
  const auto base_state = load_best(ctx, train_dir(ctx.out, TrainMode::supervised), base_cfg);
  RNet<T> classifier = load_rnet<T>(base_cfg, "baseline", base_state);
  RNet<T> f = load_rnet<T>(config.train_config(TrainMode::susan), "F", susan_state);

  const SliceSet train_set = make_slice_set(dataset.select(dataset.split.target_train), config.image_size, true);
  const auto absent = absent_classes(train_set);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (absent[c]) say(ctx, "warning: class " + class_name(c) + " absent from classifier training masks; excluded");
  }
  const SliceSet real = make_slice_set(dataset.select(dataset.split.target_test), config.image_size, true);
  const SliceSet source = make_slice_set(dataset.select(dataset.split.reference_validation), config.image_size, true);
  FcnScores s;
  s.real = fcn_score(classifier, stack_images<T>(real, all_indices(real.size())), real.masks, absent).accuracy;
  const Tensor4<T> synthetic = translate(f, stack_images<T>(source, all_indices(source.size())));
  s.synthetic = fcn_score(classifier, synthetic, source.masks, absent).accuracy;
  return s;
}

std::vector<std::string> report_notes(const ExperimentConfig& config, Precision precision,
                                      const std::vector<MethodEvaluation>& methods) {
  std::vector<std::string> notes;
  notes.push_back("config " + config.hash() + ", precision " + to_string(precision));
  notes.push_back("VOE is computed over the full mask of each cartilage class; there are no condyle or plateau regions");
  notes.push_back("FCN-score classifier: depth-" + std::to_string(config.train.generator.depth) +
                  " R-Net segmentation head trained on real target images");
  notes.push_back("ASSD pools per-slice boundary distances over slices where prediction and truth are both non-empty");
  for (const auto& m : methods) {
    std::size_t skipped = 0;
    for (const auto& s : m.scores) {
      for (std::size_t c = 1; c < kNumClasses; ++c) skipped += s.assd_skipped_slices[c];
    }
    notes.push_back(to_string(m.method) + ": " + std::to_string(skipped) +
                    " class-slices skipped for ASSD (exactly one mask empty)");
  }
  return notes;
}

std::string pgm_name(const std::string& subject, std::size_t slice) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu", slice);
  return subject + "-" + buf + ".pgm";
}

template <typename T>
std::size_t translate_split(const CommandContext& ctx, Direction direction, const std::vector<Subject>& subjects,
                            TrainMode method) {
  const ExperimentConfig& config = ctx.config;
  const TrainConfig cfg = config.train_config(method);
  const auto tensors = load_best(ctx, train_dir(ctx.out, method), cfg);
  RNet<T> net = load_rnet<T>(cfg, direction == Direction::forward ? "F" : "B", tensors);
  const SliceSet set = make_slice_set(subjects, config.image_size, false);
  const Tensor4<T> input = stack_images<T>(set, all_indices(set.size()));
  const Tensor4<float> out = translate(net, input).template cast<float>();

  const fs::path dir = ctx.out / "translate" / to_string(direction);
  fs::remove_all(dir);
  fs::create_directories(dir / "previews");
  write_susn(dir / "translated.susn", {{"input", input.template cast<float>()}, {"translated", out}});
  std::vector<std::size_t> slice_in_subject(set.size());
  for (std::size_t i = 0, k = 0; i < set.size(); ++i) {
    k = (i > 0 && set.subjects[i] == set.subjects[i - 1]) ? k + 1 : 0;
    slice_in_subject[i] = k;
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    write_file(dir / "previews" / pgm_name(set.subjects[i], slice_in_subject[i]),
               encode_pgm(out.plane(i, 0), out.shape().h, out.shape().w));
  }
  return set.size();
}

const std::vector<std::string>& split_ids(const Dataset& d, const std::string& split) {
  if (split == "reference_train") return d.split.reference_train;
  if (split == "reference_validation") return d.split.reference_validation;
  if (split == "target_train") return d.split.target_train;
  if (split == "target_validation") return d.split.target_validation;
  if (split == "target_test") return d.split.target_test;
  throw ConfigError("unknown split '" + split + "'");
}

template <typename T>
SweepRow sweep_row(const CommandContext& ctx, const Dataset& dataset, const ExperimentConfig& config, double lambda) {
  const TrainConfig cfg = config.train_config(TrainMode::susan);
  const auto tensors = load_best(ctx, sweep_run_dir(ctx.out, lambda), cfg);
  RNet<T> b = load_rnet<T>(cfg, "B", tensors);
  const auto scores = score_subjects(b, config, dataset, dataset.split.target_test);
  SweepRow row;
  row.lambda_seg = lambda;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    double s = 0.0;
    for (const auto& sc : scores) s += sc.dice[c];
    row.dice[c] = s / static_cast<double>(scores.size());
    row.mean_dice += row.dice[c] / static_cast<double>(kNumClasses - 1);
  }
  row.fcn_score = fcn_scores<T>(ctx, dataset, config, tensors).synthetic;
  return row;
}

}  // namespace

fs::path data_dir(const fs::path& out) { return out / "data"; }
fs::path train_dir(const fs::path& out, TrainMode method) { return out / "train" / to_string(method); }
fs::path eval_dir(const fs::path& out) { return out / "eval"; }
fs::path sweep_dir(const fs::path& out) { return out / "sweep"; }
fs::path sweep_run_dir(const fs::path& out, double lambda_seg) {
  return sweep_dir(out) / ("lambda_seg_" + lambda_label(lambda_seg));
}

void cmd_generate(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  ctx.config.validate();
  if (non_empty_dir(ctx.out)) {
    if (!ctx.force) throw ConfigError("output directory " + ctx.out.string() + " is not empty; pass --force to overwrite");
    for (const char* sub : {"data", "train", "eval", "sweep", "translate"}) fs::remove_all(ctx.out / sub);
    fs::remove(ctx.out / kManifestName);
  }
  const Dataset d = generate_dataset(ctx.config);
  write_dataset(d, ctx.config, data_dir(ctx.out));
  write_file(ctx.out / "config.ini", ctx.config.canonical());
  say(ctx, "generated " + std::to_string(d.subjects.size()) + " subjects in " + data_dir(ctx.out).string());
  update_manifest(ctx.out, ctx.config, ctx.precision, "generate", seconds_since(t0));
}

TrainResult cmd_train(const CommandContext& ctx, TrainMode method) {
  const auto t0 = Clock::now();
  ctx.config.validate();
  const Dataset dataset = read_dataset(data_dir(ctx.out), ctx.config);
  TrainResult r = train_into(ctx, dataset, ctx.config, method, train_dir(ctx.out, method), ctx.resume);
  say(ctx, to_string(method) + ": " + (r.completed ? "finished" : "paused") + " after " +
               std::to_string(r.iterations) + " iterations; best epoch " + std::to_string(r.best.epoch));
  update_manifest(ctx.out, ctx.config, ctx.precision, "train-" + to_string(method), seconds_since(t0));
  return r;
}

EvaluationReport cmd_evaluate(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  const ExperimentConfig& config = ctx.config;
  config.validate();
  const Dataset dataset = read_dataset(data_dir(ctx.out), config);
  EvaluationReport report;
  for (TrainMode m : config.methods) {
    const fs::path dir = train_dir(ctx.out, m);
    if (!fs::exists(dir / "best.susn")) {
      say(ctx, "skipping " + to_string(m) + ": no checkpoint");
      continue;
    }
    report.methods.push_back(ctx.precision == Precision::f32 ? evaluate_method<float>(ctx, dataset, config, m, dir)
                                                             : evaluate_method<double>(ctx, dataset, config, m, dir));
  }
  if (report.methods.empty()) throw ConfigError("nothing to evaluate: no trained checkpoints under " + ctx.out.string());

  const fs::path dir = eval_dir(ctx.out);
  fs::remove_all(dir);
  fs::create_directories(dir);
  MetricsReport metrics;
  metrics.header_notes = report_notes(config, ctx.precision, report.methods);
  std::vector<MethodDice> dice;
  for (const auto& m : report.methods) {
    metrics.rows.insert(metrics.rows.end(), m.rows.begin(), m.rows.end());
    std::ostringstream per;
    write_per_subject_csv(per, dataset_name(config), m);
    fs::create_directories(dir / to_string(m.method));
    write_file(dir / to_string(m.method) / "per_subject.csv", per.str());
    MethodDice md;
    md.method = to_string(m.method);
    for (const auto& s : m.scores) {
      for (std::size_t c = 0; c < kNumClasses; ++c) md.per_class[c].push_back(s.dice[c]);
    }
    dice.push_back(std::move(md));
  }
  std::ostringstream csv;
  write_metrics_csv(csv, metrics);
  write_file(dir / "metrics.csv", csv.str());
  if (dice.size() >= 2) {
    std::ostringstream p;
    write_pvalue_matrix_csv(p, dataset_name(config), dice);
    write_file(dir / "pvalues.csv", p.str());
  }

  const bool have_susan = fs::exists(train_dir(ctx.out, TrainMode::susan) / "best.susn");
  const bool have_base = fs::exists(train_dir(ctx.out, TrainMode::supervised) / "best.susn");
  if (have_susan && have_base) {
    const auto state = load_best(ctx, train_dir(ctx.out, TrainMode::susan), config.train_config(TrainMode::susan));
    report.fcn = ctx.precision == Precision::f32 ? fcn_scores<float>(ctx, dataset, config, state)
                                                 : fcn_scores<double>(ctx, dataset, config, state);
    std::ostringstream f;
    f << "# classifier trained on real " << dataset_name(config) << " images; synthetic images are reference"
      << " validation slices translated by the forward generator\n";
    f << "dataset,images,ACC\n";
    f << dataset_name(config) << ",real_target_test," << format_number(report.fcn->real) << '\n';
    f << dataset_name(config) << ",synthetic_from_reference," << format_number(report.fcn->synthetic) << '\n';
    write_file(dir / "fcn.csv", f.str());
  }
  say(ctx, "wrote " + (dir / "metrics.csv").string());
  update_manifest(ctx.out, config, ctx.precision, "evaluate", seconds_since(t0));
  return report;
}

std::vector<SweepRow> cmd_sweep(const CommandContext& ctx) {
  const auto t0 = Clock::now();
  ctx.config.validate();
  const Dataset dataset = read_dataset(data_dir(ctx.out), ctx.config);
  if (!fs::exists(train_dir(ctx.out, TrainMode::supervised) / "best.susn")) {
    say(ctx, "training the supervised classifier used for the FCN-score");
    train_into(ctx, dataset, ctx.config, TrainMode::supervised, train_dir(ctx.out, TrainMode::supervised), true);
  }
  std::vector<ExperimentConfig> configs;
  for (double lambda : ctx.config.sweep_lambda_seg) {
    ExperimentConfig c = ctx.config;
    c.train.weights.seg = lambda;
    configs.push_back(c);
  }
  // Every value retrains from scratch; an interrupted sweep resumes each run where it stopped.
  auto run = [&](std::size_t i) {
    train_into(ctx, dataset, configs[i], TrainMode::susan, sweep_run_dir(ctx.out, configs[i].train.weights.seg), !ctx.force);
  };
  if (ctx.parallel) {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(configs.size());
    for (std::size_t i = 0; i < configs.size(); ++i) {
      threads.emplace_back([&, i] {
        try {
          run(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t i = 0; i < configs.size(); ++i) run(i);
  }

  std::vector<SweepRow> rows;
  for (const auto& c : configs) {
    rows.push_back(ctx.precision == Precision::f32 ? sweep_row<float>(ctx, dataset, c, c.train.weights.seg)
                                                   : sweep_row<double>(ctx, dataset, c, c.train.weights.seg));
  }
  std::ostringstream csv;
  for (const auto& note : report_notes(ctx.config, ctx.precision, {})) csv << "# " << note << '\n';
  csv << "# each segmentation weight retrained from scratch with all other settings unchanged\n";
  csv << "lambda_seg,FCN_score";
  for (std::size_t c = 1; c < kNumClasses; ++c) csv << ",DC_" << class_name(c);
  csv << ",DC_mean\n";
  for (const auto& r : rows) {
    csv << lambda_label(r.lambda_seg) << ',' << format_number(r.fcn_score);
    for (std::size_t c = 1; c < kNumClasses; ++c) csv << ',' << format_number(r.dice[c]);
    csv << ',' << format_number(r.mean_dice) << '\n';
  }
  write_file(sweep_dir(ctx.out) / "sweep.csv", csv.str());
  say(ctx, "wrote " + (sweep_dir(ctx.out) / "sweep.csv").string());
  update_manifest(ctx.out, ctx.config, ctx.precision, "sweep", seconds_since(t0));
  return rows;
}

std::string to_string(Direction d) { return d == Direction::forward ? "forward" : "backward"; }

Direction parse_direction(const std::string& s) {
  if (s == "forward") return Direction::forward;
  if (s == "backward") return Direction::backward;
  throw ConfigError("direction must be forward or backward, got '" + s + "'");
}

std::size_t cmd_translate(const CommandContext& ctx, Direction direction, const std::string& split, TrainMode method) {
  const auto t0 = Clock::now();
  ctx.config.validate();
  if (method != TrainMode::susan) {
    throw ConfigError("the " + to_string(direction) + " direction is unavailable: " + to_string(method) +
                      " checkpoints have no translation head");
  }
  const Dataset dataset = read_dataset(data_dir(ctx.out), ctx.config);
  const std::string which = split.empty() ? (direction == Direction::forward ? "reference_validation" : "target_test") : split;
  const auto subjects = dataset.select(split_ids(dataset, which));
  const bool from_reference = which.rfind("reference", 0) == 0;
  if (from_reference != (direction == Direction::forward)) {
    throw ConfigError(to_string(direction) + " translation expects " +
                      (direction == Direction::forward ? "reference" : "target") + " images, got split " + which);
  }
  const std::size_t n = ctx.precision == Precision::f32 ? translate_split<float>(ctx, direction, subjects, method)
                                                        : translate_split<double>(ctx, direction, subjects, method);
  say(ctx, "translated " + std::to_string(n) + " images of " + which);
  update_manifest(ctx.out, ctx.config, ctx.precision, "translate-" + to_string(direction), seconds_since(t0));
  return n;
}

std::uint8_t preview_level(double v) {
  const double level = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(level);
}

std::string encode_pgm(const float* pixels, std::size_t height, std::size_t width) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t i = 0; i < height * width; ++i) out.push_back(static_cast<char>(preview_level(pixels[i])));
  return out;
}

void write_per_subject_csv(std::ostream& out, const std::string& dataset, const MethodEvaluation& eval) {
  out << "dataset,method,subject,class,DC,VOE,ASSD_mm,ASSD_skipped_slices\n";
  for (std::size_t i = 0; i < eval.scores.size(); ++i) {
    const auto& s = eval.scores[i];
    for (std::size_t c = 1; c < kNumClasses; ++c) {
      out << dataset << ',' << to_string(eval.method) << ',' << eval.subjects[i] << ',' << class_name(c) << ','
          << exact(s.dice[c]) << ',' << (is_cartilage(c) ? exact(s.voe[c]) : "NA") << ','
          << (s.assd_defined[c] ? exact(s.assd_mm[c]) : "NA") << ',' << s.assd_skipped_slices[c] << '\n';
    }
  }
}

}  // namespace susan
