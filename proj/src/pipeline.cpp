#include "ovdet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "ovdet/common.hpp"

namespace ovdet::pipeline {

using nlohmann::json;

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::Pretrain: return "pretrain";
    case Phase::Finetune: return "finetune";
    case Phase::Scratch: return "scratch";
  }
  throw std::logic_error("unreachable phase");
}

Phase phase_from_name(const std::string& name) {
  if (name == "pretrain") return Phase::Pretrain;
  if (name == "finetune") return Phase::Finetune;
  if (name == "scratch") return Phase::Scratch;
  throw std::invalid_argument("unknown phase: " + name);
}

double lr_at(const std::vector<LrStage>& schedule, long step) {
  if (schedule.empty()) throw std::invalid_argument("empty learning-rate schedule");
  if (step < 0) throw std::invalid_argument("negative step");
  for (const auto& stage : schedule) {
    if (step < stage.until_step) return stage.lr;
  }
  return schedule.back().lr;
}

std::vector<LrStage> default_schedule(long max_steps, double base_lr) {
  if (base_lr <= 0.0) throw std::invalid_argument("base_lr must be positive");
  if (max_steps <= 0) return {{1, base_lr}};
  const long t1 = std::max<long>(1, static_cast<long>(std::ceil(0.6 * max_steps)));
  const long t2 = std::max<long>(t1 + 1, static_cast<long>(std::ceil(0.9 * max_steps)));
  const long t3 = std::max<long>(t2 + 1, max_steps);
  return {{t1, base_lr}, {t2, base_lr / 10.0}, {t3, base_lr / 100.0}};
}

void RunConfig::validate() const {
  if (dataset_dir.empty()) throw std::invalid_argument("dataset_dir is required");
  if (output_dir.empty()) throw std::invalid_argument("output_dir is required");
  if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train_fraction must lie in (0, 1)");
  }
  if (extra_negatives < 0) throw std::invalid_argument("extra_negatives must be >= 0");
  if (base_lr <= 0.0) throw std::invalid_argument("base_lr must be positive");
  long prev_until = 0;
  double prev_lr = std::numeric_limits<double>::infinity();
  for (const auto& stage : lr_schedule) {
    if (stage.lr <= 0.0) throw std::invalid_argument("schedule lr values must be positive");
    if (stage.lr > prev_lr) throw std::invalid_argument("schedule lr values must be non-increasing");
    if (stage.until_step <= prev_until) {
      throw std::invalid_argument("schedule thresholds must be strictly increasing");
    }
    prev_until = stage.until_step;
    prev_lr = stage.lr;
  }
  if (phase == Phase::Finetune || phase == Phase::Scratch) {
    if (split_path.empty()) throw std::invalid_argument("fine-tuning requires a split file");
  }
  if (phase == Phase::Finetune && checkpoint_in.empty() && !from_scratch_ablation) {
    throw std::invalid_argument(
        "fine-tuning without a checkpoint requires from_scratch_ablation=true");
  }
  if (phase == Phase::Scratch && !checkpoint_in.empty()) {
    throw std::invalid_argument("the scratch ablation must not load a checkpoint");
  }
  detector.validate();
}

namespace {

json encoder_to_json(const textspace::EncoderSpec& spec) {
  return {{"kind", textspace::encoder_kind_name(spec.kind)},
          {"d", spec.d},
          {"seed", spec.seed},
          {"prompt_template", spec.prompt_template}};
}

textspace::EncoderSpec encoder_from_json(const json& j) {
  textspace::EncoderSpec spec;
  if (j.contains("kind")) spec.kind = textspace::encoder_kind_from_name(j.at("kind").get<std::string>());
  spec.d = j.value("d", spec.d);
  spec.seed = j.value("seed", spec.seed);
  spec.prompt_template = j.value("prompt_template", spec.prompt_template);
  return spec;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["version"] = 1;
  j["phase"] = phase_name(cfg.phase);
  j["dataset_dir"] = cfg.dataset_dir.string();
  j["taxonomy"] = cfg.taxonomy_path.string();
  j["split"] = cfg.split_path.string();
  j["output_dir"] = cfg.output_dir.string();
  j["encoder"] = encoder_to_json(cfg.encoder);
  j["detector"] = json::parse(detector::detector_config_to_json(cfg.detector));
  j["align"] = {{"tau", cfg.align.tau}, {"image_loss_weight", cfg.align.image_loss_weight}};
  json sched = json::array();
  for (const auto& s : cfg.lr_schedule) sched.push_back({s.until_step, s.lr});
  j["lr_schedule"] = std::move(sched);
  j["base_lr"] = cfg.base_lr;
  j["max_steps"] = cfg.max_steps;
  j["batch_size"] = cfg.batch_size;
  j["momentum"] = cfg.momentum;
  j["extra_negatives"] = cfg.extra_negatives;
  j["train_fraction"] = cfg.train_fraction;
  j["split_seed"] = cfg.split_seed;
  j["seed"] = cfg.seed;
  j["checkpoint_in"] = cfg.checkpoint_in.string();
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["from_scratch_ablation"] = cfg.from_scratch_ablation;
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("version", 1) != 1) {
    throw std::runtime_error("unsupported run config version");
  }
  RunConfig cfg;
  cfg.phase = phase_from_name(j.value("phase", std::string("pretrain")));
  cfg.dataset_dir = j.value("dataset_dir", std::string());
  cfg.taxonomy_path = j.value("taxonomy", std::string());
  cfg.split_path = j.value("split", std::string());
  cfg.output_dir = j.value("output_dir", std::string());
  if (j.contains("encoder")) cfg.encoder = encoder_from_json(j.at("encoder"));
  if (j.contains("detector")) {
    cfg.detector = detector::detector_config_from_json(j.at("detector").dump());
  }
  if (j.contains("align")) {
    cfg.align.tau = j.at("align").value("tau", cfg.align.tau);
    cfg.align.image_loss_weight =
        j.at("align").value("image_loss_weight", cfg.align.image_loss_weight);
  }
  if (j.contains("lr_schedule")) {
    for (const auto& entry : j.at("lr_schedule")) {
      cfg.lr_schedule.push_back({entry.at(0).get<long>(), entry.at(1).get<double>()});
    }
  }
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.max_steps = j.value("max_steps", cfg.max_steps);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.extra_negatives = j.value("extra_negatives", cfg.extra_negatives);
  cfg.train_fraction = j.value("train_fraction", cfg.train_fraction);
  cfg.split_seed = j.value("split_seed", cfg.split_seed);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.checkpoint_in = j.value("checkpoint_in", std::string());
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  cfg.from_scratch_ablation = j.value("from_scratch_ablation", cfg.from_scratch_ablation);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_file(path));
}

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Category names covered by the seen side of a split. Class-level splits
/// name Classes, which expand through the registry.
std::set<std::string> seen_category_set(const taxonomy::SplitSpec& split,
                                        const taxonomy::TaxonomyRegistry& registry) {
  if (split.protocol == taxonomy::SplitProtocol::ClassLevel) {
    const std::vector<std::string> classes(split.seen.begin(), split.seen.end());
    const std::vector<std::string> members = registry.members_of(classes);
    return {members.begin(), members.end()};
  }
  return split.seen;
}

struct TrainSetup {
  taxonomy::TaxonomyRegistry registry;
  std::optional<taxonomy::SplitSpec> split;
  datakit::DatasetIndex train;
  datakit::DatasetIndex val;
  std::vector<std::string> vocabulary;  // sorted category names used in training
  std::map<std::string, datakit::Image> images;  // train image id -> pixels
};

/// Shared setup: taxonomy, annotations, optional split restriction, the
/// train/val partition, and the training vocabulary.
TrainSetup prepare(const RunConfig& cfg, bool require_split) {
  TrainSetup setup;
  const auto taxonomy_path =
      cfg.taxonomy_path.empty() ? cfg.dataset_dir / "taxonomy.json" : cfg.taxonomy_path;
  setup.registry = taxonomy::load_taxonomy(taxonomy_path);

  datakit::DatasetIndex index = datakit::load_annotations(cfg.dataset_dir / "annotations.json");
  index.mark_curated();

  if (!cfg.split_path.empty()) {
    taxonomy::SplitSpec split = taxonomy::load_split(cfg.split_path);
    const taxonomy::ValidationReport report = taxonomy::validate_split(split, setup.registry);
    if (!report.all_pass()) {
      std::string detail;
      for (const auto& check : report.checks) {
        if (!check.pass) detail += " [" + check.name + "] " + check.detail;
      }
      throw std::runtime_error("split fails validation:" + detail);
    }
    setup.split = std::move(split);
  } else if (require_split) {
    throw std::invalid_argument("this phase requires a split file");
  }

  auto [train, val] = datakit::train_val_split(index, cfg.train_fraction, cfg.split_seed);
  setup.val = std::move(val);

  std::set<std::string> allowed;
  if (setup.split.has_value()) {
    allowed = seen_category_set(*setup.split, setup.registry);
  } else {
    for (const auto& cat : train.categories()) allowed.insert(cat);
  }

  // Restrict training to the allowed vocabulary, preserving image order.
  datakit::DatasetIndex filtered;
  filtered.root = train.root;
  for (const auto& rec : train.images) {
    if (!allowed.count(rec.dominant_category)) continue;
    filtered.images.push_back(rec);
    filtered.per_category[rec.dominant_category].push_back(rec.image_id);
  }
  if (filtered.images.empty()) {
    throw std::runtime_error("no training images remain after the split restriction");
  }
  setup.train = std::move(filtered);

  for (const auto& [cat, ids] : setup.train.per_category) setup.vocabulary.push_back(cat);
  std::sort(setup.vocabulary.begin(), setup.vocabulary.end());

  for (const auto& rec : setup.train.images) {
    setup.images[rec.image_id] = datakit::load_ppm(setup.train.root / rec.file_name);
  }
  return setup;
}

class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& path, bool append) : path_(path) {
    std::filesystem::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open metrics log: " + path.string());
  }
  void write(const json& j) {
    out_ << j.dump() << "\n";
    out_.flush();
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

std::filesystem::path checkpoint_path(const RunConfig& cfg, const std::string& phase,
                                      long step, bool final) {
  if (final) return cfg.output_dir / (phase + "_final.ckpt");
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_step%06ld.ckpt", step);
  return cfg.output_dir / (phase + buf);
}

}  // namespace

RunResult run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.phase != Phase::Pretrain) throw std::invalid_argument("run_pretrain wants phase=pretrain");
  std::filesystem::create_directories(cfg.output_dir);

  TrainSetup setup = prepare(cfg, /*require_split=*/false);
  textspace::PrototypeBank bank =
      textspace::build_prototype_bank(setup.vocabulary, cfg.encoder, /*include_background=*/false);
  bank.freeze();
  if (bank.dim() != cfg.detector.feature_dim) {
    throw std::invalid_argument("encoder dimension does not match the detector feature dim");
  }

  std::unique_ptr<detector::DetectorModel> model;
  Rng rng(mix_seed(cfg.seed, hash64("train_loop")));
  long step_start = 0;
  if (!cfg.checkpoint_in.empty()) {
    detector::LoadedCheckpoint loaded = detector::load_checkpoint(cfg.checkpoint_in);
    if (loaded.meta.phase != "pretrain") {
      throw std::runtime_error("pre-training can only resume a pre-training checkpoint");
    }
    model = std::move(loaded.model);
    step_start = loaded.meta.step;
    rng.set_state(loaded.meta.rng_state);
  } else {
    model = std::make_unique<detector::DetectorModel>(cfg.detector,
                                                      mix_seed(cfg.seed, hash64("model_init")));
  }

  MetricsLog log(cfg.output_dir / "metrics_pretrain.jsonl", /*append=*/step_start > 0);
  detector::CheckpointMeta meta;
  meta.phase = "pretrain";
  meta.seed = cfg.seed;
  meta.bank_digest = textspace::bank_digest(bank);
  meta.run_config_json = run_config_to_json(cfg);

  const std::vector<LrStage> schedule =
      cfg.lr_schedule.empty() ? default_schedule(cfg.max_steps, cfg.base_lr) : cfg.lr_schedule;

  const int n_cats = static_cast<int>(setup.vocabulary.size());
  std::vector<int> cat_perm(n_cats);
  std::iota(cat_perm.begin(), cat_perm.end(), 0);

  nn::ParamStore<Scalar> last_good = model->params();
  std::string last_good_rng = rng.state();
  long last_good_step = step_start;

  RunResult result;
  result.metrics_path = log.path();
  double final_loss = 0.0;

  long step = step_start;
  for (; step < cfg.max_steps; ++step) {
    const double lr = lr_at(schedule, step);

    rng.shuffle(cat_perm);
    const int b = std::min(cfg.batch_size, n_cats);
    detector::PretrainBatch batch;
    const int extras = std::min(cfg.extra_negatives, n_cats - b);
    Mat candidates(b + extras, cfg.detector.feature_dim);
    for (int i = 0; i < b + extras; ++i) {
      candidates.row(i) = bank.matrix().row(cat_perm[static_cast<std::size_t>(i)]).cast<Scalar>();
    }
    batch.candidates = candidates;
    batch.image_texts = candidates.topRows(b);
    for (int i = 0; i < b; ++i) {
      const std::string& cat = setup.vocabulary[static_cast<std::size_t>(cat_perm[i])];
      const auto& ids = setup.train.per_category.at(cat);
      const std::string& image_id = ids[rng.below(ids.size())];
      const datakit::ImageRecord* rec = setup.train.find(image_id);
      batch.images.push_back(setup.images.at(image_id));
      batch.boxes.push_back(rec->boxes);
      batch.positives.emplace_back(rec->boxes.size(), i);
    }

    const detector::PretrainStats stats = model->pretrain_step(batch, cfg.align);
    if (!std::isfinite(stats.total)) {
      model->params() = last_good;
      meta.step = last_good_step;
      meta.rng_state = last_good_rng;
      result.checkpoint_path = checkpoint_path(cfg, "pretrain", last_good_step, /*final=*/true);
      detector::save_checkpoint(*model, meta, result.checkpoint_path);
      log.write({{"step", step},
                 {"event", "abort_non_finite"},
                 {"timestamp", utc_timestamp()}});
      result.steps_run = last_good_step;
      result.final_loss = final_loss;
      result.aborted_non_finite = true;
      return result;
    }
    model->params().sgd_step(static_cast<Scalar>(lr), static_cast<Scalar>(cfg.momentum));
    last_good = model->params();
    last_good_rng = rng.state();
    last_good_step = step + 1;
    final_loss = stats.total;

    log.write({{"step", step},
               {"lr", lr},
               {"region_loss", stats.region_loss},
               {"image_loss", stats.image_loss},
               {"total", stats.total},
               {"regions", stats.regions},
               {"timestamp", utc_timestamp()}});

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.max_steps) {
      meta.step = step + 1;
      meta.rng_state = rng.state();
      detector::save_checkpoint(*model, meta, checkpoint_path(cfg, "pretrain", step + 1, false));
    }
  }

  meta.step = cfg.max_steps;
  meta.rng_state = rng.state();
  result.checkpoint_path = checkpoint_path(cfg, "pretrain", cfg.max_steps, /*final=*/true);
  detector::save_checkpoint(*model, meta, result.checkpoint_path);
  result.steps_run = cfg.max_steps - step_start;
  result.final_loss = final_loss;
  return result;
}

RunResult run_finetune(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.phase != Phase::Finetune && cfg.phase != Phase::Scratch) {
    throw std::invalid_argument("run_finetune wants phase=finetune or phase=scratch");
  }
  std::filesystem::create_directories(cfg.output_dir);
  const std::string phase = phase_name(cfg.phase);

  TrainSetup setup = prepare(cfg, /*require_split=*/true);
  textspace::PrototypeBank bank =
      textspace::build_prototype_bank(setup.vocabulary, cfg.encoder, /*include_background=*/false);
  bank.freeze();
  if (bank.dim() != cfg.detector.feature_dim) {
    throw std::invalid_argument("encoder dimension does not match the detector feature dim");
  }
  const std::string digest = textspace::bank_digest(bank);
  const Mat bank_matrix = bank.matrix().cast<Scalar>();

  std::unique_ptr<detector::DetectorModel> model;
  Rng rng(mix_seed(cfg.seed, hash64("train_loop")));
  long step_start = 0;
  if (!cfg.checkpoint_in.empty() && cfg.phase == Phase::Finetune) {
    detector::LoadedCheckpoint loaded = detector::load_checkpoint(cfg.checkpoint_in);
    model = std::move(loaded.model);
    if (loaded.meta.phase == phase) {
      // resuming an interrupted run of this very phase
      if (loaded.meta.bank_digest != digest) {
        throw std::runtime_error("resume rejected: prototype bank changed since the checkpoint");
      }
      step_start = loaded.meta.step;
      rng.set_state(loaded.meta.rng_state);
    }
  } else {
    model = std::make_unique<detector::DetectorModel>(cfg.detector,
                                                      mix_seed(cfg.seed, hash64("model_init")));
  }
  if (model->config().feature_dim != bank.dim()) {
    throw std::runtime_error("checkpoint feature dim does not match the bank");
  }

  // ground-truth labels as bank rows, fixed up front
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < setup.vocabulary.size(); ++i) {
    label_of[setup.vocabulary[i]] = static_cast<int>(i);
  }

  MetricsLog log(cfg.output_dir / ("metrics_" + phase + ".jsonl"), /*append=*/step_start > 0);
  detector::CheckpointMeta meta;
  meta.phase = phase;
  meta.seed = cfg.seed;
  meta.bank_digest = digest;
  meta.run_config_json = run_config_to_json(cfg);

  const std::vector<LrStage> schedule =
      cfg.lr_schedule.empty() ? default_schedule(cfg.max_steps, cfg.base_lr) : cfg.lr_schedule;

  const int n_images = static_cast<int>(setup.train.images.size());
  std::vector<int> image_perm(n_images);
  std::iota(image_perm.begin(), image_perm.end(), 0);

  nn::ParamStore<Scalar> last_good = model->params();
  std::string last_good_rng = rng.state();
  long last_good_step = step_start;

  std::set<std::string> observed;  // vocabulary-leak audit
  RunResult result;
  result.metrics_path = log.path();
  double final_loss = 0.0;

  long step = step_start;
  for (; step < cfg.max_steps; ++step) {
    const double lr = lr_at(schedule, step);

    rng.shuffle(image_perm);
    const int b = std::min(cfg.batch_size, n_images);
    std::vector<detector::FinetuneExample> batch;
    batch.reserve(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
      const datakit::ImageRecord& rec = setup.train.images[static_cast<std::size_t>(image_perm[i])];
      detector::FinetuneExample ex;
      ex.image = setup.images.at(rec.image_id);
      ex.gt_boxes = rec.boxes;
      ex.gt_labels.assign(rec.boxes.size(), label_of.at(rec.dominant_category));
      batch.push_back(std::move(ex));
      observed.insert(rec.dominant_category);
    }

    const detector::FinetuneStats stats = model->finetune_step(batch, bank_matrix, rng);
    if (!std::isfinite(stats.total)) {
      model->params() = last_good;
      meta.step = last_good_step;
      meta.rng_state = last_good_rng;
      result.checkpoint_path = checkpoint_path(cfg, phase, last_good_step, /*final=*/true);
      detector::save_checkpoint(*model, meta, result.checkpoint_path);
      log.write({{"step", step},
                 {"event", "abort_non_finite"},
                 {"timestamp", utc_timestamp()}});
      result.steps_run = last_good_step;
      result.final_loss = final_loss;
      result.aborted_non_finite = true;
      return result;
    }
    model->params().sgd_step(static_cast<Scalar>(lr), static_cast<Scalar>(cfg.momentum));
    last_good = model->params();
    last_good_rng = rng.state();
    last_good_step = step + 1;
    final_loss = stats.total;

    json line = {{"step", step},
                 {"lr", lr},
                 {"objectness", stats.objectness},
                 {"box_reg", stats.box_reg},
                 {"classification", stats.classification},
                 {"total", stats.total},
                 {"pos_anchors", stats.pos_anchors},
                 {"pos_rois", stats.pos_rois},
                 {"timestamp", utc_timestamp()}};
    if (stats.box_warning) line["warning"] = "no positive anchors in batch";
    log.write(line);

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.max_steps) {
      meta.step = step + 1;
      meta.rng_state = rng.state();
      detector::save_checkpoint(*model, meta, checkpoint_path(cfg, phase, step + 1, false));
    }
  }

  // Vocabulary hygiene: everything observed in batches must be a seen name.
  std::vector<std::string> leaked;
  for (const auto& cat : observed) {
    if (!label_of.count(cat)) leaked.push_back(cat);
  }
  log.write({{"event", "vocabulary_audit"},
             {"seen_vocabulary", setup.vocabulary.size()},
             {"observed_categories", observed.size()},
             {"leaked", leaked},
             {"timestamp", utc_timestamp()}});
  if (!leaked.empty()) {
    throw std::runtime_error("vocabulary leak: training touched non-seen categories");
  }

  // Export the classifier bank with the learned background row attached.
  textspace::PrototypeBank out_bank =
      textspace::build_prototype_bank(setup.vocabulary, cfg.encoder, /*include_background=*/false);
  out_bank.set_background(model->background_row().cast<double>());
  out_bank.freeze();
  result.bank_path = cfg.output_dir / ("bank_" + phase + ".ovbank");
  textspace::save_bank(out_bank, result.bank_path);

  meta.step = cfg.max_steps;
  meta.rng_state = rng.state();
  result.checkpoint_path = checkpoint_path(cfg, phase, cfg.max_steps, /*final=*/true);
  detector::save_checkpoint(*model, meta, result.checkpoint_path);
  result.steps_run = cfg.max_steps - step_start;
  result.final_loss = final_loss;
  return result;
}

std::vector<evalkit::Detection> detect_dataset(const detector::DetectorModel& model,
                                               const textspace::PrototypeBank& bank,
                                               const datakit::DatasetIndex& index) {
  std::vector<evalkit::Detection> out;
  for (const auto& rec : index.images) {
    const datakit::Image img = datakit::load_ppm(index.root / rec.file_name);
    for (const auto& det : model.infer(img, bank)) {
      evalkit::Detection d;
      d.image_id = rec.image_id;
      d.category = det.category;
      d.box = det.box;
      d.score = det.score;
      out.push_back(std::move(d));
    }
  }
  return out;
}

}  // namespace ovdet::pipeline
