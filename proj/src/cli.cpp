#include "ovdet/cli.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "CLI11.hpp"
#include "ovdet/attribgen.hpp"
#include "ovdet/common.hpp"
#include "ovdet/datakit.hpp"
#include "ovdet/detector.hpp"
#include "ovdet/evalkit.hpp"
#include "ovdet/pipeline.hpp"
#include "ovdet/taxonomy.hpp"
#include "ovdet/textspace.hpp"

namespace ovdet::cli {

using nlohmann::json;

namespace {

const std::map<std::string, std::array<std::uint8_t, 3>> kPalette = {
    {"red", {200, 40, 40}},     {"blue", {40, 80, 210}},    {"green", {40, 170, 60}},
    {"yellow", {230, 200, 40}}, {"magenta", {200, 60, 190}}, {"cyan", {50, 200, 200}},
    {"orange", {230, 140, 40}}, {"purple", {130, 60, 200}}};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

datakit::ColorDef parse_color(const std::string& token) {
  // either a palette name or "name:R,G,B"
  const std::size_t colon = token.find(':');
  if (colon == std::string::npos) {
    auto it = kPalette.find(token);
    if (it == kPalette.end()) {
      throw CLI::ValidationError("--colors", "unknown palette color: " + token);
    }
    return {token, it->second};
  }
  const std::string name = token.substr(0, colon);
  const std::vector<std::string> parts = split_csv(token.substr(colon + 1));
  if (parts.size() != 3) {
    throw CLI::ValidationError("--colors", "custom color needs name:R,G,B: " + token);
  }
  std::array<std::uint8_t, 3> rgb{};
  for (int i = 0; i < 3; ++i) {
    const int v = std::stoi(parts[static_cast<std::size_t>(i)]);
    if (v < 0 || v > 255) throw CLI::ValidationError("--colors", "channel outside [0,255]");
    rgb[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v);
  }
  return {name, rgb};
}

void emit(const CommandOutcome& outcome, bool as_json) {
  if (as_json) {
    json j;
    j["exit_code"] = outcome.exit_code;
    json arts = json::array();
    for (const auto& a : outcome.artifacts) arts.push_back(a.string());
    j["artifacts"] = std::move(arts);
    j["summary"] = outcome.summary;
    std::cout << j.dump(2) << "\n";
    return;
  }
  for (const auto& line : outcome.summary) std::cout << line << "\n";
  for (const auto& a : outcome.artifacts) std::cout << "artifact: " << a.string() << "\n";
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::string colors = "red,blue,green";
  std::string shapes = "circle,square,triangle";
  datakit::SynthConfig cfg = datakit::default_synth_config();
};

CommandOutcome cmd_synth(const SynthArgs& args) {
  datakit::SynthConfig cfg = args.cfg;
  cfg.colors.clear();
  for (const auto& token : split_csv(args.colors)) cfg.colors.push_back(parse_color(token));
  cfg.shapes = split_csv(args.shapes);

  const datakit::SynthOutput out = datakit::gen_synthetic(cfg, args.out);
  const datakit::Stats stats = datakit::dataset_stats(out.index);

  CommandOutcome outcome;
  outcome.artifacts = {out.annotations_file, out.taxonomy_file, out.manifest_file};
  outcome.summary.push_back("generated " + std::to_string(stats.images) + " images, " +
                            std::to_string(stats.boxes) + " boxes across " +
                            std::to_string(stats.categories) + " categories");
  return outcome;
}

struct SplitArgs {
  std::string taxonomy;
  std::string protocol = "class_level";
  std::string seen_classes;
  std::uint64_t seed = 0;
  std::string out;
};

CommandOutcome cmd_split(const SplitArgs& args) {
  const taxonomy::TaxonomyRegistry registry = taxonomy::load_taxonomy(args.taxonomy);
  const taxonomy::SplitProtocol protocol = taxonomy::protocol_from_name(args.protocol);
  taxonomy::SplitParams params;
  params.seen_classes = split_csv(args.seen_classes);

  const taxonomy::SplitSpec split = taxonomy::gen_split(registry, protocol, params, args.seed);
  const taxonomy::ValidationReport report = taxonomy::validate_split(split, registry);

  CommandOutcome outcome;
  for (const auto& check : report.checks) {
    outcome.summary.push_back(std::string(check.pass ? "[ok]   " : "[FAIL] ") + check.name +
                              (check.detail.empty() ? "" : ": " + check.detail));
  }
  outcome.summary.push_back("seen " + std::to_string(split.seen.size()) + " / unseen " +
                            std::to_string(split.unseen.size()) + " (" +
                            taxonomy::protocol_name(split.protocol) + ")");
  if (!report.all_pass()) {
    outcome.exit_code = 1;
    return outcome;
  }
  taxonomy::save_split(split, args.out);
  outcome.artifacts.push_back(args.out);
  return outcome;
}

struct TrainArgs {
  std::string config;
  std::string dataset;     // optional overrides
  std::string split;
  std::string out;
  std::string checkpoint;
  long max_steps = -1;
  long seed = -1;
};

pipeline::RunConfig load_with_overrides(const TrainArgs& args, pipeline::Phase want) {
  pipeline::RunConfig cfg = pipeline::load_run_config(args.config);
  if (!args.dataset.empty()) cfg.dataset_dir = args.dataset;
  if (!args.split.empty()) cfg.split_path = args.split;
  if (!args.out.empty()) cfg.output_dir = args.out;
  if (!args.checkpoint.empty()) cfg.checkpoint_in = args.checkpoint;
  if (args.max_steps >= 0) cfg.max_steps = args.max_steps;
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (want == pipeline::Phase::Pretrain && cfg.phase != pipeline::Phase::Pretrain) {
    throw std::invalid_argument("config phase must be pretrain for this command");
  }
  if (want == pipeline::Phase::Finetune && cfg.phase == pipeline::Phase::Pretrain) {
    throw std::invalid_argument("config phase must be finetune or scratch for this command");
  }
  cfg.validate();
  return cfg;
}

CommandOutcome report_run(const pipeline::RunResult& result) {
  CommandOutcome outcome;
  outcome.artifacts.push_back(result.checkpoint_path);
  outcome.artifacts.push_back(result.metrics_path);
  if (!result.bank_path.empty()) outcome.artifacts.push_back(result.bank_path);
  outcome.summary.push_back("ran " + std::to_string(result.steps_run) + " steps, final loss " +
                            std::to_string(result.final_loss));
  if (result.aborted_non_finite) {
    outcome.summary.push_back("ABORTED on non-finite loss; checkpoint holds the last good state");
    outcome.exit_code = 1;
  }
  return outcome;
}

struct DetectArgs {
  std::string checkpoint;
  std::string bank;
  std::string dataset;
  std::string out;
};

CommandOutcome cmd_detect(const DetectArgs& args) {
  const detector::LoadedCheckpoint loaded = detector::load_checkpoint(args.checkpoint);
  const textspace::PrototypeBank bank = textspace::load_bank(args.bank);
  datakit::DatasetIndex index =
      datakit::load_annotations(std::filesystem::path(args.dataset) / "annotations.json");

  const std::vector<evalkit::Detection> dets =
      pipeline::detect_dataset(*loaded.model, bank, index);
  evalkit::save_detections(dets, args.out);

  CommandOutcome outcome;
  outcome.artifacts.push_back(args.out);
  outcome.summary.push_back(std::to_string(dets.size()) + " detections over " +
                            std::to_string(index.images.size()) + " images, vocabulary " +
                            std::to_string(bank.size()));
  return outcome;
}

struct BankArgs {
  std::string bank_in;
  std::string categories;
  std::string names_file;
  std::string out;
};

CommandOutcome cmd_bank(const BankArgs& args) {
  const textspace::PrototypeBank bank = textspace::load_bank(args.bank_in);
  std::vector<std::string> names = split_csv(args.categories);
  if (!args.names_file.empty()) {
    std::ifstream in(args.names_file);
    if (!in) throw std::runtime_error("cannot read names file: " + args.names_file);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
  }
  const textspace::PrototypeBank swapped =
      textspace::swap_vocabulary(bank, names, bank.spec());
  textspace::save_bank(swapped, args.out);

  CommandOutcome outcome;
  outcome.artifacts.push_back(args.out);
  outcome.summary.push_back("bank with " + std::to_string(swapped.size()) +
                            " categories, background " +
                            (swapped.background().has_value() ? "yes" : "no"));
  return outcome;
}

struct EvalArgs {
  std::string results;
  std::string dataset;
  std::string split;
  std::string taxonomy;
  std::string out;
  std::string plot_dir;
  double iou = 0.5;
  bool coco101 = false;
  bool strict = false;
  bool table = false;
};

CommandOutcome cmd_eval(const EvalArgs& args) {
  const std::vector<evalkit::Detection> dets = evalkit::load_detections(args.results);
  datakit::DatasetIndex index =
      datakit::load_annotations(std::filesystem::path(args.dataset) / "annotations.json");
  const taxonomy::SplitSpec split = taxonomy::load_split(args.split);

  taxonomy::TaxonomyRegistry registry;
  const taxonomy::TaxonomyRegistry* registry_ptr = nullptr;
  std::filesystem::path taxonomy_path = args.taxonomy;
  if (taxonomy_path.empty()) {
    const auto fallback = std::filesystem::path(args.dataset) / "taxonomy.json";
    if (std::filesystem::exists(fallback)) taxonomy_path = fallback;
  }
  if (!taxonomy_path.empty()) {
    registry = taxonomy::load_taxonomy(taxonomy_path);
    registry_ptr = &registry;
  }

  evalkit::EvalOptions options;
  options.iou_threshold = args.iou;
  options.coco101 = args.coco101;
  options.strict = args.strict;

  const evalkit::EvalResult result = evalkit::evaluate(dets, index, split, registry_ptr, options);

  CommandOutcome outcome;
  if (args.table) {
    std::stringstream table(evalkit::render_table(result));
    std::string line;
    while (std::getline(table, line)) outcome.summary.push_back(line);
  } else {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "mAP50 seen %.3f / unseen %.3f / all %.3f",
                  result.map50_seen, result.map50_unseen, result.map50_all);
    outcome.summary.push_back(buf);
  }
  if (!args.out.empty()) {
    evalkit::save_eval_result(result, args.out);
    outcome.artifacts.push_back(args.out);
  }
  if (!args.plot_dir.empty()) {
    std::filesystem::create_directories(args.plot_dir);
    for (const auto& [category, ap] : result.per_category_ap) {
      std::vector<evalkit::Detection> cat_dets;
      for (const auto& d : dets) {
        if (d.category == category) cat_dets.push_back(d);
      }
      std::vector<evalkit::GroundTruthBox> cat_gts;
      for (const auto& rec : index.images) {
        if (rec.dominant_category != category) continue;
        for (const auto& box : rec.boxes) cat_gts.push_back({rec.image_id, category, box});
      }
      const std::vector<bool> flags =
          evalkit::category_flags(cat_dets, cat_gts, options.iou_threshold);
      std::vector<double> scores;
      for (const auto& d : cat_dets) scores.push_back(d.score);
      std::string file = category;
      for (char& c : file) {
        if (c == ' ' || c == '/') c = '_';
      }
      const auto path = std::filesystem::path(args.plot_dir) / (file + "_pr.ppm");
      evalkit::render_pr_curve(flags, scores, static_cast<int>(cat_gts.size()), path);
      outcome.artifacts.push_back(path);
    }
  }
  return outcome;
}

struct AttrgenArgs {
  std::string names_file;
  std::string cache_dir;
  std::string mode = "replay";
  std::string instruction_template = attribgen::kDefaultTemplate;
  std::string model_id = "gpt-4";
  std::string fixture;
  std::string out;
  bool dedup = false;
};

CommandOutcome cmd_attrgen(const AttrgenArgs& args) {
  std::vector<std::string> names;
  {
    std::ifstream in(args.names_file);
    if (!in) throw std::runtime_error("cannot read names file: " + args.names_file);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
  }

  CommandOutcome outcome;
  if (args.dedup) {
    const attribgen::DedupResult dedup = attribgen::dedup_names(names);
    for (const auto& dropped : dedup.dropped) {
      outcome.summary.push_back("dropped duplicate: " + dropped);
    }
    names = dedup.kept;
  }

  attribgen::AttributeRequest request;
  request.category_names = names;
  request.instruction_template = args.instruction_template;
  request.model_id = args.model_id;
  request.cache_dir = args.cache_dir;
  if (args.mode == "live") {
    request.mode = attribgen::Mode::Live;
  } else if (args.mode == "replay") {
    request.mode = attribgen::Mode::Replay;
  } else {
    throw CLI::ValidationError("--mode", "expected live or replay");
  }

  if (!args.fixture.empty()) {
    const std::size_t n = attribgen::seed_cache_from_fixture(
        args.fixture, request.cache_dir, request.instruction_template, request.model_id);
    outcome.summary.push_back("seeded cache with " + std::to_string(n) + " fixture responses");
  }

  const std::vector<attribgen::AttributeResponse> responses =
      attribgen::generate_attributes(request);
  std::map<std::string, int> by_status;
  for (const auto& resp : responses) ++by_status[attribgen::parse_status_name(resp.status)];
  for (const auto& [status, count] : by_status) {
    outcome.summary.push_back(status + ": " + std::to_string(count));
  }

  const taxonomy::TaxonomyRegistry registry = attribgen::to_taxonomy(responses);
  taxonomy::save_taxonomy(registry, args.out);
  outcome.artifacts.push_back(args.out);
  outcome.summary.push_back(std::to_string(registry.defined_count()) + " defined / " +
                            std::to_string(registry.undefined_count()) + " undefined records");
  return outcome;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Open-vocabulary shape detection toolkit"};
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "emit a machine-readable outcome object");

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a compositional shapes dataset");
  synth_cmd->add_option("--out", synth.out, "output dataset directory")->required();
  synth_cmd->add_option("--colors", synth.colors, "palette names or name:R,G,B, comma separated");
  synth_cmd->add_option("--shapes", synth.shapes, "shape names, comma separated");
  synth_cmd->add_option("--images-per-category", synth.cfg.images_per_category,
                        "images generated per category (>= 10)");
  synth_cmd->add_option("--image-size", synth.cfg.image_size, "square image side in pixels");
  synth_cmd->add_option("--objects-min", synth.cfg.objects_min, "min annotated objects per image");
  synth_cmd->add_option("--objects-max", synth.cfg.objects_max, "max annotated objects per image");
  synth_cmd->add_option("--distractor-rate", synth.cfg.distractor_rate,
                        "chance of an unannotated off-category object");
  synth_cmd->add_option("--noise-std", synth.cfg.noise_std, "gaussian pixel noise sigma");
  synth_cmd->add_option("--seed", synth.cfg.seed, "generator seed");

  SplitArgs split;
  CLI::App* split_cmd = app.add_subcommand("split", "derive a seen/unseen category split");
  split_cmd->add_option("--taxonomy", split.taxonomy, "taxonomy record file")->required();
  split_cmd->add_option("--protocol", split.protocol,
                        "intra_class | inter_class | class_level | fully_supervised");
  split_cmd->add_option("--seen-classes", split.seen_classes,
                        "comma-separated Class names (intra_class/class_level)");
  split_cmd->add_option("--seed", split.seed, "split seed");
  split_cmd->add_option("--out", split.out, "output split file")->required();

  TrainArgs pretrain;
  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "contrastive pre-training phase");
  pretrain_cmd->add_option("--config", pretrain.config, "run config JSON")->required();
  pretrain_cmd->add_option("--dataset", pretrain.dataset, "override dataset directory");
  pretrain_cmd->add_option("--split", pretrain.split, "override split file");
  pretrain_cmd->add_option("--out", pretrain.out, "override output directory");
  pretrain_cmd->add_option("--checkpoint", pretrain.checkpoint, "resume checkpoint");
  pretrain_cmd->add_option("--max-steps", pretrain.max_steps, "override step budget");
  pretrain_cmd->add_option("--seed", pretrain.seed, "override run seed");

  TrainArgs finetune;
  CLI::App* finetune_cmd = app.add_subcommand("finetune", "detection fine-tuning phase");
  finetune_cmd->add_option("--config", finetune.config, "run config JSON")->required();
  finetune_cmd->add_option("--dataset", finetune.dataset, "override dataset directory");
  finetune_cmd->add_option("--split", finetune.split, "override split file");
  finetune_cmd->add_option("--out", finetune.out, "override output directory");
  finetune_cmd->add_option("--checkpoint", finetune.checkpoint, "initialize/resume checkpoint");
  finetune_cmd->add_option("--max-steps", finetune.max_steps, "override step budget");
  finetune_cmd->add_option("--seed", finetune.seed, "override run seed");

  BankArgs bank;
  CLI::App* bank_cmd = app.add_subcommand("bank", "re-target a prototype bank at a new vocabulary");
  bank_cmd->add_option("--bank-in", bank.bank_in, "existing bank (supplies encoder + background)")
      ->required();
  bank_cmd->add_option("--categories", bank.categories, "comma-separated category names");
  bank_cmd->add_option("--names", bank.names_file, "newline-separated category names");
  bank_cmd->add_option("--out", bank.out, "output bank file")->required();

  DetectArgs detect;
  CLI::App* detect_cmd = app.add_subcommand("detect", "run inference over a dataset");
  detect_cmd->add_option("--checkpoint", detect.checkpoint, "model checkpoint")->required();
  detect_cmd->add_option("--bank", detect.bank, "prototype bank file")->required();
  detect_cmd->add_option("--dataset", detect.dataset, "dataset directory")->required();
  detect_cmd->add_option("--out", detect.out, "detection results JSON")->required();

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score detection results");
  eval_cmd->add_option("--results", eval.results, "detection results JSON")->required();
  eval_cmd->add_option("--dataset", eval.dataset, "dataset directory with annotations.json")
      ->required();
  eval_cmd->add_option("--split", eval.split, "seen/unseen split file")->required();
  eval_cmd->add_option("--taxonomy", eval.taxonomy, "taxonomy file (class-level splits)");
  eval_cmd->add_option("--out", eval.out, "write the result object as JSON");
  eval_cmd->add_option("--plot", eval.plot_dir, "write per-category PR curves here");
  eval_cmd->add_option("--iou", eval.iou, "IoU match threshold");
  eval_cmd->add_flag("--coco101", eval.coco101, "101-point interpolated AP");
  eval_cmd->add_flag("--strict", eval.strict, "stray categories become an error");
  eval_cmd->add_flag("--table", eval.table, "render the seen/unseen table");

  AttrgenArgs attrgen_args;
  CLI::App* attrgen_cmd = app.add_subcommand("attrgen", "LLM attribute generation");
  attrgen_cmd->add_option("--names", attrgen_args.names_file, "newline-separated category names")
      ->required();
  attrgen_cmd->add_option("--cache", attrgen_args.cache_dir, "response cache directory")
      ->required();
  attrgen_cmd->add_option("--mode", attrgen_args.mode, "live | replay");
  attrgen_cmd->add_option("--template", attrgen_args.instruction_template,
                          "instruction template with a {name} slot");
  attrgen_cmd->add_option("--model", attrgen_args.model_id, "model identifier");
  attrgen_cmd->add_option("--fixture", attrgen_args.fixture,
                          "seed the cache from this fixture file first");
  attrgen_cmd->add_flag("--dedup", attrgen_args.dedup, "drop case-folded duplicate names");
  attrgen_cmd->add_option("--out", attrgen_args.out, "output taxonomy file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);  // --help lands here with exit code 0
  }

  try {
    CommandOutcome outcome;
    if (synth_cmd->parsed()) outcome = cmd_synth(synth);
    else if (split_cmd->parsed()) outcome = cmd_split(split);
    else if (pretrain_cmd->parsed())
      outcome = report_run(pipeline::run_pretrain(load_with_overrides(pretrain, pipeline::Phase::Pretrain)));
    else if (finetune_cmd->parsed())
      outcome = report_run(pipeline::run_finetune(load_with_overrides(finetune, pipeline::Phase::Finetune)));
    else if (bank_cmd->parsed()) outcome = cmd_bank(bank);
    else if (detect_cmd->parsed()) outcome = cmd_detect(detect);
    else if (eval_cmd->parsed()) outcome = cmd_eval(eval);
    else if (attrgen_cmd->parsed()) outcome = cmd_attrgen(attrgen_args);
    emit(outcome, as_json);
    return outcome.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ovdet::cli
