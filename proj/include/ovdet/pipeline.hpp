#pragma once

// Training orchestration: the two-phase recipe (contrastive pre-training,
// then detection fine-tuning against a frozen prototype bank), plus the
// scratch ablation. Owns run configs, the LR schedule, seeding, checkpoint
// cadence, and the JSON-lines metrics log.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ovdet/align.hpp"
#include "ovdet/datakit.hpp"
#include "ovdet/detector.hpp"
#include "ovdet/evalkit.hpp"
#include "ovdet/textspace.hpp"

namespace ovdet::pipeline {

enum class Phase { Pretrain, Finetune, Scratch };

std::string phase_name(Phase p);
Phase phase_from_name(const std::string& name);

/// One stage of a piecewise-constant schedule: `lr` applies while
/// step < until_step. Steps at or past the last threshold keep the last lr.
struct LrStage {
  long until_step = 0;
  double lr = 0.0;
};

double lr_at(const std::vector<LrStage>& schedule, long step);

/// Fixed fractional milestones (60% / 90% of the budget), dividing the rate
/// by 10 at each drop.
std::vector<LrStage> default_schedule(long max_steps, double base_lr);

struct RunConfig {
  Phase phase = Phase::Pretrain;
  std::filesystem::path dataset_dir;  // holds annotations.json and images/
  std::filesystem::path taxonomy_path;  // defaults to dataset_dir/taxonomy.json
  std::filesystem::path split_path;     // optional for pretrain, required for finetune
  std::filesystem::path output_dir;
  textspace::EncoderSpec encoder;
  detector::DetectorConfig detector;
  align::AlignConfig align;
  std::vector<LrStage> lr_schedule;  // empty -> default_schedule(max_steps, base_lr)
  double base_lr = 0.01;
  long max_steps = 0;
  int batch_size = 8;
  double momentum = 0.9;
  int extra_negatives = 8;     // additional candidate rows per pre-training batch
  double train_fraction = 0.8;
  std::uint64_t split_seed = 1;  // train/val image split
  std::uint64_t seed = 0;        // model init + batch sampling
  std::filesystem::path checkpoint_in;
  long checkpoint_every = 0;  // 0 -> final checkpoint only
  bool from_scratch_ablation = false;

  void validate() const;
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

struct RunResult {
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
  std::filesystem::path bank_path;  // fine-tuning only
  long steps_run = 0;
  double final_loss = 0.0;
  bool aborted_non_finite = false;
};

/// Contrastive pre-training over ground-truth regions and whole-image
/// captions; the text side stays frozen. Deterministic under (config, seed).
RunResult run_pretrain(const RunConfig& cfg);

/// Detection fine-tuning with the classifier replaced by the seen-category
/// prototype bank (frozen) plus a learnable background row. Also serves the
/// scratch ablation (random init) when the phase/flag say so.
RunResult run_finetune(const RunConfig& cfg);

/// Runs inference over every image in the index and collects detections in
/// the evaluation format.
std::vector<evalkit::Detection> detect_dataset(const detector::DetectorModel& model,
                                               const textspace::PrototypeBank& bank,
                                               const datakit::DatasetIndex& index);

}  // namespace ovdet::pipeline
