#pragma once

// Run configuration: dataset, model, training, and policy settings, parsed
// from a flat "key = value" text file. Unknown keys are errors; every field
// has a desk-scale default so an empty file is a valid config.

#include <cstdint>
#include <string>
#include <vector>

namespace hattn {

enum class DataSource { kSynthetic, kIdx, kCifarBinary, kImageDir };

struct DatasetSpec {
  DataSource source = DataSource::kSynthetic;
  std::string path;  // root for raw sources
  int image_size = 32;
  int channels = 3;
  int num_classes = 10;
  int train_size = 10000;
  int val_size = 1000;
  int test_size = 1000;
  std::uint64_t seed = 7;  // synthetic generation
  // Candidate glyph cells (row-major glimpse-grid indices) for the synthetic
  // generator; the class-bearing glyph lands on one of these.
  std::vector<int> glyph_cells = {8, 12, 24, 36, 40};
  int clutter_blobs = 4;
};

struct ModelConfig {
  int image_size = 32;
  int channels = 3;
  int num_classes = 10;
  int glimpse_size = 8;
  int stride = 4;
  int feature_dim = 24;
  int hidden_dim = 48;
  int latent_dim = 12;
  int fg_blocks = 3;     // conv blocks in the glimpse encoder
  int fg_channels = 12;  // width of those blocks
  int dec_channels = 16;
  int flow_groups = 2;  // n_s: stack has 3*n_s bijectors
  int spline_bins = 8;
  double tail_bound = 3.0;
  double dropout_p = 0.5;
  bool flows_posterior = true;  // false: plain diagonal-Gaussian posterior
};

struct TrainConfig {
  int epochs1 = 12;
  int epochs2 = 10;
  int epochs3 = 8;
  int batch_size = 64;
  double alpha = 0.0;  // 0 = auto: 1/latent_dim
  double beta = 16.0;
  double lr1 = 1e-3;
  double lr2 = 1e-3;
  double lr3 = 1e-3;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  double plateau_tol = 1e-4;
  int early_stop_patience = 10;
  bool aug_crop = false;
  bool aug_scale = false;
  bool aug_flip = false;
  bool aug_jitter = true;
  std::uint64_t seed = 1;
  int time_steps = 7;
  bool recompute_targets_live = true;  // phase 3 target feature maps
};

struct PolicyConfig {
  int sample_budget_train = 1;
  int sample_budget_eval = 20;
  int time_steps = 7;
  double kl_epsilon = 1e-12;
};

struct EvalConfig {
  int num_seeds = 5;
  int export_images = 8;  // episodes whose maps/overlays get exported
};

struct RunConfig {
  DatasetSpec data;
  ModelConfig model;
  TrainConfig train;
  PolicyConfig policy;
  EvalConfig eval;
};

// Parse "key = value" lines ('#' starts a comment). Throws std::runtime_error
// on unknown keys, malformed lines, or invalid values.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);

// Deterministic full snapshot, parseable by parse_config_text.
std::string config_to_text(const RunConfig& cfg);

// Named presets mirroring the published per-dataset settings (dimensions,
// glimpse geometry, loss weights, learning rates).
void apply_preset(const std::string& name, RunConfig& cfg);

// Validation shared by parser and programmatic construction.
void validate_config(const RunConfig& cfg);

// Effective PVAE weight: explicit alpha or 1/latent_dim.
double effective_alpha(const RunConfig& cfg);

// Run-directory root: $HATTN_RUN_ROOT or "runs".
std::string run_root();

}  // namespace hattn
