#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cowlab/cae.hpp"
#include "cowlab/classify.hpp"
#include "cowlab/dimred.hpp"
#include "cowlab/eval.hpp"
#include "cowlab/geomfeat.hpp"
#include "cowlab/phantom.hpp"

namespace cowlab {

inline constexpr int kConfigVersion = 1;

enum class PipelineToggle { geometric, cae, both };

std::string to_string(PipelineToggle p);

struct DrSelection {
  DrMethod method = DrMethod::none;
  int n_components = 0;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 91;
  std::filesystem::path output_dir = "cowlab_out";
  int jobs = 1;

  int phantom_count = 91;
  Variability variability{0.2, 0.4, 0.5, 5.0};
  double noise_sigma = 0.05;
  double vessel_intensity = 0.8;
  double background_intensity = 0.1;

  double threshold = 0.5;
  double match_tolerance_mm = 1.5;
  double truncate_mm = kBranchTruncationMm;

  PipelineToggle pipelines = PipelineToggle::both;
  std::vector<DrSelection> dr{{DrMethod::lda, 8}, {DrMethod::pca, 10}, {DrMethod::isomap, 6}};
  std::vector<Algorithm> classifiers{kAllAlgorithms.begin(), kAllAlgorithms.end()};
  ClassifierConfig classifier;
  int folds = 10;

  CaeArchitecture cae_arch;
  int cae_epochs = 10;
  int cae_batch = 8;
  double cae_learning_rate = 1e-3;
  int cae_training_patches = 512;

  bool geometric_enabled() const { return pipelines != PipelineToggle::cae; }
  bool cae_enabled() const { return pipelines != PipelineToggle::geometric; }

  /// Throws ConfigError naming the first offending key.
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys and a missing or foreign `version` are ConfigErrors.
  static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Sets `path` (dots separate object keys, numbers index arrays) to `value`,
/// parsed as JSON when possible and kept as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& path, const std::string& value);

/// Defaults, then the file (if any), then overrides, then COWLAB_SEED.
ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

/// SHA-256 of the canonical (sorted-key) config dump.
std::string config_hash(const ExperimentConfig& cfg);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& p);

// Seed streams derived from the master seed.
std::uint64_t phantom_seed(const ExperimentConfig& cfg, int index);
std::uint64_t balance_seed(const ExperimentConfig& cfg);
std::uint64_t fold_seed(const ExperimentConfig& cfg);
std::uint64_t pipeline_seed(const ExperimentConfig& cfg);
std::uint64_t cae_seed(const ExperimentConfig& cfg);
std::uint64_t cae_subset_seed(const ExperimentConfig& cfg);

std::string phantom_id(int index);
PhantomSpec phantom_spec(const ExperimentConfig& cfg, int index);

struct BifurcationRecord {
  std::string volume_id;
  int index = 0;  // within its volume
  ClassTag label = ClassTag::BN;
  Vec3 center = Vec3::Zero();
  Index3 center_voxel{0, 0, 0};
  double match_distance_mm = -1.0;
  double nearest_boi_mm = -1.0;  // to the closest ground-truth BoI center
  std::array<double, kNumGeomFeatures> features{};
  bool balanced = false;
};

struct PhantomExtraction {
  std::vector<BifurcationRecord> rows;
  int ground_truth_bois = 0;
  int matched_bois = 0;
  int skipped_degenerate = 0;
};

/// segment -> skeletonize -> graph -> bifurcations -> ground-truth matching
/// -> features. Bifurcations whose branches have no usable geometry are
/// counted and left out.
PhantomExtraction extract_phantom(const std::string& volume_id, const Volume3D& volume, const GroundTruth& gt,
                                  const ExperimentConfig& cfg);

struct Corpus {
  std::vector<BifurcationRecord> rows;
  int ground_truth_bois = 0;
  int matched_bois = 0;
  int skipped_degenerate = 0;
};

/// Generates and extracts every phantom in memory; `jobs` threads.
Corpus build_corpus(const ExperimentConfig& cfg, int jobs,
                    const std::function<void(int, const PhantomExtraction&)>& on_phantom = {});

/// Flags the balanced subset (all BoIs plus as many seeded BNs).
void mark_balanced(Corpus& corpus, std::uint64_t seed);

LabeledDataset balanced_geometric_dataset(const std::vector<BifurcationRecord>& rows);

/// Patches of the balanced rows, in row order, cut from normalized volumes.
std::vector<Patch3D> balanced_patches(const std::vector<BifurcationRecord>& rows,
                                      const std::function<Volume3D(const std::string&)>& load_volume,
                                      int side = kPatchSide);

/// One report per DR selection and classifier, DR-major.
std::vector<CvReport> run_geometric(const ExperimentConfig& cfg, const LabeledDataset& data, const FoldPlan& plan,
                                    int jobs);
/// One report per classifier on latent codes, no further reduction.
std::vector<CvReport> run_latent(const ExperimentConfig& cfg, const LabeledDataset& latents, const FoldPlan& plan,
                                 int jobs);

/// Seeded subset of `cfg.cae_training_patches` patches (all when fewer).
std::vector<Patch3D> cae_training_subset(const ExperimentConfig& cfg, const std::vector<Patch3D>& patches);
CaeTrainConfig cae_train_config(const ExperimentConfig& cfg);

// ---- On-disk artifacts -------------------------------------------------------

std::string features_csv(const std::vector<BifurcationRecord>& rows);
std::vector<BifurcationRecord> read_features_csv(const std::filesystem::path& p);

/// Magic line, u32 header length, JSON header, LE float32 voxels.
void write_patch_store(const std::vector<Patch3D>& patches, const std::filesystem::path& p);
std::vector<Patch3D> read_patch_store(const std::filesystem::path& p);

struct StageResult {
  std::vector<std::filesystem::path> artifacts;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json summary = nlohmann::json::object();
};

/// manifest.json in the output directory: per stage, the config hash it ran
/// under, its seeds and the SHA-256 of every artifact it wrote.
class Manifest {
 public:
  explicit Manifest(std::filesystem::path output_dir);

  bool has_stage(const std::string& stage) const;
  /// Every artifact of `stage` exists and matches its checksum.
  void verify_inputs(const std::string& stage) const;
  /// Records the stage. When the stage was already recorded under the same
  /// config hash, differing checksums raise a DataError instead.
  void record(const std::string& stage, const ExperimentConfig& cfg, const StageResult& result);
  const nlohmann::json& doc() const { return doc_; }

 private:
  void save() const;
  std::filesystem::path dir_;
  nlohmann::json doc_;
};

using Logger = std::function<void(const std::string&)>;

// Stage commands. Each validates the config and its inputs before writing.
StageResult cmd_phantom(const ExperimentConfig& cfg, const Logger& log);
StageResult cmd_extract(const ExperimentConfig& cfg, const Logger& log);
StageResult cmd_train_cae(const ExperimentConfig& cfg, const Logger& log);
StageResult cmd_run(const ExperimentConfig& cfg, const Logger& log);
StageResult cmd_report(const ExperimentConfig& cfg, const Logger& log);

}  // namespace cowlab
