#ifndef REFSEG_SCENE_HPP_
#define REFSEG_SCENE_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace refseg {

// One synthetic point-cloud scene. Points are stored as a flat N x 6 array
// (x, y, z, r, g, b); rgb in [0, 1]. Superpoints are built within instances,
// so every superpoint's points share one instance_id.
struct Scene {
  std::vector<double> points;  // N * 6, row-major
  std::vector<int> instance_id;
  std::vector<int> category_id;     // per point
  std::vector<int> superpoint_id;   // per point, in [0, n_superpoints)
  int scene_id = 0;
  int n_superpoints = 0;

  int n_points() const { return static_cast<int>(instance_id.size()); }
  const double* point(int p) const { return points.data() + 6 * p; }
  double* point(int p) { return points.data() + 6 * p; }
  int n_instances() const;
  // category of instance i (constant across its points)
  int instance_category(int inst) const;
  std::vector<int> category_counts(int n_categories) const;
};

struct ReferringSample {
  int scene_id = 0;
  std::vector<int> tokens;
  std::optional<std::vector<std::uint8_t>> gt_mask;  // length N; absent when withheld
  int referent_instance = 0;  // generation-time truth, evaluation only
  bool is_unique = false;
  bool pseudo_origin = false;  // label came from a promotion, not generation
};

struct SceneGenConfig {
  int min_instances = 4;
  int max_instances = 8;
  int min_points_per_instance = 40;
  int max_points_per_instance = 120;
  int n_categories = 8;
  int grid_cells = 4;          // occupancy-grid resolution per axis
  double extent = 10.0;        // scene side length in scene units
  double color_noise = 0.06;   // additive per-point rgb noise amplitude
  double center_jitter = 0.0;  // extra center noise (difficulty knob)
  double unique_fraction = 0.2;
};

struct SplitSpec {
  double labeled_ratio = 0.1;
  std::uint64_t seed = 0;
  int n_scenes = 60;
  int samples_per_scene = 6;
};

struct Split {
  std::vector<int> labeled_ids;
  std::vector<int> unlabeled_ids;
};

// Token vocabulary shared by all expressions of a dataset.
struct Vocabulary {
  std::vector<std::string> words;
  int size() const { return static_cast<int>(words.size()); }
};

struct Dataset {
  SceneGenConfig config;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  std::vector<Scene> scenes;
  std::vector<ReferringSample> samples;  // evaluation store: gt always present
};

// Default vocabulary layout: category words, color words, size words,
// spatial words and filler, padded to `vocab_size`.
Vocabulary make_vocabulary(int n_categories, int vocab_size = 64);

// Category attribute tables (palette color and base cluster extent).
void category_color(int cat, double rgb[3]);
double category_sigma(int cat);

Scene generate_scene(std::uint64_t seed, const SceneGenConfig& config,
                     int scene_id = 0);

std::vector<int> generate_expression(const Scene& scene, int referent,
                                     std::uint64_t seed,
                                     const SceneGenConfig& config);

// Full benchmark: scenes plus referring samples with ~unique_fraction of
// referents drawn from unique-category instances.
Dataset generate_dataset(std::uint64_t seed, const SceneGenConfig& config,
                         int n_scenes, int samples_per_scene);

// Deterministic labeled/unlabeled partition. |labeled| = round(ratio * n),
// at least 1. Throws on ratio outside (0, 1].
Split make_splits(const Dataset& dataset, const SplitSpec& spec);

// Trainer-facing view of one sample: gt withheld for unlabeled ids.
std::vector<ReferringSample> trainer_view(const Dataset& dataset,
                                          const Split& split);

// gt mask of a sample recomputed from instance membership.
std::vector<std::uint8_t> instance_mask(const Scene& scene, int instance);

// Line-oriented text serialization; round-trip lossless.
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

std::string encode_mask_rle(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> decode_mask_rle(const std::string& rle, int n);

}  // namespace refseg

#endif  // REFSEG_SCENE_HPP_
