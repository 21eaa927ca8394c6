#ifndef REFSEG_MODEL_HPP_
#define REFSEG_MODEL_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refseg/scene.hpp"

namespace refseg {

struct ModelConfig {
  int d = 16;       // embedding width
  int hidden = 32;  // MLP width
  int vocab = 64;
  std::uint64_t seed = 0;
};

struct Segment {
  std::string name;
  int offset = 0;
  int length = 0;
};

// Flat parameter array with a named segment table; the unit of EMA,
// checkpointing and gradient updates.
struct ParamVector {
  std::vector<double> values;
  std::vector<Segment> segments;

  int size() const { return static_cast<int>(values.size()); }
  std::span<double> seg(const std::string& name);
  std::span<const double> seg(const std::string& name) const;
  const Segment& find_segment(const std::string& name) const;
  // segment containing flat index i
  const std::string& segment_of(int i) const;
  static ParamVector zeros_like(const ParamVector& other);
};

// Model input: points with a compact superpoint partition. Built from a
// Scene directly or from an augmented view of one.
struct ModelInput {
  std::vector<double> points;       // M * 6
  std::vector<int> superpoint_id;   // per point, compact in [0, n_superpoints)
  int n_superpoints = 0;
  int n_points() const { return static_cast<int>(superpoint_id.size()); }
};

ModelInput scene_input(const Scene& scene);

struct Prediction {
  std::vector<double> superpoint_logits;  // N_s
  std::vector<double> point_probs;        // M
  std::vector<std::uint8_t> hard_mask;    // M
  std::vector<double> attn_features;      // N_s * d, row-major
  double score = 0.0;
};

// Gradient of some scalar loss with respect to the model outputs.
struct OutputGrad {
  std::vector<double> d_superpoint_logits;  // N_s (may be empty = zero)
  std::vector<double> d_attn_features;      // N_s * d (may be empty = zero)
  double d_score = 0.0;
};

ParamVector init_params(const ModelConfig& config);

Prediction forward(const ParamVector& params, const ModelConfig& config,
                   const ModelInput& input, const std::vector<int>& tokens);

// Exact reverse-mode gradient of the forward map contracted with
// `upstream`; linear in upstream.
ParamVector backward(const ParamVector& params, const ModelConfig& config,
                     const ModelInput& input, const std::vector<int>& tokens,
                     const OutputGrad& upstream);

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamWState make_adamw_state(const ParamVector& params);

// Decoupled weight decay update; throws on non-finite gradient entries,
// naming the offending segment.
void adamw_step(ParamVector& params, const ParamVector& grad, AdamWState& state,
                const AdamWConfig& opt);

void save_checkpoint(const ParamVector& params, const ModelConfig& config,
                     const std::string& path);
ParamVector load_checkpoint(const std::string& path, ModelConfig* config_out);

}  // namespace refseg

#endif  // REFSEG_MODEL_HPP_
