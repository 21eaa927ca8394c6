#include "refseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "refseg/rng.hpp"

namespace refseg {

namespace {

struct Layout {
  // weight segments and their (length, fan_in)
  std::vector<std::pair<std::string, std::pair<int, int>>> entries;
};

Layout make_layout(const ModelConfig& c) {
  Layout l;
  l.entries = {
      {"pm1_w", {c.hidden * 6, 6}},
      {"pm1_b", {c.hidden, 0}},
      {"pm2_w", {c.d * c.hidden, c.hidden}},
      {"pm2_b", {c.d, 0}},
      {"tok_emb", {c.vocab * c.d, c.d}},
      {"mask1_w", {c.hidden * 2 * c.d, 2 * c.d}},
      {"mask1_b", {c.hidden, 0}},
      {"mask2_w", {c.hidden, c.hidden}},
      {"mask2_b", {1, 0}},
      {"score_w", {c.d, c.d}},
      {"score_b", {1, 0}},
  };
  return l;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Everything the backward pass needs from a forward evaluation.
struct Cache {
  std::vector<double> h1;       // M * hidden, pre-tanh applied (stores tanh)
  std::vector<double> emb;      // M * d (tanh applied)
  std::vector<double> sp_feat;  // N_s * d
  std::vector<int> sp_count;    // N_s
  std::vector<double> attn;     // N_s * T
  std::vector<double> attn_feat;  // N_s * d
  std::vector<double> mask_h;   // N_s * hidden
  std::vector<double> logits;   // N_s
  std::vector<double> pooled;   // d, mean of attn_feat rows
  double score_pre = 0.0;
  double score = 0.0;
};

void forward_impl(const ParamVector& params, const ModelConfig& c,
                  const ModelInput& input, const std::vector<int>& tokens,
                  Cache& cc) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  for (int t : tokens)
    if (t < 0 || t >= c.vocab)
      throw std::invalid_argument("token id out of vocabulary range");
  const int M = input.n_points();
  const int Ns = input.n_superpoints;
  const int H = c.hidden, D = c.d, T = static_cast<int>(tokens.size());

  auto pm1_w = params.seg("pm1_w");
  auto pm1_b = params.seg("pm1_b");
  auto pm2_w = params.seg("pm2_w");
  auto pm2_b = params.seg("pm2_b");
  auto tok_emb = params.seg("tok_emb");
  auto mask1_w = params.seg("mask1_w");
  auto mask1_b = params.seg("mask1_b");
  auto mask2_w = params.seg("mask2_w");
  auto mask2_b = params.seg("mask2_b");
  auto score_w = params.seg("score_w");
  auto score_b = params.seg("score_b");

  cc.h1.assign(static_cast<size_t>(M) * H, 0.0);
  cc.emb.assign(static_cast<size_t>(M) * D, 0.0);
  cc.sp_feat.assign(static_cast<size_t>(Ns) * D, 0.0);
  cc.sp_count.assign(Ns, 0);

  for (int p = 0; p < M; ++p) {
    const double* x = input.points.data() + 6 * p;
    double* h = cc.h1.data() + static_cast<size_t>(p) * H;
    for (int i = 0; i < H; ++i) {
      double acc = pm1_b[i];
      const double* w = pm1_w.data() + 6 * i;
      for (int k = 0; k < 6; ++k) acc += w[k] * x[k];
      h[i] = std::tanh(acc);
    }
    double* e = cc.emb.data() + static_cast<size_t>(p) * D;
    for (int i = 0; i < D; ++i) {
      double acc = pm2_b[i];
      const double* w = pm2_w.data() + H * i;
      for (int k = 0; k < H; ++k) acc += w[k] * h[k];
      e[i] = std::tanh(acc);
    }
    int sp = input.superpoint_id[p];
    cc.sp_count[sp] += 1;
    double* s = cc.sp_feat.data() + static_cast<size_t>(sp) * D;
    for (int i = 0; i < D; ++i) s[i] += e[i];
  }
  for (int s = 0; s < Ns; ++s) {
    if (cc.sp_count[s] == 0)
      throw std::invalid_argument("empty superpoint in model input");
    double inv = 1.0 / cc.sp_count[s];
    for (int i = 0; i < D; ++i) cc.sp_feat[static_cast<size_t>(s) * D + i] *= inv;
  }

  // single-head scaled dot-product attention over tokens
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  cc.attn.assign(static_cast<size_t>(Ns) * T, 0.0);
  cc.attn_feat.assign(static_cast<size_t>(Ns) * D, 0.0);
  for (int s = 0; s < Ns; ++s) {
    const double* q = cc.sp_feat.data() + static_cast<size_t>(s) * D;
    double* a = cc.attn.data() + static_cast<size_t>(s) * T;
    double zmax = -1e300;
    for (int j = 0; j < T; ++j) {
      const double* e = tok_emb.data() + static_cast<size_t>(tokens[j]) * D;
      double z = 0;
      for (int i = 0; i < D; ++i) z += q[i] * e[i];
      a[j] = z * inv_sqrt_d;
      zmax = std::max(zmax, a[j]);
    }
    double denom = 0;
    for (int j = 0; j < T; ++j) {
      a[j] = std::exp(a[j] - zmax);
      denom += a[j];
    }
    double* f = cc.attn_feat.data() + static_cast<size_t>(s) * D;
    for (int j = 0; j < T; ++j) {
      a[j] /= denom;
      const double* e = tok_emb.data() + static_cast<size_t>(tokens[j]) * D;
      for (int i = 0; i < D; ++i) f[i] += a[j] * e[i];
    }
  }

  // mask head on [superpoint feature ; attention feature]
  cc.mask_h.assign(static_cast<size_t>(Ns) * H, 0.0);
  cc.logits.assign(Ns, 0.0);
  for (int s = 0; s < Ns; ++s) {
    const double* sf = cc.sp_feat.data() + static_cast<size_t>(s) * D;
    const double* ff = cc.attn_feat.data() + static_cast<size_t>(s) * D;
    double* h = cc.mask_h.data() + static_cast<size_t>(s) * H;
    for (int i = 0; i < H; ++i) {
      const double* w = mask1_w.data() + static_cast<size_t>(i) * 2 * D;
      double acc = mask1_b[i];
      for (int k = 0; k < D; ++k) acc += w[k] * sf[k] + w[D + k] * ff[k];
      h[i] = std::tanh(acc);
    }
    double logit = mask2_b[0];
    for (int i = 0; i < H; ++i) logit += mask2_w[i] * h[i];
    cc.logits[s] = logit;
  }

  cc.pooled.assign(D, 0.0);
  for (int s = 0; s < Ns; ++s)
    for (int i = 0; i < D; ++i)
      cc.pooled[i] += cc.attn_feat[static_cast<size_t>(s) * D + i];
  for (int i = 0; i < D; ++i) cc.pooled[i] /= Ns;
  cc.score_pre = score_b[0];
  for (int i = 0; i < D; ++i) cc.score_pre += score_w[i] * cc.pooled[i];
  cc.score = sigmoid(cc.score_pre);
}

}  // namespace

std::span<double> ParamVector::seg(const std::string& name) {
  const Segment& s = find_segment(name);
  return {values.data() + s.offset, static_cast<size_t>(s.length)};
}

std::span<const double> ParamVector::seg(const std::string& name) const {
  const Segment& s = find_segment(name);
  return {values.data() + s.offset, static_cast<size_t>(s.length)};
}

const Segment& ParamVector::find_segment(const std::string& name) const {
  for (const Segment& s : segments)
    if (s.name == name) return s;
  throw std::out_of_range("no such parameter segment: " + name);
}

const std::string& ParamVector::segment_of(int i) const {
  for (const Segment& s : segments)
    if (i >= s.offset && i < s.offset + s.length) return s.name;
  throw std::out_of_range("flat index outside parameter vector");
}

ParamVector ParamVector::zeros_like(const ParamVector& other) {
  ParamVector g;
  g.segments = other.segments;
  g.values.assign(other.values.size(), 0.0);
  return g;
}

ModelInput scene_input(const Scene& scene) {
  ModelInput in;
  in.points = scene.points;
  in.superpoint_id = scene.superpoint_id;
  in.n_superpoints = scene.n_superpoints;
  return in;
}

ParamVector init_params(const ModelConfig& config) {
  if (config.d < 1 || config.hidden < 1 || config.vocab < 1)
    throw std::invalid_argument("model dimensions must be >= 1");
  Layout layout = make_layout(config);
  ParamVector p;
  int offset = 0;
  for (const auto& [name, dims] : layout.entries) {
    p.segments.push_back({name, offset, dims.first});
    offset += dims.first;
  }
  p.values.assign(offset, 0.0);
  Rng rng(derive_seed(config.seed, 7));
  for (const auto& [name, dims] : layout.entries) {
    auto span = p.seg(name);
    int fan_in = dims.second;
    if (fan_in == 0) continue;  // biases stay zero
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : span) v = rng.uniform(-bound, bound);
  }
  return p;
}

Prediction forward(const ParamVector& params, const ModelConfig& config,
                   const ModelInput& input, const std::vector<int>& tokens) {
  if (params.size() == 0 ||
      params.segments.back().offset + params.segments.back().length !=
          params.size())
    throw std::invalid_argument("parameter layout does not match values");
  Cache cc;
  forward_impl(params, config, input, tokens, cc);
  Prediction pred;
  pred.superpoint_logits = cc.logits;
  pred.attn_features = cc.attn_feat;
  pred.score = cc.score;
  const int M = input.n_points();
  pred.point_probs.resize(M);
  pred.hard_mask.resize(M);
  for (int p = 0; p < M; ++p) {
    double prob = sigmoid(cc.logits[input.superpoint_id[p]]);
    pred.point_probs[p] = prob;
    pred.hard_mask[p] = prob > 0.5 ? 1 : 0;
  }
  return pred;
}

ParamVector backward(const ParamVector& params, const ModelConfig& c,
                     const ModelInput& input, const std::vector<int>& tokens,
                     const OutputGrad& upstream) {
  Cache cc;
  forward_impl(params, c, input, tokens, cc);
  const int M = input.n_points();
  const int Ns = input.n_superpoints;
  const int H = c.hidden, D = c.d, T = static_cast<int>(tokens.size());

  if (!upstream.d_superpoint_logits.empty() &&
      static_cast<int>(upstream.d_superpoint_logits.size()) != Ns)
    throw std::invalid_argument("upstream logit gradient shape mismatch");
  if (!upstream.d_attn_features.empty() &&
      static_cast<int>(upstream.d_attn_features.size()) != Ns * D)
    throw std::invalid_argument("upstream attention gradient shape mismatch");

  ParamVector grad = ParamVector::zeros_like(params);
  auto g_pm1_w = grad.seg("pm1_w");
  auto g_pm1_b = grad.seg("pm1_b");
  auto g_pm2_w = grad.seg("pm2_w");
  auto g_pm2_b = grad.seg("pm2_b");
  auto g_tok = grad.seg("tok_emb");
  auto g_mask1_w = grad.seg("mask1_w");
  auto g_mask1_b = grad.seg("mask1_b");
  auto g_mask2_w = grad.seg("mask2_w");
  auto g_mask2_b = grad.seg("mask2_b");
  auto g_score_w = grad.seg("score_w");
  auto g_score_b = grad.seg("score_b");

  auto pm2_w = params.seg("pm2_w");
  auto tok_emb = params.seg("tok_emb");
  auto mask1_w = params.seg("mask1_w");
  auto mask2_w = params.seg("mask2_w");
  auto score_w = params.seg("score_w");

  std::vector<double> d_attn_feat(static_cast<size_t>(Ns) * D, 0.0);
  std::vector<double> d_sp_feat(static_cast<size_t>(Ns) * D, 0.0);

  // score head
  if (upstream.d_score != 0.0) {
    double dpre = upstream.d_score * cc.score * (1.0 - cc.score);
    g_score_b[0] += dpre;
    for (int i = 0; i < D; ++i) {
      g_score_w[i] += dpre * cc.pooled[i];
      double dpool = dpre * score_w[i] / Ns;
      for (int s = 0; s < Ns; ++s)
        d_attn_feat[static_cast<size_t>(s) * D + i] += dpool;
    }
  }
  if (!upstream.d_attn_features.empty())
    for (size_t i = 0; i < d_attn_feat.size(); ++i)
      d_attn_feat[i] += upstream.d_attn_features[i];

  // mask head
  if (!upstream.d_superpoint_logits.empty()) {
    for (int s = 0; s < Ns; ++s) {
      double dl = upstream.d_superpoint_logits[s];
      if (dl == 0.0) continue;
      const double* h = cc.mask_h.data() + static_cast<size_t>(s) * H;
      const double* sf = cc.sp_feat.data() + static_cast<size_t>(s) * D;
      const double* ff = cc.attn_feat.data() + static_cast<size_t>(s) * D;
      g_mask2_b[0] += dl;
      for (int i = 0; i < H; ++i) {
        g_mask2_w[i] += dl * h[i];
        double dh = dl * mask2_w[i] * (1.0 - h[i] * h[i]);
        g_mask1_b[i] += dh;
        double* gw = g_mask1_w.data() + static_cast<size_t>(i) * 2 * D;
        const double* w = mask1_w.data() + static_cast<size_t>(i) * 2 * D;
        for (int k = 0; k < D; ++k) {
          gw[k] += dh * sf[k];
          gw[D + k] += dh * ff[k];
          d_sp_feat[static_cast<size_t>(s) * D + k] += dh * w[k];
          d_attn_feat[static_cast<size_t>(s) * D + k] += dh * w[D + k];
        }
      }
    }
  }

  // attention
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  std::vector<double> da(T), dz(T);
  for (int s = 0; s < Ns; ++s) {
    const double* dF = d_attn_feat.data() + static_cast<size_t>(s) * D;
    bool all_zero = true;
    for (int i = 0; i < D; ++i)
      if (dF[i] != 0.0) {
        all_zero = false;
        break;
      }
    const double* a = cc.attn.data() + static_cast<size_t>(s) * T;
    const double* q = cc.sp_feat.data() + static_cast<size_t>(s) * D;
    if (all_zero) continue;
    double dot_sum = 0.0;
    for (int j = 0; j < T; ++j) {
      const double* e = tok_emb.data() + static_cast<size_t>(tokens[j]) * D;
      double dd = 0;
      for (int i = 0; i < D; ++i) {
        dd += dF[i] * e[i];
        // value pathway into token embeddings
        g_tok[static_cast<size_t>(tokens[j]) * D + i] += a[j] * dF[i];
      }
      da[j] = dd;
      dot_sum += a[j] * dd;
    }
    for (int j = 0; j < T; ++j) dz[j] = a[j] * (da[j] - dot_sum) * inv_sqrt_d;
    double* dq = d_sp_feat.data() + static_cast<size_t>(s) * D;
    for (int j = 0; j < T; ++j) {
      const double* e = tok_emb.data() + static_cast<size_t>(tokens[j]) * D;
      for (int i = 0; i < D; ++i) {
        dq[i] += dz[j] * e[i];
        g_tok[static_cast<size_t>(tokens[j]) * D + i] += dz[j] * q[i];
      }
    }
  }

  // mean-pool back through the point MLP
  std::vector<double> dh1(H);
  for (int p = 0; p < M; ++p) {
    int sp = input.superpoint_id[p];
    const double* dS = d_sp_feat.data() + static_cast<size_t>(sp) * D;
    bool all_zero = true;
    for (int i = 0; i < D; ++i)
      if (dS[i] != 0.0) {
        all_zero = false;
        break;
      }
    if (all_zero) continue;
    double inv = 1.0 / cc.sp_count[sp];
    const double* e = cc.emb.data() + static_cast<size_t>(p) * D;
    const double* h = cc.h1.data() + static_cast<size_t>(p) * H;
    const double* x = input.points.data() + 6 * p;
    std::fill(dh1.begin(), dh1.end(), 0.0);
    for (int i = 0; i < D; ++i) {
      double de = dS[i] * inv * (1.0 - e[i] * e[i]);
      g_pm2_b[i] += de;
      double* gw = g_pm2_w.data() + static_cast<size_t>(i) * H;
      const double* w = pm2_w.data() + static_cast<size_t>(i) * H;
      for (int k = 0; k < H; ++k) {
        gw[k] += de * h[k];
        dh1[k] += de * w[k];
      }
    }
    for (int i = 0; i < H; ++i) {
      double dh = dh1[i] * (1.0 - h[i] * h[i]);
      g_pm1_b[i] += dh;
      double* gw = g_pm1_w.data() + 6 * i;
      for (int k = 0; k < 6; ++k) gw[k] += dh * x[k];
    }
  }
  return grad;
}

AdamWState make_adamw_state(const ParamVector& params) {
  AdamWState st;
  st.m.assign(params.values.size(), 0.0);
  st.v.assign(params.values.size(), 0.0);
  st.step = 0;
  return st;
}

void adamw_step(ParamVector& params, const ParamVector& grad, AdamWState& state,
                const AdamWConfig& opt) {
  if (grad.values.size() != params.values.size() ||
      state.m.size() != params.values.size())
    throw std::invalid_argument("adamw shape mismatch");
  for (size_t i = 0; i < grad.values.size(); ++i)
    if (!std::isfinite(grad.values[i]))
      throw std::runtime_error("non-finite gradient in segment " +
                               params.segment_of(static_cast<int>(i)));
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.values.size(); ++i) {
    double g = grad.values[i];
    state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
    state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
    double m_hat = state.m[i] / bc1;
    double v_hat = state.v[i] / bc2;
    params.values[i] -= opt.lr * (m_hat / (std::sqrt(v_hat) + opt.eps) +
                                  opt.weight_decay * params.values[i]);
  }
}

void save_checkpoint(const ParamVector& params, const ModelConfig& config,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write("RSCK", 4);
  std::int64_t header[4] = {config.d, config.hidden, config.vocab,
                            static_cast<std::int64_t>(config.seed)};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::int64_t n_seg = static_cast<std::int64_t>(params.segments.size());
  out.write(reinterpret_cast<const char*>(&n_seg), sizeof(n_seg));
  for (const Segment& s : params.segments) {
    std::int64_t len = static_cast<std::int64_t>(s.name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(s.name.data(), len);
    std::int64_t dims[2] = {s.offset, s.length};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  }
  std::int64_t n = params.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

ParamVector load_checkpoint(const std::string& path, ModelConfig* config_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "RSCK", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::int64_t header[4];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (config_out) {
    config_out->d = static_cast<int>(header[0]);
    config_out->hidden = static_cast<int>(header[1]);
    config_out->vocab = static_cast<int>(header[2]);
    config_out->seed = static_cast<std::uint64_t>(header[3]);
  }
  std::int64_t n_seg;
  in.read(reinterpret_cast<char*>(&n_seg), sizeof(n_seg));
  ParamVector p;
  for (std::int64_t i = 0; i < n_seg; ++i) {
    std::int64_t len;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(static_cast<size_t>(len), '\0');
    in.read(name.data(), len);
    std::int64_t dims[2];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    p.segments.push_back(
        {name, static_cast<int>(dims[0]), static_cast<int>(dims[1])});
  }
  std::int64_t n;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  p.values.resize(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(p.values.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return p;
}

}  // namespace refseg
