#include "refseg/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "refseg/rng.hpp"

namespace refseg {

namespace {

constexpr std::uint64_t kTagScene = 101;
constexpr std::uint64_t kTagSamples = 102;
constexpr std::uint64_t kTagExpr = 103;
constexpr std::uint64_t kTagSplit = 104;

const char* kCategoryNames[8] = {"chair", "table", "lamp",  "sofa",
                                 "shelf", "desk",  "bed",   "plant"};
const char* kColorNames[8] = {"red",    "green",  "blue",   "yellow",
                              "purple", "cyan",   "orange", "white"};
const double kPalette[8][3] = {
    {0.85, 0.15, 0.15}, {0.15, 0.75, 0.20}, {0.15, 0.25, 0.85},
    {0.90, 0.85, 0.15}, {0.60, 0.20, 0.75}, {0.15, 0.80, 0.80},
    {0.95, 0.55, 0.10}, {0.90, 0.90, 0.90}};

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct InstanceInfo {
  int category = 0;
  double centroid[3] = {0, 0, 0};
  double rms_radius = 0;
  int n_points = 0;
};

std::vector<InstanceInfo> instance_infos(const Scene& scene) {
  int m = scene.n_instances();
  std::vector<InstanceInfo> info(m);
  for (int p = 0; p < scene.n_points(); ++p) {
    InstanceInfo& it = info[scene.instance_id[p]];
    it.category = scene.category_id[p];
    for (int k = 0; k < 3; ++k) it.centroid[k] += scene.point(p)[k];
    it.n_points += 1;
  }
  for (auto& it : info)
    for (int k = 0; k < 3; ++k) it.centroid[k] /= std::max(1, it.n_points);
  for (int p = 0; p < scene.n_points(); ++p) {
    InstanceInfo& it = info[scene.instance_id[p]];
    double d2 = 0;
    for (int k = 0; k < 3; ++k) {
      double d = scene.point(p)[k] - it.centroid[k];
      d2 += d * d;
    }
    it.rms_radius += d2;
  }
  for (auto& it : info)
    it.rms_radius = std::sqrt(it.rms_radius / std::max(1, it.n_points));
  return info;
}

}  // namespace

int Scene::n_instances() const {
  int m = -1;
  for (int id : instance_id) m = std::max(m, id);
  return m + 1;
}

int Scene::instance_category(int inst) const {
  for (int p = 0; p < n_points(); ++p)
    if (instance_id[p] == inst) return category_id[p];
  throw std::out_of_range("instance not present in scene");
}

std::vector<int> Scene::category_counts(int n_categories) const {
  std::vector<int> counts(n_categories, 0);
  std::set<int> seen;
  for (int p = 0; p < n_points(); ++p) {
    if (seen.insert(instance_id[p]).second) counts[category_id[p]] += 1;
  }
  return counts;
}

Vocabulary make_vocabulary(int n_categories, int vocab_size) {
  Vocabulary v;
  for (int c = 0; c < n_categories; ++c)
    v.words.push_back(c < 8 ? kCategoryNames[c] : "cat" + std::to_string(c));
  for (int c = 0; c < n_categories; ++c)
    v.words.push_back(c < 8 ? kColorNames[c] : "color" + std::to_string(c));
  v.words.insert(v.words.end(),
                 {"big", "small", "left", "right", "near", "the", "object"});
  while (v.size() < vocab_size)
    v.words.push_back("unk" + std::to_string(v.size()));
  return v;
}

void category_color(int cat, double rgb[3]) {
  for (int k = 0; k < 3; ++k) rgb[k] = kPalette[cat % 8][k];
}

double category_sigma(int cat) {
  static const double sigma[8] = {0.35, 0.55, 0.25, 0.65,
                                  0.45, 0.50, 0.70, 0.30};
  return sigma[cat % 8];
}

Scene generate_scene(std::uint64_t seed, const SceneGenConfig& config,
                     int scene_id) {
  if (config.min_instances < 1 || config.min_points_per_instance < 1)
    throw std::invalid_argument(
        "scene config requires at least one instance and one point");
  if (config.max_instances < config.min_instances ||
      config.max_points_per_instance < config.min_points_per_instance ||
      config.n_categories < 1 || config.grid_cells < 1)
    throw std::invalid_argument("malformed scene generation config");

  Rng rng(derive_seed(seed, kTagScene, static_cast<std::uint64_t>(scene_id)));
  int m = static_cast<int>(
      rng.uniform_int(config.min_instances, config.max_instances));

  // Category assignment: k distinct categories seed one instance each, the
  // remainder duplicate among them. k < m guarantees at least one Multiple
  // category whenever m > 1.
  std::vector<int> cats(config.n_categories);
  for (int c = 0; c < config.n_categories; ++c) cats[c] = c;
  std::shuffle(cats.begin(), cats.end(), rng.engine());
  int k = m == 1 ? 1
                 : static_cast<int>(rng.uniform_int(
                       2, std::max<std::int64_t>(
                              2, std::min(m - 1, config.n_categories))));
  k = std::min(k, config.n_categories);
  std::vector<int> inst_cat;
  for (int i = 0; i < k; ++i) inst_cat.push_back(cats[i % cats.size()]);
  while (static_cast<int>(inst_cat.size()) < m)
    inst_cat.push_back(cats[rng.uniform_int(0, k - 1)]);
  std::shuffle(inst_cat.begin(), inst_cat.end(), rng.engine());

  // Cluster centers with simple rejection for separation.
  std::vector<double> centers(3 * m);
  const double lo = 1.2, hi = config.extent - 1.2;
  for (int i = 0; i < m; ++i) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      double x = rng.uniform(lo, hi);
      double y = rng.uniform(lo, hi);
      double z = rng.uniform(0.8, 2.2);
      bool ok = true;
      for (int j = 0; j < i; ++j) {
        double dx = x - centers[3 * j], dy = y - centers[3 * j + 1];
        if (dx * dx + dy * dy < 1.5 * 1.5) {
          ok = false;
          break;
        }
      }
      centers[3 * i] = x;
      centers[3 * i + 1] = y;
      centers[3 * i + 2] = z;
      if (ok) break;
    }
    if (config.center_jitter > 0) {
      for (int kk = 0; kk < 3; ++kk)
        centers[3 * i + kk] += rng.normal(0, config.center_jitter);
    }
  }

  Scene scene;
  scene.scene_id = scene_id;
  for (int i = 0; i < m; ++i) {
    double scale = rng.uniform(0.75, 1.3);
    double sigma = category_sigma(inst_cat[i]) * scale;
    int n_pts = static_cast<int>(rng.uniform_int(
        config.min_points_per_instance, config.max_points_per_instance));
    double rgb[3];
    category_color(inst_cat[i], rgb);
    for (int p = 0; p < n_pts; ++p) {
      double xyz[3];
      for (int kk = 0; kk < 3; ++kk) {
        double s = kk == 2 ? sigma * 0.5 : sigma;
        xyz[kk] = rng.normal(centers[3 * i + kk], s);
      }
      scene.points.insert(scene.points.end(), {xyz[0], xyz[1], xyz[2]});
      for (int kk = 0; kk < 3; ++kk)
        scene.points.push_back(clamp01(
            rgb[kk] + rng.uniform(-config.color_noise, config.color_noise)));
      scene.instance_id.push_back(i);
      scene.category_id.push_back(inst_cat[i]);
    }
  }

  // Superpoints: occupancy-grid cells intersected with instances.
  const double cell = config.extent / config.grid_cells;
  std::map<std::pair<int, long>, std::vector<int>> groups;
  for (int p = 0; p < scene.n_points(); ++p) {
    long key = 0;
    for (int kk = 0; kk < 3; ++kk) {
      long c = static_cast<long>(std::floor(scene.point(p)[kk] / cell));
      c = std::min<long>(config.grid_cells - 1, std::max<long>(0, c));
      key = key * config.grid_cells + c;
    }
    groups[{scene.instance_id[p], key}].push_back(p);
  }
  scene.superpoint_id.assign(scene.n_points(), -1);
  int sp = 0;
  for (const auto& [key, members] : groups) {
    for (int p : members) scene.superpoint_id[p] = sp;
    ++sp;
  }
  scene.n_superpoints = sp;
  return scene;
}

std::vector<int> generate_expression(const Scene& scene, int referent,
                                     std::uint64_t seed,
                                     const SceneGenConfig& config) {
  int m = scene.n_instances();
  if (referent < 0 || referent >= m)
    throw std::out_of_range("referent is not a valid instance");
  const int C = config.n_categories;
  const int kBig = 2 * C, kSmall = 2 * C + 1, kLeft = 2 * C + 2,
            kRight = 2 * C + 3, kNear = 2 * C + 4, kThe = 2 * C + 5;

  auto info = instance_infos(scene);
  int cat = info[referent].category;
  std::vector<int> same_cat;
  for (int i = 0; i < m; ++i)
    if (info[i].category == cat) same_cat.push_back(i);

  Rng rng(derive_seed(seed, kTagExpr,
                      (static_cast<std::uint64_t>(scene.scene_id) << 16) ^
                          static_cast<std::uint64_t>(referent)));
  bool with_color = rng.uniform(0.0, 1.0) < 0.5;

  std::vector<int> tokens = {kThe};
  if (with_color) tokens.push_back(C + cat);

  std::vector<int> suffix;
  if (same_cat.size() > 1) {
    // Disambiguate among same-category instances: size first, then
    // horizontal extremes, then a nearest-neighbor relation.
    double r = info[referent].rms_radius;
    bool is_max = true, is_min = true;
    double min_x = info[referent].centroid[0], max_x = min_x;
    bool x_min = true, x_max = true;
    for (int i : same_cat) {
      if (i == referent) continue;
      if (info[i].rms_radius * 1.12 >= r) is_max = false;
      if (info[i].rms_radius <= r * 1.12) is_min = false;
      if (info[i].centroid[0] <= info[referent].centroid[0]) x_min = false;
      if (info[i].centroid[0] >= info[referent].centroid[0]) x_max = false;
      (void)min_x;
      (void)max_x;
    }
    if (is_max) {
      tokens.push_back(kBig);
    } else if (is_min) {
      tokens.push_back(kSmall);
    } else if (x_min) {
      tokens.push_back(kLeft);
    } else if (x_max) {
      tokens.push_back(kRight);
    } else {
      // nearest different-category instance; usable when the referent is
      // the same-category instance closest to it
      int anchor = -1;
      double best = 1e300;
      for (int i = 0; i < m; ++i) {
        if (info[i].category == cat) continue;
        double d2 = 0;
        for (int kk = 0; kk < 3; ++kk) {
          double d = info[i].centroid[kk] - info[referent].centroid[kk];
          d2 += d * d;
        }
        if (d2 < best) {
          best = d2;
          anchor = i;
        }
      }
      if (anchor >= 0) {
        bool closest = true;
        for (int i : same_cat) {
          if (i == referent) continue;
          double d2 = 0;
          for (int kk = 0; kk < 3; ++kk) {
            double d = info[i].centroid[kk] - info[anchor].centroid[kk];
            d2 += d * d;
          }
          if (d2 <= best) closest = false;
        }
        if (closest) suffix = {kNear, info[anchor].category};
      }
      // otherwise fall back to the category-only template
    }
  }
  tokens.push_back(cat);
  tokens.insert(tokens.end(), suffix.begin(), suffix.end());
  return tokens;
}

std::vector<std::uint8_t> instance_mask(const Scene& scene, int instance) {
  std::vector<std::uint8_t> mask(scene.n_points(), 0);
  for (int p = 0; p < scene.n_points(); ++p)
    if (scene.instance_id[p] == instance) mask[p] = 1;
  return mask;
}

Dataset generate_dataset(std::uint64_t seed, const SceneGenConfig& config,
                         int n_scenes, int samples_per_scene) {
  Dataset ds;
  ds.config = config;
  ds.seed = seed;
  ds.vocab = make_vocabulary(config.n_categories);
  for (int s = 0; s < n_scenes; ++s)
    ds.scenes.push_back(generate_scene(seed, config, s));

  for (int s = 0; s < n_scenes; ++s) {
    const Scene& scene = ds.scenes[s];
    auto info = instance_infos(scene);
    std::vector<int> counts(config.n_categories, 0);
    for (const auto& it : info) counts[it.category] += 1;
    std::vector<int> unique_inst, multi_inst;
    for (int i = 0; i < static_cast<int>(info.size()); ++i)
      (counts[info[i].category] == 1 ? unique_inst : multi_inst).push_back(i);

    Rng rng(derive_seed(seed, kTagSamples, static_cast<std::uint64_t>(s)));
    for (int j = 0; j < samples_per_scene; ++j) {
      bool want_unique = rng.uniform(0.0, 1.0) < config.unique_fraction;
      const std::vector<int>& pool =
          (want_unique && !unique_inst.empty())   ? unique_inst
          : (!multi_inst.empty() ? multi_inst : unique_inst);
      int referent = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
      ReferringSample sample;
      sample.scene_id = s;
      sample.referent_instance = referent;
      sample.is_unique = counts[info[referent].category] == 1;
      sample.tokens = generate_expression(
          scene, referent,
          derive_seed(seed, kTagExpr, static_cast<std::uint64_t>(s) * 131 + j),
          config);
      sample.gt_mask = instance_mask(scene, referent);
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

Split make_splits(const Dataset& dataset, const SplitSpec& spec) {
  if (!(spec.labeled_ratio > 0.0 && spec.labeled_ratio <= 1.0))
    throw std::invalid_argument("labeled_ratio must be in (0, 1]");
  int n = static_cast<int>(dataset.samples.size());
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  Rng rng(derive_seed(spec.seed, kTagSplit));
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  int n_l = std::max(1, static_cast<int>(std::llround(spec.labeled_ratio * n)));
  n_l = std::min(n_l, n);
  Split split;
  split.labeled_ids.assign(ids.begin(), ids.begin() + n_l);
  split.unlabeled_ids.assign(ids.begin() + n_l, ids.end());
  std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
  std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  return split;
}

std::vector<ReferringSample> trainer_view(const Dataset& dataset,
                                          const Split& split) {
  std::vector<ReferringSample> view = dataset.samples;
  for (int id : split.unlabeled_ids) view[id].gt_mask.reset();
  return view;
}

std::string encode_mask_rle(const std::vector<std::uint8_t>& mask) {
  // Alternating run lengths, first run counts zeros (possibly 0).
  std::string out;
  std::uint8_t cur = 0;
  int run = 0;
  for (std::uint8_t b : mask) {
    if (b == cur) {
      ++run;
    } else {
      out += std::to_string(run) + ",";
      cur = b;
      run = 1;
    }
  }
  out += std::to_string(run);
  return out;
}

std::vector<std::uint8_t> decode_mask_rle(const std::string& rle, int n) {
  std::vector<std::uint8_t> mask;
  mask.reserve(n);
  std::uint8_t cur = 0;
  std::stringstream ss(rle);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int run = std::stoi(item);
    mask.insert(mask.end(), run, cur);
    cur = 1 - cur;
  }
  if (static_cast<int>(mask.size()) != n)
    throw std::runtime_error("RLE mask length mismatch");
  return mask;
}

namespace {

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "refseg-dataset v1\n";
  out << "config seed=" << ds.seed << " min_instances=" << ds.config.min_instances
      << " max_instances=" << ds.config.max_instances
      << " min_points_per_instance=" << ds.config.min_points_per_instance
      << " max_points_per_instance=" << ds.config.max_points_per_instance
      << " n_categories=" << ds.config.n_categories
      << " grid_cells=" << ds.config.grid_cells
      << " extent=" << fmt_real(ds.config.extent)
      << " color_noise=" << fmt_real(ds.config.color_noise)
      << " center_jitter=" << fmt_real(ds.config.center_jitter)
      << " unique_fraction=" << fmt_real(ds.config.unique_fraction) << "\n";
  out << "vocab " << ds.vocab.size();
  for (const auto& w : ds.vocab.words) out << " " << w;
  out << "\n";
  for (const Scene& sc : ds.scenes) {
    out << "scene " << sc.scene_id << " " << sc.n_points() << " "
        << sc.n_superpoints << "\n";
    for (int p = 0; p < sc.n_points(); ++p)
      for (int k = 0; k < 6; ++k)
        out << fmt_real(sc.points[6 * p + k]) << (6 * p + k + 1 == 6 * sc.n_points() ? "\n" : " ");
    auto dump_ints = [&](const std::vector<int>& v) {
      for (size_t i = 0; i < v.size(); ++i)
        out << v[i] << (i + 1 == v.size() ? "\n" : " ");
    };
    dump_ints(sc.instance_id);
    dump_ints(sc.category_id);
    dump_ints(sc.superpoint_id);
  }
  for (const ReferringSample& s : ds.samples) {
    out << "sample " << s.scene_id << " " << s.referent_instance << " "
        << (s.is_unique ? 1 : 0) << " " << (s.pseudo_origin ? 1 : 0) << " "
        << s.tokens.size();
    for (int t : s.tokens) out << " " << t;
    out << " " << (s.gt_mask ? encode_mask_rle(*s.gt_mask) : std::string("-"))
        << "\n";
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "refseg-dataset v1")
    throw std::runtime_error("not a refseg dataset file: " + path);

  Dataset ds;
  std::getline(in, line);
  {
    std::stringstream ss(line);
    std::string word;
    ss >> word;  // "config"
    std::string kv;
    while (ss >> kv) {
      auto eq = kv.find('=');
      std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "seed") ds.seed = std::stoull(val);
      else if (key == "min_instances") ds.config.min_instances = std::stoi(val);
      else if (key == "max_instances") ds.config.max_instances = std::stoi(val);
      else if (key == "min_points_per_instance")
        ds.config.min_points_per_instance = std::stoi(val);
      else if (key == "max_points_per_instance")
        ds.config.max_points_per_instance = std::stoi(val);
      else if (key == "n_categories") ds.config.n_categories = std::stoi(val);
      else if (key == "grid_cells") ds.config.grid_cells = std::stoi(val);
      else if (key == "extent") ds.config.extent = std::stod(val);
      else if (key == "color_noise") ds.config.color_noise = std::stod(val);
      else if (key == "center_jitter") ds.config.center_jitter = std::stod(val);
      else if (key == "unique_fraction")
        ds.config.unique_fraction = std::stod(val);
    }
  }
  std::getline(in, line);
  {
    std::stringstream ss(line);
    std::string word;
    int n;
    ss >> word >> n;
    for (int i = 0; i < n; ++i) {
      ss >> word;
      ds.vocab.words.push_back(word);
    }
  }
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "scene") {
      Scene sc;
      int n;
      ss >> sc.scene_id >> n >> sc.n_superpoints;
      sc.points.resize(6 * n);
      std::getline(in, line);
      {
        std::stringstream ps(line);
        for (double& v : sc.points) ps >> v;
      }
      auto read_ints = [&](std::vector<int>& v) {
        v.resize(n);
        std::getline(in, line);
        std::stringstream is(line);
        for (int& x : v) is >> x;
      };
      read_ints(sc.instance_id);
      read_ints(sc.category_id);
      read_ints(sc.superpoint_id);
      ds.scenes.push_back(std::move(sc));
    } else if (kind == "sample") {
      ReferringSample s;
      int uniq, pseudo, ntok;
      ss >> s.scene_id >> s.referent_instance >> uniq >> pseudo >> ntok;
      s.is_unique = uniq != 0;
      s.pseudo_origin = pseudo != 0;
      s.tokens.resize(ntok);
      for (int& t : s.tokens) ss >> t;
      std::string rle;
      ss >> rle;
      if (rle != "-")
        s.gt_mask = decode_mask_rle(rle, ds.scenes[s.scene_id].n_points());
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace refseg
