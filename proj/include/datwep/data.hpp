#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "datwep/errors.hpp"
#include "datwep/image_io.hpp"
#include "datwep/question_type.hpp"
#include "datwep/rng.hpp"
#include "datwep/tensor.hpp"

namespace datwep::data {

namespace fs = std::filesystem;

struct QaItem {
  std::string question;
  std::size_t answer = 0;  // row of the answer table
  QuestionType type = QuestionType::SimpleCounting;
  bool operator==(const QaItem&) const = default;
};

struct Sample {
  std::string id;
  Tensor image;  // [3,H,W] in [0,1]
  Tensor masks;  // [K,H,W] binary
  std::vector<QaItem> qa;
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::size_t image_size = 0;
  std::size_t n_seg_classes = 0;
  std::vector<std::string> answers;
  std::vector<Sample> samples;
  std::vector<std::string> warnings;

  std::size_t qa_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.qa.size();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Pixel conversions.

inline Tensor image_tensor(const image_io::Image8& im) {
  if (im.channels != 3) throw ShapeError("image must have three channels");
  Tensor t(Shape{3, im.height, im.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) t.at(c, y, x) = im.at(y, x, c) / 255.0;
  return t;
}

inline image_io::Image8 image_pixels(const Tensor& t) {
  require_rank(t, 3, "image");
  const std::size_t H = t.dim(1), W = t.dim(2);
  image_io::Image8 im{W, H, 3, std::vector<std::uint8_t>(W * H * 3)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        im.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(t.at(c, y, x) * 255.0), 0L, 255L));
  return im;
}

/// Integer-coded mask to K binary channels: code k sets channel k.
inline Tensor split_mask(const image_io::Image8& codes, std::size_t K) {
  if (codes.channels != 1) throw ShapeError("integer-coded mask must have one channel");
  Tensor t(Shape{K, codes.height, codes.width});
  for (std::size_t y = 0; y < codes.height; ++y)
    for (std::size_t x = 0; x < codes.width; ++x) {
      const std::size_t k = codes.at(y, x);
      if (k >= K) {
        throw FormatError("mask code " + std::to_string(k) + " outside [0, " + std::to_string(K) + ")");
      }
      t.at(k, y, x) = 1.0;
    }
  return t;
}

/// Inverse of split_mask for masks with exactly one active channel per pixel.
inline image_io::Image8 merge_mask(const Tensor& masks) {
  require_rank(masks, 3, "masks");
  const std::size_t K = masks.dim(0), H = masks.dim(1), W = masks.dim(2);
  if (K > 256) throw ValidationError("at most 256 classes fit an 8-bit mask");
  image_io::Image8 im{W, H, 1, std::vector<std::uint8_t>(W * H)};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t active = 0, code = 0;
      for (std::size_t k = 0; k < K; ++k)
        if (masks.at(k, y, x) == 1.0) {
          ++active;
          code = k;
        }
      if (active != 1) throw ValidationError("mask pixel must belong to exactly one class");
      im.at(y, x) = static_cast<std::uint8_t>(code);
    }
  return im;
}

// ---------------------------------------------------------------------------
// Synthetic scenes.

enum SegClass : std::size_t { kBackground = 0, kBuildingFlooded, kBuildingDry, kRoadFlooded, kRoadDry, kPool };

inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"background",  "building-flooded",  "building-non-flooded",
                                                 "road-flooded", "road-non-flooded", "pool"};
  return names;
}

/// Every answer the generator can produce, in table order.
inline const std::vector<std::string>& canonical_answers() {
  static const std::vector<std::string> a = {"0", "1", "2", "3", "4", "yes", "no", "flooded", "non-flooded"};
  return a;
}

struct SynthConfig {
  std::size_t image_size = 32;
  std::size_t max_buildings = 4;
  double p_building_flooded = 0.5;
  double p_road_flooded = 0.5;
  double p_pool = 0.5;
  int noise = 8;  // uniform per-channel perturbation in [-noise, noise]

  void validate() const {
    if (image_size == 0 || image_size % 8 != 0) throw ValidationError("synthetic image_size must be a positive multiple of 8");
    if (max_buildings < 1 || max_buildings > 4) throw ValidationError("max_buildings must be in [1, 4]");
    if (noise < 0 || noise > 64) throw ValidationError("noise must be in [0, 64]");
  }
};

struct Building {
  std::size_t row, col;  // grid cell
  bool flooded;
};

/// Layout of one synthetic image on a 4x4 grid of cells.
struct SceneGraph {
  bool road_horizontal = true;
  std::size_t road_line = 0;  // grid row (horizontal) or column (vertical) holding the road
  bool road_flooded = false;
  std::vector<Building> buildings;
  std::optional<std::pair<std::size_t, std::size_t>> pool;

  std::size_t flooded_buildings() const {
    return static_cast<std::size_t>(std::count_if(buildings.begin(), buildings.end(), [](const Building& b) { return b.flooded; }));
  }
};

inline constexpr std::size_t kGrid = 4;

inline SceneGraph random_scene(Rng& rng, const SynthConfig& cfg) {
  SceneGraph g;
  g.road_horizontal = rng.bernoulli(0.5);
  g.road_line = rng.below(kGrid);
  g.road_flooded = rng.bernoulli(cfg.p_road_flooded);
  std::vector<std::pair<std::size_t, std::size_t>> free;
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t c = 0; c < kGrid; ++c)
      if ((g.road_horizontal ? r : c) != g.road_line) free.push_back({r, c});
  rng.shuffle(free);
  const std::size_t n = 1 + rng.below(cfg.max_buildings);
  for (std::size_t i = 0; i < n; ++i) g.buildings.push_back({free[i].first, free[i].second, rng.bernoulli(cfg.p_building_flooded)});
  if (rng.bernoulli(cfg.p_pool)) g.pool = free[n];
  return g;
}

struct Rgb {
  int r, g, b;
};

inline Rgb class_colour(std::size_t cls) {
  switch (cls) {
    case kBuildingFlooded: return {120, 80, 170};
    case kBuildingDry: return {195, 95, 70};
    case kRoadFlooded: return {60, 95, 160};
    case kRoadDry: return {135, 135, 135};
    case kPool: return {40, 195, 215};
    default: return {75, 145, 60};
  }
}

/// Per-pixel class codes of a scene.
inline image_io::Image8 render_codes(const SceneGraph& g, std::size_t size) {
  const std::size_t cell = size / kGrid;
  image_io::Image8 codes{size, size, 1, std::vector<std::uint8_t>(size * size, kBackground)};
  const std::size_t thick = cell / 2, off = (cell - thick) / 2;
  for (std::size_t a = 0; a < size; ++a)
    for (std::size_t t = 0; t < thick; ++t) {
      const std::size_t across = g.road_line * cell + off + t;
      const std::size_t y = g.road_horizontal ? across : a, x = g.road_horizontal ? a : across;
      codes.at(y, x) = static_cast<std::uint8_t>(g.road_flooded ? kRoadFlooded : kRoadDry);
    }
  const std::size_t inset = std::max<std::size_t>(1, cell / 8);
  for (const auto& b : g.buildings)
    for (std::size_t y = b.row * cell + inset; y < (b.row + 1) * cell - inset; ++y)
      for (std::size_t x = b.col * cell + inset; x < (b.col + 1) * cell - inset; ++x)
        codes.at(y, x) = static_cast<std::uint8_t>(b.flooded ? kBuildingFlooded : kBuildingDry);
  if (g.pool) {
    const double cy = (static_cast<double>(g.pool->first) + 0.5) * static_cast<double>(cell);
    const double cx = (static_cast<double>(g.pool->second) + 0.5) * static_cast<double>(cell);
    const double rad = 0.35 * static_cast<double>(cell);
    for (std::size_t y = g.pool->first * cell; y < (g.pool->first + 1) * cell; ++y)
      for (std::size_t x = g.pool->second * cell; x < (g.pool->second + 1) * cell; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        if (dy * dy + dx * dx <= rad * rad) codes.at(y, x) = static_cast<std::uint8_t>(kPool);
      }
  }
  return codes;
}

inline image_io::Image8 render_image(const image_io::Image8& codes, Rng& rng, int noise) {
  image_io::Image8 im{codes.width, codes.height, 3, std::vector<std::uint8_t>(codes.width * codes.height * 3)};
  for (std::size_t y = 0; y < codes.height; ++y)
    for (std::size_t x = 0; x < codes.width; ++x) {
      const Rgb c = class_colour(codes.at(y, x));
      const int base[3] = {c.r, c.g, c.b};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const int jitter = noise ? static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * noise + 1))) - noise : 0;
        im.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(base[ch] + jitter, 0, 255));
      }
    }
  return im;
}

struct RawQa {
  std::string question;
  std::string answer;
  QuestionType type;
};

/// One question of each type, with one type left out half of the time.
inline std::vector<RawQa> scene_questions(const SceneGraph& g, Rng& rng) {
  const std::size_t nb = g.buildings.size(), nf = g.flooded_buildings();
  std::vector<RawQa> qa;
  qa.push_back({"How many buildings are in the image?", std::to_string(nb), QuestionType::SimpleCounting});
  qa.push_back({"How many flooded buildings are in the image?", std::to_string(nf), QuestionType::ComplexCounting});
  if (rng.bernoulli(0.5)) {
    qa.push_back({"Is the road flooded?", g.road_flooded ? "yes" : "no", QuestionType::YesNo});
  } else {
    qa.push_back({"Is there a pool in the image?", g.pool ? "yes" : "no", QuestionType::YesNo});
  }
  qa.push_back({"What is the condition of the road?", g.road_flooded ? "flooded" : "non-flooded",
                QuestionType::ConditionRecognition});
  if (rng.bernoulli(0.5)) qa.erase(qa.begin() + static_cast<std::ptrdiff_t>(rng.below(qa.size())));
  return qa;
}

/// Deterministic synthetic dataset. The answer table keeps canonical order, restricted to answers that occur.
inline Dataset generate_synthetic(std::size_t n_images, const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  struct Pending {
    std::string id;
    image_io::Image8 codes, rgb;
    std::vector<RawQa> qa;
  };
  std::vector<Pending> pending;
  std::set<std::string> used;
  for (std::size_t i = 0; i < n_images; ++i) {
    const SceneGraph g = random_scene(rng, cfg);
    Pending p;
    char id[32];
    std::snprintf(id, sizeof id, "syn_%05zu", i);
    p.id = id;
    p.codes = render_codes(g, cfg.image_size);
    p.rgb = render_image(p.codes, rng, cfg.noise);
    p.qa = scene_questions(g, rng);
    for (const auto& q : p.qa) used.insert(q.answer);
    pending.push_back(std::move(p));
  }
  Dataset ds;
  ds.image_size = cfg.image_size;
  ds.n_seg_classes = synthetic_class_names().size();
  for (const auto& a : canonical_answers())
    if (used.count(a)) ds.answers.push_back(a);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.answers.size(); ++i) index[ds.answers[i]] = i;
  for (auto& p : pending) {
    Sample s{p.id, image_tensor(p.rgb), split_mask(p.codes, ds.n_seg_classes), {}};
    for (const auto& q : p.qa) s.qa.push_back({q.question, index.at(q.answer), q.type});
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout: images/<id>.png, masks/<id>.png, qa.jsonl, answers.txt.

inline void write_answers(const fs::path& file, const std::vector<std::string>& answers) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw FormatError("cannot write " + file.string());
  for (const auto& a : answers) os << a << '\n';
}

inline std::vector<std::string> read_answers(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw FormatError("cannot read answer table " + file.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(line);
  }
  std::set<std::string> uniq(out.begin(), out.end());
  if (uniq.size() != out.size()) throw FormatError("answer table contains duplicates");
  if (out.empty()) throw FormatError("answer table is empty");
  return out;
}

inline void write_dataset_dir(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ofstream qa(root / "qa.jsonl", std::ios::binary);
  if (!qa) throw FormatError("cannot write " + (root / "qa.jsonl").string());
  for (const auto& s : ds.samples) {
    image_io::write_png((root / "images" / (s.id + ".png")).string(), image_pixels(s.image));
    image_io::write_png((root / "masks" / (s.id + ".png")).string(), merge_mask(s.masks));
    for (const auto& q : s.qa) {
      nlohmann::ordered_json j;
      j["image_id"] = s.id;
      j["question"] = q.question;
      j["answer"] = ds.answers.at(q.answer);
      j["question_type"] = std::string(question_type_tag(q.type));
      qa << j.dump() << '\n';
    }
  }
  write_answers(root / "answers.txt", ds.answers);
}

struct LoadConfig {
  std::size_t image_size = 32;
  std::size_t n_seg_classes = 6;
};

inline Dataset load_dataset_dir(const fs::path& root, const LoadConfig& cfg) {
  if (!fs::is_directory(root / "images")) throw FormatError("no images/ directory under " + root.string());
  Dataset ds;
  ds.image_size = cfg.image_size;
  ds.n_seg_classes = cfg.n_seg_classes;
  ds.answers = read_answers(root / "answers.txt");
  std::map<std::string, std::size_t> answer_index;
  for (std::size_t i = 0; i < ds.answers.size(); ++i) answer_index[ds.answers[i]] = i;

  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root / "images"))
    if (e.is_regular_file() && e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());

  std::map<std::string, std::size_t> sample_of;
  for (const auto& id : ids) {
    const fs::path mask_path = root / "masks" / (id + ".png");
    if (!fs::exists(mask_path)) {
      ds.warnings.push_back("image " + id + " has no mask; skipped");
      continue;
    }
    const auto rgb = image_io::resize_area(image_io::read_rgb((root / "images" / (id + ".png")).string()),
                                           cfg.image_size, cfg.image_size);
    const auto codes = image_io::resize_nearest(image_io::read_gray(mask_path.string()), cfg.image_size, cfg.image_size);
    sample_of[id] = ds.samples.size();
    ds.samples.push_back({id, image_tensor(rgb), split_mask(codes, cfg.n_seg_classes), {}});
  }

  std::ifstream qa(root / "qa.jsonl", std::ios::binary);
  if (!qa) throw FormatError("cannot read " + (root / "qa.jsonl").string());
  std::string line;
  std::size_t lineno = 0;
  std::size_t orphans = 0;
  while (std::getline(qa, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("qa.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
    for (const char* key : {"image_id", "question", "answer", "question_type"}) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw FormatError("qa.jsonl line " + std::to_string(lineno) + " lacks string field '" + key + "'");
      }
    }
    const std::string answer = j["answer"].get<std::string>();
    auto a = answer_index.find(answer);
    if (a == answer_index.end()) {
      std::string table;
      for (const auto& s : ds.answers) table += (table.empty() ? "" : ", ") + s;
      throw ValidationError("qa.jsonl line " + std::to_string(lineno) + ": answer '" + answer +
                            "' is not in the answer table [" + table + "]");
    }
    auto s = sample_of.find(j["image_id"].get<std::string>());
    if (s == sample_of.end()) {
      ++orphans;
      continue;
    }
    ds.samples[s->second].qa.push_back(
        {j["question"].get<std::string>(), a->second, parse_question_type(j["question_type"].get<std::string>())});
  }
  if (orphans) ds.warnings.push_back(std::to_string(orphans) + " question(s) refer to images that were not loaded");
  if (!ds.samples.empty()) {
    const double avg = static_cast<double>(ds.qa_count()) / static_cast<double>(ds.samples.size());
    if (std::abs(avg - 3.5) > 1.0) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "average of %.2f questions per image (expected about 3.5)", avg);
      ds.warnings.push_back(buf);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Image-level split.

struct SplitSpec {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;

  void validate() const {
    if (train < 0 || val < 0 || test < 0) throw ValidationError("split fractions must be non-negative");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  }
};

struct Splits {
  Dataset train, val, test;
};

/// Rounded fractions, each part at least one image.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
  if (n < 3) throw ValidationError("need at least 3 images to split, got " + std::to_string(n));
  auto nv = static_cast<std::size_t>(std::lround(spec.val * static_cast<double>(n)));
  auto nt = static_cast<std::size_t>(std::lround(spec.test * static_cast<double>(n)));
  nv = std::clamp<std::size_t>(nv, 1, n - 2);
  nt = std::clamp<std::size_t>(nt, 1, n - 1 - nv);
  return {n - nv - nt, nv, nt};
}

inline Splits split(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  const auto sizes = split_sizes(ds.samples.size(), spec);
  std::vector<std::size_t> order(ds.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  Splits out;
  Dataset* parts[3] = {&out.train, &out.val, &out.test};
  std::size_t pos = 0;
  for (std::size_t p = 0; p < 3; ++p) {
    Dataset& d = *parts[p];
    d.image_size = ds.image_size;
    d.n_seg_classes = ds.n_seg_classes;
    d.answers = ds.answers;
    std::vector<std::size_t> picked(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                    order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[p]));
    std::sort(picked.begin(), picked.end());
    for (std::size_t i : picked) d.samples.push_back(ds.samples[i]);
    pos += sizes[p];
  }
  return out;
}

}  // namespace datwep::data
