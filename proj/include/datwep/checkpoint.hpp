#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "datwep/curriculum.hpp"
#include "datwep/model.hpp"
#include "datwep/optim.hpp"

namespace datwep::checkpoint {

using json = nlohmann::ordered_json;

inline json to_json(const model::ModelConfig& c) {
  return {{"image_size", c.image_size},       {"base_channels", c.base_channels},
          {"n_seg_classes", c.n_seg_classes}, {"n_answer_classes", c.n_answer_classes},
          {"vocab_size", c.vocab_size},       {"d_emb", c.d_emb},
          {"l_max", c.l_max},                 {"text_hidden", c.text_hidden},
          {"fusion_hidden", c.fusion_hidden}, {"norm", std::string(model::norm_mode_name(c.norm))},
          {"bn_momentum", c.bn_momentum},     {"bn_eps", c.bn_eps}};
}

inline model::ModelConfig model_config_from_json(const json& j) {
  model::ModelConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.base_channels = j.at("base_channels").get<std::size_t>();
  c.n_seg_classes = j.at("n_seg_classes").get<std::size_t>();
  c.n_answer_classes = j.at("n_answer_classes").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_emb = j.at("d_emb").get<std::size_t>();
  c.l_max = j.at("l_max").get<std::size_t>();
  c.text_hidden = j.at("text_hidden").get<std::size_t>();
  c.fusion_hidden = j.at("fusion_hidden").get<std::size_t>();
  c.norm = model::parse_norm_mode(j.at("norm").get<std::string>());
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.bn_eps = j.at("bn_eps").get<double>();
  c.validate();
  return c;
}

inline json to_json(const curriculum::SchedulerConfig& c) {
  return {{"eps_datap", c.eps_datap},
          {"eps_dawep", c.eps_dawep},
          {"lambda_reg", c.lambda_reg},
          {"clip_min", c.clip_min},
          {"clip_max", c.clip_max},
          {"weight_floor", c.weight_floor},
          {"alpha_convention", std::string(losses::alpha_convention_name(c.alpha_convention))},
          {"sigmoid_variant", std::string(curriculum::sigmoid_variant_name(c.sigmoid_variant))},
          {"cadence", std::string(curriculum::cadence_name(c.cadence))}};
}

inline curriculum::SchedulerConfig scheduler_config_from_json(const json& j) {
  curriculum::SchedulerConfig c;
  c.eps_datap = j.at("eps_datap").get<double>();
  c.eps_dawep = j.at("eps_dawep").get<double>();
  c.lambda_reg = j.at("lambda_reg").get<double>();
  c.clip_min = j.at("clip_min").get<double>();
  c.clip_max = j.at("clip_max").get<double>();
  c.weight_floor = j.at("weight_floor").get<double>();
  c.alpha_convention = losses::parse_alpha_convention(j.at("alpha_convention").get<std::string>());
  c.sigmoid_variant = curriculum::parse_sigmoid_variant(j.at("sigmoid_variant").get<std::string>());
  c.cadence = curriculum::parse_cadence(j.at("cadence").get<std::string>());
  c.validate();
  return c;
}

/// Everything needed to evaluate or resume a run.
struct Checkpoint {
  json run = json::object();  // resolved run configuration, stored verbatim
  model::ModelConfig model_config;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::vector<std::string> answers;
  std::vector<std::string> class_names;
  model::ModelParams params;
  double alpha = 0.5;
  std::vector<double> class_weights;
  std::size_t scheduler_steps = 0;
  std::size_t optimizer_steps = 0;
  std::vector<Tensor> adam_m, adam_v;
};

inline constexpr char kMagic[8] = {'D', 'A', 'T', 'W', 'E', 'P', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline std::uint64_t get_uint(std::istream& is, int bytes) {
  unsigned char b[8] = {};
  if (!is.read(reinterpret_cast<char*>(b), bytes)) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

struct Entry {
  std::string name;
  std::string kind;  // param | buffer | adam_m | adam_v
  const Tensor* tensor;
};

}  // namespace detail

/// Layout:
///   8 bytes   "DATWEPCK"
///   u32 LE    format version
///   u64 LE    header length in bytes
///   header    UTF-8 JSON: metadata plus a tensor index {name, kind, shape, offset, count}
///   payload   float64 LE values, tensors concatenated in index order; offsets count values
inline void save(const Checkpoint& ck, const std::filesystem::path& path) {
  std::vector<detail::Entry> entries;
  for (const auto& p : ck.params.params) entries.push_back({p.name, "param", &p.value});
  for (const auto& b : ck.params.buffers) entries.push_back({b.name, "buffer", &b.value});
  if (ck.adam_m.size() != ck.adam_v.size() || (!ck.adam_m.empty() && ck.adam_m.size() != ck.params.params.size())) {
    throw ShapeError("optimizer moments must match the parameter list");
  }
  for (std::size_t i = 0; i < ck.adam_m.size(); ++i) {
    entries.push_back({ck.params.params[i].name, "adam_m", &ck.adam_m[i]});
    entries.push_back({ck.params.params[i].name, "adam_v", &ck.adam_v[i]});
  }

  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    index.push_back({{"name", e.name},
                     {"kind", e.kind},
                     {"shape", e.tensor->shape()},
                     {"offset", offset},
                     {"count", e.tensor->size()}});
    offset += e.tensor->size();
  }
  json header = {{"format", "datwep-checkpoint"},
                 {"model", to_json(ck.model_config)},
                 {"run", ck.run},
                 {"seed", ck.seed},
                 {"epoch", ck.epoch},
                 {"answers", ck.answers},
                 {"class_names", ck.class_names},
                 {"scheduler",
                  {{"alpha", ck.alpha}, {"class_weights", ck.class_weights}, {"steps", ck.scheduler_steps}}},
                 {"optimizer_steps", ck.optimizer_steps},
                 {"tensors", index}};
  const std::string text = header.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, 8);
    detail::put_u32(os, kVersion);
    detail::put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : entries)
      for (double v : e.tensor->data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw FormatError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError(path.string() + " is not a checkpoint file");
  }
  const auto version = detail::get_uint(is, 4);
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_uint(is, 8);
  if (hlen > (std::uint64_t{1} << 30)) throw FormatError("checkpoint header too large");
  std::string text(hlen, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(hlen))) throw FormatError("checkpoint header truncated");

  json h;
  try {
    h = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model_config = model_config_from_json(h.at("model"));
    ck.run = h.at("run");
    ck.seed = h.at("seed").get<std::uint64_t>();
    ck.epoch = h.at("epoch").get<std::size_t>();
    ck.answers = h.at("answers").get<std::vector<std::string>>();
    ck.class_names = h.at("class_names").get<std::vector<std::string>>();
    const auto& s = h.at("scheduler");
    ck.alpha = s.at("alpha").get<double>();
    ck.class_weights = s.at("class_weights").get<std::vector<double>>();
    ck.scheduler_steps = s.at("steps").get<std::size_t>();
    ck.optimizer_steps = h.at("optimizer_steps").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header incomplete: ") + e.what());
  }

  // The architecture fixes the parameter list; stored tensors must match it exactly.
  ck.params = model::init_params(ck.model_config, 0);
  std::uint64_t expected = 0;
  std::vector<std::pair<Tensor*, std::uint64_t>> targets;
  std::size_t pi = 0, bi = 0, mi = 0, vi = 0;
  ck.adam_m.reserve(ck.params.params.size());  // targets hold pointers into these
  ck.adam_v.reserve(ck.params.params.size());
  for (const auto& e : h.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto kind = e.at("kind").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto count = e.at("count").get<std::uint64_t>();
    if (offset != expected || count != numel(shape)) throw FormatError("checkpoint tensor index inconsistent at " + name);
    expected += count;
    Tensor* dst = nullptr;
    if (kind == "param" && pi < ck.params.params.size()) {
      dst = &ck.params.params[pi].value;
      if (ck.params.params[pi++].name != name) throw FormatError("unexpected parameter " + name);
    } else if (kind == "buffer" && bi < ck.params.buffers.size()) {
      dst = &ck.params.buffers[bi].value;
      if (ck.params.buffers[bi++].name != name) throw FormatError("unexpected buffer " + name);
    } else if (kind == "adam_m" && mi < ck.params.params.size()) {
      if (ck.params.params[mi++].name != name) throw FormatError("unexpected optimizer moment " + name);
      ck.adam_m.emplace_back(shape);
      dst = &ck.adam_m.back();
    } else if (kind == "adam_v" && vi < ck.params.params.size()) {
      if (ck.params.params[vi++].name != name) throw FormatError("unexpected optimizer moment " + name);
      ck.adam_v.emplace_back(shape);
      dst = &ck.adam_v.back();
    } else {
      throw FormatError("unexpected checkpoint tensor " + kind + " " + name);
    }
    if (dst->shape() != shape) {
      throw FormatError("shape of " + name + " is " + shape_str(shape) + ", architecture expects " +
                        shape_str(dst->shape()));
    }
    targets.push_back({dst, count});
  }
  if (pi != ck.params.params.size() || bi != ck.params.buffers.size() || mi != vi ||
      (mi != 0 && mi != ck.params.params.size())) {
    throw FormatError("checkpoint is missing tensors");
  }
  for (auto [dst, count] : targets)
    for (std::uint64_t j = 0; j < count; ++j) (*dst)[j] = std::bit_cast<double>(detail::get_uint(is, 8));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

}  // namespace datwep::checkpoint
