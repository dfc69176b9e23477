#include "condense/relabel.h"

#include <Eigen/Core>
#include <algorithm>
#include <nlohmann/json.hpp>
#include <numeric>

#include "condense/errors.h"
#include "condense/io_util.h"
#include "condense/losses.h"

namespace condense {

namespace {

constexpr char kMagic[8] = {'C', 'N', 'D', 'S', 'L', 'B', 'L', 'S'};
constexpr std::uint32_t kArchiveVersion = 1;

using nlohmann::json;

std::uint16_t half_bits(double v) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(v)));
}

double half_value(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

std::vector<float> normalized(std::vector<double> v) {
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / sum);
  return out;
}

// Entries for top-k storage: the k largest, ties by lower class index.
std::vector<int> top_indices(const std::vector<double>& p, int k) {
  std::vector<int> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min<int>(k, static_cast<int>(p.size()));
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](int a, int b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

std::vector<float> decode_topk(int num_classes, const std::vector<int>& cls,
                               const std::vector<std::uint16_t>& bits) {
  std::vector<double> dense(num_classes, 0.0);
  std::vector<bool> kept(num_classes, false);
  double kept_mass = 0;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    dense[cls[i]] = half_value(bits[i]);
    kept[cls[i]] = true;
    kept_mass += dense[cls[i]];
  }
  const int rest = num_classes - static_cast<int>(cls.size());
  if (rest > 0) {
    const double share = std::max(0.0, 1.0 - kept_mass) / rest;
    for (int c = 0; c < num_classes; ++c) {
      if (!kept[c]) dense[c] = share;
    }
  }
  return normalized(std::move(dense));
}

json meta_json(const ArchiveMeta& m) {
  return {{"teacher_id", m.teacher_id},
          {"temperature", m.temperature},
          {"epochs", m.epochs},
          {"crop_scale", {m.crop.scale_lo, m.crop.scale_hi}},
          {"crop_ratio", {m.crop.ratio_lo, m.crop.ratio_hi}},
          {"precision", precision_name(m.precision)},
          {"top_k", m.top_k},
          {"seed", m.seed},
          {"num_images", m.num_images},
          {"num_classes", m.num_classes},
          {"resolution", m.resolution}};
}

}  // namespace

std::string precision_name(LabelPrecision p) {
  switch (p) {
    case LabelPrecision::kFloat32: return "float32";
    case LabelPrecision::kFloat16: return "float16";
    case LabelPrecision::kTopK: return "topk";
  }
  return "?";
}

LabelPrecision parse_precision(const std::string& name) {
  if (name == "float32" || name == "fp32") return LabelPrecision::kFloat32;
  if (name == "float16" || name == "fp16") return LabelPrecision::kFloat16;
  if (name == "topk") return LabelPrecision::kTopK;
  throw ConfigError("unknown label precision '" + name + "' (expected float32, float16 or topk)");
}

void validate_relabel_config(const RelabelConfig& cfg) {
  if (!(cfg.temperature > 0)) throw ConfigError("relabel: temperature must be > 0");
  if (cfg.epochs < 1) throw ConfigError("relabel: epochs must be >= 1");
  if (cfg.precision == LabelPrecision::kTopK && (cfg.top_k < 1 || cfg.top_k > 65535)) {
    throw ConfigError("relabel: top_k must lie in [1, 65535]");
  }
  validate_crop_params(cfg.crop);
}

std::string relabel_config_json(const RelabelConfig& cfg) {
  const json j = {{"temperature", cfg.temperature},
                  {"epochs", cfg.epochs},
                  {"crop_scale", {cfg.crop.scale_lo, cfg.crop.scale_hi}},
                  {"crop_ratio", {cfg.crop.ratio_lo, cfg.crop.ratio_hi}},
                  {"precision", precision_name(cfg.precision)},
                  {"top_k", cfg.top_k},
                  {"seed", cfg.seed}};
  return j.dump();
}

CropDraw plan_crop(std::uint64_t seed, int image, int epoch, int height, int width,
                   const CropParams& crop) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(image), static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  CropDraw d;
  d.rect = sample_resized_crop(height, width, crop, rng);
  d.hflip = (rng() & 1u) != 0;
  return d;
}

std::vector<std::vector<CropDraw>> generate_crop_plan(int num_images, int epochs, int height,
                                                      int width, const CropParams& crop,
                                                      std::uint64_t seed) {
  validate_crop_params(crop);
  std::vector<std::vector<CropDraw>> plan(num_images);
  for (int i = 0; i < num_images; ++i) {
    plan[i].reserve(epochs);
    for (int e = 0; e < epochs; ++e) plan[i].push_back(plan_crop(seed, i, e, height, width, crop));
  }
  return plan;
}

EncodedLabel encode_label(const std::vector<double>& probs, LabelPrecision precision, int top_k) {
  EncodedLabel out;
  if (precision == LabelPrecision::kFloat16) {
    for (double p : probs) out.bits.push_back(half_bits(p));
  } else if (precision == LabelPrecision::kTopK) {
    for (int c : top_indices(probs, top_k)) {
      out.classes.push_back(static_cast<std::uint16_t>(c));
      out.bits.push_back(half_bits(probs[c]));
    }
  }
  return out;
}

std::vector<float> decode_label(const EncodedLabel& encoded, const std::vector<double>& probs,
                                LabelPrecision precision, int num_classes) {
  switch (precision) {
    case LabelPrecision::kFloat32:
      return normalized(probs);
    case LabelPrecision::kFloat16: {
      std::vector<double> d(encoded.bits.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = half_value(encoded.bits[i]);
      return normalized(std::move(d));
    }
    case LabelPrecision::kTopK:
      return decode_topk(num_classes, std::vector<int>(encoded.classes.begin(), encoded.classes.end()),
                         encoded.bits);
  }
  return {};
}

CropLabelArchive relabel(const CondensedDataset& cd, const Checkpoint& teacher,
                         const RelabelConfig& cfg) {
  validate_relabel_config(cfg);
  validate_condensed(cd);
  const int res = teacher.spec.input_resolution;
  if (cd.resolution != res || cd.channels != teacher.spec.channels) {
    throw ConfigError("relabel: teacher expects " + std::to_string(teacher.spec.channels) + "x" +
                      std::to_string(res) + " inputs, condensed set is " +
                      std::to_string(cd.channels) + "x" + std::to_string(cd.resolution));
  }
  if (cd.num_classes != teacher.spec.num_classes) {
    throw ConfigError("relabel: teacher has " + std::to_string(teacher.spec.num_classes) +
                      " classes, condensed set " + std::to_string(cd.num_classes));
  }
  Model<float> model = instantiate<float>(teacher);
  model.set_frozen(true);

  CropLabelArchive archive;
  archive.meta = {checkpoint_id(teacher), cfg.temperature, cfg.epochs, cfg.crop, cfg.precision,
                  cfg.precision == LabelPrecision::kTopK ? cfg.top_k : 0, cfg.seed, cd.size(),
                  cd.num_classes, cd.resolution};
  const auto plan = generate_crop_plan(cd.size(), cfg.epochs, res, res, cfg.crop, cfg.seed);
  archive.records.assign(cd.size(), std::vector<CropRecord>(cfg.epochs));

  const int c = cd.channels, k = cd.num_classes;
  const std::size_t stride = static_cast<std::size_t>(c) * res * res;
  constexpr int kChunk = 100;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (int begin = 0; begin < cd.size(); begin += kChunk) {
      const int end = std::min(cd.size(), begin + kChunk);
      Tensor<float> x({end - begin, c, res, res});
      for (int i = begin; i < end; ++i) {
        resized_crop(cd.images.data() + i * stride, c, res, res, plan[i][e].rect,
                     plan[i][e].hflip, res, res, x.data() + (i - begin) * stride);
      }
      const Tensor<float> logits = model.forward(x, nn::Mode::kEval);
      for (int i = begin; i < end; ++i) {
        const std::span<const float> row(logits.data() + static_cast<std::size_t>(i - begin) * k, k);
        CropRecord& rec = archive.records[i][e];
        rec.epoch = e;
        rec.rect = plan[i][e].rect;
        rec.hflip = plan[i][e].hflip;
        const auto probs = softmax_temperature(row, cfg.temperature);
        rec.encoded = encode_label(probs, cfg.precision, cfg.top_k);
        rec.soft_label = decode_label(rec.encoded, probs, cfg.precision, k);
      }
    }
  }
  return archive;
}

std::uintmax_t save_archive(const CropLabelArchive& archive, const std::filesystem::path& path) {
  const ArchiveMeta& m = archive.meta;
  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 8));
  w.put(kArchiveVersion);
  const std::string header = meta_json(m).dump();
  w.put(static_cast<std::uint64_t>(header.size()));
  w.put_bytes(header);
  for (const auto& per_image : archive.records) {
    if (static_cast<int>(per_image.size()) != m.epochs) {
      throw IntegrityError("archive: image with " + std::to_string(per_image.size()) +
                           " records, expected " + std::to_string(m.epochs));
    }
    for (const auto& r : per_image) {
      w.put<std::int32_t>(r.rect.top);
      w.put<std::int32_t>(r.rect.left);
      w.put<std::int32_t>(r.rect.height);
      w.put<std::int32_t>(r.rect.width);
      w.put<std::uint8_t>(r.hflip ? 1 : 0);
      switch (m.precision) {
        case LabelPrecision::kFloat32:
          w.put_array<float>(r.soft_label);
          break;
        case LabelPrecision::kFloat16:
          if (static_cast<int>(r.encoded.bits.size()) != m.num_classes) {
            throw IntegrityError("archive: record without a float16 encoding");
          }
          w.put_array<std::uint16_t>(r.encoded.bits);
          break;
        case LabelPrecision::kTopK:
          w.put(static_cast<std::uint16_t>(r.encoded.classes.size()));
          for (std::size_t t = 0; t < r.encoded.classes.size(); ++t) {
            w.put(r.encoded.classes[t]);
            w.put(r.encoded.bits[t]);
          }
          break;
      }
    }
  }
  w.put(crc32_of(w.bytes()));
  write_file_atomic(path, w.bytes());
  return w.bytes().size();
}

CropLabelArchive load_archive(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string what = "archive " + path.string();
  if (bytes.size() < 12 || !std::equal(kMagic, kMagic + 8, bytes.begin())) {
    throw CorruptionError(what + ": bad magic");
  }
  ByteReader r(bytes, what);
  r.get_string(8);
  const auto version = r.get<std::uint32_t>();
  if (version != kArchiveVersion) {
    throw CorruptionError(what + ": format version " + std::to_string(version) +
                          ", this build reads " + std::to_string(kArchiveVersion));
  }
  if (bytes.size() < 4) throw CorruptionError(what + ": truncated");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(std::span(bytes.data(), bytes.size() - 4)) != stored_crc) {
    throw CorruptionError(what + ": checksum mismatch (file truncated or modified)");
  }

  CropLabelArchive archive;
  ArchiveMeta& m = archive.meta;
  try {
    const json j = json::parse(r.get_string(r.get<std::uint64_t>()));
    m.teacher_id = j.at("teacher_id").get<std::string>();
    m.temperature = j.at("temperature").get<double>();
    m.epochs = j.at("epochs").get<int>();
    m.crop = {j.at("crop_scale")[0].get<double>(), j.at("crop_scale")[1].get<double>(),
              j.at("crop_ratio")[0].get<double>(), j.at("crop_ratio")[1].get<double>()};
    m.precision = parse_precision(j.at("precision").get<std::string>());
    m.top_k = j.at("top_k").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.num_images = j.at("num_images").get<int>();
    m.num_classes = j.at("num_classes").get<int>();
    m.resolution = j.at("resolution").get<int>();
  } catch (const json::exception& e) {
    throw CorruptionError(what + ": bad header: " + e.what());
  }
  const int k = m.num_classes;
  archive.records.assign(m.num_images, std::vector<CropRecord>(m.epochs));
  for (int i = 0; i < m.num_images; ++i) {
    for (int e = 0; e < m.epochs; ++e) {
      CropRecord& rec = archive.records[i][e];
      rec.epoch = e;
      rec.rect.top = r.get<std::int32_t>();
      rec.rect.left = r.get<std::int32_t>();
      rec.rect.height = r.get<std::int32_t>();
      rec.rect.width = r.get<std::int32_t>();
      rec.hflip = r.get<std::uint8_t>() != 0;
      switch (m.precision) {
        case LabelPrecision::kFloat32:
          rec.soft_label.resize(k);
          r.get_array<float>(rec.soft_label);
          break;
        case LabelPrecision::kFloat16:
          rec.encoded.bits.resize(k);
          r.get_array<std::uint16_t>(rec.encoded.bits);
          rec.soft_label = decode_label(rec.encoded, {}, m.precision, k);
          break;
        case LabelPrecision::kTopK: {
          const int count = r.get<std::uint16_t>();
          for (int t = 0; t < count; ++t) {
            rec.encoded.classes.push_back(r.get<std::uint16_t>());
            if (rec.encoded.classes.back() >= k) {
              throw CorruptionError(what + ": class index out of range");
            }
            rec.encoded.bits.push_back(r.get<std::uint16_t>());
          }
          rec.soft_label = decode_label(rec.encoded, {}, m.precision, k);
          break;
        }
      }
    }
  }
  if (r.remaining() != 4) throw CorruptionError(what + ": trailing bytes after records");
  return archive;
}

}  // namespace condense
