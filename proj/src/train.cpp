#include "stsep/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace stsep {

namespace {

constexpr uint64_t kShuffleStream = 0x73687566ull;
constexpr uint64_t kAugmentStream = 0x61756730ull;

void write_u16(std::ofstream& os, uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
  os.write(reinterpret_cast<char*>(b), 2);
}
void write_u32(std::ofstream& os, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<char*>(b), 4);
}
void write_f32(std::ofstream& os, const float* data, int64_t n) {
  for (int64_t i = 0; i < n; ++i) write_u32(os, std::bit_cast<uint32_t>(data[i]));
}

uint16_t read_u16(std::ifstream& is) {
  uint8_t b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (is.gcount() != 2) throw FormatError("checkpoint: truncated u16");
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
uint32_t read_u32(std::ifstream& is) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) throw FormatError("checkpoint: truncated u32");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

struct NamedTensor {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<float> values;
};

void write_entry(std::ofstream& os, const std::string& name, const std::vector<int64_t>& dims,
                 const float* data, int64_t n) {
  write_u16(os, static_cast<uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(dims.size()));
  for (int64_t d : dims) write_u32(os, static_cast<uint32_t>(d));
  write_f32(os, data, n);
}

NamedTensor read_entry(std::ifstream& is) {
  NamedTensor t;
  const uint16_t len = read_u16(is);
  t.name.resize(len);
  is.read(t.name.data(), len);
  if (is.gcount() != len) throw FormatError("checkpoint: truncated name");
  const int rank = is.get();
  if (rank < 0 || rank > 5) throw FormatError("checkpoint: bad tensor rank");
  int64_t n = 1;
  for (int i = 0; i < rank; ++i) {
    t.dims.push_back(read_u32(is));
    n *= t.dims.back();
  }
  t.values.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) t.values[static_cast<size_t>(i)] = std::bit_cast<float>(read_u32(is));
  return t;
}

std::vector<int64_t> shape_dims(const Shape& s) {
  std::vector<int64_t> d;
  for (int i = 0; i < s.rank(); ++i) d.push_back(s[i]);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const AdamWState* opt,
                     const CheckpointInfo& info) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  auto params = model.parameters();
  auto buffers = model.buffers();
  os.write("STCK", 4);
  write_u32(os, static_cast<uint32_t>(params.size() + buffers.size()));
  for (auto& p : params)
    write_entry(os, p.name, shape_dims(p.tensor->shape()), p.tensor->data(), p.tensor->numel());
  for (auto& b : buffers)
    write_entry(os, b.name, {static_cast<int64_t>(b.values->size())}, b.values->data(),
                static_cast<int64_t>(b.values->size()));
  if (opt) {
    if (opt->m.size() != params.size()) throw UsageError("save_checkpoint: optimizer mismatch");
    write_u32(os, static_cast<uint32_t>(2 * params.size() + 1));
    for (size_t i = 0; i < params.size(); ++i)
      write_entry(os, "opt.m." + params[i].name, {static_cast<int64_t>(opt->m[i].size())},
                  opt->m[i].data(), static_cast<int64_t>(opt->m[i].size()));
    for (size_t i = 0; i < params.size(); ++i)
      write_entry(os, "opt.v." + params[i].name, {static_cast<int64_t>(opt->v[i].size())},
                  opt->v[i].data(), static_cast<int64_t>(opt->v[i].size()));
    const float step = static_cast<float>(opt->step);
    write_entry(os, "opt.step", {1}, &step, 1);
  } else {
    write_u32(os, 0);
  }
  nlohmann::json trailer{{"epoch", info.epoch},
                         {"seed", info.seed},
                         {"config_hash", info.config_hash},
                         {"rng_state", info.rng_state}};
  const std::string t = trailer.dump();
  os.write(t.data(), static_cast<std::streamsize>(t.size()));
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

CheckpointInfo load_checkpoint(const std::string& path, Model& model, AdamWState* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "STCK", 4) != 0)
    throw FormatError("checkpoint: bad magic");
  auto read_section = [&is](uint32_t count) {
    std::map<std::string, NamedTensor> out;
    for (uint32_t i = 0; i < count; ++i) {
      NamedTensor t = read_entry(is);
      out.emplace(t.name, std::move(t));
    }
    return out;
  };
  auto tensors = read_section(read_u32(is));
  auto opt_tensors = read_section(read_u32(is));
  std::string trailer((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  nlohmann::json j = nlohmann::json::parse(trailer, nullptr, false);
  if (j.is_discarded()) throw FormatError("checkpoint: bad JSON trailer");

  auto params = model.parameters();
  for (auto& p : params) {
    auto it = tensors.find(p.name);
    if (it == tensors.end()) throw FormatError("checkpoint: missing tensor " + p.name);
    if (static_cast<int64_t>(it->second.values.size()) != p.tensor->numel())
      throw FormatError("checkpoint: shape mismatch for " + p.name);
    std::copy(it->second.values.begin(), it->second.values.end(), p.tensor->data());
  }
  for (auto& b : model.buffers()) {
    auto it = tensors.find(b.name);
    if (it == tensors.end()) throw FormatError("checkpoint: missing buffer " + b.name);
    if (it->second.values.size() != b.values->size())
      throw FormatError("checkpoint: shape mismatch for " + b.name);
    std::copy(it->second.values.begin(), it->second.values.end(), b.values->begin());
  }
  if (opt) {
    opt->init(params);
    if (!opt_tensors.empty()) {
      for (size_t i = 0; i < params.size(); ++i) {
        auto im = opt_tensors.find("opt.m." + params[i].name);
        auto iv = opt_tensors.find("opt.v." + params[i].name);
        if (im == opt_tensors.end() || iv == opt_tensors.end())
          throw FormatError("checkpoint: missing optimizer state for " + params[i].name);
        opt->m[i] = im->second.values;
        opt->v[i] = iv->second.values;
      }
      auto istep = opt_tensors.find("opt.step");
      if (istep == opt_tensors.end()) throw FormatError("checkpoint: missing opt.step");
      opt->step = static_cast<int64_t>(istep->second.values[0]);
    }
  }
  CheckpointInfo info;
  info.epoch = j.value("epoch", 0);
  info.seed = j.value("seed", 0ull);
  info.config_hash = j.value("config_hash", "");
  info.rng_state = j.value("rng_state", "");
  return info;
}

Tensor assemble_batch(const std::vector<VideoRecord>& videos, const std::vector<int64_t>& picks,
                      const SamplerSpec& sampler, int64_t target_res, double hflip_prob,
                      uint64_t seed, int64_t epoch, std::vector<int>* labels_out) {
  const int64_t n = static_cast<int64_t>(picks.size());
  const int64_t t = sampler.T;
  const int64_t per = 3 * target_res * target_res;
  Tensor packed(Shape{t * n, 3, target_res, target_res});
  if (labels_out) labels_out->clear();
  for (int64_t i = 0; i < n; ++i) {
    const VideoRecord& vid = videos[static_cast<size_t>(picks[static_cast<size_t>(i)])];
    Rng rng(mix_seed(mix_seed(seed, kAugmentStream), static_cast<uint64_t>(epoch),
                     static_cast<uint64_t>(picks[static_cast<size_t>(i)])));
    ClipF clip = decode_frames(vid, sample_indices(vid.length(), sampler, rng));
    clip = augment(clip, target_res, sampler.mode, hflip_prob, rng);
    for (int64_t ti = 0; ti < t; ++ti)
      std::copy(clip.frame(ti), clip.frame(ti) + per, packed.data() + (ti * n + i) * per);
    if (labels_out) labels_out->push_back(vid.label);
  }
  return packed;
}

MetricsRecord evaluate_dataset(Model& model, const std::vector<VideoRecord>& videos,
                               const SamplerSpec& eval_sampler, int64_t batch_size) {
  SamplerSpec spec = eval_sampler;
  spec.mode = Phase::eval;
  const int64_t n = static_cast<int64_t>(videos.size());
  const int64_t c = model.config().num_classes;
  std::vector<float> all_logits(static_cast<size_t>(n * c));
  std::vector<int> all_labels(static_cast<size_t>(n));
  double loss_sum = 0;
  for (int64_t at = 0; at < n; at += batch_size) {
    const int64_t bn = std::min(batch_size, n - at);
    std::vector<int64_t> picks(static_cast<size_t>(bn));
    std::iota(picks.begin(), picks.end(), at);
    std::vector<int> labels;
    Tensor packed = assemble_batch(videos, picks, spec, model.config().resolution, 0.0, 0, 0,
                                   &labels);
    Tensor logits = model.forward_packed(packed, spec.T, false);
    Tensor avg = mean_over_time(logits, spec.T);
    Tensor ce = softmax_cross_entropy(avg, labels);
    loss_sum += static_cast<double>(ce.item()) * static_cast<double>(bn);
    std::copy(avg.values().begin(), avg.values().end(), all_logits.begin() + at * c);
    std::copy(labels.begin(), labels.end(), all_labels.begin() + at);
  }
  MetricsRecord rec;
  rec.top1 = topk_accuracy(all_logits, n, c, all_labels, 1);
  rec.top5 = topk_accuracy(all_logits, n, c, all_labels, std::min<int64_t>(5, c));
  rec.loss = loss_sum / static_cast<double>(n);
  rec.per_class = per_class_accuracy(all_logits, n, c, all_labels);
  return rec;
}

TrainResult train_loop(Model& model, const std::vector<VideoRecord>& train_videos,
                       const std::vector<VideoRecord>& eval_videos, const TrainConfig& cfg,
                       SamplerSpec sampler, double hflip_prob, AdamWState& opt,
                       const std::function<void(const MetricsRecord&)>& on_epoch,
                       int64_t start_epoch) {
  cfg.validate();
  sampler.validate();
  sampler.mode = Phase::train;
  const int64_t c = model.config().num_classes;
  for (const auto& v : train_videos)
    if (v.label < 0 || v.label >= c)
      throw ConfigError("train_loop: label " + std::to_string(v.label) +
                        " outside model classes " + std::to_string(c));
  auto params = model.parameters();
  if (opt.m.empty()) opt.init(params);

  TrainResult result;
  const int64_t n = static_cast<int64_t>(train_videos.size());
  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, cfg);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuf(mix_seed(mix_seed(cfg.seed, kShuffleStream), static_cast<uint64_t>(epoch)));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(shuf.uniform_int(0, i))]);

    double loss_sum = 0;
    int64_t hits = 0;
    try {
      for (int64_t at = 0; at < n; at += cfg.batch_size) {
        const int64_t bn = std::min<int64_t>(cfg.batch_size, n - at);
        std::vector<int64_t> picks(order.begin() + at, order.begin() + at + bn);
        std::vector<int> labels;
        Tensor packed = assemble_batch(train_videos, picks, sampler, model.config().resolution,
                                       hflip_prob, cfg.seed, epoch, &labels);
        Graph g;
        Tensor loss, avg;
        {
          Graph::Record rec(g);
          Tensor logits = model.forward_packed(packed, sampler.T, true);
          avg = mean_over_time(logits, sampler.T);
          loss = softmax_cross_entropy(avg, labels);
        }
        backward(g, loss);
        adamw_step(params, opt, lr, cfg);
        for (auto& p : params) p.tensor->zero_grad();
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(bn);
        for (int64_t i = 0; i < bn; ++i) {
          const float* row = avg.data() + i * c;
          int best = 0;
          for (int64_t j = 1; j < c; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
          if (best == labels[static_cast<size_t>(i)]) ++hits;
        }
      }
    } catch (const NumericsError&) {
      result.diverged = true;
      break;
    }

    MetricsRecord rec = eval_videos.empty()
                            ? MetricsRecord{}
                            : evaluate_dataset(model, eval_videos, sampler, cfg.batch_size);
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = n > 0 ? loss_sum / static_cast<double>(n) : 0.0;
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    (void)hits;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace stsep
