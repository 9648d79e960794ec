#include "stsep/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace stsep {

namespace {

uint8_t clamp_byte(double v) {
  return static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
}

void fill_noise(std::vector<uint8_t>& frame, double base, double sigma, Rng& rng) {
  const double s = sigma * 255.0;
  for (auto& b : frame) b = clamp_byte(base + (sigma > 0 ? s * rng.normal() : 0.0));
}

// vertical or horizontal bar, drawn into all three planes
void draw_bar(std::vector<uint8_t>& frame, int64_t h, int64_t w, bool vertical, int64_t pos,
              int64_t thickness, uint8_t value) {
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t along = vertical ? x : y;
        if (along >= pos && along < pos + thickness)
          frame[static_cast<size_t>((c * h + y) * w + x)] = value;
      }
}

void draw_disc(std::vector<uint8_t>& frame, int64_t h, int64_t w, double cx, double cy, double rad,
               uint8_t value) {
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        if (dx * dx + dy * dy <= rad * rad)
          frame[static_cast<size_t>((c * h + y) * w + x)] = value;
      }
}

void draw_square(std::vector<uint8_t>& frame, int64_t h, int64_t w, int64_t cx, int64_t cy,
                 int64_t half, uint8_t value) {
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = std::max<int64_t>(0, cy - half); y <= std::min(h - 1, cy + half); ++y)
      for (int64_t x = std::max<int64_t>(0, cx - half); x <= std::min(w - 1, cx + half); ++x)
        frame[static_cast<size_t>((c * h + y) * w + x)] = value;
}

void draw_cross(std::vector<uint8_t>& frame, int64_t h, int64_t w, int64_t cx, int64_t cy,
                int64_t half, uint8_t value) {
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t x = std::max<int64_t>(0, cx - half); x <= std::min(w - 1, cx + half); ++x)
      for (int64_t y = cy - 1; y <= cy + 1; ++y)
        if (y >= 0 && y < h) frame[static_cast<size_t>((c * h + y) * w + x)] = value;
    for (int64_t y = std::max<int64_t>(0, cy - half); y <= std::min(h - 1, cy + half); ++y)
      for (int64_t x = cx - 1; x <= cx + 1; ++x)
        if (x >= 0 && x < w) frame[static_cast<size_t>((c * h + y) * w + x)] = value;
  }
}

void draw_ring(std::vector<uint8_t>& frame, int64_t h, int64_t w, double cx, double cy, double rad,
               uint8_t value) {
  const double inner = rad * 0.6;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= rad * rad && d2 >= inner * inner)
          frame[static_cast<size_t>((c * h + y) * w + x)] = value;
      }
}

constexpr double kBg = 32.0;
constexpr uint8_t kFg = 224;

VideoRecord direction4_video(const SyntheticTask& task, int64_t index) {
  Rng rng(mix_seed(task.seed, static_cast<uint64_t>(index)));
  const int64_t res = task.resolution;
  const int label = static_cast<int>(index % 4);  // 0:left 1:right 2:up 3:down
  const int64_t thickness = direction4_thickness(res);
  const int64_t v = direction4_velocity(res);
  const bool vertical = label < 2;                        // vertical bar moves along x
  const int64_t sign = (label == 1 || label == 3) ? 1 : -1;
  const int64_t start = rng.uniform_int(0, res - thickness);

  VideoRecord rec;
  rec.id = index;
  rec.label = label;
  rec.h = res;
  rec.w = res;
  rec.source = "direction4:" + std::to_string(task.seed) + ":" + std::to_string(index);
  for (int64_t t = 0; t < task.T; ++t) {
    std::vector<uint8_t> frame(static_cast<size_t>(3 * res * res));
    fill_noise(frame, kBg, task.noise_sigma, rng);
    const int64_t pos = std::clamp<int64_t>(start + sign * v * t, 0, res - thickness);
    draw_bar(frame, res, res, vertical, pos, thickness, kFg);
    rec.frames.push_back(std::move(frame));
  }
  return rec;
}

// one base sequence (growing disc) produces a (forward, reversed) pair
std::vector<std::vector<uint8_t>> playback2_base(const SyntheticTask& task, int64_t pair_index) {
  Rng rng(mix_seed(task.seed, static_cast<uint64_t>(pair_index), 0x70626b32ull));
  const int64_t res = task.resolution;
  const double cx = rng.uniform(res * 0.3, res * 0.7);
  const double cy = rng.uniform(res * 0.3, res * 0.7);
  const double r0 = res * 0.10, r1 = res * 0.32;
  std::vector<std::vector<uint8_t>> seq;
  for (int64_t t = 0; t < task.T; ++t) {
    std::vector<uint8_t> frame(static_cast<size_t>(3 * res * res));
    fill_noise(frame, kBg, task.noise_sigma, rng);
    const double rad = r0 + (r1 - r0) * (task.T > 1 ? static_cast<double>(t) / (task.T - 1) : 0.0);
    draw_disc(frame, res, res, cx, cy, rad, kFg);
    seq.push_back(std::move(frame));
  }
  return seq;
}

VideoRecord shape_static_video(const SyntheticTask& task, int64_t index) {
  Rng rng(mix_seed(task.seed, static_cast<uint64_t>(index), 0x73686170ull));
  const int64_t res = task.resolution;
  const int label = static_cast<int>(index % 4);  // disc, square, cross, ring
  const int64_t cx = rng.uniform_int(res / 4, 3 * res / 4);
  const int64_t cy = rng.uniform_int(res / 4, 3 * res / 4);
  const int64_t half = std::max<int64_t>(3, res / 6);
  VideoRecord rec;
  rec.id = index;
  rec.label = label;
  rec.h = res;
  rec.w = res;
  rec.source = "shape_static:" + std::to_string(task.seed) + ":" + std::to_string(index);
  for (int64_t t = 0; t < task.T; ++t) {
    std::vector<uint8_t> frame(static_cast<size_t>(3 * res * res));
    fill_noise(frame, kBg, task.noise_sigma, rng);
    switch (label) {
      case 0: draw_disc(frame, res, res, static_cast<double>(cx), static_cast<double>(cy), static_cast<double>(half), kFg); break;
      case 1: draw_square(frame, res, res, cx, cy, half, kFg); break;
      case 2: draw_cross(frame, res, res, cx, cy, half, kFg); break;
      default: draw_ring(frame, res, res, static_cast<double>(cx), static_cast<double>(cy), static_cast<double>(half), kFg); break;
    }
    rec.frames.push_back(std::move(frame));
  }
  return rec;
}

template <class T>
void write_le(std::ofstream& os, T v) {
  uint8_t buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<uint8_t>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::ifstream& is, int64_t& offset, const char* what) {
  uint8_t buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T)))
    throw FormatError("STV1: truncated " + std::string(what) + " at byte offset " +
                      std::to_string(offset));
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  offset += static_cast<int64_t>(sizeof(T));
  return v;
}

}  // namespace

std::vector<VideoRecord> generate(const SyntheticTask& task, int64_t count) {
  if (count < 1) throw ConfigError("generate: count must be >= 1");
  if (task.resolution < 8) throw ConfigError("generate: resolution must be >= 8");
  if (task.T < 1) throw ConfigError("generate: T must be >= 1");
  std::vector<VideoRecord> out;
  out.reserve(static_cast<size_t>(count));
  if (task.kind == TaskKind::playback2) {
    for (int64_t i = 0; i < count; i += 2) {
      auto base = playback2_base(task, i / 2);
      VideoRecord fwd;
      fwd.id = i;
      fwd.label = 0;
      fwd.h = task.resolution;
      fwd.w = task.resolution;
      fwd.source = "playback2:" + std::to_string(task.seed) + ":" + std::to_string(i / 2) + ":fwd";
      fwd.frames = base;
      out.push_back(std::move(fwd));
      if (i + 1 < count) {
        VideoRecord rev;
        rev.id = i + 1;
        rev.label = 1;
        rev.h = task.resolution;
        rev.w = task.resolution;
        rev.source = "playback2:" + std::to_string(task.seed) + ":" + std::to_string(i / 2) + ":rev";
        rev.frames.assign(base.rbegin(), base.rend());
        out.push_back(std::move(rev));
      }
    }
  } else {
    for (int64_t i = 0; i < count; ++i)
      out.push_back(task.kind == TaskKind::direction4 ? direction4_video(task, i)
                                                      : shape_static_video(task, i));
  }
  return out;
}

void write_container(const std::string& path, const std::vector<VideoRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_container: cannot open " + path);
  os.write("STV1", 4);
  write_le<uint32_t>(os, static_cast<uint32_t>(records.size()));
  for (const auto& rec : records) {
    rec.validate();
    if (rec.h > 0xffff || rec.w > 0xffff || rec.length() > 0xffff)
      throw FormatError("write_container: dimension overflow for record id " +
                        std::to_string(rec.id));
    write_le<uint32_t>(os, static_cast<uint32_t>(rec.label));
    write_le<uint16_t>(os, static_cast<uint16_t>(rec.h));
    write_le<uint16_t>(os, static_cast<uint16_t>(rec.w));
    write_le<uint16_t>(os, static_cast<uint16_t>(rec.length()));
    for (const auto& f : rec.frames)
      os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size()));
  }
  if (!os) throw IoError("write_container: write failed for " + path);
}

std::vector<VideoRecord> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_container: cannot open " + path);
  int64_t offset = 0;
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "STV1", 4) != 0)
    throw FormatError("STV1: bad magic at byte offset 0");
  offset = 4;
  const uint32_t count = read_le<uint32_t>(is, offset, "record count");
  std::vector<VideoRecord> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    VideoRecord rec;
    rec.id = i;
    rec.source = path;
    rec.label = static_cast<int>(read_le<uint32_t>(is, offset, "label"));
    rec.h = read_le<uint16_t>(is, offset, "height");
    rec.w = read_le<uint16_t>(is, offset, "width");
    const uint16_t nf = read_le<uint16_t>(is, offset, "frame count");
    if (nf == 0) throw FormatError("STV1: zero frames at byte offset " + std::to_string(offset));
    for (uint16_t f = 0; f < nf; ++f) {
      std::vector<uint8_t> frame(static_cast<size_t>(3 * rec.h * rec.w));
      is.read(reinterpret_cast<char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
      if (is.gcount() != static_cast<std::streamsize>(frame.size()))
        throw FormatError("STV1: truncated frame at byte offset " + std::to_string(offset));
      offset += static_cast<int64_t>(frame.size());
      rec.frames.push_back(std::move(frame));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<int64_t> dense_indices(int64_t video_len, int64_t start, int64_t t, int64_t stride) {
  std::vector<int64_t> idx(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) idx[static_cast<size_t>(i)] = std::min(video_len - 1, start + i * stride);
  return idx;
}

std::vector<int64_t> sample_indices(int64_t video_len, const SamplerSpec& spec, Rng& rng) {
  spec.validate();
  if (video_len < 1) throw UsageError("sample_indices: empty video");
  std::vector<int64_t> idx(static_cast<size_t>(spec.T));
  if (spec.kind == SamplerKind::dense) {
    const int64_t span = (spec.T - 1) * spec.stride;
    const int64_t max_start = std::max<int64_t>(0, video_len - 1 - span);
    const int64_t start =
        spec.mode == Phase::train ? rng.uniform_int(0, max_start) : max_start / 2;
    return dense_indices(video_len, start, spec.T, spec.stride);
  }
  for (int64_t i = 0; i < spec.T; ++i) {
    if (spec.mode == Phase::train) {
      const int64_t lo = i * video_len / spec.T;
      const int64_t hi = std::max(lo + 1, (i + 1) * video_len / spec.T);
      idx[static_cast<size_t>(i)] = std::min(video_len - 1, rng.uniform_int(lo, hi - 1));
    } else {
      const int64_t center = i * video_len / spec.T + video_len / (2 * spec.T);
      idx[static_cast<size_t>(i)] = std::min(video_len - 1, center);
    }
  }
  return idx;
}

ClipF decode_frames(const VideoRecord& video, const std::vector<int64_t>& indices) {
  video.validate();
  ClipF clip;
  clip.t = static_cast<int64_t>(indices.size());
  clip.h = video.h;
  clip.w = video.w;
  clip.data.resize(static_cast<size_t>(clip.t * 3 * clip.h * clip.w));
  for (int64_t ti = 0; ti < clip.t; ++ti) {
    const int64_t src = indices[static_cast<size_t>(ti)];
    if (src < 0 || src >= video.length()) throw UsageError("decode_frames: index out of range");
    const auto& f = video.frames[static_cast<size_t>(src)];
    float* dst = clip.frame(ti);
    for (size_t i = 0; i < f.size(); ++i)
      dst[i] = static_cast<float>(f[i]) / 127.5f - 1.0f;  // (x/255 - 0.5) / 0.5
  }
  return clip;
}

namespace {

// bilinear, half-pixel centers
void resize_frame(const float* src, int64_t h, int64_t w, float* dst, int64_t oh, int64_t ow) {
  const double sy = static_cast<double>(h) / static_cast<double>(oh);
  const double sx = static_cast<double>(w) / static_cast<double>(ow);
  for (int64_t c = 0; c < 3; ++c) {
    const float* sp = src + c * h * w;
    float* dp = dst + c * oh * ow;
    for (int64_t y = 0; y < oh; ++y) {
      double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
      fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
      const int64_t y0 = static_cast<int64_t>(fy);
      const int64_t y1 = std::min(h - 1, y0 + 1);
      const double wy = fy - static_cast<double>(y0);
      for (int64_t x = 0; x < ow; ++x) {
        double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
        fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
        const int64_t x0 = static_cast<int64_t>(fx);
        const int64_t x1 = std::min(w - 1, x0 + 1);
        const double wx = fx - static_cast<double>(x0);
        const double v = (1 - wy) * ((1 - wx) * sp[y0 * w + x0] + wx * sp[y0 * w + x1]) +
                         wy * ((1 - wx) * sp[y1 * w + x0] + wx * sp[y1 * w + x1]);
        dp[y * ow + x] = static_cast<float>(v);
      }
    }
  }
}

}  // namespace

ClipF augment(const ClipF& clip, int64_t target, Phase mode, double hflip_prob, Rng& rng) {
  const int64_t scaled = std::llround(1.2 * static_cast<double>(target));
  const double ratio = static_cast<double>(scaled) / static_cast<double>(std::min(clip.h, clip.w));
  const int64_t rh = std::llround(static_cast<double>(clip.h) * ratio);
  const int64_t rw = std::llround(static_cast<double>(clip.w) * ratio);
  if (rh < target || rw < target) throw UsageError("augment: resized frame smaller than crop");

  int64_t ox, oy;
  bool flip = false;
  if (mode == Phase::train) {
    ox = rng.uniform_int(0, rw - target);
    oy = rng.uniform_int(0, rh - target);
    flip = rng.uniform() < hflip_prob;
  } else {
    ox = (rw - target) / 2;
    oy = (rh - target) / 2;
  }

  ClipF out;
  out.t = clip.t;
  out.h = target;
  out.w = target;
  out.data.resize(static_cast<size_t>(clip.t * 3 * target * target));
  std::vector<float> resized(static_cast<size_t>(3 * rh * rw));
  for (int64_t ti = 0; ti < clip.t; ++ti) {
    resize_frame(clip.frame(ti), clip.h, clip.w, resized.data(), rh, rw);
    float* dst = out.frame(ti);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < target; ++y)
        for (int64_t x = 0; x < target; ++x) {
          const int64_t sx = flip ? (ox + target - 1 - x) : (ox + x);
          dst[(c * target + y) * target + x] = resized[(c * rh + oy + y) * rw + sx];
        }
  }
  return out;
}

ClipF hflip_clip(const ClipF& clip) {
  ClipF out = clip;
  for (int64_t ti = 0; ti < clip.t; ++ti) {
    const float* src = clip.frame(ti);
    float* dst = out.frame(ti);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < clip.h; ++y)
        for (int64_t x = 0; x < clip.w; ++x)
          dst[(c * clip.h + y) * clip.w + x] = src[(c * clip.h + y) * clip.w + (clip.w - 1 - x)];
  }
  return out;
}

TimeTensor to_time_tensor(const ClipF& clip) {
  TimeTensor out;
  const int64_t per = 3 * clip.h * clip.w;
  for (int64_t ti = 0; ti < clip.t; ++ti) {
    Tensor step(Shape{1, 3, clip.h, clip.w});
    std::copy(clip.frame(ti), clip.frame(ti) + per, step.data());
    out.steps.push_back(step);
  }
  return out;
}

}  // namespace stsep
