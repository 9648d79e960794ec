#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stsep/common.hpp"
#include "stsep/model.hpp"

namespace stsep {

// Frames stored as raw u8 RGB planes, C-major then row-major.
struct VideoRecord {
  int64_t id = 0;
  int label = 0;
  int64_t h = 0, w = 0;
  std::vector<std::vector<uint8_t>> frames;  // each 3*h*w bytes
  std::string source;

  int64_t length() const { return static_cast<int64_t>(frames.size()); }
  void validate() const {
    if (frames.empty()) throw UsageError("VideoRecord: needs at least one frame");
    for (const auto& f : frames)
      if (static_cast<int64_t>(f.size()) != 3 * h * w)
        throw UsageError("VideoRecord: frame byte size mismatch");
  }
};

enum class SamplerKind { dense, tsn };
enum class Phase { train, eval };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::tsn;
  int64_t T = 8;
  int64_t stride = 2;  // dense only
  Phase mode = Phase::train;

  void validate() const {
    if (T < 1) throw ConfigError("SamplerSpec: T must be >= 1");
    if (kind == SamplerKind::dense && stride < 1)
      throw ConfigError("SamplerSpec: dense stride must be >= 1");
  }
};

enum class TaskKind { direction4, playback2, shape_static };

struct SyntheticTask {
  TaskKind kind = TaskKind::direction4;
  int64_t resolution = 32;
  int64_t T = 8;
  double noise_sigma = 0.05;
  uint64_t seed = 0;

  int num_classes() const { return kind == TaskKind::playback2 ? 2 : 4; }
};

std::vector<VideoRecord> generate(const SyntheticTask& task, int64_t count);

// direction4 geometry, shared with tests: bar position at frame t is
// clamp(start + sign * velocity * t, 0, res - thickness)
inline int64_t direction4_velocity(int64_t res) { return std::max<int64_t>(2, res / 16); }
inline int64_t direction4_thickness(int64_t res) { return std::max<int64_t>(2, res / 10); }

// bit-exact STV1 container
void write_container(const std::string& path, const std::vector<VideoRecord>& records);
std::vector<VideoRecord> read_container(const std::string& path);

// frame indices chosen by the sampling strategy (0-based, clamped)
std::vector<int64_t> sample_indices(int64_t video_len, const SamplerSpec& spec, Rng& rng);
// same, with an explicit dense start (multi-clip inference)
std::vector<int64_t> dense_indices(int64_t video_len, int64_t start, int64_t t, int64_t stride);

// float clip [T,3,H,W], normalized to (x/255 - 0.5) / 0.5 at load
struct ClipF {
  int64_t t = 0, h = 0, w = 0;
  std::vector<float> data;  // t * 3 * h * w

  float* frame(int64_t ti) { return data.data() + ti * 3 * h * w; }
  const float* frame(int64_t ti) const { return data.data() + ti * 3 * h * w; }
};

ClipF decode_frames(const VideoRecord& video, const std::vector<int64_t>& indices);

// resize shorter side to round(1.2*target) (bilinear), crop target^2, flip
// with probability hflip_prob (train only); one offset/flip for all frames
ClipF augment(const ClipF& clip, int64_t target, Phase mode, double hflip_prob, Rng& rng);

// mirror every frame left-right
ClipF hflip_clip(const ClipF& clip);

TimeTensor to_time_tensor(const ClipF& clip);

inline TimeTensor sample_clip(const VideoRecord& video, const SamplerSpec& spec, Rng& rng) {
  return to_time_tensor(decode_frames(video, sample_indices(video.length(), spec, rng)));
}

}  // namespace stsep
