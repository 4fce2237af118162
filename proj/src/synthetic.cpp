#include "oatr/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "oatr/errors.hpp"
#include "oatr/rng.hpp"

namespace oatr {

namespace {

constexpr std::array<const char*, 24> kNouns = {
    "apple", "ball", "bell", "boat", "bird", "book", "cake", "car",  "cup",  "drum", "fish", "flag",
    "hat",   "key",  "kite", "lamp", "leaf", "moon", "pear", "ring", "shoe", "star", "tree", "vase"};

enum class Shape { square, disc, triangle, diamond, cross, ring };
constexpr int kNumShapes = 6;

// Every colour has a channel at 0 or 255; backgrounds stay within [40, 215].
constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette = {{{255, 0, 0},
                                                                  {0, 160, 255},
                                                                  {255, 220, 0},
                                                                  {0, 200, 80},
                                                                  {255, 0, 200},
                                                                  {0, 0, 0},
                                                                  {255, 255, 255},
                                                                  {140, 0, 255}}};
constexpr int kBackgroundLo = 40;
constexpr int kBackgroundHi = 215;

constexpr std::array<const char*, 5> kOpeners = {"a video of", "we see", "there is", "footage showing",
                                                 "look at"};
constexpr std::array<const char*, 4> kVerbs = {"moving", "drifting", "sliding", "going"};
constexpr std::array<const char*, 4> kDirections = {"left", "right", "up", "down"};

Shape shape_of(int class_id) { return static_cast<Shape>(class_id % kNumShapes); }
int color_of(int class_id) { return class_id % static_cast<int>(kPalette.size()); }

bool glyph_covers(Shape shape, int size, int u, int v) {
  const double c = 0.5 * (size - 1);
  const double du = u - c, dv = v - c;
  const double r = 0.5 * size;
  switch (shape) {
    case Shape::square: return true;
    case Shape::disc: return du * du + dv * dv <= r * r;
    case Shape::triangle: return std::abs(du) <= 0.5 * (v + 1);
    case Shape::diamond: return std::abs(du) + std::abs(dv) <= r;
    case Shape::cross: return std::abs(du) <= size / 6.0 || std::abs(dv) <= size / 6.0;
    case Shape::ring: {
      const double d2 = du * du + dv * dv;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
  }
  return false;
}

struct Glyph {
  int class_id;
  int size;
  double x0, y0;  // top-left at frame 0, pixels
};

Image render_background(Rng& rng, int n) {
  std::array<double, 3> base;
  for (auto& b : base) b = 80 + 90 * rng.uniform();
  struct Grating {
    double kx, ky, phase, amp[3];
  };
  std::vector<Grating> gratings(2);
  for (auto& g : gratings) {
    const double angle = rng.uniform() * std::numbers::pi;
    const double freq = (1.0 + 3.0 * rng.uniform()) * 2.0 * std::numbers::pi / n;
    g.kx = std::cos(angle) * freq;
    g.ky = std::sin(angle) * freq;
    g.phase = rng.uniform() * 2.0 * std::numbers::pi;
    for (double& a : g.amp) a = 25.0 * (2.0 * rng.uniform() - 1.0);
  }
  struct Blob {
    double cx, cy, sigma, amp[3];
  };
  std::vector<Blob> blobs(3);
  for (auto& b : blobs) {
    b.cx = rng.uniform() * n;
    b.cy = rng.uniform() * n;
    b.sigma = n * (0.12 + 0.13 * rng.uniform());
    for (double& a : b.amp) a = 40.0 * (2.0 * rng.uniform() - 1.0);
  }
  Image img(n, n, 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = base[static_cast<std::size_t>(c)];
        for (const auto& g : gratings) v += g.amp[c] * std::sin(g.kx * x + g.ky * y + g.phase);
        for (const auto& b : blobs) {
          const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
          v += b.amp[c] * std::exp(-d2 / (2 * b.sigma * b.sigma));
        }
        img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp<int>(static_cast<int>(std::lround(v)), kBackgroundLo, kBackgroundHi));
      }
    }
  }
  return img;
}

std::string noun_phrase(const std::string& noun) {
  const bool vowel = std::string("aeiou").find(noun.front()) != std::string::npos;
  return (vowel ? "an " : "a ") + noun;
}

VideoSample generate_one(const SynthConfig& cfg, int index, Rng& rng) {
  const int n = cfg.image_size;
  VideoSample s;
  char id[32];
  std::snprintf(id, sizeof(id), "synth_%06d", index);
  s.video_id = id;

  const int want = cfg.min_objects +
                   static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  const int direction = static_cast<int>(rng.uniform_int(4));
  const int max_shift = std::max(1, n / 4);
  const int min_shift = std::max(1, n / 8);
  const int shift = min_shift + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_shift - min_shift + 1)));
  const int dx = direction == 0 ? -1 : direction == 1 ? 1 : 0;
  const int dy = direction == 2 ? -1 : direction == 3 ? 1 : 0;

  std::vector<int> classes(static_cast<std::size_t>(cfg.num_object_classes));
  for (int c = 0; c < cfg.num_object_classes; ++c) classes[static_cast<std::size_t>(c)] = c;
  rng.shuffle(std::span<int>(classes));

  std::vector<Glyph> glyphs;
  std::vector<int> used_colors;
  const int min_size = std::max(3, n / 6);
  const int max_size = std::max(min_size, n / 3);
  for (int c : classes) {
    if (static_cast<int>(glyphs.size()) == want) break;
    if (std::find(used_colors.begin(), used_colors.end(), color_of(c)) != used_colors.end()) continue;
    const int size = min_size + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_size - min_size + 1)));
    // Start region keeping the glyph inside the frame over the whole motion.
    const int xlo = dx < 0 ? shift : 0, xhi = n - size - (dx > 0 ? shift : 0);
    const int ylo = dy < 0 ? shift : 0, yhi = n - size - (dy > 0 ? shift : 0);
    if (xhi < xlo || yhi < ylo) continue;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double x0 = xlo + static_cast<double>(rng.uniform_int(static_cast<std::uint64_t>(xhi - xlo + 1)));
      const double y0 = ylo + static_cast<double>(rng.uniform_int(static_cast<std::uint64_t>(yhi - ylo + 1)));
      // All glyphs share one velocity, so disjoint at frame 0 means disjoint throughout.
      const bool clear = std::none_of(glyphs.begin(), glyphs.end(), [&](const Glyph& g) {
        return x0 < g.x0 + g.size + 1 && g.x0 < x0 + size + 1 && y0 < g.y0 + g.size + 1 &&
               g.y0 < y0 + size + 1;
      });
      if (clear) {
        glyphs.push_back({c, size, x0, y0});
        used_colors.push_back(color_of(c));
        break;
      }
    }
  }
  if (glyphs.empty()) {
    // Frame too crowded or too small for the requested sizes: one centred glyph.
    const int size = std::min(min_size, n);
    glyphs.push_back({classes.front(), size, 0.5 * (n - size), 0.5 * (n - size)});
  }

  const Image background = render_background(rng, n);
  for (int f = 0; f < cfg.num_frames; ++f) {
    Image frame = background;
    for (auto& p : frame.pixels) {
      const int noise = static_cast<int>(rng.uniform_int(13)) - 6;
      p = static_cast<std::uint8_t>(std::clamp(p + noise, kBackgroundLo, kBackgroundHi));
    }
    const double t = cfg.num_frames > 1 ? static_cast<double>(f) / (cfg.num_frames - 1) : 0.0;
    for (const auto& g : glyphs) {
      const int gx = static_cast<int>(std::lround(g.x0 + dx * shift * t));
      const int gy = static_cast<int>(std::lround(g.y0 + dy * shift * t));
      const auto color = kPalette[static_cast<std::size_t>(color_of(g.class_id))];
      const Shape shape = shape_of(g.class_id);
      int minx = n, miny = n, maxx = -1, maxy = -1;
      for (int v = 0; v < g.size; ++v) {
        for (int u = 0; u < g.size; ++u) {
          if (!glyph_covers(shape, g.size, u, v)) continue;
          const int x = gx + u, y = gy + v;
          if (x < 0 || y < 0 || x >= n || y >= n) continue;
          for (int c = 0; c < 3; ++c) frame.at(y, x, c) = color[static_cast<std::size_t>(c)];
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
        }
      }
      if (maxx < 0) continue;
      ObjectAnnotation a;
      a.frame_index = f;
      a.box = Box{static_cast<double>(minx) / n, static_cast<double>(miny) / n,
                  static_cast<double>(maxx + 1) / n, static_cast<double>(maxy + 1) / n};
      a.tag_id = g.class_id;
      a.score = 0.6 + 0.4 * rng.uniform();
      s.objects.push_back(a);
    }
    s.frames.push_back(std::move(frame));
    char ref[64];
    std::snprintf(ref, sizeof(ref), "frames/%s_%d.ppm", id, f);
    s.frame_refs.push_back(ref);
  }

  std::vector<std::string> phrases;
  for (const auto& g : glyphs) phrases.push_back(noun_phrase(kNouns[static_cast<std::size_t>(g.class_id)]));
  rng.shuffle(std::span<std::string>(phrases));
  std::string caption = kOpeners[rng.uniform_int(kOpeners.size())];
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    if (i == 0) {
      caption += " ";
    } else if (i + 1 == phrases.size()) {
      caption += " and ";
    } else {
      caption += ", ";
    }
    caption += phrases[i];
  }
  caption += std::string(" ") + kVerbs[rng.uniform_int(kVerbs.size())] + " " +
             kDirections[static_cast<std::size_t>(direction)];
  s.captions.push_back(caption);
  return s;
}

}  // namespace

void SynthConfig::validate() const {
  if (num_samples < 0) throw ConfigError("synthetic: num_samples must be >= 0");
  if (num_object_classes < 1 || static_cast<std::size_t>(num_object_classes) > synthetic_class_limit()) {
    throw ConfigError("synthetic: num_object_classes must be in [1, " +
                      std::to_string(synthetic_class_limit()) + "]");
  }
  if (image_size < 8) throw ConfigError("synthetic: image_size must be >= 8");
  if (num_frames < 1) throw ConfigError("synthetic: num_frames must be >= 1");
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("synthetic: need 1 <= min_objects <= max_objects");
  }
}

std::size_t synthetic_class_limit() { return kNouns.size(); }

std::array<std::uint8_t, 3> synthetic_class_color(int class_id) {
  return kPalette[static_cast<std::size_t>(color_of(class_id))];
}

Split split_of(const std::string& video_id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : video_id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  const auto bucket = h % 10;
  if (bucket < 8) return Split::train;
  return bucket == 8 ? Split::val : Split::test;
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<VideoSample> SyntheticCorpus::split(Split which) const {
  std::vector<VideoSample> out;
  for (const auto& s : samples) {
    if (split_of(s.video_id) == which) out.push_back(s);
  }
  return out;
}

SyntheticCorpus generate_synthetic_corpus(const SynthConfig& config) {
  config.validate();
  SyntheticCorpus corpus;
  std::vector<std::string> names;
  for (int c = 0; c < config.num_object_classes; ++c) names.emplace_back(kNouns[static_cast<std::size_t>(c)]);
  corpus.tags = TagVocabulary(names);
  std::vector<std::string> texts = names;
  for (auto* w : kOpeners) texts.emplace_back(w);
  for (auto* w : kVerbs) texts.emplace_back(w);
  for (auto* w : kDirections) texts.emplace_back(w);
  texts.emplace_back("a an and");
  corpus.vocab = Vocabulary::build(texts);
  for (int i = 0; i < config.num_samples; ++i) {
    Rng rng(Rng::derive(config.seed, {static_cast<std::uint64_t>(i)}));
    corpus.samples.push_back(generate_one(config, i, rng));
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& corpus) {
  std::filesystem::create_directories(dir / "frames");
  for (const auto& s : corpus.samples) {
    for (std::size_t f = 0; f < s.frames.size(); ++f) write_ppm(dir / s.frame_refs[f], s.frames[f]);
  }
  for (Split split : {Split::train, Split::val, Split::test}) {
    const auto part = corpus.split(split);
    write_manifest(dir / (std::string(to_string(split)) + ".jsonl"), part, corpus.tags,
                   FrameStorage::references);
  }
  corpus.tags.save(dir / "tags.txt");
  corpus.vocab.save(dir / "vocab.txt");
}

}  // namespace oatr
