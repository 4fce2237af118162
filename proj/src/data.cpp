#include "oatr/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "oatr/errors.hpp"

namespace oatr {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (auto name : tokens::kReservedNames) add(std::string(name));
}

void Vocabulary::add(const std::string& w) {
  if (index_.count(w)) return;
  index_.emplace(w, static_cast<TokenId>(words_.size()));
  words_.push_back(w);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> distinct;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) distinct.insert(std::move(w));
  }
  Vocabulary v;
  for (const auto& w : distinct) v.add(w);
  return v;
}

Vocabulary Vocabulary::from_words(std::span<const std::string> words) {
  Vocabulary v;
  for (std::size_t i = 0; i < tokens::kReservedNames.size(); ++i) {
    if (i >= words.size() || words[i] != tokens::kReservedNames[i]) {
      throw ParseError("vocabulary: line " + std::to_string(i + 1) + " must be " +
                       std::string(tokens::kReservedNames[i]));
    }
  }
  for (std::size_t i = tokens::kReservedNames.size(); i < words.size(); ++i) {
    if (v.contains(words[i])) {
      throw ParseError("vocabulary: duplicate word '" + words[i] + "', line " + std::to_string(i + 1));
    }
    v.add(words[i]);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  return from_words(words);
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& w : words_) os << w << '\n';
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? tokens::kUnk : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------
// Tag vocabulary

TagVocabulary::TagVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() > kMaxTags) {
    throw ConfigError("tag vocabulary has " + std::to_string(names_.size()) + " entries; limit is " +
                      std::to_string(kMaxTags));
  }
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!index_.emplace(names_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate tag '" + names_[i] + "'");
    }
  }
}

TagVocabulary TagVocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open tag vocabulary " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    names.push_back(line);
  }
  return TagVocabulary(std::move(names));
}

void TagVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& n : names_) os << n << '\n';
}

std::optional<int> TagVocabulary::id(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto ch = static_cast<unsigned char>(text[i]);
    if (ch == '[') {
      const auto close = text.find(']', i);
      if (close != std::string_view::npos) {
        std::string name(text.substr(i, close - i + 1));
        std::transform(name.begin(), name.end(), name.begin(),
                       [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
        if (std::find(tokens::kReservedNames.begin(), tokens::kReservedNames.end(), name) !=
            tokens::kReservedNames.end()) {
          flush();
          words.push_back(name);
          i = close;
          continue;
        }
      }
    }
    if (std::isalnum(ch) || ch >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      flush();
    }
  }
  flush();
  return words;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenId> ids{tokens::kCls};
  for (const auto& w : split_words(text)) {
    if (ids.size() >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  ids.resize(max_len, tokens::kPad);
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == tokens::kPad || id == tokens::kCls) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(id);
  }
  return out;
}

std::vector<std::vector<TokenId>> tag_token_ids(const TagVocabulary& tags, const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(tags.size());
  for (const auto& name : tags.names()) {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(name)) ids.push_back(vocab.id(w));
    if (ids.empty()) ids.push_back(tokens::kUnk);
    out.push_back(std::move(ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Samples and manifests

std::vector<int> VideoSample::annotated_frames() const {
  std::vector<int> out;
  for (const auto& o : objects) out.push_back(o.frame_index);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<ObjectAnnotation> VideoSample::objects_on(int frame_index) const {
  std::vector<ObjectAnnotation> out;
  for (const auto& o : objects) {
    if (o.frame_index == frame_index) out.push_back(o);
  }
  return out;
}

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

[[noreturn]] void fail(std::size_t line, const std::string& field, const std::string& msg) {
  throw ParseError("field '" + field + "': " + msg + ", line " + std::to_string(line));
}

const json& require(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(line, key, "missing");
  return *it;
}

Image decode_inline_frame(const json& j, std::size_t line, const std::string& field) {
  if (!j.contains("shape") || !j.contains("data")) fail(line, field, "inline frame needs shape and data");
  const auto& shape = j["shape"];
  if (!shape.is_array() || shape.size() != 3) fail(line, field + ".shape", "expected [H, W, C]");
  for (const auto& e : shape) {
    if (!e.is_number_integer() || e.get<long long>() <= 0) fail(line, field + ".shape", "extents must be positive integers");
  }
  Image img(shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>());
  if (!j["data"].is_string()) fail(line, field + ".data", "expected base64 string");
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(j["data"].get<std::string>());
  } catch (const ParseError& e) {
    fail(line, field + ".data", e.what());
  }
  if (bytes.size() != img.pixels.size()) fail(line, field + ".data", "pixel count does not match shape");
  img.pixels = std::move(bytes);
  return img;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw ParseError("base64 length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(c);
        if (v[k] < 0 || pad) throw ParseError("invalid base64 character");
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
  }
  return out;
}

std::vector<VideoSample> load_manifest(const std::filesystem::path& path, const TagVocabulary& tags) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<VideoSample> samples;
  std::string text;
  std::size_t line = 0;
  while (std::getline(is, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON (") + e.what() + "), line " + std::to_string(line));
    }
    if (!j.is_object()) fail(line, "<root>", "expected an object");

    VideoSample s;
    const auto& id = require(j, "video_id", line);
    if (!id.is_string() || id.get<std::string>().empty()) fail(line, "video_id", "expected non-empty string");
    s.video_id = id.get<std::string>();

    const auto& frames = require(j, "frames", line);
    if (!frames.is_array()) fail(line, "frames", "expected array");
    for (std::size_t f = 0; f < frames.size(); ++f) {
      const std::string field = "frames[" + std::to_string(f) + "]";
      if (frames[f].is_string()) {
        const std::string ref = frames[f].get<std::string>();
        std::filesystem::path p(ref);
        if (p.is_relative()) p = base / p;
        try {
          s.frames.push_back(read_ppm(p));
        } catch (const std::exception& e) {
          fail(line, field, e.what());
        }
        s.frame_refs.push_back(ref);
      } else if (frames[f].is_object()) {
        s.frames.push_back(decode_inline_frame(frames[f], line, field));
      } else {
        fail(line, field, "expected path string or inline frame object");
      }
    }
    if (!s.frame_refs.empty() && s.frame_refs.size() != s.frames.size()) {
      fail(line, "frames", "mixing paths and inline frames is not supported");
    }

    const auto& caps = require(j, "captions", line);
    if (!caps.is_array() || caps.empty()) fail(line, "captions", "expected non-empty array");
    for (std::size_t c = 0; c < caps.size(); ++c) {
      if (!caps[c].is_string()) fail(line, "captions[" + std::to_string(c) + "]", "expected string");
      s.captions.push_back(caps[c].get<std::string>());
    }

    if (j.contains("objects")) {
      const auto& objs = j["objects"];
      if (!objs.is_array()) fail(line, "objects", "expected array");
      for (std::size_t k = 0; k < objs.size(); ++k) {
        const std::string field = "objects[" + std::to_string(k) + "]";
        const auto& o = objs[k];
        if (!o.is_object()) fail(line, field, "expected object");
        ObjectAnnotation a;
        const auto& fi = require(o, "frame_index", line);
        if (!fi.is_number_integer()) fail(line, field + ".frame_index", "expected integer");
        a.frame_index = fi.get<int>();
        if (a.frame_index < 0 || static_cast<std::size_t>(a.frame_index) >= s.frames.size()) {
          fail(line, field + ".frame_index", "frame index out of range");
        }
        const auto& box = require(o, "box", line);
        if (!box.is_array() || box.size() != 4 ||
            !std::all_of(box.begin(), box.end(), [](const json& v) { return v.is_number(); })) {
          fail(line, field + ".box", "expected [x1, y1, x2, y2]");
        }
        a.box = Box{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()};
        const auto& tag = require(o, "tag", line);
        if (tag.is_string()) {
          auto tid = tags.id(tag.get<std::string>());
          if (!tid) fail(line, field + ".tag", "unknown tag '" + tag.get<std::string>() + "'");
          a.tag_id = *tid;
        } else if (tag.is_number_integer()) {
          a.tag_id = tag.get<int>();
        } else {
          fail(line, field + ".tag", "expected tag name or id");
        }
        const auto& score = require(o, "score", line);
        if (!score.is_number()) fail(line, field + ".score", "expected number");
        a.score = score.get<double>();
        try {
          validate_annotation(a, tags.size());
        } catch (const InputError& e) {
          const std::string what = e.what();
          const bool box_problem = what.rfind("box", 0) == 0;
          fail(line, field + (box_problem ? ".box" : ""), what);
        }
        s.objects.push_back(a);
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void write_manifest(const std::filesystem::path& path, std::span<const VideoSample> samples,
                    const TagVocabulary& tags, FrameStorage storage) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) {
    json j;
    j["video_id"] = s.video_id;
    json frames = json::array();
    if (storage == FrameStorage::references) {
      if (s.frame_refs.size() != s.frames.size()) {
        throw InputError("write_manifest: sample " + s.video_id + " has no frame references");
      }
      for (const auto& r : s.frame_refs) frames.push_back(r);
    } else {
      for (const auto& f : s.frames) {
        frames.push_back({{"shape", {f.height, f.width, f.channels}}, {"data", base64_encode(f.pixels)}});
      }
    }
    j["frames"] = std::move(frames);
    j["captions"] = s.captions;
    json objs = json::array();
    for (const auto& o : s.objects) {
      objs.push_back({{"frame_index", o.frame_index},
                      {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}},
                      {"tag", tags.name(o.tag_id)},
                      {"score", o.score}});
    }
    j["objects"] = std::move(objs);
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Frame sampling

void SamplerConfig::validate() const {
  if (frames_per_clip < 1) throw ConfigError("sampler: frames_per_clip must be >= 1");
  if (image_size < 1) throw ConfigError("sampler: image_size must be >= 1");
}

std::vector<int> sample_frame_indices(int num_frames, int count) {
  if (num_frames < 1) throw InputError("sample_frames: video has no frames");
  if (count < 1) throw InputError("sample_frames: clip length must be >= 1");
  std::vector<int> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const long long idx = (2LL * i + 1) * num_frames / (2LL * count);
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::min<long long>(idx, num_frames - 1));
  }
  return out;
}

Clip sample_frames(const VideoSample& sample, const SamplerConfig& config) {
  config.validate();
  Clip clip;
  clip.indices = sample_frame_indices(static_cast<int>(sample.frames.size()), config.frames_per_clip);
  for (int i : clip.indices) clip.frames.push_back(&sample.frames[static_cast<std::size_t>(i)]);
  return clip;
}

}  // namespace oatr
