#include "moeq/formats.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <string_view>

#include "moeq/error.hpp"

namespace moeq {
namespace {

constexpr std::uint8_t kVersion = 1;

class Writer {
 public:
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    out_.push_back(static_cast<std::uint8_t>(v));
    out_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void matrix(const Matrix& m) {
    for (float v : m.values()) f32(v);
  }
  std::size_t size() const noexcept { return out_.size(); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n) const {
    if (in_.size() - pos_ < n)
      throw FormatError("truncated input at byte " + std::to_string(pos_) + " (need " +
                        std::to_string(n) + " more)");
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    need(rows * cols * 4);
    Matrix m(rows, cols);
    for (float& v : m.values()) v = f32();
    return m;
  }
  bool done() const noexcept { return pos_ == in_.size(); }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_header(Writer& w, std::string_view magic, const MoEConfig& cfg) {
  w.bytes(magic);
  w.u8(kVersion);
  w.u32(cfg.num_layers);
  w.u32(cfg.experts_per_layer);
  w.u32(cfg.hidden_dim);
  w.u32(cfg.ffn_dim);
  w.u32(cfg.top_k);
  w.u32(cfg.vocab_size);
}

MoEConfig read_header(Reader& r, std::string_view magic) {
  if (r.remaining() < magic.size() || r.bytes(magic.size()) != magic)
    throw FormatError("bad magic: expected " + std::string(magic));
  const std::uint8_t version = r.u8();
  if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version));
  MoEConfig cfg;
  cfg.num_layers = r.u32();
  cfg.experts_per_layer = r.u32();
  cfg.hidden_dim = r.u32();
  cfg.ffn_dim = r.u32();
  cfg.top_k = r.u32();
  cfg.vocab_size = r.u32();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid config block: ") + e.what());
  }
  // Reject sizes the remaining bytes cannot possibly hold before allocating.
  const std::uint64_t d = cfg.hidden_dim;
  const std::uint64_t min_bytes = 4ull * d * (cfg.vocab_size + std::uint64_t{cfg.num_layers} * cfg.experts_per_layer);
  if (min_bytes > r.remaining()) throw FormatError("config block exceeds file size");
  return cfg;
}

BitWidth read_width(Reader& r) {
  const int bits = r.u8();
  if (bits != 2 && bits != 4 && bits != 6 && bits != 8)
    throw FormatError("invalid bit width " + std::to_string(bits));
  return BitWidth::from_bits(bits);
}

void write_words(Writer& w, const PackedRow& row) {
  for (std::uint32_t word : row.words) w.u32(word);
}

PackedRow read_row(Reader& r, BitWidth width, std::uint32_t lanes) {
  PackedRow row{width, lanes, {}};
  const std::size_t n = width.words_for(lanes);
  r.need(n * 4);
  row.words.resize(n);
  for (auto& word : row.words) word = r.u32();
  return row;
}

}  // namespace

std::vector<std::uint8_t> encode_model(const MoEModel& model) {
  model.validate();
  Writer w;
  write_header(w, "DMOE", model.config);
  w.matrix(model.embeddings);
  for (const auto& layer : model.layers) w.matrix(layer.router);
  for (const auto& layer : model.layers)
    for (const auto& e : layer.experts) {
      w.matrix(e.w_in);
      w.matrix(e.w_out);
    }
  return w.take();
}

MoEModel decode_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const MoEConfig cfg = read_header(r, "DMOE");
  const std::uint64_t expected = 4ull * cfg.hidden_dim *
                                 (cfg.vocab_size + std::uint64_t{cfg.num_layers} * cfg.experts_per_layer *
                                                       (1 + 2ull * cfg.ffn_dim));
  if (expected != r.remaining())
    throw FormatError("DMOE payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                      std::to_string(expected));
  MoEModel m;
  m.config = cfg;
  m.embeddings = r.matrix(cfg.vocab_size, cfg.hidden_dim);
  m.layers.resize(cfg.num_layers);
  for (auto& layer : m.layers) layer.router = r.matrix(cfg.experts_per_layer, cfg.hidden_dim);
  for (auto& layer : m.layers) {
    layer.experts.resize(cfg.experts_per_layer);
    for (auto& e : layer.experts) {
      e.w_in = r.matrix(cfg.ffn_dim, cfg.hidden_dim);
      e.w_out = r.matrix(cfg.hidden_dim, cfg.ffn_dim);
    }
  }
  try {
    m.validate();
  } catch (const InputError& e) {
    throw FormatError(e.what());
  }
  return m;
}

std::vector<std::uint8_t> encode_qmodel(const QuantizedModel& q, std::vector<Section>* sections) {
  q.validate();
  Writer w;
  std::size_t mark = 0;
  const auto section = [&](std::string name) {
    if (sections != nullptr) sections->push_back({std::move(name), mark, w.size() - mark});
    mark = w.size();
  };
  write_header(w, "DMQZ", q.config);
  section("header");
  w.matrix(q.embeddings);
  section("embeddings");
  for (const auto& router : q.routers) w.matrix(router);
  section("routers");
  for (std::size_t l = 0; l < q.experts.size(); ++l) {
    for (std::size_t e = 0; e < q.experts[l].size(); ++e) {
      const auto& ex = q.experts[l][e];
      const std::string tag = std::to_string(l) + "." + std::to_string(e);
      w.u8(static_cast<std::uint8_t>(ex.baseline.bits()));
      for (const auto& ch : ex.channels) w.f32(ch.codec.scale);
      for (const auto& ch : ex.channels) write_words(w, ch.row);
      section("expert " + tag);
      w.u32(static_cast<std::uint32_t>(ex.overrides.size()));
      for (const auto& [idx, ch] : ex.overrides) {
        w.u32(idx);
        w.u8(static_cast<std::uint8_t>(ch.width().bits()));
        w.f32(ch.codec.scale);
        write_words(w, ch.row);
      }
      section("overrides " + tag);
    }
  }
  w.u8(q.cache ? 1 : 0);
  if (q.cache) {
    w.u32(static_cast<std::uint32_t>(q.cache->size()));
    for (const auto& entry : q.cache->entries()) {
      w.u16(entry.layer);
      w.u16(entry.expert);
      w.u32(entry.channel);
      for (std::uint16_t v : entry.values) w.u16(v);
    }
  }
  section("cache");
  return w.take();
}

QuantizedModel decode_qmodel(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  QuantizedModel q;
  q.config = read_header(r, "DMQZ");
  const auto& cfg = q.config;
  const std::uint32_t lanes = 2 * cfg.hidden_dim;
  q.embeddings = r.matrix(cfg.vocab_size, cfg.hidden_dim);
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l)
    q.routers.push_back(r.matrix(cfg.experts_per_layer, cfg.hidden_dim));
  q.experts.resize(cfg.num_layers);
  for (auto& layer : q.experts) {
    layer.resize(cfg.experts_per_layer);
    for (auto& ex : layer) {
      ex.baseline = read_width(r);
      r.need(4ull * cfg.ffn_dim);
      ex.channels.resize(cfg.ffn_dim);
      for (auto& ch : ex.channels) ch.codec = {ex.baseline, r.f32()};
      for (auto& ch : ex.channels) ch.row = read_row(r, ex.baseline, lanes);
      const std::uint32_t count = r.u32();
      if (count > cfg.ffn_dim) throw FormatError("override count exceeds channel count");
      for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t idx = r.u32();
        if (idx >= cfg.ffn_dim) throw FormatError("override channel index out of range");
        QuantizedChannel ch;
        const BitWidth width = read_width(r);
        ch.codec = {width, r.f32()};
        ch.row = read_row(r, width, lanes);
        if (!ex.overrides.emplace(idx, std::move(ch)).second)
          throw FormatError("duplicate override channel " + std::to_string(idx));
      }
    }
  }
  const std::uint8_t has_cache = r.u8();
  if (has_cache > 1) throw FormatError("invalid cache flag");
  if (has_cache == 1) {
    const std::uint32_t count = r.u32();
    const std::size_t entry_bytes = ChannelCacheEntry::kHeaderBytes + 2ull * lanes;
    if (std::uint64_t{count} * entry_bytes != r.remaining())
      throw FormatError("cache section size does not match its entry count");
    ChannelCache cache;
    for (std::uint32_t i = 0; i < count; ++i) {
      ChannelCacheEntry entry;
      entry.layer = r.u16();
      entry.expert = r.u16();
      entry.channel = r.u32();
      if (entry.layer >= cfg.num_layers || entry.expert >= cfg.experts_per_layer ||
          entry.channel >= cfg.ffn_dim)
        throw FormatError("cache entry index out of range");
      entry.values.resize(lanes);
      for (auto& v : entry.values) v = r.u16();
      try {
        cache.insert(std::move(entry));
      } catch (const ConsistencyError& e) {
        throw FormatError(e.what());
      }
    }
    q.cache = std::move(cache);
  }
  if (!r.done()) throw FormatError("trailing bytes after DMQZ payload");
  for (const auto& layer : q.experts)
    for (const auto& ex : layer) {
      for (const auto& ch : ex.channels) dequantize(ch);  // validates pads and codes
      for (const auto& [idx, ch] : ex.overrides) dequantize(ch);
    }
  return q;
}

TokenStream decode_tokens(std::span<const std::uint8_t> bytes, std::string name) {
  TokenStream s;
  s.name = std::move(name);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "TXT1", 4) == 0) {
    std::string_view text(reinterpret_cast<const char*>(bytes.data()) + 4, bytes.size() - 4);
    std::size_t line_no = 0;
    while (!text.empty()) {
      const auto nl = text.find('\n');
      std::string_view line = text.substr(0, nl);
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      ++line_no;
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
        line.remove_suffix(1);
      while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
      if (line.empty()) continue;
      std::uint32_t id = 0;
      const auto [end, ec] = std::from_chars(line.data(), line.data() + line.size(), id);
      if (ec != std::errc{} || end != line.data() + line.size())
        throw InputError("token file line " + std::to_string(line_no) + ": not a token id");
      s.tokens.push_back(id);
    }
  } else {
    if (bytes.size() % 4 != 0) throw FormatError("binary token file length is not a multiple of 4");
    Reader r(bytes);
    s.tokens.resize(bytes.size() / 4);
    for (auto& t : s.tokens) t = r.u32();
  }
  if (s.tokens.empty()) throw InputError("token file is empty");
  return s;
}

std::vector<std::uint8_t> encode_tokens(const TokenStream& stream, bool text) {
  if (text) {
    std::string out = "TXT1\n";
    for (std::uint32_t t : stream.tokens) out += std::to_string(t) + "\n";
    return {out.begin(), out.end()};
  }
  Writer w;
  for (std::uint32_t t : stream.tokens) w.u32(t);
  return w.take();
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

MoEModel load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

void save_model(const std::filesystem::path& path, const MoEModel& model) {
  write_file_atomic(path, encode_model(model));
}

QuantizedModel load_qmodel(const std::filesystem::path& path) { return decode_qmodel(read_file(path)); }

void save_qmodel(const std::filesystem::path& path, const QuantizedModel& qmodel) {
  write_file_atomic(path, encode_qmodel(qmodel));
}

TokenStream load_tokens(const std::filesystem::path& path) {
  return decode_tokens(read_file(path), path.stem().string());
}

void save_tokens(const std::filesystem::path& path, const TokenStream& stream, bool text) {
  write_file_atomic(path, encode_tokens(stream, text));
}

}  // namespace moeq
