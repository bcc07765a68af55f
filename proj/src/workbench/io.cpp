#include "meg/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "meg/errors.hpp"

namespace meg::io {

namespace {

constexpr char kSignalMagic[6] = {'M', 'E', 'G', 'T', 'S', '1'};
constexpr char kTokenMagic[6] = {'M', 'E', 'G', 'T', 'K', '1'};
constexpr char kCheckpointMagic[6] = {'M', 'E', 'G', 'C', 'K', '1'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed: " + path.string());
  }

  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  Reader(std::vector<unsigned char> data, std::string name) : bytes_(std::move(data)), name_(std::move(name)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(name_ + ": truncated " + what + " at offset " + std::to_string(pos_) + ": expected " +
                        std::to_string(n) + " bytes, found " + std::to_string(bytes_.size() - pos_));
    }
  }
  void magic(const char (&m)[6]) {
    need(6, "magic");
    if (std::memcmp(bytes_.data(), m, 6) != 0)
      throw FormatError(name_ + ": bad magic at offset 0, expected " + std::string(m, 6));
    pos_ += 6;
  }
  template <class U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>("value")); }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  // Checks that exactly n payload bytes remain.
  void payload(std::size_t n) const {
    const std::size_t have = bytes_.size() - pos_;
    if (have != n) {
      throw FormatError(name_ + ": payload at offset " + std::to_string(pos_) + " has " + std::to_string(have) +
                        " bytes, expected " + std::to_string(n));
    }
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

Reader open(const fs::path& path) { return Reader(read_bytes(path), path.string()); }

std::vector<std::vector<std::string>> read_tsv(const fs::path& path, std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != columns)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                        " tab-separated fields");
    rows.push_back(std::move(fields));
  }
  return rows;
}

long long to_int(const std::string& s, const fs::path& path) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": not an integer: '" + s + "'");
  }
}

}  // namespace

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_signal(const fs::path& path, const Recording& rec) {
  if (rec.data.size() != rec.channels * rec.samples) throw DimensionError("recording data does not match its shape");
  Writer w;
  w.raw(kSignalMagic, 6);
  w.uint(static_cast<std::uint32_t>(rec.channels));
  w.uint(static_cast<std::uint32_t>(rec.fs));
  w.uint(static_cast<std::uint64_t>(rec.samples));
  for (float v : rec.data) w.f32(v);
  w.save(path);
}

Recording read_signal(const fs::path& path) {
  Reader r = open(path);
  r.magic(kSignalMagic);
  const auto channels = r.uint<std::uint32_t>("channel count");
  const auto rate = r.uint<std::uint32_t>("sampling rate");
  const auto samples = r.uint<std::uint64_t>("sample count");
  r.payload(static_cast<std::size_t>(channels) * samples * 4);
  Recording rec(channels, samples, rate);
  for (auto& v : rec.data) v = r.f32();
  rec.session_id = path.stem().string();
  return rec;
}

void write_tokens(const fs::path& path, const TokenTrace& trace) {
  if (trace.labels.size() != trace.channels * trace.samples) throw DimensionError("token trace does not match its shape");
  Writer w;
  w.raw(kTokenMagic, 6);
  w.uint(static_cast<std::uint16_t>(trace.vocab));
  w.uint(static_cast<std::uint32_t>(trace.channels));
  w.uint(static_cast<std::uint64_t>(trace.samples));
  for (auto v : trace.labels) w.uint(v);
  w.save(path);
}

TokenTrace read_tokens(const fs::path& path) {
  Reader r = open(path);
  r.magic(kTokenMagic);
  TokenTrace t;
  t.vocab = r.uint<std::uint16_t>("vocabulary");
  t.channels = r.uint<std::uint32_t>("channel count");
  t.samples = r.uint<std::uint64_t>("sample count");
  r.payload(t.channels * t.samples * 2);
  t.labels.resize(t.channels * t.samples);
  for (auto& v : t.labels) {
    v = r.uint<std::uint16_t>("label");
    if (v >= t.vocab) throw FormatError(path.string() + ": label " + std::to_string(v) + " outside vocabulary");
  }
  t.session_id = path.stem().string();
  return t;
}

void write_signal_set(const fs::path& dir, const SignalSet& set) {
  fs::create_directories(dir);
  std::ofstream index(dir / "sessions.tsv", std::ios::trunc);
  for (const auto& rec : set.sessions) {
    const std::string file = rec.session_id + ".megts";
    write_signal(dir / file, rec);
    index << rec.session_id << '\t' << rec.subject_id << '\t' << file << '\n';
  }
  if (!index) throw InputError("cannot write " + (dir / "sessions.tsv").string());
}

SignalSet read_signal_set(const fs::path& dir) {
  SignalSet set;
  for (const auto& row : read_tsv(dir / "sessions.tsv", 3)) {
    Recording rec = read_signal(dir / row[2]);
    rec.session_id = row[0];
    rec.subject_id = static_cast<int>(to_int(row[1], dir / "sessions.tsv"));
    if (!set.sessions.empty() && (rec.channels != set.channels() || rec.fs != set.fs()))
      throw FormatError(dir.string() + ": session " + rec.session_id + " differs in channel count or rate");
    set.sessions.push_back(std::move(rec));
  }
  if (set.sessions.empty()) throw InputError(dir.string() + ": no sessions");
  return set;
}

void write_token_corpus(const fs::path& dir, const TokenCorpus& corpus) {
  fs::create_directories(dir);
  std::ofstream index(dir / "sessions.tsv", std::ios::trunc);
  for (const auto& t : corpus.sessions) {
    const std::string file = t.session_id + ".megtk";
    write_tokens(dir / file, t);
    index << t.session_id << '\t' << t.subject_id << '\t' << file << '\n';
  }
  if (!index) throw InputError("cannot write " + (dir / "sessions.tsv").string());
}

TokenCorpus read_token_corpus(const fs::path& dir) {
  TokenCorpus corpus;
  for (const auto& row : read_tsv(dir / "sessions.tsv", 3)) {
    TokenTrace t = read_tokens(dir / row[2]);
    t.session_id = row[0];
    t.subject_id = static_cast<int>(to_int(row[1], dir / "sessions.tsv"));
    if (!corpus.sessions.empty() && (t.vocab != corpus.vocab || t.channels != corpus.channels()))
      throw FormatError(dir.string() + ": session " + t.session_id + " differs in vocabulary or channel count");
    corpus.vocab = t.vocab;
    corpus.sessions.push_back(std::move(t));
  }
  if (corpus.sessions.empty()) throw InputError(dir.string() + ": no sessions");
  return corpus;
}

void write_events(const fs::path& path, const EventTable& events) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  for (const auto& e : events) out << e.session << '\t' << e.subject << '\t' << e.onset << '\t' << e.label << '\n';
}

EventTable read_events(const fs::path& path) {
  EventTable events;
  for (const auto& row : read_tsv(path, 4)) {
    Event e;
    e.session = static_cast<int>(to_int(row[0], path));
    e.subject = static_cast<int>(to_int(row[1], path));
    const long long onset = to_int(row[2], path);
    if (onset < 0) throw FormatError(path.string() + ": negative onset");
    e.onset = static_cast<std::size_t>(onset);
    e.label = static_cast<int>(to_int(row[3], path));
    events.push_back(e);
  }
  return events;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  std::string meta;
  for (const auto& [k, v] : ck.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw FormatError("checkpoint metadata entry '" + k + "' contains a separator");
    meta += k + "=" + v + "\n";
  }
  Writer w;
  w.raw(kCheckpointMagic, 6);
  w.uint(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta.data(), meta.size());
  w.uint(static_cast<std::uint32_t>(ck.params.size()));
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& name = ck.params.name(i);
    const auto& t = ck.params.at(i);
    w.uint(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.uint(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape) w.uint(static_cast<std::uint64_t>(e));
    for (float v : t.values) w.f32(v);
  }
  w.save(path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  Reader r = open(path);
  r.magic(kCheckpointMagic);
  Checkpoint ck;
  const auto meta_len = r.uint<std::uint32_t>("metadata length");
  std::stringstream meta(r.text(meta_len, "metadata"));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": malformed metadata line '" + line + "'");
    ck.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto blocks = r.uint<std::uint32_t>("block count");
  for (std::uint32_t b = 0; b < blocks; ++b) {
    const auto name_len = r.uint<std::uint16_t>("block name length");
    std::string name = r.text(name_len, "block name");
    const auto rank = r.uint<std::uint32_t>("block rank");
    if (rank > 8) throw FormatError(path.string() + ": block '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = r.uint<std::uint64_t>("block extent");
    const std::size_t n = shape_size(shape);
    r.need(n * 4, "block values");
    Tensor<float> t(shape);
    for (auto& v : t.values) v = r.f32();
    ck.params.add(std::move(name), std::move(t));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes at offset " + std::to_string(r.pos()));
  return ck;
}

}  // namespace meg::io
