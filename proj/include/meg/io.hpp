#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "meg/params.hpp"
#include "meg/signal.hpp"

namespace meg::io {

namespace fs = std::filesystem;

// "MEGTS1": 6 magic bytes, u32 channels, u32 fs, u64 samples, then
// channels*samples f32 values, channel-major. All little-endian.
void write_signal(const fs::path& path, const Recording& rec);
Recording read_signal(const fs::path& path);

// "MEGTK1": 6 magic bytes, u16 vocabulary, u32 channels, u64 samples, then
// channels*samples u16 labels, channel-major. All little-endian.
void write_tokens(const fs::path& path, const TokenTrace& trace);
TokenTrace read_tokens(const fs::path& path);

// A dataset directory holds one file per session plus sessions.tsv
// (session_id, subject_id, file) and optionally events.tsv.
void write_signal_set(const fs::path& dir, const SignalSet& set);
SignalSet read_signal_set(const fs::path& dir);
void write_token_corpus(const fs::path& dir, const TokenCorpus& corpus);
TokenCorpus read_token_corpus(const fs::path& dir);

// Event table as tab-separated text: session, subject, onset, label.
void write_events(const fs::path& path, const EventTable& events);
EventTable read_events(const fs::path& path);

// Checkpoint "MEGCK1": magic, u32 metadata length, metadata text (key=value
// lines), u32 block count, then per block: u16 name length, name, u32 rank,
// rank x u64 extents, f32 values. Block order is ParamSet order.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  ParamSet<float> params;
};
void write_checkpoint(const fs::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const fs::path& path);

// Raw little-endian byte images of the formats above, used by tests.
std::vector<unsigned char> read_bytes(const fs::path& path);

}  // namespace meg::io
