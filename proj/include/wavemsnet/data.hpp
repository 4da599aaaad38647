#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "wavemsnet/config.hpp"
#include "wavemsnet/dsp.hpp"

namespace wavemsnet {

inline constexpr std::size_t kFolds = 5;

struct EscName {
  std::size_t fold = 0;
  std::string clip_id;
  std::string take;
  std::size_t target = 0;
};

/// Splits `{fold}-{id}-{take}-{target}.wav`.
inline EscName parse_esc_filename(const std::string& name) {
  auto bad = [&](const std::string& why) {
    return Error(ErrorCode::format, "malformed clip name '" + name + "': " + why);
  };
  if (name.size() < 4 || name.substr(name.size() - 4) != ".wav") throw bad("expected a .wav extension");
  const auto parts = split(name.substr(0, name.size() - 4), '-');
  if (parts.size() != 4) throw bad("expected fold-id-take-target");
  for (const auto& p : parts) {
    if (p.empty()) throw bad("empty field");
  }
  EscName out;
  auto integer = [&](const std::string& s) {
    std::size_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw bad("'" + s + "' is not an integer");
    return v;
  };
  out.fold = integer(parts[0]);
  out.clip_id = parts[1];
  out.take = parts[2];
  out.target = integer(parts[3]);
  if (out.fold < 1 || out.fold > kFolds) throw bad("fold " + parts[0] + " not in 1..5");
  return out;
}

enum class DataSource { esc10, esc50, synthetic };

inline std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::esc10: return "esc10";
    case DataSource::esc50: return "esc50";
    case DataSource::synthetic: return "synthetic";
  }
  return "";
}

struct ClipEntry {
  std::filesystem::path path;
  std::size_t label = 0;
  std::size_t fold = 0;
  std::string id;
};

struct DatasetManifest {
  std::vector<ClipEntry> clips;
  std::vector<std::string> class_names;
  DataSource source = DataSource::esc50;
  // (original target, dense label), only for remapped subsets
  std::vector<std::pair<std::size_t, std::size_t>> label_map;

  std::size_t n_classes() const { return class_names.size(); }
};

/// Fail-fast checks run before training: labels in range, folds in 1..5,
/// unique ids, and every file present.
inline void validate_manifest(const DatasetManifest& m) {
  if (m.clips.empty()) throw Error(ErrorCode::invalid_argument, "dataset has no clips");
  std::set<std::string> ids;
  for (const auto& c : m.clips) {
    if (c.label >= m.n_classes()) {
      throw Error(ErrorCode::out_of_range, "clip " + c.id + ": label " + std::to_string(c.label) + " not below " +
                                               std::to_string(m.n_classes()) + " classes");
    }
    if (c.fold < 1 || c.fold > kFolds) {
      throw Error(ErrorCode::out_of_range, "clip " + c.id + ": fold " + std::to_string(c.fold) + " not in 1..5");
    }
    if (!ids.insert(c.id).second) throw Error(ErrorCode::invalid_argument, "duplicate clip id " + c.id);
    if (!std::filesystem::is_regular_file(c.path)) {
      throw Error(ErrorCode::io, "clip " + c.id + ": missing file " + c.path.string());
    }
  }
}

struct FoldSplit {
  std::size_t test_fold = 1;
  std::vector<std::size_t> train;  // indices into the manifest, ascending
  std::vector<std::size_t> test;
};

inline std::vector<FoldSplit> make_folds(const DatasetManifest& m) {
  std::vector<FoldSplit> out;
  for (std::size_t f = 1; f <= kFolds; ++f) {
    FoldSplit s;
    s.test_fold = f;
    for (std::size_t i = 0; i < m.clips.size(); ++i) (m.clips[i].fold == f ? s.test : s.train).push_back(i);
    if (s.test.empty()) throw Error(ErrorCode::invalid_argument, "fold " + std::to_string(f) + " is empty");
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

inline std::vector<std::string> csv_fields(const std::string& line) {
  auto fields = split(line, ',');
  for (auto& f : fields) {
    if (f.size() >= 2 && f.front() == '"' && f.back() == '"') f = f.substr(1, f.size() - 2);
  }
  return fields;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(csv_fields(line));
  }
  if (rows.empty()) throw Error(ErrorCode::format, path.string() + ": empty CSV");
  return rows;
}

inline std::filesystem::path audio_dir(const std::filesystem::path& root) {
  return std::filesystem::is_directory(root / "audio") ? root / "audio" : root;
}

}  // namespace detail

/// Metadata file next to a dataset: `meta/esc50.csv` for the ESC release,
/// `meta.csv` for generated sets.
inline std::filesystem::path find_metadata(const std::filesystem::path& root) {
  for (auto p : {root / "meta" / "esc50.csv", root / "meta.csv"}) {
    if (std::filesystem::is_regular_file(p)) return p;
  }
  return {};
}

/// Reads a dataset directory.
///
/// With a metadata CSV (columns filename, fold, target, category and
/// optionally esc10) the CSV decides membership, and each filename must agree
/// with its row. Without one, every conforming .wav in the folder is used.
/// `esc10_subset` keeps rows flagged esc10 and renumbers their targets densely.
inline DatasetManifest load_dataset(const std::filesystem::path& root, bool esc10_subset = false) {
  if (!std::filesystem::is_directory(root)) throw Error(ErrorCode::io, "dataset path " + root.string() + " is not a directory");
  DatasetManifest m;
  const auto audio = detail::audio_dir(root);
  const auto meta = find_metadata(root);
  std::map<std::size_t, std::string> categories;
  std::vector<std::pair<EscName, std::string>> rows;  // parsed name, filename

  if (!meta.empty()) {
    const auto table = detail::read_csv(meta);
    const auto& head = table.front();
    auto column = [&](const std::string& name, bool required) -> std::ptrdiff_t {
      const auto it = std::find(head.begin(), head.end(), name);
      if (it == head.end()) {
        if (required) throw Error(ErrorCode::format, meta.string() + ": missing column '" + name + "'");
        return -1;
      }
      return it - head.begin();
    };
    const auto c_file = column("filename", true), c_fold = column("fold", true), c_target = column("target", true);
    const auto c_cat = column("category", false), c_esc10 = column("esc10", false);
    if (esc10_subset && c_esc10 < 0) throw Error(ErrorCode::format, meta.string() + ": no esc10 column for the ESC-10 subset");
    for (std::size_t r = 1; r < table.size(); ++r) {
      const auto& row = table[r];
      if (row.size() != head.size()) {
        throw Error(ErrorCode::format, meta.string() + ": row " + std::to_string(r + 1) + " has " +
                                           std::to_string(row.size()) + " fields, header has " +
                                           std::to_string(head.size()));
      }
      if (esc10_subset && row[static_cast<std::size_t>(c_esc10)] != "True") continue;
      const auto& file = row[static_cast<std::size_t>(c_file)];
      const auto name = parse_esc_filename(file);
      const auto fold = KeyValues::parse_number<std::size_t>("fold", row[static_cast<std::size_t>(c_fold)]);
      const auto target = KeyValues::parse_number<std::size_t>("target", row[static_cast<std::size_t>(c_target)]);
      if (fold != name.fold || target != name.target) {
        throw Error(ErrorCode::format, meta.string() + ": " + file + " says fold " + std::to_string(name.fold) +
                                           " target " + std::to_string(name.target) + ", CSV says fold " +
                                           std::to_string(fold) + " target " + std::to_string(target));
      }
      if (c_cat >= 0) categories.emplace(target, row[static_cast<std::size_t>(c_cat)]);
      rows.emplace_back(name, file);
    }
    m.source = esc10_subset ? DataSource::esc10 : meta.filename() == "esc50.csv" ? DataSource::esc50 : DataSource::synthetic;
  } else {
    if (esc10_subset) throw Error(ErrorCode::format, root.string() + ": the ESC-10 subset needs meta/esc50.csv");
    std::vector<std::string> files;
    for (const auto& e : std::filesystem::directory_iterator(audio)) {
      if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) rows.emplace_back(parse_esc_filename(f), f);
    m.source = DataSource::esc50;
  }
  if (rows.empty()) throw Error(ErrorCode::invalid_argument, root.string() + ": no clips found");

  std::set<std::size_t> targets;
  for (const auto& [name, file] : rows) targets.insert(name.target);
  std::map<std::size_t, std::size_t> dense;
  if (esc10_subset) {
    for (auto t : targets) {
      const std::size_t next = dense.size();
      dense[t] = next;
      m.label_map.emplace_back(t, next);
    }
  } else {
    for (std::size_t t = 0; t <= *targets.rbegin(); ++t) dense[t] = t;
  }
  for (const auto& [orig, label] : dense) {
    const auto it = categories.find(orig);
    m.class_names.push_back(it != categories.end() ? it->second : "class" + std::to_string(orig));
  }
  for (const auto& [name, file] : rows) {
    m.clips.push_back({audio / file, dense.at(name.target), name.fold, file.substr(0, file.size() - 4)});
  }
  std::sort(m.clips.begin(), m.clips.end(), [](const ClipEntry& a, const ClipEntry& b) { return a.id < b.id; });
  return m;
}

inline AudioClip load_clip(const ClipEntry& entry) {
  AudioClip clip = read_wav_file(entry.path);
  clip.label = entry.label;
  clip.fold = entry.fold;
  clip.id = entry.id;
  return clip;
}

inline std::vector<AudioClip> load_clips(const DatasetManifest& m, const std::vector<std::size_t>& indices) {
  std::vector<AudioClip> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(load_clip(m.clips.at(i)));
  return out;
}

inline std::vector<AudioClip> load_all_clips(const DatasetManifest& m) {
  std::vector<std::size_t> all(m.clips.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return load_clips(m, all);
}

/// Manifest echo: one row per clip.
inline std::string manifest_csv(const DatasetManifest& m) {
  std::string out = "id,path,label,class,fold\n";
  for (const auto& c : m.clips) {
    out += c.id + "," + c.path.filename().string() + "," + std::to_string(c.label) + "," + m.class_names[c.label] +
           "," + std::to_string(c.fold) + "\n";
  }
  return out;
}

inline std::string label_map_csv(const DatasetManifest& m) {
  std::string out = "original_target,label,class\n";
  for (const auto& [orig, label] : m.label_map) {
    out += std::to_string(orig) + "," + std::to_string(label) + "," + m.class_names[label] + "\n";
  }
  return out;
}

struct SynthOptions {
  std::size_t n_classes = 4;
  std::size_t clips_per_class = 10;
  std::uint64_t seed = 7;
  double seconds = 5.0;
  double base_hz = 300.0;
  double amplitude = 0.5;
  double noise = 0.05;
};

/// Writes a toy tone dataset: class k is a sinusoid at base_hz * 2^k plus
/// uniform noise. Files go to `dir/audio`, metadata to `dir/meta.csv`.
/// Folds are assigned round-robin within each class.
inline DatasetManifest synth_dataset(const std::filesystem::path& dir, const SynthOptions& opt = {}) {
  std::filesystem::create_directories(dir / "audio");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> noise(-opt.noise, opt.noise);
  const auto n = static_cast<std::size_t>(std::llround(opt.seconds * kSampleRate));
  DatasetManifest m;
  m.source = DataSource::synthetic;
  std::string csv = "filename,fold,target,category\n";
  for (std::size_t k = 0; k < opt.n_classes; ++k) {
    const double hz = opt.base_hz * std::ldexp(1.0, static_cast<int>(k));
    m.class_names.push_back("tone" + std::to_string(static_cast<long>(hz)));
  }
  for (std::size_t k = 0; k < opt.n_classes; ++k) {
    const double hz = opt.base_hz * std::ldexp(1.0, static_cast<int>(k));
    for (std::size_t j = 0; j < opt.clips_per_class; ++j) {
      std::vector<float> samples(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = double(i) / kSampleRate;
        samples[i] = static_cast<float>(opt.amplitude * std::sin(2.0 * std::numbers::pi * hz * t) + noise(rng));
      }
      const std::size_t fold = j % kFolds + 1;
      const std::string id = std::to_string(fold) + "-" + std::to_string(100000 + k * opt.clips_per_class + j) +
                             "-A-" + std::to_string(k);
      write_file_bytes(dir / "audio" / (id + ".wav"), encode_wav(samples));
      csv += id + ".wav," + std::to_string(fold) + "," + std::to_string(k) + "," + m.class_names[k] + "\n";
      m.clips.push_back({dir / "audio" / (id + ".wav"), k, fold, id});
    }
  }
  std::ofstream(dir / "meta.csv", std::ios::binary) << csv;
  std::sort(m.clips.begin(), m.clips.end(), [](const ClipEntry& a, const ClipEntry& b) { return a.id < b.id; });
  return m;
}

}  // namespace wavemsnet
