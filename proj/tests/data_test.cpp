#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "wavemsnet/data.hpp"

using namespace wavemsnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("wavemsnet_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void touch_wav(const fs::path& p) {
  const std::vector<float> s(16, 0.0f);
  write_file_bytes(p, encode_wav(s));
}

// Synthetic manifest without files, for fold logic.
DatasetManifest fake_manifest(std::size_t classes, std::size_t per_class) {
  DatasetManifest m;
  for (std::size_t k = 0; k < classes; ++k) {
    m.class_names.push_back("c" + std::to_string(k));
    for (std::size_t j = 0; j < per_class; ++j) {
      m.clips.push_back({"x.wav", k, j % kFolds + 1, std::to_string(k) + "-" + std::to_string(j)});
    }
  }
  return m;
}

}  // namespace

TEST(Filename, Examples) {
  auto n = parse_esc_filename("1-100032-A-0.wav");
  EXPECT_EQ(n.fold, 1u);
  EXPECT_EQ(n.clip_id, "100032");
  EXPECT_EQ(n.take, "A");
  EXPECT_EQ(n.target, 0u);
  n = parse_esc_filename("5-9-B-49.wav");
  EXPECT_EQ(n.fold, 5u);
  EXPECT_EQ(n.target, 49u);
}

TEST(Filename, Malformed) {
  for (const char* bad : {"noext", "1-2-A.wav", "0-1-A-2.wav", "6-1-A-2.wav", "x-1-A-2.wav", "1-1-A-2x.wav",
                          "1--A-2.wav", "1-1-A-2.mp3"}) {
    try {
      parse_esc_filename(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::format) << bad;
    }
  }
}

TEST(Folds, Esc50Sized) {
  const auto m = fake_manifest(50, 40);
  const auto folds = make_folds(m);
  ASSERT_EQ(folds.size(), 5u);
  std::vector<int> seen(m.clips.size(), 0);
  for (const auto& f : folds) {
    EXPECT_EQ(f.test.size(), 400u);
    EXPECT_EQ(f.train.size(), 1600u);
    std::set<std::size_t> test(f.test.begin(), f.test.end());
    for (auto i : f.train) EXPECT_FALSE(test.count(i));
    for (auto i : f.test) {
      ++seen[i];
      EXPECT_EQ(m.clips[i].fold, f.test_fold);
    }
    EXPECT_TRUE(std::is_sorted(f.train.begin(), f.train.end()));
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Folds, EmptyFoldRejected) {
  auto m = fake_manifest(2, 4);  // folds 1..4 only
  EXPECT_THROW(make_folds(m), Error);
}

TEST(Manifest, ValidationCatchesDefects) {
  const auto dir = scratch("validate");
  touch_wav(dir / "a.wav");
  DatasetManifest m;
  m.class_names = {"a", "b"};
  m.clips = {{dir / "a.wav", 1, 3, "a"}};
  EXPECT_NO_THROW(validate_manifest(m));
  m.clips[0].label = 2;
  EXPECT_THROW(validate_manifest(m), Error);
  m.clips[0].label = 0;
  m.clips[0].fold = 6;
  EXPECT_THROW(validate_manifest(m), Error);
  m.clips[0].fold = 1;
  m.clips.push_back({dir / "a.wav", 0, 2, "a"});
  EXPECT_THROW(validate_manifest(m), Error);
  m.clips[1] = {dir / "missing.wav", 0, 2, "b"};
  try {
    validate_manifest(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::io);
  }
  fs::remove_all(dir);
}

TEST(Synthetic, LayoutAndFolds) {
  const auto dir = scratch("synth");
  const auto m = synth_dataset(dir);
  EXPECT_EQ(m.clips.size(), 40u);
  EXPECT_EQ(m.n_classes(), 4u);
  EXPECT_EQ(m.source, DataSource::synthetic);
  for (std::size_t f = 1; f <= 5; ++f) {
    EXPECT_EQ(std::count_if(m.clips.begin(), m.clips.end(), [&](const ClipEntry& c) { return c.fold == f; }), 8);
  }
  EXPECT_NO_THROW(validate_manifest(m));
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.clips.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(loaded.clips[i].id, m.clips[i].id);
    EXPECT_EQ(loaded.clips[i].label, m.clips[i].label);
    EXPECT_EQ(loaded.clips[i].fold, m.clips[i].fold);
  }
  EXPECT_EQ(loaded.class_names, m.class_names);
  const auto clip = load_clip(m.clips[0]);
  EXPECT_EQ(clip.samples.size(), 220500u);
  fs::remove_all(dir);
}

TEST(Synthetic, ClassZeroPeakAt300Hz) {
  const auto dir = scratch("peak");
  const auto m = synth_dataset(dir);
  const auto it = std::find_if(m.clips.begin(), m.clips.end(), [](const ClipEntry& c) { return c.label == 0; });
  const auto clip = load_clip(*it);
  // Direct DFT of the first 8192 samples over bins 0..200.
  const std::size_t n = 8192;
  std::size_t best = 0;
  double best_mag = -1;
  for (std::size_t k = 0; k <= 200; ++k) {
    std::complex<double> acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += double(clip.samples[i]) * std::polar(1.0, -2.0 * M_PI * double(k * i % n) / double(n));
    }
    if (std::abs(acc) > best_mag) {
      best_mag = std::abs(acc);
      best = k;
    }
  }
  const double bin_hz = 44100.0 / n;
  EXPECT_LE(std::abs(double(best) * bin_hz - 300.0), bin_hz);
  fs::remove_all(dir);
}

TEST(Synthetic, SameSeedSameBytes) {
  const auto a = scratch("seed_a"), b = scratch("seed_b"), c = scratch("seed_c");
  SynthOptions small;
  small.clips_per_class = 5;
  small.seconds = 0.5;
  const auto ma = synth_dataset(a, small);
  synth_dataset(b, small);
  auto other = small;
  other.seed = 8;
  synth_dataset(c, other);
  bool any_diff = false;
  for (const auto& clip : ma.clips) {
    const auto name = clip.path.filename();
    EXPECT_EQ(read_file_bytes(a / "audio" / name), read_file_bytes(b / "audio" / name)) << name;
    any_diff = any_diff || read_file_bytes(a / "audio" / name) != read_file_bytes(c / "audio" / name);
  }
  EXPECT_EQ(read_file_bytes(a / "meta.csv"), read_file_bytes(b / "meta.csv"));
  EXPECT_TRUE(any_diff);
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Loading, FlatFolderWithoutCsv) {
  const auto dir = scratch("flat");
  touch_wav(dir / "2-11-A-1.wav");
  touch_wav(dir / "1-10-A-0.wav");
  std::ofstream(dir / "readme.txt") << "ignored";
  const auto m = load_dataset(dir);
  ASSERT_EQ(m.clips.size(), 2u);
  EXPECT_EQ(m.clips[0].id, "1-10-A-0");
  EXPECT_EQ(m.clips[1].fold, 2u);
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"class0", "class1"}));
  touch_wav(dir / "bad.wav");
  EXPECT_THROW(load_dataset(dir), Error);
  fs::remove_all(dir);
}

TEST(Loading, CsvWinsMembershipAndConflictsAreErrors) {
  const auto dir = scratch("csv");
  fs::create_directories(dir / "audio");
  fs::create_directories(dir / "meta");
  touch_wav(dir / "audio" / "1-10-A-0.wav");
  touch_wav(dir / "audio" / "2-11-A-1.wav");
  touch_wav(dir / "audio" / "3-12-A-1.wav");  // not listed: left out
  std::ofstream(dir / "meta" / "esc50.csv") << "filename,fold,target,category,esc10,src_file,take\n"
                                              << "1-10-A-0.wav,1,0,dog,True,10,A\n"
                                              << "2-11-A-1.wav,2,1,rooster,False,11,A\n";
  const auto m = load_dataset(dir);
  EXPECT_EQ(m.clips.size(), 2u);
  EXPECT_EQ(m.source, DataSource::esc50);
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"dog", "rooster"}));

  std::ofstream(dir / "meta" / "esc50.csv") << "filename,fold,target,category,esc10,src_file,take\n"
                                              << "1-10-A-0.wav,1,0,dog,True,10,A\n"
                                              << "2-11-A-1.wav,3,1,rooster,False,11,A\n";
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::format);
    EXPECT_NE(std::string(e.what()).find("2-11-A-1.wav"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Loading, Esc10SubsetRemapsDensely) {
  const auto dir = scratch("esc10");
  fs::create_directories(dir / "audio");
  fs::create_directories(dir / "meta");
  std::ofstream csv(dir / "meta" / "esc50.csv");
  csv << "filename,fold,target,category,esc10,src_file,take\n";
  // 50 classes, one clip each in a rotating fold; every fifth class is in ESC-10.
  for (std::size_t t = 0; t < 50; ++t) {
    const std::string name = std::to_string(t % 5 + 1) + "-" + std::to_string(1000 + t) + "-A-" + std::to_string(t) + ".wav";
    touch_wav(dir / "audio" / name);
    csv << name << "," << t % 5 + 1 << "," << t << ",cat" << t << "," << (t % 5 == 0 ? "True" : "False") << ",x,A\n";
  }
  csv.close();
  const auto m = load_dataset(dir, true);
  EXPECT_EQ(m.source, DataSource::esc10);
  EXPECT_EQ(m.n_classes(), 10u);
  EXPECT_EQ(m.clips.size(), 10u);
  ASSERT_EQ(m.label_map.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(m.label_map[i], std::make_pair(5 * i, i));
    EXPECT_EQ(m.class_names[i], "cat" + std::to_string(5 * i));
  }
  for (const auto& c : m.clips) EXPECT_LT(c.label, 10u);
  const auto table = label_map_csv(m);
  EXPECT_EQ(table.substr(0, table.find('\n')), "original_target,label,class");
  EXPECT_NE(table.find("45,9,cat45"), std::string::npos);
  EXPECT_EQ(load_dataset(dir).n_classes(), 50u);
  fs::remove_all(dir);
}

TEST(Loading, ManifestEcho) {
  const auto dir = scratch("echo");
  SynthOptions small;
  small.seconds = 0.1;
  const auto m = synth_dataset(dir, small);
  const auto csv = manifest_csv(m);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 41);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,path,label,class,fold");
  EXPECT_NE(csv.find(",tone300,"), std::string::npos);
  fs::remove_all(dir);
}
