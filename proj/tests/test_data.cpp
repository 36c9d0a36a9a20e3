#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "datwep/data.hpp"
#include "datwep/text.hpp"

using namespace datwep;
using namespace datwep::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("datwep_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST(SyntheticTest, DeterministicForSeed) {
  const auto a = generate_synthetic(20, {}, 5), b = generate_synthetic(20, {}, 5), c = generate_synthetic(20, {}, 6);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.answers, b.answers);
  EXPECT_FALSE(a.samples == c.samples);
}

TEST(SyntheticTest, ComplexCountingAnswersFollowSceneGraph) {
  SceneGraph g;
  g.buildings = {{0, 0, true}, {0, 1, false}, {2, 2, false}};
  g.road_line = 1;
  std::size_t seen_flooded = 0;
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    Rng rng(seed);
    for (const auto& q : scene_questions(g, rng)) {
      if (q.question == "How many flooded buildings are in the image?") {
        EXPECT_EQ(q.answer, "1");
        ++seen_flooded;
      } else if (q.type == QuestionType::SimpleCounting) {
        EXPECT_EQ(q.answer, "3");
      }
    }
  }
  EXPECT_GT(seen_flooded, 0u);
}

TEST(SyntheticTest, MasksAreExactlyTheDrawnPixels) {
  SceneGraph g;
  g.road_horizontal = false;
  g.road_line = 2;
  g.road_flooded = true;
  g.buildings = {{0, 0, true}, {3, 3, false}};
  g.pool = std::make_pair(std::size_t{1}, std::size_t{1});
  const auto codes = render_codes(g, 32);
  std::map<int, std::size_t> count;
  for (auto v : codes.pixels) ++count[v];
  EXPECT_EQ(count[kBuildingFlooded], 36u);  // one 6x6 footprint
  EXPECT_EQ(count[kBuildingDry], 36u);
  EXPECT_EQ(count[kRoadFlooded], 4u * 32u);
  EXPECT_EQ(count[kRoadDry], 0u);
  EXPECT_GT(count[kPool], 0u);
  EXPECT_EQ(codes.at(1, 1), kBuildingFlooded);
  EXPECT_EQ(codes.at(0, 0), kBackground);
  EXPECT_EQ(codes.at(5, 18), kRoadFlooded);

  const Tensor m = split_mask(codes, 6);
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) ASSERT_EQ(m.at(k, y, x) == 1.0, codes.at(y, x) == k);
  EXPECT_EQ(merge_mask(m), codes);
}

TEST(SyntheticTest, MasksBinaryAndDisjointAcrossDataset) {
  const auto ds = generate_synthetic(30, {}, 9);
  for (const auto& s : ds.samples) {
    ASSERT_EQ(s.masks.shape(), (Shape{6, 32, 32}));
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 6; ++k) {
          const double v = s.masks.at(k, y, x);
          ASSERT_TRUE(v == 0.0 || v == 1.0);
          sum += v;
        }
        ASSERT_EQ(sum, 1.0);
      }
    for (double v : s.image.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(SyntheticTest, QuestionMixAndTokenizerRoundTrip) {
  const auto ds = generate_synthetic(1000, {}, 11);
  const double avg = static_cast<double>(ds.qa_count()) / 1000.0;
  EXPECT_NEAR(avg, 3.5, 0.1);
  std::set<QuestionType> types;
  const auto vocab = text::Vocabulary::standard();
  for (const auto& s : ds.samples)
    for (const auto& q : s.qa) {
      types.insert(q.type);
      const auto seq = text::tokenize(q.question, vocab);
      ASSERT_EQ(text::detokenize(seq, vocab), text::normalize_question(q.question));
    }
  EXPECT_EQ(types.size(), 4u);
  EXPECT_EQ(ds.answers, canonical_answers());
}

TEST(MaskTest, IntegerCodeSelectsChannel) {
  image_io::Image8 codes{2, 1, 1, {3, 0}};
  const Tensor m = split_mask(codes, 6);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(m.at(k, 0, 0), k == 3 ? 1.0 : 0.0);
    EXPECT_EQ(m.at(k, 0, 1), k == 0 ? 1.0 : 0.0);
  }
  image_io::Image8 bad{1, 1, 1, {7}};
  EXPECT_THROW(split_mask(bad, 6), FormatError);
}

TEST(ResizeTest, LargeFrameToTrainingSize) {
  image_io::Image8 big{4000, 3000, 3, std::vector<std::uint8_t>(4000 * 3000 * 3, 77)};
  const auto small = image_io::resize_area(big, 200, 200);
  EXPECT_EQ(small.width, 200u);
  EXPECT_EQ(small.height, 200u);
  for (auto v : small.pixels) ASSERT_EQ(v, 77);
}

TEST(ResizeTest, AreaAverageAndNearest) {
  image_io::Image8 im{4, 2, 1, {0, 100, 200, 40, 10, 10, 10, 10}};
  const auto a = image_io::resize_area(im, 2, 1);
  EXPECT_EQ(a.at(0, 0), 30);   // (0+100+10+10)/4
  EXPECT_EQ(a.at(0, 1), 65);   // (200+40+10+10)/4
  const auto n = image_io::resize_nearest(im, 2, 1);
  for (auto v : n.pixels) EXPECT_TRUE(std::count(im.pixels.begin(), im.pixels.end(), v) > 0);
  const auto up = image_io::resize_nearest(im, 8, 4);
  EXPECT_EQ(up.at(0, 0), 0);
  EXPECT_EQ(up.at(3, 7), 10);
}

TEST(LayoutTest, WriteLoadRoundTripIsExact) {
  TempDir dir("roundtrip");
  const auto ds = generate_synthetic(12, {}, 3);
  write_dataset_dir(ds, dir.path);
  const auto loaded = load_dataset_dir(dir.path, {32, 6});
  EXPECT_EQ(loaded.answers, ds.answers);
  ASSERT_EQ(loaded.samples.size(), ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) EXPECT_EQ(loaded.samples[i], ds.samples[i]) << ds.samples[i].id;
  EXPECT_TRUE(loaded.warnings.empty());

  std::ifstream answers(dir.path / "answers.txt");
  std::size_t lines = 0;
  for (std::string l; std::getline(answers, l);) ++lines;
  EXPECT_EQ(lines, ds.answers.size());
}

TEST(LayoutTest, WritingTwiceGivesIdenticalBytes) {
  TempDir a("bytes_a"), b("bytes_b");
  write_dataset_dir(generate_synthetic(8, {}, 7), a.path);
  write_dataset_dir(generate_synthetic(8, {}, 7), b.path);
  EXPECT_EQ(tree_bytes(a.path), tree_bytes(b.path));
}

TEST(LayoutTest, MissingMaskSkippedWithWarning) {
  TempDir dir("missing");
  const auto ds = generate_synthetic(4, {}, 3);
  write_dataset_dir(ds, dir.path);
  fs::remove(dir.path / "masks" / (ds.samples[1].id + ".png"));
  const auto loaded = load_dataset_dir(dir.path, {32, 6});
  EXPECT_EQ(loaded.samples.size(), 3u);
  ASSERT_FALSE(loaded.warnings.empty());
  EXPECT_NE(loaded.warnings[0].find(ds.samples[1].id), std::string::npos);
}

TEST(LayoutTest, UnknownAnswerListsTable) {
  TempDir dir("unknown");
  write_dataset_dir(generate_synthetic(4, {}, 3), dir.path);
  std::ofstream(dir.path / "qa.jsonl", std::ios::app)
      << R"({"image_id":"syn_00000","question":"how many","answer":"seventeen","question_type":"Simple_Counting"})"
      << '\n';
  try {
    load_dataset_dir(dir.path, {32, 6});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("seventeen"), std::string::npos);
    EXPECT_NE(msg.find("non-flooded"), std::string::npos);
  }
}

TEST(LayoutTest, BadQuestionTypeAndMalformedLine) {
  TempDir dir("badtype");
  write_dataset_dir(generate_synthetic(3, {}, 3), dir.path);
  {
    std::ofstream(dir.path / "qa.jsonl", std::ios::app)
        << R"({"image_id":"syn_00000","question":"q","answer":"yes","question_type":"Colour"})" << '\n';
  }
  EXPECT_THROW(load_dataset_dir(dir.path, {32, 6}), ValidationError);
  std::ofstream(dir.path / "qa.jsonl") << "{not json\n";
  EXPECT_THROW(load_dataset_dir(dir.path, {32, 6}), FormatError);
}

TEST(LayoutTest, LoaderResizesToConfiguredSize) {
  TempDir dir("resize");
  write_dataset_dir(generate_synthetic(3, {}, 4), dir.path);
  const auto loaded = load_dataset_dir(dir.path, {16, 6});
  EXPECT_EQ(loaded.samples[0].image.shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(loaded.samples[0].masks.shape(), (Shape{6, 16, 16}));
}

TEST(SplitTest, SizesDeterminismAndPartition) {
  const auto ds = generate_synthetic(100, {}, 1);
  const auto s = split(ds, {0.7, 0.15, 0.15, 42});
  EXPECT_EQ(s.train.samples.size(), 70u);
  EXPECT_EQ(s.val.samples.size(), 15u);
  EXPECT_EQ(s.test.samples.size(), 15u);
  const auto again = split(ds, {0.7, 0.15, 0.15, 42});
  EXPECT_EQ(again.train.samples, s.train.samples);
  EXPECT_EQ(again.test.samples, s.test.samples);
  std::set<std::string> ids;
  std::size_t qa = 0;
  for (const Dataset* d : {&s.train, &s.val, &s.test})
    for (const auto& smp : d->samples) {
      EXPECT_TRUE(ids.insert(smp.id).second) << smp.id;
      qa += smp.qa.size();
    }
  EXPECT_EQ(ids.size(), 100u);
  EXPECT_EQ(qa, ds.qa_count());
  EXPECT_FALSE(split(ds, {0.7, 0.15, 0.15, 43}).train.samples == s.train.samples);
}

TEST(SplitTest, SmallAndInvalidInputs) {
  EXPECT_THROW(split(generate_synthetic(2, {}, 1), {}), ValidationError);
  const auto three = split(generate_synthetic(3, {}, 1), {});
  EXPECT_EQ(three.train.samples.size(), 1u);
  EXPECT_EQ(three.val.samples.size(), 1u);
  EXPECT_EQ(three.test.samples.size(), 1u);
  EXPECT_THROW(split(generate_synthetic(5, {}, 1), {0.5, 0.2, 0.2, 0}), ValidationError);
  EXPECT_EQ(split_sizes(256, {}), (std::array<std::size_t, 3>{180, 38, 38}));
}
