#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "groundling/dataset_io.hpp"
#include "groundling/world.hpp"

using namespace groundling;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string("groundling_") + tag +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

Dataset make_dataset(uint64_t seed, int n) {
  Dataset ds;
  ds.vocab = Vocab::standard();
  ds.scenes = generate_dataset(ds.vocab, {seed, n, 0.5, 0});
  ds.word_counts = count_words(ds.vocab, ds.scenes);
  return ds;
}

}  // namespace

TEST_CASE("atomic file write leaves no temp files") {
  TempDir dir("atomic");
  std::string p = dir.str() + "/x.txt";
  write_file_atomic(p, "hello");
  CHECK(read_file(p) == "hello");
  write_file_atomic(p, "replaced");
  CHECK(read_file(p) == "replaced");
  int entries = 0;
  for (auto& _ : fs::directory_iterator(dir.path)) ++entries, (void)_;
  CHECK(entries == 1);
  CHECK_THROWS_AS(read_file(dir.str() + "/missing"), IoError);
}

TEST_CASE("ppm round trip at byte fidelity") {
  Scene s;
  s.objects = {ObjectSpec{Shape::Circle, Color::Yellow, Texture::Striped,
                          SizeClass::Large, 16, 14}};
  auto img = render_scene(s);
  TempDir dir("ppm");
  std::string p = dir.str() + "/img.ppm";
  write_ppm(p, img);
  auto back = read_ppm(p);
  REQUIRE(back.shape == img.shape);
  for (int64_t i = 0; i < img.numel(); ++i) {
    float quantized = std::round(img.data[i] * 255.0f) / 255.0f;
    CHECK(back.data[i] == doctest::Approx(quantized).epsilon(1e-6));
  }
  // A second write is byte-identical.
  std::string once = read_file(p);
  write_ppm(p, img);
  CHECK(read_file(p) == once);
}

TEST_CASE("ppm decode rejects malformed input") {
  CHECK_THROWS_AS(decode_ppm("P5\n2 2\n255\nxxxx", "x"), FormatError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n255\nxx", "x"), FormatError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n99\n", "x"), FormatError);
}

TEST_CASE("dataset round trip preserves every field") {
  Dataset ds = make_dataset(21, 40);
  TempDir dir("roundtrip");
  write_dataset(dir.str(), ds);
  Dataset back = read_dataset(dir.str());

  CHECK(back.word_counts == ds.word_counts);
  REQUIRE(back.scenes.size() == ds.scenes.size());
  for (size_t i = 0; i < ds.scenes.size(); ++i) {
    const Scene& a = ds.scenes[i];
    const Scene& b = back.scenes[i];
    CHECK(a.id == b.id);
    CHECK(a.caption == b.caption);
    CHECK(a.tokens == b.tokens);
    REQUIRE(a.objects.size() == b.objects.size());
    for (size_t k = 0; k < a.objects.size(); ++k) {
      CHECK(a.objects[k].shape == b.objects[k].shape);
      CHECK(a.objects[k].color == b.objects[k].color);
      CHECK(a.objects[k].texture == b.objects[k].texture);
      CHECK(a.objects[k].size == b.objects[k].size);
      CHECK(a.objects[k].x == b.objects[k].x);
      CHECK(a.objects[k].y == b.objects[k].y);
    }
    REQUIRE(a.triplets.size() == b.triplets.size());
    for (size_t k = 0; k < a.triplets.size(); ++k) {
      CHECK(a.triplets[k].subject == b.triplets[k].subject);
      CHECK(a.triplets[k].predicate == b.triplets[k].predicate);
      CHECK(a.triplets[k].object == b.triplets[k].object);
    }
    REQUIRE(a.mentions.size() == b.mentions.size());
    for (size_t k = 0; k < a.mentions.size(); ++k) {
      CHECK(a.mentions[k].object == b.mentions[k].object);
      CHECK(a.mentions[k].tok_begin == b.mentions[k].tok_begin);
      CHECK(a.mentions[k].tok_end == b.mentions[k].tok_end);
    }
    // The stored image decodes to the rendered scene at byte fidelity.
    auto img = render_scene(a);
    auto px = read_ppm(image_path(dir.str(), a.id));
    REQUIRE(px.shape == img.shape);
    for (int64_t j = 0; j < img.numel(); ++j)
      CHECK(px.data[j] ==
            doctest::Approx(std::round(img.data[j] * 255.0f) / 255.0f)
                .epsilon(1e-6));
  }
}

TEST_CASE("dataset writes are deterministic") {
  Dataset ds = make_dataset(7, 25);
  TempDir d1("det1"), d2("det2");
  write_dataset(d1.str(), ds);
  write_dataset(d2.str(), ds);
  CHECK(read_file(d1.str() + "/scenes.jsonl") ==
        read_file(d2.str() + "/scenes.jsonl"));
  CHECK(read_file(d1.str() + "/vocab.json") ==
        read_file(d2.str() + "/vocab.json"));
  CHECK(read_file(image_path(d1.str(), 3)) == read_file(image_path(d2.str(), 3)));
}

TEST_CASE("malformed scene lines are reported with their line number") {
  Dataset ds = make_dataset(9, 12);
  TempDir dir("badline");
  write_dataset(dir.str(), ds);
  std::string path = dir.str() + "/scenes.jsonl";
  std::string contents = read_file(path);

  SUBCASE("broken json") {
    write_file_atomic(path, contents + "{not json\n");
    try {
      read_dataset(dir.str());
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("line 13") != std::string::npos);
    }
  }
  SUBCASE("unknown predicate") {
    auto pos = contents.find("\"p\":\"");
    REQUIRE(pos != std::string::npos);
    std::string mutated = contents;
    mutated.replace(pos, 5, "\"p\":\"?");
    write_file_atomic(path, mutated);
    CHECK_THROWS_AS(read_dataset(dir.str()), FormatError);
  }
  SUBCASE("missing field") {
    write_file_atomic(path, "{\"id\":0}\n");
    CHECK_THROWS_AS(read_dataset(dir.str()), FormatError);
  }
  SUBCASE("vocab word list must match") {
    write_file_atomic(dir.str() + "/vocab.json", "{\"words\":[]}");
    CHECK_THROWS_AS(read_dataset(dir.str()), FormatError);
  }
}

TEST_CASE("generate_dataset rejects a bad count") {
  Vocab v = Vocab::standard();
  CHECK_THROWS_AS(generate_dataset(v, {1, 0, 0.5, 0}), InvalidCount);
}
