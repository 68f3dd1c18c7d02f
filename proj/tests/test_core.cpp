#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "ropnet/core/rng.hpp"
#include "ropnet/core/sha256.hpp"
#include "ropnet/core/tensor.hpp"
#include "ropnet/core/parallel.hpp"
#include "ropnet/io/image_io.hpp"

using namespace ropnet;

TEST_CASE("tensor shape and accessors") {
  Tensor t({2, 3, 4}, 1.5);
  REQUIRE(t.size() == 24);
  t.at(1, 2, 3) = 7.0;
  REQUIRE(t.at(1, 2, 3) == 7.0);
  REQUIRE(t.sum() == Catch::Approx(23 * 1.5 + 7.0));
  REQUIRE_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), Error);
}

TEST_CASE("rng determinism and derive independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
  REQUIRE(Rng::derive(1, 2) != Rng::derive(1, 3));
  REQUIRE(Rng::derive(1, 2) == Rng::derive(1, 2));

  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    double u = c.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("sha256 known vectors") {
  REQUIRE(Sha256::hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  REQUIRE(Sha256::hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("parallel_for covers every index exactly once") {
  std::vector<int> hits(1000, 0);
  parallel_for(1000, [&](int i) { hits[static_cast<size_t>(i)] += 1; }, 4);
  for (int h : hits) REQUIRE(h == 1);
}

TEST_CASE("png rgb8 round trip") {
  ImageU8 img;
  img.h = 13;
  img.w = 17;
  img.c = 3;
  img.data.resize(13 * 17 * 3);
  Rng rng(5);
  for (auto& v : img.data) v = static_cast<uint8_t>(rng.uniform_int(0, 255));
  auto path = std::filesystem::temp_directory_path() / "ropnet_test_rgb.png";
  write_png_rgb8(path.string(), img);
  ImageU8 back = read_image(path.string());
  REQUIRE(back.h == img.h);
  REQUIRE(back.w == img.w);
  REQUIRE(back.c == 3);
  REQUIRE(back.data == img.data);
  std::filesystem::remove(path);
}

TEST_CASE("png gray16 round trip is bit exact") {
  ImageU16 img;
  img.h = 9;
  img.w = 11;
  img.data.resize(9 * 11);
  Rng rng(6);
  for (auto& v : img.data) v = static_cast<uint16_t>(rng.uniform_int(0, 65535));
  auto path = std::filesystem::temp_directory_path() / "ropnet_test_g16.png";
  write_png_gray16(path.string(), img);
  ImageU16 back = read_image_gray16(path.string());
  REQUIRE(back.data == img.data);
  std::filesystem::remove(path);
}

TEST_CASE("bmp read matches png content") {
  // hand-build a tiny 24-bit BMP: 2x2, bottom-up
  const uint8_t px[4][3] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {10, 20, 30}};
  std::vector<uint8_t> bmp;
  auto put32 = [&](uint32_t v) {
    for (int i = 0; i < 4; ++i) bmp.push_back(static_cast<uint8_t>(v >> (8 * i)));
  };
  auto put16 = [&](uint16_t v) {
    bmp.push_back(static_cast<uint8_t>(v & 0xff));
    bmp.push_back(static_cast<uint8_t>(v >> 8));
  };
  bmp.push_back('B');
  bmp.push_back('M');
  put32(54 + 16);
  put32(0);
  put32(54);
  put32(40);
  put32(2);
  put32(2);
  put16(1);
  put16(24);
  put32(0);
  put32(16);
  put32(2835);
  put32(2835);
  put32(0);
  put32(0);
  // rows bottom-up, BGR, padded to 4 bytes (2*3=6 -> pad 2)
  auto push_px = [&](const uint8_t* p) {
    bmp.push_back(p[2]);
    bmp.push_back(p[1]);
    bmp.push_back(p[0]);
  };
  push_px(px[2]);
  push_px(px[3]);
  bmp.push_back(0);
  bmp.push_back(0);
  push_px(px[0]);
  push_px(px[1]);
  bmp.push_back(0);
  bmp.push_back(0);

  auto path = std::filesystem::temp_directory_path() / "ropnet_test.bmp";
  {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    std::fwrite(bmp.data(), 1, bmp.size(), f);
    std::fclose(f);
  }
  ImageU8 img = read_image(path.string());
  REQUIRE(img.h == 2);
  REQUIRE(img.w == 2);
  REQUIRE(img.at(0, 0, 0) == 255);
  REQUIRE(img.at(0, 1, 1) == 255);
  REQUIRE(img.at(1, 0, 2) == 255);
  REQUIRE(img.at(1, 1, 0) == 10);
  std::filesystem::remove(path);
}
