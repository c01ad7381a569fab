#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mus/io.hpp"

using namespace mus;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("mus_io_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

FanGeometry tiny_geom() {
  FanGeometry g;
  g.probe_radius_mm = 5.0;
  g.axial_pixels = 3;
  g.radial_pixels = 4;
  g.axial_spacing_mm = 0.5;
  g.radial_spacing_mm = 0.25;
  g.angles_deg = {-2.0, 0.0, 1.5};
  return g;
}

}  // namespace

TEST_SUITE_BEGIN("io");

TEST_CASE("image stack round trip is bit-exact") {
  TempDir tmp;
  ImageStack s;
  s.geometry = tiny_geom();
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<float> val(-10.f, 300.f);
  for (int f = 0; f < 3; ++f) {
    std::vector<float> frame(12);
    for (auto& px : frame) px = val(rng);
    s.frames.push_back(std::move(frame));
  }
  save_stack(s, tmp.path / "stack");
  const ImageStack r = load_image_stack(tmp.path / "stack");
  CHECK(r.geometry.probe_radius_mm == s.geometry.probe_radius_mm);
  CHECK(r.geometry.angles_deg == s.geometry.angles_deg);
  for (int f = 0; f < 3; ++f) CHECK(r.frames[f] == s.frames[f]);
}

TEST_CASE("label stack round trip and payload mismatch") {
  TempDir tmp;
  LabelStack s;
  s.geometry = tiny_geom();
  for (int f = 0; f < 3; ++f)
    s.frames.push_back(std::vector<uint8_t>(12, static_cast<uint8_t>(f)));
  save_stack(s, tmp.path / "labels");
  const LabelStack r = load_label_stack(tmp.path / "labels");
  for (int f = 0; f < 3; ++f) CHECK(r.frames[f] == s.frames[f]);
  // An intensity loader must refuse a label manifest, and vice versa.
  CHECK_THROWS(load_image_stack(tmp.path / "labels"));
}

TEST_CASE("volume round trips preserve grid and payload") {
  TempDir tmp;
  ImageVolume v;
  v.grid.dims = {3, 2, 2};
  v.grid.spacing_mm = {0.5, 0.5, 1.0};
  v.grid.origin_mm = {-1.0, 2.0, 0.25};
  v.values = {1.f, 2.f, 3.f, 4.f, 5.f, 6.f, 7.f, 8.f, 9.f, 10.f, 11.f, 12.f};
  save_volume(v, tmp.path / "vol.json");
  const ImageVolume r = load_image_volume(tmp.path / "vol.json");
  CHECK(r.grid == v.grid);
  CHECK(r.values == v.values);
  CHECK(volume_payload(tmp.path / "vol.json") == "intensity");

  LabelVolume m;
  m.grid = v.grid;
  m.values.assign(12, 1);
  m.values[5] = 0;
  save_volume(m, tmp.path / "mask.json");
  const LabelVolume rm = load_label_volume(tmp.path / "mask.json");
  CHECK(rm.values == m.values);
  CHECK(volume_payload(tmp.path / "mask.json") == "label");
  CHECK_THROWS(load_image_volume(tmp.path / "mask.json"));
  CHECK_THROWS(load_label_volume(tmp.path / "vol.json"));
}

TEST_CASE("truncated raw payload is rejected") {
  TempDir tmp;
  ImageVolume v;
  v.grid.dims = {4, 2, 1};
  v.grid.spacing_mm = {1, 1, 1};
  v.values.assign(8, 1.f);
  save_volume(v, tmp.path / "vol.json");
  fs::resize_file(tmp.path / "vol.raw", 8 * sizeof(float) - 4);
  CHECK_THROWS(load_image_volume(tmp.path / "vol.json"));
}

TEST_CASE("corrupt manifest is rejected") {
  TempDir tmp;
  LabelStack s;
  s.geometry = tiny_geom();
  for (int f = 0; f < 3; ++f) s.frames.push_back(std::vector<uint8_t>(12, 0));
  save_stack(s, tmp.path / "stack");
  {
    std::ofstream bad(tmp.path / "stack" / "manifest.json");
    bad << "{\"format\": \"something-else\"}\n";
  }
  CHECK_THROWS(load_label_stack(tmp.path / "stack"));
  CHECK_THROWS(load_label_stack(tmp.path / "missing"));
}

TEST_SUITE_END();
