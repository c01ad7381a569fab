#include "mus/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

#include <json.hpp>

// Raw payloads are defined little-endian; this code writes native byte order.
static_assert(std::endian::native == std::endian::little,
              "raw formats require a little-endian host");

namespace mus {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
const char* payload_name() {
  if constexpr (std::is_same_v<T, float>)
    return "intensity";
  else
    return "label";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open for writing: " + path.string());
  out << text;
  require(out.good(), "write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  require(out.good(), "write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, size_t count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), "cannot open: " + path.string());
  const auto size = static_cast<size_t>(in.tellg());
  require(size == count * sizeof(T),
          "raw file " + path.string() + " has " + std::to_string(size) +
              " bytes, expected " + std::to_string(count * sizeof(T)));
  std::vector<T> data(count);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(size));
  require(in.good(), "read failed: " + path.string());
  return data;
}

std::string frame_file_name(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04lld.raw",
                static_cast<long long>(i));
  return buf;
}

template <typename T>
void save_stack_impl(const FrameStackT<T>& stack, const fs::path& dir) {
  stack.validate();
  fs::create_directories(dir);
  json frames = json::array();
  for (int64_t i = 0; i < stack.geometry.frame_count(); ++i) {
    const std::string name = frame_file_name(i);
    write_raw(dir / name, stack.frames[static_cast<size_t>(i)]);
    frames.push_back({{"file", name},
                      {"angle_deg", stack.geometry.angles_deg[static_cast<size_t>(i)]}});
  }
  json m = {{"format", "mus-frame-stack"},
            {"version", 1},
            {"payload", payload_name<T>()},
            {"probe_radius_mm", stack.geometry.probe_radius_mm},
            {"axial_pixels", stack.geometry.axial_pixels},
            {"radial_pixels", stack.geometry.radial_pixels},
            {"axial_spacing_mm", stack.geometry.axial_spacing_mm},
            {"radial_spacing_mm", stack.geometry.radial_spacing_mm},
            {"frames", frames}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

template <typename T>
FrameStackT<T> load_stack_impl(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  require(m.value("format", "") == "mus-frame-stack",
          dir.string() + ": not a frame-stack manifest");
  require(m.value("payload", "") == payload_name<T>(),
          dir.string() + ": payload is '" + m.value("payload", "") +
              "', expected '" + payload_name<T>() + "'");
  FrameStackT<T> stack;
  FanGeometry& g = stack.geometry;
  g.probe_radius_mm = m.at("probe_radius_mm").get<double>();
  g.axial_pixels = m.at("axial_pixels").get<int64_t>();
  g.radial_pixels = m.at("radial_pixels").get<int64_t>();
  g.axial_spacing_mm = m.at("axial_spacing_mm").get<double>();
  g.radial_spacing_mm = m.at("radial_spacing_mm").get<double>();
  const size_t px = static_cast<size_t>(g.radial_pixels * g.axial_pixels);
  for (const auto& fr : m.at("frames")) {
    g.angles_deg.push_back(fr.at("angle_deg").get<double>());
    stack.frames.push_back(read_raw<T>(dir / fr.at("file").get<std::string>(), px));
  }
  stack.validate();
  return stack;
}

template <typename T>
void save_volume_impl(const VolumeT<T>& vol, const fs::path& path) {
  vol.validate();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::string data_file = path.stem().string() + ".raw";
  write_raw(path.parent_path() / data_file, vol.values);
  json h = {{"format", "mus-volume"},
            {"version", 1},
            {"payload", payload_name<T>()},
            {"dims", vol.grid.dims},
            {"spacing_mm", vol.grid.spacing_mm},
            {"origin_mm", vol.grid.origin_mm},
            {"data_file", data_file}};
  write_text(path, h.dump(2) + "\n");
}

template <typename T>
VolumeT<T> load_volume_impl(const fs::path& path) {
  const json h = read_json(path);
  require(h.value("format", "") == "mus-volume",
          path.string() + ": not a volume header");
  require(h.value("payload", "") == payload_name<T>(),
          path.string() + ": payload is '" + h.value("payload", "") +
              "', expected '" + payload_name<T>() + "'");
  VolumeT<T> vol;
  for (int a = 0; a < 3; ++a) {
    vol.grid.dims[a] = h.at("dims").at(a).get<int64_t>();
    vol.grid.spacing_mm[a] = h.at("spacing_mm").at(a).get<double>();
    vol.grid.origin_mm[a] = h.at("origin_mm").at(a).get<double>();
  }
  vol.grid.validate();
  vol.values = read_raw<T>(
      path.parent_path() / h.at("data_file").get<std::string>(),
      static_cast<size_t>(vol.grid.voxel_count()));
  vol.validate();
  return vol;
}

}  // namespace

void save_stack(const ImageStack& stack, const fs::path& dir) {
  save_stack_impl(stack, dir);
}
void save_stack(const LabelStack& stack, const fs::path& dir) {
  save_stack_impl(stack, dir);
}
ImageStack load_image_stack(const fs::path& dir) {
  return load_stack_impl<float>(dir);
}
LabelStack load_label_stack(const fs::path& dir) {
  return load_stack_impl<uint8_t>(dir);
}

void save_volume(const ImageVolume& vol, const fs::path& path) {
  save_volume_impl(vol, path);
}
void save_volume(const LabelVolume& vol, const fs::path& path) {
  save_volume_impl(vol, path);
}
ImageVolume load_image_volume(const fs::path& path) {
  return load_volume_impl<float>(path);
}
LabelVolume load_label_volume(const fs::path& path) {
  return load_volume_impl<uint8_t>(path);
}

std::string volume_payload(const fs::path& path) {
  return read_json(path).value("payload", "");
}

}  // namespace mus
