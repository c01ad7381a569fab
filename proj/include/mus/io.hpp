#pragma once

#include <filesystem>
#include <string>

#include "mus/geometry.hpp"

namespace mus {

// Frame stack on disk: <dir>/manifest.json holds the geometry plus one
// {file, angle_deg} entry per frame; payloads are raw little-endian arrays in
// row-major order (radial major, axial minor) — float32 for intensity stacks,
// uint8 for label stacks. The manifest's payload field ("intensity"/"label")
// must match the requested type.
void save_stack(const ImageStack& stack, const std::filesystem::path& dir);
void save_stack(const LabelStack& stack, const std::filesystem::path& dir);
ImageStack load_image_stack(const std::filesystem::path& dir);
LabelStack load_label_stack(const std::filesystem::path& dir);

// Volume on disk: <path> is a JSON header (dims, spacing_mm, origin_mm,
// payload, data_file); the raw values live next to it in little-endian
// x-fastest order, float32 or uint8 by payload kind.
void save_volume(const ImageVolume& vol, const std::filesystem::path& path);
void save_volume(const LabelVolume& vol, const std::filesystem::path& path);
ImageVolume load_image_volume(const std::filesystem::path& path);
LabelVolume load_label_volume(const std::filesystem::path& path);

// Peeks at a volume header's payload kind ("intensity" or "label").
std::string volume_payload(const std::filesystem::path& path);

}  // namespace mus
