#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "phanes/image.hpp"

namespace phanes::io {

namespace fs = std::filesystem;

/// Grayscale PNG, 8 or 16 bit. Values are scaled to [0, 1].
Image read_png(const fs::path& path);
/// Values are clipped to [0, 1] and scaled to the full bit range.
void write_png(const fs::path& path, const Grid<double>& image, int bit_depth = 16);
void write_mask_png(const fs::path& path, const BinaryMask& mask);
BinaryMask read_mask_png(const fs::path& path);

/// Centre axial slice of a NIfTI-1 volume (.nii or .nii.gz), with the
/// header's slope/intercept applied. Values are raw (not normalized).
Grid<double> read_nifti_center_slice(const fs::path& path);

/// One manifest line: image path, optional mask path, optional healthy
/// reference path; tab separated, paths relative to the manifest.
struct ManifestRecord {
  std::string image;
  std::optional<std::string> mask;
  std::optional<std::string> reference;
};

std::vector<ManifestRecord> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records);

/// Raw little-endian float64 grid with a small text header; lossless.
void write_raw_grid(const fs::path& path, const Grid<double>& grid);
Grid<double> read_raw_grid(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace phanes::io
