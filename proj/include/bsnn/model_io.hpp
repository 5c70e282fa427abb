#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bsnn/model.hpp"
#include "bsnn/tensor.hpp"

namespace bsnn {

// On-disk model: <dir>/model.json (UTF-8 manifest) and <dir>/weights.bin
// (float32 little-endian blobs, row-major, at the byte offsets listed in the
// manifest's "blobs" table). Blob layouts: dense W[out][in], conv
// W[out_c][in_c][kh][kw].

inline constexpr const char* kManifestFile = "model.json";
inline constexpr const char* kWeightsFile = "weights.bin";

void save_model(const ModelGraph& model, const std::filesystem::path& dir);
ModelGraph load_model(const std::filesystem::path& dir);

/// Manifest text and weight bytes without touching the filesystem.
struct SerializedModel {
    std::string manifest;
    std::vector<std::uint8_t> weights;
};
SerializedModel serialize_model(const ModelGraph& model);
ModelGraph deserialize_model(const std::string& manifest, const std::vector<std::uint8_t>& weights);

struct Dataset {
    Tensor inputs; ///< [N x sample dims...]
    std::vector<int> labels;

    std::size_t count() const { return labels.size(); }
    Shape sample_shape() const;
    Tensor sample(std::size_t i) const;
    Dataset subset(std::size_t begin, std::size_t count) const;
};

enum class DatasetFormat { idx, bsd };

DatasetFormat dataset_format_from_name(const std::string& name);

/// Reads an IDX image file (magic 0x00000803, u8 pixels promoted to float
/// without rescaling) or a BSD fixture file. For IDX, labels are read from
/// `labels_path`, or from the sibling file obtained by replacing
/// "images-idx3" with "labels-idx1" in the file name.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     const std::filesystem::path& labels_path = {});

/// BSD1 layout: "BSD1", u32 N, u32 rank, rank x u32 dims, N*prod(dims) f32,
/// N x u8 labels. All little-endian.
void save_dataset_bsd(const Dataset& data, const std::filesystem::path& path);

/// x' = (x - offset) / divisor, applied to every input element.
struct InputNormalization {
    double offset = 0.0;
    double divisor = 1.0;
    bool operator==(const InputNormalization&) const = default;
};

void normalize_inputs(Dataset& data, const InputNormalization& norm);

} // namespace bsnn
