#include "bsnn/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>

#include <json.hpp>

#include "bsnn/errors.hpp"

namespace bsnn {

using nlohmann::json;

namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

std::uint32_t to_le(std::uint32_t v)
{
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    return v;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    v = to_le(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + 4);
}

void put_f32(std::vector<std::uint8_t>& out, float f)
{
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::uint32_t get_u32(const std::uint8_t* p)
{
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return to_le(v);
}

float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

std::uint32_t get_u32_be(const std::uint8_t* p)
{
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
           std::uint32_t{p[3]};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const void* data, std::size_t size)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

class BlobWriter {
public:
    std::string add(const std::string& name, const Tensor& t)
    {
        if (t.empty()) {
            throw ValidationError("dangling blob reference: " + name + " has no data");
        }
        index_[name] = {{"offset", bytes_.size()}, {"shape", t.shape()}};
        for (float v : t.data()) {
            put_f32(bytes_, v);
        }
        return name;
    }

    json index() const { return index_; }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    json index_ = json::object();
    std::vector<std::uint8_t> bytes_;
};

json layers_to_json(const std::vector<Layer>& layers, const std::string& base, BlobWriter& blobs)
{
    json out = json::array();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string path = layer_path(base, i);
        json j;
        j["kind"] = kind_name(layers[i].kind());
        std::visit(Overloaded{
                       [&](const InputLayer& l) { j["shape"] = l.shape; },
                       [&](const DenseLayer& l) {
                           j["units"] = l.units;
                           j["weight"] = blobs.add(path + ".weight", l.weight);
                           j["bias"] = blobs.add(path + ".bias", l.bias);
                       },
                       [&](const Conv2dLayer& l) {
                           j["out_channels"] = l.out_channels;
                           j["kernel"] = l.kernel;
                           j["stride"] = l.stride;
                           j["pad"] = l.pad;
                           j["weight"] = blobs.add(path + ".weight", l.weight);
                           j["bias"] = blobs.add(path + ".bias", l.bias);
                       },
                       [&](const BatchNormLayer& l) {
                           j["mean"] = blobs.add(path + ".mean", l.mean);
                           j["std"] = blobs.add(path + ".std", l.std);
                           j["gamma"] = blobs.add(path + ".gamma", l.gamma);
                           j["beta"] = blobs.add(path + ".beta", l.beta);
                       },
                       [&](const ReluLayer&) {},
                       [&](const PoolLayer& l) {
                           j["kernel"] = l.kernel;
                           j["stride"] = l.stride;
                       },
                       [&](const FlattenLayer&) {},
                       [&](const ResidualLayer& l) {
                           j["shortcut_gain"] = l.shortcut_gain;
                           j["body"] = layers_to_json(l.body, path + ".body", blobs);
                           j["shortcut"] = layers_to_json(l.shortcut, path + ".shortcut", blobs);
                       },
                   },
                   layers[i].op);
        out.push_back(std::move(j));
    }
    return out;
}

class BlobReader {
public:
    BlobReader(const json& index, const std::vector<std::uint8_t>& bytes)
        : index_(index), bytes_(bytes)
    {
    }

    Tensor get(const json& layer, const char* field, const std::string& path)
    {
        if (!layer.contains(field)) {
            throw ValidationError(path + ": missing blob field '" + field + "'");
        }
        const std::string name = layer.at(field).get<std::string>();
        if (!index_.contains(name)) {
            throw ValidationError(path + ": dangling blob reference '" + name + "'");
        }
        used_.insert(name);
        const json& entry = index_.at(name);
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t n = shape_numel(shape);
        if (offset % 4 != 0) {
            throw FormatError("blob '" + name + "' offset is not 4-byte aligned");
        }
        if (offset + 4 * n > bytes_.size()) {
            throw TruncationError("weights file truncated: blob '" + name + "' needs bytes [" +
                                  std::to_string(offset) + ", " + std::to_string(offset + 4 * n) +
                                  ") but file has " + std::to_string(bytes_.size()));
        }
        std::vector<float> data(n);
        for (std::size_t k = 0; k < n; ++k) {
            data[k] = get_f32(bytes_.data() + offset + 4 * k);
        }
        return Tensor(shape, std::move(data));
    }

    void check_all_used() const
    {
        for (const auto& [name, entry] : index_.items()) {
            if (!used_.contains(name)) {
                throw ValidationError("blob '" + name + "' is not referenced by any layer");
            }
        }
    }

private:
    const json& index_;
    const std::vector<std::uint8_t>& bytes_;
    std::set<std::string> used_;
};

std::size_t get_size(const json& j, const char* field, const std::string& path)
{
    if (!j.contains(field)) {
        throw FormatError(path + ": missing field '" + field + "'");
    }
    return j.at(field).get<std::size_t>();
}

std::vector<Layer> layers_from_json(const json& arr, const std::string& base, BlobReader& blobs)
{
    if (!arr.is_array()) {
        throw FormatError(base + ": expected a layer array");
    }
    std::vector<Layer> layers;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const json& j = arr[i];
        const std::string path = layer_path(base, i);
        const LayerKind kind = kind_from_name(j.at("kind").get<std::string>());
        switch (kind) {
        case LayerKind::input:
            layers.push_back(make_input(j.at("shape").get<Shape>()));
            break;
        case LayerKind::dense: {
            DenseLayer l;
            l.units = get_size(j, "units", path);
            l.weight = blobs.get(j, "weight", path);
            l.bias = blobs.get(j, "bias", path);
            layers.push_back(Layer{std::move(l)});
            break;
        }
        case LayerKind::conv2d: {
            Conv2dLayer l;
            l.out_channels = get_size(j, "out_channels", path);
            l.kernel = get_size(j, "kernel", path);
            l.stride = j.value("stride", std::size_t{1});
            l.pad = j.value("pad", std::size_t{0});
            l.weight = blobs.get(j, "weight", path);
            l.bias = blobs.get(j, "bias", path);
            layers.push_back(Layer{std::move(l)});
            break;
        }
        case LayerKind::batchnorm: {
            BatchNormLayer l;
            l.mean = blobs.get(j, "mean", path);
            l.std = blobs.get(j, "std", path);
            l.gamma = blobs.get(j, "gamma", path);
            l.beta = blobs.get(j, "beta", path);
            layers.push_back(Layer{std::move(l)});
            break;
        }
        case LayerKind::relu: layers.push_back(make_relu()); break;
        case LayerKind::maxpool2d:
        case LayerKind::avgpool2d:
            layers.push_back(make_pool(kind == LayerKind::maxpool2d ? PoolKind::max : PoolKind::avg,
                                       get_size(j, "kernel", path),
                                       j.value("stride", get_size(j, "kernel", path))));
            break;
        case LayerKind::flatten: layers.push_back(make_flatten()); break;
        case LayerKind::residual:
            layers.push_back(make_residual(layers_from_json(j.at("body"), path + ".body", blobs),
                                           layers_from_json(j.value("shortcut", json::array()),
                                                            path + ".shortcut", blobs),
                                           j.value("shortcut_gain", 1.0f)));
            break;
        }
    }
    return layers;
}

} // namespace

SerializedModel serialize_model(const ModelGraph& model)
{
    validate_model(model);
    BlobWriter blobs;
    json manifest;
    manifest["format"] = "bsnn-model";
    manifest["version"] = model.version;
    manifest["input_shape"] = model.input_shape;
    manifest["layers"] = layers_to_json(model.layers, "layers", blobs);
    manifest["blobs"] = blobs.index();
    return {manifest.dump(2) + "\n", blobs.take()};
}

ModelGraph deserialize_model(const std::string& manifest_text, const std::vector<std::uint8_t>& weights)
{
    json manifest;
    try {
        manifest = json::parse(manifest_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("model.json is not valid JSON: ") + e.what());
    }
    try {
        const int version = manifest.at("version").get<int>();
        if (version != kModelVersion) {
            throw VersionError("unsupported model version " + std::to_string(version) +
                               " (this build reads version " + std::to_string(kModelVersion) + ")");
        }
        ModelGraph model;
        model.version = version;
        model.input_shape = manifest.at("input_shape").get<Shape>();
        const json& index = manifest.contains("blobs") ? manifest.at("blobs") : json::object();
        BlobReader blobs(index, weights);
        model.layers = layers_from_json(manifest.at("layers"), "layers", blobs);
        blobs.check_all_used();
        validate_model(model);
        return model;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed model.json: ") + e.what());
    }
}

void save_model(const ModelGraph& model, const std::filesystem::path& dir)
{
    SerializedModel s = serialize_model(model);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    }
    write_file(dir / kWeightsFile, s.weights.data(), s.weights.size());
    write_file(dir / kManifestFile, s.manifest.data(), s.manifest.size());
}

ModelGraph load_model(const std::filesystem::path& dir)
{
    const std::vector<std::uint8_t> manifest = read_file(dir / kManifestFile);
    const std::vector<std::uint8_t> weights = read_file(dir / kWeightsFile);
    return deserialize_model(std::string(manifest.begin(), manifest.end()), weights);
}

Shape Dataset::sample_shape() const
{
    return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

Tensor Dataset::sample(std::size_t i) const
{
    const Shape shape = sample_shape();
    const std::size_t n = shape_numel(shape);
    const auto begin = inputs.values().begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor(shape, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(n)));
}

Dataset Dataset::subset(std::size_t begin, std::size_t n) const
{
    if (begin > count()) {
        begin = count();
    }
    n = std::min(n, count() - begin);
    Shape shape = inputs.shape();
    shape[0] = n;
    const std::size_t stride = shape_numel(sample_shape());
    const auto first = inputs.values().begin() + static_cast<std::ptrdiff_t>(begin * stride);
    Dataset out;
    out.inputs = Tensor(shape, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n * stride)));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      labels.begin() + static_cast<std::ptrdiff_t>(begin + n));
    return out;
}

DatasetFormat dataset_format_from_name(const std::string& name)
{
    if (name == "idx") {
        return DatasetFormat::idx;
    }
    if (name == "bsd") {
        return DatasetFormat::bsd;
    }
    throw FormatError("unknown dataset format '" + name + "' (expected idx or bsd)");
}

namespace {

Dataset load_bsd(const std::filesystem::path& path)
{
    const std::vector<std::uint8_t> bytes = read_file(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "BSD1", 4) != 0) {
        throw FormatError(path.string() + ": bad magic (expected BSD1)");
    }
    const std::uint32_t n = get_u32(bytes.data() + 4);
    const std::uint32_t rank = get_u32(bytes.data() + 8);
    std::size_t pos = 12;
    if (bytes.size() < pos + 4ull * rank) {
        throw FormatError(path.string() + ": truncated header");
    }
    Shape shape{n};
    for (std::uint32_t r = 0; r < rank; ++r, pos += 4) {
        shape.push_back(get_u32(bytes.data() + pos));
    }
    const std::size_t elems = shape_numel(shape);
    if (bytes.size() != pos + 4 * elems + n) {
        throw FormatError(path.string() + ": element count mismatch (header declares " +
                          std::to_string(elems) + " values and " + std::to_string(n) +
                          " labels, file has " + std::to_string(bytes.size() - pos) +
                          " payload bytes)");
    }
    std::vector<float> data(elems);
    for (std::size_t k = 0; k < elems; ++k, pos += 4) {
        data[k] = get_f32(bytes.data() + pos);
    }
    Dataset out;
    out.inputs = Tensor(shape, std::move(data));
    out.labels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels)
{
    const std::vector<std::uint8_t> img = read_file(images);
    if (img.size() < 16 || get_u32_be(img.data()) != 0x00000803u) {
        throw FormatError(images.string() + ": bad magic (expected IDX3 0x00000803)");
    }
    const std::uint32_t n = get_u32_be(img.data() + 4);
    const std::uint32_t rows = get_u32_be(img.data() + 8);
    const std::uint32_t cols = get_u32_be(img.data() + 12);
    const std::size_t elems = std::size_t{n} * rows * cols;
    if (img.size() != 16 + elems) {
        throw FormatError(images.string() + ": element count mismatch");
    }
    const std::vector<std::uint8_t> lab = read_file(labels);
    if (lab.size() < 8 || get_u32_be(lab.data()) != 0x00000801u) {
        throw FormatError(labels.string() + ": bad magic (expected IDX1 0x00000801)");
    }
    if (get_u32_be(lab.data() + 4) != n || lab.size() != 8 + std::size_t{n}) {
        throw FormatError(labels.string() + ": label count mismatch");
    }
    Dataset out;
    out.inputs = Tensor({n, rows, cols}, std::vector<float>(img.begin() + 16, img.end()));
    out.labels.assign(lab.begin() + 8, lab.end());
    return out;
}

} // namespace

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     const std::filesystem::path& labels_path)
{
    if (format == DatasetFormat::bsd) {
        return load_bsd(path);
    }
    std::filesystem::path labels = labels_path;
    if (labels.empty()) {
        std::string name = path.filename().string();
        const auto at = name.find("images-idx3");
        if (at == std::string::npos) {
            throw IoError("cannot infer IDX labels file for " + path.string());
        }
        name.replace(at, 11, "labels-idx1");
        labels = path.parent_path() / name;
    }
    return load_idx(path, labels);
}

void save_dataset_bsd(const Dataset& data, const std::filesystem::path& path)
{
    std::vector<std::uint8_t> out{'B', 'S', 'D', '1'};
    put_u32(out, static_cast<std::uint32_t>(data.count()));
    const Shape sample = data.sample_shape();
    put_u32(out, static_cast<std::uint32_t>(sample.size()));
    for (std::size_t d : sample) {
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (float v : data.inputs.data()) {
        put_f32(out, v);
    }
    for (int label : data.labels) {
        if (label < 0 || label > 255) {
            throw ValidationError("BSD labels must fit in u8");
        }
        out.push_back(static_cast<std::uint8_t>(label));
    }
    write_file(path, out.data(), out.size());
}

void normalize_inputs(Dataset& data, const InputNormalization& norm)
{
    if (!(norm.divisor != 0.0)) {
        throw DomainError("input normalization divisor must be non-zero");
    }
    for (float& v : data.inputs.data()) {
        v = static_cast<float>((v - norm.offset) / norm.divisor);
    }
}

} // namespace bsnn
