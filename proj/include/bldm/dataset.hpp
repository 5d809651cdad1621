#pragma once

// Volume files on disk: NIfTI + JSON sidecar per item, CSV index per dataset,
// and the ingest path for externally registered volumes.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "bldm/nifti.hpp"
#include "bldm/phantom.hpp"

namespace bldm {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Shape/spacing every volume of a configuration must satisfy.
struct VolumeContract {
    Index3 shape{32, 32, 32};
    Spacing3 spacing{5.0, 7.0, 5.0};
    int factor = 8;  // compressor downsampling factor

    static VolumeContract full_scale() { return {{160, 224, 160}, {1.0, 1.0, 1.0}, 8}; }

    void validate() const {
        for (int i = 0; i < 3; ++i) {
            if (shape[i] <= 0 || !(spacing[i] > 0))
                throw std::invalid_argument("volume contract needs positive shape and spacing");
            if (factor <= 0 || shape[i] % factor != 0)
                throw std::invalid_argument("shape " + index3_str(shape) + " is not divisible by the downsampling factor " +
                                            std::to_string(factor));
        }
    }

    void check(const Volume& v, const std::string& what) const {
        if (v.shape() != shape)
            throw std::invalid_argument(what + ": shape mismatch, expected " + index3_str(shape) + ", found " +
                                        index3_str(v.shape()));
        for (int i = 0; i < 3; ++i)
            if (std::abs(v.spacing[i] - spacing[i]) > 1e-4 * spacing[i])
                throw std::invalid_argument(what + ": spacing mismatch, expected " + spacing3_str(spacing) +
                                            " mm, found " + spacing3_str(v.spacing) + " mm");
    }
};

struct IntensityRange {
    double min = 0.0;
    double max = 1.0;
};

inline void rescale_intensities(Volume& v, const IntensityRange& r) {
    const double span = r.max > r.min ? r.max - r.min : 1.0;
    for (auto& x : v.data.data) x = static_cast<float>((double(x) - r.min) / span);
}

namespace detail {
inline void check_finite_file(const Volume& v, const std::string& path) {
    for (std::size_t i = 0; i < v.numel(); ++i)
        if (!std::isfinite(v.data.data[i]))
            throw std::invalid_argument(path + ": non-finite voxel at linear index " + std::to_string(i));
}
}  // namespace detail

// Reads and validates a pre-registered volume. Intensities are min-max scaled
// by `range` (the dataset-level range); without one, the volume's own range.
inline Volume ingest_volume(const std::string& path, const VolumeContract& contract,
                            std::optional<IntensityRange> range = std::nullopt) {
    if (!fs::exists(path)) throw std::invalid_argument(path + ": no such file");
    Volume v = nifti::read(path).volume;
    detail::check_finite_file(v, path);
    contract.check(v, path);
    if (!range) {
        auto [mn, mx] = std::minmax_element(v.data.data.begin(), v.data.data.end());
        range = IntensityRange{*mn, *mx};
    }
    rescale_intensities(v, *range);
    v.source = VolumeSource::ingested;
    return v;
}

// Ingests a set of volumes sharing one dataset-level intensity range.
inline std::vector<Volume> ingest_dataset(const std::vector<std::string>& paths, const VolumeContract& contract) {
    std::vector<Volume> raw;
    IntensityRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto& p : paths) {
        Volume v = nifti::read(p).volume;
        detail::check_finite_file(v, p);
        contract.check(v, p);
        for (float x : v.data.data) r.min = std::min(r.min, double(x)), r.max = std::max(r.max, double(x));
        raw.push_back(std::move(v));
    }
    for (auto& v : raw) {
        rescale_intensities(v, r);
        v.source = VolumeSource::ingested;
    }
    return raw;
}

// ------------------------------------------------------------------ sidecars

struct ItemRecord {
    std::string id;
    Covariates covariates;
    Conditioning normalized{};
    std::uint64_t seed = 0;
    VolumeSource source = VolumeSource::phantom;
    std::string path;  // volume file, relative to the dataset directory
};

inline json covariates_json(const Covariates& c) {
    return {{"age", c.age}, {"sex", c.sex}, {"ventricular_volume", c.ventricular_volume},
            {"brain_volume_norm", c.brain_volume_norm}};
}

inline json conditioning_json(const Conditioning& c) {
    return {{"age", c[cond::age]}, {"sex", c[cond::sex]}, {"ventricular_volume", c[cond::ventricular]},
            {"brain_volume_norm", c[cond::brain]}};
}

inline Covariates covariates_from_json(const json& j) {
    return {j.at("age").get<double>(), j.at("sex").get<double>(), j.at("ventricular_volume").get<double>(),
            j.at("brain_volume_norm").get<double>()};
}

inline Conditioning conditioning_from_json(const json& j) {
    return {j.at("age").get<double>(), j.at("sex").get<double>(), j.at("ventricular_volume").get<double>(),
            j.at("brain_volume_norm").get<double>()};
}

inline json sidecar_json(const ItemRecord& r) {
    return {{"id", r.id},
            {"source", to_string(r.source)},
            {"seed", r.seed},
            {"covariates_raw", covariates_json(r.covariates)},
            {"covariates_normalized", conditioning_json(r.normalized)}};
}

inline fs::path sidecar_path(const fs::path& volume_path) {
    fs::path p = volume_path;
    return p.replace_extension(".json");
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os << text;
        if (!os) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return json::parse(is);
}

// Writes `<dir>/<record.path>` and its sidecar.
inline void write_item(const fs::path& dir, const ItemRecord& r, const Volume& v) {
    const fs::path vp = dir / r.path;
    fs::create_directories(vp.parent_path());
    nifti::write(v, vp.string());
    write_text_atomic(sidecar_path(vp), sidecar_json(r).dump(2) + "\n");
}

inline ItemRecord read_sidecar(const fs::path& volume_path) {
    const json j = read_json(sidecar_path(volume_path));
    ItemRecord r;
    r.id = j.at("id").get<std::string>();
    r.source = volume_source_from_string(j.at("source").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.covariates = covariates_from_json(j.at("covariates_raw"));
    r.normalized = conditioning_from_json(j.at("covariates_normalized"));
    return r;
}

inline std::string format_number(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline const char* index_header = "id,age,sex,ventricular_volume,brain_volume_norm,path";

inline std::string index_csv(const std::vector<ItemRecord>& items) {
    std::string out = std::string(index_header) + "\n";
    for (const auto& r : items)
        out += r.id + "," + format_number(r.covariates.age) + "," + format_number(r.covariates.sex) + "," +
               format_number(r.covariates.ventricular_volume) + "," + format_number(r.covariates.brain_volume_norm) +
               "," + r.path + "\n";
    return out;
}

inline std::vector<ItemRecord> read_index_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    if (line != index_header) throw std::runtime_error(path.string() + ": unexpected index header '" + line + "'");
    std::vector<ItemRecord> items;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 6) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        ItemRecord r;
        r.id = f[0];
        r.covariates = {std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])};
        r.path = f[5];
        items.push_back(std::move(r));
    }
    return items;
}

}  // namespace bldm
