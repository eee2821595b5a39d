// dataset.hpp - synthetic training data with self-consistent supervision:
// every control signal is computed from the rendered target by the zoo
// extractors, which is what makes control properties testable at this scale.
#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "templet/image.hpp"
#include "templet/manifest.hpp"
#include "templet/rng.hpp"
#include "templet/zoo.hpp"

namespace templet::zoo {

enum class DatasetKind {
    brightness,
    color,
    sharpness,
    structural,
    edit,
    superres,
    inpaint,
    preference,
    reference,
};

inline const char* dataset_kind_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::brightness: return "brightness";
        case DatasetKind::color: return "color";
        case DatasetKind::sharpness: return "sharpness";
        case DatasetKind::structural: return "structural";
        case DatasetKind::edit: return "edit";
        case DatasetKind::superres: return "superres";
        case DatasetKind::inpaint: return "inpaint";
        case DatasetKind::preference: return "preference";
        case DatasetKind::reference: return "reference";
    }
    return "?";
}

inline DatasetKind dataset_kind_from(const std::string& name) {
    for (DatasetKind k :
         {DatasetKind::brightness, DatasetKind::color, DatasetKind::sharpness,
          DatasetKind::structural, DatasetKind::edit, DatasetKind::superres,
          DatasetKind::inpaint, DatasetKind::preference, DatasetKind::reference})
        if (name == dataset_kind_name(k)) return k;
    throw ParseError("unknown dataset kind '" + name + "'");
}

struct Sample {
    TemplateInput input;
    Image target;
    int condition_id = 0;
    std::map<std::string, std::string> meta;
    std::vector<Image> aux;  // e.g. the non-preferred image of a pair
};

struct Dataset {
    DatasetKind kind = DatasetKind::brightness;
    std::vector<Sample> samples;
};

// An editable rectangle covering roughly a quadrant, clipped to the canvas.
inline Image random_mask(Rng& rng, int size) {
    int x0 = static_cast<int>(rng.below(static_cast<uint64_t>(size / 2)));
    int y0 = static_cast<int>(rng.below(static_cast<uint64_t>(size / 2)));
    int w = size / 4 + static_cast<int>(rng.below(static_cast<uint64_t>(size / 2)));
    int h = size / 4 + static_cast<int>(rng.below(static_cast<uint64_t>(size / 2)));
    Image mask(size, size, 0.0f);
    for (int y = y0; y < std::min(size, y0 + h); ++y)
        for (int x = x0; x < std::min(size, x0 + w); ++x)
            for (int c = 0; c < 3; ++c) mask.at(y, x, c) = 1.0f;
    return mask;
}

// Deterministic per (kind, n, seed); per-sample streams are derived so
// generation could run sample-parallel without changing output.
inline Dataset make_dataset(DatasetKind kind, int n, uint64_t seed, int image_size = 32) {
    if (n < 1) throw ParseError("make_dataset: n must be >= 1");
    Dataset ds;
    ds.kind = kind;
    ds.samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = derive_stream(seed, std::string(dataset_kind_name(kind)) + ":" +
                                          std::to_string(i));
        SyntheticScene scene = random_scene(rng);
        Sample s;
        s.condition_id = scene.condition_id();
        s.target = render_scene(scene, image_size);
        switch (kind) {
            case DatasetKind::brightness:
                s.input.text = format_float(brightness_signal(s.target));
                break;
            case DatasetKind::color: {
                auto m = channel_means(s.target);
                s.input.text = format_float(m[0]) + "," + format_float(m[1]) + "," +
                               format_float(m[2]);
                break;
            }
            case DatasetKind::sharpness:
                // raw fraction here; quantile signals need the whole corpus
                // and are assigned after the loop
                s.meta["edge_fraction"] = format_float(edge_fraction(s.target));
                break;
            case DatasetKind::structural:
                s.input.images.push_back(edge_map(s.target));
                break;
            case DatasetKind::edit: {
                SyntheticScene other = scene;
                switch (rng.below(3)) {
                    case 0:
                        for (float& c : other.fill)
                            c = static_cast<float>(rng.uniform(0.0, 1.0));
                        break;
                    case 1:
                        other.background = std::clamp(
                            other.background +
                                (rng.uniform() < 0.5 ? -0.25f : 0.25f),
                            0.05f, 0.95f);
                        break;
                    default:
                        other.blur_sigma =
                            other.blur_sigma > 0 ? 0.0f
                                                 : static_cast<float>(rng.uniform(0.5, 1.5));
                }
                s.input.images.push_back(render_scene(other, image_size));
                break;
            }
            case DatasetKind::superres:
                s.input.images.push_back(
                    bilinear_resize(box_downsample(s.target, 4), image_size, image_size));
                break;
            case DatasetKind::inpaint: {
                Image mask = random_mask(rng, image_size);
                s.input.images.push_back(s.target);
                s.input.images.push_back(mask);
                break;
            }
            case DatasetKind::preference: {
                Image base = s.target;
                s.target = contrast_boost(base, 1.6f);  // preferred
                s.aux.push_back(contrast_boost(base, 0.6f));
                s.input.text = "1";
                s.meta["preferred_contrast"] = format_float(edge_fraction(s.target));
                break;
            }
            case DatasetKind::reference: {
                SyntheticScene ref = scene;
                ref.cx = std::clamp(ref.cx + static_cast<float>(rng.uniform(-0.08, 0.08)),
                                    0.25f, 0.75f);
                ref.cy = std::clamp(ref.cy + static_cast<float>(rng.uniform(-0.08, 0.08)),
                                    0.25f, 0.75f);
                ref.radius *= static_cast<float>(rng.uniform(0.85, 1.15));
                s.input.images.push_back(render_scene(ref, image_size));
                break;
            }
        }
        ds.samples.push_back(std::move(s));
    }
    if (kind == DatasetKind::sharpness) {
        std::vector<float> fractions;
        fractions.reserve(ds.samples.size());
        for (const Sample& s : ds.samples)
            fractions.push_back(std::stof(s.meta.at("edge_fraction")));
        SharpnessCalibration cal = SharpnessCalibration::from_fractions(fractions);
        for (Sample& s : ds.samples)
            s.input.text = format_float(cal.rank(std::stof(s.meta.at("edge_fraction"))));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Disk layout: one PPM per image plus one metadata text file per sample (the
// manifest key/value grammar), and a dataset.txt header.
// ---------------------------------------------------------------------------

inline std::string sample_stem(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sample_%05d", i);
    return buf;
}

inline void write_dataset(const std::string& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    {
        std::string text = "kind = \"" + std::string(dataset_kind_name(ds.kind)) + "\"\n" +
                           "count = " + std::to_string(ds.samples.size()) + "\n";
        write_binary_file(dir + "/dataset.txt", text.data(), text.size());
    }
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        std::string stem = dir + "/" + sample_stem(static_cast<int>(i));
        write_ppm(stem + ".target.ppm", s.target);
        for (size_t k = 0; k < s.input.images.size(); ++k)
            write_ppm(stem + ".cond" + std::to_string(k) + ".ppm", s.input.images[k]);
        for (size_t k = 0; k < s.aux.size(); ++k)
            write_ppm(stem + ".aux" + std::to_string(k) + ".ppm", s.aux[k]);
        std::string meta = "condition_id = " + std::to_string(s.condition_id) + "\n" +
                           "input_text = " + templet::detail::quote(s.input.text) + "\n" +
                           "cond_images = " + std::to_string(s.input.images.size()) + "\n" +
                           "aux_images = " + std::to_string(s.aux.size()) + "\n";
        for (const auto& [k, v] : s.meta)
            meta += "meta." + k + " = " + templet::detail::quote(v) + "\n";
        write_binary_file(stem + ".meta.txt", meta.data(), meta.size());
    }
}

inline Dataset read_dataset(const std::string& dir) {
    std::string header = read_text_file(dir + "/dataset.txt");
    std::string kind_name;
    int count = 0;
    {
        std::istringstream is(header);
        std::string line;
        while (std::getline(is, line)) {
            size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, line.find(' '));
            std::string val = line.substr(eq + 1);
            val.erase(0, val.find_first_not_of(" \""));
            val.erase(val.find_last_not_of(" \"\r") + 1);
            if (key == "kind") kind_name = val;
            if (key == "count") count = std::stoi(val);
        }
    }
    Dataset ds;
    ds.kind = dataset_kind_from(kind_name);
    for (int i = 0; i < count; ++i) {
        std::string stem = dir + "/" + sample_stem(i);
        Sample s;
        s.target = read_ppm(stem + ".target.ppm");
        std::string meta = read_text_file(stem + ".meta.txt");
        int cond_images = 0, aux_images = 0;
        std::istringstream is(meta);
        std::string line;
        while (std::getline(is, line)) {
            size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, eq);
            key.erase(key.find_last_not_of(' ') + 1);
            std::string val = line.substr(eq + 1);
            val.erase(0, val.find_first_not_of(' '));
            if (!val.empty() && val.front() == '"') {
                val = val.substr(1, val.rfind('"') - 1);
            } else {
                val.erase(val.find_last_not_of(" \r") + 1);
            }
            if (key == "condition_id") s.condition_id = std::stoi(val);
            else if (key == "input_text") s.input.text = val;
            else if (key == "cond_images") cond_images = std::stoi(val);
            else if (key == "aux_images") aux_images = std::stoi(val);
            else if (key.rfind("meta.", 0) == 0) s.meta[key.substr(5)] = val;
        }
        for (int k = 0; k < cond_images; ++k)
            s.input.images.push_back(read_ppm(stem + ".cond" + std::to_string(k) + ".ppm"));
        for (int k = 0; k < aux_images; ++k)
            s.aux.push_back(read_ppm(stem + ".aux" + std::to_string(k) + ".ppm"));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace templet::zoo
