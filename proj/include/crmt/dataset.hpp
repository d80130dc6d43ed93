#pragma once

#include "crmt/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace crmt {

// Synthetic multi-modal classification data. Class means sit on seeded
// orthonormal directions scaled by the per-modality separation; samples add
// Gaussian noise and a per-modality input scale. Shrinking one modality's
// separation makes it weak, enlarging another's scale makes it the easy
// modality a jointly trained model comes to prefer.
struct GenSpec {
    int k = 2;
    std::vector<std::size_t> dims;
    std::vector<double> separation;
    std::vector<double> noise_sigma;
    std::vector<double> scale;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::uint64_t seed = 1;

    std::size_t modalities() const { return dims.size(); }
    void validate() const;
};

struct Dataset {
    std::vector<Matrix> modalities; // per modality, (n, dim_m)
    std::vector<int> labels;
    GenSpec spec;      // generation manifest
    std::string kind;  // "train" | "test" | "split"

    std::size_t size() const { return labels.size(); }
    std::size_t n_modalities() const { return modalities.size(); }
    std::vector<Matrix> sample(std::size_t i) const;
};

std::pair<Dataset, Dataset> generate(const GenSpec& spec);

// File format (UTF-8 text): line 1 is the single-line JSON manifest, line 2
// the CSV header "label,m1_0,...", then one row per sample with doubles
// printed as shortest round-trip decimals. Version string "crmt-ds-1".
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Seeded stratified split; class proportions preserved within one sample.
std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed);

bool datasets_bit_equal(const Dataset& a, const Dataset& b);

} // namespace crmt
