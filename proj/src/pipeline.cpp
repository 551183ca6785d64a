#include "syncast/pipeline.hpp"

#include <cmath>

namespace syncast {

DatasetSplits split_sequence(const std::vector<AtmosphericState>& seq, double train_fraction, double val_fraction) {
    if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0))
        fail(ErrorCode::InvalidConfig, "split fractions must satisfy train > 0, val >= 0, train + val < 1");
    const std::size_t n = seq.size();
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
    if (n_train < 2 || n_train + n_val >= n)
        fail(ErrorCode::EmptyDataset, "sequence of " + std::to_string(n) + " states is too short to split");
    DatasetSplits s;
    s.train.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(seq.begin() + static_cast<std::ptrdiff_t>(n_train),
                 seq.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(seq.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), seq.end());
    return s;
}

std::vector<TrainingPair> normalized_pairs(const std::vector<AtmosphericState>& physical,
                                           const NormalizationStats& stats, int lead_hours, const RegionSpec* region) {
    std::vector<TrainingPair> out;
    for (auto& p : make_training_pairs(physical, lead_hours)) {
        if (region) {
            p.input = crop_region(p.input, *region);
            p.target = crop_region(p.target, *region);
        }
        out.push_back({normalize_state(p.input, stats), normalize_state(p.target, stats)});
    }
    return out;
}

std::vector<DenoisePair> denoise_pairs(const std::vector<TrainingPair>& normalized, const ModelParams& params,
                                       const LoraAdapterSet* adapters, const RegionSpec* region) {
    std::vector<DenoisePair> out;
    out.reserve(normalized.size());
    for (const auto& p : normalized)
        out.push_back({ConditioningPack::build(forward(p.input, params, adapters, region)), PmField::from_state(p.target)});
    return out;
}

}  // namespace syncast
