#pragma once

#include <vector>

#include "syncast/datagen.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/forecaster.hpp"

namespace syncast {

/// Contiguous train / validation / test blocks of a sequence, in time order.
struct DatasetSplits {
    std::vector<AtmosphericState> train, val, test;
};

DatasetSplits split_sequence(const std::vector<AtmosphericState>& seq, double train_fraction, double val_fraction);

/// Pairs at `lead_hours` from a physical sequence, optionally cropped to
/// `region`, then normalized.
std::vector<TrainingPair> normalized_pairs(const std::vector<AtmosphericState>& physical,
                                           const NormalizationStats& stats, int lead_hours,
                                           const RegionSpec* region = nullptr);

/// Conditioning from the frozen deterministic forecast of each pair's
/// input, target from the pair's normalized PM truth.
std::vector<DenoisePair> denoise_pairs(const std::vector<TrainingPair>& normalized, const ModelParams& params,
                                       const LoraAdapterSet* adapters = nullptr, const RegionSpec* region = nullptr);

}  // namespace syncast
