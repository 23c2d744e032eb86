// SPDX-License-Identifier: Apache-2.0
// Small synthetic domains shared by the protocol, oracle and evaluation tests.
#pragma once

#include <string>
#include <vector>

#include "clseg/models/seg_model.hpp"
#include "clseg/synthdata/synthdata.hpp"

namespace clseg::testing {

inline const SegModelConfig kTiny{2, 2, 1, 1};

/// Three small, visibly different domains on 16x16 slices.
inline const std::vector<DomainDataset>& tiny_domains() {
  static const std::vector<DomainDataset> data = [] {
    DatasetSizes sizes;
    sizes.volumes_per_domain = 6;
    sizes.slices_per_volume = 2;
    sizes.height = 16;
    sizes.width = 16;
    std::vector<DomainDataset> out;
    const double gains[] = {1.0, -1.0, 0.6};
    const double offsets[] = {0.0, 1.0, 0.3};
    for (int d = 0; d < 3; ++d) {
      DomainSpec s;
      s.domain_id = d;
      s.name = std::string(1, char('A' + d));
      s.radius_min = 2.0;
      s.radius_max = 3.0 + d;
      s.center_concentration = 0.5;
      s.intensity_gain = gains[d];
      s.intensity_offset = offsets[d];
      s.noise_sigma = 0.02 * (d + 1);
      s.seed = 100 + std::uint64_t(d);
      out.push_back(make_domain_dataset(s, sizes, 7));
    }
    return out;
  }();
  return data;
}

}  // namespace clseg::testing
