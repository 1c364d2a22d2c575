// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "vaflow/mat.hpp"
#include "vaflow/nn/params.hpp"

namespace vaflow::nn {

// Checkpoint container: magic "FFCK", a version word, a manifest of
// (name, shape, dtype, byte offset) entries, then raw little-endian float32
// tensor data. Scalar metadata rides along as 1x1 tensors.
void save_checkpoint(const std::string& path, const ParamStore<float>& params);
ParamStore<float> load_checkpoint(const std::string& path);

// Convenience accessors for 1x1 metadata tensors.
inline void put_scalar(ParamStore<float>& params, const std::string& name, float value) {
    params.tensors[name] = MatF::Constant(1, 1, value);
}
inline float get_scalar(const ParamStore<float>& params, const std::string& name) {
    const MatF& m = params.get(name);
    if (m.rows() != 1 || m.cols() != 1)
        throw std::logic_error("checkpoint scalar has wrong shape: " + name);
    return m(0, 0);
}

}  // namespace vaflow::nn
