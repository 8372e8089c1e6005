// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: the JSON model description and the "SOLW" binary weights
// container.

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "sol/model.hpp"

namespace sol {

// Parses the model JSON, binds weights, validates and topologically sorts.
ModelGraph load_model(const std::filesystem::path& model_path,
                      const std::filesystem::path& weights_path);

// Model JSON without weights binding (used by save round-trips and tools).
ModelGraph parse_model_json(const std::string& text);
std::string model_to_json(const ModelGraph& g);

// SOLW container: magic "SOLW", u32 version=1, u32 count, then per tensor
// u16 name length, name, u8 dtype, u8 ndims, ndims x u32 extents, raw
// little-endian payload. Tensors are written in name order (canonical).
std::map<std::string, Tensor> load_weights(const std::filesystem::path& path);
void save_weights(const std::map<std::string, Tensor>& tensors, const std::filesystem::path& path);
std::string weights_to_bytes(const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> weights_from_bytes(const std::string& bytes);

// Single-tensor convenience used by CLI input/output files (same container).
void save_tensor(const Tensor& t, const std::string& name, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path, std::string* name = nullptr);

// JSON fragments used by deployment manifests.
std::string meta_to_json_string(const TensorMeta& m);
TensorMeta meta_from_json_string(const std::string& text);
std::string attrs_to_json_string(const LayerNode& n);
Attrs attrs_from_json_string(OpKind op, const std::string& text);

}  // namespace sol
