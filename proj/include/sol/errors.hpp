// Copyright (c) 2026 The solmini Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace sol {

struct MalformedModelError : std::runtime_error {
    explicit MalformedModelError(const std::string& what) : std::runtime_error(what) {}
};

struct WeightsMismatchError : std::runtime_error {
    explicit WeightsMismatchError(const std::string& what) : std::runtime_error(what) {}
};

struct UnsupportedOpError : std::runtime_error {
    explicit UnsupportedOpError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeMismatchError : std::runtime_error {
    explicit ShapeMismatchError(const std::string& what) : std::runtime_error(what) {}
};

struct UnsupportedInGroupError : std::runtime_error {
    explicit UnsupportedInGroupError(const std::string& what) : std::runtime_error(what) {}
};

struct DuplicateProviderError : std::runtime_error {
    explicit DuplicateProviderError(const std::string& what) : std::runtime_error(what) {}
};

struct NoProviderError : std::runtime_error {
    explicit NoProviderError(const std::string& what) : std::runtime_error(what) {}
};

struct NonDifferentiableGraphError : std::runtime_error {
    explicit NonDifferentiableGraphError(const std::string& what) : std::runtime_error(what) {}
};

struct ArithmeticOverflowError : std::runtime_error {
    explicit ArithmeticOverflowError(const std::string& what) : std::runtime_error(what) {}
};

struct OutOfRefsError : std::runtime_error {
    explicit OutOfRefsError(const std::string& what) : std::runtime_error(what) {}
};

struct UnknownDeviceError : std::runtime_error {
    explicit UnknownDeviceError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sol
