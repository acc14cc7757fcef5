// SPDX-License-Identifier: Apache-2.0
//
// libtorch's logging header defines CHECK and friends; load it first and
// drop those so doctest's assertion macros win.
#pragma once

#include <torch/torch.h>

#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE

#include <doctest.h>
