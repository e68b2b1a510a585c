// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "lingreg/runtime.hpp"

int main(int argc, char** argv) {
    lingreg::tune_allocator();
    ::testing::InitGoogleTest(&argc, argv);
    return RUN_ALL_TESTS();
}
