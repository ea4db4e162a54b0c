// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#include "rbdc/cli.hpp"

int main(int argc, char** argv) { return rbdc::cli::dispatch(argc, argv); }
