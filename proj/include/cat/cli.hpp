#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cat/train.hpp"

namespace cat::cli {

inline constexpr const char* kToolVersion = "0.1.0";

// Settings resolved from the JSON config file. encoder.d_v stays 0 until a
// command builds the vocabulary from its training file.
struct RunConfig {
    TrainConfig train;
    int64_t vocab_min_freq = 1;
    std::string metric = "accuracy";
    int64_t iterations = 10000;
    uint64_t significance_seed = 1;
};

// Parses the five-section config document; unknown sections or keys are
// rejected so typos fail loudly. Throws ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Round-trips through parse_run_config; the manifest stores this snapshot.
std::string serialize_run_config(const RunConfig& config);

uint64_t fnv1a64(std::string_view bytes);
std::string hex64(uint64_t value);
uint64_t fingerprint_file(const std::string& path);  // throws DataError

// Entry point shared by the binary and the tests. Returns the process exit
// code: 0 success, 1 config error, 2 data error, 3 numeric failure. Failures
// print a single JSON line {"error": ..., "message": ...} to stderr.
int run_cli(const std::vector<std::string>& args);

}  // namespace cat::cli
