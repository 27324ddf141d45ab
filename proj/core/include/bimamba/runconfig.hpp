#pragma once

#include <string>
#include <vector>

#include "bimamba/model.hpp"
#include "bimamba/train.hpp"

namespace bimamba::config {

// Flat key=value run configuration covering the model, the optimizer and the
// attention comparator. Files use one `key = value` pair per line with `#`
// comments; unknown keys are rejected.
struct RunConfig {
    model::ModelConfig model;
    train::TrainConfig train;
    i64 heads = 4;
    bool has_seed = false;
};

struct KeyDoc {
    const char* key;
    const char* doc;
};
const std::vector<KeyDoc>& known_keys();

void apply_kv(RunConfig& rc, const std::string& key, const std::string& value);
RunConfig parse_file(const std::string& path);
// Also accepts in-memory text; `origin` names the source in errors.
RunConfig parse_text(const std::string& text, const std::string& origin);
std::string dump(const RunConfig& rc);  // round-trips through parse_text

}  // namespace bimamba::config
