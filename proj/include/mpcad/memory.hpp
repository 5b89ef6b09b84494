#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpcad/backbone.hpp"
#include "mpcad/core.hpp"

namespace mpcad {

/// Sigmoid steepness and center for one scoring branch.
struct Calibration {
    double k = 1.5;
    double b = 0.0;
    bool operator==(const Calibration&) const = default;
};

/// Everything kept for one task: identity keys, both prompts, the normal-feature
/// coreset and per-branch calibration.
struct TaskMemory {
    std::string task_name;
    PatchSet keys;
    TextPrompt text_prompt;
    VisualPrompt visual_prompt;  // empty when features came from files
    PatchSet feature_bank;
    Calibration calib_v;
    Calibration calib_t;

    /// Copy with every stored array rounded to single precision (the on-disk precision).
    TaskMemory quantized() const;
    void validate() const;

    bool operator==(const TaskMemory& o) const;
};

struct TaskMatch {
    std::size_t index = 0;
    double score = 0.0;
};

/// Append-only sequence of task memories with unique names.
class MemoryBank {
public:
    std::size_t size() const { return tasks_.size(); }
    bool empty() const { return tasks_.empty(); }
    const std::vector<TaskMemory>& tasks() const { return tasks_; }
    const TaskMemory& at(std::size_t i) const { return tasks_.at(i); }
    std::optional<std::size_t> find(const std::string& name) const;

    /// Stores `mem` at single precision. Throws DataError on a duplicate name.
    void insert_task(const TaskMemory& mem);

    bool operator==(const MemoryBank& o) const { return tasks_ == o.tasks_; }

private:
    std::vector<TaskMemory> tasks_;
};

/// Functional form of MemoryBank::insert_task.
MemoryBank insert_task(MemoryBank bank, const TaskMemory& mem);

/// Task whose keys best match the query: per task, the mean over query rows of the
/// best cosine similarity to any key row. Ties go to the lower index.
TaskMatch infer_task(const MemoryBank& bank, const PatchSet& query_keys);

/// Per-task similarity used by infer_task.
double task_similarity(const PatchSet& keys, const PatchSet& query_keys);

inline constexpr std::uint32_t kBankVersion = 1;

std::vector<std::uint8_t> serialize_task(const TaskMemory& mem);
std::vector<std::uint8_t> serialize_bank(const MemoryBank& bank);
MemoryBank deserialize_bank(const std::vector<std::uint8_t>& bytes);

void save_bank(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_bank(const std::filesystem::path& path);

/// Exact file size for the given per-task shapes.
struct TaskShape {
    std::size_t name_bytes, channels, keys, prompt_rows, text_dim, prompt_layers, prompt_len, bank_rows;
};
std::size_t bank_file_size(const std::vector<TaskShape>& tasks);

}  // namespace mpcad
