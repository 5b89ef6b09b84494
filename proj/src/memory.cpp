#include "mpcad/memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mpcad/binary_io.hpp"

namespace mpcad {

namespace {

Mat round_f32(const Mat& m) { return m.unaryExpr([](double v) { return to_f32(v); }); }

void write_rows(ByteWriter& w, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
}

Mat read_rows(ByteReader& r, std::size_t rows, std::size_t cols) {
    r.need(rows * cols * 4);
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
    return m;
}

std::uint32_t u32_of(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw DataError(std::string(what) + " too large for the bank format");
    return static_cast<std::uint32_t>(v);
}

void write_task(ByteWriter& w, const TaskMemory& t) {
    if (t.task_name.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("task name too long");
    w.u16(static_cast<std::uint16_t>(t.task_name.size()));
    w.raw(t.task_name);
    w.u32(u32_of(t.keys.channels(), "channels"));
    w.u32(u32_of(t.keys.count(), "key count"));
    write_rows(w, t.keys.rows());
    w.u32(u32_of(static_cast<std::size_t>(t.text_prompt.learnable.rows()), "prompt rows"));
    w.u32(u32_of(static_cast<std::size_t>(t.text_prompt.learnable.cols()), "text dim"));
    write_rows(w, t.text_prompt.learnable);
    w.u32(u32_of(t.visual_prompt.n_layers(), "prompt layers"));
    w.u32(u32_of(t.visual_prompt.length(), "prompt length"));
    for (const auto& layer : t.visual_prompt.layers) write_rows(w, layer);
    w.u32(u32_of(t.feature_bank.count(), "bank rows"));
    write_rows(w, t.feature_bank.rows());
    w.f64(t.calib_v.k);
    w.f64(t.calib_v.b);
    w.f64(t.calib_t.k);
    w.f64(t.calib_t.b);
}

TaskMemory read_task(ByteReader& r) {
    TaskMemory t;
    const std::uint16_t name_len = r.u16();
    t.task_name = r.raw(name_len);
    const std::uint32_t c = r.u32();
    const std::uint32_t nf = r.u32();
    if (c == 0 || nf == 0) throw FormatError(FormatErrorKind::invalid, "bank: empty key block");
    t.keys = PatchSet(read_rows(r, nf, c));
    const std::uint32_t nl = r.u32();
    const std::uint32_t ct = r.u32();
    t.text_prompt.class_name = t.task_name;
    t.text_prompt.learnable = read_rows(r, nl, ct);
    const std::uint32_t layers = r.u32();
    const std::uint32_t len = r.u32();
    for (std::uint32_t i = 0; i < layers; ++i) t.visual_prompt.layers.push_back(read_rows(r, len, c));
    const std::uint32_t ng = r.u32();
    if (ng == 0) throw FormatError(FormatErrorKind::invalid, "bank: empty feature bank");
    t.feature_bank = PatchSet(read_rows(r, ng, c));
    t.calib_v.k = r.f64();
    t.calib_v.b = r.f64();
    t.calib_t.k = r.f64();
    t.calib_t.b = r.f64();
    return t;
}

}  // namespace

TaskMemory TaskMemory::quantized() const {
    TaskMemory q = *this;
    q.keys = PatchSet(round_f32(keys.rows()));
    q.text_prompt.learnable = round_f32(text_prompt.learnable);
    for (auto& layer : q.visual_prompt.layers) layer = round_f32(layer);
    q.feature_bank = PatchSet(round_f32(feature_bank.rows()));
    return q;
}

void TaskMemory::validate() const {
    if (task_name.empty()) throw DataError("task memory needs a name");
    if (keys.count() == 0 || feature_bank.count() == 0) throw DataError("task memory: empty keys or feature bank");
    if (keys.channels() != feature_bank.channels()) throw DataError("task memory: key and bank channels differ");
    if (!visual_prompt.empty() && visual_prompt.channels() != keys.channels())
        throw DataError("task memory: visual prompt channels differ from features");
    if (!(calib_v.k > 0.0) || !(calib_t.k > 0.0)) throw DataError("task memory: calibration k must be positive");
    if (!std::isfinite(calib_v.b) || !std::isfinite(calib_t.b)) throw NumericalError("task memory: non-finite b");
}

bool TaskMemory::operator==(const TaskMemory& o) const {
    return task_name == o.task_name && keys == o.keys && text_prompt == o.text_prompt &&
           visual_prompt == o.visual_prompt && feature_bank == o.feature_bank && calib_v == o.calib_v &&
           calib_t == o.calib_t;
}

std::optional<std::size_t> MemoryBank::find(const std::string& name) const {
    for (std::size_t i = 0; i < tasks_.size(); ++i)
        if (tasks_[i].task_name == name) return i;
    return std::nullopt;
}

void MemoryBank::insert_task(const TaskMemory& mem) {
    mem.validate();
    if (find(mem.task_name)) throw DataError("task '" + mem.task_name + "' already in the memory bank");
    if (!tasks_.empty() && tasks_.front().keys.channels() != mem.keys.channels())
        throw DataError("task memory channels differ from the rest of the bank");
    tasks_.push_back(mem.quantized());
}

MemoryBank insert_task(MemoryBank bank, const TaskMemory& mem) {
    bank.insert_task(mem);
    return bank;
}

namespace {

Mat normalized_rows(const Mat& m) {
    const Vec norms = m.rowwise().norm();
    if ((norms.array() == 0.0).any()) throw DataError("degenerate vector");
    return norms.cwiseInverse().asDiagonal() * m;
}

}  // namespace

double task_similarity(const PatchSet& keys, const PatchSet& query_keys) {
    if (keys.channels() != query_keys.channels()) throw DataError("infer_task: channel mismatch");
    const Mat sims = normalized_rows(query_keys.rows()) * normalized_rows(keys.rows()).transpose();
    // Rounding can leave a self-match a few ulps short of 1; snap it so exact
    // matches score exactly 1.
    const Vec best = sims.rowwise().maxCoeff().unaryExpr([](double v) {
        return v > 1.0 - 1e-15 ? 1.0 : std::max(v, -1.0);
    });
    return best.mean();
}

TaskMatch infer_task(const MemoryBank& bank, const PatchSet& query_keys) {
    if (bank.empty()) throw DataError("infer_task: empty memory bank");
    TaskMatch best{0, -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < bank.size(); ++i) {
        const double s = task_similarity(bank.at(i).keys, query_keys);
        if (s > best.score) best = {i, s};
    }
    return best;
}

std::vector<std::uint8_t> serialize_task(const TaskMemory& mem) {
    ByteWriter w;
    write_task(w, mem);
    return w.take();
}

std::vector<std::uint8_t> serialize_bank(const MemoryBank& bank) {
    ByteWriter w;
    w.raw("CMPB");
    w.u32(kBankVersion);
    w.u32(u32_of(bank.size(), "task count"));
    for (const auto& t : bank.tasks()) write_task(w, t);
    return w.take();
}

MemoryBank deserialize_bank(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || r.raw(4) != "CMPB") throw FormatError(FormatErrorKind::bad_magic, "bank: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kBankVersion)
        throw FormatError(FormatErrorKind::version_mismatch, "bank: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    MemoryBank bank;
    for (std::uint32_t i = 0; i < count; ++i) bank.insert_task(read_task(r));
    if (r.remaining() != 0) throw FormatError(FormatErrorKind::invalid, "bank: trailing bytes");
    return bank;
}

void save_bank(const MemoryBank& bank, const std::filesystem::path& path) { write_file(path, serialize_bank(bank)); }

MemoryBank load_bank(const std::filesystem::path& path) { return deserialize_bank(read_file(path)); }

std::size_t bank_file_size(const std::vector<TaskShape>& tasks) {
    std::size_t total = 4 + 4 + 4;
    for (const auto& t : tasks) {
        total += 2 + t.name_bytes;
        total += 4 + 4 + 4 * t.keys * t.channels;
        total += 4 + 4 + 4 * t.prompt_rows * t.text_dim;
        total += 4 + 4 + 4 * t.prompt_layers * t.prompt_len * t.channels;
        total += 4 + 4 * t.bank_rows * t.channels;
        total += 4 * 8;
    }
    return total;
}

}  // namespace mpcad
