// SPDX-License-Identifier: Apache-2.0

#include "lingreg/artifact_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include <zlib.h>

#include <json.hpp>

namespace lingreg {
namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "blob writers assume a little-endian host");

std::uint32_t crc(const void* data, std::size_t bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (bytes > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes, 1u << 30));
        c = crc32(c, p, chunk);
        p += chunk;
        bytes -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

fs::path blob_path(const fs::path& manifest) {
    fs::path p = manifest;
    p += ".bin";
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << text;
    if (!out) throw ArtifactError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("missing artifact: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_blob(const fs::path& path, const void* data, std::size_t bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!out) throw ArtifactError("write failed for " + path.string());
}

std::vector<char> read_blob(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw ArtifactError("missing blob: " + path.string());
    const auto size = static_cast<std::size_t>(in.tellg());
    std::vector<char> buf(size);
    in.seekg(0);
    in.read(buf.data(), static_cast<std::streamsize>(size));
    if (!in) throw ArtifactError("short read on " + path.string());
    return buf;
}

// Ordered key=value lines; repeated keys keep every value.
struct Manifest {
    std::vector<std::pair<std::string, std::string>> entries;

    static Manifest parse(const std::string& text, const fs::path& origin) {
        Manifest m;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ArtifactError(origin.string() + ":" + std::to_string(lineno) + ": expected key=value");
            }
            m.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
        }
        return m;
    }

    const std::string* find(std::string_view key) const {
        for (const auto& [k, v] : entries) {
            if (k == key) return &v;
        }
        return nullptr;
    }

    const std::string& get(std::string_view key) const {
        if (const auto* v = find(key)) return *v;
        throw ArtifactError("manifest is missing key '" + std::string(key) + "'");
    }

    std::vector<std::string> all(std::string_view key) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries) {
            if (k == key) out.push_back(v);
        }
        return out;
    }
};

std::uint64_t to_u64(const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ArtifactError("bad integer '" + s + "'");
    return v;
}

double to_double(const std::string& s) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw ArtifactError("bad number '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw ArtifactError("bad number '" + s + "'");
    }
}

void check_header(const Manifest& m, std::string_view format, const fs::path& path) {
    const auto& f = m.get("format");
    if (f != format) {
        throw ArtifactError(path.string() + ": expected format '" + std::string(format) + "', found '" + f + "'");
    }
    const auto version = to_u64(m.get("version"));
    if (version != static_cast<std::uint64_t>(kFormatVersion)) {
        throw ArtifactError(path.string() + ": unsupported version " + std::to_string(version) + " (expected " +
                            std::to_string(kFormatVersion) + ")");
    }
}

ModelConfig parse_config(const Manifest& m) {
    ModelConfig c;
    c.vocab_size = to_u64(m.get("vocab_size"));
    c.dim = to_u64(m.get("dim"));
    c.layers = to_u64(m.get("layers"));
    c.heads = to_u64(m.get("heads"));
    c.ffn_dim = to_u64(m.get("ffn_dim"));
    c.max_seq_len = to_u64(m.get("max_seq_len"));
    c.init_scale = to_double(m.get("init_scale"));
    c.seed = to_u64(m.get("seed"));
    c.norm_eps = to_double(m.get("norm_eps"));
    c.rope_base = to_double(m.get("rope_base"));
    c.validate();
    return c;
}

struct MatrixEntry {
    std::string name;
    std::size_t rows, cols, offset;
    std::uint32_t crc;
};

MatrixEntry parse_matrix_line(const std::string& v) {
    std::istringstream in(v);
    MatrixEntry e{};
    std::string crc_hex;
    if (!(in >> e.name >> e.rows >> e.cols >> e.offset >> crc_hex)) throw ArtifactError("bad matrix line '" + v + "'");
    e.crc = static_cast<std::uint32_t>(std::stoul(crc_hex, nullptr, 16));
    return e;
}

// Dense manifest+blob writer shared by checkpoints and importance maps.
template <typename T>
void save_dense(const fs::path& path, std::string_view format, const std::string& extra, const Layout& layout,
                std::span<const T> values) {
    std::ostringstream m;
    m << "format=" << format << '\n' << "version=" << kFormatVersion << '\n' << extra;
    m << "scalar_bytes=" << sizeof(T) << '\n';
    m << "blob=" << blob_path(path).filename().string() << '\n';
    m << "blob_bytes=" << values.size() * sizeof(T) << '\n';
    m << "blob_crc32=" << hex32(crc(values.data(), values.size_bytes())) << '\n';
    for (const Slot& s : layout.slots()) {
        m << "matrix=" << s.id.name() << ' ' << s.rows << ' ' << s.cols << ' ' << s.offset * sizeof(T) << ' '
          << hex32(crc(values.data() + s.offset, s.size() * sizeof(T))) << '\n';
    }
    write_blob(blob_path(path), values.data(), values.size_bytes());
    write_text(path, m.str());
}

template <typename T>
void load_dense(const fs::path& path, const Manifest& m, const Layout& layout, std::span<T> out) {
    if (to_u64(m.get("scalar_bytes")) != sizeof(T)) throw ArtifactError(path.string() + ": scalar width mismatch");
    const fs::path blob = path.parent_path() / m.get("blob");
    const auto bytes = read_blob(blob);
    if (bytes.size() != out.size_bytes() || to_u64(m.get("blob_bytes")) != bytes.size()) {
        throw ArtifactError(blob.string() + ": expected " + std::to_string(out.size_bytes()) + " bytes, found " +
                            std::to_string(bytes.size()));
    }
    const auto lines = m.all("matrix");
    if (lines.size() != layout.slots().size()) {
        throw ArtifactError(path.string() + ": matrix list does not match the model shape");
    }
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto e = parse_matrix_line(lines[i]);
        const Slot& s = layout.slots()[i];
        if (e.name != s.id.name() || e.rows != s.rows || e.cols != s.cols || e.offset != s.offset * sizeof(T)) {
            throw ArtifactError(path.string() + ": matrix '" + e.name + "' does not match the expected layout");
        }
        const std::uint32_t actual = crc(bytes.data() + e.offset, s.size() * sizeof(T));
        if (actual != e.crc) {
            throw ArtifactError(path.string() + ": checksum mismatch in matrix " + e.name + " (expected " +
                                hex32(e.crc) + ", found " + hex32(actual) + ")");
        }
    }
    if (crc(bytes.data(), bytes.size()) != static_cast<std::uint32_t>(std::stoul(m.get("blob_crc32"), nullptr, 16))) {
        throw ArtifactError(blob.string() + ": blob checksum mismatch");
    }
    std::memcpy(out.data(), bytes.data(), bytes.size());
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

ArtifactKind parse_artifact_kind(std::string_view s) {
    for (auto k : {ArtifactKind::checkpoint, ArtifactKind::map, ArtifactKind::mask, ArtifactKind::corpus,
                   ArtifactKind::record}) {
        if (artifact_kind_name(k) == s) return k;
    }
    throw ArtifactError("unknown artifact kind '" + std::string(s) + "'");
}

std::string_view artifact_kind_name(ArtifactKind k) {
    switch (k) {
        case ArtifactKind::checkpoint: return "checkpoint";
        case ArtifactKind::map: return "map";
        case ArtifactKind::mask: return "mask";
        case ArtifactKind::corpus: return "corpus";
        case ArtifactKind::record: return "record";
    }
    return "?";
}

std::string config_lines(const ModelConfig& c) {
    std::ostringstream m;
    m << "vocab_size=" << c.vocab_size << '\n'
      << "dim=" << c.dim << '\n'
      << "layers=" << c.layers << '\n'
      << "heads=" << c.heads << '\n'
      << "ffn_dim=" << c.ffn_dim << '\n'
      << "max_seq_len=" << c.max_seq_len << '\n'
      << "init_scale=" << format_double(c.init_scale) << '\n'
      << "seed=" << c.seed << '\n'
      << "norm_eps=" << format_double(c.norm_eps) << '\n'
      << "rope_base=" << format_double(c.rope_base) << '\n';
    return m.str();
}

std::uint32_t store_checksum(const ParameterStore& store) {
    const auto v = store.values();
    return crc(v.data(), v.size_bytes());
}

void save_checkpoint(const ParameterStore& store, const fs::path& path) {
    save_dense<float>(path, "lingreg-checkpoint", config_lines(store.config()), store.layout(), store.values());
}

ParameterStore load_checkpoint(const fs::path& path) {
    const Manifest m = Manifest::parse(read_text(path), path);
    check_header(m, "lingreg-checkpoint", path);
    ParameterStore store(parse_config(m));
    load_dense<float>(path, m, store.layout(), store.values());
    return store;
}

void save_importance(const ImportanceMap& map, const fs::path& path) {
    std::string extra = config_lines(map.config());
    extra += "steps=" + std::to_string(map.steps()) + "\n";
    for (const auto& lang : map.languages()) extra += "language=" + lang + "\n";
    save_dense<double>(path, "lingreg-importance", extra, map.layout(), map.scores());
}

ImportanceMap load_importance(const fs::path& path) {
    const Manifest m = Manifest::parse(read_text(path), path);
    check_header(m, "lingreg-importance", path);
    ImportanceMap map(parse_config(m));
    map.set_steps(to_u64(m.get("steps")));
    map.languages() = m.all("language");
    load_dense<double>(path, m, map.layout(), map.scores());
    return map;
}

void save_mask(const RegionMask& mask, const fs::path& path) {
    std::ostringstream m;
    const auto& p = mask.provenance();
    m << "format=lingreg-mask\nversion=" << kFormatVersion << '\n';
    m << "mode=" << p.mode << '\n' << "ratio=" << format_double(p.ratio) << '\n';
    m << "source=" << p.source << '\n' << "seed=" << p.seed << '\n';
    for (const auto& l : p.lineage) m << "lineage=" << l << '\n';
    m << "matrices=" << mask.matrices().size() << '\n';
    for (const auto& [id, mm] : mask.matrices()) {
        m << "matrix=" << id.name() << ' ' << mm.rows << ' ' << mm.cols << ' ' << mm.count() << '\n';
        for (auto i = mm.bits.find_first(); i != boost::dynamic_bitset<std::uint64_t>::npos; i = mm.bits.find_next(i)) {
            m << "at=" << i / mm.cols << ' ' << i % mm.cols << '\n';
        }
    }
    write_text(path, m.str());
}

RegionMask load_mask(const fs::path& path) {
    const Manifest m = Manifest::parse(read_text(path), path);
    check_header(m, "lingreg-mask", path);
    RegionMask mask;
    auto& p = mask.provenance();
    p.mode = m.get("mode");
    p.ratio = to_double(m.get("ratio"));
    p.source = m.get("source");
    p.seed = to_u64(m.get("seed"));
    p.lineage = m.all("lineage");
    const std::size_t declared = to_u64(m.get("matrices"));

    MatrixMask* current = nullptr;
    std::string current_name;
    std::size_t expected = 0, seen = 0;
    auto finish = [&] {
        if (current && seen != expected) {
            throw ArtifactError(path.string() + ": matrix " + current_name + " declares " + std::to_string(expected) +
                                " coordinates but lists " + std::to_string(seen));
        }
    };
    for (const auto& [k, v] : m.entries) {
        if (k == "matrix") {
            finish();
            std::istringstream in(v);
            std::size_t rows = 0, cols = 0;
            if (!(in >> current_name >> rows >> cols >> expected)) throw ArtifactError("bad mask matrix line '" + v + "'");
            const MatrixId id = MatrixId::parse(current_name);
            auto [it, inserted] = mask.matrices().emplace(id, MatrixMask(rows, cols));
            if (!inserted) throw ArtifactError(path.string() + ": duplicate matrix " + current_name);
            current = &it->second;
            seen = 0;
        } else if (k == "at") {
            if (!current) throw ArtifactError(path.string() + ": coordinate before any matrix");
            std::istringstream in(v);
            std::size_t r = 0, c = 0;
            if (!(in >> r >> c) || r >= current->rows || c >= current->cols) {
                throw ArtifactError(path.string() + ": coordinate '" + v + "' outside " + current_name);
            }
            current->set(r, c);
            ++seen;
        }
    }
    finish();
    if (mask.matrices().size() != declared) throw ArtifactError(path.string() + ": matrix count mismatch");
    return mask;
}

void save_corpus(const Corpus& corpus, const fs::path& path) {
    std::vector<std::uint16_t> flat;
    flat.reserve(corpus.sequences.size() * corpus.seq_len);
    for (const auto& s : corpus.sequences) {
        if (s.size() != corpus.seq_len) throw ArtifactError("save_corpus: ragged sequence");
        flat.insert(flat.end(), s.begin(), s.end());
    }
    std::ostringstream m;
    m << "format=lingreg-corpus\nversion=" << kFormatVersion << '\n';
    m << "language=" << corpus.language_name << '\n' << "language_id=" << corpus.language << '\n';
    m << "count=" << corpus.sequences.size() << '\n' << "seq_len=" << corpus.seq_len << '\n';
    m << "seed=" << corpus.seed << '\n';
    m << "blob=" << blob_path(path).filename().string() << '\n';
    m << "blob_bytes=" << flat.size() * 2 << '\n';
    m << "blob_crc32=" << hex32(crc(flat.data(), flat.size() * 2)) << '\n';
    write_blob(blob_path(path), flat.data(), flat.size() * 2);
    write_text(path, m.str());
}

Corpus load_corpus(const fs::path& path) {
    const Manifest m = Manifest::parse(read_text(path), path);
    check_header(m, "lingreg-corpus", path);
    Corpus c;
    c.language_name = m.get("language");
    c.language = static_cast<int>(to_u64(m.get("language_id")));
    c.seed = to_u64(m.get("seed"));
    c.seq_len = to_u64(m.get("seq_len"));
    const std::size_t count = to_u64(m.get("count"));
    const fs::path blob = path.parent_path() / m.get("blob");
    const auto bytes = read_blob(blob);
    if (bytes.size() != count * c.seq_len * 2) throw ArtifactError(blob.string() + ": size does not match manifest");
    if (crc(bytes.data(), bytes.size()) != static_cast<std::uint32_t>(std::stoul(m.get("blob_crc32"), nullptr, 16))) {
        throw ArtifactError(blob.string() + ": checksum mismatch in corpus " + c.language_name);
    }
    c.sequences.assign(count, Sequence(c.seq_len));
    for (std::size_t i = 0; i < count; ++i) {
        std::memcpy(c.sequences[i].data(), bytes.data() + i * c.seq_len * 2, c.seq_len * 2);
    }
    return c;
}

void save_record(const RunRecord& record, const fs::path& path) {
    std::ostringstream out;
    nlohmann::ordered_json head;
    head["type"] = "run";
    head["version"] = kFormatVersion;
    head["kind"] = record.kind;
    head["config"] = record.config;
    head["wall_seconds"] = record.wall_seconds;
    head["train_loss"] = record.train_loss;
    out << head.dump() << '\n';
    for (const auto& cp : record.checkpoints) {
        nlohmann::ordered_json j;
        j["type"] = "checkpoint";
        j["step"] = cp.step;
        j["sequences"] = cp.sequences_seen;
        j["train_loss"] = cp.train_loss;
        j["ppl"] = cp.ppl;
        out << j.dump() << '\n';
    }
    write_text(path, out.str());
}

RunRecord load_record(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    RunRecord r;
    bool have_head = false;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            const std::string type = j.at("type");
            if (type == "run") {
                if (j.at("version").get<int>() != kFormatVersion) throw ArtifactError(path.string() + ": version mismatch");
                r.kind = j.at("kind");
                r.config = j.at("config").get<std::map<std::string, std::string>>();
                r.wall_seconds = j.at("wall_seconds");
                r.train_loss = j.at("train_loss").get<std::vector<double>>();
                have_head = true;
            } else if (type == "checkpoint") {
                CheckpointRecord cp;
                cp.step = j.at("step");
                cp.sequences_seen = j.at("sequences");
                cp.train_loss = j.at("train_loss");
                cp.ppl = j.at("ppl").get<std::map<std::string, double>>();
                r.checkpoints.push_back(std::move(cp));
            } else {
                throw ArtifactError(path.string() + ": unknown record type '" + type + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(path.string() + ": " + e.what());
    }
    if (!have_head) throw ArtifactError(path.string() + ": missing run header");
    return r;
}

void write_record_summary(const RunRecord& record, const fs::path& path) {
    std::ostringstream out;
    std::vector<std::string> langs;
    if (!record.checkpoints.empty()) {
        for (const auto& [k, v] : record.checkpoints.front().ppl) langs.push_back(k);
    }
    out << "step,sequences,train_loss";
    for (const auto& l : langs) out << ",ppl_" << l;
    out << '\n';
    for (const auto& cp : record.checkpoints) {
        out << cp.step << ',' << cp.sequences_seen << ',' << format_double(cp.train_loss);
        for (const auto& l : langs) out << ',' << format_double(cp.ppl.at(l));
        out << '\n';
    }
    write_text(path, out.str());
}

}  // namespace lingreg
