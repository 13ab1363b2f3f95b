// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a structured text header (format version, model
// config, stage tag, step count, seed, data-rng state, vocabulary) followed
// by named little-endian float64 blobs holding every parameter and its two
// optimizer moments, in registry order. Loading validates the header and
// every shape exactly and refuses mismatches with details.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "hivt5/errors.hpp"
#include "hivt5/io_util.hpp"
#include "hivt5/model.hpp"
#include "hivt5/training.hpp"

namespace hivt5 {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

constexpr const char* kCheckpointMagic = "HIVT5CKPT";
constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
    Stage stage = Stage::pretrain;
    std::size_t step = 0;
    std::uint64_t seed = 0;
    std::uint64_t rng_state = 0;
    std::size_t opt_step = 0;
};

namespace detail {

inline void append_f64(std::string& out, const std::vector<double>& v) {
    std::size_t base = out.size();
    out.resize(base + v.size() * sizeof(double));
    std::memcpy(out.data() + base, v.data(), v.size() * sizeof(double));
}

inline void read_f64(const std::string& in, std::size_t& off, std::vector<double>& v) {
    std::size_t bytes = v.size() * sizeof(double);
    if (off + bytes > in.size()) throw ValidationError("checkpoint: blob section truncated");
    std::memcpy(v.data(), in.data() + off, bytes);
    off += bytes;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const HiVt5Model& model,
                            const OptimizerState& opt, const CheckpointMeta& meta) {
    ParamList params = model.parameters();
    if (opt.slots.size() != params.size())
        throw ContractError("save_checkpoint: optimizer state does not mirror parameters");
    std::ostringstream head;
    head << kCheckpointMagic << " " << kCheckpointVersion << "\n";
    head << "stage " << stage_name(meta.stage) << "\n";
    head << "step " << meta.step << "\n";
    head << "seed " << meta.seed << "\n";
    head << "rng_state " << meta.rng_state << "\n";
    head << "opt_step " << meta.opt_step << "\n";
    auto entries = config_to_entries(model.cfg);
    head << "config " << entries.size() << "\n";
    for (const auto& [k, v] : entries) head << k << " " << v << "\n";
    head << "vocab " << model.vocab.size() << "\n";
    for (const auto& w : model.vocab.words()) head << w << "\n";
    head << "params " << params.size() << "\n";
    for (const auto& [name, p] : params) {
        head << name << " " << p.ndim();
        for (std::size_t d : p.shape()) head << " " << d;
        head << "\n";
    }
    head << "---\n";
    std::string blob = head.str();
    for (std::size_t i = 0; i < params.size(); ++i) {
        detail::append_f64(blob, params[i].second.values());
        detail::append_f64(blob, opt.slots[i].m);
        detail::append_f64(blob, opt.slots[i].v);
    }
    atomic_write_file(path, blob);
}

struct LoadedCheckpoint {
    std::unique_ptr<HiVt5Model> model;
    OptimizerState optimizer;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::string raw = read_file(path);
    std::istringstream in(raw);
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(in, line)) throw ValidationError("checkpoint: truncated header in " + path.string());
        return line;
    };
    {
        std::istringstream first(next_line());
        std::string magic;
        int version = 0;
        first >> magic >> version;
        if (magic != kCheckpointMagic) throw ValidationError("checkpoint: bad magic in " + path.string());
        if (version != kCheckpointVersion)
            throw ValidationError("checkpoint: unsupported format version " + std::to_string(version));
    }
    CheckpointMeta meta;
    auto expect_kv = [&](const char* key) {
        std::istringstream ls(next_line());
        std::string k, v;
        ls >> k >> v;
        if (k != key) throw ValidationError(std::string("checkpoint: expected '") + key + "', found '" + k + "'");
        return v;
    };
    meta.stage = stage_from(expect_kv("stage"));
    meta.step = std::stoull(expect_kv("step"));
    meta.seed = std::stoull(expect_kv("seed"));
    meta.rng_state = std::stoull(expect_kv("rng_state"));
    meta.opt_step = std::stoull(expect_kv("opt_step"));

    std::size_t n_config = std::stoull(expect_kv("config"));
    std::vector<std::pair<std::string, std::string>> entries;
    for (std::size_t i = 0; i < n_config; ++i) {
        std::istringstream ls(next_line());
        std::string k, v;
        ls >> k >> v;
        entries.emplace_back(k, v);
    }
    HiVt5Config cfg = config_from_entries(entries);

    std::size_t n_vocab = std::stoull(expect_kv("vocab"));
    std::vector<std::string> words;
    words.reserve(n_vocab);
    for (std::size_t i = 0; i < n_vocab; ++i) words.push_back(next_line());
    Vocabulary vocab = Vocabulary::from_words(std::move(words));
    if (cfg.vocab_size != vocab.size())
        throw ValidationError("checkpoint: config vocab_size " + std::to_string(cfg.vocab_size) +
                              " does not match stored vocabulary of " + std::to_string(vocab.size()));

    std::size_t n_params = std::stoull(expect_kv("params"));
    struct ParamHeader {
        std::string name;
        Shape shape;
    };
    std::vector<ParamHeader> headers;
    for (std::size_t i = 0; i < n_params; ++i) {
        std::istringstream ls(next_line());
        ParamHeader h;
        std::size_t ndim = 0;
        ls >> h.name >> ndim;
        for (std::size_t d = 0; d < ndim; ++d) {
            std::size_t extent = 0;
            ls >> extent;
            h.shape.push_back(extent);
        }
        if (!ls) throw ValidationError("checkpoint: malformed param header for '" + h.name + "'");
        headers.push_back(std::move(h));
    }
    if (next_line() != "---") throw ValidationError("checkpoint: missing blob separator");

    LoadedCheckpoint out;
    Rng init_rng(0);  // immediately overwritten by the stored blobs
    out.model = std::make_unique<HiVt5Model>(cfg, std::move(vocab), init_rng);
    ParamList params = out.model->parameters();
    if (params.size() != headers.size())
        throw ValidationError("checkpoint: holds " + std::to_string(headers.size()) + " parameters, model needs " +
                              std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != headers[i].name)
            throw ValidationError("checkpoint: parameter " + std::to_string(i) + " is '" + headers[i].name +
                                  "', expected '" + params[i].first + "'");
        if (params[i].second.shape() != headers[i].shape)
            throw ValidationError("checkpoint: shape mismatch for '" + headers[i].name + "': stored " +
                                  shape_str(headers[i].shape) + ", model has " +
                                  shape_str(params[i].second.shape()));
    }
    out.optimizer.init(params);
    out.optimizer.step = meta.opt_step;
    std::size_t off = static_cast<std::size_t>(in.tellg());
    for (std::size_t i = 0; i < params.size(); ++i) {
        detail::read_f64(raw, off, params[i].second.values());
        detail::read_f64(raw, off, out.optimizer.slots[i].m);
        detail::read_f64(raw, off, out.optimizer.slots[i].v);
    }
    if (off != raw.size()) throw ValidationError("checkpoint: trailing bytes after blobs");
    out.meta = meta;
    return out;
}

}  // namespace hivt5
