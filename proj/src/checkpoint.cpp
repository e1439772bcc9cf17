#include "mose/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mose/error.hpp"
#include "mose/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mose {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'S', 'E', 'C', 'K', 'P', 'T'};
constexpr std::size_t kSizeFieldOffset = 12;  // magic + version
constexpr std::size_t kMinFile = 8 + 4 + 8 + 8;

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_tensor(std::string& out, const Tensor& t) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    const auto& d = t.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
}

void put_bitmask(std::string& out, const BitMask& bm) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(bm.size()));
    const auto& bytes = bm.bytes();
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

struct Cursor {
    const unsigned char* p;
    std::size_t n;
    std::size_t off = 0;

    void need(std::size_t k, const char* what) const {
        if (off + k > n)
            throw TruncationError(std::string("checkpoint ends inside ") + what);
    }
    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, p + off, sizeof(T));
        off += sizeof(T);
        return v;
    }
    std::string get_str(std::size_t k, const char* what) {
        need(k, what);
        std::string s(reinterpret_cast<const char*>(p + off), k);
        off += k;
        return s;
    }
};

// Reads a tensor whose shape must match dst; the payload replaces dst's data
// in place so graph identity (and every site referencing it) is preserved.
void read_into(Cursor& cur, Tensor& dst, const char* what) {
    const auto rank = cur.get<std::uint32_t>(what);
    if (rank != static_cast<std::uint32_t>(dst.rank()))
        throw CheckpointError(std::string("checkpoint tensor rank mismatch at ") + what);
    for (int i = 0; i < dst.rank(); ++i) {
        const auto e = cur.get<std::uint32_t>(what);
        if (e != static_cast<std::uint32_t>(dst.shape()[i]))
            throw CheckpointError(std::string("checkpoint tensor shape mismatch at ") +
                                  what);
    }
    const std::size_t bytes = dst.size() * sizeof(double);
    cur.need(bytes, what);
    std::memcpy(dst.data().data(), cur.p + cur.off, bytes);
    cur.off += bytes;
    dst.bump_version();
}

Tensor read_tensor(Cursor& cur, bool requires_grad, const char* what) {
    const auto rank = cur.get<std::uint32_t>(what);
    if (rank > 4) throw CheckpointError(std::string("implausible tensor rank at ") + what);
    std::vector<int> shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const auto e = cur.get<std::uint32_t>(what);
        if (e == 0 || e > (1u << 28))
            throw CheckpointError(std::string("implausible tensor extent at ") + what);
        shape.push_back(static_cast<int>(e));
        count *= e;
    }
    cur.need(count * sizeof(double), what);
    std::vector<double> data(count);
    std::memcpy(data.data(), cur.p + cur.off, count * sizeof(double));
    cur.off += count * sizeof(double);
    return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

BitMask read_bitmask(Cursor& cur, std::size_t expect_bits, const char* what) {
    const auto nbits = cur.get<std::uint64_t>(what);
    if (nbits != expect_bits)
        throw CheckpointError(std::string("checkpoint mask length mismatch at ") + what);
    BitMask bm(static_cast<std::size_t>(nbits));
    cur.need(bm.bytes().size(), what);
    std::memcpy(bm.bytes().data(), cur.p + cur.off, bm.bytes().size());
    cur.off += bm.bytes().size();
    return bm;
}

} // namespace

void save_checkpoint(const ContinualModel& m, const RunConfig& cfg,
                     const AccuracyMatrix& matrix, const std::string& path) {
    std::string out;
    out.append(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, 0);  // total size, patched below

    const std::string text = render_config(cfg);
    put<std::uint64_t>(out, fnv1a64(text.data(), text.size()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(text.size()));
    out.append(text);
    put<std::uint64_t>(out, m.seed);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.snapshots.size()));

    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.sites.size()));
    for (const MoSELayerState& site : m.sites) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(site.experts.size()));
        for (const LowRankSubExpert& ex : site.experts) {
            put_tensor(out, ex.A);
            put_tensor(out, ex.B);
            if (site.kind == AdapterKind::MoSE) {
                put_tensor(out, ex.mask_a.scores);
                put_tensor(out, ex.mask_b.scores);
            }
        }
        if (site.kind != AdapterKind::LoRA) {
            put_tensor(out, site.router.W_r);
            if (site.kind == AdapterKind::MoSE) {
                put<std::uint32_t>(out,
                                   static_cast<std::uint32_t>(site.router.row_masks.size()));
                for (const ScoreMask& rm : site.router.row_masks)
                    put_tensor(out, rm.scores);
            }
        }
    }

    // most recent head (the last snapshot holds the final trained values)
    if (m.snapshots.empty()) {
        put<std::uint8_t>(out, 0);
    } else {
        const ClassifierHead& head = m.snapshots.rbegin()->second.head;
        put<std::uint8_t>(out, 1);
        put_tensor(out, head.W);
        put_tensor(out, head.bias);
    }

    for (const auto& [task, snap] : m.snapshots) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(task));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(snap.n_classes));
        put<double>(out, snap.final_loss);
        put<double>(out, snap.self_accuracy);
        put_tensor(out, snap.head.W);
        put_tensor(out, snap.head.bias);
        put_tensor(out, m.keys.keys.at(task));

        std::vector<std::pair<int, Tensor>> prompts;
        for (const auto& [key, p] : m.pool.prompts)
            if (key.first == task) prompts.emplace_back(key.second, p);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(prompts.size()));
        for (const auto& [layer, p] : prompts) {
            put<std::uint32_t>(out, static_cast<std::uint32_t>(layer));
            put_tensor(out, p);
        }

        if (m.acfg.kind == AdapterKind::MoSE) {
            put<std::uint32_t>(out, static_cast<std::uint32_t>(m.sites.size()));
            for (const MoSELayerState& site : m.sites) {
                const SiteMaskSet& f = site.frozen.at(task);
                put<std::uint32_t>(out, static_cast<std::uint32_t>(f.a.size()));
                for (std::size_t j = 0; j < f.a.size(); ++j) {
                    put_bitmask(out, f.a[j]);
                    put_bitmask(out, f.b[j]);
                }
                put<std::uint32_t>(out, static_cast<std::uint32_t>(f.router_rows.size()));
                for (const BitMask& r : f.router_rows) put_bitmask(out, r);
            }
        } else {
            put<std::uint32_t>(out, 0);
        }
    }

    put<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.tasks));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.n_rows()));
    for (const auto& row : matrix.rows)
        out.append(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(double));

    const std::uint64_t total = out.size() + 8;
    std::memcpy(out.data() + kSizeFieldOffset, &total, sizeof total);
    put<std::uint64_t>(out, fnv1a64(out.data(), out.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint file " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to checkpoint file " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint file " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (blob.size() < kMinFile) throw TruncationError("checkpoint file is too short");
    if (std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0)
        throw VersionError("not a checkpoint file (bad magic)");
    std::uint32_t version;
    std::memcpy(&version, blob.data() + 8, sizeof version);
    if (version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    std::uint64_t stored_size;
    std::memcpy(&stored_size, blob.data() + kSizeFieldOffset, sizeof stored_size);
    if (stored_size != blob.size())
        throw TruncationError("checkpoint records " + std::to_string(stored_size) +
                              " bytes but the file has " + std::to_string(blob.size()));
    std::uint64_t stored_sum;
    std::memcpy(&stored_sum, blob.data() + blob.size() - 8, sizeof stored_sum);
    if (fnv1a64(blob.data(), blob.size() - 8) != stored_sum)
        throw ChecksumError("checkpoint integrity hash mismatch");

    Cursor cur{reinterpret_cast<const unsigned char*>(blob.data()), blob.size() - 8,
               kSizeFieldOffset + 8};

    LoadedCheckpoint lc;
    lc.config_hash = cur.get<std::uint64_t>("config hash");
    const auto text_len = cur.get<std::uint64_t>("config length");
    lc.config_text = cur.get_str(static_cast<std::size_t>(text_len), "config text");
    try {
        lc.config = parse_run_config(lc.config_text);
    } catch (const Error& e) {
        throw CheckpointError(std::string("embedded config is invalid: ") + e.what());
    }
    lc.backbone_seed = cur.get<std::uint64_t>("backbone seed");
    lc.trained_through = static_cast<int>(cur.get<std::uint32_t>("task count"));

    lc.model = build_model(lc.config.backbone, lc.config.adapter, lc.config.prompt_len,
                           lc.config.prompt_start, lc.config.prompt_end, lc.backbone_seed);
    ContinualModel& m = lc.model;

    const auto n_sites = cur.get<std::uint32_t>("site count");
    if (n_sites != m.sites.size())
        throw CheckpointError("checkpoint site count does not match the config");
    for (MoSELayerState& site : m.sites) {
        const auto n_ex = cur.get<std::uint32_t>("expert count");
        if (n_ex != site.experts.size())
            throw CheckpointError("checkpoint expert count does not match the config");
        for (LowRankSubExpert& ex : site.experts) {
            read_into(cur, ex.A, "expert A");
            read_into(cur, ex.B, "expert B");
            if (site.kind == AdapterKind::MoSE) {
                read_into(cur, ex.mask_a.scores, "A scores");
                read_into(cur, ex.mask_b.scores, "B scores");
            }
        }
        if (site.kind != AdapterKind::LoRA) {
            read_into(cur, site.router.W_r, "router weight");
            if (site.kind == AdapterKind::MoSE) {
                const auto n_rows = cur.get<std::uint32_t>("router row count");
                if (n_rows != site.router.row_masks.size())
                    throw CheckpointError("checkpoint router row count mismatch");
                for (ScoreMask& rm : site.router.row_masks)
                    read_into(cur, rm.scores, "router scores");
            }
        }
        derive_all_masks(site);
    }

    if (cur.get<std::uint8_t>("head flag") != 0) {
        read_tensor(cur, false, "live head weight");
        read_tensor(cur, false, "live head bias");
    }

    for (int rec = 0; rec < lc.trained_through; ++rec) {
        TaskSnapshot snap;
        snap.task = static_cast<int>(cur.get<std::uint32_t>("snapshot task"));
        snap.n_classes = static_cast<int>(cur.get<std::uint32_t>("snapshot classes"));
        snap.final_loss = cur.get<double>("snapshot loss");
        snap.self_accuracy = cur.get<double>("snapshot accuracy");
        snap.head.W = read_tensor(cur, false, "snapshot head weight");
        snap.head.bias = read_tensor(cur, false, "snapshot head bias");
        if (snap.head.W.rows() != snap.n_classes)
            throw CheckpointError("snapshot head does not match its class count");
        m.keys.keys[snap.task] = read_tensor(cur, true, "task key");

        const auto n_prompts = cur.get<std::uint32_t>("prompt count");
        if (n_prompts != 0 && !m.pool.enabled())
            throw CheckpointError("checkpoint has prompts but the config disables them");
        for (std::uint32_t i = 0; i < n_prompts; ++i) {
            const int layer = static_cast<int>(cur.get<std::uint32_t>("prompt layer"));
            m.pool.prompts[{snap.task, layer}] = read_tensor(cur, true, "prompt");
        }

        const auto n_mask_sites = cur.get<std::uint32_t>("mask site count");
        if (m.acfg.kind == AdapterKind::MoSE) {
            if (n_mask_sites != m.sites.size())
                throw CheckpointError("checkpoint mask site count mismatch");
            for (MoSELayerState& site : m.sites) {
                SiteMaskSet fm;
                const auto n_ex = cur.get<std::uint32_t>("mask expert count");
                if (n_ex != site.experts.size())
                    throw CheckpointError("checkpoint mask expert count mismatch");
                for (std::size_t j = 0; j < site.experts.size(); ++j) {
                    fm.a.push_back(
                        read_bitmask(cur, site.experts[j].A.size(), "A mask"));
                    fm.b.push_back(
                        read_bitmask(cur, site.experts[j].B.size(), "B mask"));
                }
                const auto n_rr = cur.get<std::uint32_t>("mask router count");
                if (n_rr != site.router.row_masks.size())
                    throw CheckpointError("checkpoint mask router count mismatch");
                for (std::size_t r = 0; r < site.router.row_masks.size(); ++r)
                    fm.router_rows.push_back(read_bitmask(
                        cur, site.router.row_masks[r].scores.size(), "router mask"));
                site.frozen[snap.task] = std::move(fm);
            }
        } else if (n_mask_sites != 0) {
            throw CheckpointError("checkpoint has masks for a maskless adapter family");
        }

        m.snapshots[snap.task] = std::move(snap);
    }
    if (static_cast<int>(m.snapshots.size()) != lc.trained_through)
        throw CheckpointError("checkpoint repeats a task record");

    const auto mt = cur.get<std::uint32_t>("matrix task count");
    const auto mr = cur.get<std::uint32_t>("matrix row count");
    if (mt > (1u << 20) || mr > mt)
        throw CheckpointError("implausible accuracy matrix dimensions");
    lc.matrix = AccuracyMatrix(static_cast<int>(mt));
    lc.matrix.ensure_rows(static_cast<int>(mr));
    for (std::uint32_t i = 0; i < mr; ++i)
        for (std::uint32_t j = 0; j < mt; ++j)
            lc.matrix.rows[i][j] = cur.get<double>("matrix cell");

    if (cur.off != cur.n) throw TruncationError("checkpoint has unexpected trailing bytes");
    return lc;
}

} // namespace mose
