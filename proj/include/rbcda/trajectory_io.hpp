#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "rbcda/config.hpp"
#include "rbcda/error.hpp"
#include "rbcda/noise.hpp"
#include "rbcda/solver.hpp"

namespace rbcda {

// Binary container shared by trajectories and coarse observations. All integers and IEEE-754
// doubles are little-endian. Layout (byte offsets):
//
//     0   8  magic "RBCDATRJ"
//     8   4  u32 format version (1)
//    12   4  u32 endianness marker 0x01020304
//    16   4  u32 kind: 0 trajectory, 1 coarse observation
//    20   4  u32 variable count (4)
//    24   4  variable codes 'u' 'v' 'T' 'p'
//    28   4  u32 reserved (0)
//    32   8  u64 nx            (fine grid of the producing run)
//    40   8  u64 ny
//    48   8  f64 lx
//    56   8  f64 ly
//    64   8  f64 dt
//    72   8  f64 t_final
//    80   8  u64 save_every    (as configured)
//    88   8  f64 rayleigh
//    96   8  f64 prandtl
//   104   8  u64 seed
//   112   8  f64 init_amplitude
//   120   8  u64 provenance hash (trajectory) / source hash (observation)
//   128   8  u64 fine steps between snapshots
//   136   8  u64 spatial factor S   (1 for trajectories)
//   144   8  u64 temporal factor T  (1 for trajectories)
//   152   8  f64 sigma_obs          (0 for trajectories)
//   160   8  u64 noise seed         (0 for trajectories)
//   168   8  u64 snapshot array nx  (nx / S)
//   176   8  u64 snapshot array ny  (ny / S)
//   184   8  u64 snapshot count n
//   192  8n  f64 snapshot times
//   ...      payload: n snapshots x 4 variables (u, v, T, p) x ny rows x nx columns of f64

inline constexpr std::array<char, 8> kTrajectoryMagic{'R', 'B', 'C', 'D', 'A', 'T', 'R', 'J'};
inline constexpr std::uint32_t kTrajectoryFormatVersion = 1;
inline constexpr std::uint32_t kEndiannessMarker = 0x01020304;
inline constexpr std::size_t kTrajectoryHeaderBytes = 192;

enum class ContainerKind : std::uint32_t { trajectory = 0, observation = 1 };

namespace io_detail {

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u32(std::uint32_t v) {
        for (int b = 0; b < 4; ++b) buf_.push_back(static_cast<unsigned char>(v >> (8 * b)));
    }
    void u64(std::uint64_t v) {
        for (int b = 0; b < 8; ++b) buf_.push_back(static_cast<unsigned char>(v >> (8 * b)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    std::vector<unsigned char>& buffer() { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    Reader(const std::vector<unsigned char>& buf, std::size_t pos = 0) : buf_(buf), pos_(pos) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * b);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * b);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw TruncationError(pos_ + n, buf_.size());
    }
    const std::vector<unsigned char>& buf_;
    std::size_t pos_;
};

struct Header {
    ContainerKind kind = ContainerKind::trajectory;
    RunConfig config;
    std::uint64_t hash = 0;
    std::uint64_t steps_per_snapshot = 1;
    std::uint64_t s_factor = 1;
    std::uint64_t t_factor = 1;
    double sigma_obs = 0.0;
    std::uint64_t noise_seed = 0;
    std::uint64_t snap_nx = 0;
    std::uint64_t snap_ny = 0;
};

inline void write_container(const std::string& path, const Header& h,
                            const std::vector<FieldState>& snapshots) {
    Writer w;
    w.bytes(kTrajectoryMagic.data(), kTrajectoryMagic.size());
    w.u32(kTrajectoryFormatVersion);
    w.u32(kEndiannessMarker);
    w.u32(static_cast<std::uint32_t>(h.kind));
    w.u32(4);
    w.bytes("uvTp", 4);
    w.u32(0);
    const RunConfig& c = h.config;
    w.u64(c.grid.nx);
    w.u64(c.grid.ny);
    w.f64(c.grid.lx);
    w.f64(c.grid.ly);
    w.f64(c.time.dt);
    w.f64(c.time.t_final);
    w.u64(c.time.save_every);
    w.f64(c.physical.rayleigh);
    w.f64(c.physical.prandtl);
    w.u64(c.seed);
    w.f64(c.init_amplitude);
    w.u64(h.hash);
    w.u64(h.steps_per_snapshot);
    w.u64(h.s_factor);
    w.u64(h.t_factor);
    w.f64(h.sigma_obs);
    w.u64(h.noise_seed);
    w.u64(h.snap_nx);
    w.u64(h.snap_ny);
    w.u64(snapshots.size());
    for (const FieldState& s : snapshots) w.f64(s.time);
    for (const FieldState& s : snapshots) {
        for (Variable var : kAllVariables) {
            const Field2D& f = get(s, var);
            if (f.nx() != h.snap_nx || f.ny() != h.snap_ny)
                throw Error("snapshot array shape does not match the header");
            if constexpr (std::endian::native == std::endian::little) {
                w.bytes(f.data(), f.size() * sizeof(double));
            } else {
                for (double x : f.values()) w.f64(x);
            }
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    const auto& buf = w.buffer();
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("failed writing '" + path + "'");
}

inline std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline Header read_container(const std::vector<unsigned char>& buf,
                             std::vector<FieldState>& snapshots) {
    if (buf.size() < kTrajectoryHeaderBytes)
        throw TruncationError(kTrajectoryHeaderBytes, buf.size());
    Reader r(buf);
    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != kTrajectoryMagic) throw VersionError("bad magic: not a trajectory file");
    if (const auto v = r.u32(); v != kTrajectoryFormatVersion)
        throw VersionError("unsupported format version " + std::to_string(v));
    if (r.u32() != kEndiannessMarker) throw FormatError("bad endianness marker");
    Header h;
    const auto kind = r.u32();
    if (kind > 1) throw FormatError("unknown container kind " + std::to_string(kind));
    h.kind = static_cast<ContainerKind>(kind);
    if (r.u32() != 4) throw FormatError("unexpected variable count");
    char codes[4];
    r.bytes(codes, 4);
    if (std::string_view(codes, 4) != "uvTp") throw FormatError("unexpected variable list");
    r.u32();
    RunConfig& c = h.config;
    c.grid.nx = r.u64();
    c.grid.ny = r.u64();
    c.grid.lx = r.f64();
    c.grid.ly = r.f64();
    c.time.dt = r.f64();
    c.time.t_final = r.f64();
    c.time.save_every = r.u64();
    c.physical.rayleigh = r.f64();
    c.physical.prandtl = r.f64();
    c.seed = r.u64();
    c.init_amplitude = r.f64();
    h.hash = r.u64();
    h.steps_per_snapshot = r.u64();
    h.s_factor = r.u64();
    h.t_factor = r.u64();
    h.sigma_obs = r.f64();
    h.noise_seed = r.u64();
    h.snap_nx = r.u64();
    h.snap_ny = r.u64();
    const std::uint64_t count = r.u64();
    if (h.s_factor == 0 || h.t_factor == 0) throw FormatError("zero coarsening factor");
    if (h.snap_nx * h.s_factor != c.grid.nx || h.snap_ny * h.s_factor != c.grid.ny)
        throw FormatError("snapshot shape inconsistent with grid and spatial factor");
    const std::uint64_t per_snapshot = 4 * h.snap_nx * h.snap_ny * sizeof(double);
    const std::uint64_t expected = kTrajectoryHeaderBytes + count * 8 + count * per_snapshot;
    if (buf.size() < expected) throw TruncationError(expected, buf.size());
    if (buf.size() > expected)
        throw FormatError("file has " + std::to_string(buf.size() - expected) +
                          " trailing bytes");
    snapshots.assign(count, FieldState{});
    for (auto& s : snapshots) s.time = r.f64();
    for (auto& s : snapshots) {
        for (Variable var : kAllVariables) {
            Field2D f(h.snap_nx, h.snap_ny);
            if constexpr (std::endian::native == std::endian::little) {
                r.bytes(f.data(), f.size() * sizeof(double));
            } else {
                for (double& x : f.values()) x = r.f64();
            }
            get(s, var) = std::move(f);
        }
    }
    return h;
}

} // namespace io_detail

/// Container kind of a file, checked against magic and version only.
inline ContainerKind peek_kind(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::vector<unsigned char> head(20);
    in.read(reinterpret_cast<char*>(head.data()), 20);
    if (in.gcount() < 20) throw TruncationError(kTrajectoryHeaderBytes, static_cast<std::size_t>(in.gcount()));
    io_detail::Reader r(head);
    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != kTrajectoryMagic) throw VersionError("bad magic: not a trajectory file");
    if (const auto v = r.u32(); v != kTrajectoryFormatVersion)
        throw VersionError("unsupported format version " + std::to_string(v));
    r.u32();
    const auto kind = r.u32();
    if (kind > 1) throw FormatError("unknown container kind " + std::to_string(kind));
    return static_cast<ContainerKind>(kind);
}

inline void write_trajectory(const Trajectory& traj, const std::string& path) {
    io_detail::Header h;
    h.kind = ContainerKind::trajectory;
    h.config = traj.config;
    h.hash = traj.provenance_hash;
    h.steps_per_snapshot = traj.save_every;
    h.snap_nx = traj.config.grid.nx;
    h.snap_ny = traj.config.grid.ny;
    io_detail::write_container(path, h, traj.snapshots);
}

inline Trajectory read_trajectory(const std::string& path) {
    Trajectory traj;
    const auto h = io_detail::read_container(io_detail::slurp(path), traj.snapshots);
    if (h.kind != ContainerKind::trajectory)
        throw FormatError("'" + path + "' holds an observation, not a trajectory");
    traj.config = h.config;
    traj.provenance_hash = h.hash;
    traj.save_every = h.steps_per_snapshot;
    return traj;
}

inline void write_observation(const CoarseObservation& obs, const std::string& path) {
    io_detail::Header h;
    h.kind = ContainerKind::observation;
    h.config = obs.source;
    h.hash = obs.source_hash;
    h.steps_per_snapshot = obs.steps_per_snapshot;
    h.s_factor = obs.s_factor;
    h.t_factor = obs.t_factor;
    h.sigma_obs = obs.sigma_obs;
    h.noise_seed = obs.noise_seed;
    h.snap_nx = obs.source.grid.nx / obs.s_factor;
    h.snap_ny = obs.source.grid.ny / obs.s_factor;
    io_detail::write_container(path, h, obs.snapshots);
}

inline CoarseObservation read_observation(const std::string& path) {
    CoarseObservation obs;
    const auto h = io_detail::read_container(io_detail::slurp(path), obs.snapshots);
    if (h.kind != ContainerKind::observation)
        throw FormatError("'" + path + "' holds a trajectory, not an observation");
    obs.source = h.config;
    obs.source_hash = h.hash;
    obs.steps_per_snapshot = h.steps_per_snapshot;
    obs.s_factor = h.s_factor;
    obs.t_factor = h.t_factor;
    obs.sigma_obs = h.sigma_obs;
    obs.noise_seed = h.noise_seed;
    return obs;
}

} // namespace rbcda
