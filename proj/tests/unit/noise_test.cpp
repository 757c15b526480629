#include <gtest/gtest.h>

#include <cmath>

#include "rbcda/noise.hpp"
#include "support.hpp"

using namespace rbcda;

namespace {

Trajectory random_trajectory(std::size_t nx, std::size_t ny, std::size_t count,
                             std::size_t save_every = 3) {
    Trajectory t;
    t.config.grid = {nx, ny, 3.0, 1.0};
    t.save_every = save_every;
    t.provenance_hash = 1234;
    for (std::size_t k = 0; k < count; ++k) {
        t.snapshots.push_back(rbcda::testing::random_state(t.config.grid, 100 + k));
        t.snapshots.back().time = static_cast<double>(k * save_every) * t.config.time.dt;
    }
    return t;
}

} // namespace

TEST(Coarsen, UnitFactorsAreIdentity) {
    const Trajectory t = random_trajectory(12, 8, 4);
    const CoarseObservation obs = coarsen(t, 1, 1);
    EXPECT_EQ(obs.snapshots, t.snapshots);
    EXPECT_EQ(obs.steps_per_snapshot, t.save_every);
    EXPECT_EQ(obs.source_hash, t.provenance_hash);
    EXPECT_EQ(obs.sigma_obs, 0.0);
}

TEST(Coarsen, FullResolutionByFourGivesDeskShape) {
    Trajectory t;
    t.config.grid = {768, 256, 3.0, 1.0};
    t.snapshots.emplace_back(t.config.grid);
    const CoarseObservation obs = coarsen(t, 4, 1);
    ASSERT_EQ(obs.snapshots.size(), 1u);
    for (Variable var : kAllVariables) {
        EXPECT_EQ(get(obs.snapshots[0], var).nx(), 192u);
        EXPECT_EQ(get(obs.snapshots[0], var).ny(), 64u);
    }
    EXPECT_EQ(obs.coarse_grid().nx, 192u);
}

TEST(Coarsen, StrideMatchesIndexOracle) {
    const std::size_t nx = 16, ny = 8, s = 4, t = 4;
    const Trajectory traj = random_trajectory(nx, ny, 20);
    const CoarseObservation obs = coarsen(traj, s, t);
    ASSERT_EQ(obs.snapshots.size(), 5u);
    EXPECT_EQ(obs.steps_per_snapshot, traj.save_every * t);
    for (std::size_t k = 0; k < 5; ++k) {
        const FieldState& fine = traj.snapshots[k * t];
        EXPECT_EQ(obs.snapshots[k].time, fine.time);
        for (Variable var : kAllVariables) {
            const Field2D& c = get(obs.snapshots[k], var);
            ASSERT_EQ(c.nx(), nx / s);
            ASSERT_EQ(c.ny(), ny / s);
            const double* f = get(fine, var).data();
            for (std::size_t j = 0; j < ny / s; ++j)
                for (std::size_t i = 0; i < nx / s; ++i)
                    EXPECT_EQ(c.data()[j * (nx / s) + i], f[(j * s) * nx + i * s]);
        }
    }
}

TEST(Coarsen, RejectsNonDividingFactors) {
    const Trajectory t = random_trajectory(12, 8, 2);
    EXPECT_THROW(coarsen(t, 5, 1), ConfigError);
    EXPECT_THROW(coarsen(t, 0, 1), ConfigError);
    EXPECT_THROW(coarsen(t, 2, 0), ConfigError);
}

TEST(Coarsen, StreamingRecorderMatchesBatch) {
    RunConfig c = rbcda::testing::small_config(24, 8);
    c.time.t_final = 40 * c.time.dt;
    const Trajectory traj = simulate(c);
    ObservationRecorder rec(c, 2, 5, 10);
    integrate(init_random(c), c, 40, std::ref(rec));
    Trajectory tail = traj;
    tail.snapshots.erase(tail.snapshots.begin(), tail.snapshots.begin() + 10);
    const CoarseObservation batch = coarsen(tail, 2, 5);
    EXPECT_EQ(rec.observation().snapshots, batch.snapshots);
    EXPECT_EQ(rec.observation().steps_per_snapshot, 5u);
}

TEST(ObservationNoise, ZeroSigmaIsIdentity) {
    const CoarseObservation clean = coarsen(random_trajectory(8, 8, 3), 2, 1);
    const CoarseObservation noisy = add_obs_noise(clean, 0.0, 5);
    EXPECT_EQ(noisy.snapshots, clean.snapshots);
}

TEST(ObservationNoise, SameSeedSameNoise) {
    const CoarseObservation clean = coarsen(random_trajectory(8, 8, 3), 2, 1);
    EXPECT_EQ(add_obs_noise(clean, 0.1, 5), add_obs_noise(clean, 0.1, 5));
    EXPECT_NE(add_obs_noise(clean, 0.1, 5).snapshots, add_obs_noise(clean, 0.1, 6).snapshots);
    const auto noisy = add_obs_noise(clean, 0.1, 5);
    EXPECT_EQ(noisy.sigma_obs, 0.1);
    EXPECT_EQ(noisy.noise_seed, 5u);
}

TEST(ObservationNoise, IndependentGaussianEntries) {
    Trajectory t;
    t.config.grid = {64, 64, 3.0, 1.0};
    t.snapshots.assign(5, FieldState(t.config.grid));
    const double sigma = 0.01;
    const CoarseObservation noisy = add_obs_noise(coarsen(t, 1, 1), sigma, 77);
    std::vector<double> all;
    for (const auto& s : noisy.snapshots)
        for (Variable var : kAllVariables)
            for (double x : get(s, var).values()) all.push_back(x);
    const double n = static_cast<double>(all.size());
    double m = 0.0, v = 0.0, lag = 0.0;
    for (double x : all) m += x;
    m /= n;
    for (std::size_t k = 0; k < all.size(); ++k) {
        v += (all[k] - m) * (all[k] - m);
        if (k > 0) lag += (all[k] - m) * (all[k - 1] - m);
    }
    v /= n;
    EXPECT_LT(std::abs(m), 4.0 * sigma / std::sqrt(n));
    EXPECT_LT(std::abs(v / (sigma * sigma) - 1.0), 4.0 * std::sqrt(2.0 / n));
    EXPECT_LT(std::abs(lag / (n * v)), 4.0 / std::sqrt(n));
}

TEST(ObservationNoise, EnsembleMembersUseConsecutiveSeeds) {
    const CoarseObservation clean = coarsen(random_trajectory(8, 8, 2), 2, 1);
    const auto one = make_ensemble(clean, 0.01, 1, 9);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], add_obs_noise(clean, 0.01, 9));

    const auto members = make_ensemble(clean, 0.01, 50, 1000);
    ASSERT_EQ(members.size(), 50u);
    for (std::size_t a = 0; a < members.size(); ++a) {
        EXPECT_EQ(members[a].noise_seed, 1000 + a);
        for (std::size_t b = a + 1; b < members.size(); ++b)
            EXPECT_NE(members[a].snapshots, members[b].snapshots);
    }
    EXPECT_THROW(make_ensemble(clean, 0.01, 0, 1), ConfigError);
}

TEST(ModelNoise, AssumedRayleighReplacesTrueValue) {
    const PhysicalParams truth{1e6, 0.7};
    ModelNoiseSpec spec{0.3, ModelNoiseSpec::Target::cda_rayleigh, 1.3e6};
    EXPECT_EQ(perturb_cda_model(truth, spec).rayleigh, 1.3e6);
    EXPECT_EQ(perturb_cda_model(truth, spec).prandtl, 0.7);
    spec.ra_assumed = truth.rayleigh;
    EXPECT_EQ(perturb_cda_model(truth, spec), truth);
    EXPECT_DOUBLE_EQ(*relative_rayleigh_error(1e6, 0.3).ra_assumed, 1.3e6);
}

TEST(ModelNoise, ContractViolations) {
    const PhysicalParams truth{1e6, 0.7};
    ModelNoiseSpec spec{0.1, ModelNoiseSpec::Target::surrogate_weights, 1.3e6};
    try {
        perturb_cda_model(truth, spec);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("wrong target"), std::string::npos);
    }
    spec = {0.1, ModelNoiseSpec::Target::cda_rayleigh, std::nullopt};
    EXPECT_THROW(perturb_cda_model(truth, spec), ConfigError);
}
