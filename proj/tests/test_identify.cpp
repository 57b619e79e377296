#include "support.hpp"

using namespace v2s;
using v2s::test::Sampler;

namespace {

Trajectory random_trajectory(long frames, long points, std::uint64_t seed) {
  Sampler s(seed);
  Trajectory t;
  for (long f = 0; f < frames; ++f) {
    Eigen::Matrix3Xd x(3, points);
    for (long i = 0; i < points; ++i) x.col(i) = s.vec3();
    t.frames.push_back(x);
  }
  return t;
}

// A small drop scene: observations come from the simulator at the truth.
struct Fixture {
  SceneConfig scene;
  ModelBundle models;
  Trajectory observed;  // 24 frames
  static constexpr double kE = 5e4;
  static constexpr double kNu = 0.35;

  static const Fixture& get() {
    static const Fixture f = [] {
      Fixture x;
      x.scene.handles = 3;
      x.scene.cubature = 60;
      x.scene.substeps = 1;
      x.scene.frames = 24;
      x.scene.material.E = kE;
      x.scene.material.nu = kNu;
      x.scene.initial_velocity = Vec3(0, -3, 0);
      Floor floor;
      floor.height = -0.55;
      x.scene.boundaries = {floor};
      x.models.points = test::cube_points(300, 3);
      x.models.lbs = test::random_lbs(3, 3, 16, 3);
      x.models.cubature = farthest_point_sample(x.models.points, 60, 3);
      const ReducedSystem sys = x.models.build(x.scene);
      x.observed = simulate(sys, x.scene, initial_state(sys, x.scene), 24).trajectory;
      return x;
    }();
    return f;
  }
};

}  // namespace

TEST(Loss, HandValues) {
  const Trajectory a = random_trajectory(8, 20, 1);
  EXPECT_EQ(trajectory_loss(a, a, 0, 4), 0.0);
  Trajectory b = a;
  const Vec3 d(0.1, -0.2, 0.05);
  for (auto& f : b.frames) f.colwise() += d;
  EXPECT_NEAR(trajectory_loss(b, a, 2, 4), d.squaredNorm(), 1e-15);
  EXPECT_THROW(trajectory_loss(a, a, 4, 4), InputError);
  EXPECT_THROW(trajectory_loss(a, a, 0, 0), InputError);
  // Predictions may start later than the observation: offset indexing.
  const Trajectory tail = a.slice(3, 5);
  EXPECT_EQ(trajectory_loss(tail, a, 3, 4, 3), 0.0);
  EXPECT_EQ(FitConfig{}.window, 4);
}

TEST(Loss, ZeroOnlyForEqualFrames) {
  const Trajectory a = random_trajectory(6, 10, 2);
  Trajectory b = a;
  b.frames[3](1, 4) += 1e-12;
  EXPECT_GT(trajectory_loss(b, a, 0, 5), 0.0);
  EXPECT_EQ(trajectory_loss(b, a, 3, 2), 0.0);  // frames 4..5 untouched
}

TEST(Divergence, SyntheticPairs) {
  const Trajectory a = random_trajectory(10, 30, 3);
  EXPECT_EQ(first_divergence_frame(a, a, 1e-4), 9);
  Trajectory b = a;
  for (long f = 5; f < 10; ++f) b.frames[f].array() += 0.01;
  EXPECT_EQ(first_divergence_frame(b, a, 1e-4), 5);
  Trajectory noisy = a;
  noisy.frames[0](0, 0) += 1e-9;
  EXPECT_EQ(first_divergence_frame(noisy, a, 0.0), 0);
}

TEST(Estimator, FiniteDifferenceOnQuadratic) {
  const Eigen::Vector2d target(4.7, 0.35);
  const LossFunction q = [&](const Eigen::VectorXd& p) { return (p - target).squaredNorm(); };
  const Eigen::Vector2d p(5.5, 0.25);
  const Eigen::VectorXd g = estimate_gradient(q, p, Estimator::FiniteDifference, 0, Eigen::Vector2d(1e-3, 1e-3));
  EXPECT_LE((g - 2.0 * (p - target)).cwiseAbs().maxCoeff(), 1e-6);
  const Eigen::VectorXd g0 =
      estimate_gradient(q, target, Estimator::FiniteDifference, 0, Eigen::Vector2d(1e-3, 1e-3));
  EXPECT_LE(g0.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Estimator, FiniteDifferenceConvergesQuadratically) {
  const LossFunction f = [](const Eigen::VectorXd& p) { return std::sin(p[0]) * std::exp(p[1]); };
  const Eigen::Vector2d p(0.3, -0.2);
  const Eigen::Vector2d exact(std::cos(0.3) * std::exp(-0.2), std::sin(0.3) * std::exp(-0.2));
  double prev = 0.0;
  for (double h : {1e-1, 5e-2, 2.5e-2}) {
    const double err = (estimate_gradient(f, p, Estimator::FiniteDifference, 0, Eigen::Vector2d(h, h)) - exact).norm();
    if (prev > 0.0) EXPECT_NEAR(prev / err, 4.0, 0.2);
    prev = err;
  }
}

TEST(Estimator, SpsaIsUnbiasedOnQuadratic) {
  // Cross terms only vanish on average. With 1000 seeds their standard error
  // is about 3% per coordinate here, so the 5% band is widened to three
  // standard errors when the sample says it must be.
  const Eigen::Vector2d target(1.0, -2.0);
  const LossFunction q = [&](const Eigen::VectorXd& p) { return (p - target).squaredNorm(); };
  const Eigen::Vector2d p(2.0, -1.0);
  const Eigen::VectorXd truth = 2.0 * (p - target);
  constexpr int n = 1000;
  Eigen::MatrixXd samples(2, n);
  for (int seed = 0; seed < n; ++seed)
    samples.col(seed) = estimate_gradient(q, p, Estimator::Spsa, seed, Eigen::Vector2d::Constant(1e-2));
  const Eigen::VectorXd mean = samples.rowwise().mean();
  for (int i = 0; i < 2; ++i) {
    const double se = std::sqrt((samples.row(i).array() - mean[i]).square().sum() / (n - 1) / n);
    EXPECT_NEAR(mean[i], truth[i], std::max(0.05 * std::abs(truth[i]), 3.0 * se)) << i;
    EXPECT_LE(se, 0.05 * std::abs(truth[i])) << i;
  }
}

TEST(Estimator, NonFiniteProbeRaises) {
  const LossFunction bad = [](const Eigen::VectorXd& p) {
    return p[0] > 0.0 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
  };
  EXPECT_THROW(estimate_gradient(bad, Eigen::Vector2d::Zero(), Estimator::FiniteDifference, 0, Eigen::Vector2d(1, 1)),
               NumericalError);
  EXPECT_THROW(estimate_gradient(bad, Eigen::Vector2d::Zero(), Estimator::Spsa, 0, Eigen::Vector2d(0, 1)), InputError);
  EXPECT_EQ(estimator_from_string("spsa"), Estimator::Spsa);
  EXPECT_THROW(estimator_from_string("adjoint"), InputError);
}

TEST(Fit, TruthIsAFixedPoint) {
  const Fixture& fx = Fixture::get();
  FitConfig cfg;
  cfg.iterations = 50;
  cfg.seed = 1;
  const FitResult r = fit_parameters(fx.scene, fx.models, fx.observed, cfg, Fixture::kE, Fixture::kNu);
  // Restarting from the true observation replays it to round-off, so the
  // floor is set by Adam's own jitter. It must stay under the loss of a 1%
  // stiffness error measured on the same window.
  const ReducedSystem sys = fx.models.build(fx.scene);
  const ObservationView view(fx.observed, cfg.observed_frames);
  const double logE = std::log10(Fixture::kE);
  EXPECT_LE(window_loss(sys, fx.scene, view, 8, cfg.window), 1e-20);
  const SceneConfig off = with_material(fx.scene, 1.01 * logE, Fixture::kNu);
  ASSERT_EQ(r.window_starts.size(), r.loss_history.size());
  for (std::size_t i = 0; i < r.loss_history.size(); ++i)
    ASSERT_LE(r.loss_history[i], window_loss(sys, off, view, r.window_starts[i], cfg.window)) << i;
  // Parameters live in optimizer coordinates (log10 E, nu).
  for (std::size_t i = 0; i < r.E_history.size(); ++i) {
    ASSERT_LE(std::abs(std::log10(r.E_history[i]) / logE - 1.0), 0.01);
    ASSERT_LE(std::abs(r.nu_history[i] / Fixture::kNu - 1.0), 0.01);
  }
}

TEST(Fit, RecoversParametersAndReadsOnlyAllowedFrames) {
  const Fixture& fx = Fixture::get();
  FitConfig cfg;
  cfg.iterations = 300;
  cfg.lr_E = 1.5e-2;
  cfg.lr_nu = 3e-3;
  cfg.final_lr_fraction = 0.05;
  cfg.seed = 2;
  const ObservationView view(fx.observed, cfg.observed_frames);
  const FitResult r = fit_parameters(fx.scene, fx.models, fx.observed, cfg, 2e5, 0.25, &view);
  EXPECT_LE(std::abs(std::log10(r.E) - std::log10(Fixture::kE)), 0.3);
  EXPECT_LE(std::abs(r.nu - Fixture::kNu), 0.05);

  // Histories are complete and finite, and the running minimum never rises.
  ASSERT_EQ(r.loss_history.size(), 300u);
  const auto best = running_minimum(r.loss_history);
  for (std::size_t i = 0; i < best.size(); ++i) {
    ASSERT_TRUE(std::isfinite(r.loss_history[i]));
    if (i) ASSERT_LE(best[i], best[i - 1]);
  }
  EXPECT_GE(r.E, 1e3);
  EXPECT_LE(r.E, 1e8);

  // Windows start in [s', T - window]; the optimizer reads frames s - 1 .. s + window.
  const long T = cfg.observed_frames - 1;
  long lowest = T;
  for (std::size_t i = 0; i < r.window_starts.size(); ++i) {
    ASSERT_GE(r.window_starts[i], std::min(r.divergence_frames[i], T - cfg.window));
    ASSERT_LE(r.window_starts[i], T - cfg.window);
    lowest = std::min(lowest, r.window_starts[i]);
  }
  ASSERT_FALSE(view.accessed().empty());
  EXPECT_GE(*view.accessed().begin(), std::max(0L, lowest - 1));
  EXPECT_LE(*view.accessed().rbegin(), T);
}

TEST(Fit, DeterministicForFixedSeed) {
  const Fixture& fx = Fixture::get();
  FitConfig cfg;
  cfg.iterations = 10;
  cfg.seed = 3;
  const FitResult a = fit_parameters(fx.scene, fx.models, fx.observed, cfg, 1e5, 0.3);
  const FitResult b = fit_parameters(fx.scene, fx.models, fx.observed, cfg, 1e5, 0.3);
  EXPECT_EQ(a.E, b.E);
  EXPECT_EQ(a.nu, b.nu);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.window_starts, b.window_starts);
}

TEST(Fit, SpsaFineTuningRuns) {
  const Fixture& fx = Fixture::get();
  FitConfig cfg;
  cfg.iterations = 5;
  cfg.finetune_networks = true;
  cfg.estimator = Estimator::Spsa;
  cfg.seed = 4;
  const FitResult r = fit_parameters(fx.scene, fx.models, fx.observed, cfg, 1e5, 0.3);
  EXPECT_EQ(r.iterations, 5);
  ASSERT_TRUE(r.lbs.has_value());
  EXPECT_FALSE(*r.lbs == fx.models.lbs);
}

TEST(Fit, ConfigValidation) {
  const Fixture& fx = Fixture::get();
  FitConfig cfg;
  cfg.window = 0;
  EXPECT_THROW(fit_parameters(fx.scene, fx.models, fx.observed, cfg, 1e5, 0.3), InputError);
  cfg = FitConfig{};
  cfg.observed_frames = 30;
  EXPECT_THROW(fit_parameters(fx.scene, fx.models, fx.observed, cfg, 1e5, 0.3), InputError);
  cfg = FitConfig{};
  cfg.lr_E = 0.0;
  EXPECT_THROW(fit_parameters(fx.scene, fx.models, fx.observed, cfg, 1e5, 0.3), InputError);
}

TEST(Predict, HorizonAndMonotonicity) {
  const Fixture& fx = Fixture::get();
  const ReducedSystem sys = fx.models.build(fx.scene);
  EXPECT_EQ(predict_future(sys, fx.scene, fx.observed, 15, 0).frame_count(), 0);

  const Trajectory truth_future = fx.observed.slice(16, 8);
  const Trajectory good = predict_future(sys, fx.scene, fx.observed.slice(0, 16), 15, 8);
  const double diag = bounding_box(fx.observed.frames[0]).diagonal();
  const double good_err = evaluate(good, truth_future).mean_point_error;
  EXPECT_LE(good_err, 0.05 * diag);

  const SceneConfig off = with_material(fx.scene, std::log10(Fixture::kE) + 1.0, Fixture::kNu);
  const double bad_err = evaluate(predict_future(sys, off, fx.observed.slice(0, 16), 15, 8), truth_future).mean_point_error;
  EXPECT_GT(bad_err, good_err);
}

TEST(Evaluate, HandValues) {
  const Trajectory a = random_trajectory(4, 10, 5);
  const Metrics zero = evaluate(a, a, 1e4, 1e4, 0.3, 0.3);
  EXPECT_EQ(zero.mean_point_error, 0.0);
  EXPECT_EQ(zero.max_point_error, 0.0);
  EXPECT_EQ(*zero.log10_E_mae, 0.0);
  EXPECT_EQ(*zero.nu_mae, 0.0);
  for (double v : zero.per_frame) EXPECT_EQ(v, 0.0);

  EXPECT_NEAR(*evaluate(a, a, 1e5, 1e4, 0.3, 0.3).log10_E_mae, 1.0, 1e-15);

  Trajectory b = a;
  for (auto& f : b.frames) f.row(0).array() += 0.01;
  const Metrics m = evaluate(b, a);
  EXPECT_NEAR(m.mean_point_error, 0.01, 1e-15);
  EXPECT_NEAR(m.max_point_error, 0.01, 1e-15);
  EXPECT_THROW(evaluate(a.slice(0, 3), a), InputError);
}
