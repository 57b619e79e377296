#include "support.hpp"

using namespace v2s;
using v2s::test::Sampler;

namespace {

Eigen::VectorXd unit(int m, int j) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(m);
  w[j] = 1.0;
  return w;
}

Mat3 fd_gradient(const LbsModel& model, const Vec3& X, const HandleCoords& z, double h) {
  Mat3 F;
  for (int k = 0; k < 3; ++k) {
    Vec3 p = X, q = X;
    p[k] += h;
    q[k] -= h;
    F.col(k) = (deform(model, p, z) - deform(model, q, z)) / (2 * h);
  }
  return F;
}

}  // namespace

TEST(HandleCoords, RowMajorLayout) {
  HandleCoords z = HandleCoords::LinSpaced(24, 0, 23);
  EXPECT_EQ(handle_count(z), 2);
  const HandleMatrix Z = handle_matrix(z, 1);
  EXPECT_EQ(Z(0, 0), 12);
  EXPECT_EQ(Z(0, 3), 15);
  EXPECT_EQ(Z(1, 0), 16);
  HandleCoords back = HandleCoords::Zero(24);
  set_handle_matrix(back, 1, Z);
  EXPECT_EQ(back.tail(12), z.tail(12));
  EXPECT_THROW(handle_count(HandleCoords::Zero(13)), InputError);
}

TEST(Weights, StubAndDefaults) {
  const LbsModel stub = test::constant_lbs(unit(4, 0));
  EXPECT_EQ(lbs_weights(stub, Vec3(0.2, -0.1, 0.3)), unit(4, 0));
  const LbsModel model = LbsModel::create(10, LbsArchitecture{}, 1);
  EXPECT_EQ(lbs_weights(model, Vec3::Zero()).size(), 10);
  EXPECT_EQ(lbs_weights(model, Vec3(0.1, 0.2, 0.3))[9], 1.0);  // rigid handle
  EXPECT_THROW(lbs_weights(model, Vec3(std::nan(""), 0, 0)), InputError);
}

TEST(Weights, Continuity) {
  const LbsModel model = test::random_lbs(6, 3);
  Sampler s(3);
  for (int t = 0; t < 50; ++t) {
    const Vec3 X = s.vec3();
    double prev = std::numeric_limits<double>::infinity();
    for (double d : {1e-2, 1e-4, 1e-6, 1e-8}) {
      const double diff = (lbs_weights(model, X) - lbs_weights(model, X + Vec3::Constant(d))).norm();
      EXPECT_LE(diff, prev + 1e-15);
      prev = diff;
    }
    EXPECT_LE(prev, 1e-6);
  }
}

TEST(Weights, ForwardAndReverseGradientsAgree) {
  const LbsModel model = test::random_lbs(5, 4);
  Sampler s(4);
  Eigen::Matrix3Xd X(3, 20);
  for (long i = 0; i < 20; ++i) X.col(i) = s.vec3();
  const WeightField a = evaluate_weights(model, X, Derivative::Forward);
  const WeightField b = evaluate_weights(model, X, Derivative::Reverse);
  EXPECT_EQ(a.w, b.w);
  for (int k = 0; k < 3; ++k) EXPECT_LE(test::max_abs(a.dw[k] - b.dw[k]), 1e-13);
  // Rigid handle: constant weight, zero gradient.
  for (int k = 0; k < 3; ++k) EXPECT_EQ(b.dw[k].row(4).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Deform, HandExamples) {
  const LbsModel stub = test::constant_lbs(unit(3, 0));
  const Vec3 X(0.1, -0.2, 0.3);
  HandleCoords z = HandleCoords::Zero(36);
  EXPECT_EQ(deform(stub, X, z), X);

  HandleMatrix Z = HandleMatrix::Zero();
  Z.col(3) = Vec3(0.5, 1.0, -2.0);
  set_handle_matrix(z, 0, Z);
  EXPECT_LE((deform(stub, X, z) - (X + Vec3(0.5, 1.0, -2.0))).norm(), 1e-15);

  Mat3 A;
  A << 0.1, 0.2, 0.3, -0.4, 0.5, 0.0, 0.7, 0.0, -0.1;
  Z.setZero();
  Z.leftCols<3>() = A;
  set_handle_matrix(z, 0, Z);
  EXPECT_LE((deform(stub, X, z) - (X + A * X)).norm(), 1e-15);

  // Weights on other handles do not leak: a perturbation of handle 1 has no effect.
  HandleCoords z1 = HandleCoords::Zero(36);
  z1.segment(12, 12).setConstant(3.0);
  EXPECT_EQ(deform(stub, X, z1), X);
  EXPECT_THROW(deform(stub, X, HandleCoords::Zero(24)), InputError);
}

TEST(Deform, RestIdentityExact) {
  // 1000 random (model, X) pairs: rest shape and F = I bit-exactly.
  Sampler s(7);
  for (int t = 0; t < 1000; ++t) {
    const int m = 1 + t % 12;
    const LbsModel model = test::random_lbs(m, 1000 + t % 25, 8, 3, m > 1 && t % 2 == 0);
    const Vec3 X = s.vec3();
    const HandleCoords z = HandleCoords::Zero(12 * m);
    ASSERT_EQ(deform(model, X, z), X);
    ASSERT_EQ(deformation_gradient(model, X, z), Mat3::Identity());
  }
}

TEST(Deform, LinearInZ) {
  const LbsModel model = test::random_lbs(4, 9);
  Sampler s(9);
  for (int t = 0; t < 100; ++t) {
    const Vec3 X = s.vec3();
    const HandleCoords z1 = s.vector(48, 0.3), z2 = s.vector(48, 0.3);
    const double a = s.uniform(-2, 2), b = s.uniform(-2, 2);
    const Vec3 lhs = deform(model, X, a * z1 + b * z2) - X;
    const Vec3 rhs = a * (deform(model, X, z1) - X) + b * (deform(model, X, z2) - X);
    ASSERT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Gradient, HandExamples) {
  Eigen::VectorXd w(2);
  w << 0.6, 0.3;
  const LbsModel stub = test::constant_lbs(w);
  HandleCoords z = HandleCoords::Zero(24);
  EXPECT_EQ(deformation_gradient(stub, Vec3(0.1, 0.2, 0.3), z), Mat3::Identity());
  Mat3 A;
  A << 0.1, 0.2, 0.3, -0.4, 0.5, 0.0, 0.7, 0.0, -0.1;
  HandleMatrix Z;
  Z.leftCols<3>() = A;
  Z.col(3) = Vec3(1, 2, 3);
  set_handle_matrix(z, 0, Z);
  EXPECT_LE((deformation_gradient(stub, Vec3(0.1, 0.2, 0.3), z) - (Mat3::Identity() + 0.6 * A)).norm(), 1e-15);
}

TEST(Gradient, MatchesFiniteDifferences) {
  Sampler s(10);
  for (int t = 0; t < 100; ++t) {
    const LbsModel model = test::random_lbs(5, 200 + t % 10);
    const Vec3 X = s.vec3();
    const HandleCoords z = s.vector(60, 0.5);
    const Mat3 F = deformation_gradient(model, X, z);
    ASSERT_LE((F - fd_gradient(model, X, z, 1e-5)).cwiseAbs().maxCoeff(), 1e-5);
    ASSERT_LE((F - deformation_gradient(model, X, z, Derivative::Forward)).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Gradient, BatchedMatchesSingle) {
  const LbsModel model = test::random_lbs(3, 11);
  Sampler s(11);
  Eigen::Matrix3Xd X(3, 16);
  for (long i = 0; i < 16; ++i) X.col(i) = s.vec3();
  const HandleCoords z = s.vector(36, 0.4);
  const auto Fs = deformation_gradients(model, X, z);
  for (long i = 0; i < 16; ++i) EXPECT_LE((Fs[i] - deformation_gradient(model, X.col(i), z)).norm(), 1e-14);
}

TEST(ExactJacobian, Linearity) {
  Sampler s(12);
  for (int t = 0; t < 100; ++t) {
    const LbsModel model = test::random_lbs(10, 300 + t % 7);
    const Vec3 X = s.vec3();
    HandleCoords z = s.vector(120);
    z /= std::max(1.0, z.norm()) / s.uniform(0.0, 1.0);
    const Eigen::MatrixXd J = exact_jacobian(model, X);
    ASSERT_EQ(J.rows(), 9);
    ASSERT_EQ(J.cols(), 120);
    const material::Vec9 lhs = J * z + material::flatten(Mat3::Identity());
    ASSERT_LE((lhs - material::flatten(deformation_gradient(model, X, z))).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ExactJacobian, MatchesFiniteDifferencesPerCoordinate) {
  const LbsModel model = test::random_lbs(3, 13);
  Sampler s(13);
  for (int t = 0; t < 10; ++t) {
    const Vec3 X = s.vec3();
    const HandleCoords z0 = s.vector(36, 0.3);
    const Eigen::MatrixXd J = exact_jacobian(model, X);
    for (int c = 0; c < 36; ++c) {
      HandleCoords zp = z0, zm = z0;
      zp[c] += 1e-5;
      zm[c] -= 1e-5;
      const material::Vec9 col = (material::flatten(deformation_gradient(model, X, zp)) -
                                  material::flatten(deformation_gradient(model, X, zm))) / 2e-5;
      ASSERT_LE((J.col(c) - col).cwiseAbs().maxCoeff(), 1e-5);
    }
  }
}

TEST(ExactJacobian, StubBlocksScaleWithWeight) {
  Eigen::VectorXd w(2);
  w << 0.25, 0.75;
  const Vec3 X(0.1, 0.2, 0.3);
  const Eigen::MatrixXd J = exact_jacobian(test::constant_lbs(w), X);
  // Block j is w_j times the selector of the linear part A_j.
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(9, 12);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) S(3 * a + b, 4 * a + b) = 1.0;
  EXPECT_LE(test::max_abs(J.leftCols(12) - 0.25 * S), 1e-15);
  EXPECT_LE(test::max_abs(J.rightCols(12) - 0.75 * S), 1e-15);
}

TEST(ExactJacobian, FiniteDifferenceTargetsAreAccurate) {
  // A predictor equal to the exact J scores within FD truncation of the targets.
  const LbsModel model = test::random_lbs(10, 14, 64, 8);
  const auto pts = test::cube_points(200, 14);
  const auto fd = finite_difference_jacobians(model, pts.positions, 1e-4);
  const auto exact = exact_jacobians(model, pts.positions, Derivative::Reverse);
  Sampler s(14);
  double mse = 0.0;
  for (long i = 0; i < pts.size(); ++i) {
    const HandleCoords z = s.vector(120, 0.5);
    mse += ((exact[i] - fd[i]) * z).squaredNorm() / 9.0;
  }
  EXPECT_LE(mse / static_cast<double>(pts.size()), 1e-8);
}

TEST(NeuralJacobian, ShapeAndZeroModel) {
  JacobianArchitecture arch{24, 2.0, {16, 16}};
  JacobianModel model = JacobianModel::create(10, arch, 1);
  const Eigen::MatrixXd J = neural_jacobian(model, Vec3(0.1, 0.2, 0.3));
  EXPECT_EQ(J.rows(), 9);
  EXPECT_EQ(J.cols(), 120);
  // A zero network predicts F = I, so the residual is ||F - I||.
  model.net().parameters().setZero();
  const LbsModel lbs = test::random_lbs(10, 2);
  const Vec3 X(0.2, -0.1, 0.0);
  Sampler s(2);
  const HandleCoords z = s.vector(120, 0.5);
  const Mat3 F = deformation_gradient(lbs, X, z);
  const Mat3 pred = Mat3::Identity() + material::unflatten(neural_jacobian(model, X) * z);
  EXPECT_EQ(pred, Mat3::Identity());
  EXPECT_NEAR((pred - F).norm(), (F - Mat3::Identity()).norm(), 1e-15);
  EXPECT_THROW(neural_jacobian(JacobianModel{}, X), InputError);
}

TEST(NeuralJacobian, LayerWidthsAndFileRoundTrip) {
  const auto widths = JacobianModel::layer_widths(10, JacobianArchitecture{});
  EXPECT_EQ(widths, (std::vector<int>{512, 512, 512, 512, 512, 1024, 1024, 1024, 1024, 1024, 1080}));
  const auto dir = test::temp_dir("kin_models");
  const JacobianModel model = JacobianModel::create(2, JacobianArchitecture{12, 1.0, {8}}, 3);
  model.save((dir / "j.bin").string());
  const JacobianModel back = JacobianModel::load((dir / "j.bin").string());
  EXPECT_TRUE(back == model);
  EXPECT_EQ(back.encoding().width, 12);
  const LbsModel lbs = test::random_lbs(4, 3);
  lbs.save((dir / "l.bin").string());
  EXPECT_TRUE(LbsModel::load((dir / "l.bin").string()) == lbs);
  EXPECT_EQ(lbs.net().metadata().at("handles"), "4");
  EXPECT_EQ(lbs.net().metadata().at("vec"), "row-major");
  EXPECT_THROW(JacobianModel::load((dir / "l.bin").string()), InputError);
  EXPECT_THROW(LbsModel::load((dir / "j.bin").string()), InputError);
}

TEST(LbsLoss, RestAndOrthogonality) {
  const LbsModel one = LbsModel::create(1, LbsArchitecture{16, 3}, 5, false);
  const auto pts = test::cube_points(64, 5);
  const auto lame = material::lame(1e5, 0.3);
  const LbsLoss rest = lbs_loss(one, pts.positions, Eigen::MatrixXd::Zero(12, 64), 1e-3, lame, 0.1, 0.05);
  EXPECT_EQ(rest.elastic, 0.0);

  // Orthonormal columns scaled by sqrt(B) give W^T W / B = I.
  Eigen::MatrixXd Q = Eigen::MatrixXd::Random(50, 4).householderQr().householderQ() * Eigen::MatrixXd::Identity(50, 4);
  EXPECT_NEAR(ortho_penalty(std::sqrt(50.0) * Q, 0.1), 0.0, 1e-12);
  EXPECT_GT(ortho_penalty(Eigen::MatrixXd::Ones(50, 4), 0.1), 0.1);
}

TEST(LbsLoss, GradientMatchesFiniteDifferences) {
  LbsModel model = LbsModel::create(3, LbsArchitecture{8, 3}, 6);
  const auto pts = test::cube_points(32, 6);
  Sampler s(6);
  Eigen::MatrixXd Z(36, 32);
  for (long b = 0; b < 32; ++b) Z.col(b) = s.vector(36, 0.2);
  const auto lame = material::lame(1e3, 0.3);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.net().parameter_count());
  lbs_loss(model, pts.positions, Z, 1e-2, lame, 0.1, 0.05, &grad);
  Eigen::VectorXd fd(grad.size());
  for (long i = 0; i < grad.size(); ++i) {
    const double keep = model.net().parameters()[i];
    model.net().parameters()[i] = keep + 1e-6;
    const double up = lbs_loss(model, pts.positions, Z, 1e-2, lame, 0.1, 0.05).total();
    model.net().parameters()[i] = keep - 1e-6;
    const double dn = lbs_loss(model, pts.positions, Z, 1e-2, lame, 0.1, 0.05).total();
    model.net().parameters()[i] = keep;
    fd[i] = (up - dn) / 2e-6;
  }
  EXPECT_LE((grad - fd).norm() / std::max(1.0, fd.norm()), 1e-4);
}

TEST(LbsTraining, DecreasesAndIsDeterministic) {
  const auto pts = test::cube_points(500, 8);
  material::Params mat;
  LbsTrainConfig cfg;
  cfg.handles = 4;
  cfg.arch = LbsArchitecture{16, 4};
  cfg.iterations = 150;
  cfg.batch = 128;
  cfg.probe_count = 128;
  cfg.seed = 21;
  const auto a = train_lbs_datafree(pts, mat, cfg);
  EXPECT_LT(a.final_loss, a.initial_loss);
  EXPECT_EQ(a.history.size(), 150u);
  const auto b = train_lbs_datafree(pts, mat, cfg);
  EXPECT_TRUE(a.model == b.model);
  EXPECT_EQ(a.final_loss, b.final_loss);
  cfg.seed = 22;
  EXPECT_FALSE(train_lbs_datafree(pts, mat, cfg).model == a.model);
}

TEST(LbsTraining, DivergenceRaises) {
  const auto pts = test::cube_points(200, 8);
  LbsTrainConfig cfg;
  cfg.handles = 3;
  cfg.arch = LbsArchitecture{16, 3};
  cfg.iterations = 200;
  cfg.batch = 64;
  cfg.learning_rate = 1e6;
  cfg.probe_count = 64;
  EXPECT_THROW(train_lbs_datafree(pts, material::Params{}, cfg), NumericalError);
}

TEST(JacobianTraining, LossDropsTenfold) {
  const auto pts = test::cube_points(300, 9);
  const LbsModel lbs = test::random_lbs(2, 9, 16, 3);
  JacobianTrainConfig cfg;
  cfg.arch = JacobianArchitecture{24, 2.0, {32}};
  cfg.iterations = 1500;
  cfg.batch = 32;
  cfg.holdout = 200;
  cfg.learning_rate = 3e-3;
  cfg.seed = 4;
  const auto r = train_neural_jacobian(lbs, pts, cfg);
  EXPECT_LE(r.holdout_mse * 10.0, r.initial_holdout_mse);
  const auto head = std::accumulate(r.history.begin(), r.history.begin() + 50, 0.0);
  const auto tail = std::accumulate(r.history.end() - 50, r.history.end(), 0.0);
  EXPECT_LE(tail * 10.0, head);
  EXPECT_TRUE(train_neural_jacobian(lbs, pts, cfg).model == r.model);
}
