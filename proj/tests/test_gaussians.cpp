#include "support.hpp"

#include <fstream>

using namespace v2s;
using v2s::test::Sampler;

namespace {

GaussianSet random_gaussians(long n, std::uint64_t seed) {
  Sampler s(seed);
  GaussianSet g;
  g.resize(n);
  for (long i = 0; i < n; ++i) {
    g.means.col(i) = s.vec3(-0.5, 0.5);
    const Eigen::Quaterniond q(s.rotation());
    g.rotations.col(i) << q.w(), q.x(), q.y(), q.z();
    g.scales.col(i) << s.uniform(1e-3, 5e-2), s.uniform(1e-3, 5e-2), s.uniform(1e-3, 5e-2);
    g.opacities[i] = s.uniform(0.0, 1.0);
    g.colors.col(i) = s.vec3(0.0, 1.0);
  }
  return g;
}

// temp_dir wipes its directory, so each written file gets its own.
std::string write_text(const std::string& name, const std::string& text) {
  const auto path = test::temp_dir("gaussians_" + name) / name;
  std::ofstream(path) << text;
  return path.string();
}

}  // namespace

TEST(Advect, ZeroCoordinatesAreIdentity) {
  const GaussianSet g = random_gaussians(50, 1);
  const LbsModel lbs = test::random_lbs(4, 2);
  const DeformedGaussians d = advect(g, lbs, HandleCoords::Zero(48));
  EXPECT_EQ(test::max_abs(d.means - g.means), 0.0);
  for (long i = 0; i < g.size(); ++i) EXPECT_LE(test::max_abs(d.covariances[i] - g.covariance(i)), 1e-15);
}

TEST(Advect, GlobalRotation) {
  // Constant weights summing to one, every handle carrying R0 - I: F = R0.
  const LbsModel lbs = test::constant_lbs(Eigen::Vector3d(0.2, 0.5, 0.3));
  const Mat3 R0 = Sampler(3).rotation();
  HandleCoords z = HandleCoords::Zero(36);
  for (int j = 0; j < 3; ++j)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) z[12 * j + 4 * r + c] = R0(r, c) - (r == c ? 1.0 : 0.0);
  const GaussianSet g = random_gaussians(20, 4);
  const DeformedGaussians d = advect(g, lbs, z);
  for (long i = 0; i < g.size(); ++i) {
    EXPECT_LE(test::max_abs(d.covariances[i] - R0 * g.covariance(i) * R0.transpose()), 1e-15);
    EXPECT_LE((d.means.col(i) - R0 * g.means.col(i)).norm(), 1e-15);
  }
}

TEST(Advect, CovarianceProperties) {
  Sampler s(5);
  const LbsModel lbs = test::random_lbs(5, 6);
  const GaussianSet g = random_gaussians(40, 7);
  for (int trial = 0; trial < 20; ++trial) {
    const HandleCoords z = s.vector(60, 0.3);
    const DeformedGaussians d = advect(g, lbs, z);
    // Means follow the kinematic map exactly.
    EXPECT_EQ(test::max_abs(d.means - deform_batch(lbs, g.means, z)), 0.0);
    const auto Fs = deformation_gradients(lbs, g.means, z);
    for (long i = 0; i < g.size(); ++i) {
      const Mat3& C = d.covariances[i];
      EXPECT_EQ(test::max_abs(C - C.transpose()), 0.0);
      EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat3>(C).eigenvalues().minCoeff(), -1e-10);
      const double expected = std::pow(Fs[i].determinant(), 2) * g.covariance(i).determinant();
      EXPECT_NEAR(C.determinant(), expected, 1e-8 * std::abs(expected));
      EXPECT_LE(test::max_abs(C - Fs[i] * g.covariance(i) * Fs[i].transpose()), 1e-14);
    }
  }
}

TEST(Advect, ShapeErrors) {
  const LbsModel lbs = test::random_lbs(4, 2);
  GaussianSet g = random_gaussians(5, 1);
  EXPECT_THROW(advect(g, lbs, HandleCoords::Zero(12)), InputError);
  g.scales(1, 2) = 0.0;
  EXPECT_THROW(advect(g, lbs, HandleCoords::Zero(48)), InputError);
}

TEST(Conversion, RecoversCovariance) {
  Sampler s(8);
  const LbsModel lbs = test::random_lbs(3, 9);
  const GaussianSet g = random_gaussians(30, 10);
  const DeformedGaussians d = advect(g, lbs, s.vector(36, 0.3));
  const GaussianSet back = to_gaussian_set(d, g);
  back.validate();
  EXPECT_EQ(back.opacities, g.opacities);
  EXPECT_EQ(test::max_abs(back.colors - g.colors), 0.0);
  for (long i = 0; i < g.size(); ++i) {
    const Mat3& C = d.covariances[i];
    EXPECT_LE(test::max_abs(back.covariance(i) - C), 1e-12 * C.norm());
    EXPECT_NEAR(back.rotation(i).determinant(), 1.0, 1e-12);
  }
}

TEST(Conversion, CanonicalFrameRoundTrip) {
  const GaussianSet g = random_gaussians(10, 11);
  const Similarity s{2.5, Vec3(1.0, -2.0, 0.5)};
  const GaussianSet c = to_canonical(g, s);
  EXPECT_NEAR((c.scales * 2.5 - g.scales).cwiseAbs().maxCoeff(), 0.0, 1e-15);
  const GaussianSet back = to_input_frame(c, s);
  EXPECT_LE(test::max_abs(back.means - g.means), 1e-15);
  EXPECT_LE(test::max_abs(back.scales - g.scales), 1e-16);
  EXPECT_EQ(back.rotations, g.rotations);
}

TEST(Validate, Invariants) {
  GaussianSet g = random_gaussians(3, 12);
  EXPECT_NO_THROW(g.validate());
  GaussianSet bad = g;
  bad.rotations.col(1) *= 1.001;
  EXPECT_THROW(bad.validate(), InputError);
  bad = g;
  bad.scales(0, 0) = -1e-3;
  EXPECT_THROW(bad.validate(), InputError);
  bad = g;
  bad.opacities[2] = 1.5;
  EXPECT_THROW(bad.validate(), InputError);
  bad = g;
  bad.colors.resize(3, 2);
  EXPECT_THROW(bad.validate(), InputError);
  bad = g;
  bad.means(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(bad.validate(), InputError);
}

TEST(Io, RoundTripIsBitExact) {
  const GaussianSet g = random_gaussians(200, 13);
  const auto dir = test::temp_dir("gaussian_round");
  const auto path = (dir / "round.ply").string();
  save_gaussians(g, path);
  const GaussianSet back = load_gaussians(path);
  EXPECT_TRUE(back == g);
  // Writing the reloaded set reproduces the same bytes.
  const auto again = (dir / "again.ply").string();
  save_gaussians(back, again);
  EXPECT_EQ(test::read_file(path), test::read_file(again));
}

TEST(Io, EmptyFile) {
  GaussianSet empty;
  empty.resize(0);
  const auto path = (test::temp_dir("gaussians") / "empty.ply").string();
  save_gaussians(empty, path);
  const GaussianSet back = load_gaussians(path);
  EXPECT_EQ(back.size(), 0);
  EXPECT_NO_THROW(back.validate());
}

TEST(Io, ExtraColumnsAndOrderAreTolerated) {
  const std::string text =
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty float nx\nproperty double opacity\n"
      "property double z\nproperty double y\nproperty double x\nproperty double rot_w\nproperty double rot_x\n"
      "property double rot_y\nproperty double rot_z\nproperty double scale_x\nproperty double scale_y\n"
      "property double scale_z\nproperty double r\nproperty double g\nproperty double b\nend_header\n"
      "9 0.5 3 2 1 1 0 0 0 0.1 0.2 0.3 0.4 0.5 0.6\n";
  const GaussianSet g = load_gaussians(write_text("order.ply", text));
  ASSERT_EQ(g.size(), 1);
  EXPECT_EQ(g.means.col(0), Vec3(1, 2, 3));
  EXPECT_EQ(g.opacities[0], 0.5);
  EXPECT_EQ(g.colors.col(0), Vec3(0.4, 0.5, 0.6));
}

TEST(Io, MalformedFilesReportWhere) {
  const GaussianSet g = random_gaussians(2, 14);
  std::ostringstream os;
  save_gaussians(g, os);
  const std::string good = os.str();

  auto message = [](const std::string& path) {
    try {
      load_gaussians(path);
    } catch (const InputError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };

  std::string no_opacity = good;
  no_opacity.replace(no_opacity.find("property double opacity\n"), 24, "");
  EXPECT_NE(message(write_text("no_opacity.ply", no_opacity)).find("opacity"), std::string::npos);

  std::string short_row = good.substr(0, good.rfind(' ')) + "\n";
  const std::string m = message(write_text("short.ply", short_row));
  EXPECT_NE(m.find("line"), std::string::npos) << m;
  EXPECT_NE(m.find("'b'"), std::string::npos) << m;

  std::string truncated = good.substr(0, good.find("end_header\n") + 11);
  EXPECT_NE(message(write_text("truncated.ply", truncated)).find("expected 2"), std::string::npos);

  std::string not_unit = good;
  const auto body = not_unit.find("end_header\n") + 11;
  std::istringstream first(not_unit.substr(body));
  std::string x, y, z, w;
  first >> x >> y >> z >> w;
  not_unit.replace(not_unit.find(w, body), w.size(), "0.5");
  EXPECT_NE(message(write_text("not_unit.ply", not_unit)).find("unit-norm"), std::string::npos);

  EXPECT_THROW(load_gaussians(write_text("binary.ply", "ply\nformat binary_little_endian 1.0\nend_header\n")),
               InputError);
  EXPECT_THROW(load_gaussians("/nonexistent/g.ply"), InputError);
}

TEST(Io, FrameExport) {
  const auto dir = test::temp_dir("gaussian_frames");
  const std::vector<GaussianSet> frames = {random_gaussians(3, 15), random_gaussians(3, 16)};
  const auto paths = export_gaussian_frames(frames, dir.string(), "splat");
  ASSERT_EQ(paths.size(), 2u);
  EXPECT_EQ(std::filesystem::path(paths[1]).filename(), "splat_0001.ply");
  EXPECT_TRUE(load_gaussians(paths[1]) == frames[1]);
}
