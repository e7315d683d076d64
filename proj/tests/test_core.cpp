#include "dsgw/core.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

using namespace dsgw;
using dsgw::testing::random_field;
using dsgw::testing::random_unit_quat;

namespace {

// Rotation about z written out by hand, independent of Eigen's quaternion code.
Mat3 rotz_matrix(double a) {
  Mat3 r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

Quat rotz(double a) { return Quat(std::cos(a / 2), 0, 0, std::sin(a / 2)); }

}  // namespace

TEST(BuildCovariance, IdentityRotationUnitScale) {
  EXPECT_TRUE(build_covariance(Quat::Identity(), Vec3::Zero()).isApprox(Mat3::Identity(), 1e-15));
}

TEST(BuildCovariance, AxisAlignedScaling) {
  const Mat3 s = build_covariance(Quat::Identity(), Vec3(std::log(2.0), 0, 0));
  Mat3 expected = Mat3::Zero();
  expected.diagonal() << 4, 1, 1;
  EXPECT_LT((s - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BuildCovariance, RotatedScalingMatchesMatrixProduct) {
  const Mat3 r = rotz_matrix(M_PI / 2);
  Mat3 sdiag = Mat3::Zero();
  sdiag.diagonal() << 2, 1, 1;
  const Mat3 oracle = r * sdiag * sdiag.transpose() * r.transpose();
  const Mat3 s = build_covariance(rotz(M_PI / 2), Vec3(std::log(2.0), 0, 0));
  EXPECT_LT((s - oracle).cwiseAbs().maxCoeff(), 1e-9);
  Mat3 expected = Mat3::Zero();
  expected.diagonal() << 1, 4, 1;
  EXPECT_LT((s - expected).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(BuildCovariance, RejectsNonUnitQuaternion) {
  try {
    build_covariance(Quat(1.1, 0, 0, 0), Vec3::Zero());
    FAIL() << "expected a parameter-domain error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParameterDomain);
  }
}

TEST(BuildCovariance, SymmetricWithExpectedEigenvaluesAndPositive) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const Quat q = random_unit_quat(rng);
    const Vec3 ls(rng.uniform(-4, 2), rng.uniform(-4, 2), rng.uniform(-4, 2));
    const Mat3 s = build_covariance(q, ls);
    ASSERT_LT((s - s.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat3> es(s);
    Vec3 expected = (2.0 * ls).array().exp().matrix();
    std::sort(expected.data(), expected.data() + 3);
    const Vec3 got = es.eigenvalues();
    for (int k = 0; k < 3; ++k) {
      ASSERT_GT(got[k], 0.0);
      ASSERT_NEAR(got[k], expected[k], 1e-9 * std::max(1.0, expected[k]));
    }
  }
}

TEST(RigidTransform, ComposeWithIdentity) {
  const RigidTransform t{rotz(0.3), Vec3(1, 2, 3)};
  const auto c = compose(t, RigidTransform::identity());
  EXPECT_TRUE(c.rotation.isApprox(t.rotation));
  EXPECT_TRUE(c.translation.isApprox(t.translation));
}

TEST(RigidTransform, ComposeTranslations) {
  const auto c = compose(RigidTransform::translate(Vec3(1, 0, 0)), RigidTransform::translate(Vec3(0, 1, 0)));
  EXPECT_LT((c.translation - Vec3(1, 1, 0)).norm(), 1e-15);
  EXPECT_TRUE(c.rotation.isApprox(Quat::Identity()));
}

TEST(RigidTransform, ComposeMatchesMatrixForm) {
  const RigidTransform a = RigidTransform::rot_z(M_PI / 2);
  const RigidTransform b = RigidTransform::translate(Vec3(1, 0, 0));
  Eigen::Matrix4d ma = Eigen::Matrix4d::Identity();
  ma.topLeftCorner<3, 3>() = rotz_matrix(M_PI / 2);
  Eigen::Matrix4d mb = Eigen::Matrix4d::Identity();
  mb(0, 3) = 1.0;
  const Eigen::Vector4d oracle = ma * mb * Eigen::Vector4d(0, 0, 0, 1);
  const Vec3 got = compose(a, b).apply(Vec3::Zero());
  EXPECT_LT((got - oracle.head<3>()).norm(), 1e-9);
  EXPECT_LT((got - Vec3(0, 1, 0)).norm(), 1e-9);
}

TEST(RigidTransform, ComposeAppliesRightThenLeft) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform a{random_unit_quat(rng), Vec3(rng.normal(), rng.normal(), rng.normal())};
    const RigidTransform b{random_unit_quat(rng), Vec3(rng.normal(), rng.normal(), rng.normal())};
    const Vec3 p(rng.normal(), rng.normal(), rng.normal());
    EXPECT_LT((compose(a, b).apply(p) - a.apply(b.apply(p))).norm(), 1e-9);
  }
}

TEST(RigidTransform, InvertExamples) {
  const auto id = invert(RigidTransform::identity());
  EXPECT_TRUE(id.rotation.isApprox(Quat::Identity()));
  EXPECT_LT(id.translation.norm(), 1e-15);

  const auto inv = invert(RigidTransform::translate(Vec3(1, 2, 3)));
  EXPECT_LT((inv.translation - Vec3(-1, -2, -3)).norm(), 1e-15);

  const RigidTransform t = compose(RigidTransform::translate(Vec3(1, 0, 0)), RigidTransform::rot_z(M_PI / 2));
  const Vec3 p(5, 5, 5);
  EXPECT_LT((invert(t).apply(t.apply(p)) - p).norm(), 1e-9);
}

TEST(RigidTransform, ComposeWithInverseIsIdentity) {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform t{random_unit_quat(rng), Vec3(rng.normal(), rng.normal(), rng.normal()) * 3.0};
    const auto c = compose(t, invert(t));
    const Vec3 p(rng.normal(), rng.normal(), rng.normal());
    EXPECT_LT((c.apply(p) - p).norm(), 1e-9);
  }
}

TEST(SceneTransform, RejectsBackgroundEntry) {
  SceneTransform t;
  EXPECT_THROW(t.set(0, RigidTransform::identity()), Error);
  EXPECT_TRUE(t.empty());
}

TEST(ApplySceneTransform, EmptyMapIsIdentity) {
  Rng rng(1);
  const auto f = random_field(rng, 30, 0.8, 2);
  const auto out = apply_scene_transform(f, SceneTransform{});
  ASSERT_EQ(out.size(), f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(out.primitives[i].center, f.primitives[i].center);
    EXPECT_EQ(out.primitives[i].rotation.coeffs(), f.primitives[i].rotation.coeffs());
  }
}

TEST(ApplySceneTransform, BackgroundUnchangedAndTranslationApplied) {
  GaussianField f;
  f.object_count = 1;
  GaussianPrimitive bg;
  bg.center = Vec3(0.5, 0.5, 0);
  GaussianPrimitive fg;
  fg.object_label = 1;
  f.primitives = {bg, fg};
  SceneTransform t;
  t.set(1, RigidTransform::translate(Vec3(1, 2, 3)));
  const auto out = apply_scene_transform(f, t);
  EXPECT_EQ(out.primitives[0].center, bg.center);
  EXPECT_LT((out.primitives[1].center - Vec3(1, 2, 3)).norm(), 1e-15);

  SceneTransform move1;
  move1.set(1, RigidTransform::translate(Vec3(1, 0, 0)));
  EXPECT_EQ(apply_scene_transform(f, move1).primitives[0].center, bg.center);
}

TEST(ApplySceneTransform, OnlyCenterAndRotationChange) {
  Rng rng(2);
  const auto f = random_field(rng, 50, 0.8, 3);
  SceneTransform t;
  for (int o = 1; o <= 3; ++o) {
    if (f.label_set().count(o)) t.set(o, RigidTransform{random_unit_quat(rng), Vec3(rng.normal(), 0, 1)});
  }
  const auto out = apply_scene_transform(f, t);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto& a = f.primitives[i];
    const auto& b = out.primitives[i];
    EXPECT_EQ(a.log_scale, b.log_scale);
    EXPECT_EQ(a.opacity_logit, b.opacity_logit);
    EXPECT_EQ(a.color, b.color);
    EXPECT_EQ(a.identity, b.identity);
    EXPECT_EQ(a.object_label, b.object_label);
    if (a.object_label == 0) {
      // Bit-identical background.
      EXPECT_EQ(a.center, b.center);
      EXPECT_EQ(a.rotation.coeffs(), b.rotation.coeffs());
    } else {
      const auto rt = t.get(a.object_label);
      EXPECT_LT((b.center - (rt.rotation_matrix() * a.center + rt.translation)).norm(), 1e-12);
      EXPECT_NEAR(b.rotation.norm(), 1.0, 1e-6);
    }
  }
}

TEST(ApplySceneTransform, AbsentLabelIsLabelDomainError) {
  GaussianField f;
  f.object_count = 2;
  f.primitives.resize(3);
  SceneTransform t;
  t.set(2, RigidTransform::translate(Vec3(1, 0, 0)));
  try {
    apply_scene_transform(f, t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LabelDomain);
  }
  EXPECT_NO_THROW(apply_scene_transform(f, t, LabelPolicy::Lenient));
}

TEST(ApplySceneTransform, RoundTripRestoresCentersAndRotations) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_field(rng, 80, 1.5, 3);
    SceneTransform t;
    for (int o : f.label_set()) {
      if (o > 0) t.set(o, RigidTransform{random_unit_quat(rng), Vec3(rng.normal(), rng.normal(), rng.normal())});
    }
    const auto back = apply_scene_transform(apply_scene_transform(f, t), invert(t));
    for (std::size_t i = 0; i < f.size(); ++i) {
      ASSERT_LT((back.primitives[i].center - f.primitives[i].center).norm(), 1e-6);
      ASSERT_LT(back.primitives[i].rotation.angularDistance(f.primitives[i].rotation), 1e-6);
    }
  }
}

TEST(ApplySceneTransform, BackgroundSubsequenceIsExact) {
  Rng rng(12);
  const auto f = random_field(rng, 100, 1.0, 2);
  for (int trial = 0; trial < 10; ++trial) {
    SceneTransform t;
    for (int o : f.label_set()) {
      if (o > 0) t.set(o, RigidTransform{random_unit_quat(rng), Vec3(rng.normal(), rng.normal(), rng.normal())});
    }
    const auto out = apply_scene_transform(f, t);
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (f.primitives[i].object_label != 0) continue;
      EXPECT_EQ(out.primitives[i].center, f.primitives[i].center);
      EXPECT_EQ(out.primitives[i].rotation.coeffs(), f.primitives[i].rotation.coeffs());
    }
  }
}

TEST(Camera, ValidationRejectsBadIntrinsics) {
  Camera c;
  c.width = 10;
  c.height = 10;
  c.cx = 5;
  c.cy = 5;
  EXPECT_NO_THROW(c.validate());
  c.fx = 0;
  EXPECT_THROW(c.validate(), Error);
  c.fx = 1;
  c.cx = 10;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Camera, LookAtCentersTarget) {
  const auto cam = Camera::look_at(Vec3(3, 1, 2), Vec3(0.2, 0.1, 0), 64, 48, 45);
  const Vec3 p = cam.world_to_cam.apply(Vec3(0.2, 0.1, 0));
  EXPECT_NEAR(p.x(), 0.0, 1e-12);
  EXPECT_NEAR(p.y(), 0.0, 1e-12);
  EXPECT_GT(p.z(), 0.0);
  EXPECT_LT((cam.position() - Vec3(3, 1, 2)).norm(), 1e-12);
  // World up maps to image up (negative y).
  const Vec3 up = cam.world_to_cam.apply(Vec3(0.2, 0.1, 0.5));
  EXPECT_LT(up.y(), 0.0);
}
