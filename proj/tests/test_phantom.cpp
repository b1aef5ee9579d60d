#include "diffseg/phantom.hpp"

#include <doctest.h>

#include "diffseg/losses.hpp"

using namespace diffseg;

TEST_CASE("atlas construction invariants") {
  Rng rng(0);
  Atlas a = build_atlas(32, 4, rng);

  SUBCASE("origin maps to the frame center") {
    const int ox = int(std::lround(a.origin.x()));
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(a.canonical_field(c, ox, ox, ox) - 0.5) <= 1.0 / 32.0);
  }
  SUBCASE("field bounded in [0,1] per channel") {
    CHECK(a.canonical_field.array().minCoeff() >= 0.0f);
    CHECK(a.canonical_field.array().maxCoeff() <= 1.0f);
  }
  SUBCASE("background dominates every foreground class") {
    std::vector<int> counts(4, 0);
    for (Eigen::Index i = 0; i < a.canonical_label.size(); ++i)
      counts[std::size_t(a.canonical_label.data()[i])]++;
    for (int c = 1; c < 4; ++c) CHECK(counts[0] > counts[std::size_t(c)]);
    for (int c = 1; c < 4; ++c) CHECK(counts[std::size_t(c)] > 0);
  }
  SUBCASE("mid-sagittal mirror symmetry of labels and first field channel") {
    const int S = 32;
    for (int z = 0; z < S; z += 3)
      for (int y = 0; y < S; y += 3)
        for (int x = 0; x < S; ++x) {
          CHECK(a.canonical_label(0, x, y, z) == a.canonical_label(0, S - 1 - x, y, z));
          CHECK(std::abs(a.canonical_field(0, x, y, z) +
                         a.canonical_field(0, S - 1 - x, y, z) - 1.0f) < 1e-5f);
        }
  }
  SUBCASE("deterministic under the same seed") {
    Rng r1(9), r2(9);
    Atlas a1 = build_atlas(24, 3, r1);
    Atlas a2 = build_atlas(24, 3, r2);
    CHECK((a1.canonical_label.array() == a2.canonical_label.array()).all());
    CHECK((a1.canonical_field.array() == a2.canonical_field.array()).all());
  }
  SUBCASE("preconditions") {
    Rng r(1);
    CHECK_THROWS_AS(build_atlas(8, 4, r), std::invalid_argument);
    CHECK_THROWS_AS(build_atlas(32, 1, r), std::invalid_argument);
    CHECK_THROWS_AS(build_atlas(32, 17, r), std::invalid_argument);
  }
}

TEST_CASE("identity warp reproduces the atlas") {
  Rng rng(3);
  Atlas a = build_atlas(24, 3, rng);
  Rng srng(4);
  PhantomSample s = sample_from_atlas(a, srng, 0.0, 0.0);
  CHECK((s.label.array() == a.canonical_label.array()).all());
  CHECK((s.field.array() - a.canonical_field.array()).abs().maxCoeff() < 1e-6f);
}

TEST_CASE("per-class intensity ramp is increasing") {
  Rng rng(5);
  Atlas a = build_atlas(32, 4, rng);
  Rng srng(6);
  PhantomSample s = sample_from_atlas(a, srng, 0.0, 0.5);
  std::vector<double> sum(4, 0.0);
  std::vector<int> cnt(4, 0);
  for (Eigen::Index i = 0; i < s.label.size(); ++i) {
    sum[std::size_t(s.label.data()[i])] += s.image.data()[i];
    cnt[std::size_t(s.label.data()[i])]++;
  }
  for (int c = 1; c < 4; ++c) {
    REQUIRE(cnt[std::size_t(c)] > 0);
    CHECK(sum[std::size_t(c)] / cnt[std::size_t(c)] > sum[std::size_t(c - 1)] / cnt[std::size_t(c - 1)]);
  }
}

TEST_CASE("warped fields agree at anatomically corresponding voxels") {
  const int S = 32;
  Rng rng(7);
  Atlas atlas = build_atlas(S, 4, rng);
  Rng r1(100), r2(200);
  PhantomSample s1 = sample_from_atlas(atlas, r1, 0.0, 1.0);
  PhantomSample s2 = sample_from_atlas(atlas, r2, 0.0, 1.0);
  ElasticField e1(s1.warp, S), e2(s2.warp, S);

  auto field_at = [&](const PhantomSample& s, const Eigen::Vector3d& v, int c) {
    // trilinear read of the stored field
    const int x0 = std::clamp(int(v.x()), 0, S - 2);
    const int y0 = std::clamp(int(v.y()), 0, S - 2);
    const int z0 = std::clamp(int(v.z()), 0, S - 2);
    const double fx = std::clamp(v.x() - x0, 0.0, 1.0);
    const double fy = std::clamp(v.y() - y0, 0.0, 1.0);
    const double fz = std::clamp(v.z() - z0, 0.0, 1.0);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          acc += double(s.field(c, x0 + dx, y0 + dy, z0 + dz)) * (dx ? fx : 1 - fx) *
                 (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
    return acc;
  };

  // Pull-back oracle: pick atlas points, find the corresponding voxel in each
  // sample through the stored warps, and compare stored field values.
  Rng pts(11);
  double worst = 0.0;
  for (int k = 0; k < 60; ++k) {
    Eigen::Vector3d p(pts.uniform(8, S - 9), pts.uniform(8, S - 9), pts.uniform(8, S - 9));
    Eigen::Vector3d v1 = invert_warp(s1.warp, e1, p);
    Eigen::Vector3d v2 = invert_warp(s2.warp, e2, p);
    bool inside = true;
    for (int i = 0; i < 3; ++i)
      inside = inside && v1[i] > 1 && v1[i] < S - 2 && v2[i] > 1 && v2[i] < S - 2;
    if (!inside) continue;
    for (int c = 0; c < 3; ++c)
      worst = std::max(worst, std::abs(field_at(s1, v1, c) - field_at(s2, v2, c)));
  }
  CHECK(worst < 2.0 / double(S - 1));
}

TEST_CASE("registration consistency for the field similarity") {
  // Sim computed from stored fields vs. exact pulled-back canonical
  // coordinates differs by < 0.05.
  const int S = 32, P = 16;
  Rng rng(13);
  Atlas atlas = build_atlas(S, 4, rng);
  Rng r1(300), r2(400);
  PhantomSample s1 = sample_from_atlas(atlas, r1, 0.0, 1.0);
  PhantomSample s2 = sample_from_atlas(atlas, r2, 0.0, 1.0);
  ElasticField e1(s1.warp, S), e2(s2.warp, S);

  Patch p1 = extract_patch(s1, {4, 6, 5}, P);
  Patch p2 = extract_patch(s2, {9, 3, 8}, P);

  auto exact_field = [&](const PhantomSample& s, const ElasticField& e,
                         const Eigen::Vector3i& origin) {
    Grid<double> f(3, P, P, P);
    for (int z = 0; z < P; ++z)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          Eigen::Vector3d atlas_pos = warp_to_atlas(
              s.warp, e, Eigen::Vector3d(origin.x() + x, origin.y() + y, origin.z() + z));
          Eigen::Vector3d c = atlas_coordinate(atlas_pos, S);
          for (int ch = 0; ch < 3; ++ch) f(ch, x, y, z) = c[ch];
        }
    return f;
  };

  Grid<double> stored1 = p1.field.cast<double>(), stored2 = p2.field.cast<double>();
  const double sim_stored = field_similarity(stored1, stored2);
  Grid<double> ex1 = exact_field(s1, e1, p1.origin_voxel);
  Grid<double> ex2 = exact_field(s2, e2, p2.origin_voxel);
  const double sim_exact = field_similarity(ex1, ex2);
  CHECK(std::abs(sim_stored - sim_exact) < 0.05);
}

TEST_CASE("patch extraction") {
  const int S = 24;
  Rng rng(17);
  Atlas atlas = build_atlas(S, 3, rng);
  Rng srng(18);
  PhantomSample s = sample_from_atlas(atlas, srng, 0.02, 0.5);

  SUBCASE("full-volume crop") {
    Patch p = extract_patch(s, {0, 0, 0}, S);
    CHECK(p.image.shape() == s.image.shape());
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (int c = 0; c < 3; ++c) mean[c] = double(s.field.channel(c).mean());
    CHECK((p.origin_atlas - mean).norm() < 1e-4);
  }
  SUBCASE("one-hot property") {
    Patch p = extract_patch(s, {3, 4, 5}, 8);
    auto sums = p.onehot_label.as_matrix().rowwise().sum();
    CHECK((sums.array() - 1.0f).abs().maxCoeff() < 1e-6f);
  }
  SUBCASE("overlapping patches agree on the overlap") {
    Patch a = extract_patch(s, {0, 0, 0}, 12);
    Patch b = extract_patch(s, {4, 0, 0}, 12);
    for (int z = 0; z < 12; ++z)
      for (int y = 0; y < 12; ++y)
        for (int x = 4; x < 12; ++x)
          CHECK(a.image(0, x, y, z) == b.image(0, x - 4, y, z));
  }
  SUBCASE("out-of-bounds rejected") {
    CHECK_THROWS_AS(extract_patch(s, {20, 0, 0}, 8), std::invalid_argument);
    CHECK_THROWS_AS(extract_patch(s, {-1, 0, 0}, 8), std::invalid_argument);
  }
}

TEST_CASE("sample generation is deterministic and in range") {
  Rng rng(19);
  Atlas atlas = build_atlas(24, 4, rng);
  Rng a(77), b(77);
  PhantomSample s1 = sample_from_atlas(atlas, a, 0.05, 1.0);
  PhantomSample s2 = sample_from_atlas(atlas, b, 0.05, 1.0);
  CHECK((s1.image.array() == s2.image.array()).all());
  CHECK((s1.label.array() == s2.label.array()).all());
  CHECK((s1.field.array() == s2.field.array()).all());
  CHECK(s1.field.array().minCoeff() >= 0.0f);
  CHECK(s1.field.array().maxCoeff() <= 1.0f);
  CHECK(s1.label.array().minCoeff() >= 0);
  CHECK(s1.label.array().maxCoeff() < 4);
  CHECK_THROWS_AS(sample_from_atlas(atlas, a, -0.1, 0.5), std::invalid_argument);
}
