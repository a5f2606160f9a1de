#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>

#include "cmcl/data.hpp"
#include "cmcl/errors.hpp"
#include "test_util.hpp"

using namespace cmcl;

namespace {

ScenarioSpec rotated(std::vector<double> angles, double unseen, double noise = 0.5) {
  ScenarioSpec s;
  s.name = "rot";
  s.kind = GeneratorKind::RotatedGaussians;
  s.class_count = 3;
  s.samples_per_domain = 300;
  s.source_params = std::move(angles);
  s.unseen_param = unseen;
  s.noise = noise;
  s.input_dim = 3;
  s.seed = 5;
  return s;
}

ScenarioSpec spurious(std::vector<double> rhos, double unseen, std::size_t m = 400) {
  ScenarioSpec s;
  s.name = "sp";
  s.kind = GeneratorKind::SpuriousFeature;
  s.class_count = 2;
  s.samples_per_domain = m;
  s.source_params = std::move(rhos);
  s.unseen_param = unseen;
  s.input_dim = 4;
  s.seed = 9;
  return s;
}

double label_corr(const DomainDataset& ds, std::size_t column) {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const double n = static_cast<double>(ds.size());
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const double x = ds.x(r, column), y = ds.y[r] == 1 ? 1.0 : -1.0;
    sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
  }
  const double cov = sxy / n - sx / n * sy / n;
  return cov / std::sqrt((sxx / n - sx / n * sx / n) * (syy / n - sy / n * sy / n));
}

}  // namespace

TEST_CASE("scenario validation") {
  CHECK_NOTHROW(rotated({0, 0, 0}, 0).validate());
  ScenarioSpec bad = rotated({0, 30}, 15);
  bad.hull = HullMode::Extrapolated;
  try {
    bad.validate();
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "unseen_param");
  }
  bad.hull = HullMode::Interpolated;
  CHECK_NOTHROW(bad.validate());
  bad.samples_per_domain = 301;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(gen_spurious_feature(spurious({0.5, 1.5}, 0.2)), ValidationError);
  CHECK_THROWS_AS(gen_spurious_feature(rotated({0}, 0)), ValidationError);
}

TEST_CASE("rotated gaussians") {
  const auto same = gen_rotated_gaussians(rotated({0, 0, 0}, 0));
  REQUIRE(same.size() == 4);
  CHECK(same[0].name == "rot.source0");
  CHECK(same[3].name == "rot.unseen");
  CHECK_FALSE(same[0].x == same[1].x);  // different noise draws
  for (const auto& ds : same) CHECK(ds.size() == 300);

  // Rotation by theta then -theta restores the coordinates.
  const DomainDataset back = rotate_plane(rotate_plane(same[0], 37.0), -37.0);
  for (std::size_t i = 0; i < back.x.size(); ++i) CHECK(std::abs(back.x[i] - same[0].x[i]) <= 1e-12);

  // Near-zero noise: class means sit at the rotated prototypes.
  const auto clean = gen_rotated_gaussians(rotated({0, 90}, 45, 1e-6));
  for (std::size_t d = 0; d < clean.size(); ++d) {
    const double angle = (d == 0 ? 0.0 : d == 1 ? 90.0 : 45.0) * std::numbers::pi / 180.0;
    for (int k = 0; k < 3; ++k) {
      double mx = 0, my = 0, n = 0;
      for (std::size_t r = 0; r < clean[d].size(); ++r) {
        if (clean[d].y[r] != k) continue;
        mx += clean[d].x(r, 0), my += clean[d].x(r, 1), n += 1;
      }
      const double phase = 2 * std::numbers::pi * k / 3.0 + angle;
      CHECK(std::abs(mx / n - 2.0 * std::cos(phase)) < 1e-5);
      CHECK(std::abs(my / n - 2.0 * std::sin(phase)) < 1e-5);
    }
  }
}

TEST_CASE("spurious feature") {
  ScenarioSpec s = spurious({0.9, 0.7, 0.5}, -0.9, 10000);
  s.hull = HullMode::Extrapolated;
  const auto domains = gen_spurious_feature(s);
  const double expected[] = {0.9, 0.7, 0.5, -0.9};
  for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(label_corr(domains[d], 1) - expected[d]) < 0.05);

  // Core feature behaves the same everywhere.
  for (std::size_t d = 1; d < 4; ++d) CHECK(std::abs(label_corr(domains[d], 0) - label_corr(domains[0], 0)) < 0.05);

  const auto det = gen_spurious_feature(spurious({1.0, 1.0}, -1.0));
  for (std::size_t r = 0; r < det[0].size(); ++r) CHECK(det[0].x(r, 1) == (det[0].y[r] == 1 ? 1.0 : -1.0));
  for (std::size_t r = 0; r < det[2].size(); ++r) CHECK(det[2].x(r, 1) == (det[2].y[r] == 1 ? -1.0 : 1.0));

  // rho = 0 everywhere: the unseen domain follows the source law (compare moments).
  const auto flat = gen_spurious_feature(spurious({0, 0}, 0, 10000));
  CHECK(std::abs(label_corr(flat[2], 1)) < 0.05);
  CHECK(std::abs(label_corr(flat[2], 0) - label_corr(flat[0], 0)) < 0.05);

  ScenarioSpec three = spurious({0.5, 0.2}, 0.1);
  three.class_count = 3;
  three.samples_per_domain = 300;
  CHECK_THROWS_AS(gen_spurious_feature(three), ValidationError);

  // Same seed, same data; the seed matters.
  CHECK(gen_spurious_feature(spurious({0.5, 0.2}, 0.1))[0].x ==
        gen_spurious_feature(spurious({0.5, 0.2}, 0.1))[0].x);
  ScenarioSpec other = spurious({0.5, 0.2}, 0.1);
  other.seed = 10;
  CHECK_FALSE(gen_spurious_feature(other)[0].x == gen_spurious_feature(spurious({0.5, 0.2}, 0.1))[0].x);
}

TEST_CASE("split_train_val") {
  ScenarioSpec s = rotated({0, 0}, 0);
  s.class_count = 2;
  s.samples_per_domain = 1200;
  const DomainDataset ds = gen_rotated_gaussians(s)[0];
  const auto [train, val] = split_train_val(ds, 0.1, 3);
  std::map<int, int> tc, vc;
  for (int y : train.y) ++tc[y];
  for (int y : val.y) ++vc[y];
  CHECK(tc[0] == 540);
  CHECK(tc[1] == 540);
  CHECK(vc[0] == 60);
  CHECK(vc[1] == 60);
  CHECK(train.name == ds.name + ".train");

  // Union equals the original multiset of rows.
  auto rows_of = [](const DomainDataset& d) {
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < d.size(); ++r) {
      std::vector<double> row(d.x.row(r).begin(), d.x.row(r).end());
      row.push_back(d.y[r]);
      rows.push_back(row);
    }
    return rows;
  };
  auto all = rows_of(train);
  const auto vrows = rows_of(val);
  all.insert(all.end(), vrows.begin(), vrows.end());
  auto orig = rows_of(ds);
  std::sort(all.begin(), all.end());
  std::sort(orig.begin(), orig.end());
  CHECK(all == orig);

  CHECK(split_train_val(ds, 0.1, 3).second.x == val.x);
  CHECK_FALSE(split_train_val(ds, 0.1, 4).second.x == val.x);

  DomainDataset tiny{"tiny", Tensor::matrix({{1}, {2}, {3}}), {0, 1, 1}, 2};
  CHECK_THROWS_AS(split_train_val(tiny, 0.5, 1), StratificationError);
  CHECK_THROWS_AS(split_train_val(ds, 1.0, 1), ValidationError);
}

TEST_CASE("batch sampler") {
  const auto domains = gen_rotated_gaussians(rotated({0, 20}, 10));
  std::vector<DomainDataset> two(domains.begin(), domains.begin() + 2);

  // Full-size batch is a permutation of the dataset.
  BatchSampler full(two, 300, Rng(1));
  const auto batch = full.next();
  REQUIRE(batch.size() == 2);
  CHECK(batch[1].domain_index == 1);
  std::vector<int> ys = batch[0].y, orig = two[0].y;
  std::sort(ys.begin(), ys.end());
  std::sort(orig.begin(), orig.end());
  CHECK(ys == orig);

  BatchSampler a(two, 32, Rng(7)), b(two, 32, Rng(7));
  for (int i = 0; i < 5; ++i) {
    const auto x = a.next(), y = b.next();
    CHECK(x[0].x == y[0].x);
    CHECK(x[1].y == y[1].y);
  }

  // One full cycle (300 / 30 = 10 draws) visits every row exactly once.
  BatchSampler cycle(two, 30, Rng(9));
  std::vector<std::vector<double>> seen;
  for (int i = 0; i < 10; ++i) {
    const auto bt = cycle.next();
    for (std::size_t r = 0; r < bt[0].size(); ++r) seen.emplace_back(bt[0].x.row(r).begin(), bt[0].x.row(r).end());
  }
  std::vector<std::vector<double>> expect;
  for (std::size_t r = 0; r < two[0].size(); ++r) expect.emplace_back(two[0].x.row(r).begin(), two[0].x.row(r).end());
  std::sort(seen.begin(), seen.end());
  std::sort(expect.begin(), expect.end());
  CHECK(seen == expect);
}

TEST_CASE("dataset file roundtrip") {
  ScenarioSpec s = spurious({0.6, 0.3}, 0.45);
  s.hull = HullMode::Interpolated;
  s.input_dim = 7;
  const DomainDataset ds = gen_spurious_feature(s)[1];
  test::TempDir dir;
  const auto path = dir.path / "d.cmds";
  dataset_write(ds, path);
  const DomainDataset back = dataset_read(path);
  CHECK(back.name == ds.name);
  CHECK(back.y == ds.y);
  CHECK(bit_equal(back.x, ds.x));
  CHECK(back.input_dim() == 7);
  CHECK(back.class_count == 2);
  CHECK(encode_dataset(back) == encode_dataset(ds));

  const auto bytes = encode_dataset(ds);
  CHECK(std::memcmp(bytes.data(), "CMDS", 4) == 0);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 9);
  try {
    decode_dataset(cut);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 20);
  }
  auto bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_dataset(bad_version), VersionError);

  // A label outside [0, K) is rejected.
  auto bad_label = bytes;
  const std::size_t label_offset = 4 + 4 + 4 + ds.name.size() + 24;
  bad_label[label_offset] = 9;
  CHECK_THROWS_AS(decode_dataset(bad_label), FormatError);
}
