#include <gtest/gtest.h>

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "cflsim/data.hpp"

namespace cflsim {
namespace {

TEST(LoadCsv, PlainNumericTable) {
  const auto ds = parse_csv("a,b\n1,2\n3,4\n5,6");
  EXPECT_EQ(ds.rows(), 3u);
  EXPECT_EQ(ds.cols(), 2u);
  EXPECT_FALSE(ds.labels.has_value());
  EXPECT_EQ(ds.features(2, 1), 6.0);
  EXPECT_EQ(ds.column_names, (std::vector<std::string>{"a", "b"}));
}

TEST(LoadCsv, CategoricalColumnIsOneHotEncoded) {
  const auto ds = parse_csv("x,colour\n1,red\n2,green\n3,blue\n4,red\n");
  // 2 source columns -> 1 numeric + 3 indicators
  EXPECT_EQ(ds.cols(), 4u);
  EXPECT_EQ(ds.column_names[1], "colour=blue");
  EXPECT_EQ(ds.column_names[3], "colour=red");
  for (Eigen::Index r = 0; r < 4; ++r) EXPECT_EQ(ds.features.row(r).tail(3).sum(), 1.0);
  EXPECT_EQ(ds.features(0, 3), 1.0);
  EXPECT_EQ(ds.features(2, 1), 1.0);
}

TEST(LoadCsv, CaliforniaHousingFormat) {
  // expected shape counted with: head -1 file | awk -F, '{print NF-1}'  and  wc -l
  const auto ds = load_csv(std::filesystem::path(CFLSIM_TEST_DATA) / "california_housing_sample.csv",
                           std::string("median_house_value"));
  EXPECT_EQ(ds.rows(), 12u);
  EXPECT_EQ(ds.cols(), 8u);
  ASSERT_TRUE(ds.labels.has_value());
  EXPECT_EQ(ds.labels->front(), 452600.0);
  EXPECT_EQ(ds.label_name, "median_house_value");
}

TEST(LoadCsv, QuotedFieldsAndSemicolonDelimiter) {
  const auto ds = parse_csv("\"a;1\";b\n1.5;\"2\"\n-3;4e2\n", std::nullopt, ';');
  EXPECT_EQ(ds.column_names[0], "a;1");
  EXPECT_EQ(ds.features(1, 1), 400.0);
  EXPECT_EQ(ds.features(1, 0), -3.0);
}

TEST(LoadCsv, RaggedRowReportsLocation) {
  try {
    parse_csv("a,b\n1,2\n3\n");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, MissingValueReportsRowAndColumn) {
  try {
    parse_csv("a,b\n1,2\n3,\n");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column 2"), std::string::npos) << msg;
  }
}

TEST(LoadCsv, Errors) {
  EXPECT_THROW(load_csv("/nonexistent/nope.csv"), IoError);
  EXPECT_THROW(parse_csv(""), DataError);
  EXPECT_THROW(parse_csv("a,b\n"), DataError);
  EXPECT_THROW(parse_csv("y\n1\n", std::string("y")), DataError);
  EXPECT_THROW(parse_csv("a\n1\n", std::string("missing")), DataError);
}

TEST(LoadCsv, CsvRoundTripIsExact) {
  Rng rng(3);
  TabularDataset ds;
  ds.features.resize(7, 5);
  for (Eigen::Index i = 0; i < ds.features.size(); ++i) ds.features.data()[i] = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
  for (int c = 0; c < 5; ++c) ds.column_names.push_back("c," + std::to_string(c));
  const auto back = parse_csv(to_csv(ds));
  ASSERT_EQ(back.cols(), 5u);
  EXPECT_EQ(back.column_names, ds.column_names);
  EXPECT_LE((back.features - ds.features).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalize, KnownColumn) {
  TabularDataset ds;
  ds.features.resize(3, 2);
  ds.features << 1, 5, 2, 5, 3, 5;
  const auto n = normalize(ds);
  // population sd of [1,2,3] is sqrt(2/3); (1-2)/sqrt(2/3) = -sqrt(3/2)
  EXPECT_NEAR(n.features(0, 0), -std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(n.features(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(n.features(2, 0), std::sqrt(1.5), 1e-12);
  EXPECT_EQ(n.features.col(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Normalize, MomentsAndIdempotence) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto ds = synthesize({40, 6, 3, 0.5, seed});
    ds.features.col(2).setConstant(0.1);  // near-constant in floating point
    const auto n = normalize(ds);
    for (Eigen::Index c = 0; c < n.features.cols(); ++c) {
      const double mean = n.features.col(c).mean();
      const double sd = std::sqrt((n.features.col(c).array() - mean).square().mean());
      EXPECT_LT(std::abs(mean), 1e-9);
      if (c == 2) {
        EXPECT_EQ(sd, 0.0);
      } else {
        EXPECT_LT(std::abs(sd - 1.0), 1e-9);
      }
    }
    const auto twice = normalize(n);
    EXPECT_LE((twice.features - n.features).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Normalize, NeedsTwoRows) { EXPECT_THROW(normalize(parse_csv("a\n1\n")), ConfigError); }

TEST(Synthesize, Deterministic) {
  const SynthSpec spec{100, 16, 4, 0.01, 7};
  const auto a = synthesize(spec);
  const auto b = synthesize(spec);
  ASSERT_EQ(a.features.size(), b.features.size());
  EXPECT_EQ(0, std::memcmp(a.features.data(), b.features.data(), sizeof(double) * a.features.size()));
}

TEST(Synthesize, NoiseFreeRankOne) {
  const auto ds = synthesize({60, 10, 1, 0.0, 5});
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ds.features);
  const auto& s = svd.singularValues();
  EXPECT_LT(s(1), 1e-8 * s(0));
}

TEST(Synthesize, FullRankWithNoise) {
  const auto ds = synthesize({50, 8, 8, 0.1, 1});
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ds.features);
  const auto& s = svd.singularValues();
  EXPECT_GT(s(7), 1e-6 * s(0));
  EXPECT_EQ(svd.rank(), 8);
}

TEST(Synthesize, RejectsBadDimensions) {
  EXPECT_THROW(synthesize({10, 4, 5, 0.0, 1}), ConfigError);
  EXPECT_THROW(synthesize({10, 4, 0, 0.0, 1}), ConfigError);
}

TEST(PartitionVertical, OneColumnPerClient) {
  const auto p = partition_vertical(8, 8, 42);
  ASSERT_EQ(p.clients(), 8u);
  for (const auto& cols : p.assignments) EXPECT_EQ(cols.size(), 1u);
}

TEST(PartitionVertical, BalancedChunkSizes) {
  const auto p = partition_vertical(10, 3, 1);
  std::vector<std::size_t> sizes;
  for (const auto& cols : p.assignments) sizes.push_back(cols.size());
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 4}));
  EXPECT_EQ(p.max_width(), 4u);
}

TEST(PartitionVertical, Deterministic) {
  EXPECT_EQ(partition_vertical(17, 5, 9).assignments, partition_vertical(17, 5, 9).assignments);
  EXPECT_NE(partition_vertical(17, 5, 9).assignments, partition_vertical(17, 5, 10).assignments);
}

TEST(PartitionVertical, DisjointCoverProperty) {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = 1 + rng.below(12);
    const std::size_t d = k + rng.below(30);
    const auto p = partition_vertical(d, k, rng.next_u64());
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& cols : p.assignments) {
      EXPECT_FALSE(cols.empty());
      total += cols.size();
      seen.insert(cols.begin(), cols.end());
    }
    EXPECT_EQ(total, d);
    EXPECT_EQ(seen.size(), d);
    EXPECT_EQ(*seen.rbegin(), d - 1);
  }
}

TEST(PartitionVertical, FewerColumnsThanClients) { EXPECT_THROW(partition_vertical(3, 4, 1), ConfigError); }

}  // namespace
}  // namespace cflsim
