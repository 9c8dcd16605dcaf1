#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "hikfs/data.hpp"

using hikfs::Dataset;
using hikfs::GenSpec;
using hikfs::SplitMode;
using hikfs::SplitTag;

namespace {

GenSpec small_spec(std::uint64_t seed = 1) {
  GenSpec s;
  s.num_coarse = 3;
  s.fine_per_coarse = 2;
  s.dim = 5;
  s.per_class = 6;
  s.seed = seed;
  return s;
}

std::set<std::size_t> classes_of(const Dataset& d) {
  auto c = d.fine_classes();
  return {c.begin(), c.end()};
}

std::string error_of(const std::string& text) {
  std::istringstream in(text);
  try {
    hikfs::read_dataset(in);
  } catch (const hikfs::DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Generator, ZeroNoiseGivesClassCenters) {
  auto spec = small_spec();
  spec.noise = 0.0;
  auto ds = hikfs::gen_synthetic(spec);
  auto by = ds.indices_by_fine();
  for (const auto& idx : by)
    for (std::size_t i : idx) EXPECT_EQ(ds.items[i].x, ds.items[idx[0]].x);
}

TEST(Generator, CountsAndLabelsAreConsistent) {
  auto spec = small_spec();
  spec.num_coarse = 2;
  spec.per_class = 2;
  auto ds = hikfs::gen_synthetic(spec);
  EXPECT_EQ(ds.size(), 8u);
  EXPECT_NO_THROW(ds.validate());
  for (const auto& it : ds.items) EXPECT_EQ(ds.hierarchy.coarse_of(it.fine), it.coarse);
}

TEST(Generator, DeterministicPerSeed) {
  EXPECT_EQ(hikfs::gen_synthetic(small_spec(4)), hikfs::gen_synthetic(small_spec(4)));
  EXPECT_NE(hikfs::gen_synthetic(small_spec(4)).items[0].x, hikfs::gen_synthetic(small_spec(5)).items[0].x);
}

TEST(Generator, RejectsInvalidSpecs) {
  auto s = small_spec();
  s.fine_sep = s.coarse_sep;
  EXPECT_THROW(hikfs::gen_synthetic(s), hikfs::ConfigError);
  s = small_spec();
  s.per_class = 1;
  EXPECT_THROW(hikfs::gen_synthetic(s), hikfs::ConfigError);
}

TEST(Generator, NearestClassMeanSeparatesFreshDraw) {
  GenSpec spec;
  spec.num_coarse = 4;
  spec.fine_per_coarse = 3;
  spec.dim = 16;
  spec.per_class = 40;
  spec.coarse_sep = 10;
  spec.fine_sep = 1;
  spec.noise = 0.2;
  spec.seed = 3;
  const auto train = hikfs::gen_synthetic(spec);
  // Class means estimated on one draw, evaluated on the other half.
  std::vector<std::vector<double>> mean(train.hierarchy.num_fine(), std::vector<double>(spec.dim, 0.0));
  std::vector<double> count(train.hierarchy.num_fine(), 0.0);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < train.size(); i += 2) {
    const auto& it = train.items[i];
    count[it.fine] += 1;
    for (std::size_t k = 0; k < spec.dim; ++k) mean[it.fine][k] += it.x[k];
  }
  for (std::size_t y = 0; y < mean.size(); ++y)
    for (double& v : mean[y]) v /= count[y];
  for (std::size_t i = 1; i < train.size(); i += 2) {
    const auto& it = train.items[i];
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t y = 0; y < mean.size(); ++y) {
      double d = 0;
      for (std::size_t k = 0; k < spec.dim; ++k) d += (it.x[k] - mean[y][k]) * (it.x[k] - mean[y][k]);
      if (d < best_d) {
        best_d = d;
        best = y;
      }
    }
    correct += best == it.fine;
    ++total;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(total), 0.95);
}

TEST(Generator, ImageVariantHasByteRangePixels) {
  auto s = small_spec();
  s.image = true;
  auto ds = hikfs::gen_synthetic(s);
  EXPECT_EQ(ds.dim, 784u);
  for (double v : ds.items[0].x) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 255.0);
  }
  auto b = ds.batch(std::vector<std::size_t>{0});
  for (double v : b.values()) EXPECT_LE(v, 1.0);
}

TEST(DatasetFile, RoundTripIsExact) {
  auto ds = hikfs::gen_synthetic(small_spec());
  ds.provenance = "unit test";
  const auto path = std::filesystem::temp_directory_path() / "hikfs_data_roundtrip.txt";
  hikfs::save_dataset(ds, path);
  EXPECT_EQ(hikfs::load_dataset(path), ds);
  std::filesystem::remove(path);
}

TEST(DatasetFile, Errors) {
  EXPECT_NE(error_of("").find("empty dataset"), std::string::npos);
  EXPECT_NE(error_of("bogus\n").find("line 1"), std::string::npos);
  const std::string head = "hikfs-data v1\ndims=2\nsplit=unsplit\nprovenance=\nhierarchy=2\na\tx\nb\ty\n";
  EXPECT_NE(error_of(head).find("empty dataset"), std::string::npos);
  EXPECT_NE(error_of(head + "items=0\n").find("empty dataset"), std::string::npos);
  const auto wrong_parent = error_of(head + "items=1\na,y,1,2\n");
  EXPECT_NE(wrong_parent.find("'y'"), std::string::npos) << wrong_parent;
  EXPECT_NE(wrong_parent.find("'x'"), std::string::npos) << wrong_parent;
  EXPECT_NE(wrong_parent.find("line 9"), std::string::npos) << wrong_parent;
  EXPECT_NE(error_of(head + "items=1\nc,x,1,2\n").find("unknown fine class"), std::string::npos);
  EXPECT_NE(error_of(head + "items=1\na,x,1\n").find("expected 2 values"), std::string::npos);
  EXPECT_NE(error_of(head + "items=1\na,x,1,zz\n").find("line 9"), std::string::npos);
}

TEST(MetaSplit, TwoByTwoForcedByConstraint) {
  auto spec = small_spec();
  spec.num_coarse = 2;
  spec.fine_per_coarse = 2;
  auto ds = hikfs::gen_synthetic(spec);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto r = hikfs::mcfs_split(ds, {SplitMode::meta, {0.5, 0.0, 0.5}, seed});
    EXPECT_TRUE(r.val.empty());
    for (const auto* part : {&r.train, &r.test}) {
      std::set<std::size_t> coarse;
      for (std::size_t y : part->fine_classes()) coarse.insert(ds.hierarchy.coarse_of(y));
      EXPECT_EQ(part->fine_classes().size(), 2u);
      EXPECT_EQ(coarse.size(), 2u);
    }
  }
}

TEST(MetaSplit, PartitionAndCoverage) {
  auto spec = small_spec();
  spec.num_coarse = 4;
  spec.fine_per_coarse = 4;
  auto ds = hikfs::gen_synthetic(spec);
  auto r = hikfs::mcfs_split(ds, {SplitMode::meta, {0.5, 0.25, 0.25}, 3});
  auto tr = classes_of(r.train), va = classes_of(r.val), te = classes_of(r.test);
  EXPECT_EQ(tr.size() + va.size() + te.size(), 16u);
  std::set<std::size_t> all(tr);
  all.insert(va.begin(), va.end());
  all.insert(te.begin(), te.end());
  EXPECT_EQ(all.size(), 16u);
  std::set<std::size_t> train_coarse;
  for (std::size_t y : tr) train_coarse.insert(ds.hierarchy.coarse_of(y));
  for (std::size_t y : te) EXPECT_TRUE(train_coarse.count(ds.hierarchy.coarse_of(y)));
  EXPECT_EQ(r.train.split, SplitTag::train);
  EXPECT_EQ(r.test.split, SplitTag::test);
  EXPECT_NE(r.manifest.find("seed=3"), std::string::npos);
  EXPECT_NE(r.manifest.find(ds.hierarchy.fine_name(0) + "\t"), std::string::npos);
}

TEST(MetaSplit, InfeasibleRequestExplainsConstraint) {
  auto spec = small_spec();
  spec.num_coarse = 4;
  spec.fine_per_coarse = 1;
  auto ds = hikfs::gen_synthetic(spec);
  try {
    hikfs::mcfs_split(ds, {SplitMode::meta, {0.5, 0.0, 0.5}, 1});
    FAIL();
  } catch (const hikfs::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("every coarse class"), std::string::npos);
  }
}

TEST(MetaSplit, DeterministicPerSeed) {
  auto ds = hikfs::gen_synthetic(small_spec());
  auto a = hikfs::mcfs_split(ds, {SplitMode::meta, {0.5, 0.0, 0.5}, 7});
  auto b = hikfs::mcfs_split(ds, {SplitMode::meta, {0.5, 0.0, 0.5}, 7});
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_EQ(a.test, b.test);
}

TEST(SupervisedSplit, StratifiedWithinOne) {
  auto spec = small_spec();
  spec.per_class = 13;
  spec.jitter = 4;
  auto ds = hikfs::gen_synthetic(spec);
  auto r = hikfs::mcfs_split(ds, {SplitMode::supervised, {0.8, 0.0, 0.2}, 2});
  auto total = ds.indices_by_fine(), train = r.train.indices_by_fine(), test = r.test.indices_by_fine();
  for (std::size_t y = 0; y < total.size(); ++y) {
    const double n = static_cast<double>(total[y].size());
    EXPECT_LE(std::abs(static_cast<double>(train[y].size()) - 0.8 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(test[y].size()) - 0.2 * n), 1.0);
  }
  EXPECT_EQ(classes_of(r.train), classes_of(r.test));
  EXPECT_EQ(r.train.size() + r.test.size(), ds.size());
}

TEST(SupervisedSplit, RejectsBadFractionsAndSplitInput) {
  auto ds = hikfs::gen_synthetic(small_spec());
  EXPECT_THROW(hikfs::mcfs_split(ds, {SplitMode::supervised, {0.8, 0.1, 0.2}, 1}), hikfs::ConfigError);
  auto r = hikfs::mcfs_split(ds, {SplitMode::supervised, {0.8, 0.0, 0.2}, 1});
  EXPECT_THROW(hikfs::mcfs_split(r.train, {SplitMode::supervised, {0.8, 0.0, 0.2}, 1}), hikfs::DataError);
}

TEST(Holdout, KeepsEveryClass) {
  auto ds = hikfs::gen_synthetic(small_spec());
  auto [kept, held] = hikfs::stratified_holdout(ds, 0.2, 5);
  EXPECT_EQ(kept.size() + held.size(), ds.size());
  EXPECT_EQ(classes_of(kept), classes_of(held));
}
