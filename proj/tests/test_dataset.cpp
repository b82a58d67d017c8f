#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "fairquant/dataset.hpp"

using namespace fairquant;

namespace {

SyntheticSpec two_group_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.groups = 2;
  spec.dim = 3;
  spec.sizes = {40, 40};
  spec.centers = {Vector::Zero(3), Vector::Zero(3)};
  spec.centers[0][0] = -10.0;
  spec.centers[1][0] = 10.0;
  spec.spreads = {0.5, 0.5};
  spec.difficulty = {1.0, 1.0};
  spec.seed = seed;
  return spec;
}

GroupedDataset toy_train(const std::vector<int>& group_of_row) {
  GroupedDataset ds;
  const int m = static_cast<int>(group_of_row.size());
  ds.features.resize(m, 2);
  ds.labels.resize(m);
  ds.groups.resize(m);
  int max_g = 0;
  for (int i = 0; i < m; ++i) {
    ds.features(i, 0) = i;  // unique marker per row
    ds.features(i, 1) = 10.0 * group_of_row[i];
    ds.labels[i] = group_of_row[i];
    ds.groups[i] = group_of_row[i];
    max_g = std::max(max_g, group_of_row[i]);
  }
  for (int g = 0; g <= max_g; ++g) ds.group_names.push_back("g" + std::to_string(g));
  ds.split = Split::Train;
  return ds;
}

// Multiset of rows keyed by the unique marker feature.
std::map<double, int> row_multiset(const GroupedDataset& ds) {
  std::map<double, int> counts;
  for (Eigen::Index i = 0; i < ds.size(); ++i) counts[ds.features(i, 0)]++;
  return counts;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("synthetic: far-apart groups are linearly separable by construction") {
  const auto [train, test] = generate_synthetic(two_group_spec(1));
  // The midpoint hyperplane x0 = 0 is a linear classifier; it must reach
  // 100% accuracy on both splits.
  for (const GroupedDataset* ds : {&train, &test}) {
    for (Eigen::Index i = 0; i < ds->size(); ++i) {
      const int predicted = ds->features(i, 0) > 0.0 ? 1 : 0;
      CHECK(predicted == ds->labels[i]);
    }
  }
}

TEST_CASE("synthetic: identical seeds give bit-identical datasets") {
  const auto [train_a, test_a] = generate_synthetic(two_group_spec(77));
  const auto [train_b, test_b] = generate_synthetic(two_group_spec(77));
  CHECK(std::memcmp(train_a.features.data(), train_b.features.data(),
                    sizeof(double) * train_a.features.size()) == 0);
  CHECK(std::memcmp(test_a.features.data(), test_b.features.data(),
                    sizeof(double) * test_a.features.size()) == 0);
  CHECK(train_a.labels == train_b.labels);

  const auto [train_c, test_c] = generate_synthetic(two_group_spec(78));
  CHECK(train_c.features != train_a.features);
}

TEST_CASE("synthetic: split is stratified 80/20 within one sample per group") {
  SyntheticSpec spec = two_group_spec(5);
  spec.groups = 3;
  spec.sizes = {97, 41, 10};
  spec.centers = {Vector::Zero(3), Vector::Ones(3), -Vector::Ones(3)};
  spec.spreads = {1.0, 1.0, 1.0};
  spec.difficulty = {1.0, 1.5, 2.0};
  const auto [train, test] = generate_synthetic(spec);
  const auto train_counts = train.group_counts();
  const auto test_counts = test.group_counts();
  for (int g = 0; g < 3; ++g) {
    const double expected = 0.8 * spec.sizes[static_cast<std::size_t>(g)];
    CHECK(std::abs(train_counts[static_cast<std::size_t>(g)] - expected) <= 1.0);
    CHECK(train_counts[static_cast<std::size_t>(g)] + test_counts[static_cast<std::size_t>(g)] ==
          spec.sizes[static_cast<std::size_t>(g)]);
  }
}

TEST_CASE("synthetic: degenerate specs are rejected") {
  SyntheticSpec spec = two_group_spec(1);
  spec.spreads = {0.0, 0.5};
  CHECK_THROWS_AS(generate_synthetic(spec), InputError);
  spec = two_group_spec(1);
  spec.difficulty = {0.5, 1.0};
  CHECK_THROWS_AS(generate_synthetic(spec), InputError);
  spec = two_group_spec(1);
  spec.sizes = {0, 40};
  CHECK_THROWS_AS(generate_synthetic(spec), InputError);
  spec = two_group_spec(1);
  spec.centers.pop_back();
  CHECK_THROWS_AS(generate_synthetic(spec), InputError);
}

TEST_CASE("group views partition the dataset in order") {
  const GroupedDataset ds = toy_train({0, 1, 0, 2, 1, 0, 2});
  std::size_t total = 0;
  std::vector<bool> seen(static_cast<std::size_t>(ds.size()), false);
  for (int g = 0; g < ds.num_groups(); ++g) {
    const std::vector<int> rows = ds.group_rows(g);
    total += rows.size();
    CHECK(std::is_sorted(rows.begin(), rows.end()));
    for (int r : rows) {
      CHECK(ds.groups[r] == g);
      CHECK(!seen[static_cast<std::size_t>(r)]);
      seen[static_cast<std::size_t>(r)] = true;
    }
  }
  CHECK(total == static_cast<std::size_t>(ds.size()));
}

TEST_CASE("resample: u_o on a balanced dataset is a multiset no-op") {
  const GroupedDataset ds = toy_train({0, 0, 0, 1, 1, 1, 2, 2, 2});
  SamplerConfig cfg;
  cfg.mode = SamplerMode::UO;
  cfg.seed = 9;
  const GroupedDataset out = resample(ds, cfg);
  CHECK(row_multiset(out) == row_multiset(ds));
}

TEST_CASE("resample: oversampling to max replicates every minority row") {
  std::vector<int> groups(110, 0);
  for (int i = 100; i < 110; ++i) groups[static_cast<std::size_t>(i)] = 1;
  const GroupedDataset ds = toy_train(groups);
  SamplerConfig cfg;
  cfg.mode = SamplerMode::Oversample;
  cfg.target = TargetRule::MaxGroup;
  cfg.seed = 3;
  const GroupedDataset out = resample(ds, cfg);
  const auto counts = out.group_counts();
  CHECK(counts[0] == 100);
  CHECK(counts[1] == 100);
  // Each of the 10 minority rows must appear at least floor(100/10) times.
  const auto multiset = row_multiset(out);
  for (int i = 100; i < 110; ++i) {
    CHECK(multiset.at(static_cast<double>(i)) >= 10);
  }
}

TEST_CASE("resample: undersampling to min keeps a subset of original rows") {
  std::vector<int> groups(110, 0);
  for (int i = 100; i < 110; ++i) groups[static_cast<std::size_t>(i)] = 1;
  const GroupedDataset ds = toy_train(groups);
  SamplerConfig cfg;
  cfg.mode = SamplerMode::Undersample;
  cfg.target = TargetRule::MinGroup;
  cfg.seed = 4;
  const GroupedDataset out = resample(ds, cfg);
  const auto counts = out.group_counts();
  CHECK(counts[0] == 10);
  CHECK(counts[1] == 10);
  for (const auto& [marker, count] : row_multiset(out)) {
    CHECK(count == 1);
    CHECK(marker >= 0.0);
    CHECK(marker < 110.0);
  }
}

TEST_CASE("resample: u_o balances to the median group size") {
  std::vector<int> groups;
  for (int i = 0; i < 50; ++i) groups.push_back(0);
  for (int i = 0; i < 20; ++i) groups.push_back(1);
  for (int i = 0; i < 8; ++i) groups.push_back(2);
  const GroupedDataset ds = toy_train(groups);
  SamplerConfig cfg;
  cfg.mode = SamplerMode::UO;
  cfg.seed = 6;
  const GroupedDataset out = resample(ds, cfg);
  const auto counts = out.group_counts();
  CHECK(counts[0] == 20);
  CHECK(counts[1] == 20);
  CHECK(counts[2] == 20);
}

TEST_CASE("resample: never invents feature values, only multiplicity changes") {
  std::vector<int> groups;
  for (int i = 0; i < 30; ++i) groups.push_back(i % 2 == 0 ? 0 : 1);
  for (int i = 0; i < 5; ++i) groups.push_back(2);
  const GroupedDataset ds = toy_train(groups);
  for (SamplerMode mode : {SamplerMode::Undersample, SamplerMode::Oversample, SamplerMode::UO}) {
    SamplerConfig cfg;
    cfg.mode = mode;
    cfg.target = mode == SamplerMode::Oversample ? TargetRule::MaxGroup : TargetRule::MinGroup;
    cfg.seed = 11;
    const GroupedDataset out = resample(ds, cfg);
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const int marker = static_cast<int>(out.features(i, 0));
      CHECK(out.features.row(i) == ds.features.row(marker));
      CHECK(out.labels[i] == ds.labels[marker]);
      CHECK(out.groups[i] == ds.groups[marker]);
    }
  }
}

TEST_CASE("resample: deterministic in seed, and test splits are refused") {
  std::vector<int> groups(40, 0);
  for (int i = 0; i < 12; ++i) groups[static_cast<std::size_t>(i)] = 1;
  GroupedDataset ds = toy_train(groups);
  SamplerConfig cfg;
  cfg.mode = SamplerMode::UO;
  cfg.seed = 21;
  const GroupedDataset a = resample(ds, cfg);
  const GroupedDataset b = resample(ds, cfg);
  CHECK(a.features == b.features);

  ds.split = Split::Test;
  CHECK_THROWS_AS(resample(ds, cfg), UsageError);
}

TEST_CASE("resample: explicit per-group counts are honored") {
  std::vector<int> groups;
  for (int i = 0; i < 30; ++i) groups.push_back(0);
  for (int i = 0; i < 6; ++i) groups.push_back(1);
  const GroupedDataset ds = toy_train(groups);
  SamplerConfig cfg;
  cfg.mode = SamplerMode::UO;
  cfg.target = TargetRule::Explicit;
  cfg.explicit_counts = {12, 12};
  cfg.seed = 2;
  const auto counts = resample(ds, cfg).group_counts();
  CHECK(counts[0] == 12);
  CHECK(counts[1] == 12);

  cfg.explicit_counts = {12};
  CHECK_THROWS_AS(resample(ds, cfg), InputError);
  cfg.explicit_counts = {12, 0};
  CHECK_THROWS_AS(resample(ds, cfg), InputError);
}

TEST_CASE("csv: well-formed file parses cell for cell") {
  const std::string path = temp_path("fairquant_test_small.csv");
  {
    std::ofstream out(path);
    out << "f0,f1,label,group\n";
    out << "1.5,-2.25,0,0\n";
    out << "0.125,3,1,1\n";
    out << "-7,0.5,0,1\n";
  }
  const GroupedDataset ds = load_csv(path);
  REQUIRE(ds.size() == 3);
  CHECK(ds.dim() == 2);
  CHECK(ds.features(0, 0) == 1.5);
  CHECK(ds.features(0, 1) == -2.25);
  CHECK(ds.features(1, 0) == 0.125);
  CHECK(ds.labels[1] == 1);
  CHECK(ds.groups[2] == 1);
  std::filesystem::remove(path);
}

TEST_CASE("csv: header-only file reports an empty dataset") {
  const std::string path = temp_path("fairquant_test_empty.csv");
  {
    std::ofstream out(path);
    out << "f0,f1,label,group\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(path), doctest::Contains("empty dataset"), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("csv: malformed cells carry row and column positions") {
  const std::string path = temp_path("fairquant_test_bad.csv");
  {
    std::ofstream out(path);
    out << "f0,f1,label,group\n";
    out << "1.0,oops,0,0\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(path), doctest::Contains("row 1, column 1"), ParseError);
  std::filesystem::remove(path);

  {
    std::ofstream out(path);
    out << "f0,f1,label,group\n";
    out << "1.0,nan,0,0\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(path), doctest::Contains("non-finite"), ParseError);
  std::filesystem::remove(path);

  {
    std::ofstream out(path);
    out << "f0,f1,klass,group\n";
    out << "1.0,2.0,0,0\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(path), doctest::Contains("missing column 'label'"), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("csv: save then load round-trips values exactly") {
  const auto [train, test] = generate_synthetic(two_group_spec(13));
  const std::string path = temp_path("fairquant_test_roundtrip.csv");
  save_csv(train, path);
  const GroupedDataset back = load_csv(path);
  REQUIRE(back.size() == train.size());
  REQUIRE(back.dim() == train.dim());
  // 17 significant digits round-trip doubles exactly.
  CHECK(back.features == train.features);
  CHECK(back.labels == train.labels);
  CHECK(back.groups == train.groups);
  std::filesystem::remove(path);
}
