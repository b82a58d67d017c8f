#include "fairquant/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fairquant {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double_cell(const std::string& cell, std::size_t row, std::size_t col) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(col) +
                     ": not a number: '" + cell + "'");
  }
  if (!std::isfinite(value)) {
    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(col) +
                     ": non-finite value rejected");
  }
  return value;
}

int parse_int_cell(const std::string& cell, std::size_t row, std::size_t col) {
  int value = 0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(col) +
                     ": not an integer: '" + cell + "'");
  }
  return value;
}

// First k entries of a seeded partial Fisher-Yates draw, returned in
// ascending order so subsets keep the original row order.
std::vector<int> draw_without_replacement(const std::vector<int>& pool, std::size_t k, Rng& rng) {
  std::vector<int> work = pool;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(work.size() - i));
    std::swap(work[i], work[j]);
  }
  work.resize(k);
  std::sort(work.begin(), work.end());
  return work;
}

long median_count(std::vector<long> counts) {
  std::sort(counts.begin(), counts.end());
  const std::size_t n = counts.size();
  if (n % 2 == 1) return counts[n / 2];
  return (counts[n / 2 - 1] + counts[n / 2]) / 2;
}

}  // namespace

int GroupedDataset::num_classes() const {
  int classes = 0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) classes = std::max(classes, labels[i] + 1);
  return std::max(classes, num_groups());
}

std::vector<int> GroupedDataset::group_rows(int g) const {
  std::vector<int> rows;
  for (Eigen::Index i = 0; i < groups.size(); ++i) {
    if (groups[i] == g) rows.push_back(static_cast<int>(i));
  }
  return rows;
}

std::vector<long> GroupedDataset::group_counts() const {
  std::vector<long> counts(static_cast<std::size_t>(num_groups()), 0);
  for (Eigen::Index i = 0; i < groups.size(); ++i) counts[static_cast<std::size_t>(groups[i])]++;
  return counts;
}

GroupedDataset GroupedDataset::take_rows(const std::vector<int>& rows) const {
  GroupedDataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  out.groups.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
    out.labels[static_cast<Eigen::Index>(i)] = labels[rows[i]];
    out.groups[static_cast<Eigen::Index>(i)] = groups[rows[i]];
  }
  out.group_names = group_names;
  out.split = split;
  return out;
}

void GroupedDataset::validate() const {
  if (features.rows() == 0) throw InputError("empty dataset");
  if (labels.size() != features.rows() || groups.size() != features.rows()) {
    throw InputError("dataset rows, labels, and groups must align");
  }
  const int g_count = num_groups();
  for (Eigen::Index i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= g_count) {
      throw InputError("group id out of range at row " + std::to_string(i));
    }
    if (labels[i] < 0) throw InputError("negative label at row " + std::to_string(i));
  }
}

void SyntheticSpec::validate() const {
  if (groups < 1 || dim < 1) throw InputError("synthetic spec needs groups >= 1 and dim >= 1");
  const auto g = static_cast<std::size_t>(groups);
  if (sizes.size() != g || centers.size() != g || spreads.size() != g || difficulty.size() != g) {
    throw InputError("synthetic spec: sizes, centers, spreads, difficulty must have one entry per group");
  }
  if (!group_names.empty() && group_names.size() != g) {
    throw InputError("synthetic spec: group_names length must equal the group count");
  }
  for (std::size_t i = 0; i < g; ++i) {
    if (sizes[i] < 1) throw InputError("synthetic spec: sizes must be >= 1");
    if (!(spreads[i] > 0.0)) throw InputError("synthetic spec: spreads must be positive");
    if (!(difficulty[i] >= 1.0)) throw InputError("synthetic spec: difficulty must be >= 1");
    if (centers[i].size() != dim) throw InputError("synthetic spec: center dimension mismatch");
  }
}

std::string sampler_mode_name(SamplerMode mode) {
  switch (mode) {
    case SamplerMode::None:
      return "none";
    case SamplerMode::Undersample:
      return "undersample";
    case SamplerMode::Oversample:
      return "oversample";
    case SamplerMode::UO:
      return "u_o";
  }
  return "none";
}

SamplerMode sampler_mode_from_name(const std::string& name) {
  if (name == "none") return SamplerMode::None;
  if (name == "undersample") return SamplerMode::Undersample;
  if (name == "oversample") return SamplerMode::Oversample;
  if (name == "u_o") return SamplerMode::UO;
  throw ParseError("unknown sampler mode: " + name);
}

std::pair<GroupedDataset, GroupedDataset> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  std::vector<std::string> names = spec.group_names;
  if (names.empty()) {
    for (int g = 0; g < spec.groups; ++g) names.push_back("g" + std::to_string(g));
  }

  long train_rows = 0;
  long test_rows = 0;
  std::vector<long> train_per_group(static_cast<std::size_t>(spec.groups));
  for (int g = 0; g < spec.groups; ++g) {
    const long n = spec.sizes[static_cast<std::size_t>(g)];
    const long n_train = std::lround(0.8 * static_cast<double>(n));
    train_per_group[static_cast<std::size_t>(g)] = n_train;
    train_rows += n_train;
    test_rows += n - n_train;
  }
  if (train_rows == 0 || test_rows == 0) {
    throw InputError("synthetic spec too small for an 80/20 split");
  }

  GroupedDataset train;
  GroupedDataset test;
  train.features.resize(train_rows, spec.dim);
  train.labels.resize(train_rows);
  train.groups.resize(train_rows);
  train.group_names = names;
  train.split = Split::Train;
  test.features.resize(test_rows, spec.dim);
  test.labels.resize(test_rows);
  test.groups.resize(test_rows);
  test.group_names = names;
  test.split = Split::Test;

  Eigen::Index tr = 0;
  Eigen::Index te = 0;
  for (int g = 0; g < spec.groups; ++g) {
    const std::size_t gi = static_cast<std::size_t>(g);
    const double sd = spec.spreads[gi] * spec.difficulty[gi];
    for (int i = 0; i < spec.sizes[gi]; ++i) {
      const bool to_train = i < train_per_group[gi];
      Eigen::Index row = to_train ? tr++ : te++;
      GroupedDataset& dst = to_train ? train : test;
      for (int j = 0; j < spec.dim; ++j) {
        dst.features(row, j) = spec.centers[gi][j] + sd * rng.normal();
      }
      dst.labels[row] = g;
      dst.groups[row] = g;
    }
  }
  train.validate();
  test.validate();
  return {std::move(train), std::move(test)};
}

GroupedDataset resample(const GroupedDataset& ds, const SamplerConfig& cfg) {
  if (ds.split != Split::Train) {
    throw UsageError("resample: only train splits may be resampled; the test distribution stays untouched");
  }
  ds.validate();
  if (cfg.mode == SamplerMode::None) return ds;

  const int g_count = ds.num_groups();
  const std::vector<long> counts = ds.group_counts();
  if (cfg.target == TargetRule::Explicit) {
    if (cfg.explicit_counts.size() != static_cast<std::size_t>(g_count)) {
      throw InputError("explicit sampler counts must name every group");
    }
    for (int c : cfg.explicit_counts) {
      if (c < 1) throw InputError("explicit sampler counts must be >= 1");
    }
  }

  const long min_count = *std::min_element(counts.begin(), counts.end());
  const long max_count = *std::max_element(counts.begin(), counts.end());
  const long median = median_count(counts);

  Rng rng(cfg.seed);
  std::vector<int> rows;
  for (int g = 0; g < g_count; ++g) {
    const std::vector<int> pool = ds.group_rows(g);
    const long n = static_cast<long>(pool.size());
    if (n == 0) continue;

    long target = n;
    switch (cfg.target) {
      case TargetRule::MinGroup:
        target = min_count;
        break;
      case TargetRule::MaxGroup:
        target = max_count;
        break;
      case TargetRule::Explicit:
        target = cfg.explicit_counts[static_cast<std::size_t>(g)];
        break;
    }
    if (cfg.mode == SamplerMode::UO && cfg.target != TargetRule::Explicit) target = median;

    long goal = target;
    if (cfg.mode == SamplerMode::Undersample) goal = std::min(n, target);
    if (cfg.mode == SamplerMode::Oversample) goal = std::max(n, target);

    if (goal == n) {
      rows.insert(rows.end(), pool.begin(), pool.end());
    } else if (goal < n) {
      const std::vector<int> drawn =
          draw_without_replacement(pool, static_cast<std::size_t>(goal), rng);
      rows.insert(rows.end(), drawn.begin(), drawn.end());
    } else {
      const long reps = goal / n;
      const long remainder = goal % n;
      for (long r = 0; r < reps; ++r) rows.insert(rows.end(), pool.begin(), pool.end());
      if (remainder > 0) {
        const std::vector<int> extra =
            draw_without_replacement(pool, static_cast<std::size_t>(remainder), rng);
        rows.insert(rows.end(), extra.begin(), extra.end());
      }
    }
  }
  return ds.take_rows(rows);
}

GroupedDataset load_csv(const std::string& path, const CsvSchema& schema, Split split) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const std::vector<std::string> header = split_line(line);
  int label_col = -1;
  int group_col = -1;
  std::vector<int> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == schema.label_column) {
      label_col = static_cast<int>(c);
    } else if (header[c] == schema.group_column) {
      group_col = static_cast<int>(c);
    } else {
      feature_cols.push_back(static_cast<int>(c));
    }
  }
  if (label_col < 0) throw ParseError(path + ": missing column '" + schema.label_column + "'");
  if (group_col < 0) throw ParseError(path + ": missing column '" + schema.group_column + "'");
  if (feature_cols.empty()) throw ParseError(path + ": no feature columns");

  std::vector<std::vector<double>> feature_rows;
  std::vector<int> labels;
  std::vector<int> groups;
  std::size_t row_number = 1;  // header is row 0
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      ++row_number;
      continue;
    }
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("row " + std::to_string(row_number) + ": expected " +
                       std::to_string(header.size()) + " cells, got " +
                       std::to_string(cells.size()));
    }
    std::vector<double> row;
    row.reserve(feature_cols.size());
    for (int c : feature_cols) {
      row.push_back(parse_double_cell(cells[static_cast<std::size_t>(c)], row_number,
                                      static_cast<std::size_t>(c)));
    }
    const int label = parse_int_cell(cells[static_cast<std::size_t>(label_col)], row_number,
                                     static_cast<std::size_t>(label_col));
    const int group = parse_int_cell(cells[static_cast<std::size_t>(group_col)], row_number,
                                     static_cast<std::size_t>(group_col));
    if (label < 0) throw ParseError("row " + std::to_string(row_number) + ": negative label");
    if (group < 0) throw ParseError("row " + std::to_string(row_number) + ": negative group id");
    feature_rows.push_back(std::move(row));
    labels.push_back(label);
    groups.push_back(group);
    ++row_number;
  }
  if (feature_rows.empty()) throw ParseError(path + ": empty dataset");

  GroupedDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(feature_rows.size()),
                     static_cast<Eigen::Index>(feature_cols.size()));
  ds.labels.resize(static_cast<Eigen::Index>(labels.size()));
  ds.groups.resize(static_cast<Eigen::Index>(groups.size()));
  int max_group = 0;
  for (std::size_t i = 0; i < feature_rows.size(); ++i) {
    for (std::size_t j = 0; j < feature_rows[i].size(); ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = feature_rows[i][j];
    }
    ds.labels[static_cast<Eigen::Index>(i)] = labels[i];
    ds.groups[static_cast<Eigen::Index>(i)] = groups[i];
    max_group = std::max(max_group, groups[i]);
  }
  for (int g = 0; g <= max_group; ++g) ds.group_names.push_back("g" + std::to_string(g));
  ds.split = split;
  ds.validate();
  return ds;
}

void save_csv(const GroupedDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path);
  for (Eigen::Index j = 0; j < ds.dim(); ++j) out << 'f' << j << ',';
  out << "label,group\n";
  char buffer[40];
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (Eigen::Index j = 0; j < ds.dim(); ++j) {
      std::snprintf(buffer, sizeof(buffer), "%.17g", ds.features(i, j));
      out << buffer << ',';
    }
    out << ds.labels[i] << ',' << ds.groups[i] << '\n';
  }
  if (!out) throw ParseError("write failed: " + path);
}

}  // namespace fairquant
