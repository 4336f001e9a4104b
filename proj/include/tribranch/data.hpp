#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tribranch/ranking.hpp"
#include "tribranch/tensor.hpp"

namespace tribranch {

struct DatasetDims {
  int n_d = 30;
  int n_t = 18;
  int n_l = 12;
};

struct BehaviorRecord {
  StudentId student = 0;
  int day = 0;
  int slot = 0;
  int location = 0;

  bool operator<(const BehaviorRecord& o) const {
    return std::tie(student, day, slot, location) <
           std::tie(o.student, o.day, o.slot, o.location);
  }
  bool operator==(const BehaviorRecord& o) const = default;
};

struct StudentLabel {
  StudentId student = 0;
  MajorId major;
  double gpa = 0.0;
};

struct SyntheticConfig {
  int majors = 3;
  int students_per_major = 60;
  DatasetDims dims;
  double aptitude_noise = 0.05;    // sigma of the gpa noise around aptitude
  double base_visit_rate = 0.015;  // per-(day,slot,location) noise presence
  double signal_strength = 0.8;    // habit-slot visit prob. slope in aptitude
  std::uint64_t seed = 1;
};

struct DatasetSplit {
  std::map<MajorId, std::vector<StudentId>> train, val, test;
};

/// Deterministic 64-bit stream splitting for per-student RNGs.
std::uint64_t splitmix64(std::uint64_t x);

Tensor encode_trajectory(const std::vector<BehaviorRecord>& records,
                         const DatasetDims& dims);

DatasetSplit split_by_major(const std::vector<StudentLabel>& labels,
                            double train_frac, double val_frac,
                            double test_frac, std::uint64_t seed);

/// Ascending GPA; position 1 = worst performer. GPA ties broken by ascending
/// student id.
TrueRanking build_true_ranking(const MajorId& major,
                               const std::vector<StudentLabel>& labels,
                               const std::vector<StudentId>& students);

std::vector<PairSample> build_pairs(const std::vector<StudentId>& students,
                                    const TrueRanking& truth);

struct SyntheticData {
  std::vector<BehaviorRecord> records;
  std::vector<StudentLabel> labels;
};

SyntheticData generate_synthetic(const SyntheticConfig& cfg);

// records.jsonl / labels.csv on-disk formats
std::vector<BehaviorRecord> load_records(const std::string& path);
std::vector<StudentLabel> load_labels(const std::string& path);
void save_records(const std::string& path,
                  const std::vector<BehaviorRecord>& records);
void save_labels(const std::string& path,
                 const std::vector<StudentLabel>& labels);

}  // namespace tribranch
