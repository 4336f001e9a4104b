#include "tribranch/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tribranch {

namespace {

// Locations chosen for study habits, following the dataset's location list
// (teaching building, printing center, library).
constexpr int kStudyLocations[] = {2, 3, 5};
constexpr int kHabitSlotsPerLocation = 2;

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double normal01(std::mt19937_64& rng) {
  // Box-Muller; one draw per call keeps the stream layout simple
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Tensor encode_trajectory(const std::vector<BehaviorRecord>& records,
                         const DatasetDims& dims) {
  Tensor x = Tensor::zeros({dims.n_d, dims.n_t, dims.n_l});
  auto& data = x.raw();
  for (const auto& r : records) {
    if (r.day < 0 || r.day >= dims.n_d || r.slot < 0 || r.slot >= dims.n_t ||
        r.location < 0 || r.location >= dims.n_l) {
      std::ostringstream os;
      os << "record (student=" << r.student << ", day=" << r.day
         << ", slot=" << r.slot << ", location=" << r.location
         << ") out of range for dims " << dims.n_d << "x" << dims.n_t << "x"
         << dims.n_l;
      throw std::invalid_argument(os.str());
    }
    data[(static_cast<std::size_t>(r.day) * dims.n_t + r.slot) * dims.n_l +
         r.location] = 1.0;
  }
  return x;
}

DatasetSplit split_by_major(const std::vector<StudentLabel>& labels,
                            double train_frac, double val_frac,
                            double test_frac, std::uint64_t seed) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-12) {
    throw std::invalid_argument("split fractions must sum to 1");
  }
  std::map<MajorId, std::vector<StudentId>> by_major;
  for (const auto& l : labels) by_major[l.major].push_back(l.student);

  DatasetSplit split;
  for (auto& [major, students] : by_major) {
    if (students.size() < 5) {
      throw std::invalid_argument("major " + major + " has only " +
                                  std::to_string(students.size()) +
                                  " students; need at least 5 to split");
    }
    std::sort(students.begin(), students.end());
    std::mt19937_64 rng(splitmix64(seed ^ fnv1a(major)));
    // Fisher-Yates with our own uniform keeps the shuffle platform-stable
    for (std::size_t i = students.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(students[i], students[j]);
    }
    const std::size_t n = students.size();
    const std::size_t n_train = static_cast<std::size_t>(
        std::floor(train_frac * static_cast<double>(n)));
    const std::size_t n_val =
        static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(n)));
    split.train[major].assign(students.begin(), students.begin() + n_train);
    split.val[major].assign(students.begin() + n_train,
                            students.begin() + n_train + n_val);
    split.test[major].assign(students.begin() + n_train + n_val,
                             students.end());
  }
  return split;
}

TrueRanking build_true_ranking(const MajorId& major,
                               const std::vector<StudentLabel>& labels,
                               const std::vector<StudentId>& students) {
  std::map<StudentId, double> gpa;
  for (const auto& l : labels)
    if (l.major == major) gpa[l.student] = l.gpa;
  std::vector<StudentId> order;
  for (StudentId u : students) {
    if (!gpa.count(u)) {
      throw std::invalid_argument("student " + std::to_string(u) +
                                  " has no label in major " + major);
    }
    order.push_back(u);
  }
  std::sort(order.begin(), order.end(), [&](StudentId a, StudentId b) {
    if (gpa[a] != gpa[b]) return gpa[a] < gpa[b];
    return a < b;
  });
  TrueRanking ranking;
  ranking.major = major;
  ranking.n_s = static_cast<int>(order.size());
  int pos = 1;
  for (StudentId u : order) ranking.positions[u] = pos++;
  return ranking;
}

std::vector<PairSample> build_pairs(const std::vector<StudentId>& students,
                                    const TrueRanking& truth) {
  std::vector<StudentId> ids = students;
  std::sort(ids.begin(), ids.end());
  std::vector<PairSample> pairs;
  pairs.reserve(ids.size() * (ids.size() - 1) / 2);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      PairSample p;
      p.u = ids[i];
      p.v = ids[j];
      p.label = truth.position_of(p.u) > truth.position_of(p.v) ? +1 : -1;
      pairs.push_back(p);
    }
  }
  return pairs;
}

SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.majors <= 0 || cfg.students_per_major <= 0) {
    throw std::invalid_argument("synthetic config: counts must be positive");
  }
  if (cfg.base_visit_rate < 0.0 || cfg.base_visit_rate > 1.0) {
    throw std::invalid_argument("synthetic config: base_visit_rate not in [0,1]");
  }
  SyntheticData out;
  int student_id = 0;
  for (int m = 0; m < cfg.majors; ++m) {
    const MajorId major = "M" + std::to_string(m);
    for (int s = 0; s < cfg.students_per_major; ++s, ++student_id) {
      std::mt19937_64 rng(
          splitmix64(cfg.seed ^ (static_cast<std::uint64_t>(student_id) + 1)));
      const double aptitude = uniform01(rng);
      const double gpa = aptitude + cfg.aptitude_noise * normal01(rng);

      // habit slots are fixed per student: the regularity signal
      std::vector<std::pair<int, int>> habits;  // (slot, location)
      for (int loc : kStudyLocations) {
        std::set<int> slots;
        while (static_cast<int>(slots.size()) < kHabitSlotsPerLocation) {
          slots.insert(static_cast<int>(rng() % cfg.dims.n_t));
        }
        for (int slot : slots) habits.emplace_back(slot, loc);
      }
      const double study_p =
          std::min(1.0, cfg.base_visit_rate + cfg.signal_strength * aptitude);

      std::set<BehaviorRecord> visits;
      for (int d = 0; d < cfg.dims.n_d; ++d) {
        for (const auto& [slot, loc] : habits) {
          if (uniform01(rng) < study_p) {
            visits.insert({student_id, d, slot, loc});
          }
        }
        for (int t = 0; t < cfg.dims.n_t; ++t) {
          for (int l = 0; l < cfg.dims.n_l; ++l) {
            if (uniform01(rng) < cfg.base_visit_rate) {
              visits.insert({student_id, d, t, l});
            }
          }
        }
      }
      out.records.insert(out.records.end(), visits.begin(), visits.end());
      out.labels.push_back({student_id, major, gpa});
    }
  }
  return out;
}

std::vector<BehaviorRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<BehaviorRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      BehaviorRecord r;
      r.student = j.at("student").get<int>();
      r.day = j.at("day").get<int>();
      r.slot = j.at("slot").get<int>();
      r.location = j.at("location").get<int>();
      records.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed record: " + e.what());
    }
  }
  return records;
}

std::vector<StudentLabel> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<StudentLabel> labels;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line == "student,major,gpa") continue;
    std::istringstream ss(line);
    std::string f0, f1, f2;
    if (!std::getline(ss, f0, ',') || !std::getline(ss, f1, ',') ||
        !std::getline(ss, f2)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed label line");
    }
    try {
      labels.push_back({std::stoi(f0), f1, std::stod(f2)});
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed label line");
    }
  }
  return labels;
}

void save_records(const std::string& path,
                  const std::vector<BehaviorRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) {
    out << "{\"student\":" << r.student << ",\"day\":" << r.day
        << ",\"slot\":" << r.slot << ",\"location\":" << r.location << "}\n";
  }
}

void save_labels(const std::string& path,
                 const std::vector<StudentLabel>& labels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "student,major,gpa\n";
  char buf[64];
  for (const auto& l : labels) {
    std::snprintf(buf, sizeof(buf), "%.17g", l.gpa);
    out << l.student << "," << l.major << "," << buf << "\n";
  }
}

}  // namespace tribranch
