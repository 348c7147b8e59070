#pragma once

namespace pmil::evalharness {

// Two-class confusion counts, indexed [truth][prediction] with 1 = pain.
struct Confusion {
  long long counts[2][2] = {{0, 0}, {0, 0}};

  void add(bool truth_pain, bool predicted_pain) {
    ++counts[truth_pain ? 1 : 0][predicted_pain ? 1 : 0];
  }
  long long total() const {
    return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
  }
};

// Unweighted mean of the per-class F1 scores; a class with an undefined F1
// (empty denominator) contributes 0.
double f1_unweighted(const Confusion& confusion);

double accuracy(const Confusion& confusion);

}  // namespace pmil::evalharness
