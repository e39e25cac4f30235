#include "core/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace apt {

EvalMatrix::EvalMatrix(std::size_t tasks) : tasks_(tasks) {
  if (tasks == 0) raise(ErrorCode::InvalidArgument, "eval matrix needs at least one task");
  cells_.assign(tasks * tasks, 0.0);
  filled_.assign(tasks * tasks, false);
}

void EvalMatrix::set(std::size_t t, std::size_t i, Scalar acc) {
  if (!has(t, i))
    raise(ErrorCode::InvalidArgument, "eval matrix: cell (" + std::to_string(t) + ", " +
                                          std::to_string(i) + ") is outside the lower triangle");
  cells_[t * tasks_ + i] = acc;
  filled_[t * tasks_ + i] = true;
}

Scalar EvalMatrix::get(std::size_t t, std::size_t i) const {
  if (!has(t, i) || !filled_[t * tasks_ + i])
    raise(ErrorCode::Contract, "eval matrix: cell (" + std::to_string(t) + ", " +
                                   std::to_string(i) + ") was never measured");
  return cells_[t * tasks_ + i];
}

std::string EvalMatrix::to_csv() const {
  std::ostringstream os;
  os << "after_task";
  for (std::size_t i = 0; i < tasks_; ++i) os << ",task_" << (i + 1);
  os << "\n";
  char buf[64];
  for (std::size_t t = 0; t < tasks_; ++t) {
    os << (t + 1);
    for (std::size_t i = 0; i < tasks_; ++i) {
      os << ",";
      if (i <= t && filled_[t * tasks_ + i]) {
        // %.17g keeps the exact double; output is reproducible byte for byte
        std::snprintf(buf, sizeof(buf), "%.17g", cells_[t * tasks_ + i]);
        os << buf;
      }
    }
    os << "\n";
  }
  return os.str();
}

EvalMatrix EvalMatrix::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("after_task", 0) != 0)
    raise(ErrorCode::Io, "eval matrix csv: missing header");
  std::size_t tasks = 0;
  for (char c : line)
    if (c == ',') ++tasks;
  if (tasks == 0) raise(ErrorCode::Io, "eval matrix csv: header lists no tasks");
  EvalMatrix m(tasks);
  std::size_t t = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (t >= tasks) raise(ErrorCode::Io, "eval matrix csv: more rows than tasks");
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');  // row label
    for (std::size_t i = 0; i <= t; ++i) {
      if (!std::getline(row, cell, ','))
        raise(ErrorCode::Io, "eval matrix csv: short row " + std::to_string(t + 1));
      if (!cell.empty()) m.set(t, i, std::stod(cell));
    }
    ++t;
  }
  if (t != tasks) raise(ErrorCode::Io, "eval matrix csv: fewer rows than tasks");
  return m;
}

Scalar average_accuracy(const EvalMatrix& m) {
  const std::size_t T = m.tasks();
  Scalar sum = 0.0;
  for (std::size_t i = 0; i < T; ++i) sum += m.get(T - 1, i);
  return sum / static_cast<Scalar>(T);
}

Scalar forgetting(const EvalMatrix& m) {
  const std::size_t T = m.tasks();
  if (T == 1) return 0.0;
  Scalar sum = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) sum += m.get(i, i) - m.get(T - 1, i);
  return sum / static_cast<Scalar>(T - 1);
}

}  // namespace apt
