#include "fundps/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace fundps {

namespace {

void check_pair(const Field& pred, const Field& truth) {
  if (pred.grid() != truth.grid() || pred.channels() != truth.channels()) {
    throw ShapeError("prediction " + to_string(pred.grid()) + "x" + std::to_string(pred.channels()) +
                     " does not match truth " + to_string(truth.grid()) + "x" + std::to_string(truth.channels()));
  }
}

EvalSummary summarize(const std::vector<double>& v) {
  EvalSummary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size()));
  return s;
}

}  // namespace

double rel_l2(const Field& pred, const Field& truth, int channel) {
  check_pair(pred, truth);
  if (channel < 0 || channel >= truth.channels()) throw InvalidArgument("channel " + std::to_string(channel) + " out of range");
  const auto p = pred.channel(channel);
  const auto t = truth.channel(channel);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    num += (p[k] - t[k]) * (p[k] - t[k]);
    den += t[k] * t[k];
  }
  if (den == 0.0) throw InvalidArgument("relative L2 error is undefined for a zero-norm truth");
  return std::sqrt(num / den);
}

double binary_error(const Field& pred, const Field& truth, double threshold) {
  check_pair(pred, truth);
  if (truth.channels() != 1) throw ShapeError("binary error needs single-channel fields");
  const auto p = pred.values();
  const auto t = truth.values();
  std::size_t wrong = 0;
  for (std::size_t k = 0; k < t.size(); ++k) wrong += (p[k] > threshold) != (t[k] > threshold);
  return static_cast<double>(wrong) / static_cast<double>(t.size());
}

EvalRow evaluate_sample(const std::string& id, const Field& pred, const Field& truth, std::optional<int> binary_channel,
                        double threshold) {
  check_pair(pred, truth);
  EvalRow row;
  row.id = id;
  for (int c = 0; c < truth.channels(); ++c) row.rel_l2.push_back(rel_l2(pred, truth, c));
  if (binary_channel) {
    row.binary_error = binary_error(pred.slice_channels(*binary_channel, 1), truth.slice_channels(*binary_channel, 1), threshold);
  }
  return row;
}

void EvalResult::add(EvalRow row) {
  if (rows.empty() && channels == 0) channels = static_cast<int>(row.rel_l2.size());
  if (static_cast<int>(row.rel_l2.size()) != channels) throw ShapeError("evaluation rows must share a channel count");
  rows.push_back(std::move(row));
}

EvalSummary EvalResult::rel_l2_summary(int channel) const {
  if (channel < 0 || channel >= channels) throw InvalidArgument("channel " + std::to_string(channel) + " out of range");
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.rel_l2[static_cast<std::size_t>(channel)]);
  return summarize(v);
}

std::optional<EvalSummary> EvalResult::binary_error_summary() const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.binary_error) v.push_back(*r.binary_error);
  }
  if (v.empty()) return std::nullopt;
  return summarize(v);
}

std::string EvalResult::to_csv() const {
  const auto bin = binary_error_summary();
  std::ostringstream os;
  os.precision(10);
  os << "id";
  for (int c = 0; c < channels; ++c) os << ",rel_l2_c" << c;
  if (bin) os << ",binary_error";
  os << "\n";
  for (const auto& r : rows) {
    os << r.id;
    for (double v : r.rel_l2) os << "," << v;
    if (bin) {
      os << ",";
      if (r.binary_error) os << *r.binary_error;
    }
    os << "\n";
  }
  os << "mean";
  for (int c = 0; c < channels; ++c) os << "," << rel_l2_summary(c).mean;
  if (bin) os << "," << bin->mean;
  os << "\nstd";
  for (int c = 0; c < channels; ++c) os << "," << rel_l2_summary(c).stddev;
  if (bin) os << "," << bin->stddev;
  os << "\n";
  return os.str();
}

void EvalResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InvalidArgument("cannot write " + path.string());
  os << to_csv();
}

}  // namespace fundps
