#include "vitbd/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <string>

namespace vitbd {

double cda(const Checkpoint& model, const LabeledDataset& clean) {
  if (!model.defined()) throw ValueError("cda: undefined model");
  clean.validate(model.spec().num_classes);
  if (clean.size() == 0) throw ValueError("cda: empty evaluation set");
  return accuracy(model, clean);
}

double asr(const Checkpoint& model, const LabeledDataset& poisoned,
           int target_label, bool exclude_true_target) {
  if (!model.defined()) throw ValueError("asr: undefined model");
  const ModelSpec& spec = model.spec();
  poisoned.validate(spec.num_classes);
  if (poisoned.size() == 0) throw ValueError("asr: empty evaluation set");
  if (target_label < 0 ||
      static_cast<std::size_t>(target_label) >= spec.num_classes)
    throw ValueError("asr: target label out of range");
  if (exclude_true_target && poisoned.source_labels.empty())
    throw ValueError("asr: exclusion needs source labels");

  std::vector<int> preds = predict(model, poisoned.images);
  std::size_t kept = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (exclude_true_target && poisoned.source_labels[i] == target_label)
      continue;
    ++kept;
    if (preds[i] == target_label) ++hits;
  }
  if (kept == 0)
    throw ValueError("asr: no samples left after excluding the target class");
  return static_cast<double>(hits) / static_cast<double>(kept);
}

CostEstimate cost_estimate(AttackKind kind, const Checkpoint& model,
                           std::size_t dbia_tuned_scalars) {
  if (!model.defined()) throw ValueError("cost_estimate: undefined model");
  CostEstimate est;
  est.total_params = model.total_scalars();
  est.label_count = model.spec().num_classes;
  switch (kind) {
    case AttackKind::badnets:
      est.tuned_params = est.total_params;
      est.images_reversed = 0;
      break;
    case AttackKind::trojaning:
      est.tuned_params = est.total_params;
      est.images_reversed = est.label_count + 1;
      break;
    case AttackKind::dbia:
      if (dbia_tuned_scalars == 0)
        throw ValueError("cost_estimate: selection size required");
      if (dbia_tuned_scalars > est.total_params)
        throw ValueError("cost_estimate: selection exceeds the model");
      est.tuned_params = dbia_tuned_scalars;
      est.images_reversed = 1;
      break;
  }
  return est;
}

namespace {

constexpr const char* kCsvHeader =
    "label,cda_before,cda_after,asr_surd,asr_reld,ar,tpr,inject_seconds,"
    "config_hash";

// 17 significant digits: enough for an exact double round trip.
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_field(const std::string& s, const char* what) {
  if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos)
    throw ValueError(std::string("render_report: ") + what +
                     " must not contain commas or newlines");
}

// Fixed-width cell for the aligned text table.
std::string cell(const std::string& s, std::size_t width) {
  std::string out = s;
  if (out.size() < width) out.append(width - out.size(), ' ');
  return out;
}

std::string short_num(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

nlohmann::json report_json(const AttackReport& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["cda_before"] = r.cda_before;
  j["cda_after"] = r.cda_after;
  j["asr_surd"] = r.asr_surd;
  j["asr_reld"] = r.asr_reld;
  // JSON numbers cannot carry infinity; the sentinel survives as a string.
  if (std::isinf(r.ar))
    j["ar"] = "inf";
  else
    j["ar"] = r.ar;
  j["tpr"] = r.tpr;
  j["inject_seconds"] = r.inject_seconds;
  j["config_hash"] = r.config_hash;
  return j;
}

}  // namespace

std::string render_report(const std::vector<AttackReport>& reports,
                          ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::json arr = nlohmann::json::array();
    for (const AttackReport& r : reports) arr.push_back(report_json(r));
    return arr.dump(2) + "\n";
  }

  if (format == ReportFormat::csv) {
    std::ostringstream out;
    out << kCsvHeader << "\n";
    for (const AttackReport& r : reports) {
      check_field(r.label, "label");
      check_field(r.config_hash, "config_hash");
      out << r.label << ',' << num(r.cda_before) << ',' << num(r.cda_after)
          << ',' << num(r.asr_surd) << ',' << num(r.asr_reld) << ','
          << num(r.ar) << ',' << num(r.tpr) << ',' << num(r.inject_seconds)
          << ',' << r.config_hash << "\n";
    }
    return out.str();
  }

  static const char* names[] = {"label",    "cda_before", "cda_after",
                                "asr_surd", "asr_reld",   "ar",
                                "tpr",      "time_s"};
  std::size_t label_w = 5;
  for (const AttackReport& r : reports)
    label_w = std::max(label_w, r.label.size());
  std::ostringstream out;
  out << cell(names[0], label_w + 2);
  for (int i = 1; i < 8; ++i) out << cell(names[i], 12);
  out << "\n";
  for (const AttackReport& r : reports) {
    out << cell(r.label, label_w + 2);
    out << cell(short_num(r.cda_before), 12) << cell(short_num(r.cda_after), 12)
        << cell(short_num(r.asr_surd), 12) << cell(short_num(r.asr_reld), 12)
        << cell(short_num(r.ar), 12) << cell(short_num(r.tpr), 12)
        << cell(short_num(r.inject_seconds), 12);
    out << "\n";
  }
  return out.str();
}

std::vector<AttackReport> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw FormatError(FormatError::Kind::corrupt_header,
                      "report csv: missing or wrong header");
  std::vector<AttackReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const std::size_t c = line.find(',', pos);
      fields.push_back(line.substr(pos, c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (fields.size() != 9)
      throw FormatError(FormatError::Kind::bad_content,
                        "report csv: expected 9 fields per row");
    AttackReport r;
    r.label = fields[0];
    double* slots[] = {&r.cda_before, &r.cda_after,      &r.asr_surd,
                       &r.asr_reld,  &r.ar,             &r.tpr,
                       &r.inject_seconds};
    for (int i = 0; i < 7; ++i) {
      const std::string& f = fields[i + 1];
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (f.empty() || end != f.c_str() + f.size())
        throw FormatError(FormatError::Kind::bad_content,
                          "report csv: unparseable number '" + f + "'");
      *slots[i] = v;
    }
    r.config_hash = fields[8];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vitbd
