#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "ropnet/core/error.hpp"

namespace ropnet {

// ROC AUC by the rank statistic; tied scores earn half credit, which matches
// the pairwise-comparison definition exactly.
inline double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), ErrorKind::ShapeMismatch,
          "scores/labels length mismatch");
  size_t n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg) += 1;
  require(n_pos > 0 && n_neg > 0, ErrorKind::InvalidParameter,
          "AUC needs both classes present");

  std::vector<size_t> idx(scores.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // average ranks over ties, 1-based
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t k = 0; k < labels.size(); ++k)
    if (labels[k]) rank_sum_pos += rank[k];
  double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Chance-corrected agreement from a square confusion matrix
// (rows = truth, cols = prediction).
inline double cohen_kappa(const std::vector<std::vector<long>>& confusion) {
  const size_t k = confusion.size();
  double n = 0.0, diag = 0.0;
  std::vector<double> row(k, 0.0), col(k, 0.0);
  for (size_t r = 0; r < k; ++r) {
    require(confusion[r].size() == k, ErrorKind::ShapeMismatch, "confusion matrix not square");
    for (size_t c = 0; c < k; ++c) {
      double v = static_cast<double>(confusion[r][c]);
      n += v;
      row[r] += v;
      col[c] += v;
      if (r == c) diag += v;
    }
  }
  require(n > 0, ErrorKind::InvalidParameter, "empty confusion matrix");
  double po = diag / n;
  double pe = 0.0;
  for (size_t i = 0; i < k; ++i) pe += (row[i] / n) * (col[i] / n);
  if (1.0 - pe < 1e-12) return po >= 1.0 - 1e-12 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

// Checkpoint-selection metric: mean of an F1 score and the sensitivity of
// the target pathology.
inline double clinical_score(double f1, double sens_target) {
  return 0.5 * (f1 + sens_target);
}

struct ClassMetrics {
  std::optional<double> sensitivity, specificity, precision, f1, auc;
};

struct EvalReport {
  int n_classes = 0;
  long n_samples = 0;
  std::vector<ClassMetrics> per_class;
  std::optional<double> macro_sensitivity, macro_specificity, macro_precision,
      macro_f1, macro_auc;
  double kappa = 0.0;
  std::optional<double> clinical;
  std::vector<std::vector<long>> confusion;
  std::vector<std::string> warnings;
};

// One-vs-rest metrics per class, unweighted macro averages over classes that
// appear in the labels, kappa from the confusion matrix, rank-statistic AUC.
// Classes absent from the labels report null metrics and are excluded from
// the macro means with a warning.
//
// scores[i][c] is the score for class c on sample i; pass an empty vector to
// skip AUC. cs_target_class selects the sensitivity entering the clinical
// score; cs_f1_macro picks macro F1 (multi-class staging) versus the target
// class's own F1 (binary plus detection).
inline EvalReport compute_metrics(const std::vector<int>& y_true,
                                  const std::vector<int>& y_pred,
                                  const std::vector<std::vector<double>>& scores,
                                  int n_classes, int cs_target_class,
                                  bool cs_f1_macro = true) {
  require(y_true.size() == y_pred.size() && !y_true.empty(), ErrorKind::InvalidParameter,
          "labels and predictions must align and be non-empty");
  EvalReport rep;
  rep.n_classes = n_classes;
  rep.n_samples = static_cast<long>(y_true.size());
  rep.confusion.assign(static_cast<size_t>(n_classes),
                       std::vector<long>(static_cast<size_t>(n_classes), 0));
  for (size_t i = 0; i < y_true.size(); ++i) {
    require(y_true[i] >= 0 && y_true[i] < n_classes && y_pred[i] >= 0 && y_pred[i] < n_classes,
            ErrorKind::InvalidParameter, "class index out of range");
    rep.confusion[static_cast<size_t>(y_true[i])][static_cast<size_t>(y_pred[i])] += 1;
  }

  rep.per_class.resize(static_cast<size_t>(n_classes));
  double sum_sens = 0, sum_spec = 0, sum_prec = 0, sum_f1 = 0, sum_auc = 0;
  int present = 0, auc_present = 0;
  for (int c = 0; c < n_classes; ++c) {
    size_t cc = static_cast<size_t>(c);
    long tp = rep.confusion[cc][cc];
    long fn = 0, fp = 0, tn = 0;
    for (int r = 0; r < n_classes; ++r)
      for (int p = 0; p < n_classes; ++p) {
        long v = rep.confusion[static_cast<size_t>(r)][static_cast<size_t>(p)];
        if (r == c && p != c) fn += v;
        if (r != c && p == c) fp += v;
        if (r != c && p != c) tn += v;
      }
    ClassMetrics& m = rep.per_class[cc];
    if (tp + fn == 0) {
      rep.warnings.push_back("class " + std::to_string(c) +
                             " absent from labels; excluded from macro averages");
      continue;
    }
    ++present;
    m.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.specificity = (fp + tn) > 0 ? std::optional<double>(static_cast<double>(tn) / (fp + tn))
                                  : std::nullopt;
    m.precision = (tp + fp) > 0 ? std::optional<double>(static_cast<double>(tp) / (tp + fp))
                                : std::optional<double>(0.0);
    double denom = 2.0 * tp + fp + fn;
    m.f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
    sum_sens += *m.sensitivity;
    sum_spec += m.specificity.value_or(0.0);
    sum_prec += *m.precision;
    sum_f1 += *m.f1;

    if (!scores.empty()) {
      std::vector<double> s(y_true.size());
      std::vector<int> l(y_true.size());
      for (size_t i = 0; i < y_true.size(); ++i) {
        s[i] = scores[i][cc];
        l[i] = y_true[i] == c ? 1 : 0;
      }
      bool has_neg = false;
      for (int lv : l) has_neg |= (lv == 0);
      if (has_neg) {
        m.auc = auc_rank(s, l);
        sum_auc += *m.auc;
        ++auc_present;
      }
    }
  }
  if (present > 0) {
    rep.macro_sensitivity = sum_sens / present;
    rep.macro_specificity = sum_spec / present;
    rep.macro_precision = sum_prec / present;
    rep.macro_f1 = sum_f1 / present;
  }
  if (auc_present > 0) rep.macro_auc = sum_auc / auc_present;
  rep.kappa = cohen_kappa(rep.confusion);

  const auto& target = rep.per_class[static_cast<size_t>(cs_target_class)];
  if (target.sensitivity.has_value()) {
    double f1 = cs_f1_macro ? rep.macro_f1.value_or(0.0) : target.f1.value_or(0.0);
    rep.clinical = clinical_score(f1, *target.sensitivity);
  }
  return rep;
}

// Fixed-field-order text form, diffable across runs. Floats print with %.17g
// so equal reports are byte-identical.
inline std::string serialize_eval_report(const EvalReport& rep) {
  std::string out;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string("null"); };
  out += "classes=" + std::to_string(rep.n_classes) + "\n";
  out += "samples=" + std::to_string(rep.n_samples) + "\n";
  for (int c = 0; c < rep.n_classes; ++c) {
    const auto& m = rep.per_class[static_cast<size_t>(c)];
    std::string p = "class." + std::to_string(c) + ".";
    out += p + "sensitivity=" + opt(m.sensitivity) + "\n";
    out += p + "specificity=" + opt(m.specificity) + "\n";
    out += p + "precision=" + opt(m.precision) + "\n";
    out += p + "f1=" + opt(m.f1) + "\n";
    out += p + "auc=" + opt(m.auc) + "\n";
  }
  out += "macro.sensitivity=" + opt(rep.macro_sensitivity) + "\n";
  out += "macro.specificity=" + opt(rep.macro_specificity) + "\n";
  out += "macro.precision=" + opt(rep.macro_precision) + "\n";
  out += "macro.f1=" + opt(rep.macro_f1) + "\n";
  out += "macro.auc=" + opt(rep.macro_auc) + "\n";
  out += "kappa=" + num(rep.kappa) + "\n";
  out += "clinical_score=" + opt(rep.clinical) + "\n";
  for (const auto& w : rep.warnings) out += "warning=" + w + "\n";
  return out;
}

}  // namespace ropnet
