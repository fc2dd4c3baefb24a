#pragma once

#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "peadapt/core/error.hpp"

namespace peadapt {

/// counts[true][pred].
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes = 0) : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
        if (classes < 0) {
            throw ConfigError("confusion matrix needs a nonnegative class count");
        }
    }

    int classes() const { return classes_; }

    void add(int truth, int pred, std::int64_t n = 1) {
        if (truth < 0 || truth >= classes_ || pred < 0 || pred >= classes_) {
            throw InputError("label outside the class set: true=" + std::to_string(truth) +
                             " pred=" + std::to_string(pred) + " classes=" + std::to_string(classes_));
        }
        if (n < 0) {
            throw InputError("confusion counts must be nonnegative");
        }
        counts_[static_cast<std::size_t>(truth) * classes_ + pred] += n;
    }

    std::int64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * classes_ + pred]; }

    std::int64_t support(int k) const {
        std::int64_t s = 0;
        for (int j = 0; j < classes_; ++j) s += at(k, j);
        return s;
    }

    std::int64_t total() const {
        std::int64_t s = 0;
        for (auto c : counts_) s += c;
        return s;
    }

    std::int64_t trace() const {
        std::int64_t s = 0;
        for (int k = 0; k < classes_; ++k) s += at(k, k);
        return s;
    }

    bool operator==(const ConfusionMatrix& o) const { return classes_ == o.classes_ && counts_ == o.counts_; }

private:
    int classes_;
    std::vector<std::int64_t> counts_;
};

struct MetricsReport {
    double uar = 0.0;
    double war = 0.0;
    std::vector<double> per_class_recall;  // NaN for classes without support
    std::vector<std::int64_t> support;
    int classes_without_support = 0;

    bool operator==(const MetricsReport& o) const {
        if (uar != o.uar || war != o.war || support != o.support) return false;
        for (std::size_t i = 0; i < per_class_recall.size(); ++i) {
            const double a = per_class_recall[i], b = o.per_class_recall[i];
            if (!(a == b || (a != a && b != b))) return false;
        }
        return true;
    }
};

/// Classes with zero support are left out of the UAR mean.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    if (cm.total() == 0) {
        throw InputError("compute_metrics: confusion matrix is all zero");
    }
    MetricsReport r;
    double sum = 0.0;
    int counted = 0;
    for (int k = 0; k < cm.classes(); ++k) {
        const auto s = cm.support(k);
        r.support.push_back(s);
        if (s == 0) {
            r.per_class_recall.push_back(std::numeric_limits<double>::quiet_NaN());
            ++r.classes_without_support;
            continue;
        }
        const double recall = static_cast<double>(cm.at(k, k)) / static_cast<double>(s);
        r.per_class_recall.push_back(recall);
        sum += recall;
        ++counted;
    }
    r.uar = sum / counted;
    r.war = static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
    return r;
}

inline std::string format_report(const MetricsReport& r, const std::vector<std::string>& classes) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4);
    s << "class                 support  recall\n";
    for (std::size_t k = 0; k < r.support.size(); ++k) {
        const std::string name = k < classes.size() ? classes[k] : std::to_string(k);
        s << std::left << std::setw(20) << name << std::right << std::setw(9) << r.support[k] << "  ";
        if (r.support[k] == 0) {
            s << "   n/a\n";
        } else {
            s << r.per_class_recall[k] << "\n";
        }
    }
    s << "UAR " << r.uar << "  WAR " << r.war << "\n";
    return s.str();
}

inline std::string report_csv(const MetricsReport& r, const std::vector<std::string>& classes) {
    std::ostringstream s;
    s << std::setprecision(17);
    s << "metric,value\nuar," << r.uar << "\nwar," << r.war << "\n";
    for (std::size_t k = 0; k < r.support.size(); ++k) {
        const std::string name = k < classes.size() ? classes[k] : std::to_string(k);
        s << "recall_" << name << ",";
        if (r.support[k] > 0) s << r.per_class_recall[k];
        s << "\n";
    }
    return s.str();
}

}  // namespace peadapt
