#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace fedsim::stats {

// ---------------------------------------------------------------------------
// Special functions.  Self-contained float64 implementations: log-gamma via
// the Lanczos approximation (g = 7, 9 terms) and the regularized incomplete
// beta function via a Lentz-style continued fraction.  Both are accurate to
// roughly 1e-13 relative, comfortably inside what the tests demand.
// ---------------------------------------------------------------------------

inline double log_gamma(double x) {
    static const double cof[9] = {
        0.99999999999980993,      676.5203681218851,     -1259.1392167224028,
        771.32342877765313,      -176.61502916214059,     12.507343278686905,
        -0.13857109526572012,      9.9843695780195716e-6,  1.5056327351493116e-7};
    if (std::isnan(x)) return std::numeric_limits<double>::quiet_NaN();
    if (x < 0.5) {
        // Reflection formula; poles at non-positive integers.
        const double pi = 3.141592653589793238462643383279502884;
        const double s = std::sin(pi * x);
        if (s == 0.0) return std::numeric_limits<double>::infinity();
        return std::log(pi / std::abs(s)) - log_gamma(1.0 - x);
    }
    const double xm1 = x - 1.0;
    double a = cof[0];
    for (int i = 1; i < 9; ++i) a += cof[i] / (xm1 + i);
    const double t = xm1 + 7.5;
    const double half_log_two_pi = 0.91893853320467274178032973640562;
    return half_log_two_pi + (xm1 + 0.5) * std::log(t) - t + std::log(a);
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
    constexpr int max_iter = 300;
    constexpr double eps = 3.0e-14;
    constexpr double fpmin = 1.0e-300;

    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) return h;
    }
    throw std::runtime_error("beta_cf: continued fraction failed to converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double reg_inc_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0))
        throw std::invalid_argument("reg_inc_beta: a and b must be positive");
    if (x < 0.0 || x > 1.0)
        throw std::invalid_argument("reg_inc_beta: x outside [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = log_gamma(a + b) - log_gamma(a) - log_gamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    // Use the series on the side where it converges fast, symmetry elsewhere.
    if (x < (a + 1.0) / (a + b + 2.0))
        return front * detail::beta_cf(a, b, x) / a;
    return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// Two-sided p-value of a Student t statistic with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
    if (!(df > 0.0)) throw std::invalid_argument("student_t_two_sided_p: df must be positive");
    if (std::isinf(t)) return 0.0;
    return reg_inc_beta(0.5 * df, 0.5, df / (df + t * t));
}

// Upper-tail p-value P(F(d1, d2) > f).
inline double f_upper_tail_p(double f, double d1, double d2) {
    if (!(d1 > 0.0) || !(d2 > 0.0))
        throw std::invalid_argument("f_upper_tail_p: degrees of freedom must be positive");
    if (f <= 0.0) return 1.0;
    if (std::isinf(f)) return 0.0;
    return reg_inc_beta(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f));
}

// Asymptotic two-sample Kolmogorov-Smirnov p-value.
//   lambda = D * sqrt(n1*n2/(n1+n2)),  p = 2 * sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2)
// Terms below 1e-10 are dropped; the result is clamped to [0, 1].
inline double ks_asymptotic_p(double lambda) {
    if (lambda < 1e-8) return 1.0;
    const double l2 = -2.0 * lambda * lambda;
    double sum = 0.0, sign = 1.0;
    for (int j = 1; j <= 1000; ++j) {
        const double term = std::exp(l2 * j * j);
        if (term < 1e-10) break;
        sum += sign * term;
        sign = -sign;
    }
    return std::min(1.0, std::max(0.0, 2.0 * sum));
}

// ---------------------------------------------------------------------------
// Medians and the median split.
// ---------------------------------------------------------------------------

// Median as the lower-middle order statistic: no averaging for even counts,
// so the returned value is always an element of the input.  Used everywhere a
// median appears (split, clustering tie-break, coordinate-median baseline).
inline double median_lower(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median_lower: empty input");
    const std::size_t k = (v.size() - 1) / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

struct SplitLists {
    double median = 0.0;
    std::vector<double> above;  // v - median for v > median
    std::vector<double> below;  // median - v for v < median
    std::vector<std::size_t> above_idx;
    std::vector<std::size_t> below_idx;
    std::vector<std::size_t> at_median_idx;  // v == median (the median element included)
};

// Split values at the median into distance lists.  The three index sets
// partition the input; entries equal to the median go to neither side.
inline SplitLists median_split(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("median_split: empty input");
    SplitLists out;
    out.median = median_lower(values);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (v > out.median) {
            out.above.push_back(v - out.median);
            out.above_idx.push_back(i);
        } else if (v < out.median) {
            out.below.push_back(out.median - v);
            out.below_idx.push_back(i);
        } else {
            out.at_median_idx.push_back(i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Two-sample tests.  Each test refuses to run (performed = false) when its
// inputs are too small or degenerate rather than producing a garbage p-value.
// ---------------------------------------------------------------------------

struct TestResult {
    bool performed = false;
    double statistic = 0.0;
    double p_value = 1.0;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Unbiased sample variance (n - 1 divisor).
inline double sample_var(const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size() - 1);
}

}  // namespace detail

// Student's two-sample t-test with pooled variance, two-sided.
inline TestResult t_test(const std::vector<double>& l1, const std::vector<double>& l2) {
    TestResult r;
    if (l1.size() < 3 || l2.size() < 3) return r;
    const double n1 = static_cast<double>(l1.size());
    const double n2 = static_cast<double>(l2.size());
    const double m1 = detail::mean_of(l1);
    const double m2 = detail::mean_of(l2);
    const double df = n1 + n2 - 2.0;
    const double sp2 = ((n1 - 1.0) * detail::sample_var(l1, m1) +
                        (n2 - 1.0) * detail::sample_var(l2, m2)) / df;
    if (sp2 <= 0.0) {
        // Both samples constant.  Equal constants carry no signal; different
        // constants give a degenerate statistic, so the test abstains.
        if (m1 == m2) {
            r.performed = true;
            r.statistic = 0.0;
            r.p_value = 1.0;
        }
        return r;
    }
    r.performed = true;
    r.statistic = (m1 - m2) / std::sqrt(sp2 * (1.0 / n1 + 1.0 / n2));
    r.p_value = student_t_two_sided_p(r.statistic, df);
    return r;
}

// Levene's test for equality of variances, mean-centered variant, two groups.
// The statistic follows F(1, n1 + n2 - 2) under the null.
inline TestResult levene_test(const std::vector<double>& l1, const std::vector<double>& l2) {
    TestResult r;
    if (l1.size() < 3 || l2.size() < 3) return r;
    const double n1 = static_cast<double>(l1.size());
    const double n2 = static_cast<double>(l2.size());
    const double m1 = detail::mean_of(l1);
    const double m2 = detail::mean_of(l2);

    std::vector<double> z1(l1.size()), z2(l2.size());
    for (std::size_t i = 0; i < l1.size(); ++i) z1[i] = std::abs(l1[i] - m1);
    for (std::size_t i = 0; i < l2.size(); ++i) z2[i] = std::abs(l2[i] - m2);

    const double zm1 = detail::mean_of(z1);
    const double zm2 = detail::mean_of(z2);
    const double zm = (n1 * zm1 + n2 * zm2) / (n1 + n2);

    double denom = 0.0;
    for (double z : z1) denom += (z - zm1) * (z - zm1);
    for (double z : z2) denom += (z - zm2) * (z - zm2);
    if (denom <= 0.0) return r;  // deviations are constant within groups

    const double numer = n1 * (zm1 - zm) * (zm1 - zm) + n2 * (zm2 - zm) * (zm2 - zm);
    const double df2 = n1 + n2 - 2.0;
    r.performed = true;
    r.statistic = df2 * numer / denom;
    r.p_value = f_upper_tail_p(r.statistic, 1.0, df2);
    return r;
}

// Two-sample Kolmogorov-Smirnov test.  D is exact (merge walk over both
// sorted samples); the p-value uses the asymptotic Kolmogorov series.
inline TestResult ks_test(const std::vector<double>& l1, const std::vector<double>& l2) {
    TestResult r;
    if (l1.size() < 3 || l2.size() < 3) return r;
    std::vector<double> a = l1, b = l2;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double n1 = static_cast<double>(a.size());
    const double n2 = static_cast<double>(b.size());

    double d = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
        const double diff = std::abs(static_cast<double>(i) / n1 - static_cast<double>(j) / n2);
        d = std::max(d, diff);
    }
    r.performed = true;
    r.statistic = d;
    r.p_value = ks_asymptotic_p(d * std::sqrt(n1 * n2 / (n1 + n2)));
    return r;
}

// Three-sigma outlier rule on the raw values: flag |v - mean| > 3 * sample
// standard deviation (strict).  Needs at least 4 values to say anything.
struct SigmaResult {
    bool performed = false;
    std::vector<std::size_t> outliers;
};

inline SigmaResult three_sigma_outliers(const std::vector<double>& values) {
    SigmaResult r;
    if (values.size() < 4) return r;
    r.performed = true;
    const double m = detail::mean_of(values);
    const double s = std::sqrt(detail::sample_var(values, m));
    for (std::size_t i = 0; i < values.size(); ++i)
        if (std::abs(values[i] - m) > 3.0 * s) r.outliers.push_back(i);
    return r;
}

// ---------------------------------------------------------------------------
// Agglomerative 2-clustering, average linkage (UPGMA: cluster distance is the
// mean of all cross-pair distances from the original matrix).  Ties are broken
// deterministically: prefer the candidate pair whose combined smallest member
// index is lowest, then the lower remaining member index.
// ---------------------------------------------------------------------------

// dist must be square and symmetric; returns a 0/1 label per point with the
// cluster containing point 0 labeled 0.
inline std::vector<int> two_clusters_from_distance(const std::vector<std::vector<double>>& dist) {
    const std::size_t n = dist.size();
    if (n < 2) throw std::invalid_argument("two_clusters_from_distance: need at least 2 points");
    for (const auto& row : dist)
        if (row.size() != n) throw std::invalid_argument("two_clusters_from_distance: matrix not square");

    std::vector<std::vector<std::size_t>> clusters(n);
    for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};

    auto linkage = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
        double s = 0.0;
        for (std::size_t x : a)
            for (std::size_t y : b) s += dist[x][y];
        return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
    };

    while (clusters.size() > 2) {
        std::size_t bi = 0, bj = 1;
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_lo = 0, best_hi = 0;
        for (std::size_t i = 0; i < clusters.size(); ++i) {
            for (std::size_t j = i + 1; j < clusters.size(); ++j) {
                const double d = linkage(clusters[i], clusters[j]);
                const std::size_t mi = clusters[i].front();  // members kept sorted
                const std::size_t mj = clusters[j].front();
                const std::size_t lo = std::min(mi, mj), hi = std::max(mi, mj);
                const bool better =
                    d < best || (d == best && (lo < best_lo || (lo == best_lo && hi < best_hi)));
                if (better) {
                    best = d;
                    bi = i;
                    bj = j;
                    best_lo = lo;
                    best_hi = hi;
                }
            }
        }
        auto merged = clusters[bi];
        merged.insert(merged.end(), clusters[bj].begin(), clusters[bj].end());
        std::sort(merged.begin(), merged.end());
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
        clusters[bi] = std::move(merged);
    }

    std::vector<int> labels(n, 1);
    for (const auto& c : clusters) {
        if (c.front() == 0) {
            for (std::size_t idx : c) labels[idx] = 0;
            break;
        }
    }
    return labels;
}

// 1-D convenience wrapper: distance is |v_i - v_j|.
inline std::vector<int> agglomerative_two_clusters(const std::vector<double>& values) {
    const std::size_t n = values.size();
    if (n < 2) throw std::invalid_argument("agglomerative_two_clusters: need at least 2 values");
    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dist[i][j] = std::abs(values[i] - values[j]);
    return two_clusters_from_distance(dist);
}

}  // namespace fedsim::stats
