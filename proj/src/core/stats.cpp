#include "core/stats.h"

#include <cmath>
#include <fstream>

#include "core/errors.h"

namespace ipc {

// series and continued-fraction expansions of the incomplete gamma function
static double gser(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < 500; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

static double gcf(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

double gammq(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw input_error("gammq: bad arguments");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - gser(a, x);
    return gcf(a, x);
}

double chi2_pvalue(double stat, int df) {
    return gammq(0.5 * df, 0.5 * stat);
}

double mean_of(const std::vector<double> & xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / (double) xs.size();
}

double stddev_of(const std::vector<double> & xs) {
    if (xs.size() < 2) return 0.0;
    double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / (double) (xs.size() - 1));
}

uint64_t fnv1a64(const void * data, size_t n, uint64_t seed) {
    uint64_t h = seed;
    const uint8_t * p = (const uint8_t *) data;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64_file(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error(strf("hash: cannot open '%s'", path.c_str()));
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a64(buf, (size_t) f.gcount(), h);
    }
    return h;
}

std::string hex64(uint64_t h) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", (unsigned long long) h);
    return std::string(buf);
}

} // namespace ipc
