#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ipc {

// regularized upper incomplete gamma Q(a,x)
double gammq(double a, double x);

// p-value of a chi-square statistic with df degrees of freedom
double chi2_pvalue(double stat, int df);

double mean_of(const std::vector<double> & xs);
double stddev_of(const std::vector<double> & xs); // sample stddev (n-1)

// FNV-1a over raw bytes; used for content hashes in manifests and metadata
uint64_t fnv1a64(const void * data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64_file(const std::string & path);
std::string hex64(uint64_t h);

} // namespace ipc
