#include "prvr/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prvr {

namespace {

std::vector<double> unit_rows(const Tensor& m) {
    std::vector<double> out(m.data());
    size_t d = m.cols();
    for (size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
        double nrm = std::sqrt(s);
        if (nrm == 0.0) {
            throw std::invalid_argument("analysis: instance " + std::to_string(i) +
                                        " has zero norm");
        }
        for (size_t j = 0; j < d; ++j) out[i * d + j] /= nrm;
    }
    return out;
}

// Average ranks (ties share the mean of their positions), descending values.
std::vector<double> average_ranks_desc(const std::vector<double>& values) {
    size_t n = values.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return values[a] != values[b] ? values[a] > values[b] : a < b;
    });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b, bool& defined) {
    size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) {
        defined = false;
        return 0.0;
    }
    defined = true;
    return sab / std::sqrt(saa * sbb);
}

double peak_rss_mb() {
    std::ifstream is("/proc/self/status");
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream ls(line.substr(6));
            double kb = 0.0;
            ls >> kb;
            return kb / 1024.0;
        }
    }
    return 0.0;
}

}  // namespace

CollapseReport collapse_metrics(const Tensor& embeddings,
                                const std::vector<std::string>& owner_video) {
    size_t n = embeddings.rows();
    if (n < 2) throw std::invalid_argument("collapse_metrics: need at least 2 instances");
    if (owner_video.size() != n) {
        throw std::invalid_argument("collapse_metrics: " + std::to_string(owner_video.size()) +
                                    " owners for " + std::to_string(n) + " instances");
    }
    std::vector<double> u = unit_rows(embeddings);
    size_t d = embeddings.cols();

    double intra_acc = 0.0, total_acc = 0.0;
    size_t intra_pairs = 0, total_pairs = 0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double cos = 0.0;
            for (size_t k = 0; k < d; ++k) cos += u[i * d + k] * u[j * d + k];
            total_acc += cos;
            ++total_pairs;
            if (owner_video[i] == owner_video[j]) {
                intra_acc += cos;
                ++intra_pairs;
            }
        }
    }
    if (intra_pairs == 0) {
        throw std::invalid_argument("collapse_metrics: no video owns two or more instances");
    }
    CollapseReport rep;
    rep.intra_sim = intra_acc / static_cast<double>(intra_pairs);
    rep.total_sim = total_acc / static_cast<double>(total_pairs);
    double denom = rep.intra_sim + rep.total_sim;
    if (denom == 0.0) {
        rep.degenerate = true;
        rep.diff_norm = 0.0;
    } else {
        rep.diff_norm = (rep.intra_sim - rep.total_sim) / denom;
    }
    return rep;
}

SpearmanReport spearman_vs_teacher(const Tensor& student, const Tensor& teacher) {
    size_t n = student.rows();
    if (n < 3) throw std::invalid_argument("spearman_vs_teacher: need at least 3 items");
    if (teacher.rows() != n) {
        throw std::invalid_argument("spearman_vs_teacher: row counts differ (" +
                                    std::to_string(n) + " vs " + std::to_string(teacher.rows()) +
                                    ")");
    }
    std::vector<double> su = unit_rows(student);
    std::vector<double> tu = unit_rows(teacher);
    size_t ds = student.cols(), dt = teacher.cols();

    SpearmanReport rep;
    double acc = 0.0;
    for (size_t anchor = 0; anchor < n; ++anchor) {
        std::vector<double> sim_s, sim_t;
        sim_s.reserve(n - 1);
        sim_t.reserve(n - 1);
        for (size_t j = 0; j < n; ++j) {
            if (j == anchor) continue;
            double cs = 0.0, ct = 0.0;
            for (size_t k = 0; k < ds; ++k) cs += su[anchor * ds + k] * su[j * ds + k];
            for (size_t k = 0; k < dt; ++k) ct += tu[anchor * dt + k] * tu[j * dt + k];
            sim_s.push_back(cs);
            sim_t.push_back(ct);
        }
        bool defined = false;
        double rho = pearson(average_ranks_desc(sim_s), average_ranks_desc(sim_t), defined);
        if (!defined) {
            ++rep.anchors_skipped;
            continue;
        }
        acc += rho;
        ++rep.anchors_used;
    }
    if (rep.anchors_used == 0) {
        throw std::invalid_argument("spearman_vs_teacher: every anchor had constant similarities");
    }
    rep.rho_times_100 = 100.0 * acc / static_cast<double>(rep.anchors_used);
    return rep;
}

ConfusionCounts ranker_confusion(const std::map<std::string, int>& ranks_a,
                                 const std::map<std::string, int>& ranks_b, int q) {
    if (ranks_a.size() != ranks_b.size()) {
        throw std::invalid_argument("ranker_confusion: query sets differ in size");
    }
    ConfusionCounts c;
    for (const auto& [query, ra] : ranks_a) {
        auto it = ranks_b.find(query);
        if (it == ranks_b.end()) {
            throw std::invalid_argument("ranker_confusion: query '" + query +
                                        "' missing from the second ranker");
        }
        bool sa = ra <= q;
        bool sb = it->second <= q;
        if (sa && sb) ++c.both;
        else if (sa) ++c.a_only;
        else if (sb) ++c.b_only;
        else ++c.neither;
    }
    return c;
}

std::vector<BenchRow> bench(const RetrievalIndex& index, const std::vector<Tensor>& queries,
                            const std::vector<size_t>& db_sizes, int runs) {
    if (queries.empty()) throw std::invalid_argument("bench: no queries");
    if (runs < 1) throw std::invalid_argument("bench: runs must be >= 1");
    std::vector<BenchRow> rows;
    for (size_t size : db_sizes) {
        if (size == 0) throw std::invalid_argument("bench: db size 0");
        if (size > index.entries.size()) {
            throw std::invalid_argument("bench: db size " + std::to_string(size) +
                                        " exceeds index size " +
                                        std::to_string(index.entries.size()));
        }
        // Warm-up pass so first-touch effects do not skew the first size.
        for (const auto& q : queries) (void)rank("warmup", q, index, size);
        auto t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < runs; ++r) {
            for (const auto& q : queries) (void)rank("bench", q, index, size);
        }
        auto t1 = std::chrono::steady_clock::now();
        double total_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        BenchRow row;
        row.db_size = size;
        row.mean_latency_ms = total_ms / (static_cast<double>(runs) * queries.size());
        row.peak_memory_mb = peak_rss_mb();
        rows.push_back(row);
    }
    return rows;
}

}  // namespace prvr
