#pragma once

// Independent reference computations shared by the unit and acceptance tests.
// Each one is written from the definition, not from the library code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "protego/core.hpp"
#include "protego/retrieval.hpp"

namespace oracle {

/// Determinant by cofactor expansion along the first row.
inline double cofactor_det(const std::vector<std::vector<double>>& m) {
    const std::size_t n = m.size();
    if (n == 1) return m[0][0];
    double det = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<std::vector<double>> minor;
        for (std::size_t r = 1; r < n; ++r) {
            std::vector<double> row;
            for (std::size_t c = 0; c < n; ++c)
                if (c != j) row.push_back(m[r][c]);
            minor.push_back(row);
        }
        det += (j % 2 == 0 ? 1.0 : -1.0) * m[0][j] * cofactor_det(minor);
    }
    return det;
}

/// Mean SSIM over every 11x11 window position, 2-D Gaussian weights (sigma 1.5).
inline double ssim_literal(const protego::Image& a, const protego::Image& b) {
    const int w = 11;
    const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
    double weights[11][11];
    double total = 0.0;
    for (int i = 0; i < w; ++i)
        for (int j = 0; j < w; ++j)
            total += weights[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
    double sum = 0.0;
    int count = 0;
    for (int k = 0; k < a.channels; ++k)
        for (int r = 0; r + w <= a.rows; ++r)
            for (int c = 0; c + w <= a.cols; ++c) {
                double ma = 0, mb = 0;
                for (int i = 0; i < w; ++i)
                    for (int j = 0; j < w; ++j) {
                        ma += weights[i][j] / total * a.at(r + i, c + j, k);
                        mb += weights[i][j] / total * b.at(r + i, c + j, k);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < w; ++i)
                    for (int j = 0; j < w; ++j) {
                        const double da = a.at(r + i, c + j, k) - ma, db = b.at(r + i, c + j, k) - mb;
                        va += weights[i][j] / total * da * da;
                        vb += weights[i][j] / total * db * db;
                        cov += weights[i][j] / total * da * db;
                    }
                sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return sum / count;
}

/// Every entry ranked by (similarity desc, entry_id asc), similarity by direct dot product.
inline std::vector<std::pair<std::int64_t, double>> rank(const protego::FeatureVector& q, const protego::Database& db) {
    std::vector<std::pair<std::int64_t, double>> all;
    for (const auto& e : db.entries) {
        double dot = 0.0;
        for (std::size_t k = 0; k < q.dim(); ++k) dot += q.values[k] * e.feature.values[k];
        all.emplace_back(e.entry_id, dot);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return all;
}

/// Texel cell of a uv point and its bilinear blend of that cell's four texels.
struct Cell {
    int row = 0;
    int col = 0;
    double fx = 0.0;
    double fy = 0.0;
};

inline Cell cell_of(const protego::Texture& t, double u, double v) {
    const double x = u * (t.cols - 1), y = v * (t.rows - 1);
    Cell c;
    c.col = std::min(static_cast<int>(std::floor(x)), t.cols - 2);
    c.row = std::min(static_cast<int>(std::floor(y)), t.rows - 2);
    c.fx = x - c.col;
    c.fy = y - c.row;
    return c;
}

inline double blend(const protego::Texture& t, const Cell& c, int k) {
    const double top = (1 - c.fx) * t.at(c.row, c.col, k) + c.fx * t.at(c.row, c.col + 1, k);
    const double bottom = (1 - c.fx) * t.at(c.row + 1, c.col, k) + c.fx * t.at(c.row + 1, c.col + 1, k);
    return (1 - c.fy) * top + c.fy * bottom;
}

}  // namespace oracle
