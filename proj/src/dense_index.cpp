#include "retrobm25/dense_index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

#include "retrobm25/binary_io.hpp"
#include "retrobm25/bm25_index.hpp"
#include "retrobm25/random.hpp"

namespace retrobm25 {

EmbeddingMatrix::EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<float> values)
    : rows_(rows), dim_(dim), values_(std::move(values)) {
    if (values_.size() != rows_ * dim_) {
        throw Error(ErrorCode::size_mismatch,
                    fmt::format("embedding matrix: {} values for {}x{}", values_.size(), rows_, dim_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!std::isfinite(values_[i])) {
            throw Error(ErrorCode::non_finite, fmt::format("non-finite embedding value at row {}", i / std::max<std::size_t>(dim_, 1)));
        }
    }
}

std::vector<std::uint8_t> EmbeddingMatrix::serialize() const {
    io::ByteWriter w;
    w.magic("EMB1");
    w.u32(static_cast<std::uint32_t>(rows_));
    w.u32(static_cast<std::uint32_t>(dim_));
    for (auto v : values_) w.f32(v);
    return std::move(w).take();
}

EmbeddingMatrix EmbeddingMatrix::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("EMB1", "EMB1 embedding");
    auto n = r.u32();
    auto d = r.u32();
    auto expected = static_cast<std::uint64_t>(n) * d * 4;
    if (r.remaining() < expected) {
        throw Error(ErrorCode::truncated,
                    fmt::format("truncated: EMB1 payload has {} bytes, header needs {}", r.remaining(), expected));
    }
    if (r.remaining() > expected) throw Error(ErrorCode::size_mismatch, "trailing bytes after EMB1 payload");
    std::vector<float> values(static_cast<std::size_t>(n) * d);
    for (auto& v : values) v = r.f32();
    return EmbeddingMatrix(n, d, std::move(values));
}

void EmbeddingMatrix::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

EmbeddingMatrix load_embeddings(const std::filesystem::path& path, std::optional<std::size_t> expected_rows) {
    auto m = EmbeddingMatrix::deserialize(io::read_file(path));
    if (expected_rows && m.rows() != *expected_rows) {
        throw Error(ErrorCode::size_mismatch,
                    fmt::format("{} has {} rows but the chunk store has {} chunks", path.string(), m.rows(), *expected_rows));
    }
    return m;
}

std::vector<float> embed_hashed(std::span<const TokenId> tokens, std::size_t dim, std::uint64_t seed) {
    if (dim < 8) throw Error(ErrorCode::invalid_argument, "embed_hashed: dimension must be >= 8");
    std::vector<double> acc(dim, 0.0);
    std::uint64_t salt = mix64(seed);
    for (auto t : query_terms(tokens)) {
        auto h = mix64(salt ^ (static_cast<std::uint64_t>(t) * 0xd6e8feb86659fd93ULL));
        acc[h % dim] += (h >> 63) ? -1.0 : 1.0;
    }
    double norm = 0.0;
    for (auto v : acc) norm += v * v;
    std::vector<float> out(dim, 0.0f);
    if (norm > 0.0) {
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(acc[i] / norm);
    }
    return out;
}

EmbeddingMatrix embed_store_hashed(const ChunkStore& store, std::size_t dim, std::uint64_t seed) {
    std::vector<float> values;
    values.reserve(store.size() * dim);
    for (ChunkId c = 0; c < store.size(); ++c) {
        auto v = embed_hashed(store.tokens(c), dim, seed);
        values.insert(values.end(), v.begin(), v.end());
    }
    return EmbeddingMatrix(store.size(), dim, std::move(values));
}

double squared_l2(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += diff * diff;
    }
    return s;
}

namespace {

void check_query(std::size_t dim, std::span<const float> query) {
    if (query.size() != dim) {
        throw Error(ErrorCode::size_mismatch, fmt::format("query has dimension {}, index has {}", query.size(), dim));
    }
}

std::vector<DenseHit> select_nearest(std::vector<DenseHit> hits, std::size_t k) {
    if (hits.size() > k) {
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), closer);
        hits.resize(k);
    } else {
        std::sort(hits.begin(), hits.end(), closer);
    }
    return hits;
}

}  // namespace

std::vector<DenseHit> exact_search(const EmbeddingMatrix& matrix, std::span<const float> query,
                                   const SearchParams& params) {
    check_query(matrix.dim(), query);
    if (params.k == 0) throw Error(ErrorCode::invalid_argument, "search: k must be >= 1");
    std::vector<DenseHit> hits;
    hits.reserve(matrix.rows());
    for (std::size_t i = 0; i < matrix.rows(); ++i) {
        auto id = static_cast<ChunkId>(i);
        if (params.filter.admits(id)) hits.push_back({id, squared_l2(query, matrix.row(i))});
    }
    return select_nearest(std::move(hits), params.k);
}

// ---------------------------------------------------------------------------
// IVF

namespace {

std::uint32_t nearest_centroid(std::span<const float> v, std::span<const float> centroids, std::size_t dim,
                               double* dist_out = nullptr) {
    std::size_t nlist = centroids.size() / dim;
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < nlist; ++c) {
        double d = squared_l2(v, centroids.subspan(c * dim, dim));
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::uint32_t>(c);
        }
    }
    if (dist_out) *dist_out = best_d;
    return best;
}

}  // namespace

IVFIndex IVFIndex::build(const EmbeddingMatrix& matrix, std::size_t nlist, std::uint64_t seed) {
    const std::size_t n = matrix.rows();
    const std::size_t d = matrix.dim();
    if (nlist < 1 || nlist > n) {
        throw Error(ErrorCode::invalid_argument, fmt::format("ivf: nlist must lie in [1, {}], got {}", n, nlist));
    }

    IVFIndex ivf;
    ivf.dim_ = d;
    ivf.seed_ = seed;
    ivf.centroids_.resize(nlist * d);

    // Seeded initialization from distinct rows (partial Fisher-Yates).
    Rng rng(seed);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 0; i < nlist; ++i) {
        auto j = i + rng.below(n - i);
        std::swap(perm[i], perm[j]);
        auto row = matrix.row(perm[i]);
        std::copy(row.begin(), row.end(), ivf.centroids_.begin() + static_cast<std::ptrdiff_t>(i * d));
    }

    std::vector<std::uint32_t> assign(n);
    std::vector<double> dist(n);
    std::vector<double> sums(nlist * d);
    std::vector<std::size_t> counts(nlist);
    for (int iter = 0; iter < kKMeansIterations; ++iter) {
        for (std::size_t i = 0; i < n; ++i) assign[i] = nearest_centroid(matrix.row(i), ivf.centroids_, d, &dist[i]);

        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = matrix.row(i);
            for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += row[j];
            ++counts[assign[i]];
        }
        std::vector<std::uint8_t> reseeded(n, 0);
        for (std::size_t c = 0; c < nlist; ++c) {
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < d; ++j) {
                    ivf.centroids_[c * d + j] = static_cast<float>(sums[c * d + j] / static_cast<double>(counts[c]));
                }
                continue;
            }
            // Empty cluster: move it onto the point farthest from its centroid.
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (!reseeded[i] && (far == n || dist[i] > dist[far])) far = i;
            }
            reseeded[far] = 1;
            dist[far] = 0.0;
            auto row = matrix.row(far);
            std::copy(row.begin(), row.end(), ivf.centroids_.begin() + static_cast<std::ptrdiff_t>(c * d));
        }
    }

    ivf.lists_.assign(nlist, {});
    for (std::size_t i = 0; i < n; ++i) {
        ivf.lists_[nearest_centroid(matrix.row(i), ivf.centroids_, d)].push_back(static_cast<ChunkId>(i));
    }
    return ivf;
}

std::vector<std::uint32_t> IVFIndex::probe_order(std::span<const float> query, std::size_t nprobe) const {
    check_query(dim_, query);
    if (nprobe < 1 || nprobe > nlist()) {
        throw Error(ErrorCode::invalid_argument, fmt::format("nprobe must lie in [1, {}], got {}", nlist(), nprobe));
    }
    std::vector<std::pair<double, std::uint32_t>> order(nlist());
    for (std::size_t c = 0; c < nlist(); ++c) order[c] = {squared_l2(query, centroid(c)), static_cast<std::uint32_t>(c)};
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nprobe), order.end());
    std::vector<std::uint32_t> out(nprobe);
    for (std::size_t i = 0; i < nprobe; ++i) out[i] = order[i].second;
    return out;
}

std::vector<DenseHit> IVFIndex::search(const EmbeddingMatrix& matrix, std::span<const float> query,
                                       const SearchParams& params) const {
    if (matrix.dim() != dim_) throw Error(ErrorCode::size_mismatch, "ivf: matrix dimension differs from index");
    if (params.k == 0) throw Error(ErrorCode::invalid_argument, "search: k must be >= 1");
    std::vector<DenseHit> hits;
    for (auto c : probe_order(query, params.nprobe)) {
        for (auto id : lists_[c]) {
            if (id >= matrix.rows()) throw Error(ErrorCode::size_mismatch, "ivf: list id outside matrix");
            if (params.filter.admits(id)) hits.push_back({id, squared_l2(query, matrix.row(id))});
        }
    }
    return select_nearest(std::move(hits), params.k);
}

std::vector<DenseHit> approx_search(const IVFIndex& ivf, const EmbeddingMatrix& matrix, std::span<const float> query,
                                    const SearchParams& params) {
    return ivf.search(matrix, query, params);
}

std::vector<std::uint8_t> IVFIndex::serialize() const {
    io::ByteWriter w;
    w.magic("IVF1");
    w.u32(static_cast<std::uint32_t>(nlist()));
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u64(seed_);
    for (auto v : centroids_) w.f32(v);
    for (const auto& list : lists_) {
        w.u32(static_cast<std::uint32_t>(list.size()));
        for (auto id : list) w.u32(id);
    }
    return std::move(w).take();
}

IVFIndex IVFIndex::deserialize(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("IVF1", "IVF index");
    IVFIndex ivf;
    auto nlist = r.u32();
    ivf.dim_ = r.u32();
    ivf.seed_ = r.u64();
    ivf.centroids_.resize(static_cast<std::size_t>(nlist) * ivf.dim_);
    for (auto& v : ivf.centroids_) {
        v = r.f32();
        if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "non-finite IVF centroid");
    }
    ivf.lists_.resize(nlist);
    for (auto& list : ivf.lists_) {
        list.resize(r.u32());
        for (auto& id : list) id = r.u32();
    }
    if (!r.at_end()) throw Error(ErrorCode::size_mismatch, "trailing bytes after IVF index");
    return ivf;
}

void IVFIndex::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

IVFIndex IVFIndex::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

}  // namespace retrobm25
