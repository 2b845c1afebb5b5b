#pragma once

// Discretized target spaces: sine-spectral bases on [-pi, pi]^d with zero
// Dirichlet data, Sobolev inner products, the spectral Laplacian and the
// pseudo-spectral nodal transforms used for pointwise nonlinearities.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "gradflow/error.hpp"

namespace gradflow {

enum class SobolevOrder : std::uint8_t { L2 = 0, W12 = 1, W22 = 2 };

enum class BasisKind : std::uint8_t { sine_spectral = 0, nodal_grid = 1, euclidean = 2 };

[[nodiscard]] inline int sobolev_exponent(SobolevOrder m) noexcept { return static_cast<int>(m); }

[[nodiscard]] inline std::string_view to_string(SobolevOrder m) noexcept {
    switch (m) {
    case SobolevOrder::L2: return "L2";
    case SobolevOrder::W12: return "W12";
    case SobolevOrder::W22: return "W22";
    }
    return "?";
}

[[nodiscard]] inline SobolevOrder parse_sobolev(std::string_view s) {
    if (s == "L2") return SobolevOrder::L2;
    if (s == "W12") return SobolevOrder::W12;
    if (s == "W22") return SobolevOrder::W22;
    throw ConfigError("unknown metric '" + std::string(s) + "' (expected L2, W12 or W22)");
}

[[nodiscard]] inline std::string_view to_string(BasisKind k) noexcept {
    switch (k) {
    case BasisKind::sine_spectral: return "sine-spectral";
    case BasisKind::nodal_grid: return "nodal-grid";
    case BasisKind::euclidean: return "euclidean";
    }
    return "?";
}

/// The box [-pi, pi]^dimension with zero Dirichlet boundary data.
struct Domain {
    int dimension = 1;
    bool zero_dirichlet = true;

    static constexpr double lower = -std::numbers::pi;
    static constexpr double upper = std::numbers::pi;
};

namespace detail {

/// Applies `op` (rows x shape[axis]) along one axis of a row-major tensor.
inline Eigen::VectorXd apply_along_axis(Eigen::MatrixXd const& op, Eigen::VectorXd const& in,
                                        std::vector<int>& shape, std::size_t axis) {
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Index before = 1;
    Eigen::Index after = 1;
    for (std::size_t i = 0; i < axis; ++i) before *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) after *= shape[i];
    Eigen::Index const width = shape[axis];
    Eigen::Index const rows = op.rows();
    Eigen::VectorXd out(before * rows * after);
    for (Eigen::Index b = 0; b < before; ++b) {
        Eigen::Map<RowMat const> src(in.data() + b * width * after, width, after);
        Eigen::Map<RowMat> dst(out.data() + b * rows * after, rows, after);
        dst.noalias() = op * src;
    }
    shape[axis] = static_cast<int>(rows);
    return out;
}

/// Sine synthesis matrix: rows are interior grid points u_j = 2 pi j/(P+1),
/// columns the orthonormal modes sin(k u / 2)/sqrt(pi), k = 1..n.
inline Eigen::MatrixXd sine_synthesis(int points, int modes) {
    Eigen::MatrixXd s(points, modes);
    double const inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
    for (int j = 1; j <= points; ++j) {
        for (int k = 1; k <= modes; ++k) {
            // sin(k pi j / (P+1)) evaluated with the argument reduced mod 2(P+1)
            long const r = (static_cast<long>(k) * j) % (2L * (points + 1));
            s(j - 1, k - 1) = std::sin(std::numbers::pi * static_cast<double>(r) / (points + 1)) * inv_sqrt_pi;
        }
    }
    return s;
}

} // namespace detail

/// A discretization of the target space. Immutable once built.
class Basis {
  public:
    Basis(BasisKind kind, int dimension, int resolution) : kind_(kind), dimension_(dimension), resolution_(resolution) {
        size_ = 1;
        for (int i = 0; i < (kind == BasisKind::euclidean ? 1 : dimension); ++i) size_ *= resolution;
        if (kind == BasisKind::sine_spectral) {
            axis_eigenvalues_.resize(resolution);
            for (int k = 1; k <= resolution; ++k) axis_eigenvalues_[k - 1] = -0.25 * k * k;
            eigenvalues_.resize(size_);
            for (Eigen::Index i = 0; i < size_; ++i) {
                Eigen::Index rest = i;
                double lam = 0.0;
                for (int d = 0; d < dimension; ++d) {
                    lam += axis_eigenvalues_[rest % resolution];
                    rest /= resolution;
                }
                eigenvalues_[i] = lam;
            }
            padded_points_ = 2 * resolution + 1;
            synthesis_ = detail::sine_synthesis(padded_points_, resolution);
            analysis_ = (2.0 * std::numbers::pi / (padded_points_ + 1)) * synthesis_.transpose();
        }
    }

    [[nodiscard]] BasisKind kind() const noexcept { return kind_; }
    [[nodiscard]] int dimension() const noexcept { return dimension_; }
    [[nodiscard]] int resolution() const noexcept { return resolution_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return size_; }

    /// Per-mode Laplacian eigenvalues, flattened (sine-spectral only).
    [[nodiscard]] Eigen::VectorXd const& eigenvalues() const noexcept { return eigenvalues_; }
    [[nodiscard]] std::vector<double> const& axis_eigenvalues() const noexcept { return axis_eigenvalues_; }

    [[nodiscard]] int padded_points() const noexcept { return padded_points_; }

    /// Coefficients -> values on the de-aliased interior grid.
    [[nodiscard]] Eigen::VectorXd to_padded_nodal(Eigen::VectorXd const& coeffs) const {
        require_sine("nodal transform");
        std::vector<int> shape(static_cast<std::size_t>(dimension_), resolution_);
        Eigen::VectorXd v = coeffs;
        for (std::size_t a = 0; a < shape.size(); ++a) v = detail::apply_along_axis(synthesis_, v, shape, a);
        return v;
    }

    /// Values on the de-aliased interior grid -> truncated coefficients.
    [[nodiscard]] Eigen::VectorXd from_padded_nodal(Eigen::VectorXd const& values) const {
        require_sine("nodal transform");
        std::vector<int> shape(static_cast<std::size_t>(dimension_), padded_points_);
        Eigen::VectorXd v = values;
        for (std::size_t a = 0; a < shape.size(); ++a) v = detail::apply_along_axis(analysis_, v, shape, a);
        return v;
    }

    [[nodiscard]] bool same_as(Basis const& other) const noexcept {
        return kind_ == other.kind_ && dimension_ == other.dimension_ && resolution_ == other.resolution_;
    }

  private:
    void require_sine(char const* what) const {
        if (kind_ != BasisKind::sine_spectral)
            throw UnsupportedError(std::string(what) + " requires a sine-spectral basis");
    }

    BasisKind kind_;
    int dimension_;
    int resolution_;
    Eigen::Index size_ = 0;
    std::vector<double> axis_eigenvalues_;
    Eigen::VectorXd eigenvalues_;
    int padded_points_ = 0;
    Eigen::MatrixXd synthesis_;
    Eigen::MatrixXd analysis_;
};

using BasisPtr = std::shared_ptr<Basis const>;

/// Sine-spectral basis with n modes per axis on the domain.
[[nodiscard]] inline BasisPtr make_space(Domain const& domain, int resolution) {
    if (domain.dimension != 1 && domain.dimension != 3)
        throw ConfigError("domain dimension must be 1 or 3, got " + std::to_string(domain.dimension));
    if (!domain.zero_dirichlet) throw ConfigError("only zero-Dirichlet boundaries are supported");
    if (resolution < 4) throw ConfigError("resolution must be >= 4, got " + std::to_string(resolution));
    if (domain.dimension == 3 && resolution > 64)
        throw ConfigError("3-D resolution must be <= 64, got " + std::to_string(resolution));
    if (resolution > 1 << 16) throw ConfigError("resolution too large: " + std::to_string(resolution));
    return std::make_shared<Basis const>(BasisKind::sine_spectral, domain.dimension, resolution);
}

/// Plain R^d with the Euclidean inner product (used by planar toy architectures).
[[nodiscard]] inline BasisPtr make_euclidean(int dimension) {
    if (dimension < 1) throw ConfigError("euclidean dimension must be positive");
    return std::make_shared<Basis const>(BasisKind::euclidean, 1, dimension);
}

/// Interior grid with `points` nodes per axis, for plot output.
[[nodiscard]] inline BasisPtr make_nodal_grid(Domain const& domain, int points) {
    if (domain.dimension != 1 && domain.dimension != 3) throw ConfigError("domain dimension must be 1 or 3");
    if (points < 1) throw ConfigError("nodal grid needs at least one point");
    return std::make_shared<Basis const>(BasisKind::nodal_grid, domain.dimension, points);
}

/// An element of a discretized space: coefficients over a fixed basis.
class Field {
  public:
    Field(BasisPtr basis, Eigen::VectorXd coeffs, SobolevOrder metric = SobolevOrder::L2)
        : basis_(std::move(basis)), coeffs_(std::move(coeffs)), metric_(metric) {
        if (!basis_) throw ShapeError("field without basis");
        if (coeffs_.size() != basis_->size())
            throw ShapeError("field has " + std::to_string(coeffs_.size()) + " coefficients, basis expects " +
                             std::to_string(basis_->size()));
        if (!coeffs_.allFinite()) throw DivergenceError("non-finite field coefficients", {});
        if (metric_ != SobolevOrder::L2 && basis_->kind() != BasisKind::sine_spectral)
            throw UnsupportedError("Sobolev metrics require a sine-spectral basis");
    }

    [[nodiscard]] static Field zero(BasisPtr basis, SobolevOrder metric = SobolevOrder::L2) {
        auto const n = basis->size();
        return {std::move(basis), Eigen::VectorXd::Zero(n), metric};
    }

    [[nodiscard]] BasisPtr const& basis_ptr() const noexcept { return basis_; }
    [[nodiscard]] Basis const& basis() const noexcept { return *basis_; }
    [[nodiscard]] Eigen::VectorXd const& coeffs() const noexcept { return coeffs_; }
    [[nodiscard]] SobolevOrder metric() const noexcept { return metric_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return coeffs_.size(); }

    [[nodiscard]] Field with_coeffs(Eigen::VectorXd coeffs) const { return {basis_, std::move(coeffs), metric_}; }

    friend Field operator+(Field const& a, Field const& b) {
        a.require_same(b);
        return a.with_coeffs(a.coeffs_ + b.coeffs_);
    }
    friend Field operator-(Field const& a, Field const& b) {
        a.require_same(b);
        return a.with_coeffs(a.coeffs_ - b.coeffs_);
    }
    friend Field operator*(double s, Field const& a) { return a.with_coeffs(s * a.coeffs_); }

    void require_same(Field const& other) const {
        if (!basis_->same_as(*other.basis_)) throw ShapeError("fields live on different bases");
    }

  private:
    BasisPtr basis_;
    Eigen::VectorXd coeffs_;
    SobolevOrder metric_;
};

/// Diagonal weights (1 + |lambda_k|)^s of the W^{s,2} metric in the orthonormal sine basis.
[[nodiscard]] inline Eigen::VectorXd metric_weights(Basis const& basis, SobolevOrder metric) {
    int const s = sobolev_exponent(metric);
    if (basis.kind() == BasisKind::nodal_grid) {
        if (s != 0) throw UnsupportedError("Sobolev metrics require a sine-spectral basis");
        // trapezoid weight on the interior grid; boundary nodes are zero
        double const h = 2.0 * std::numbers::pi / (basis.resolution() + 1);
        return Eigen::VectorXd::Constant(basis.size(), std::pow(h, basis.dimension()));
    }
    if (s == 0) return Eigen::VectorXd::Ones(basis.size());
    if (basis.kind() != BasisKind::sine_spectral) throw UnsupportedError("Sobolev metrics require a sine-spectral basis");
    return (1.0 + basis.eigenvalues().array().abs()).pow(s).matrix();
}

[[nodiscard]] inline double inner_product(Field const& a, Field const& b, SobolevOrder metric) {
    a.require_same(b);
    if (metric == SobolevOrder::L2 && a.basis().kind() != BasisKind::nodal_grid) return a.coeffs().dot(b.coeffs());
    Eigen::VectorXd const w = metric_weights(a.basis(), metric);
    return (a.coeffs().array() * w.array() * b.coeffs().array()).sum();
}

[[nodiscard]] inline double norm(Field const& a, SobolevOrder metric) { return std::sqrt(inner_product(a, a, metric)); }

/// Spectral Laplacian: multiplies each coefficient by its eigenvalue.
[[nodiscard]] inline Field laplacian(Field const& g) {
    if (g.basis().kind() != BasisKind::sine_spectral) throw UnsupportedError("laplacian requires a sine-spectral basis");
    return g.with_coeffs(g.coeffs().cwiseProduct(g.basis().eigenvalues()));
}

/// Converts an L2 Riesz representative into the representative for
/// `target`: applies (I - Delta)^{-s}.
[[nodiscard]] inline Field metric_sharp(Field const& dl_l2, SobolevOrder target) {
    if (target == SobolevOrder::L2) return dl_l2;
    Eigen::VectorXd const w = metric_weights(dl_l2.basis(), target);
    return {dl_l2.basis_ptr(), dl_l2.coeffs().cwiseQuotient(w), target};
}

/// Inverse of metric_sharp: (I - Delta)^{s} applied to a `source` representative.
[[nodiscard]] inline Field metric_flat(Field const& g, SobolevOrder source) {
    if (source == SobolevOrder::L2) return g;
    Eigen::VectorXd const w = metric_weights(g.basis(), source);
    return {g.basis_ptr(), g.coeffs().cwiseProduct(w), SobolevOrder::L2};
}

/// Orthonormal sine mode k (1-based per axis) as a field.
[[nodiscard]] inline Field basis_mode(BasisPtr const& basis, Eigen::Index flat_index) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(basis->size());
    c[flat_index] = 1.0;
    return {basis, std::move(c)};
}

/// Samples a sine-spectral field on an interior grid of `points` nodes per axis.
[[nodiscard]] inline Field to_nodal(Field const& g, int points) {
    if (g.basis().kind() != BasisKind::sine_spectral) throw UnsupportedError("to_nodal requires a sine-spectral basis");
    auto grid = make_nodal_grid(Domain{g.basis().dimension()}, points);
    Eigen::MatrixXd const s = detail::sine_synthesis(points, g.basis().resolution());
    std::vector<int> shape(static_cast<std::size_t>(g.basis().dimension()), g.basis().resolution());
    Eigen::VectorXd v = g.coeffs();
    for (std::size_t a = 0; a < shape.size(); ++a) v = detail::apply_along_axis(s, v, shape, a);
    return {std::move(grid), std::move(v)};
}

// ---------------------------------------------------------------------------
// Binary field format: "GFLD", u32 dimension, u32 resolution, u8 basis kind,
// u8 metric, u16 reserved, u64 count, then count little-endian f64 values.

namespace detail {
template <class T> void put_le(std::string& out, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                     std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    auto u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
}
template <class T> T get_le(std::string_view in, std::size_t& pos) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                     std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    if (pos + sizeof(T) > in.size()) throw ShapeError("truncated field record");
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        u |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i));
    pos += sizeof(T);
    return std::bit_cast<T>(u);
}
} // namespace detail

[[nodiscard]] inline std::string encode_field(Field const& g) {
    std::string out = "GFLD";
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.basis().dimension()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.basis().resolution()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(g.basis().kind()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(g.metric()));
    detail::put_le<std::uint16_t>(out, 0);
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(g.size()));
    for (Eigen::Index i = 0; i < g.size(); ++i) detail::put_le<double>(out, g.coeffs()[i]);
    return out;
}

[[nodiscard]] inline Field decode_field(std::string_view bytes) {
    if (bytes.size() < 4 || bytes.substr(0, 4) != "GFLD") throw ShapeError("not a field record");
    std::size_t pos = 4;
    auto const dim = static_cast<int>(detail::get_le<std::uint32_t>(bytes, pos));
    auto const res = static_cast<int>(detail::get_le<std::uint32_t>(bytes, pos));
    auto const kind = static_cast<BasisKind>(detail::get_le<std::uint8_t>(bytes, pos));
    auto const metric = static_cast<SobolevOrder>(detail::get_le<std::uint8_t>(bytes, pos));
    (void)detail::get_le<std::uint16_t>(bytes, pos);
    auto const count = detail::get_le<std::uint64_t>(bytes, pos);
    if (static_cast<int>(metric) > 2) throw ShapeError("bad metric tag in field record");
    BasisPtr basis;
    switch (kind) {
    case BasisKind::sine_spectral: basis = make_space(Domain{dim}, res); break;
    case BasisKind::nodal_grid: basis = make_nodal_grid(Domain{dim}, res); break;
    case BasisKind::euclidean: basis = make_euclidean(res); break;
    default: throw ShapeError("bad basis tag in field record");
    }
    if (count != static_cast<std::uint64_t>(basis->size())) throw ShapeError("field record length mismatch");
    Eigen::VectorXd c(static_cast<Eigen::Index>(count));
    for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = detail::get_le<double>(bytes, pos);
    return {std::move(basis), std::move(c), metric};
}

} // namespace gradflow
