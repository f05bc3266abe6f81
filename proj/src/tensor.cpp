#include "cat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "cat/errors.hpp"

namespace cat {

namespace {

[[noreturn]] void fail_arg(const std::string& msg) { throw std::invalid_argument(msg); }

void axpy(double alpha, const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

Array::Array(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        fail_arg("Array: " + std::to_string(values.size()) + " values for shape " +
                 shape_str(shape));
}

Array Array::zeros(Shape s) {
    std::vector<double> v(static_cast<size_t>(shape_numel(s)), 0.0);
    return Array(std::move(s), std::move(v));
}

Array Array::filled(Shape s, double value) {
    std::vector<double> v(static_cast<size_t>(shape_numel(s)), value);
    return Array(std::move(s), std::move(v));
}

bool Array::all_finite() const {
    for (double v : values)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- Tensor accessors ----

const Shape& Tensor::shape() const { return graph_->shape_of(id_); }
int64_t Tensor::numel() const { return shape_numel(shape()); }
int64_t Tensor::rows() const { return shape().empty() ? 0 : shape()[0]; }
int64_t Tensor::cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
std::span<const double> Tensor::values() const { return graph_->values_of(id_); }
std::span<const double> Tensor::grad() const { return graph_->grad_of(id_); }

double Tensor::scalar() const {
    auto v = values();
    if (v.size() != 1)
        fail_arg("scalar() on tensor of shape " + shape_str(shape()));
    return v[0];
}

// ---- Graph plumbing ----

const Shape& Graph::shape_of(uint32_t id) const { return node(id).shape; }

std::span<const double> Graph::values_of(uint32_t id) const { return node(id).values; }

std::span<const double> Graph::grad_of(uint32_t id) const {
    const Node& n = node(id);
    if (n.grad.empty())
        const_cast<Node&>(n).grad.assign(n.values.size(), 0.0);
    return n.grad;
}

std::vector<double>& Graph::grad_buffer(uint32_t id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
    return n.grad;
}

uint32_t Graph::push_node(OpKind kind, Shape shape, std::vector<uint32_t> inputs) {
    for (uint32_t in : inputs)
        if (in >= nodes_.size())
            fail_arg("graph: input id " + std::to_string(in) + " does not exist");
    Node n;
    n.kind = kind;
    n.shape = std::move(shape);
    n.inputs = std::move(inputs);
    n.values.resize(static_cast<size_t>(shape_numel(n.shape)));
    nodes_.push_back(std::move(n));
    return static_cast<uint32_t>(nodes_.size() - 1);
}

void Graph::check_same_shape(const Tensor& a, const Tensor& b, const char* op) const {
    if (a.shape() != b.shape())
        fail_arg(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
}

// ---- leaves ----

Tensor Graph::leaf(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        fail_arg("leaf: " + std::to_string(values.size()) + " values for shape " +
                 shape_str(shape));
    uint32_t id = push_node(OpKind::Leaf, std::move(shape), {});
    nodes_[id].values = std::move(values);
    return handle(id);
}

Tensor Graph::leaf(const Array& a) { return leaf(a.shape, a.values); }

Tensor Graph::scalar(double v) { return leaf(Shape{1}, {v}); }

Tensor Graph::zeros(Shape shape) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
    return leaf(std::move(shape), std::move(v));
}

// ---- elementwise ----

Tensor Graph::add(Tensor a, Tensor b) {
    check_same_shape(a, b, "add");
    uint32_t id = push_node(OpKind::Add, a.shape(), {a.id(), b.id()});
    const auto& av = node(a.id()).values;
    const auto& bv = node(b.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return handle(id);
}

Tensor Graph::sub(Tensor a, Tensor b) {
    check_same_shape(a, b, "sub");
    uint32_t id = push_node(OpKind::Sub, a.shape(), {a.id(), b.id()});
    const auto& av = node(a.id()).values;
    const auto& bv = node(b.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return handle(id);
}

Tensor Graph::mul(Tensor a, Tensor b) {
    check_same_shape(a, b, "mul");
    uint32_t id = push_node(OpKind::Mul, a.shape(), {a.id(), b.id()});
    const auto& av = node(a.id()).values;
    const auto& bv = node(b.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return handle(id);
}

Tensor Graph::scale(Tensor a, double c) {
    uint32_t id = push_node(OpKind::Scale, a.shape(), {a.id()});
    nodes_[id].daux = c;
    const auto& av = node(a.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
    return handle(id);
}

Tensor Graph::relu(Tensor a) {
    uint32_t id = push_node(OpKind::Relu, a.shape(), {a.id()});
    const auto& av = node(a.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return handle(id);
}

Tensor Graph::tanh(Tensor a) {
    uint32_t id = push_node(OpKind::Tanh, a.shape(), {a.id()});
    const auto& av = node(a.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    return handle(id);
}

Tensor Graph::log(Tensor a) {
    uint32_t id = push_node(OpKind::Log, a.shape(), {a.id()});
    const auto& av = node(a.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    return handle(id);
}

Tensor Graph::exp(Tensor a) {
    uint32_t id = push_node(OpKind::Exp, a.shape(), {a.id()});
    const auto& av = node(a.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return handle(id);
}

Tensor Graph::clamp_min(Tensor a, double floor) {
    uint32_t id = push_node(OpKind::ClampMin, a.shape(), {a.id()});
    nodes_[id].daux = floor;
    const auto& av = node(a.id()).values;
    auto& out = nodes_[id].values;
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] < floor ? floor : av[i];
    return handle(id);
}

// ---- linear algebra ----

Tensor Graph::matmul(Tensor a, Tensor b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        fail_arg("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                 shape_str(b.shape()));
    const int64_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
    uint32_t id = push_node(OpKind::Matmul, {r, c}, {a.id(), b.id()});
    const double* av = node(a.id()).values.data();
    const double* bv = node(b.id()).values.data();
    double* out = nodes_[id].values.data();
    std::fill(out, out + r * c, 0.0);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t p = 0; p < k; ++p)
            axpy(av[i * k + p], bv + p * c, out + i * c, c);
    return handle(id);
}

Tensor Graph::matmul_nt(Tensor a, Tensor b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        fail_arg("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                 shape_str(b.shape()) + "^T");
    const int64_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[0];
    uint32_t id = push_node(OpKind::MatmulNT, {r, c}, {a.id(), b.id()});
    const double* av = node(a.id()).values.data();
    const double* bv = node(b.id()).values.data();
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) {
            double s = 0.0;
            const double* ar = av + i * k;
            const double* br = bv + j * k;
            for (int64_t p = 0; p < k; ++p) s += ar[p] * br[p];
            out[i * c + j] = s;
        }
    return handle(id);
}

// ---- rowwise nonlinearities ----

Tensor Graph::softmax_rows(Tensor a) {
    if (a.shape().size() != 2)
        fail_arg("softmax_rows: need 2-D input, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    uint32_t id = push_node(OpKind::SoftmaxRows, a.shape(), {a.id()});
    const double* av = node(a.id()).values.data();
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < r; ++i) {
        const double* row = av + i * c;
        double* orow = out + i * c;
        double mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int64_t j = 0; j < c; ++j) orow[j] /= sum;
    }
    return handle(id);
}

Tensor Graph::layer_norm_rows(Tensor x, Tensor gain, Tensor bias, double eps) {
    if (x.shape().size() != 2)
        fail_arg("layer_norm_rows: need 2-D input, got " + shape_str(x.shape()));
    const int64_t r = x.shape()[0], c = x.shape()[1];
    if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
        fail_arg("layer_norm_rows: gain/bias must have shape (" + std::to_string(c) + ")");
    uint32_t id = push_node(OpKind::LayerNormRows, x.shape(), {x.id(), gain.id(), bias.id()});
    nodes_[id].daux = eps;
    const double* xv = node(x.id()).values.data();
    const double* gv = node(gain.id()).values.data();
    const double* bv = node(bias.id()).values.data();
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < r; ++i) {
        const double* row = xv + i * c;
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < c; ++j)
            out[i * c + j] = gv[j] * (row[j] - mean) * inv + bv[j];
    }
    return handle(id);
}

// ---- structure ----

Tensor Graph::embedding_lookup(Tensor table, std::span<const int32_t> ids) {
    if (table.shape().size() != 2)
        fail_arg("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
    const int64_t v = table.shape()[0], d = table.shape()[1];
    uint32_t id = push_node(OpKind::EmbeddingLookup,
                            {static_cast<int64_t>(ids.size()), d}, {table.id()});
    auto& n = nodes_[id];
    n.iaux.reserve(ids.size());
    const double* tv = node(table.id()).values.data();
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            fail_arg("embedding_lookup: id " + std::to_string(ids[i]) + " at position " +
                     std::to_string(i) + " outside table of " + std::to_string(v) + " rows");
        n.iaux.push_back(ids[i]);
        std::memcpy(n.values.data() + static_cast<int64_t>(i) * d, tv + ids[i] * d,
                    sizeof(double) * static_cast<size_t>(d));
    }
    return handle(id);
}

Tensor Graph::concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) fail_arg("concat_rows: no inputs");
    const int64_t c = parts[0].cols();
    int64_t r = 0;
    std::vector<uint32_t> inputs;
    for (const Tensor& t : parts) {
        if (t.shape().size() != 2 || t.shape()[1] != c)
            fail_arg("concat_rows: part shape " + shape_str(t.shape()) + " does not have " +
                     std::to_string(c) + " columns");
        r += t.shape()[0];
        inputs.push_back(t.id());
    }
    uint32_t id = push_node(OpKind::ConcatRows, {r, c}, std::move(inputs));
    double* out = nodes_[id].values.data();
    for (const Tensor& t : parts) {
        const auto& pv = node(t.id()).values;
        std::memcpy(out, pv.data(), sizeof(double) * pv.size());
        out += pv.size();
    }
    return handle(id);
}

Tensor Graph::concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) fail_arg("concat_cols: no inputs");
    const int64_t r = parts[0].rows();
    int64_t c = 0;
    std::vector<uint32_t> inputs;
    for (const Tensor& t : parts) {
        if (t.shape().size() != 2 || t.shape()[0] != r)
            fail_arg("concat_cols: part shape " + shape_str(t.shape()) + " does not have " +
                     std::to_string(r) + " rows");
        c += t.shape()[1];
        inputs.push_back(t.id());
    }
    uint32_t id = push_node(OpKind::ConcatCols, {r, c}, std::move(inputs));
    double* out = nodes_[id].values.data();
    int64_t col0 = 0;
    for (const Tensor& t : parts) {
        const int64_t pc = t.shape()[1];
        const double* pv = node(t.id()).values.data();
        for (int64_t i = 0; i < r; ++i)
            std::memcpy(out + i * c + col0, pv + i * pc, sizeof(double) * static_cast<size_t>(pc));
        col0 += pc;
    }
    return handle(id);
}

Tensor Graph::slice_rows(Tensor a, int64_t begin, int64_t count) {
    if (a.shape().size() != 2)
        fail_arg("slice_rows: need 2-D input, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    if (begin < 0 || count < 0 || begin + count > r)
        fail_arg("slice_rows: range [" + std::to_string(begin) + "," +
                 std::to_string(begin + count) + ") outside " + std::to_string(r) + " rows");
    uint32_t id = push_node(OpKind::SliceRows, {count, c}, {a.id()});
    nodes_[id].iaux = {begin, count};
    std::memcpy(nodes_[id].values.data(), node(a.id()).values.data() + begin * c,
                sizeof(double) * static_cast<size_t>(count * c));
    return handle(id);
}

Tensor Graph::slice_cols(Tensor a, int64_t begin, int64_t count) {
    if (a.shape().size() != 2)
        fail_arg("slice_cols: need 2-D input, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    if (begin < 0 || count < 0 || begin + count > c)
        fail_arg("slice_cols: range [" + std::to_string(begin) + "," +
                 std::to_string(begin + count) + ") outside " + std::to_string(c) + " columns");
    uint32_t id = push_node(OpKind::SliceCols, {r, count}, {a.id()});
    nodes_[id].iaux = {begin, count};
    const double* av = node(a.id()).values.data();
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < r; ++i)
        std::memcpy(out + i * count, av + i * c + begin,
                    sizeof(double) * static_cast<size_t>(count));
    return handle(id);
}

Tensor Graph::gather_rows(Tensor a, std::span<const int64_t> rows) {
    if (a.shape().size() != 2)
        fail_arg("gather_rows: need 2-D input, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    uint32_t id = push_node(OpKind::GatherRows,
                            {static_cast<int64_t>(rows.size()), c}, {a.id()});
    auto& n = nodes_[id];
    const double* av = node(a.id()).values.data();
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= r)
            fail_arg("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                     std::to_string(r) + " rows");
        n.iaux.push_back(rows[i]);
        std::memcpy(n.values.data() + static_cast<int64_t>(i) * c, av + rows[i] * c,
                    sizeof(double) * static_cast<size_t>(c));
    }
    return handle(id);
}

Tensor Graph::tile_rows(Tensor a, int64_t repeats) {
    if (a.shape().size() != 2)
        fail_arg("tile_rows: need 2-D input, got " + shape_str(a.shape()));
    if (repeats < 1) fail_arg("tile_rows: repeats must be >= 1");
    const int64_t r = a.shape()[0], c = a.shape()[1];
    uint32_t id = push_node(OpKind::TileRows, {r * repeats, c}, {a.id()});
    nodes_[id].iaux = {repeats};
    const auto& av = node(a.id()).values;
    double* out = nodes_[id].values.data();
    for (int64_t t = 0; t < repeats; ++t)
        std::memcpy(out + t * r * c, av.data(), sizeof(double) * av.size());
    return handle(id);
}

Tensor Graph::pick(Tensor a, std::span<const int32_t> col_per_row) {
    if (a.shape().size() != 2)
        fail_arg("pick: need 2-D input, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    if (static_cast<int64_t>(col_per_row.size()) != r)
        fail_arg("pick: " + std::to_string(col_per_row.size()) + " indices for " +
                 std::to_string(r) + " rows");
    uint32_t id = push_node(OpKind::Pick, {r}, {a.id()});
    auto& n = nodes_[id];
    const double* av = node(a.id()).values.data();
    for (int64_t i = 0; i < r; ++i) {
        if (col_per_row[i] < 0 || col_per_row[i] >= c)
            fail_arg("pick: column " + std::to_string(col_per_row[i]) + " at row " +
                     std::to_string(i) + " outside " + std::to_string(c) + " columns");
        n.iaux.push_back(col_per_row[i]);
        n.values[static_cast<size_t>(i)] = av[i * c + col_per_row[i]];
    }
    return handle(id);
}

Tensor Graph::reshape(Tensor a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        fail_arg("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                 " changes element count");
    uint32_t id = push_node(OpKind::Reshape, std::move(shape), {a.id()});
    nodes_[id].values = node(a.id()).values;
    return handle(id);
}

// ---- reductions ----

Tensor Graph::reduce_sum(Tensor a) {
    uint32_t id = push_node(OpKind::ReduceSum, {1}, {a.id()});
    double s = 0.0;
    for (double v : node(a.id()).values) s += v;
    nodes_[id].values[0] = s;
    return handle(id);
}

Tensor Graph::reduce_mean(Tensor a) {
    if (a.numel() == 0) fail_arg("reduce_mean: empty tensor");
    uint32_t id = push_node(OpKind::ReduceMean, {1}, {a.id()});
    double s = 0.0;
    for (double v : node(a.id()).values) s += v;
    nodes_[id].values[0] = s / static_cast<double>(a.numel());
    return handle(id);
}

Tensor Graph::row_sum(Tensor a) {
    if (a.shape().size() != 2)
        fail_arg("row_sum: need 2-D input, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    uint32_t id = push_node(OpKind::RowSum, {r}, {a.id()});
    const double* av = node(a.id()).values.data();
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += av[i * c + j];
        out[i] = s;
    }
    return handle(id);
}

Tensor Graph::sub_rowwise(Tensor m, Tensor v) {
    if (m.shape().size() != 2)
        fail_arg("sub_rowwise: need 2-D matrix, got " + shape_str(m.shape()));
    const int64_t r = m.shape()[0], c = m.shape()[1];
    if (v.shape() != Shape{r})
        fail_arg("sub_rowwise: vector shape " + shape_str(v.shape()) + " for " +
                 std::to_string(r) + " rows");
    uint32_t id = push_node(OpKind::SubRowwise, m.shape(), {m.id(), v.id()});
    const double* mv = node(m.id()).values.data();
    const double* vv = node(v.id()).values.data();
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] - vv[i];
    return handle(id);
}

// ---- similarity ----

Tensor Graph::cosine_matrix(Tensor a, Tensor b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        fail_arg("cosine_matrix: incompatible shapes " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
    const int64_t ra = a.shape()[0], rb = b.shape()[0], k = a.shape()[1];
    uint32_t id = push_node(OpKind::CosineMatrix, {ra, rb}, {a.id(), b.id()});
    const double* av = node(a.id()).values.data();
    const double* bv = node(b.id()).values.data();
    auto norm_of = [k](const double* row, int64_t i, const char* side) {
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += row[j] * row[j];
        double n = std::sqrt(s);
        if (n == 0.0)
            throw NumericError("cosine_matrix: row " + std::to_string(i) + " of " + side +
                               " input has zero norm");
        return n;
    };
    std::vector<double> na(ra), nb(rb);
    for (int64_t i = 0; i < ra; ++i) na[i] = norm_of(av + i * k, i, "first");
    for (int64_t j = 0; j < rb; ++j) nb[j] = norm_of(bv + j * k, j, "second");
    double* out = nodes_[id].values.data();
    for (int64_t i = 0; i < ra; ++i)
        for (int64_t j = 0; j < rb; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += av[i * k + p] * bv[j * k + p];
            out[i * rb + j] = s / (na[i] * nb[j]);
        }
    return handle(id);
}

// ---- autodiff ----

void Graph::backward(Tensor loss) {
    if (loss.graph() != this) fail_arg("backward: loss belongs to a different graph");
    if (loss.numel() != 1)
        fail_arg("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    for (uint32_t id = 0; id < nodes_.size(); ++id)
        for (uint32_t in : nodes_[id].inputs)
            if (in >= id)
                fail_arg("backward: node " + std::to_string(id) +
                         " depends on later node " + std::to_string(in));

    std::vector<uint8_t> reached(nodes_.size(), 0);
    reached[loss.id()] = 1;
    for (uint32_t id = loss.id() + 1; id-- > 0;) {
        if (!reached[id]) continue;
        for (uint32_t in : nodes_[id].inputs) reached[in] = 1;
    }

    // Set aside gradients already held by reached nodes so this pass
    // propagates only its own contribution; accumulation stays linear
    // across repeated backward calls.
    std::vector<std::pair<uint32_t, std::vector<double>>> stash;
    for (uint32_t id = 0; id <= loss.id(); ++id) {
        if (reached[id] && !nodes_[id].grad.empty()) {
            stash.emplace_back(id, std::move(nodes_[id].grad));
            nodes_[id].grad.clear();
        }
    }

    grad_buffer(loss.id())[0] = 1.0;
    grads_live_ = true;
    for (uint32_t id = loss.id() + 1; id-- > 0;) {
        if (reached[id] && nodes_[id].kind != OpKind::Leaf) backward_node(id);
    }

    for (auto& [id, old] : stash) {
        auto& gb = grad_buffer(id);
        for (size_t i = 0; i < old.size(); ++i) gb[i] += old[i];
    }
}

void Graph::backward_node(uint32_t id) {
    Node& n = nodes_[id];
    const double* g = n.grad.empty() ? nullptr : n.grad.data();
    if (!g) return;  // never seeded; nothing to propagate
    const int64_t numel = static_cast<int64_t>(n.values.size());

    switch (n.kind) {
        case OpKind::Leaf:
            break;
        case OpKind::Add: {
            axpy(1.0, g, grad_buffer(n.inputs[0]).data(), numel);
            axpy(1.0, g, grad_buffer(n.inputs[1]).data(), numel);
            break;
        }
        case OpKind::Sub: {
            axpy(1.0, g, grad_buffer(n.inputs[0]).data(), numel);
            axpy(-1.0, g, grad_buffer(n.inputs[1]).data(), numel);
            break;
        }
        case OpKind::Mul: {
            const auto& av = node(n.inputs[0]).values;
            const auto& bv = node(n.inputs[1]).values;
            auto& ga = grad_buffer(n.inputs[0]);
            auto& gb = grad_buffer(n.inputs[1]);
            for (int64_t i = 0; i < numel; ++i) {
                ga[i] += g[i] * bv[i];
                gb[i] += g[i] * av[i];
            }
            break;
        }
        case OpKind::Scale: {
            axpy(n.daux, g, grad_buffer(n.inputs[0]).data(), numel);
            break;
        }
        case OpKind::Matmul: {
            const Node& a = node(n.inputs[0]);
            const Node& b = node(n.inputs[1]);
            const int64_t r = a.shape[0], k = a.shape[1], c = b.shape[1];
            double* ga = grad_buffer(n.inputs[0]).data();
            double* gb = grad_buffer(n.inputs[1]).data();
            const double* av = a.values.data();
            const double* bv = b.values.data();
            for (int64_t i = 0; i < r; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* gr = g + i * c;
                    const double* br = bv + p * c;
                    for (int64_t j = 0; j < c; ++j) s += gr[j] * br[j];
                    ga[i * k + p] += s;
                }
            for (int64_t i = 0; i < r; ++i)
                for (int64_t p = 0; p < k; ++p)
                    axpy(av[i * k + p], g + i * c, gb + p * c, c);
            break;
        }
        case OpKind::MatmulNT: {
            const Node& a = node(n.inputs[0]);
            const Node& b = node(n.inputs[1]);
            const int64_t r = a.shape[0], k = a.shape[1], c = b.shape[0];
            double* ga = grad_buffer(n.inputs[0]).data();
            double* gb = grad_buffer(n.inputs[1]).data();
            const double* av = a.values.data();
            const double* bv = b.values.data();
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) {
                    const double gij = g[i * c + j];
                    if (gij == 0.0) continue;
                    axpy(gij, bv + j * k, ga + i * k, k);
                    axpy(gij, av + i * k, gb + j * k, k);
                }
            break;
        }
        case OpKind::Relu: {
            const auto& av = node(n.inputs[0]).values;
            auto& ga = grad_buffer(n.inputs[0]);
            for (int64_t i = 0; i < numel; ++i)
                if (av[i] > 0.0) ga[i] += g[i];
            break;
        }
        case OpKind::Tanh: {
            auto& ga = grad_buffer(n.inputs[0]);
            for (int64_t i = 0; i < numel; ++i)
                ga[i] += g[i] * (1.0 - n.values[i] * n.values[i]);
            break;
        }
        case OpKind::Log: {
            const auto& av = node(n.inputs[0]).values;
            auto& ga = grad_buffer(n.inputs[0]);
            for (int64_t i = 0; i < numel; ++i) ga[i] += g[i] / av[i];
            break;
        }
        case OpKind::Exp: {
            auto& ga = grad_buffer(n.inputs[0]);
            for (int64_t i = 0; i < numel; ++i) ga[i] += g[i] * n.values[i];
            break;
        }
        case OpKind::ClampMin: {
            const auto& av = node(n.inputs[0]).values;
            auto& ga = grad_buffer(n.inputs[0]);
            for (int64_t i = 0; i < numel; ++i)
                if (av[i] >= n.daux) ga[i] += g[i];
            break;
        }
        case OpKind::SoftmaxRows: {
            const int64_t r = n.shape[0], c = n.shape[1];
            auto& ga = grad_buffer(n.inputs[0]);
            for (int64_t i = 0; i < r; ++i) {
                const double* y = n.values.data() + i * c;
                const double* gr = g + i * c;
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += gr[j] * y[j];
                for (int64_t j = 0; j < c; ++j) ga[i * c + j] += y[j] * (gr[j] - dot);
            }
            break;
        }
        case OpKind::LayerNormRows: {
            const Node& x = node(n.inputs[0]);
            const Node& gain = node(n.inputs[1]);
            const int64_t r = n.shape[0], c = n.shape[1];
            const double eps = n.daux;
            double* gx = grad_buffer(n.inputs[0]).data();
            double* gg = grad_buffer(n.inputs[1]).data();
            double* gb = grad_buffer(n.inputs[2]).data();
            const double* xv = x.values.data();
            const double* gv = gain.values.data();
            const double cc = static_cast<double>(c);
            for (int64_t i = 0; i < r; ++i) {
                const double* row = xv + i * c;
                const double* gr = g + i * c;
                double mean = 0.0;
                for (int64_t j = 0; j < c; ++j) mean += row[j];
                mean /= cc;
                double var = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    double d = row[j] - mean;
                    var += d * d;
                }
                var /= cc;
                const double inv = 1.0 / std::sqrt(var + eps);
                double dvar = 0.0, dmean = 0.0, sum_dxhat = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    const double xhat = (row[j] - mean) * inv;
                    const double dxhat = gr[j] * gv[j];
                    gg[j] += gr[j] * xhat;
                    gb[j] += gr[j];
                    dvar += dxhat * (row[j] - mean);
                    sum_dxhat += dxhat;
                }
                dvar *= -0.5 * inv * inv * inv;
                dmean = -sum_dxhat * inv;
                for (int64_t j = 0; j < c; ++j) {
                    const double dxhat = gr[j] * gv[j];
                    gx[i * c + j] +=
                        dxhat * inv + dvar * 2.0 * (row[j] - mean) / cc + dmean / cc;
                }
            }
            break;
        }
        case OpKind::EmbeddingLookup: {
            const int64_t d = n.shape[1];
            double* gt = grad_buffer(n.inputs[0]).data();
            for (size_t i = 0; i < n.iaux.size(); ++i)
                axpy(1.0, g + static_cast<int64_t>(i) * d, gt + n.iaux[i] * d, d);
            break;
        }
        case OpKind::ConcatRows: {
            const double* gp = g;
            for (uint32_t in : n.inputs) {
                auto& gi = grad_buffer(in);
                axpy(1.0, gp, gi.data(), static_cast<int64_t>(gi.size()));
                gp += gi.size();
            }
            break;
        }
        case OpKind::ConcatCols: {
            const int64_t r = n.shape[0], c = n.shape[1];
            int64_t col0 = 0;
            for (uint32_t in : n.inputs) {
                const int64_t pc = node(in).shape[1];
                double* gi = grad_buffer(in).data();
                for (int64_t i = 0; i < r; ++i)
                    axpy(1.0, g + i * c + col0, gi + i * pc, pc);
                col0 += pc;
            }
            break;
        }
        case OpKind::SliceRows: {
            const int64_t c = n.shape[1];
            const int64_t begin = n.iaux[0], count = n.iaux[1];
            double* ga = grad_buffer(n.inputs[0]).data();
            axpy(1.0, g, ga + begin * c, count * c);
            break;
        }
        case OpKind::SliceCols: {
            const int64_t r = n.shape[0], count = n.shape[1];
            const int64_t begin = n.iaux[0];
            const int64_t c = node(n.inputs[0]).shape[1];
            double* ga = grad_buffer(n.inputs[0]).data();
            for (int64_t i = 0; i < r; ++i)
                axpy(1.0, g + i * count, ga + i * c + begin, count);
            break;
        }
        case OpKind::GatherRows: {
            const int64_t c = n.shape[1];
            double* ga = grad_buffer(n.inputs[0]).data();
            for (size_t i = 0; i < n.iaux.size(); ++i)
                axpy(1.0, g + static_cast<int64_t>(i) * c, ga + n.iaux[i] * c, c);
            break;
        }
        case OpKind::TileRows: {
            const Node& a = node(n.inputs[0]);
            const int64_t block = static_cast<int64_t>(a.values.size());
            const int64_t repeats = n.iaux[0];
            double* ga = grad_buffer(n.inputs[0]).data();
            for (int64_t t = 0; t < repeats; ++t) axpy(1.0, g + t * block, ga, block);
            break;
        }
        case OpKind::Pick: {
            const int64_t c = node(n.inputs[0]).shape[1];
            double* ga = grad_buffer(n.inputs[0]).data();
            for (size_t i = 0; i < n.iaux.size(); ++i)
                ga[static_cast<int64_t>(i) * c + n.iaux[i]] += g[i];
            break;
        }
        case OpKind::Reshape: {
            axpy(1.0, g, grad_buffer(n.inputs[0]).data(), numel);
            break;
        }
        case OpKind::ReduceSum: {
            auto& ga = grad_buffer(n.inputs[0]);
            const double gs = g[0];
            for (double& v : ga) v += gs;
            break;
        }
        case OpKind::ReduceMean: {
            auto& ga = grad_buffer(n.inputs[0]);
            const double gs = g[0] / static_cast<double>(ga.size());
            for (double& v : ga) v += gs;
            break;
        }
        case OpKind::RowSum: {
            const Node& a = node(n.inputs[0]);
            const int64_t r = a.shape[0], c = a.shape[1];
            double* ga = grad_buffer(n.inputs[0]).data();
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
            break;
        }
        case OpKind::SubRowwise: {
            const int64_t r = n.shape[0], c = n.shape[1];
            double* gm = grad_buffer(n.inputs[0]).data();
            double* gv = grad_buffer(n.inputs[1]).data();
            axpy(1.0, g, gm, r * c);
            for (int64_t i = 0; i < r; ++i) {
                double s = 0.0;
                for (int64_t j = 0; j < c; ++j) s += g[i * c + j];
                gv[i] -= s;
            }
            break;
        }
        case OpKind::CosineMatrix: {
            const Node& a = node(n.inputs[0]);
            const Node& b = node(n.inputs[1]);
            const int64_t ra = a.shape[0], rb = b.shape[0], k = a.shape[1];
            const double* av = a.values.data();
            const double* bv = b.values.data();
            std::vector<double> na(ra), nb(rb);
            for (int64_t i = 0; i < ra; ++i) {
                double s = 0.0;
                for (int64_t p = 0; p < k; ++p) s += av[i * k + p] * av[i * k + p];
                na[i] = std::sqrt(s);
            }
            for (int64_t j = 0; j < rb; ++j) {
                double s = 0.0;
                for (int64_t p = 0; p < k; ++p) s += bv[j * k + p] * bv[j * k + p];
                nb[j] = std::sqrt(s);
            }
            double* ga = grad_buffer(n.inputs[0]).data();
            double* gb = grad_buffer(n.inputs[1]).data();
            const double* s = n.values.data();
            for (int64_t i = 0; i < ra; ++i)
                for (int64_t j = 0; j < rb; ++j) {
                    const double gij = g[i * rb + j];
                    if (gij == 0.0) continue;
                    const double sij = s[i * rb + j];
                    for (int64_t p = 0; p < k; ++p) {
                        const double ui = av[i * k + p] / na[i];
                        const double wj = bv[j * k + p] / nb[j];
                        ga[i * k + p] += gij * (wj - sij * ui) / na[i];
                        gb[j * k + p] += gij * (ui - sij * wj) / nb[j];
                    }
                }
            break;
        }
    }
}

void Graph::zero_grad() {
    for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    grads_live_ = false;
}

// ---- gradient checking ----

FdiffReport finite_difference_check(const ScalarFn& f, const Array& point, double h,
                                    int threads) {
    if (h <= 0.0) fail_arg("finite_difference_check: h must be positive");
    const int64_t n = point.numel();

    FdiffReport report;
    std::vector<double> analytic;
    {
        Graph g;
        Tensor p = g.leaf(point);
        Tensor loss = f(g, p);
        if (loss.numel() != 1)
            fail_arg("finite_difference_check: function output must be scalar");
        if (!std::isfinite(loss.scalar())) {
            report.non_finite = true;
            return report;
        }
        g.backward(loss);
        auto ga = p.grad();
        analytic.assign(ga.begin(), ga.end());
    }

    threads = std::max(1, std::min<int>(threads, static_cast<int>(n > 0 ? n : 1)));
    std::vector<FdiffReport> partial(static_cast<size_t>(threads));

    auto run_range = [&](int64_t begin, int64_t end, FdiffReport& out) {
        Array pt = point;
        for (int64_t c = begin; c < end; ++c) {
            const double orig = pt.values[static_cast<size_t>(c)];
            double fp, fm;
            {
                Graph g;
                pt.values[static_cast<size_t>(c)] = orig + h;
                fp = f(g, g.leaf(pt)).scalar();
            }
            {
                Graph g;
                pt.values[static_cast<size_t>(c)] = orig - h;
                fm = f(g, g.leaf(pt)).scalar();
            }
            pt.values[static_cast<size_t>(c)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                if (!out.non_finite) {
                    out.non_finite = true;
                    out.non_finite_coordinate = c;
                }
                continue;
            }
            const double gn = (fp - fm) / (2.0 * h);
            const double ga = analytic[static_cast<size_t>(c)];
            const double rel = std::abs(ga - gn) / std::max(1e-12, std::abs(ga) + std::abs(gn));
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst_coordinate = c;
                out.worst_analytic = ga;
                out.worst_numeric = gn;
            }
        }
    };

    if (threads == 1) {
        run_range(0, n, partial[0]);
    } else {
        std::vector<std::thread> pool;
        const int64_t chunk = (n + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            const int64_t begin = t * chunk;
            const int64_t end = std::min<int64_t>(n, begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(run_range, begin, end, std::ref(partial[static_cast<size_t>(t)]));
        }
        for (auto& th : pool) th.join();
    }

    for (const FdiffReport& p : partial) {
        if (p.max_rel_error > report.max_rel_error) {
            report.max_rel_error = p.max_rel_error;
            report.worst_coordinate = p.worst_coordinate;
            report.worst_analytic = p.worst_analytic;
            report.worst_numeric = p.worst_numeric;
        }
        if (p.non_finite &&
            (!report.non_finite || p.non_finite_coordinate < report.non_finite_coordinate)) {
            report.non_finite = true;
            report.non_finite_coordinate = p.non_finite_coordinate;
        }
    }
    return report;
}

}  // namespace cat
