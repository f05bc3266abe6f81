#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cat {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Plain dense array. Parameters and constants live in Arrays between
// forward passes; Graph nodes copy values in when a pass starts.
struct Array {
    Shape shape;
    std::vector<double> values;

    Array() = default;
    Array(Shape s, std::vector<double> v);
    static Array zeros(Shape s);
    static Array filled(Shape s, double value);

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool all_finite() const;
};

enum class OpKind : uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Matmul,       // A(r,k) * B(k,c)
    MatmulNT,     // A(r,k) * B(c,k)^T
    Relu,
    Tanh,
    Log,
    Exp,
    ClampMin,
    SoftmaxRows,
    LayerNormRows,
    EmbeddingLookup,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    GatherRows,
    TileRows,
    Pick,
    Reshape,
    ReduceSum,
    ReduceMean,
    RowSum,
    SubRowwise,   // out[i][j] = m[i][j] - v[i]
    CosineMatrix, // out[i][j] = cos(a_i, b_j)
};

class Graph;

// Handle to one node of a Graph: a dense array with a value buffer and a
// same-shape gradient buffer. Node ids are only meaningful within the graph
// that created them.
class Tensor {
public:
    Tensor() = default;

    bool valid() const { return graph_ != nullptr; }
    uint32_t id() const { return id_; }
    Graph* graph() const { return graph_; }

    const Shape& shape() const;
    int64_t numel() const;
    int64_t rows() const;
    int64_t cols() const;
    std::span<const double> values() const;
    std::span<const double> grad() const;
    double scalar() const;  // requires numel() == 1

private:
    friend class Graph;
    Tensor(Graph* g, uint32_t id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    uint32_t id_ = 0;
};

// Define-by-run computation graph: an append-only record of primitive
// operations whose inputs always precede them, so creation order is a
// topological order. A graph is rebuilt per forward pass and is confined
// to a single thread; distinct graphs may run concurrently.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves ----
    Tensor leaf(Shape shape, std::vector<double> values);
    Tensor leaf(const Array& a);
    Tensor scalar(double v);
    Tensor zeros(Shape shape);

    // ---- elementwise ----
    Tensor add(Tensor a, Tensor b);
    Tensor sub(Tensor a, Tensor b);
    Tensor mul(Tensor a, Tensor b);
    Tensor scale(Tensor a, double c);
    Tensor relu(Tensor a);
    Tensor tanh(Tensor a);
    Tensor log(Tensor a);
    Tensor exp(Tensor a);
    Tensor clamp_min(Tensor a, double floor);

    // ---- linear algebra ----
    Tensor matmul(Tensor a, Tensor b);     // (r,k) x (k,c) -> (r,c)
    Tensor matmul_nt(Tensor a, Tensor b);  // (r,k) x (c,k) -> (r,c)

    // ---- rowwise nonlinearities ----
    Tensor softmax_rows(Tensor a);
    Tensor layer_norm_rows(Tensor x, Tensor gain, Tensor bias, double eps = 1e-5);

    // ---- structure ----
    Tensor embedding_lookup(Tensor table, std::span<const int32_t> ids);
    Tensor concat_rows(std::span<const Tensor> parts);
    Tensor concat_cols(std::span<const Tensor> parts);
    Tensor slice_rows(Tensor a, int64_t begin, int64_t count);
    Tensor slice_cols(Tensor a, int64_t begin, int64_t count);
    Tensor gather_rows(Tensor a, std::span<const int64_t> rows);
    Tensor tile_rows(Tensor a, int64_t repeats);
    Tensor pick(Tensor a, std::span<const int32_t> col_per_row);  // 2-D -> 1-D
    Tensor reshape(Tensor a, Shape shape);

    // ---- reductions ----
    Tensor reduce_sum(Tensor a);
    Tensor reduce_mean(Tensor a);
    Tensor row_sum(Tensor a);                 // 2-D -> 1-D
    Tensor sub_rowwise(Tensor m, Tensor v);   // m[i][j] - v[i]

    // ---- similarity ----
    // Pairwise cosine similarities between rows of a and rows of b.
    // Rejects zero-norm rows (cosine undefined) naming the offending row.
    Tensor cosine_matrix(Tensor a, Tensor b);

    // ---- autodiff ----
    // Populates grad buffers of every node the loss depends on with
    // d(loss)/d(node); unreachable nodes keep zero grad. Gradients
    // accumulate across calls until zero_grad(). Rejects non-scalar losses
    // and malformed (non-topological) graphs.
    void backward(Tensor loss);
    void zero_grad();

    size_t size() const { return nodes_.size(); }

    const Shape& shape_of(uint32_t id) const;
    std::span<const double> values_of(uint32_t id) const;
    std::span<const double> grad_of(uint32_t id) const;

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;  // sized lazily; logically all-zero until backward
        std::vector<uint32_t> inputs;
        std::vector<int64_t> iaux;
        double daux = 0.0;
    };

    uint32_t push_node(OpKind kind, Shape shape, std::vector<uint32_t> inputs);
    Node& node(uint32_t id) { return nodes_[id]; }
    const Node& node(uint32_t id) const { return nodes_[id]; }
    std::vector<double>& grad_buffer(uint32_t id);
    void backward_node(uint32_t id);
    void check_same_shape(const Tensor& a, const Tensor& b, const char* op) const;
    Tensor handle(uint32_t id) { return Tensor(this, id); }

    std::vector<Node> nodes_;
    bool grads_live_ = false;

    friend class Tensor;
};

// ---- gradient checking ----

// A differentiable scalar function built on a graph from a single flat
// leaf tensor. Must be pure: same point, same value.
using ScalarFn = std::function<Tensor(Graph&, Tensor point)>;

struct FdiffReport {
    double max_rel_error = 0.0;
    int64_t worst_coordinate = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool non_finite = false;
    int64_t non_finite_coordinate = -1;
};

// Compares the analytic gradient of f at `point` against central finite
// differences, coordinate by coordinate. Relative error per coordinate is
// |ga - gn| / max(1e-12, |ga| + |gn|). A non-finite function value is
// reported with the offending coordinate. `threads` > 1 splits coordinates
// across worker threads, each with its own graphs.
FdiffReport finite_difference_check(const ScalarFn& f, const Array& point, double h,
                                    int threads = 1);

}  // namespace cat
