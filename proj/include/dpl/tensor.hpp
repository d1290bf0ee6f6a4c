#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dpl {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an API precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised for mathematically degenerate inputs (e.g. zero-norm vectors).
class DegenerateInputError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major float64 array. A rank-0 shape holds a single scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
    {
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        if (data_.size() != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size())
                                 + " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::initializer_list<double> values)
    {
        return Tensor(Shape{values.size()}, std::vector<double>(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows)
    {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c)
                throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const
    {
        if (axis >= shape_.size())
            throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
        return shape_[axis];
    }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const double& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const double& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    double item() const
    {
        if (data_.size() != 1)
            throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    /// Same data viewed with a new shape of equal element count.
    Tensor reshaped(Shape shape) const
    {
        if (shape_numel(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    /// Rows [begin, end) along axis 0.
    Tensor slice_rows(std::size_t begin, std::size_t end) const
    {
        if (rank() == 0 || begin > end || end > shape_[0])
            throw DimensionError("row slice out of range for " + shape_str(shape_));
        const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
        Shape s = shape_;
        s[0] = end - begin;
        return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                        data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
    }

    /// Row i along axis 0 with that axis dropped.
    Tensor row(std::size_t i) const
    {
        Tensor r = slice_rows(i, i + 1);
        Shape s(shape_.begin() + 1, shape_.end());
        return r.reshaped(std::move(s));
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_{0};
    std::vector<double> data_;
};

/// Stack equally shaped tensors along a new leading axis.
inline Tensor stack_rows(std::span<const Tensor> rows)
{
    if (rows.empty())
        throw ContractError("stack_rows needs at least one tensor");
    Shape inner = rows.front().shape();
    std::vector<double> data;
    data.reserve(rows.size() * rows.front().size());
    for (const auto& r : rows) {
        if (r.shape() != inner)
            throw DimensionError("stack_rows shape mismatch " + shape_str(r.shape()) + " vs " + shape_str(inner));
        data.insert(data.end(), r.data().begin(), r.data().end());
    }
    Shape s{rows.size()};
    s.insert(s.end(), inner.begin(), inner.end());
    return Tensor(std::move(s), std::move(data));
}

/// Concatenate tensors along axis 0; trailing dimensions must agree.
inline Tensor concat_rows(std::span<const Tensor> parts)
{
    if (parts.empty())
        throw ContractError("concat_rows needs at least one tensor");
    Shape s = parts.front().shape();
    if (s.empty())
        throw DimensionError("concat_rows on rank-0 tensor");
    std::size_t rows = 0;
    std::vector<double> data;
    for (const auto& p : parts) {
        if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1))
            throw DimensionError("concat_rows trailing shape mismatch");
        rows += p.dim(0);
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    s[0] = rows;
    return Tensor(std::move(s), std::move(data));
}

/// Rows of src at the given indices along axis 0.
inline Tensor gather_rows(const Tensor& src, std::span<const std::size_t> idx)
{
    if (src.rank() == 0)
        throw DimensionError("gather_rows on rank-0 tensor");
    const std::size_t stride = src.dim(0) ? src.size() / src.dim(0) : 0;
    Shape s = src.shape();
    s[0] = idx.size();
    std::vector<double> data;
    data.reserve(idx.size() * stride);
    for (std::size_t i : idx) {
        if (i >= src.dim(0))
            throw DimensionError("gather index " + std::to_string(i) + " out of range");
        auto first = src.data().begin() + static_cast<std::ptrdiff_t>(i * stride);
        data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
    }
    return Tensor(std::move(s), std::move(data));
}

} // namespace dpl
