#include <dpl/tensor.hpp>

#include <gtest/gtest.h>

#include <vector>

using dpl::Shape;
using dpl::Tensor;

TEST(Tensor, DataLengthMatchesShape)
{
    Tensor t(Shape{2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), dpl::DimensionError);
}

TEST(Tensor, ScalarHasRankZeroAndOneElement)
{
    Tensor s = Tensor::scalar(4.5);
    EXPECT_EQ(s.rank(), 0u);
    EXPECT_EQ(s.size(), 1u);
    EXPECT_DOUBLE_EQ(s.item(), 4.5);
    EXPECT_THROW(Tensor(Shape{2}).item(), dpl::ContractError);
}

TEST(Tensor, RowMajorIndexing)
{
    Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(m(1, 0), 4.0);
    EXPECT_EQ(m[5], 6.0);
    Tensor x(Shape{2, 3, 2, 2});
    x(1, 2, 1, 0) = 7.0;
    EXPECT_EQ(x[((1 * 3 + 2) * 2 + 1) * 2 + 0], 7.0);
    EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), dpl::DimensionError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount)
{
    Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    Tensor r = m.reshaped(Shape{3, 2});
    EXPECT_EQ(r(2, 1), 6.0);
    EXPECT_THROW(m.reshaped(Shape{4}), dpl::DimensionError);
}

TEST(Tensor, RowSlicesAndGather)
{
    Tensor m = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
    Tensor s = m.slice_rows(1, 3);
    EXPECT_EQ(s.shape(), (Shape{2, 2}));
    EXPECT_EQ(s(0, 0), 3.0);
    EXPECT_EQ(m.row(2), Tensor::vector({5, 6}));
    const std::vector<std::size_t> idx{2, 0, 2};
    Tensor g = dpl::gather_rows(m, idx);
    EXPECT_EQ(g, Tensor::matrix({{5, 6}, {1, 2}, {5, 6}}));
    EXPECT_THROW(m.slice_rows(2, 4), dpl::DimensionError);
}

TEST(Tensor, StackAndConcat)
{
    const std::vector<Tensor> rows{Tensor::vector({1, 2}), Tensor::vector({3, 4})};
    Tensor st = dpl::stack_rows(rows);
    EXPECT_EQ(st, Tensor::matrix({{1, 2}, {3, 4}}));
    const std::vector<Tensor> parts{st, Tensor::matrix({{5, 6}})};
    EXPECT_EQ(dpl::concat_rows(parts), Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
    const std::vector<Tensor> bad{st, Tensor::matrix({{1, 2, 3}})};
    EXPECT_THROW(dpl::concat_rows(bad), dpl::DimensionError);
}

TEST(Tensor, ShapeString)
{
    EXPECT_EQ(dpl::shape_str(Shape{2, 3}), "[2x3]");
    EXPECT_EQ(dpl::shape_str(Shape{}), "[]");
}
