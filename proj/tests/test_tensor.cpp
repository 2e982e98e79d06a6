#include <catch2/catch_amalgamated.hpp>

#include "tdcedn/rng.hpp"
#include "tdcedn/tensor.hpp"

using namespace tdcedn;

TEST_CASE("shape count and validation") {
  CHECK(Shape{2, 3, 4, 5}.count() == 120);
  CHECK(Shape{1, 1, 1, 1}.count() == 1);
  CHECK_THROWS_AS(Tensor<float>(Shape{0, 1, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, -2, 1}), std::invalid_argument);
}

TEST_CASE("construction and fill") {
  Tensor<float> z = Tensor<float>::zeros(Shape{2, 1, 3, 3});
  for (i64 i = 0; i < z.size(); ++i) CHECK(z.ptr()[i] == 0.0f);
  Tensor<float> o = Tensor<float>::ones(Shape{1, 2, 2, 2});
  for (i64 i = 0; i < o.size(); ++i) CHECK(o.ptr()[i] == 1.0f);
  CHECK(Tensor<float>().shape() == Shape{1, 1, 1, 1});
}

TEST_CASE("from_values round trip and size check") {
  std::vector<double> v{1, 2, 3, 4, 5, 6};
  Tensor<double> t = Tensor<double>::from_values(Shape{1, 2, 1, 3}, v);
  CHECK(t.data() == std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(Tensor<double>::from_values(Shape{1, 2, 1, 3}, {1, 2, 3}),
                  std::invalid_argument);
}

TEST_CASE("indexing follows nchw layout") {
  Tensor<float> t(Shape{2, 3, 4, 5});
  t.at(1, 2, 3, 4) = 9.5f;
  // flat index ((n*C + c)*H + y)*W + x
  CHECK(t.ptr()[((1 * 3 + 2) * 4 + 3) * 5 + 4] == 9.5f);
  const Tensor<float>& ct = t;
  CHECK(ct(1, 2, 3, 4) == 9.5f);
}

TEST_CASE("elementwise ops") {
  auto a = Tensor<double>::from_values(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_values(Shape{1, 1, 2, 2}, {10, 20, 30, 40});
  CHECK(add(a, b).data() == std::vector<double>{11, 22, 33, 44});
  CHECK(sub(b, a).data() == std::vector<double>{9, 18, 27, 36});
  CHECK(mul(a, b).data() == std::vector<double>{10, 40, 90, 160});
  CHECK(scale(a, 2.0).data() == std::vector<double>{2, 4, 6, 8});
  Tensor<double> other(Shape{1, 1, 2, 3});
  CHECK_THROWS_AS(add(a, other), std::invalid_argument);
  CHECK_THROWS_AS(sub(a, other), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, other), std::invalid_argument);
}

TEST_CASE("clamp") {
  auto a = Tensor<double>::from_values(Shape{1, 1, 1, 4}, {-2, 0.25, 0.75, 3});
  CHECK(clamp(a, 0.0, 1.0).data() == std::vector<double>{0, 0.25, 0.75, 1});
  CHECK_THROWS_AS(clamp(a, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("concat then split is the identity") {
  Rng rng(11);
  Tensor<float> a(Shape{2, 3, 4, 5});
  Tensor<float> b(Shape{2, 2, 4, 5});
  for (i64 i = 0; i < a.size(); ++i) a.ptr()[i] = static_cast<float>(rng.next_gaussian());
  for (i64 i = 0; i < b.size(); ++i) b.ptr()[i] = static_cast<float>(rng.next_gaussian());
  Tensor<float> cat = concat_channels(a, b);
  REQUIRE(cat.shape() == Shape{2, 5, 4, 5});
  // a's channels come first
  CHECK(cat.at(1, 0, 2, 3) == a.at(1, 0, 2, 3));
  CHECK(cat.at(1, 3, 2, 3) == b.at(1, 0, 2, 3));
  auto [sa, sb] = split_channels(cat, 3);
  CHECK(sa.data() == a.data());
  CHECK(sb.data() == b.data());
  CHECK_THROWS_AS(concat_channels(a, Tensor<float>(Shape{2, 2, 4, 4})),
                  std::invalid_argument);
  CHECK_THROWS_AS(split_channels(cat, 0), std::invalid_argument);
  CHECK_THROWS_AS(split_channels(cat, 5), std::invalid_argument);
}

TEST_CASE("slice_channels") {
  auto t = Tensor<double>::from_values(Shape{1, 3, 1, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(slice_channels(t, 1, 3).data() == std::vector<double>{3, 4, 5, 6});
  CHECK_THROWS_AS(slice_channels(t, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(slice_channels(t, 0, 4), std::invalid_argument);
}

TEST_CASE("gradient buffer lifecycle") {
  Tensor<float> t(Shape{1, 1, 2, 2});
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(t.grad(), std::logic_error);
  t.ensure_grad();
  REQUIRE(t.has_grad());
  CHECK(t.grad() == std::vector<float>{0, 0, 0, 0});

  auto g = Tensor<float>::from_values(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  t.add_grad(g);
  t.add_grad(g);  // accumulates
  CHECK(t.grad() == std::vector<float>{2, 4, 6, 8});
  CHECK_THROWS_AS(t.add_grad(Tensor<float>(Shape{1, 1, 2, 3})), std::invalid_argument);

  t.zero_grad();
  CHECK(t.grad() == std::vector<float>{0, 0, 0, 0});
  t.drop_grad();
  CHECK_FALSE(t.has_grad());

  // add_grad allocates on first use
  Tensor<float> u(Shape{1, 1, 2, 2});
  u.add_grad(g);
  CHECK(u.grad() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("precision tags") {
  CHECK(precision_of<float>::value == Precision::f32);
  CHECK(precision_of<double>::value == Precision::f64);
}
