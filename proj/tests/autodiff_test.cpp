#include <gtest/gtest.h>

#include "involution/autodiff.hpp"
#include "involution/grad_check.hpp"
#include "involution/nnops.hpp"
#include "involution/prng.hpp"

using namespace involution;

TEST(Tape, ForwardAddRecordsNode) {
  Tape tape;
  const Var x = tape.input(Tensor::from({2}, {1, 2}));
  const Var y = tape.input(Tensor::from({2}, {3, 5}));
  const std::size_t before = tape.op_count();
  const Var z = ad::core_registry().forward(tape, "add", std::vector<Var>{x, y});
  EXPECT_EQ(z.value(), Tensor::from({2}, {4, 7}));
  EXPECT_EQ(tape.op_count(), before + 1);
  EXPECT_EQ(tape.node(z.id()).op, "add");
}

TEST(Tape, ReluOfMatmulRecordsTwoNodes) {
  Tape tape;
  Prng rng(1);
  const Var a = tape.input(random_normal({2, 3}, rng));
  const Var b = tape.input(random_normal({3, 2}, rng));
  (void)ad::relu(ad::matmul(a, b));
  EXPECT_EQ(tape.op_count(), 2u);
}

TEST(Tape, InputsPrecedeEveryNode) {
  Tape tape;
  Prng rng(2);
  const Var a = tape.input(random_normal({2, 2}, rng));
  (void)ad::sum(ad::mul(ad::relu(a), ad::add(a, a)));
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (std::size_t in : tape.node(i).inputs) EXPECT_LT(in, i);
}

TEST(Tape, ReplayIsDeterministic) {
  Prng rng(3);
  const Tensor a = random_normal({3, 3}, rng), b = random_normal({3, 3}, rng);
  auto run = [&] {
    Tape tape;
    return ad::relu(ad::matmul(tape.input(a), tape.input(b))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, UnknownOpThrows) {
  Tape tape;
  const Var x = tape.input(Tensor::zeros({1}));
  EXPECT_THROW(ad::core_registry().forward(tape, "no_such_op", std::vector<Var>{x}), UnknownOpError);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Prng rng(4);
  const Var x = tape.input(random_normal({2, 3}, rng));
  tape.backward(ad::sum(x));
  EXPECT_EQ(tape.grad(x), Tensor::ones({2, 3}));
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  Tape tape;
  Prng rng(5);
  const Tensor xv = random_normal({4}, rng);
  const Var x = tape.input(xv);
  tape.backward(ad::sum(ad::mul(x, x)));
  EXPECT_EQ(tape.grad(x), scale(xv, 2.0));
}

TEST(Backward, UnusedParameterKeepsZeroGrad) {
  Parameter p("p", Tensor::ones({3}));
  p.zero_grad();
  Tape tape;
  (void)tape.param(p);
  const Var x = tape.input(Tensor::ones({2}));
  tape.backward(ad::sum(x));
  EXPECT_EQ(p.grad, Tensor::zeros({3}));
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  const Var x = tape.input(Tensor::ones({2}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, VisitsEachNodeOnce) {
  Tape tape;
  Prng rng(6);
  const Var a = tape.input(random_normal({2, 2}, rng));
  const Var b = ad::relu(a);
  tape.backward(ad::sum(ad::add(b, b)));
  EXPECT_LE(tape.backward_visits(), tape.size());
}

TEST(Backward, LinearInTheLoss) {
  Prng rng(7);
  const Tensor av = random_normal({3, 3}, rng), bv = random_normal({3, 3}, rng);
  auto grad_of = [&](int which) {
    Tape tape;
    const Var a = tape.input(av);
    const Var b = tape.constant(bv);
    const Var l1 = ad::sum(ad::mul(ad::matmul(a, b), ad::matmul(a, b)));
    const Var l2 = ad::sum(ad::relu(ad::matmul(b, a)));
    tape.backward(which == 0 ? l1 : which == 1 ? l2 : ad::add(l1, l2));
    return tape.grad(a);
  };
  EXPECT_LE(max_abs_diff(add(grad_of(0), grad_of(1)), grad_of(2)), 1e-12);
}

TEST(Backward, RepeatedBackwardIsIdentical) {
  Prng rng(8);
  Tape tape;
  const Var a = tape.input(random_normal({3, 3}, rng));
  const Var loss = ad::sum(ad::relu(ad::matmul(a, a)));
  tape.backward(loss);
  const Tensor first = tape.grad(a);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(a), first);
}

TEST(GradCheck, ReluAwayFromKink) {
  Prng rng(9);
  Tensor x = random_normal({3, 4}, rng);
  for (double& v : x.data()) v += v >= 0 ? 0.1 : -0.1;
  const GradCheckReport r = grad_check(ad::core_registry(), "relu", {x});
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(GradCheck, Matmul) {
  Prng rng(10);
  const GradCheckReport r =
      grad_check(ad::core_registry(), "matmul", {random_normal({3, 4}, rng), random_normal({4, 2}, rng)});
  EXPECT_TRUE(r.pass) << r.max_rel_err;
  EXPECT_EQ(r.inputs.size(), 2u);
}

TEST(GradCheck, InvolutionComposition) {
  // B=1, C=8, H=W=5, K=3, G=2, r=2.
  Prng rng(11);
  const std::vector<Tensor> inputs{random_normal({1, 8, 5, 5}, rng), random_normal({4, 8}, rng),
                                   random_normal({4}, rng),          random_normal({4}, rng),
                                   random_normal({18, 4}, rng),      random_normal({18}, rng)};
  const GradCheckReport r = grad_check(nn::registry(), "involution", inputs, {{"kernel", 3}, {"groups", 2}});
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(GradCheck, EpsOutOfRangeThrows) {
  GradCheckOptions o;
  o.eps = 1e-2;
  EXPECT_THROW(grad_check(ad::core_registry(), "relu", {Tensor::ones({2})}, {}, o), std::invalid_argument);
}

TEST(GradCheck, CatchesAWrongRule) {
  OpRegistry reg;
  reg.add({"bad_square", {"x"}, [](Tape& tape, std::span<const Var> in, const Attrs&) {
             const Tensor x = in[0].value();
             return tape.record("bad_square", {in[0]}, mul(x, x), [x](const Tensor& g, std::span<const bool>) {
               return std::vector<Tensor>{mul(g, x)};  // missing factor 2
             });
           }});
  Prng rng(12);
  EXPECT_FALSE(grad_check(reg, "bad_square", {random_normal({3}, rng)}).pass);
}
