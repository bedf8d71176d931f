#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "roadseg/checkpoint.hpp"
#include "roadseg/layers.hpp"
#include "roadseg/optim.hpp"

namespace roadseg::ag {
namespace {

// Textbook Adam on one scalar, written out independently of adam_step.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double update(double x, double g, const AdamConfig& c) {
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    return x - c.lr * mh / (std::sqrt(vh) + c.eps);
  }
};

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter p("w", Tensor::from({1.0, -2.0}));
  p.grad = Tensor::from({3.0, -0.5});
  AdamState st(AdamConfig{0.01});
  Parameter* ps[] = {&p};
  adam_step(ps, st);
  EXPECT_NEAR(p.value[0], 0.99, 1e-9);
  EXPECT_NEAR(p.value[1], -1.99, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Parameter p("w", Tensor::from({0.5}));
  AdamState st;
  Parameter* ps[] = {&p};
  for (int i = 0; i < 3; ++i) adam_step(ps, st);
  EXPECT_EQ(p.value[0], 0.5);
}

TEST(Adam, MatchesScalarReference) {
  AdamConfig cfg{0.05, 0.8, 0.95, 1e-8};
  Parameter p("w", Tensor::from({0.3}));
  AdamState st(cfg);
  ScalarAdam ref;
  double x = 0.3;
  Parameter* ps[] = {&p};
  for (double g : {0.7, -0.2, 1.5, 0.0, -3.0}) {
    p.grad = Tensor::from({g});
    adam_step(ps, st);
    x = ref.update(x, g, cfg);
    EXPECT_NEAR(p.value[0], x, 1e-14);
  }
}

TEST(Adam, MinimizesQuadratic) {
  Parameter p("x", Tensor::from({0.0}));
  AdamState st(AdamConfig{0.1});
  Parameter* ps[] = {&p};
  for (int i = 0; i < 500; ++i) {
    zero_grad(ps);
    Tape t;
    Var d = add_scalar(t.parameter(p), -2.0);
    t.backward(sum(mul(d, d)));
    adam_step(ps, st);
  }
  EXPECT_NEAR(p.value[0], 2.0, 1e-3);
}

TEST(Adam, ParameterShapeChangeThrows) {
  Parameter p("w", Tensor::from({1.0}));
  p.grad = Tensor::from({1.0});
  AdamState st;
  Parameter* ps[] = {&p};
  adam_step(ps, st);
  p = Parameter("w", Tensor::from({1.0, 2.0}));
  EXPECT_THROW(adam_step(ps, st), DimensionError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::vector<NamedTensor> in = {{"a", Tensor::from({1.0, -0.0, 1e-300, 3.141592653589793})},
                                 {"layer.kernel", Tensor({2, 1, 3}, 0.25)},
                                 {"", Tensor::scalar(7)}};
  const auto path = std::filesystem::temp_directory_path() / "roadseg_ckpt_roundtrip.bin";
  save_checkpoint(path, in);
  auto out = load_checkpoint(path);
  std::filesystem::remove(path);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].name, in[i].name);
    EXPECT_EQ(out[i].tensor, in[i].tensor);
  }
  EXPECT_TRUE(std::signbit(out[0].tensor[1]));
}

TEST(Checkpoint, HeaderLayout) {
  auto bytes = encode_checkpoint({{"ab", Tensor::from({1.0})}});
  // magic 4 + version 4 + count 4 + name_len 4 + name 2 + rank 4 + dim 8 + value 8
  ASSERT_EQ(bytes.size(), 38u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RSKT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 'a');
  EXPECT_EQ(bytes[18], 1);
  EXPECT_EQ(bytes[22], 1);
  // 1.0 = 0x3FF0000000000000, little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[37]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[36]), 0xF0);
}

TEST(Checkpoint, RejectsBadMagic) {
  auto bytes = encode_checkpoint({});
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, RejectsOtherVersion) {
  auto bytes = encode_checkpoint({});
  bytes[4] = 2;
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, RejectsTruncationAndTrailingBytes) {
  auto bytes = encode_checkpoint({{"w", Tensor::from({1, 2, 3})}});
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(decode_checkpoint(cut), CheckpointError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), CheckpointError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), CheckpointError);
}

Sequential small_net(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sequential s;
  s.add<Conv2d>("c1", 1, 2, 3, 1, 1, true, rng);
  s.add<BatchNorm2d>("bn", 2);
  s.add<ReLU>();
  s.add<Flatten>();
  s.add<Dense>("fc", 2 * 4 * 4, 1, rng);
  return s;
}

TEST(Sequential, StateDictRoundTripThroughCheckpoint) {
  auto a = small_net(1);
  Tensor x({2, 1, 4, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(static_cast<double>(i));
  a.predict(x, Mode::kTrain);
  auto b = small_net(2);
  EXPECT_NE(a.predict(x), b.predict(x));
  b.load_state_dict(decode_checkpoint(encode_checkpoint(a.state_dict())));
  EXPECT_EQ(a.predict(x), b.predict(x));
}

TEST(Sequential, StateDictNames) {
  auto a = small_net(1);
  std::vector<std::string> names;
  for (const auto& nt : a.state_dict()) names.push_back(nt.name);
  const std::vector<std::string> want = {"c1.kernel", "c1.bias", "bn.gamma", "bn.beta",
                                         "fc.weight", "fc.bias", "bn.running_mean", "bn.running_var"};
  EXPECT_EQ(names, want);
}

TEST(Sequential, LoadStateRejectsMissingAndMismatched) {
  auto a = small_net(1);
  auto state = a.state_dict();
  auto missing = state;
  missing.pop_back();
  EXPECT_THROW(a.load_state_dict(missing), CheckpointError);
  auto wrong = state;
  wrong[0].tensor = Tensor({1});
  EXPECT_THROW(a.load_state_dict(wrong), CheckpointError);
}

TEST(Sequential, ParameterCount) {
  auto a = small_net(1);
  EXPECT_EQ(a.parameter_count(), 2u * 9 + 2 + 2 + 2 + 32 + 1);
}

TEST(Sequential, TrainModeUpdatesRunningStatsEvalDoesNot) {
  auto a = small_net(1);
  Tensor x({2, 1, 4, 4}, 1.0);
  x[3] = 5.0;
  a.predict(x, Mode::kEval);
  auto before = a.state_dict();
  EXPECT_EQ(before.back().tensor, Tensor({2}, 1.0));
  a.predict(x, Mode::kTrain);
  EXPECT_NE(a.state_dict().back().tensor, before.back().tensor);
}

TEST(Layers, InitUniformBound) {
  std::mt19937_64 rng(3);
  Tensor w = init_uniform({1000}, 25, rng);
  for (double v : w.data()) EXPECT_LE(std::abs(v), 0.2);
}

TEST(Layers, FrozenContextBindsConstants) {
  auto a = small_net(1);
  Tape t;
  ForwardContext ctx{t, Mode::kEval, false};
  Var y = a.forward(t.constant(Tensor({1, 1, 4, 4}, 0.5)), ctx);
  EXPECT_FALSE(y.requires_grad());
}

}  // namespace
}  // namespace roadseg::ag
