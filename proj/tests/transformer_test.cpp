#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "facaid/transformer.hpp"

using namespace facaid;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v(100);
  return v;
}

ModelConfig tiny(int dim = 16, int layers = 1) {
  ModelConfig c = desk_config(vocab());
  c.embed_dim = dim;
  c.enc_layers = layers;
  c.dec_layers = layers;
  c.heads = 2;
  c.ff_mult = 2;
  c.dropout = 0.0;
  return c;
}

Example example(std::uint64_t i, std::uint64_t master = 5) { return make_example(generate_record(master, i), vocab()); }

TokenSeq prefix_of(const TokenSeq& s, std::size_t n) {
  TokenSeq p;
  for (std::size_t i = 0; i < n; ++i) p.push(s.tokens[i], s.local_pos[i]);
  return p;
}

}  // namespace

TEST(Transformer, EncodeShapeAndDeterminism) {
  Model m(tiny(32, 2), 1);
  RectLayout l;
  for (int i = 0; i < 7; ++i) l.rects.push_back({TerminalLabel::Window, 0.1 * i, 0.2, 0.1, 0.3});
  auto in = encode_layout(l, vocab());
  ASSERT_EQ(in.size(), 35u);
  auto e = m.encode(in);
  EXPECT_EQ(e.rows(), 35);
  EXPECT_EQ(e.cols(), 32);
  EXPECT_EQ(m.encode(in), e);
  auto swapped = l;
  std::swap(swapped.rects[0], swapped.rects[5]);
  EXPECT_EQ(m.encode(encode_layout(swapped, vocab())), e);
}

TEST(Transformer, LengthLimits) {
  auto c = tiny();
  c.max_input = 10;
  Model m(c, 1);
  RectLayout l;
  for (int i = 0; i < 3; ++i) l.rects.push_back({TerminalLabel::Wall, 0, 0, 1, 1});
  try {
    m.encode(encode_layout(l, vocab()));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthExceeded);
  }
  EXPECT_THROW(m.decode_logits(m.encode(prefix_of(encode_layout(l, vocab()), 5)), TokenSeq{}), Error);
}

TEST(Transformer, SoftmaxNormalizedAndCausal) {
  Model m(tiny(32, 2), 2);
  auto ex = example(3);
  auto mem = m.encode(ex.input);
  auto full = m.decode_logits(mem, prefix_of(ex.output, 9));
  auto short_ = m.decode_logits(mem, prefix_of(ex.output, 4));
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index k = 0; k < full.cols(); ++k) EXPECT_NEAR(full(i, k), short_(i, k), 1e-5);
  auto row = m.decode_step(mem, prefix_of(ex.output, 4));
  double sum = 0;
  const double mx = row.maxCoeff();
  for (Eigen::Index k = 0; k < row.cols(); ++k) sum += std::exp(row(k) - mx);
  double total = 0;
  for (Eigen::Index k = 0; k < row.cols(); ++k) total += std::exp(row(k) - mx) / sum;
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_EQ(row.cols(), vocab().size());
}

TEST(Transformer, SessionMatchesFullDecode) {
  Model m(tiny(32, 2), 3);
  auto ex = example(8);
  auto mem = m.encode(ex.input);
  auto full = m.decode_logits(mem, prefix_of(ex.output, ex.output.size() - 1));
  Model::Session s(m, mem);
  for (std::size_t i = 0; i + 1 < ex.output.size(); ++i) {
    auto row = s.step(ex.output.tokens[i], ex.output.local_pos[i]);
    for (Eigen::Index k = 0; k < row.cols(); ++k)
      ASSERT_NEAR(row(k), full(static_cast<Eigen::Index>(i), k), 1e-4) << i;
  }
}

TEST(Transformer, GradientCheck) {
  auto cfg = tiny(16, 1);
  SeqModel<double> m = Model(cfg, 11).cast<double>();
  // Larger weights than the default init make every path contribute.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : m.parameters())
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] += n(rng);
  auto ex = example(2);
  auto grads = m.zero_grads();
  m.forward_backward(ex, &grads);

  std::vector<std::pair<std::size_t, Eigen::Index>> live;
  for (std::size_t i = 0; i < grads.g.size(); ++i)
    for (Eigen::Index k = 0; k < grads.g[i].size(); ++k)
      if (std::abs(grads.g[i].data()[k]) > 1e-6) live.emplace_back(i, k);
  ASSERT_GT(live.size(), 1000u);
  std::shuffle(live.begin(), live.end(), rng);
  const double h = 1e-5;
  for (int c = 0; c < 20; ++c) {
    const auto [i, k] = live[static_cast<std::size_t>(c)];
    double& w = m.parameters()[i].data()[k];
    const double orig = w;
    w = orig + h;
    const double up = m.forward_backward(ex, nullptr).loss_sum;
    w = orig - h;
    const double down = m.forward_backward(ex, nullptr).loss_sum;
    w = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads.g[i].data()[k];
    EXPECT_LT(std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic)), 1e-3)
        << m.parameter_names()[i] << "[" << k << "] analytic " << analytic << " numeric " << numeric;
  }
}

TEST(Transformer, UntrainedNllNearUniform) {
  Model m(tiny(32, 2), 5);
  std::vector<Example> data;
  for (std::uint64_t i = 0; i < 10; ++i) data.push_back(example(i));
  auto r = nll(m, data, vocab());
  const double lnv = std::log(static_cast<double>(vocab().size()));
  EXPECT_NEAR(r.unmasked, lnv, 0.1 * lnv);
  EXPECT_LE(r.masked, r.unmasked);
  for (const auto& ex : data) {
    auto one = nll(m, {ex}, vocab());
    EXPECT_LE(one.masked, one.unmasked);
  }
}

TEST(Transformer, MemorizesOneSample) {
  auto cfg = tiny(32, 1);
  Model m(cfg, 6);
  std::vector<Example> data{example(1)};
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.batch_size = 1;
  tc.epochs = 200;
  tc.validation_fraction = 0;
  tc.patience = 1000;
  auto report = train(m, data, tc);
  EXPECT_EQ(report.epochs.size(), 200u);
  EXPECT_LT(mean_loss(m, data), 0.01);
  EXPECT_LT(nll(m, data, vocab()).unmasked, 0.01);
}

TEST(Transformer, TrainingIsSeedDeterministic) {
  std::vector<Example> data;
  for (std::uint64_t i = 0; i < 12; ++i) data.push_back(example(i));
  auto cfg = tiny(16, 1);
  cfg.dropout = 0.1;
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.epochs = 2;
  tc.seed = 9;
  Model a(cfg, 1), b(cfg, 1);
  auto ra = train(a, data, tc);
  auto rb = train(b, data, tc);
  EXPECT_EQ(ra.epochs[1].validation_loss, rb.epochs[1].validation_loss);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_EQ(ra.validation_size, 1u);
}

TEST(Transformer, TimeBudgetStopsBetweenEpochs) {
  std::vector<Example> data;
  for (std::uint64_t i = 0; i < 6; ++i) data.push_back(example(i));
  Model m(tiny(), 2);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.epochs = 5;
  tc.time_budget = 1e-6;
  auto r = train(m, data, tc);
  EXPECT_EQ(r.epochs.size(), 1u);
  EXPECT_TRUE(r.out_of_time);
  EXPECT_GE(r.seconds, r.epochs[0].seconds);
  tc.time_budget = 0;
  EXPECT_EQ(train(m, data, tc).epochs.size(), 5u);
  tc.time_budget = -1;
  EXPECT_THROW(train(m, data, tc), Error);
}

TEST(Transformer, LearningRateSchedule) {
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.warmup_steps = 10;
  EXPECT_DOUBLE_EQ(learning_rate_at(tc, 5, 110), 5e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(tc, 10, 110), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate_at(tc, 110, 110), 1e-3);
  tc.cosine_decay = true;
  EXPECT_DOUBLE_EQ(learning_rate_at(tc, 10, 110), 1e-3);
  EXPECT_NEAR(learning_rate_at(tc, 60, 110), 1e-3 * (0.1 + 0.9 * 0.5), 1e-15);
  EXPECT_NEAR(learning_rate_at(tc, 110, 110), 1e-4, 1e-15);
  for (long s = 11; s <= 110; ++s) EXPECT_LT(learning_rate_at(tc, s, 110), learning_rate_at(tc, s - 1, 110));
  tc.min_lr_fraction = 2;
  EXPECT_THROW(tc.validate(), Error);
}

TEST(Transformer, DefaultsAndErrors) {
  TrainConfig tc;
  EXPECT_EQ(tc.batch_size, 32);
  EXPECT_EQ(tc.learning_rate, 1e-5);
  EXPECT_EQ(tc.weight_decay, 0.01);
  EXPECT_EQ(tc.patience, 5);
  auto c = desk_config(vocab());
  EXPECT_EQ(c.embed_dim, 256);
  EXPECT_EQ(c.enc_layers, c.dec_layers);
  EXPECT_EQ(c.heads, 8);
  c.heads = 7;
  EXPECT_THROW(Model(c, 0), Error);

  Model m(tiny(), 1);
  EXPECT_THROW(train(m, {}, tc), Error);
  tc.learning_rate = 1e30;
  tc.batch_size = 1;
  tc.clip_norm = 0;
  tc.validation_fraction = 0;
  try {
    train(m, {example(1)}, tc);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.code(), ErrorCode::Divergence);
  }
}

TEST(Checkpoint, RoundTripAndCorruption) {
  Model m(tiny(16, 1), 12);
  std::stringstream buf;
  save_checkpoint(buf, m, vocab());
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 8), "FACAIDCK");
  std::istringstream in(bytes);
  auto back = load_checkpoint(in);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.parameters(), m.parameters());

  auto expect_fail = [](std::string b) {
    std::istringstream s(b);
    try {
      load_checkpoint(s);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::CheckpointLoadFailure);
    }
  };
  expect_fail(bytes.substr(0, bytes.size() - 3));
  expect_fail("NOTACKPT" + bytes.substr(8));
  auto other = bytes;
  const auto pos = other.find("\"grammar_hash\":\"") + 16;
  other[pos] = other[pos] == '0' ? '1' : '0';
  expect_fail(other);
}
