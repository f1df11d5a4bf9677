#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "ditherlab/policy.hpp"
#include "oracles.hpp"

using namespace ditherlab;
using Catch::Approx;

namespace {

ParamTable random_bandit(int prompts, int outputs, std::uint64_t seed, double scale = 1.0) {
  ParamTable pt = ParamTable::sequence_bandit(prompts, outputs);
  rng::Engine eng(seed);
  for (auto& v : pt.values) v = rng::uniform_range(eng, -scale, scale);
  return pt;
}

ParamTable random_ar(int prompts, int seq_len, int vocab, bool markov, std::uint64_t seed,
                     double scale = 1.0) {
  ParamTable pt = ParamTable::autoregressive(prompts, seq_len, vocab, markov);
  rng::Engine eng(seed);
  for (auto& v : pt.values) v = rng::uniform_range(eng, -scale, scale);
  return pt;
}

}  // namespace

TEST_CASE("logprob: uniform policies have closed-form values") {
  const ParamTable bandit = ParamTable::sequence_bandit(1, 4);
  int y = 2;
  CHECK(logprob(bandit, 0, std::span<const int>(&y, 1)) == Approx(std::log(0.25)).epsilon(1e-12));

  const ParamTable ar = ParamTable::autoregressive(1, 2, 3);
  const std::vector<int> o = {1, 2};
  CHECK(logprob(ar, 0, o) == Approx(std::log(1.0 / 9.0)).epsilon(1e-12));
}

TEST_CASE("logprob matches direct softmax arithmetic") {
  ParamTable pt = ParamTable::sequence_bandit(1, 4);
  pt.row(0)[0] = 2.0;
  int y = 0;
  const double want = static_cast<double>(std::log(oracles::naive_output_prob(pt, 0, std::span<const int>(&y, 1))));
  CHECK(logprob(pt, 0, std::span<const int>(&y, 1)) == Approx(want).epsilon(1e-12));

  const ParamTable ar = random_ar(2, 3, 4, true, 17);
  const std::vector<int> o = {3, 0, 2};
  const double want_ar = static_cast<double>(std::log(oracles::naive_output_prob(ar, 1, o)));
  CHECK(logprob(ar, 1, o) == Approx(want_ar).epsilon(1e-12));
}

TEST_CASE("logprob rejects invalid inputs") {
  const ParamTable bandit = ParamTable::sequence_bandit(2, 4);
  int y = 5;
  CHECK_THROWS_AS(logprob(bandit, 0, std::span<const int>(&y, 1)), InputError);
  y = 0;
  CHECK_THROWS_AS(logprob(bandit, 7, std::span<const int>(&y, 1)), InputError);

  const ParamTable ar = ParamTable::autoregressive(1, 3, 4);
  const std::vector<int> short_o = {1, 2};
  CHECK_THROWS_AS(logprob(ar, 0, short_o), InputError);
  const std::vector<int> bad_tok = {1, 2, 9};
  CHECK_THROWS_AS(logprob(ar, 0, bad_tok), InputError);
}

TEST_CASE("logprob is never positive") {
  const ParamTable pt = random_bandit(3, 6, 5, 4.0);
  for (int x = 0; x < 3; ++x) {
    for (int y = 0; y < 6; ++y) {
      CHECK(logprob(pt, x, std::span<const int>(&y, 1)) <= 0.0);
    }
  }
}

TEST_CASE("softmax rows normalize to 1") {
  const ParamTable pt = random_ar(2, 2, 8, false, 23, 6.0);
  for (int r = 0; r < pt.rows(); ++r) {
    double sum = 0.0;
    for (double p : softmax(pt.row(r))) sum += p;
    CHECK(sum == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("sample_group: deterministic given the seed, G >= 2 enforced") {
  const ParamTable pt = random_ar(2, 3, 5, false, 11);
  rng::Engine a(42), b(42);
  const auto ga = sample_group(pt, 1, 6, a);
  const auto gb = sample_group(pt, 1, 6, b);
  REQUIRE(ga.size() == gb.size());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    CHECK(ga[i].output == gb[i].output);
    CHECK(ga[i].logprob_current == gb[i].logprob_current);
    CHECK(ga[i].logprob_old == gb[i].logprob_current);
  }
  rng::Engine c(1);
  CHECK_THROWS_AS(sample_group(pt, 0, 1, c), ConfigError);
}

TEST_CASE("sample_group: uniform frequencies within 1%") {
  const ParamTable pt = ParamTable::sequence_bandit(1, 4);
  rng::Engine eng(2024);
  std::vector<long> counts(4, 0);
  const int groups = 100000;
  for (int i = 0; i < groups; ++i) {
    for (const auto& tr : sample_group(pt, 0, 4, eng)) ++counts[static_cast<std::size_t>(tr.output[0])];
  }
  const double total = 4.0 * groups;
  for (long c : counts) CHECK(static_cast<double>(c) / total == Approx(0.25).margin(0.01));
}

TEST_CASE("sample_group: a dominant logit wins nearly always") {
  ParamTable pt = ParamTable::sequence_bandit(1, 4);
  pt.row(0)[0] = 10.0;
  // P(all 8 samples are output 0) = softmax(10 vs 0,0,0)^8 ~= 0.9989.
  rng::Engine eng(7);
  int all_zero = 0;
  const int trials = 2000;
  for (int i = 0; i < trials; ++i) {
    const auto g = sample_group(pt, 0, 8, eng);
    bool all = true;
    for (const auto& tr : g) all = all && tr.output[0] == 0;
    if (all) ++all_zero;
  }
  CHECK(static_cast<double>(all_zero) / trials > 0.99);
}

TEST_CASE("sample_group: chi-square test does not reject the softmax law") {
  SECTION("bandit") {
    const ParamTable pt = random_bandit(1, 4, 31);
    const std::vector<double> probs = softmax(pt.row(0));
    rng::Engine eng(8);
    std::vector<long> counts(4, 0);
    const int n = 100000;
    for (int i = 0; i < n / 2; ++i) {
      for (const auto& tr : sample_group(pt, 0, 2, eng)) ++counts[static_cast<std::size_t>(tr.output[0])];
    }
    double chi2 = 0.0;
    for (int y = 0; y < 4; ++y) {
      const double expected = n * probs[static_cast<std::size_t>(y)];
      chi2 += (counts[static_cast<std::size_t>(y)] - expected) * (counts[static_cast<std::size_t>(y)] - expected) / expected;
    }
    CHECK(chi2 < oracles::kChiSq999Df3);
  }
  SECTION("autoregressive over the joint output space") {
    const ParamTable pt = random_ar(1, 2, 3, false, 13);
    std::vector<double> probs;
    oracles::naive_enumerate(pt, 0, [&](const std::vector<int>&, long double p) {
      probs.push_back(static_cast<double>(p));
    });
    rng::Engine eng(9);
    std::vector<long> counts(9, 0);
    const int n = 100000;
    for (int i = 0; i < n / 2; ++i) {
      for (const auto& tr : sample_group(pt, 0, 2, eng)) {
        ++counts[static_cast<std::size_t>(tr.output[0] * 3 + tr.output[1])];
      }
    }
    double chi2 = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
      const double expected = n * probs[k];
      chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
    }
    CHECK(chi2 < oracles::kChiSq999Df8);
  }
}

TEST_CASE("grad_logprob: closed form on the uniform bandit") {
  const ParamTable pt = ParamTable::sequence_bandit(1, 4);
  int y = 0;
  const GradVector g = grad_logprob(pt, 0, std::span<const int>(&y, 1));
  CHECK(g.values[0] == Approx(0.75).margin(1e-12));
  for (int j = 1; j < 4; ++j) CHECK(g.values[static_cast<std::size_t>(j)] == Approx(-0.25).margin(1e-12));
}

TEST_CASE("grad_logprob: per-context rows sum to zero") {
  const ParamTable tables[] = {random_bandit(3, 5, 41), random_ar(2, 3, 4, false, 42),
                               random_ar(2, 3, 4, true, 43)};
  for (const ParamTable& pt : tables) {
    rng::Engine eng(55);
    for (int rep = 0; rep < 20; ++rep) {
      const int x = static_cast<int>(rng::uniform01(eng) * pt.prompts);
      const auto group = sample_group(pt, x, 2, eng);
      const GradVector g = grad_logprob(pt, x, group[0].output);
      for (int r = 0; r < pt.rows(); ++r) {
        double row_sum = 0.0;
        bool touched = false;
        for (int j = 0; j < pt.row_size(r); ++j) {
          const double v = g.values[static_cast<std::size_t>(pt.row_offsets[r] + j)];
          row_sum += v;
          touched = touched || v != 0.0;
        }
        CHECK(std::abs(row_sum) < 1e-9);
        (void)touched;
      }
    }
  }
}

TEST_CASE("grad_logprob matches central finite differences") {
  ParamTable tables[] = {random_bandit(2, 4, 101), random_ar(2, 2, 4, false, 102),
                         random_ar(1, 3, 3, true, 103)};
  for (ParamTable& pt : tables) {
    rng::Engine eng(7);
    const int x = pt.prompts - 1;
    const auto group = sample_group(pt, x, 2, eng);
    const std::vector<int> o = group[1].output;
    const GradVector g = grad_logprob(pt, x, o);
    const std::vector<double> fd = oracles::central_difference(
        pt, [&] { return logprob(pt, x, o); }, 1e-5);
    CHECK(oracles::max_relative_error(g.values, fd) < 1e-5);
  }
}

TEST_CASE("score-function expectation is zero") {
  const ParamTable pt = random_bandit(1, 5, 77);
  rng::Engine eng(3);
  const long n = 100000;
  std::vector<double> sum(pt.values.size(), 0.0), sumsq(pt.values.size(), 0.0);
  for (long i = 0; i < n / 2; ++i) {
    for (const auto& tr : sample_group(pt, 0, 2, eng)) {
      const GradVector g = grad_logprob(pt, 0, tr.output);
      for (std::size_t j = 0; j < g.values.size(); ++j) {
        sum[j] += g.values[j];
        sumsq[j] += g.values[j] * g.values[j];
      }
    }
  }
  double mean_normsq = 0.0, se_bound_sq = 0.0;
  for (std::size_t j = 0; j < sum.size(); ++j) {
    const double mean = sum[j] / n;
    mean_normsq += mean * mean;
    se_bound_sq += (sumsq[j] / n - mean * mean) / n;
  }
  CHECK(std::sqrt(mean_normsq) < 5.0 * std::sqrt(se_bound_sq));
}

TEST_CASE("expected_reward: exact enumeration") {
  SECTION("uniform bandit with a single rewarded output") {
    const ParamTable pt = ParamTable::sequence_bandit(1, 4);
    const double v = expected_reward(pt, 0, [](std::span<const int> o) { return o[0] == 1 ? 1.0 : 0.0; });
    CHECK(v == Approx(0.25).margin(1e-12));
  }
  SECTION("skewed bandit against the naive oracle") {
    ParamTable pt = ParamTable::sequence_bandit(1, 4);
    pt.row(0)[0] = 2.0;
    const double want = static_cast<double>(oracles::naive_softmax_prob(pt.row(0), 0));
    const double v = expected_reward(pt, 0, [](std::span<const int> o) { return o[0] == 0 ? 1.0 : 0.0; });
    CHECK(v == Approx(want).epsilon(1e-12));
  }
  SECTION("zero reward function") {
    const ParamTable pt = random_ar(1, 2, 5, false, 3);
    CHECK(expected_reward(pt, 0, [](std::span<const int>) { return 0.0; }) == 0.0);
  }
  SECTION("autoregressive expectation against the naive oracle") {
    const ParamTable pt = random_ar(1, 3, 3, true, 19);
    auto reward = [](std::span<const int> o) { return static_cast<double>(o[0] + o[2]); };
    long double want = 0.0L;
    oracles::naive_enumerate(pt, 0, [&](const std::vector<int>& o, long double p) {
      want += p * reward(o);
    });
    CHECK(expected_reward(pt, 0, reward) == Approx(static_cast<double>(want)).epsilon(1e-10));
  }
}

TEST_CASE("expected_reward: capacity error past the enumeration cap") {
  const ParamTable pt = ParamTable::autoregressive(1, 8, 8);  // 8^8 ~ 1.7e7 outputs
  CHECK_THROWS_AS(expected_reward(pt, 0, [](std::span<const int>) { return 1.0; }), CapacityError);
  CHECK_THROWS_WITH(expected_reward(pt, 0, [](std::span<const int>) { return 1.0; }),
                    Catch::Matchers::ContainsSubstring("mc_expected_reward"));
}

TEST_CASE("mc_expected_reward agrees with the exact expectation") {
  const ParamTable pt = random_bandit(1, 6, 4);
  auto reward = [](std::span<const int> o) { return static_cast<double>(o[0]); };
  const double exact = expected_reward(pt, 0, reward);
  rng::Engine eng(12);
  const McEstimate est = mc_expected_reward(pt, 0, reward, 50000, eng);
  CHECK(std::abs(est.mean - exact) < 4.0 * est.standard_error);
  CHECK(est.samples == 100000);
}

TEST_CASE("kl_divergence: zero on itself, exact on a two-point case") {
  const ParamTable pt = random_bandit(1, 4, 6);
  CHECK(kl_divergence(pt, pt, 0) == 0.0);

  ParamTable p = ParamTable::sequence_bandit(1, 2);   // probs (0.5, 0.5)
  ParamTable q = ParamTable::sequence_bandit(1, 2);   // probs (0.25, 0.75)
  q.row(0)[1] = std::log(3.0);
  const double want = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(kl_divergence(p, q, 0) == Approx(want).epsilon(1e-12));
  CHECK(want == Approx(0.143841).margin(5e-7));
}

TEST_CASE("kl_divergence: nonnegative on random pairs") {
  rng::Engine eng(99);
  for (int rep = 0; rep < 1000; ++rep) {
    ParamTable p = ParamTable::sequence_bandit(1, 3);
    ParamTable q = ParamTable::sequence_bandit(1, 3);
    for (auto& v : p.values) v = rng::uniform_range(eng, -3.0, 3.0);
    for (auto& v : q.values) v = rng::uniform_range(eng, -3.0, 3.0);
    CHECK(kl_divergence(p, q, 0) >= 0.0);
  }
  for (int rep = 0; rep < 50; ++rep) {
    const ParamTable p = random_ar(1, 2, 4, true, 1000 + static_cast<std::uint64_t>(rep));
    const ParamTable q = random_ar(1, 2, 4, true, 2000 + static_cast<std::uint64_t>(rep));
    CHECK(kl_divergence(p, q, 0) >= 0.0);
  }
}

TEST_CASE("kl_divergence: markov enumeration agrees with the naive oracle") {
  const ParamTable p = random_ar(1, 3, 3, true, 301);
  const ParamTable q = random_ar(1, 3, 3, true, 302);
  long double want = 0.0L;
  oracles::naive_enumerate(p, 0, [&](const std::vector<int>& o, long double pp) {
    want += pp * (logl(pp) - logl(oracles::naive_output_prob(q, 0, o)));
  });
  CHECK(kl_divergence(p, q, 0) == Approx(static_cast<double>(want)).epsilon(1e-9));
}

TEST_CASE("kl_divergence: shape mismatch is an input error") {
  const ParamTable p = ParamTable::sequence_bandit(1, 4);
  const ParamTable q = ParamTable::sequence_bandit(1, 5);
  CHECK_THROWS_AS(kl_divergence(p, q, 0), InputError);
}

TEST_CASE("param table serialization round-trips bit-exactly") {
  ParamTable pt = random_ar(2, 2, 3, true, 404, 5.0);
  pt.values[0] = 1e-300;
  pt.values[1] = -1.7e308;
  pt.values[2] = -0.0;
  pt.values[3] = 0.1;
  const std::string text = to_json(pt).dump();
  const ParamTable back = param_table_from_json(nlohmann::json::parse(text));
  REQUIRE(back.values.size() == pt.values.size());
  CHECK(std::memcmp(back.values.data(), pt.values.data(), pt.values.size() * sizeof(double)) == 0);
  CHECK(back.same_shape(pt));

  ParamTable ragged = ParamTable::sequence_bandit(std::vector<int>{2, 5, 3});
  rng::Engine eng(1);
  for (auto& v : ragged.values) v = rng::gaussian(eng);
  const ParamTable ragged_back = param_table_from_json(to_json(ragged));
  CHECK(ragged_back.same_shape(ragged));
  CHECK(std::memcmp(ragged_back.values.data(), ragged.values.data(),
                    ragged.values.size() * sizeof(double)) == 0);
}

TEST_CASE("param table validation") {
  CHECK_THROWS_AS(ParamTable::sequence_bandit(0, 4), ConfigError);
  CHECK_THROWS_AS(ParamTable::autoregressive(1, 0, 4), ConfigError);
  ParamTable pt = ParamTable::sequence_bandit(1, 2);
  pt.values[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(pt.validate(), ConfigError);
}
