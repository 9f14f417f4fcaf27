#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ahn/attention.hpp"
#include "ahn/gradcheck.hpp"
#include "test_util.hpp"

using namespace ahn;
using ahn_test::randm;

using D = double;
using MatD = Mat<D>;

namespace {

AttentionConfig toy_cfg(int sinks = 2, int window = 3) {
  AttentionConfig c;
  c.n_q_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 4;
  c.sinks = sinks;
  c.window = window;
  return c;
}

// independent reference: per-head loops, logsumexp-form softmax
MatD naive_attend(const MatD& q, const MatD& k, const MatD& v, const Mask& mask,
                  const AttentionConfig& cfg) {
  const int H = cfg.head_dim;
  MatD y = MatD::Zero(q.rows(), q.cols());
  for (int h = 0; h < cfg.n_q_heads; ++h) {
    const int kvh = h / cfg.group();
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      double lse = -std::numeric_limits<double>::infinity();
      std::vector<double> s(static_cast<std::size_t>(k.rows()),
                            -std::numeric_limits<double>::infinity());
      for (Eigen::Index j = 0; j < k.rows(); ++j) {
        if (!mask(i, j)) continue;
        double dot = 0;
        for (int d = 0; d < H; ++d)
          dot += q(i, h * H + d) * k(j, kvh * H + d);
        s[static_cast<std::size_t>(j)] = dot / std::sqrt(double(H));
      }
      for (double sv : s)
        if (std::isfinite(sv)) lse = std::max(lse, sv);
      double z = 0;
      for (double sv : s)
        if (std::isfinite(sv)) z += std::exp(sv - lse);
      for (Eigen::Index j = 0; j < k.rows(); ++j) {
        if (!mask(i, j)) continue;
        const double p = std::exp(s[static_cast<std::size_t>(j)] - lse) / z;
        for (int d = 0; d < H; ++d) y(i, h * H + d) += p * v(j, kvh * H + d);
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("mask keeps sinks plus a recency band") {
  auto cfg = toy_cfg(2, 3);
  Mask m = build_mask(6, MixerKind::sinks_swa, cfg);
  std::set<Eigen::Index> row5;
  for (Eigen::Index j = 0; j < 6; ++j)
    if (m(5, j)) row5.insert(j);
  CHECK(row5 == std::set<Eigen::Index>{0, 1, 3, 4, 5});
  CHECK(m(5, 2) == 0);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = i + 1; j < 6; ++j) CHECK(m(i, j) == 0);
}

TEST_CASE("full mask is the causal triangle") {
  auto cfg = toy_cfg();
  Mask m = build_mask(5, MixerKind::full, cfg);
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) CHECK(m(i, j) == (j <= i ? 1 : 0));
}

TEST_CASE("windowed mask row i keeps min(i+1, sinks+window) keys") {
  Rng rng(3);
  for (int it = 0; it < 30; ++it) {
    auto cfg = toy_cfg(static_cast<int>(rng.uniform_int(0, 4)),
                       static_cast<int>(rng.uniform_int(1, 6)));
    const Eigen::Index L = rng.uniform_int(1, 24);
    Mask m = build_mask(L, MixerKind::sinks_swa_ahn, cfg);
    for (Eigen::Index i = 0; i < L; ++i) {
      Eigen::Index count = 0;
      for (Eigen::Index j = 0; j < L; ++j) count += m(i, j);
      CHECK(count == std::min<Eigen::Index>(i + 1, cfg.sinks + cfg.window));
    }
  }
}

TEST_CASE("short sequences make the windowed mask equal the full mask") {
  Rng rng(4);
  for (int it = 0; it < 30; ++it) {
    auto cfg = toy_cfg(static_cast<int>(rng.uniform_int(0, 5)),
                       static_cast<int>(rng.uniform_int(1, 8)));
    const Eigen::Index L = rng.uniform_int(1, cfg.sinks + cfg.window);
    CHECK(build_mask(L, MixerKind::sinks_swa, cfg) == build_mask(L, MixerKind::full, cfg));
  }
}

TEST_CASE("projection is three plain matmuls") {
  auto cfg = toy_cfg();
  Rng rng(5);
  Tape<D> t;
  const Eigen::Index D_model = 8;
  MatD x0 = randm<D>(rng, 3, D_model);
  auto x = t.input(x0);
  auto wq = t.input(MatD::Identity(D_model, D_model));
  auto wk = t.input(randm<D>(rng, D_model, cfg.kv_dim()));
  auto wv = t.input(MatD::Zero(D_model, cfg.kv_dim()));
  auto [q, k, v] = project_qkv(x, wq, wk, wv);
  CHECK(t.value(q) == x0);
  CHECK(t.value(v) == MatD::Zero(3, cfg.kv_dim()));
  MatD k_ref(3, cfg.kv_dim());
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < cfg.kv_dim(); ++j) {
      double acc = 0;
      for (Eigen::Index d = 0; d < D_model; ++d) acc += x0(i, d) * t.value(wk)(d, j);
      k_ref(i, j) = acc;
    }
  CHECK((t.value(k) - k_ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attend agrees with a naive per-head reference") {
  Rng rng(6);
  for (int it = 0; it < 10; ++it) {
    auto cfg = toy_cfg(static_cast<int>(rng.uniform_int(0, 2)),
                       static_cast<int>(rng.uniform_int(1, 5)));
    const Eigen::Index L = rng.uniform_int(1, 12);
    MatD q0 = randm<D>(rng, L, cfg.q_dim());
    MatD k0 = randm<D>(rng, L, cfg.kv_dim());
    MatD v0 = randm<D>(rng, L, cfg.kv_dim());
    Mask m = build_mask(L, MixerKind::sinks_swa, cfg);

    Tape<D> t;
    MatD got = t.value(attend(t.input(q0), t.input(k0), t.input(v0), m, cfg));
    MatD ref = naive_attend(q0, k0, v0, m, cfg);
    CHECK((got - ref).cwiseAbs().maxCoeff() < 1e-10);

    MatD plain = attend_plain(q0, k0, v0, &m, cfg);
    CHECK((plain - got).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("grouped heads read their own kv head") {
  auto cfg = toy_cfg(0, 8);
  const Eigen::Index L = 3;
  MatD q0 = MatD::Zero(L, cfg.q_dim());
  MatD k0 = MatD::Zero(L, cfg.kv_dim());
  MatD v0(L, cfg.kv_dim());
  for (Eigen::Index j = 0; j < cfg.kv_dim(); ++j)
    v0.col(j).setConstant(j < cfg.head_dim ? 1.0 : 2.0);
  Tape<D> t;
  Mask m = build_mask(L, MixerKind::full, cfg);
  MatD y = t.value(attend(t.input(q0), t.input(k0), t.input(v0), m, cfg));
  for (int h = 0; h < cfg.n_q_heads; ++h) {
    const double want = h < 2 ? 1.0 : 2.0;
    CHECK(y.block(0, h * cfg.head_dim, L, cfg.head_dim).isApproxToConstant(want, 1e-12));
  }
}

TEST_CASE("attention gradients pass finite differences") {
  auto cfg = toy_cfg(1, 2);
  Rng rng(8);
  const Eigen::Index L = 5;
  MatD k0 = randm<D>(rng, L, cfg.kv_dim());
  MatD v0 = randm<D>(rng, L, cfg.kv_dim());
  Mask m = build_mask(L, MixerKind::sinks_swa, cfg);
  MatD q0 = randm<D>(rng, L, cfg.q_dim());

  double err = grad_check<D>(
      [&](Tape<D>& t, Var<D> q) {
        auto y = attend(q, t.input(k0), t.input(v0), m, cfg);
        return sum(mul(y, y));
      },
      q0, 1e-5);
  CHECK(err < 1e-6);

  err = grad_check<D>(
      [&](Tape<D>& t, Var<D> k) {
        auto y = attend(t.input(q0), k, t.input(v0), m, cfg);
        return sum(mul(y, y));
      },
      k0, 1e-5);
  CHECK(err < 5e-6);
}

TEST_CASE("kv window evicts fifo after sinks and window fill") {
  KvWindow<D> win(1, 2, 4, 3);
  Rng rng(9);
  std::vector<MatD> ks, vs, xs;
  for (long p = 0; p < 5; ++p) {
    ks.push_back(randm<D>(rng, 1, 4));
    vs.push_back(randm<D>(rng, 1, 4));
    xs.push_back(randm<D>(rng, 1, 3));
  }
  for (long p = 0; p < 3; ++p) {
    auto ev = win.append(ks[p], vs[p], p, &xs[p]);
    CHECK(!ev.has_value());
  }
  auto ev3 = win.append(ks[3], vs[3], 3, &xs[3]);
  REQUIRE(ev3.has_value());
  CHECK(ev3->pos == 1);
  CHECK(ev3->k == ks[1]);
  CHECK(ev3->v == vs[1]);
  CHECK(ev3->x == xs[1]);
  auto ev4 = win.append(ks[4], vs[4], 4, &xs[4]);
  REQUIRE(ev4.has_value());
  CHECK(ev4->pos == 2);
  CHECK(win.evictions() == 2);
  CHECK(win.size() == 3);

  MatD k_out, v_out;
  std::vector<long> pos;
  win.gather(k_out, v_out, &pos);
  CHECK(pos == std::vector<long>{0, 3, 4});
  CHECK(k_out.row(0) == ks[0].row(0));
  CHECK(k_out.row(1) == ks[3].row(0));
  CHECK(k_out.row(2) == ks[4].row(0));
}

TEST_CASE("eviction count over a stream is max(0, L - sinks - window)") {
  Rng rng(10);
  for (int it = 0; it < 20; ++it) {
    const int sinks = static_cast<int>(rng.uniform_int(0, 3));
    const int window = static_cast<int>(rng.uniform_int(1, 6));
    const long L = rng.uniform_int(1, 30);
    KvWindow<D> win(sinks, window, 2);
    MatD row(1, 2);
    long seen = 0;
    for (long p = 0; p < L; ++p) {
      row.setConstant(static_cast<double>(p));
      if (win.append(row, row, p).has_value()) ++seen;
    }
    CHECK(seen == std::max<long>(0, L - sinks - window));
    CHECK(win.evictions() == seen);
    CHECK(win.size() <= sinks + window);
  }
}

TEST_CASE("kv window rejects gaps and stale positions") {
  KvWindow<D> win(1, 2, 2);
  MatD row = MatD::Zero(1, 2);
  win.append(row, row, 0);
  CHECK_THROWS_AS(win.append(row, row, 0), OrderingError);
  CHECK_THROWS_AS(win.append(row, row, 2), OrderingError);
  CHECK_THROWS_AS(win.append(MatD::Zero(1, 3), MatD::Zero(1, 3), 1), ShapeError);
}

TEST_CASE("unbounded window never evicts") {
  KvWindow<D> win(0, -1, 2);
  MatD row(1, 2);
  for (long p = 0; p < 40; ++p) {
    row.setConstant(static_cast<double>(p));
    CHECK(!win.append(row, row, p).has_value());
  }
  CHECK(win.size() == 40);
  MatD k_out, v_out;
  std::vector<long> pos;
  win.gather(k_out, v_out, &pos);
  for (long p = 0; p < 40; ++p) {
    CHECK(pos[static_cast<std::size_t>(p)] == p);
    CHECK(k_out(p, 0) == static_cast<double>(p));
  }
}

TEST_CASE("rotary scores depend only on relative offsets") {
  Rng rng(12);
  const int H = 8;
  MatD q = randm<D>(rng, 1, H);
  MatD k = randm<D>(rng, 1, H);
  auto score = [&](long pq, long pk) {
    MatD qr = q, kr = k;
    rope_rotate(qr, {pq}, H, 10000.0, false);
    rope_rotate(kr, {pk}, H, 10000.0, false);
    return (qr * kr.transpose())(0, 0);
  };
  const double base = score(7, 3);
  CHECK(score(17, 13) == doctest::Approx(base).epsilon(1e-10));
  CHECK(score(107, 103) == doctest::Approx(base).epsilon(1e-10));
  CHECK(score(8, 3) != doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("degenerate mask row raises inside attend") {
  auto cfg = toy_cfg(0, 2);
  Mask m = Mask::Zero(2, 2);
  m(0, 0) = 1;  // row 1 sees nothing
  Tape<D> t;
  Rng rng(13);
  auto q = t.input(randm<D>(rng, 2, cfg.q_dim()));
  auto k = t.input(randm<D>(rng, 2, cfg.kv_dim()));
  auto v = t.input(randm<D>(rng, 2, cfg.kv_dim()));
  CHECK_THROWS_AS((void)attend(q, k, v, m, cfg), DegenerateRowError);
}
