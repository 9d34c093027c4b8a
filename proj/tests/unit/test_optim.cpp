#include <cmath>
#include <vector>

#include "doctest.h"

#include "stale_lab/optim.hpp"
#include "stale_lab/seeding.hpp"

using namespace stale_lab;

namespace {

using Vec = std::vector<double>;

// Textbook Adam, written independently of cgad_step.
struct PlainAdam {
  Vec m, v;
  long t = 0;
  explicit PlainAdam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  void step(Vec& p, const Vec& g, double eta, double b1, double b2, double eps) {
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(b1, static_cast<double>(t)));
      const double vh = v[i] / (1.0 - std::pow(b2, static_cast<double>(t)));
      p[i] -= eta * (mh / (std::sqrt(vh) + eps));
    }
  }
};

Vec random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  Vec out(n);
  for (auto& x : out) x = scale * rng.normal();
  return out;
}

OuterConfig nesterov_cfg() { return OuterConfig::defaults(Method::nesterov); }

}  // namespace

TEST_CASE("single CGAD step from fresh state") {
  const auto cfg = OuterConfig::defaults(Method::cgad);
  Vec p{0.0};
  AdamMoments s(1);
  const auto rep = cgad_step(p, Vec{1.0}, 0.0, s, cfg);
  CHECK(rep.applied);
  CHECK(s.t == 1);
  CHECK(s.m[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(s.v[0] == doctest::Approx(0.05).epsilon(1e-15));
  // -1e-3 / (1 + 1e-8) = -9.99999990000000100e-4
  CHECK(p[0] == doctest::Approx(-9.999999900000001e-4).epsilon(1e-12));
}

TEST_CASE("CGAD defaults") {
  const auto cfg = OuterConfig::defaults(Method::cgad);
  CHECK(cfg.gate.alpha == 0.2);
  CHECK(cfg.gate.tau_cut == 32.0);
  CHECK(cfg.eta == 1e-3);
  CHECK(cfg.beta1 == 0.9);
  CHECK(cfg.beta2 == 0.95);
  CHECK(cfg.epsilon == 1e-8);
  CHECK(cfg.validate().empty());
  const auto n = OuterConfig::defaults(Method::nesterov);
  CHECK(n.eta == 0.7);
  CHECK(n.mu == 0.9);
}

TEST_CASE("config validation names fields") {
  auto cfg = OuterConfig::defaults(Method::cgad);
  cfg.beta1 = 1.0;
  cfg.mu = -0.1;
  cfg.buffer_period = 0;
  const auto errors = cfg.validate();
  REQUIRE(errors.size() == 3);
  CHECK(errors[0].starts_with("beta1"));
  CHECK(errors[1].starts_with("mu"));
  CHECK(errors[2].starts_with("buffer_period"));
  CHECK_THROWS_AS(OuterOptimizer(cfg, 4), std::invalid_argument);
}

TEST_CASE("method names round-trip") {
  for (Method m : all_methods()) CHECK(parse_method(to_string(m)) == m);
  CHECK(all_methods().size() == 10);
  CHECK_THROWS_AS(parse_method("adamw"), std::invalid_argument);
}

TEST_CASE("CGAD at tau=0 is bit-identical to plain Adam over 100 steps") {
  const auto cfg = OuterConfig::defaults(Method::cgad);
  Rng rng(7);
  const std::size_t n = 12;
  Vec p = random_vec(rng, n), q = p;
  AdamMoments s(n);
  PlainAdam ref(n);
  for (int k = 0; k < 100; ++k) {
    const Vec g = random_vec(rng, n, 0.01 * (1 + k % 5));
    cgad_step(p, g, 0.0, s, cfg);
    ref.step(q, g, cfg.eta, cfg.beta1, cfg.beta2, cfg.epsilon);
  }
  CHECK(p == q);
  CHECK(s.m == ref.m);
  CHECK(s.v == ref.v);
  CHECK(s.t == ref.t);
}

TEST_CASE("dropped update changes nothing") {
  const auto cfg = OuterConfig::defaults(Method::cgad);
  Rng rng(3);
  Vec p = random_vec(rng, 5);
  AdamMoments s(5);
  cgad_step(p, random_vec(rng, 5), 0.0, s, cfg);
  const Vec p0 = p;
  const AdamMoments s0 = s;
  const auto rep = cgad_step(p, random_vec(rng, 5), 33.0, s, cfg);
  CHECK_FALSE(rep.applied);
  CHECK(rep.scale == 0.0);
  CHECK(p == p0);
  CHECK(s == s0);
  cgad_step(p, random_vec(rng, 5), 32.0, s, cfg);
  CHECK(s.t == 1);
}

TEST_CASE("a step after a drop equals the stream without the dropped grad") {
  const auto cfg = OuterConfig::defaults(Method::cgad);
  Rng rng(11);
  const Vec g1 = random_vec(rng, 4), g_drop = random_vec(rng, 4), g2 = random_vec(rng, 4);
  Vec p(4, 0.5), q(4, 0.5);
  AdamMoments a(4), b(4);
  cgad_step(p, g1, 0.0, a, cfg);
  cgad_step(p, g_drop, 40.0, a, cfg);
  cgad_step(p, g2, 0.0, a, cfg);
  cgad_step(q, g1, 0.0, b, cfg);
  cgad_step(q, g2, 0.0, b, cfg);
  CHECK(p == q);
  CHECK(a == b);
}

TEST_CASE("gate placement") {
  auto before = OuterConfig::defaults(Method::cgad);
  auto after = before;
  after.gate_placement = GatePlacement::after;
  const double tau = 8.0;
  const double sigma = staleness_weight(tau, before.gate);

  Vec p1{1.0}, p2{1.0};
  AdamMoments s1(1), s2(1);
  cgad_step(p1, Vec{2.0}, tau, s1, before);
  cgad_step(p2, Vec{2.0}, tau, s2, after);
  CHECK(s1.m[0] == doctest::Approx(0.1 * sigma * 2.0).epsilon(1e-15));
  CHECK(s2.m[0] == doctest::Approx(0.1 * 2.0).epsilon(1e-15));
  CHECK(s2.v[0] == doctest::Approx(0.05 * 4.0).epsilon(1e-15));
  // One step from fresh state: m_hat/sqrt(v_hat) = sign(g) either way, up to eps.
  CHECK(p1[0] == doctest::Approx(1.0 - 1e-3 * sigma).epsilon(1e-9));
  CHECK(p2[0] == doctest::Approx(1.0 - 1e-3 * sigma).epsilon(1e-12));
  CHECK(parse_gate_placement("after") == GatePlacement::after);
  CHECK_THROWS(parse_gate_placement("middle"));
}

TEST_CASE("step magnitude equals eta sigma rho at the maximizing coordinate") {
  const auto cfg = OuterConfig::defaults(Method::cgad);
  Rng rng(5);
  Vec p = random_vec(rng, 9);
  AdamMoments s(9);
  for (int k = 0; k < 40; ++k) {
    const double tau = k % 20;
    const auto rep = cgad_step(p, random_vec(rng, 9, 0.1), tau, s, cfg);
    if (!rep.applied) continue;
    const double bound = cfg.eta * rep.scale * rep.ratio_max;
    // Equality holds up to one rounding of the parameter write.
    const double ulp = std::nextafter(rep.param_inf_norm, INFINITY) - rep.param_inf_norm;
    CHECK(rep.step_inf_norm <= bound * (1 + 1e-12) + ulp);
    CHECK(rep.step_inf_norm >= bound * (1 - 1e-12) - ulp);
  }
}

TEST_CASE("adam_decay equals cgad with an infinite cutoff") {
  auto cg = OuterConfig::defaults(Method::cgad);
  cg.gate.tau_cut = kNoCutoff;
  auto ad = OuterConfig::defaults(Method::adam_decay);
  ad.gate.tau_cut = 32.0;  // ignored: adam_decay never gates by cutoff
  OuterOptimizer a(cg, 6), b(ad, 6);
  CHECK(b.config().gate.tau_cut == kNoCutoff);
  Rng rng(9);
  Vec p = random_vec(rng, 6), q = p;
  for (int k = 0; k < 60; ++k) {
    const Vec g = random_vec(rng, 6);
    a.step(p, g, k % 40);
    b.step(q, g, k % 40);
  }
  CHECK(p == q);
  CHECK(*a.adam_state() == *b.adam_state());
}

TEST_CASE("adam ignores staleness") {
  OuterOptimizer a(OuterConfig::defaults(Method::adam), 2);
  Vec p{0.0, 0.0};
  const auto rep = a.step(p, Vec{1.0, -1.0}, 100.0);
  CHECK(rep.applied);
  CHECK(rep.scale == 1.0);
}

TEST_CASE("nesterov hand computations") {
  const auto cfg = nesterov_cfg();
  Vec p{0.0};
  NesterovVelocity s(1);
  nesterov_step(p, Vec{1.0}, s, cfg);
  CHECK(s.v[0] == 1.0);
  CHECK(p[0] == doctest::Approx(-1.33).epsilon(1e-15));
  const double p1 = p[0];
  nesterov_step(p, Vec{1.0}, s, cfg);
  CHECK(s.v[0] == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(p[0] - p1 == doctest::Approx(-0.7 * 2.71).epsilon(1e-14));
}

TEST_CASE("nesterov with mu=0 is SGD") {
  auto cfg = nesterov_cfg();
  cfg.mu = 0.0;
  Vec p{1.0, 2.0};
  NesterovVelocity s(2);
  for (int k = 0; k < 3; ++k) nesterov_step(p, Vec{0.5, -1.0}, s, cfg);
  CHECK(p[0] == doctest::Approx(1.0 - 3 * 0.7 * 0.5));
  CHECK(p[1] == doctest::Approx(2.0 + 3 * 0.7));
}

TEST_CASE("sdm scaling") {
  auto cfg = OuterConfig::defaults(Method::sdm);
  Rng rng(2);
  const Vec g = random_vec(rng, 3);
  Vec p(3, 0.0), q(3, 0.0);
  NesterovVelocity a(3), b(3);
  sdm_step(p, g, 0.0, a, cfg);
  nesterov_step(q, g, b, cfg);
  CHECK(p == q);

  NesterovVelocity c(3);
  Vec r(3, 0.0);
  const auto rep = sdm_step(r, g, 5.0, c, cfg);
  CHECK(rep.scale == doctest::Approx(0.36787944117144232160).epsilon(1e-14));
  CHECK(c.v[1] == doctest::Approx(rep.scale * g[1]).epsilon(1e-15));

  cfg.gate.alpha = 0.0;
  Vec s1(3, 0.0), s2(3, 0.0);
  NesterovVelocity d(3), e(3);
  for (double tau : {0.0, 3.0, 17.0}) {
    sdm_step(s1, g, tau, d, cfg);
    nesterov_step(s2, g, e, cfg);
  }
  CHECK(s1 == s2);
}

TEST_CASE("poly-decay scaling") {
  const auto cfg = OuterConfig::defaults(Method::poly_decay);
  NesterovVelocity s(1);
  Vec p{0.0};
  CHECK(poly_decay_step(p, Vec{1.0}, 0.0, s, cfg).scale == 1.0);
  CHECK(poly_decay_step(p, Vec{1.0}, 3.0, s, cfg).scale == 0.5);
  CHECK(poly_decay_step(p, Vec{1.0}, 15.0, s, cfg).scale == 0.25);
}

TEST_CASE("mla hand computation and reductions") {
  const auto cfg = OuterConfig::defaults(Method::mla);
  Vec p{0.0};
  NesterovVelocity s(1);
  mla_step(p, Vec{1.0}, 2.0, s, cfg);
  CHECK(p[0] == doctest::Approx(-0.7 * 1.9 - 0.7 * 2 * 0.9 * 1).epsilon(1e-14));

  Rng rng(4);
  const Vec g = random_vec(rng, 4);
  Vec a(4, 0.0), b(4, 0.0);
  NesterovVelocity va(4), vb(4);
  mla_step(a, g, 0.0, va, cfg);
  nesterov_step(b, g, vb, cfg);
  CHECK(a == b);

  auto sgd = cfg;
  sgd.mu = 0.0;
  Vec c{1.0};
  NesterovVelocity vc(1);
  mla_step(c, Vec{1.0}, 9.0, vc, sgd);
  CHECK(c[0] == doctest::Approx(0.3));
}

TEST_CASE("delayed nesterov with N=1 is nesterov") {
  auto cfg = OuterConfig::defaults(Method::delayed_nesterov);
  cfg.buffer_period = 1;
  Rng rng(6);
  Vec p(5, 0.0), q(5, 0.0);
  DelayBuffer buf(5);
  NesterovVelocity va(5), vb(5);
  for (int k = 0; k < 20; ++k) {
    const Vec g = random_vec(rng, 5);
    delayed_nesterov_step(p, g, buf, va, cfg);
    nesterov_step(q, g, vb, cfg);
  }
  CHECK(va == vb);
  for (std::size_t i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-13));
}

TEST_CASE("delayed nesterov N=4 state machine") {
  const auto cfg = OuterConfig::defaults(Method::delayed_nesterov);
  REQUIRE(cfg.buffer_period == 4);
  Vec p{0.0};
  DelayBuffer buf(1);
  NesterovVelocity v(1);
  const double grads[4] = {1.0, 2.0, 3.0, 6.0};
  double expected = 0.0;
  for (int k = 0; k < 3; ++k) {
    delayed_nesterov_step(p, Vec{grads[k]}, buf, v, cfg);
    expected -= 0.7 * grads[k];
    CHECK(v.v[0] == 0.0);
    CHECK(buf.count == k + 1);
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-15));
  }
  delayed_nesterov_step(p, Vec{grads[3]}, buf, v, cfg);
  CHECK(buf.count == 0);
  CHECK(buf.rounds_since_burst == 0);
  CHECK(buf.accumulated[0] == 0.0);
  CHECK(v.v[0] == 3.0);  // mean of 1, 2, 3, 6
  expected -= 0.7 * 6.0 + 0.7 * 0.9 * 3.0;
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("eager mixing conventions") {
  const Vec own{1.0, -2.0}, prev_own{0.5, 0.5}, prev_avg{0.25, 1.0};
  const Vec mixed = eager_mix(own, prev_own, prev_avg, 4);
  CHECK(mixed[0] == doctest::Approx(0.25 * 0.5 + 0.25));
  CHECK(mixed[1] == doctest::Approx(0.25 * -2.5 + 1.0));
  // M = 1 with prev_avg = prev_own collapses to own.
  CHECK(eager_mix(own, prev_own, prev_own, 1) == own);
  CHECK(eager_mix(own, own, prev_avg, 3) == prev_avg);
  CHECK_THROWS_AS(eager_mix(own, Vec{1.0}, prev_avg, 2), ShapeError);
  CHECK_THROWS(eager_mix(own, prev_own, prev_avg, 0));
}

TEST_CASE("nesterov family is linear in the gradient scale") {
  Rng rng(8);
  const Vec g = random_vec(rng, 4);
  Vec g3 = g;
  for (auto& x : g3) x *= 3.0;
  using Fn = StepReport (*)(std::span<double>, std::span<const double>, double, NesterovVelocity&,
                            const OuterConfig&);
  const Fn fns[] = {&sdm_step, &poly_decay_step, &mla_step,
                    [](std::span<double> p, std::span<const double> g, double, NesterovVelocity& s,
                       const OuterConfig& c) { return nesterov_step(p, g, s, c); }};
  for (Fn fn : fns) {
    const auto cfg = OuterConfig::defaults(Method::mla);
    Vec a(4, 0.0), b(4, 0.0);
    NesterovVelocity va(4), vb(4);
    fn(a, g, 2.0, va, cfg);
    fn(b, g3, 2.0, vb, cfg);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(vb.v[i] == doctest::Approx(3.0 * va.v[i]).epsilon(1e-14));
      CHECK(b[i] == doctest::Approx(3.0 * a[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("shape mismatches are structural errors") {
  Vec p(3, 0.0);
  AdamMoments s(2);
  CHECK_THROWS_AS(cgad_step(p, Vec(3, 1.0), 0.0, s, OuterConfig{}), ShapeError);
  NesterovVelocity v(3);
  CHECK_THROWS_AS(nesterov_step(p, Vec(2, 1.0), v, nesterov_cfg()), ShapeError);
  CHECK_THROWS_AS(mla_step(p, Vec(3, 1.0), -1.0, v, nesterov_cfg()), std::domain_error);
}

TEST_CASE("inner AdamW") {
  const InnerConfig cfg;
  CHECK(cfg.lr == 3e-4);
  CHECK(cfg.weight_decay == 0.0);
  Vec p{0.0};
  AdamMoments s(1);
  inner_adamw_step(p, Vec{1.0}, s, cfg);
  CHECK(p[0] == doctest::Approx(-2.99999997000000030e-4).epsilon(1e-12));

  // wd = 0 equals the plain Adam step.
  Rng rng(12);
  Vec a = random_vec(rng, 5), b = a;
  AdamMoments sa(5);
  PlainAdam ref(5);
  for (int k = 0; k < 10; ++k) {
    const Vec g = random_vec(rng, 5);
    inner_adamw_step(a, g, sa, cfg);
    ref.step(b, g, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
  }
  CHECK(a == b);

  // Zero gradient on fresh state leaves everything at zero.
  Vec z{2.0};
  AdamMoments sz(1);
  inner_adamw_step(z, Vec{0.0}, sz, cfg);
  CHECK(z[0] == 2.0);
  CHECK(sz.m[0] == 0.0);
  CHECK(sz.v[0] == 0.0);

  // Decoupled decay shrinks params even without gradient.
  InnerConfig wd = cfg;
  wd.weight_decay = 0.1;
  Vec w{2.0};
  AdamMoments sw(1);
  inner_adamw_step(w, Vec{0.0}, sw, wd);
  CHECK(w[0] == doctest::Approx(2.0 * (1 - 3e-5)));
}

TEST_CASE("outer optimizer dispatch") {
  for (Method m : all_methods()) {
    OuterOptimizer opt(OuterConfig::defaults(m), 3);
    Vec p(3, 0.0);
    const auto rep = opt.step(p, Vec{1.0, -1.0, 0.5}, 0.0);
    CHECK(rep.applied);
    CHECK(p[0] < 0.0);
    CHECK(p[1] > 0.0);
    CHECK((opt.adam_state() != nullptr) == uses_adam_kernel(m));
    CHECK((opt.delay_buffer() != nullptr) == (m == Method::delayed_nesterov));
  }
}
