#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <vector>

#include "wattsel/common.hpp"
#include "wattsel/mac_sim.hpp"

using namespace wattsel;

// ---------------------------------------------------------------------------
// Independent reference datapath, written bit-by-bit with explicit full
// adders over int vectors. Deliberately shares no code with the
// implementation under test.

namespace oracle {

using Bits = std::vector<int>;

inline Bits to_bits(long long v, int n) {
  long long m = 1LL << n;
  long long u = ((v % m) + m) % m;
  Bits b(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) b[static_cast<std::size_t>(i)] = static_cast<int>((u >> i) & 1);
  return b;
}

struct AddResult {
  Bits sum, carry;
};

inline AddResult ripple_add(const Bits& x, const Bits& y) {
  AddResult r;
  r.sum.resize(x.size());
  r.carry.resize(x.size());
  int cin = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    int s = x[i] ^ y[i] ^ cin;
    int cout = (x[i] & y[i]) | (x[i] & cin) | (y[i] & cin);
    r.sum[i] = s;
    r.carry[i] = cout;
    cin = cout;
  }
  return r;
}

struct State {
  Bits flat;  // pp rows, stage sums, stage carries, final sum/carry, regs
  long long psum_value = 0;
  long long product_value = 0;
};

inline State eval(int ob, int ab, int w, int a, long long psum_in) {
  State st;
  Bits wbits = to_bits(w, ob);
  std::vector<Bits> rows;
  for (int i = 0; i < ob; ++i) {
    long long bit_weight = (i == ob - 1) ? -(1LL << i) : (1LL << i);
    long long contrib = wbits[static_cast<std::size_t>(i)] ? static_cast<long long>(a) * bit_weight : 0;
    rows.push_back(to_bits(contrib, 2 * ob));
  }
  std::vector<Bits> stage_sums, stage_carries;
  Bits acc = rows[0];
  for (int i = 1; i < ob; ++i) {
    AddResult r = ripple_add(acc, rows[static_cast<std::size_t>(i)]);
    stage_sums.push_back(r.sum);
    stage_carries.push_back(r.carry);
    acc = r.sum;
  }
  long long product = static_cast<long long>(w) * a;
  AddResult fin = ripple_add(to_bits(psum_in, ab), to_bits(product, ab));
  long long hi = (1LL << (ab - 1)) - 1, lo = -(1LL << (ab - 1));
  long long true_sum = psum_in + product;
  long long clamped = true_sum > hi ? hi : (true_sum < lo ? lo : true_sum);

  auto push = [&](const Bits& b) { st.flat.insert(st.flat.end(), b.begin(), b.end()); };
  for (const Bits& r : rows) push(r);
  for (const Bits& s : stage_sums) push(s);
  for (const Bits& c : stage_carries) push(c);
  push(fin.sum);
  push(fin.carry);
  push(to_bits(a, ob));
  push(to_bits(w, ob));
  push(acc);  // product register
  push(to_bits(clamped, ab));
  st.psum_value = clamped;
  st.product_value = product;
  return st;
}

inline int hamming(const Bits& a, const Bits& b) {
  int t = 0;
  for (std::size_t i = 0; i < a.size(); ++i) t += a[i] ^ b[i];
  return t;
}

}  // namespace oracle

// Flattens the implementation state in the oracle's net order (stage sums
// before stage carries).
template <int OB, int AB>
static std::vector<int> flatten(const MacState<OB, AB>& st) {
  std::vector<int> out;
  auto push = [&](std::uint32_t word, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<int>((word >> i) & 1));
  };
  for (int i = 0; i < OB; ++i) push(st.pp[static_cast<std::size_t>(i)], 2 * OB);
  for (int i = 0; i + 1 < OB; ++i) push(st.stage_sum[static_cast<std::size_t>(i)], 2 * OB);
  for (int i = 0; i + 1 < OB; ++i) push(st.stage_carry[static_cast<std::size_t>(i)], 2 * OB);
  push(st.final_sum, AB);
  push(st.final_carry, AB);
  push(st.act_reg, OB);
  push(st.w_reg, OB);
  push(st.prod_reg, 2 * OB);
  push(st.psum_reg, AB);
  return out;
}

static std::int32_t sat22_ref(std::int64_t v) {
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(v, kAccMin, kAccMax));
}

TEST_CASE("datapath basics") {
  SECTION("weight zero annihilates partial products") {
    for (int a : {-128, -5, 0, 1, 77, 127}) {
      auto st = evaluate_datapath<8, 22>(0, a, 0);
      for (auto row : st.pp) REQUIRE(row == 0);
      REQUIRE(st.prod_reg == 0);
      REQUIRE(st.psum_reg == 0);
    }
  }
  SECTION("identity") {
    auto st = evaluate_datapath<8, 22>(1, 1, 0);
    REQUIRE(st.prod_reg == 1);
    REQUIRE(st.psum_reg == 1);
  }
  SECTION("-3 * 7 + 100") {
    auto st = evaluate_datapath<8, 22>(-3, 7, 100);
    REQUIRE(st.psum_reg == to_pattern(79, 22));
    REQUIRE(st.prod_reg == to_pattern(-21, 16));
  }
  SECTION("saturation sets the flag") {
    auto st = evaluate_datapath<8, 22>(127, 127, kAccMax);
    REQUIRE(st.overflow);
    REQUIRE(st.psum_reg == to_pattern(kAccMax, 22));
    auto st2 = evaluate_datapath<8, 22>(-128, 127, kAccMin);
    REQUIRE(st2.overflow);
    REQUIRE(st2.psum_reg == to_pattern(kAccMin, 22));
  }
}

TEST_CASE("mac_cycle toggle accounting") {
  SECTION("no input change, no toggles") {
    auto s0 = evaluate_datapath<8, 22>(55, -7, 1234);
    auto [s1, t] = mac_cycle(s0, 55, -7, 1234);
    REQUIRE(t == 0);
    REQUIRE(s1 == s0);
  }
  SECTION("with weight 0, an activation step only moves the activation register") {
    auto s0 = evaluate_datapath<8, 22>(0, 0, 0);
    auto [s1, t] = mac_cycle(s0, 0, 127, 0);
    REQUIRE(t == 7);  // 127 has seven set bits
    (void)s1;
  }
  SECTION("hamming symmetry") {
    Rng rng(42);
    for (int i = 0; i < 200; ++i) {
      auto x = evaluate_datapath<8, 22>(static_cast<std::int8_t>(rng.next()),
                                        static_cast<std::int8_t>(rng.next()),
                                        static_cast<std::int32_t>(rng.range(kAccMin, kAccMax)));
      auto y = evaluate_datapath<8, 22>(static_cast<std::int8_t>(rng.next()),
                                        static_cast<std::int8_t>(rng.next()),
                                        static_cast<std::int32_t>(rng.range(kAccMin, kAccMax)));
      REQUIRE(toggle_count(x, y) == toggle_count(y, x));
      REQUIRE(toggle_count(x, x) == 0);
    }
  }
}

TEST_CASE("exhaustive 4-bit functional check against integer arithmetic") {
  constexpr int OB = 4, AB = 10;
  constexpr std::int32_t lo = -(1 << (AB - 1)), hi = (1 << (AB - 1)) - 1;
  for (int w = -8; w <= 7; ++w)
    for (int a = -8; a <= 7; ++a)
      for (std::int32_t p = lo; p <= hi; ++p) {
        auto st = evaluate_datapath<OB, AB>(w, a, p);
        std::int32_t expect = static_cast<std::int32_t>(
            std::clamp<std::int64_t>(std::int64_t{p} + w * a, lo, hi));
        if (st.psum_reg != to_pattern(expect, AB)) {
          CAPTURE(w, a, p);
          REQUIRE(st.psum_reg == to_pattern(expect, AB));
        }
        if (st.prod_reg != to_pattern(w * a, 2 * OB)) {
          CAPTURE(w, a, p);
          REQUIRE(st.prod_reg == to_pattern(w * a, 2 * OB));
        }
      }
  SUCCEED("all 2^4 * 2^4 * 2^10 combinations matched");
}

TEST_CASE("bit-level oracle agreement") {
  SECTION("4-bit: full state match over a dense sweep") {
    for (int w = -8; w <= 7; ++w)
      for (int a = -8; a <= 7; ++a)
        for (std::int32_t p = -512; p <= 511; p += 7) {
          auto impl = flatten(evaluate_datapath<4, 10>(w, a, p));
          auto ref = oracle::eval(4, 10, w, a, p);
          if (impl != ref.flat) {
            CAPTURE(w, a, p);
            REQUIRE(impl == ref.flat);
          }
        }
  }
  SECTION("8-bit: states and toggle counts on random cases") {
    Rng rng(7);
    auto rnd = [&] {
      int w = static_cast<int>(static_cast<std::int8_t>(rng.next()));
      int a = static_cast<int>(static_cast<std::int8_t>(rng.next()));
      auto p = static_cast<std::int32_t>(rng.range(kAccMin, kAccMax));
      return std::tuple{w, a, p};
    };
    for (int i = 0; i < 2000; ++i) {
      auto [w1, a1, p1] = rnd();
      auto [w2, a2, p2] = rnd();
      auto s1 = evaluate_datapath<8, 22>(w1, a1, p1);
      auto s2 = evaluate_datapath<8, 22>(w2, a2, p2);
      auto r1 = oracle::eval(8, 22, w1, a1, p1);
      auto r2 = oracle::eval(8, 22, w2, a2, p2);
      REQUIRE(flatten(s1) == r1.flat);
      REQUIRE(toggle_count(s1, s2) == static_cast<std::uint32_t>(oracle::hamming(r1.flat, r2.flat)));
    }
  }
  SECTION("the spec'd w=1 a:0->1 psum:0->1 transition matches the oracle") {
    auto s0 = evaluate_datapath<4, 10>(1, 0, 0);
    auto [s1, t] = mac_cycle(s0, 1, 1, 1);
    auto r0 = oracle::eval(4, 10, 1, 0, 0);
    auto r1 = oracle::eval(4, 10, 1, 1, 1);
    REQUIRE(t == static_cast<std::uint32_t>(oracle::hamming(r0.flat, r1.flat)));
    auto s0b = evaluate_datapath<8, 22>(1, 0, 0);
    auto [s1b, tb] = mac_cycle(s0b, 1, 1, 1);
    auto r0b = oracle::eval(8, 22, 1, 0, 0);
    auto r1b = oracle::eval(8, 22, 1, 1, 1);
    REQUIRE(tb == static_cast<std::uint32_t>(oracle::hamming(r0b.flat, r1b.flat)));
    (void)s1;
    (void)s1b;
  }
}

TEST_CASE("random 8-bit functional check") {
  Rng rng(99);
  for (int i = 0; i < 100000; ++i) {
    auto w = static_cast<std::int8_t>(rng.next());
    auto a = static_cast<std::int8_t>(rng.next());
    auto p = static_cast<std::int32_t>(rng.range(kAccMin, kAccMax));
    auto st = evaluate_datapath<8, 22>(w, a, p);
    REQUIRE(st.psum_reg == to_pattern(sat22_ref(std::int64_t{p} + w * a), 22));
  }
}

TEST_CASE("avg_power") {
  SECTION("constant trace decays as first-cycle toggles over len-1") {
    std::vector<TraceStep> trace(100, TraceStep{33, 4096});
    auto first = mac_cycle(MacState<8, 22>{}, 21, 33, 4096);
    double expect = static_cast<double>(first.second) / 99.0;
    REQUIRE(avg_power(21, std::span<const TraceStep>(trace)) == Catch::Approx(expect));
  }
  SECTION("short traces are rejected") {
    std::vector<TraceStep> one(1, TraceStep{0, 0});
    REQUIRE_THROWS_AS(avg_power(0, std::span<const TraceStep>(one)), error);
  }
  SECTION("weight 0 is cheaper than weight -1 on the same trace") {
    Rng rng(1234);
    std::vector<TraceStep> trace;
    for (int i = 0; i < 512; ++i)
      trace.push_back({static_cast<QuantActivation>(rng.next()),
                       static_cast<PartialSum>(rng.range(-100000, 100000))});
    double p0 = avg_power(0, std::span<const TraceStep>(trace));
    double p1 = avg_power(-1, std::span<const TraceStep>(trace));
    REQUIRE(p0 < p1);
  }
}
