#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "wattsel/common.hpp"

namespace wattsel {

using QuantWeight = std::int8_t;
using QuantActivation = std::int8_t;
using PartialSum = std::int32_t;  // held in the accumulator's signed range

// Structural model of one multiply-accumulate processing element:
// an array multiplier (one sign-extended partial-product row per weight
// bit, ripple-carry reduction) feeding a ripple-carry accumulator with
// saturation. Every net is materialized as a bit vector so switching
// activity can be counted as Hamming distance between consecutive states.
//
// OperandBits = width of weight and activation, AccBits = accumulator
// width. The shipped configuration is 8x8 -> 22; the 4-bit instantiation
// exists so the datapath can be verified exhaustively.
template <int OperandBits = 8, int AccBits = 22>
struct MacState {
  static constexpr int kOperandBits = OperandBits;
  static constexpr int kProductBits = 2 * OperandBits;
  static constexpr int kAccumBits = AccBits;
  static_assert(OperandBits >= 2 && OperandBits <= 8);
  static_assert(AccBits > 2 * OperandBits && AccBits <= 22);

  std::array<std::uint32_t, OperandBits> pp{};             // partial-product rows
  std::array<std::uint32_t, OperandBits - 1> stage_sum{};  // reduction tree sums
  std::array<std::uint32_t, OperandBits - 1> stage_carry{};
  std::uint32_t final_sum = 0;    // accumulator adder outputs
  std::uint32_t final_carry = 0;
  std::uint32_t act_reg = 0;
  std::uint32_t w_reg = 0;
  std::uint32_t prod_reg = 0;
  std::uint32_t psum_reg = 0;
  bool overflow = false;  // saturation flag; status only, not a counted net

  static constexpr int net_count() {
    return OperandBits * kProductBits            // pp matrix
           + 2 * (OperandBits - 1) * kProductBits  // reduction sums + carries
           + 2 * AccBits                           // final adder sums + carries
           + 2 * OperandBits                       // operand registers
           + kProductBits + AccBits;               // product + psum registers
  }

  bool operator==(const MacState&) const = default;
};

namespace detail {

/// Carry-out vector of a ripple-carry addition x+y (carry-in 0) within
/// `mask`: bit i is the carry produced by full adder i.
inline std::uint32_t carry_bits(std::uint32_t x, std::uint32_t y, std::uint32_t s,
                                std::uint32_t mask) {
  std::uint32_t cin = (x ^ y ^ s) & mask;
  return ((x & y) | (x & cin) | (y & cin)) & mask;
}

}  // namespace detail

template <int OB, int AB>
MacState<OB, AB> evaluate_datapath(std::int32_t w, std::int32_t a, std::int32_t psum_in) {
  using State = MacState<OB, AB>;
  constexpr std::uint32_t prod_mask = (1u << State::kProductBits) - 1u;
  constexpr std::uint32_t acc_mask = (AB >= 32) ? 0xFFFFFFFFu : ((1u << AB) - 1u);
  constexpr std::int32_t acc_max = (std::int32_t{1} << (AB - 1)) - 1;
  constexpr std::int32_t acc_min = -(std::int32_t{1} << (AB - 1));

  State st;
  st.act_reg = to_pattern(a, OB);
  st.w_reg = to_pattern(w, OB);

  // One row per weight bit; the top bit carries weight -2^(OB-1), so each
  // row is the two's-complement pattern of a * (signed bit weight) and the
  // rows sum to w*a modulo 2^kProductBits.
  for (int i = 0; i < OB; ++i) {
    std::int32_t bit_weight = (i == OB - 1) ? -(1 << i) : (1 << i);
    std::int32_t contrib = ((st.w_reg >> i) & 1u) ? a * bit_weight : 0;
    st.pp[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(contrib) & prod_mask;
  }

  std::uint32_t acc = st.pp[0];
  for (int i = 1; i < OB; ++i) {
    std::uint32_t x = acc, y = st.pp[static_cast<std::size_t>(i)];
    std::uint32_t s = (x + y) & prod_mask;
    st.stage_sum[static_cast<std::size_t>(i - 1)] = s;
    st.stage_carry[static_cast<std::size_t>(i - 1)] = detail::carry_bits(x, y, s, prod_mask);
    acc = s;
  }
  st.prod_reg = acc;

  std::int32_t product = w * a;
  std::uint32_t x = to_pattern(psum_in, AB);
  std::uint32_t y = static_cast<std::uint32_t>(product) & acc_mask;
  std::uint32_t s = (x + y) & acc_mask;
  st.final_sum = s;
  st.final_carry = detail::carry_bits(x, y, s, acc_mask);

  std::int64_t true_sum = std::int64_t{psum_in} + product;
  std::int32_t clamped = static_cast<std::int32_t>(true_sum);
  if (true_sum > acc_max) {
    clamped = acc_max;
    st.overflow = true;
  } else if (true_sum < acc_min) {
    clamped = acc_min;
    st.overflow = true;
  }
  st.psum_reg = to_pattern(clamped, AB);
  return st;
}

/// Hamming distance over every net and register of the datapath.
template <int OB, int AB>
std::uint32_t toggle_count(const MacState<OB, AB>& a, const MacState<OB, AB>& b) {
  std::uint32_t t = 0;
  for (int i = 0; i < OB; ++i)
    t += static_cast<std::uint32_t>(std::popcount(a.pp[static_cast<std::size_t>(i)] ^
                                                  b.pp[static_cast<std::size_t>(i)]));
  for (int i = 0; i + 1 < OB; ++i) {
    t += static_cast<std::uint32_t>(std::popcount(a.stage_sum[static_cast<std::size_t>(i)] ^
                                                  b.stage_sum[static_cast<std::size_t>(i)]));
    t += static_cast<std::uint32_t>(std::popcount(a.stage_carry[static_cast<std::size_t>(i)] ^
                                                  b.stage_carry[static_cast<std::size_t>(i)]));
  }
  t += static_cast<std::uint32_t>(std::popcount(a.final_sum ^ b.final_sum));
  t += static_cast<std::uint32_t>(std::popcount(a.final_carry ^ b.final_carry));
  t += static_cast<std::uint32_t>(std::popcount(a.act_reg ^ b.act_reg));
  t += static_cast<std::uint32_t>(std::popcount(a.w_reg ^ b.w_reg));
  t += static_cast<std::uint32_t>(std::popcount(a.prod_reg ^ b.prod_reg));
  t += static_cast<std::uint32_t>(std::popcount(a.psum_reg ^ b.psum_reg));
  return t;
}

template <int OB, int AB>
std::pair<MacState<OB, AB>, std::uint32_t> mac_cycle(const MacState<OB, AB>& prev, std::int32_t w,
                                                     std::int32_t a, std::int32_t psum_in) {
  MacState<OB, AB> next = evaluate_datapath<OB, AB>(w, a, psum_in);
  return {next, toggle_count(prev, next)};
}

using Mac8 = MacState<8, 22>;

/// One entry of a PE input trace: the activation streamed in and the
/// partial sum arriving from upstream.
struct TraceStep {
  QuantActivation act;
  PartialSum psum_in;
};

/// Mean toggles per cycle with the weight held stationary. The first cycle
/// transitions out of the all-zeros reset state and is included in the
/// numerator; the divisor is len-1.
template <int OB = 8, int AB = 22>
double avg_power(std::int32_t w, std::span<const TraceStep> trace) {
  if (trace.size() < 2) throw error("avg_power: trace too short");
  MacState<OB, AB> cur{};
  std::uint64_t total = 0;
  for (const TraceStep& step : trace) {
    auto [next, t] = mac_cycle(cur, w, step.act, step.psum_in);
    total += t;
    cur = next;
  }
  return static_cast<double>(total) / static_cast<double>(trace.size() - 1);
}

}  // namespace wattsel
