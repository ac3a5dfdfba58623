#include "caac/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace caac::signal {

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

namespace {

void transform(std::vector<Complex>& a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) throw std::invalid_argument("fft: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::size_t half = len / 2;
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < half; ++k) {
        // Twiddles evaluated directly rather than by repeated multiplication
        // to keep the error at the level of a single sin/cos.
        const Complex w(std::cos(ang * static_cast<double>(k)), std::sin(ang * static_cast<double>(k)));
        const Complex u = a[i + k];
        const Complex v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
  }
  if (inverse)
    for (auto& v : a) v /= static_cast<double>(n);
}

}  // namespace

std::vector<Complex> fft(std::span<const Complex> x) {
  std::vector<Complex> a(x.begin(), x.end());
  transform(a, false);
  return a;
}

std::vector<Complex> ifft(std::span<const Complex> x) {
  std::vector<Complex> a(x.begin(), x.end());
  transform(a, true);
  return a;
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
  return w;
}

Spectrogram log_power_spectrogram(const Waveform& w, const StftConfig& cfg) {
  if (!is_power_of_two(cfg.frame_size)) throw std::invalid_argument("spectrogram: frame size must be a power of two");
  if (cfg.hop == 0 || cfg.hop > cfg.frame_size) throw std::invalid_argument("spectrogram: hop must lie in [1, frame_size]");
  if (!(cfg.floor_eps > 0.0)) throw std::invalid_argument("spectrogram: floor must be positive");
  if (w.samples.size() < cfg.frame_size)
    throw std::invalid_argument("spectrogram: waveform of " + std::to_string(w.samples.size()) +
                                " samples is shorter than one frame");
  for (double s : w.samples)
    if (!std::isfinite(s)) throw std::invalid_argument("spectrogram: non-finite sample");

  Spectrogram out;
  out.frame_size = cfg.frame_size;
  out.hop = cfg.hop;
  out.bins = cfg.frame_size / 2 + 1;
  out.floor_log = std::log(cfg.floor_eps);
  out.frames = (w.samples.size() - cfg.frame_size) / cfg.hop + 1;
  out.values.resize(out.frames * out.bins);

  const auto window = hann_window(cfg.frame_size);
  const double floor_log = std::log(cfg.floor_eps);
  std::vector<Complex> frame(cfg.frame_size);
  for (std::size_t t = 0; t < out.frames; ++t) {
    const double* src = w.samples.data() + t * cfg.hop;
    for (std::size_t i = 0; i < cfg.frame_size; ++i) frame[i] = Complex(src[i] * window[i], 0.0);
    const auto spec = fft(frame);
    for (std::size_t f = 0; f < out.bins; ++f) {
      const double power = std::norm(spec[f]);
      out.values[t * out.bins + f] = power > cfg.floor_eps ? std::log(power) : floor_log;
    }
  }
  return out;
}

}  // namespace caac::signal
