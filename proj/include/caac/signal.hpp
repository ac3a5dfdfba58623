#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace caac::signal {

using Complex = std::complex<double>;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 8000;
};

/// T x F log-power frames, row-major, F = frame_size / 2 + 1.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::size_t frame_size = 0;
  std::size_t hop = 0;
  double floor_log = 0.0;  // log(floor_eps), the value of silent cells
  std::vector<double> values;

  double at(std::size_t t, std::size_t f) const { return values[t * bins + f]; }
};

struct StftConfig {
  std::size_t frame_size = 256;
  std::size_t hop = 128;
  double floor_eps = 1e-10;
};

bool is_power_of_two(std::size_t n) noexcept;

/// Iterative radix-2 decimation-in-time FFT. Throws std::invalid_argument
/// unless the length is a power of two.
std::vector<Complex> fft(std::span<const Complex> x);
/// Inverse transform, including the 1/n scaling.
std::vector<Complex> ifft(std::span<const Complex> x);

/// Periodic Hann window of length n.
std::vector<double> hann_window(std::size_t n);

/// Windowed STFT power, floored and logged: log(max(|X|^2, floor_eps)).
/// Frame count is floor((len - frame_size) / hop) + 1; a trailing partial
/// frame is dropped.
Spectrogram log_power_spectrogram(const Waveform& w, const StftConfig& cfg = {});

}  // namespace caac::signal
