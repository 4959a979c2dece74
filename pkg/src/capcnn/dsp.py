"""Signal conditioning: spline resampling and the log-spectrogram transform.

A 4 s EEG segment (2048 samples at 512 Hz) becomes a 120x64 image: rows
are 1 Hz frequency bins from 1 to 120 Hz, columns are 64 time frames.
The recipe is reflect padding by (window - hop) / 2 samples per side,
a 512-sample Hann window hopped by 32 samples, squared rFFT magnitude,
bins 1..120, log with a small floor, and per-image standardization.
With the default parameters the padded length is 2528 and the frame
count is exactly len(segment) / hop = 64.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DimensionError, InsufficientDataError

SAMPLE_RATE = 512.0
SEGMENT_SAMPLES = 2048


@dataclass(frozen=True)
class SpectrogramConfig:
    window: int = 512
    hop: int = 32
    log_floor: float = 1e-10
    standardize: bool = True
    max_bins: int = 120  # keep bins 1..max_bins, i.e. 1..120 Hz at 1 Hz spacing

    def __post_init__(self):
        if self.window <= 0 or self.hop <= 0 or self.window % 2:
            raise ValueError("window must be positive and even, hop positive")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if not 1 <= self.max_bins <= self.window // 2:
            raise ValueError("max_bins must lie in [1, window/2]")


DEFAULT_SPECTROGRAM = SpectrogramConfig()


def cubic_spline_resample(samples, rate, target_rate):
    """Resample a signal by natural cubic spline interpolation.

    Fits a spline through (i / rate, samples[i]) and evaluates it at
    k / target_rate for every k with k / target_rate <= duration. Output
    values at instants that coincide with input instants are the input
    samples themselves.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DimensionError(f"expected a 1-d signal, got shape {samples.shape}")
    if samples.size < 4:
        raise InsufficientDataError(
            f"cubic spline resampling needs at least 4 samples, got {samples.size}"
        )
    if rate <= 0 or target_rate <= 0:
        raise ValueError("sampling rates must be positive")
    t_in = np.arange(samples.size) / rate
    spline = CubicSpline(t_in, samples, bc_type="natural")
    duration = t_in[-1]
    n_out = int(np.floor(duration * target_rate)) + 1
    t_out = np.arange(n_out) / target_rate
    out = spline(t_out)
    # Spline evaluation at a knot can pick up rounding error in the last
    # interval; copy coincident samples through exactly.
    pos = np.searchsorted(t_in, t_out)
    pos = np.minimum(pos, t_in.size - 1)
    hit = t_in[pos] == t_out
    out[hit] = samples[pos[hit]]
    return out


def stft_power(segment, config=DEFAULT_SPECTROGRAM):
    """One-sided power spectrogram before any cropping or log.

    Returns an array of shape (window // 2 + 1, frames): squared rFFT
    magnitudes of Hann-windowed frames of the reflect-padded segment.
    """
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-d segment, got shape {x.shape}")
    pad = (config.window - config.hop) // 2
    xp = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, config.window)
    frames = frames[:: config.hop]
    windowed = frames * np.hanning(config.window)
    spectrum = np.fft.rfft(windowed, axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def log_spectrogram(segment, config=DEFAULT_SPECTROGRAM):
    """Standardized log-power image of one 2048-sample segment at 512 Hz.

    Output is (max_bins, frames) float32; with defaults that is (120, 64).
    A constant pre-log image (e.g. an all-zero segment) standardizes to
    all zeros.
    """
    x = np.asarray(segment, dtype=np.float64)
    if x.shape != (SEGMENT_SAMPLES,):
        raise DimensionError(
            f"segment must have exactly {SEGMENT_SAMPLES} samples, got {x.shape}"
        )
    power = stft_power(x, config)
    img = np.log(power[1 : config.max_bins + 1, :] + config.log_floor)
    if config.standardize:
        std = img.std()
        if std == 0.0:
            img = np.zeros_like(img)
        else:
            img = (img - img.mean()) / std
    return img.astype(np.float32)


def segment_image(segment, config=DEFAULT_SPECTROGRAM):
    """Log-spectrogram with a trailing channel axis, ready for the network."""
    return log_spectrogram(segment, config)[..., None]
