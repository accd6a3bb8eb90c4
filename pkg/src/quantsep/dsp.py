"""Signal-processing front-end and metrics.

STFT/iSTFT with a COLA-validated sqrt-Hann window, log-power spectrum,
inter-microphone phase differences, far-field steering vectors, the
location-guided angle feature, complex ratio-mask application, SI-SNR,
and WAV file I/O.

A differentiable iSTFT (`istft_tensor`) is provided for training the
masking network end to end in the time domain; its backward pass is the
exact adjoint of the linear synthesis map.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.io import wavfile

from . import tensor as tz


class ConfigError(ValueError):
    """Invalid front-end configuration (e.g. a non-COLA window/hop pair)."""


@dataclasses.dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis settings. Defaults: 16 kHz, 512-point FFT,
    32 ms sqrt-Hann window, 16 ms hop."""

    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 512
    hop: int = 256

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ConfigError("win_length must not exceed n_fft")
        if not (0 < self.hop <= self.win_length):
            raise ConfigError("hop must be in (0, win_length]")
        _validate_cola(self.window, self.hop)

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    @property
    def window(self):
        # periodic sqrt-Hann; analysis and synthesis use the same window
        n = np.arange(self.win_length)
        return np.sin(np.pi * n / self.win_length)

    def n_frames(self, n_samples):
        if n_samples < self.win_length:
            raise ConfigError(
                f"signal of {n_samples} samples shorter than window {self.win_length}"
            )
        return 1 + (n_samples - self.win_length) // self.hop

    def n_samples(self, n_frames):
        return (n_frames - 1) * self.hop + self.win_length

    def freqs_hz(self):
        return np.arange(self.n_bins) * self.sample_rate / self.n_fft


def _validate_cola(window, hop, tol=1e-8):
    """The analysis*synthesis window must overlap-add to a constant."""
    n = len(window)
    wsq = window * window
    n_frames = 8 * (n // hop) + 8
    acc = np.zeros(n + (n_frames - 1) * hop)
    for m in range(n_frames):
        acc[m * hop : m * hop + n] += wsq
    interior = acc[n : -n or None]
    if interior.size == 0 or np.ptp(interior) > tol * np.max(interior):
        raise ConfigError(
            f"window/hop pair does not satisfy COLA (hop={hop}, win={n})"
        )


@dataclasses.dataclass
class Spectrogram:
    """Complex STFT values [F, T] plus the config that produced them."""

    data: np.ndarray  # complex, [n_bins, n_frames]
    config: StftConfig

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.config.n_bins:
            raise ConfigError(
                f"spectrogram shape {self.data.shape} inconsistent with"
                f" n_fft={self.config.n_fft}"
            )

    @property
    def n_frames(self):
        return self.data.shape[1]

    @property
    def n_bins(self):
        return self.data.shape[0]


def stft(wave, config):
    """STFT of a 1-D signal; frames start at sample 0 (no centering)."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ConfigError(f"stft expects a mono signal, got shape {wave.shape}")
    T = config.n_frames(len(wave))
    w = config.window
    idx = np.arange(config.win_length)[:, None] + config.hop * np.arange(T)[None, :]
    frames = wave[idx] * w[:, None]
    spec = np.fft.rfft(frames, n=config.n_fft, axis=0)
    return Spectrogram(spec, config)


def _ola_norm(config, n_frames):
    w = config.window
    wsq = w * w
    norm = np.zeros(config.n_samples(n_frames))
    for m in range(n_frames):
        norm[m * config.hop : m * config.hop + config.win_length] += wsq
    return np.maximum(norm, 1e-10)


def istft(spec):
    """Inverse STFT by normalized weighted overlap-add."""
    config = spec.config
    frames = np.fft.irfft(spec.data, n=config.n_fft, axis=0)[: config.win_length]
    frames = frames * config.window[:, None]
    T = spec.n_frames
    out = np.zeros(config.n_samples(T))
    for m in range(T):
        out[m * config.hop : m * config.hop + config.win_length] += frames[:, m]
    return out / _ola_norm(config, T)


def istft_tensor(re, im, config):
    """Differentiable iSTFT: (real, imag) mask-applied spectrum Tensors [F, T]
    to a waveform Tensor. Backward is the adjoint of the synthesis map."""
    if re.data.shape != im.data.shape:
        raise tz.ShapeError(
            f"istft: real {re.data.shape} and imag {im.data.shape} parts differ"
        )
    F, T = re.data.shape
    if F != config.n_bins:
        raise tz.ShapeError(f"istft: {F} bins != n_fft/2+1 = {config.n_bins}")
    w = config.window.astype(re.data.dtype)
    norm = _ola_norm(config, T).astype(re.data.dtype)
    hop, win, n_fft = config.hop, config.win_length, config.n_fft

    z = re.data.astype(np.float64) + 1j * im.data.astype(np.float64)
    frames = np.fft.irfft(z, n=n_fft, axis=0)[:win] * w[:, None]
    out = np.zeros(config.n_samples(T))
    for m in range(T):
        out[m * hop : m * hop + win] += frames[:, m]
    out = (out / norm).astype(re.data.dtype)

    # scaling of the rfft adjoint: interior bins appear twice in the
    # implicit Hermitian spectrum, DC and Nyquist once
    ck = np.full(F, 2.0)
    ck[0] = 1.0
    if n_fft % 2 == 0:
        ck[-1] = 1.0

    def backward(g):
        gn = g.astype(np.float64) / norm
        gframes = np.zeros((n_fft, T))
        for m in range(T):
            gframes[:win, m] = gn[m * hop : m * hop + win] * w
        gz = np.fft.rfft(gframes, n=n_fft, axis=0) * (ck[:, None] / n_fft)
        gre = gz.real
        gim = gz.imag
        # irfft ignores the imaginary parts of the DC and Nyquist bins
        gim[0] = 0.0
        if n_fft % 2 == 0:
            gim[-1] = 0.0
        if re.requires_grad:
            re._accumulate(gre.astype(re.data.dtype))
        if im.requires_grad:
            im._accumulate(gim.astype(im.data.dtype))

    return tz.Tensor._result(out, (re, im), backward, "istft")


# -- spatial features ---------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ArrayGeometry:
    """Linear microphone array. Channel 0 is the reference; `positions`
    are signed meters along the array axis with positions[0] == 0."""

    positions: tuple
    sound_speed: float = 343.0
    pairs: tuple = ()

    def __post_init__(self):
        pos = tuple(float(p) for p in self.positions)
        object.__setattr__(self, "positions", pos)
        if len(pos) < 1 or pos[0] != 0.0:
            raise ConfigError("positions must start at the reference mic (0.0 m)")
        if len(set(pos)) != len(pos):
            raise ConfigError("duplicate microphone positions")
        pairs = tuple((int(m), int(n)) for m, n in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        for m, n in pairs:
            if not (0 <= m < len(pos) and 0 <= n < len(pos)):
                raise ConfigError(f"pair ({m},{n}) exceeds channel count {len(pos)}")

    @property
    def n_channels(self):
        return len(self.positions)

    def delays(self, theta):
        """Far-field arrival delays in seconds per channel, relative to mic 0."""
        return np.asarray(self.positions) * np.cos(theta) / self.sound_speed


def ipd(spec_m, spec_n):
    """Inter-microphone phase difference angle(y_m / y_n), wrapped to (-pi, pi].
    Bins where either channel is exactly zero yield 0."""
    if spec_m.data.shape != spec_n.data.shape:
        raise ConfigError(
            f"ipd: spectrogram shapes differ: {spec_m.data.shape} vs {spec_n.data.shape}"
        )
    # angle(a/b) == angle(a * conj(b)); the product form has no division by zero
    return np.angle(spec_m.data * np.conj(spec_n.data))


def steering_vector(theta, f_hz, geometry):
    """Far-field steering vector for a source at angle theta: element r is
    exp(-j * 2*pi*f*d_r/c * cos(theta)); the reference element is 1+0j."""
    phi = 2.0 * np.pi * f_hz * np.asarray(geometry.positions) / geometry.sound_speed
    return np.exp(-1j * phi * np.cos(theta))


def angle_feature(specs, theta, geometry, literal_index_order=False):
    """Location-guided angle feature [F, T].

    For each selected pair (m, n), the cosine similarity between the
    observed channel ratio y_m/y_n and the steering prediction for a
    source at theta, the complex values viewed as 2-D real vectors;
    contributions are summed over pairs. By default the steering ratio
    is taken in the same (m, n) order as the observation so a source
    exactly at theta scores 1 per pair; `literal_index_order` flips it.
    """
    if len(specs) < 2:
        raise ConfigError("angle_feature needs at least 2 channels")
    if not geometry.pairs:
        raise ConfigError("angle_feature: no microphone pairs configured")
    cfg = specs[0].config
    freqs = cfg.freqs_hz()
    pos = np.asarray(geometry.positions)
    out = np.zeros(specs[0].data.shape)
    for m, n in geometry.pairs:
        d = pos[m] - pos[n]
        if literal_index_order:
            d = -d
        phi = 2.0 * np.pi * freqs * d / geometry.sound_speed
        g = np.exp(-1j * phi * np.cos(theta))  # steering ratio, unit magnitude
        r = specs[m].data * np.conj(specs[n].data)  # same direction as y_m / y_n
        mag = np.abs(r)
        safe = np.where(mag > 0, mag, 1.0)
        # <vec(g), vec(r)>/(|g||r|) == Re(g * conj(r)) / |r| since |g| == 1
        out += np.where(mag > 0, (g[:, None] * np.conj(r)).real / safe, 0.0)
    return out


def lps(spec, eps=1e-10, normalize=True):
    """Log-power spectrum, optionally standardized per utterance."""
    feat = np.log(np.abs(spec.data) ** 2 + eps)
    if normalize:
        feat = (feat - feat.mean()) / (feat.std() + 1e-8)
    return feat


def apply_cirm(mask_re, mask_im, spec):
    """Apply a complex ratio mask to a spectrogram (per-bin complex multiply)."""
    if mask_re.shape != spec.data.shape or mask_im.shape != spec.data.shape:
        raise ConfigError(
            f"apply_cirm: mask {mask_re.shape} vs spectrogram {spec.data.shape}"
        )
    if not (np.isfinite(mask_re).all() and np.isfinite(mask_im).all()):
        raise ValueError("apply_cirm: mask contains non-finite values")
    return Spectrogram((mask_re + 1j * mask_im) * spec.data, spec.config)


# -- SI-SNR -------------------------------------------------------------------


def si_snr(estimate, target, cap_db=60.0, eps=1e-8):
    """Scale-invariant SNR in dB, both signals mean-removed first.

    The estimate is normalized to unit energy before projection, which
    makes the returned value exactly invariant to (nonzero) rescaling;
    the result is clipped to +-cap_db.
    """
    est = np.asarray(estimate, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if est.shape != tgt.shape:
        raise ValueError(f"si_snr: length mismatch {est.shape} vs {tgt.shape}")
    tgt = tgt - tgt.mean()
    t_energy = np.dot(tgt, tgt)
    if t_energy == 0.0:
        raise ValueError("si_snr: target has zero energy")
    est = est - est.mean()
    e_norm = np.linalg.norm(est)
    if e_norm == 0.0:
        return -cap_db
    est = est / e_norm
    s_t = (np.dot(est, tgt) / t_energy) * tgt
    e = est - s_t
    ratio = np.dot(s_t, s_t) / (np.dot(e, e) + eps)
    val = 10.0 * np.log10(max(ratio, 1e-30))
    return float(np.clip(val, -cap_db, cap_db))


def si_snr_loss(estimate, target, eps=1e-8):
    """Negative SI-SNR as a differentiable scalar Tensor.

    `estimate` is a waveform Tensor; `target` a plain array. No clipping,
    so gradients stay clean; eps keeps the loss finite on exact
    reconstructions.
    """
    tgt = np.asarray(target, dtype=estimate.data.dtype)
    tgt = tgt - tgt.mean()
    t_energy = float(np.dot(tgt, tgt))
    if t_energy == 0.0:
        raise ValueError("si_snr_loss: target has zero energy")
    tgt_t = tz.Tensor(tgt, dtype=estimate.data.dtype)

    est = estimate - tz.tmean(estimate)
    dot = tz.tsum(est * tgt_t)
    s_t = (dot / t_energy) * tgt_t
    e = est - s_t
    ratio = (tz.tsum(s_t * s_t) + eps) / (tz.tsum(e * e) + eps)
    ln10 = float(np.log(10.0))
    return (-10.0 / ln10) * tz.log(ratio)


# -- WAV I/O ------------------------------------------------------------------


def write_wav(path, data, sample_rate, fmt="float32"):
    """Write mono [n] or multi-channel [n, channels] audio as RIFF WAV."""
    data = np.asarray(data)
    if fmt == "float32":
        wavfile.write(path, sample_rate, data.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(data, -1.0, 1.0 - 1.0 / 32768.0)
        wavfile.write(path, sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ConfigError(f"unsupported wav format {fmt!r}")


def read_wav(path, expect_sample_rate=None):
    """Read a WAV file to float arrays; PCM16 is scaled to [-1, 1)."""
    sr, data = wavfile.read(path)
    if expect_sample_rate is not None and sr != expect_sample_rate:
        raise ConfigError(
            f"{path}: sample rate {sr} does not match configured {expect_sample_rate}"
        )
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    else:
        data = data.astype(np.float32)
    return data, sr
