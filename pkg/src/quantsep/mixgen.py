"""Synthetic multi-channel overlapped-speech scene generation.

Two speech-like sources (harmonic stacks with wandering F0 plus filtered
noise bursts) are placed at known angles and propagated to a linear
array under a far-field anechoic plane-wave model. Fractional
inter-channel delays are applied in the frequency domain (an exact
phase ramp), so the spatial features measured from the simulated
channels match their analytic values.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .dsp import ArrayGeometry, ConfigError

ANGLE_BUCKETS_DEG = ((0.0, 15.0), (15.0, 45.0), (45.0, 90.0), (90.0, 180.0))


def bucket_of(delta_deg):
    """Index of the between-speaker-angle bucket for reporting."""
    for i, (lo, hi) in enumerate(ANGLE_BUCKETS_DEG):
        if lo <= delta_deg <= hi:
            return i
    raise ValueError(f"angle difference {delta_deg} outside [0, 180]")


@dataclasses.dataclass(frozen=True)
class MixGenConfig:
    sample_rate: int = 16000
    n_samples: int = 16128  # 62 STFT frames at the default 512/256 front-end
    n_sources: int = 2
    sir_db: float = 0.0
    overlap: float = 0.85
    # 4-channel scaled-down noneven linear array
    mic_positions: tuple = (0.0, 0.04, 0.10, 0.18)
    sound_speed: float = 343.0
    pairs: tuple = ((0, 1), (0, 2), (0, 3))

    def geometry(self):
        return ArrayGeometry(self.mic_positions, self.sound_speed, self.pairs)


@dataclasses.dataclass
class MixtureScene:
    """One simulated scene: raw sources, their per-channel images, the mix."""

    sources: list  # [n_src] mono waveforms
    thetas: list  # DOA per source, radians in [0, pi]; source 0 is the target
    images: np.ndarray  # [n_src, n_ch, n_samples] delayed per-channel signals
    mixture: np.ndarray  # [n_ch, n_samples]
    geometry: ArrayGeometry
    sample_rate: int
    sir_db: float
    overlap: float
    seed: int

    @property
    def target_ref(self):
        """Target-source image at the reference channel (the training target)."""
        return self.images[0, 0]

    @property
    def delta_deg(self):
        return abs(math.degrees(self.thetas[0]) - math.degrees(self.thetas[1]))

    @property
    def bucket(self):
        return bucket_of(self.delta_deg)


def fractional_delay(wave, delay_s, sample_rate):
    """Delay a signal by an exact (circular) frequency-domain phase ramp.

    The Nyquist bin of a real signal cannot carry a fractional phase
    shift, so it is zeroed; sources are generated Nyquist-free to match.
    """
    n = len(wave)
    spec = np.fft.rfft(wave)
    freqs = np.arange(len(spec)) * sample_rate / n
    spec = spec * np.exp(-2j * np.pi * freqs * delay_s)
    if n % 2 == 0:
        spec[-1] = 0.0
    return np.fft.irfft(spec, n=n)


def speech_like(n_samples, sample_rate, rng):
    """Speech-like test signal: AM harmonic stack with a wandering F0
    (80-300 Hz) plus band-limited noise bursts."""
    t = np.arange(n_samples) / sample_rate

    # slowly wandering fundamental
    f0_base = rng.uniform(90.0, 280.0)
    wander = np.cumsum(rng.standard_normal(n_samples)) / np.sqrt(n_samples)
    wander = wander / (np.abs(wander).max() + 1e-9)
    f0 = np.clip(f0_base * (1.0 + 0.15 * wander), 80.0, 300.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    # syllable-rate amplitude envelope from smoothed noise; the high power
    # deepens the pauses, keeping the mixture sparse in TF like real speech
    env = _smooth_noise(n_samples, sample_rate, cutoff_hz=rng.uniform(2.5, 6.0), rng=rng)
    env = np.maximum(env, 0.0) ** 2.5
    env /= env.max() + 1e-9

    voiced = np.zeros(n_samples)
    k_max = int(4000.0 / f0_base)
    for k in range(1, max(k_max, 2) + 1):
        amp = (1.0 / k) * rng.uniform(0.5, 1.0)
        voiced += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    voiced *= env

    # consonant-ish noise bursts, band-limited by differencing smoothed noise
    burst_env = _smooth_noise(n_samples, sample_rate, cutoff_hz=rng.uniform(4.0, 8.0), rng=rng)
    burst_env = np.maximum(burst_env, 0.0) ** 2
    burst_env /= burst_env.max() + 1e-9
    noise = rng.standard_normal(n_samples)
    noise = np.diff(noise, prepend=0.0)  # high-pass tilt
    sig = voiced + 0.12 * noise * burst_env

    sig -= sig.mean()
    if n_samples % 2 == 0:
        spec = np.fft.rfft(sig)
        spec[-1] = 0.0  # keep sources Nyquist-free so channel delays conserve energy
        sig = np.fft.irfft(spec, n=n_samples)
    rms = np.sqrt(np.mean(sig**2))
    return (0.1 * sig / (rms + 1e-12)).astype(np.float64)


def _smooth_noise(n, sample_rate, cutoff_hz, rng):
    """Low-pass random envelope via FFT-domain truncation."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(len(spec)) * sample_rate / n
    spec[freqs > cutoff_hz] = 0.0
    env = np.fft.irfft(spec, n=n)
    env -= env.min()
    return env


def simulate(config, seed):
    """Generate one MixtureScene with ground-truth DOAs.

    The angle-difference bucket is drawn uniformly over the four
    reporting buckets; the interferer is scaled so the target-to-
    interferer ratio at the reference channel equals `sir_db` exactly.
    """
    rng = np.random.default_rng(seed)
    geom = config.geometry()
    if geom.n_channels < 2:
        raise ConfigError("simulate requires at least 2 channels")

    bucket = ANGLE_BUCKETS_DEG[rng.integers(len(ANGLE_BUCKETS_DEG))]
    delta = rng.uniform(max(bucket[0], 1.0), bucket[1])
    theta1 = rng.uniform(0.0, 180.0 - delta)
    theta2 = theta1 + delta
    if rng.random() < 0.5:
        theta1, theta2 = theta2, theta1
    thetas = [math.radians(theta1), math.radians(theta2)]

    sources = [speech_like(config.n_samples, config.sample_rate, rng)
               for _ in range(config.n_sources)]

    # overlap: the interferer is silent for the leading (1-overlap) fraction
    onset = int(round((1.0 - config.overlap) * config.n_samples))
    if onset > 0:
        ramp = min(256, onset)
        gate = np.ones(config.n_samples)
        gate[:onset] = 0.0
        gate[onset : onset + ramp] = np.linspace(0.0, 1.0, ramp)
        sources[1] = sources[1] * gate

    images = np.zeros((config.n_sources, geom.n_channels, config.n_samples))
    for s, (src, theta) in enumerate(zip(sources, thetas)):
        for r, tau in enumerate(geom.delays(theta)):
            images[s, r] = fractional_delay(src, tau, config.sample_rate)

    # exact SIR at the reference channel
    e_t = np.sum(images[0, 0] ** 2)
    e_i = np.sum(images[1, 0] ** 2)
    gain = np.sqrt(e_t / (e_i * 10.0 ** (config.sir_db / 10.0)))
    sources[1] = sources[1] * gain
    images[1] *= gain

    return MixtureScene(
        sources=sources,
        thetas=thetas,
        images=images,
        mixture=images.sum(axis=0),
        geometry=geom,
        sample_rate=config.sample_rate,
        sir_db=config.sir_db,
        overlap=config.overlap,
        seed=int(seed),
    )


@dataclasses.dataclass
class SceneDataset:
    train: list
    val: list
    test: list
    config: MixGenConfig
    seed: int

    def manifest(self):
        def rows(scenes, split):
            return [
                {
                    "split": split,
                    "seed": sc.seed,
                    "theta_deg": [round(math.degrees(t), 4) for t in sc.thetas],
                    "delta_deg": round(sc.delta_deg, 4),
                    "bucket": sc.bucket,
                    "sir_db": sc.sir_db,
                    "overlap": sc.overlap,
                }
                for sc in scenes
            ]

        return {
            "seed": self.seed,
            "n_scenes": len(self.train) + len(self.val) + len(self.test),
            "scenes": rows(self.train, "train") + rows(self.val, "val") + rows(self.test, "test"),
        }


def dataset(config, n_scenes, seed, ratios=(0.9, 0.05, 0.05)):
    """Deterministic train/val/test scene splits with disjoint per-scene seeds."""
    if n_scenes < 3:
        raise ConfigError("dataset needs at least 3 scenes for 3 splits")
    n_val = max(1, int(round(n_scenes * ratios[1])))
    n_test = max(1, int(round(n_scenes * ratios[2])))
    n_train = n_scenes - n_val - n_test
    child_seeds = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint32)
    scenes = [simulate(config, int(s)) for s in child_seeds]
    return SceneDataset(
        train=scenes[:n_train],
        val=scenes[n_train : n_train + n_val],
        test=scenes[n_train + n_val :],
        config=config,
        seed=seed,
    )


def save_manifest(ds, path):
    with open(path, "w") as f:
        json.dump(ds.manifest(), f, indent=1, sort_keys=True)
