"""Spatial features on a simulated two-speaker scene.

Simulates a 4-microphone far-field mixture, then shows how the
inter-channel phase differences follow the analytic delay ramp and how
the angle feature concentrates around the direction it is steered to.
"""

import numpy as np

import quantsep.dsp as dsp
import quantsep.mixgen as mixgen

stft_cfg = dsp.StftConfig()
mix_cfg = mixgen.MixGenConfig()
scene = mixgen.simulate(mix_cfg, seed=7)
geom = scene.geometry

print(f"sources at {np.degrees(scene.thetas[0]):.1f} and "
      f"{np.degrees(scene.thetas[1]):.1f} degrees "
      f"(bucket {scene.bucket}), SIR {scene.sir_db} dB")

specs = [dsp.stft(ch, stft_cfg) for ch in scene.mixture]

# IPD of the widest pair against the analytic phase ramp of the target
m, n = geom.pairs[-1]
taus = geom.delays(scene.thetas[0])
freqs = stft_cfg.freqs_hz()
measured = dsp.ipd(specs[m], specs[n])
analytic = np.angle(np.exp(-1j * 2 * np.pi * freqs * (taus[m] - taus[n])))
energy = np.abs(specs[0].data)
strong = energy > np.quantile(energy, 0.9)
dev = np.angle(np.exp(1j * (measured - analytic[:, None])))
print(f"pair ({m},{n}): IPD deviation from the target ramp on strong bins: "
      f"{np.sqrt(np.mean(dev[strong] ** 2)):.3f} rad RMS")
print("(nonzero because the interferer occupies many of those bins)")

# the angle feature peaks at the true target direction
for offset in (0.0, -30.0, 30.0):
    theta = scene.thetas[0] + np.deg2rad(offset)
    af = dsp.angle_feature(specs, theta, geom)
    print(f"AF steered {offset:+5.1f} deg off target: "
          f"mean over strong bins {af[strong].mean():.3f} (max {len(geom.pairs)})")

# steering vector sanity: the reference element is always 1
g = dsp.steering_vector(scene.thetas[0], 1000.0, geom)
print("steering vector at 1 kHz:", np.round(g, 3))
