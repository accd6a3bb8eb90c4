"""Hessian-trace and KL quantization-sensitivity profiles.

Shows the per-cluster, per-bit-width sensitivity tables that drive the
mixed-precision allocator: sensitive clusters stand out, and sensitivity
always shrinks as the bit-width grows.
"""

import numpy as np

import quantsep.dsp as dsp
import quantsep.mixgen as mixgen
import quantsep.sensitivity as sens
import quantsep.sepnet as sepnet

stft_cfg = dsp.StftConfig(n_fft=128, win_length=128, hop=64)
mix_cfg = mixgen.MixGenConfig(n_samples=128 + 63 * 64, mic_positions=(0.0, 0.09),
                              pairs=((0, 1),))
sep_cfg = sepnet.SepConfig(n_bins=65, n_pairs=1, tcn_blocks=1, convs_per_block=2,
                           bottleneck=16, hidden=24)

ds = mixgen.dataset(mix_cfg, 24, seed=4)
train_ex = [sepnet.prepare_example(s, stft_cfg) for s in ds.train]
model = sepnet.SepModel(sep_cfg, seed=0)
sepnet.train(model, train_ex, sepnet.TrainConfig(steps=250, batch_size=4, lr=2e-3,
                                                 seed=0), stft_cfg)

probes = train_ex[:2]
hes = sens.hessian_sensitivity(model, probes, stft_cfg, m=4, seed=0)
kl = sens.kl_sensitivity(model, probes, stft_cfg)

print(f"{'cluster':<28}{'params':>7} | Hes trace |"
      f" {'Hes@2':>9}{'Hes@16':>9} | {'KL@2':>9}{'KL@16':>9}")
for cid, count in hes.clusters:
    tr = hes.traces[cid]
    print(f"{cid:<28}{count:>7} | {tr:>9.2e} | {hes.omega[cid][2]:>9.2e}"
          f"{hes.omega[cid][16]:>9.2e} | {kl.omega[cid][2]:>9.2e}"
          f"{kl.omega[cid][16]:>9.2e}")

both = []
for prof, name in ((hes, "Hes"), (kl, "KL")):
    order = sorted(prof.omega, key=lambda c: -prof.omega[c][2])
    both.append(order[:3])
    print(f"most {name}-sensitive clusters at 2 bits: {', '.join(order[:3])}")
overlap = set(both[0]) & set(both[1])
print(f"agreement between the two metrics (top 3): {sorted(overlap) or 'none'}")
