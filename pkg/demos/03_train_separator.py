"""Train a miniature separator end to end (about a minute).

Uses a 2-channel array and a 65-bin front-end so the run stays short;
the full desk-scale recipe lives in configs/desk.json.
"""

import numpy as np

import quantsep.dsp as dsp
import quantsep.mixgen as mixgen
import quantsep.sepnet as sepnet

stft_cfg = dsp.StftConfig(n_fft=128, win_length=128, hop=64)
mix_cfg = mixgen.MixGenConfig(n_samples=128 + 127 * 64, mic_positions=(0.0, 0.09),
                              pairs=((0, 1),))
sep_cfg = sepnet.SepConfig(n_bins=65, n_pairs=1, tcn_blocks=1, convs_per_block=3,
                           bottleneck=24, hidden=36)

ds = mixgen.dataset(mix_cfg, 60, seed=11)
train_ex = [sepnet.prepare_example(s, stft_cfg) for s in ds.train]
test_ex = [sepnet.prepare_example(s, stft_cfg) for s in ds.val + ds.test]
print(f"{len(train_ex)} training scenes, {len(test_ex)} held-out scenes")

model = sepnet.SepModel(sep_cfg, seed=0)
print(f"model: {model.n_params()} parameters, "
      f"{len(sepnet.quantizable_clusters(model))} quantizable clusters")

result = sepnet.train(
    model, train_ex,
    sepnet.TrainConfig(steps=400, batch_size=4, lr=2e-3, seed=0),
    stft_cfg,
)
curve = result.loss_curve
print("training loss (negative SI-SNR):",
      " -> ".join(f"{np.mean(curve[i:i + 50]):.1f}" for i in range(0, len(curve), 100)))

imps = []
for ex in test_ex:
    si, mix_si = sepnet.eval_si_snr(model, ex, stft_cfg)
    imps.append(si - mix_si)
print(f"held-out SI-SNR improvement over the raw mixture: "
      f"{np.mean(imps):.2f} dB (n={len(imps)})")
