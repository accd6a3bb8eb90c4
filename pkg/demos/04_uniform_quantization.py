"""Uniform post-training quantization at 2/4/8/16 bits.

Trains the miniature separator briefly, then sweeps the global
bit-width and prints the size/quality trade-off.
"""

import numpy as np

import quantsep.dsp as dsp
import quantsep.mixgen as mixgen
import quantsep.quant as quant
import quantsep.sepnet as sepnet

stft_cfg = dsp.StftConfig(n_fft=128, win_length=128, hop=64)
mix_cfg = mixgen.MixGenConfig(n_samples=128 + 127 * 64, mic_positions=(0.0, 0.09),
                              pairs=((0, 1),))
sep_cfg = sepnet.SepConfig(n_bins=65, n_pairs=1, tcn_blocks=1, convs_per_block=3,
                           bottleneck=24, hidden=36)

ds = mixgen.dataset(mix_cfg, 40, seed=3)
train_ex = [sepnet.prepare_example(s, stft_cfg) for s in ds.train]
test_ex = [sepnet.prepare_example(s, stft_cfg) for s in ds.val + ds.test]
model = sepnet.SepModel(sep_cfg, seed=0)
sepnet.train(model, train_ex, sepnet.TrainConfig(steps=300, batch_size=4, lr=2e-3,
                                                 seed=0), stft_cfg)

census = sepnet.census(model)
entries = [e for e in census if e.quantizable]


def heldout(m):
    vals = [sepnet.eval_si_snr(m, ex, stft_cfg)[0] for ex in test_ex]
    return float(np.mean(vals))


fp_quality = heldout(model)
fp_bytes = model.n_params() * 4
print(f"{'system':<10}{'SI-SNR dB':>10}{'size bytes':>12}{'ratio':>7}")
print(f"{'fp32':<10}{fp_quality:>10.2f}{fp_bytes:>12}{1.0:>7.1f}")

for n in (16, 8, 4, 2):
    bits_map = {e.cluster_id: n for e in entries}
    packed = quant.quantize_model(model, bits_map)
    restored = quant.dequantize_model(packed, model)
    size = quant.model_size(census, bits_map)
    print(f"{f'uniform{n}':<10}{heldout(restored):>10.2f}{size.total_bytes:>12}"
          f"{size.end_to_end_ratio:>7.1f}")
