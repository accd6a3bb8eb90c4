"""Shared small-scale fixtures: a 65-bin front-end, 2-channel array and a
matching miniature separation model keep the unit suites fast."""

import numpy as np
import pytest

import quantsep.dsp as dsp
import quantsep.mixgen as mixgen
import quantsep.sepnet as sepnet

TINY_STFT = dsp.StftConfig(sample_rate=16000, n_fft=128, win_length=128, hop=64)
TINY_MIX = mixgen.MixGenConfig(
    n_samples=128 + 63 * 64,  # 64 frames
    mic_positions=(0.0, 0.08),
    pairs=((0, 1),),
)
TINY_SEP = sepnet.SepConfig(
    n_bins=65, n_pairs=1, tcn_blocks=1, convs_per_block=2, bottleneck=12, hidden=16
)


@pytest.fixture(scope="session")
def tiny_stft():
    return TINY_STFT


@pytest.fixture(scope="session")
def tiny_examples():
    scenes = [mixgen.simulate(TINY_MIX, seed=s) for s in range(4)]
    return [sepnet.prepare_example(s, TINY_STFT) for s in scenes]


@pytest.fixture(scope="session")
def tiny_model():
    return sepnet.SepModel(TINY_SEP, seed=1)


@pytest.fixture(scope="session")
def trained_tiny_model(tiny_examples):
    """A briefly trained miniature model; session-scoped because several
    suites (quant, sensitivity, nas) reuse it."""
    model = sepnet.SepModel(TINY_SEP, seed=1)
    sepnet.train(
        model,
        tiny_examples,
        sepnet.TrainConfig(steps=120, batch_size=2, seed=0),
        TINY_STFT,
    )
    return model
