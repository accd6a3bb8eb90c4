"""quantsep: mixed-precision low-bit quantization for a multi-channel
TF-masking speech separator, trained and evaluated on synthetic scenes.

Submodules:
    tensor       dense tensors with reverse-mode autodiff
    dsp          STFT/iSTFT, spatial features, cIRM, SI-SNR, WAV I/O
    mixgen       synthetic multi-channel overlapped-speech scenes
    sepnet       the TCN separation model, training, census, checkpoints
    quant        symmetric low-bit PTQ, bit packing, size accounting
    sensitivity  Hessian-trace and KL quantization sensitivity profiles
    alloc        budgeted bit-width allocation (exact DP + brute force)
    nas          mixed-precision architecture search
    pipeline     cached end-to-end orchestration
    cli          the `quantsep` command
"""

__version__ = "0.1.0"
