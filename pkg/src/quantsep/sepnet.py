"""TF-masking separation model and its training loop.

The model follows the Conv-TasNet TCN recipe: concatenated LPS + IPD +
angle features are projected by a 1x1 conv into a bottleneck, run
through stacked dilated 1-D ConvBlocks (1x1 conv, PReLU, global layer
norm, depthwise conv, PReLU, norm, 1x1 conv, with residual and skip
connections), and a 1x1 mask head emits the real and imaginary parts of
a complex ratio mask. Training minimizes negative SI-SNR of the
reconstructed time-domain target.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from collections import OrderedDict

import numpy as np

from . import dsp
from . import tensor as tz
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending batch index."""


class CheckpointError(ValueError):
    """Checkpoint does not match the model census / architecture."""


@dataclasses.dataclass(frozen=True)
class SepConfig:
    """Desk-scale default: 2 TCN blocks of 4 ConvBlocks (dilations 1,2,4,8),
    bottleneck 64, hidden 128, kernel 3 on a 257-bin front-end."""

    n_bins: int = 257
    n_pairs: int = 3
    tcn_blocks: int = 2
    convs_per_block: int = 4
    bottleneck: int = 64
    hidden: int = 128
    kernel: int = 3
    mask_activation: str = "linear"  # or "tanh"
    ipd_encoding: str = "trig"  # or "raw"

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd (symmetric padding)")
        if self.mask_activation not in ("linear", "tanh"):
            raise ValueError(f"unknown mask activation {self.mask_activation!r}")
        if self.ipd_encoding not in ("trig", "raw"):
            raise ValueError(f"unknown ipd encoding {self.ipd_encoding!r}")

    @property
    def in_channels(self):
        # LPS + one (raw) or two (cos/sin) IPD maps per pair + AF
        per_pair = 2 if self.ipd_encoding == "trig" else 1
        return self.n_bins * (2 + per_pair * self.n_pairs)

    @property
    def out_channels(self):
        return 2 * self.n_bins


def _conv_names(block, conv):
    base = f"tcn{block}.conv{conv}"
    return base, ["conv_in", "dconv", "conv_out"]


class SepModel:
    """Parameter container plus the define-by-run forward pass."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = OrderedDict()
        rng = np.random.default_rng(seed)

        def conv_param(name, c_out, c_in_g, k):
            std = np.sqrt(2.0 / (c_in_g * k))
            self.params[f"{name}.weight"] = Tensor(
                rng.normal(0.0, std, (c_out, c_in_g, k)), requires_grad=True, dtype=dtype
            )
            self.params[f"{name}.bias"] = Tensor(
                np.zeros(c_out), requires_grad=True, dtype=dtype
            )

        def prelu_param(name):
            self.params[f"{name}.slope"] = Tensor(0.25, requires_grad=True, dtype=dtype)

        def norm_param(name, c):
            self.params[f"{name}.gain"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
            self.params[f"{name}.bias"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)

        cfg = config
        conv_param("input_proj", cfg.bottleneck, cfg.in_channels, 1)
        for b in range(cfg.tcn_blocks):
            for k in range(cfg.convs_per_block):
                base, _ = _conv_names(b, k)
                conv_param(f"{base}.conv_in", cfg.hidden, cfg.bottleneck, 1)
                prelu_param(f"{base}.prelu1")
                norm_param(f"{base}.norm1", cfg.hidden)
                conv_param(f"{base}.dconv", cfg.hidden, 1, cfg.kernel)
                prelu_param(f"{base}.prelu2")
                norm_param(f"{base}.norm2", cfg.hidden)
                conv_param(f"{base}.conv_out", cfg.bottleneck, cfg.hidden, 1)
        conv_param("mask_head", cfg.out_channels, cfg.bottleneck, 1)

    # -- parameter plumbing ---------------------------------------------------

    def n_params(self):
        return sum(int(p.data.size) for p in self.params.values())

    def copy(self):
        dup = SepModel.__new__(SepModel)
        dup.config = self.config
        dup.dtype = self.dtype
        dup.params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True, dtype=self.dtype))
            for k, v in self.params.items()
        )
        return dup

    def astype(self, dtype):
        dup = SepModel.__new__(SepModel)
        dup.config = self.config
        dup.dtype = dtype
        dup.params = OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype))
            for k, v in self.params.items()
        )
        return dup

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward --------------------------------------------------------------

    def forward(self, feats, return_head=False, param_overrides=None, conv_hook=None):
        """Features [C, T] -> complex mask (real, imag) Tensors of [F, T].

        param_overrides substitutes weight Tensors by parameter name (used
        by the architecture search to mix quantized branches in weight
        space); conv_hook may replace whole conv sublayers (output-space
        mixing). Defaults leave the stored parameters in charge.
        """
        cfg = self.config
        if feats.shape[0] != cfg.in_channels:
            raise tz.ShapeError(
                f"forward: {feats.shape[0]} feature channels, model expects"
                f" {cfg.in_channels}"
            )
        p = self.params
        ov = param_overrides or {}

        def conv(name, x, dilation=1, groups=1):
            if conv_hook is not None:
                out = conv_hook(name, x, dilation, groups)
                if out is not None:
                    return out
            w = ov.get(f"{name}.weight", p[f"{name}.weight"])
            return tz.conv1d(x, w, p[f"{name}.bias"], dilation=dilation, groups=groups)

        x = feats if isinstance(feats, Tensor) else Tensor(feats, dtype=self.dtype)
        x = conv("input_proj", x)
        skip = None
        for b in range(cfg.tcn_blocks):
            for k in range(cfg.convs_per_block):
                base, _ = _conv_names(b, k)
                y = conv(f"{base}.conv_in", x)
                y = tz.prelu(y, p[f"{base}.prelu1.slope"])
                y = tz.glob_layer_norm(y, p[f"{base}.norm1.gain"], p[f"{base}.norm1.bias"])
                y = conv(f"{base}.dconv", y, dilation=2**k, groups=cfg.hidden)
                y = tz.prelu(y, p[f"{base}.prelu2.slope"])
                y = tz.glob_layer_norm(y, p[f"{base}.norm2.gain"], p[f"{base}.norm2.bias"])
                y = conv(f"{base}.conv_out", y)
                skip = y if skip is None else skip + y
                x = x + y
        head = conv("mask_head", skip)
        if cfg.mask_activation == "tanh":
            head = tz.tanh(head)
        re = tz.slice_rows(head, 0, cfg.n_bins)
        im = tz.slice_rows(head, cfg.n_bins, 2 * cfg.n_bins)
        if return_head:
            return re, im, head
        return re, im


# -- feature preparation --------------------------------------------------


@dataclasses.dataclass
class TrainExample:
    """Precomputed per-scene training inputs."""

    feats: np.ndarray  # [C, T] float32
    ref_re: np.ndarray  # [F, T] float32
    ref_im: np.ndarray  # [F, T] float32
    target: np.ndarray  # [n] float32, target image at the reference mic
    mixture_ref: np.ndarray  # [n] float32, reference-channel mixture
    bucket: int
    scene_seed: int


def prepare_example(scene, stft_cfg, lps_norm=True, ipd_encoding="trig"):
    """Assemble LPS + IPD + AF input features and training targets.

    ipd_encoding "trig" feeds cos/sin of each pair's phase difference
    (wrap-free, the variant the network trains best on at this scale);
    "raw" feeds the wrapped radians directly.
    """
    specs = [dsp.stft(ch, stft_cfg) for ch in scene.mixture]
    ref = specs[0]
    geom = scene.geometry
    rows = [dsp.lps(ref, normalize=lps_norm)]
    for m, n in geom.pairs:
        phase = dsp.ipd(specs[m], specs[n])
        if ipd_encoding == "trig":
            rows += [np.cos(phase), np.sin(phase)]
        elif ipd_encoding == "raw":
            rows += [phase]
        else:
            raise ValueError(f"unknown ipd encoding {ipd_encoding!r}")
    rows += [dsp.angle_feature(specs, scene.thetas[0], geom)]
    feats = np.concatenate(rows, axis=0).astype(np.float32)
    n = stft_cfg.n_samples(ref.n_frames)
    return TrainExample(
        feats=feats,
        ref_re=ref.data.real.astype(np.float32),
        ref_im=ref.data.imag.astype(np.float32),
        target=scene.target_ref[:n].astype(np.float32),
        mixture_ref=scene.mixture[0, :n].astype(np.float32),
        bucket=scene.bucket,
        scene_seed=scene.seed,
    )


def loss_region(stft_cfg, n_samples):
    """Fully-overlapped interior of the resynthesis.

    The first and last half-window of a normalized overlap-add divide by
    a vanishing window sum, which amplifies mask errors without bound;
    losses and metrics are computed on the interior only.
    """
    return slice(stft_cfg.win_length, n_samples - stft_cfg.win_length)


def scene_loss(model, example, stft_cfg, **forward_kwargs):
    """Negative SI-SNR of the masked, resynthesized target for one scene."""
    re, im = model.forward(example.feats, **forward_kwargs)
    y_re = Tensor(example.ref_re, dtype=model.dtype)
    y_im = Tensor(example.ref_im, dtype=model.dtype)
    x_re = re * y_re - im * y_im
    x_im = re * y_im + im * y_re
    wave = dsp.istft_tensor(x_re, x_im, stft_cfg)
    region = loss_region(stft_cfg, wave.data.shape[0])
    wave = tz.slice_rows(wave, region.start, region.stop)
    return dsp.si_snr_loss(wave, example.target[region])


def separate(model, example, stft_cfg):
    """Run the model on one scene and return the estimated waveform."""
    re, im = model.forward(example.feats)
    x_re = re.data * example.ref_re - im.data * example.ref_im
    x_im = re.data * example.ref_im + im.data * example.ref_re
    spec = dsp.Spectrogram(x_re + 1j * x_im, stft_cfg)
    return dsp.istft(spec)


def eval_si_snr(model, example, stft_cfg, cap_db=60.0):
    """Held-out metrics on the interior region: (estimate SI-SNR,
    mixture-as-estimate SI-SNR)."""
    est = separate(model, example, stft_cfg)
    region = loss_region(stft_cfg, len(est))
    return (
        dsp.si_snr(est[region], example.target[region], cap_db),
        dsp.si_snr(example.mixture_ref[region], example.target[region], cap_db),
    )


# -- training ---------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 4
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # optional decay schedule: when set, overrides steps/lr/batch_size with
    # consecutive (steps, lr, batch_size) phases; the batch sampler reseeds
    # per phase and the Adam state restarts with each new learning rate
    phases: tuple = ()


@dataclasses.dataclass
class TrainResult:
    loss_curve: list
    epoch_means: list


class Adam:
    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        c = self.cfg
        self.t += 1
        bias1 = 1.0 - c.adam_beta1**self.t
        bias2 = 1.0 - c.adam_beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = c.adam_beta1 * self.m[k] + (1 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1 - c.adam_beta2) * g * g
            mhat = self.m[k] / bias1
            vhat = self.v[k] / bias2
            p.data -= (c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)).astype(p.data.dtype)


def _clip_grads(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def train(model, examples, cfg, stft_cfg):
    """Train in place; returns per-step losses and per-epoch means.

    Batch order is a seeded permutation per epoch; gradients are averaged
    over the batch, clipped by global norm, and applied with Adam.
    """
    if cfg.phases:
        curve, epochs = [], []
        for i, (steps, lr, batch_size) in enumerate(cfg.phases):
            phase_cfg = dataclasses.replace(
                cfg, phases=(), steps=int(steps), lr=float(lr),
                batch_size=int(batch_size), seed=cfg.seed + i,
            )
            res = train(model, examples, phase_cfg, stft_cfg)
            curve.extend(res.loss_curve)
            epochs.extend(res.epoch_means)
        return TrainResult(loss_curve=curve, epoch_means=epochs)
    if not examples:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    losses = []
    epoch_means = []
    epoch_losses = []
    order = rng.permutation(len(examples))
    pos = 0
    for step in range(cfg.steps):
        batch_idx = []
        while len(batch_idx) < cfg.batch_size:
            if pos == len(order):
                if epoch_losses:
                    epoch_means.append(float(np.mean(epoch_losses)))
                    epoch_losses = []
                order = rng.permutation(len(examples))
                pos = 0
            batch_idx.append(int(order[pos]))
            pos += 1

        model.zero_grad()
        batch_loss = 0.0
        for i in batch_idx:
            loss = scene_loss(model, examples[i], stft_cfg)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at step {step}, scene index {i}")
            loss.backward()
            batch_loss += loss.item()
        batch_loss /= len(batch_idx)
        if cfg.lr != 0.0:
            for p in model.params.values():
                if p.grad is not None:
                    p.grad /= len(batch_idx)
            _clip_grads(model.params, cfg.clip_norm)
            opt.step()
        losses.append(batch_loss)
        epoch_losses.append(batch_loss)
    if epoch_losses:
        epoch_means.append(float(np.mean(epoch_losses)))
    return TrainResult(loss_curve=losses, epoch_means=epoch_means)


# -- census -------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CensusEntry:
    cluster_id: str
    count: int
    kind: str
    quantizable: bool
    params: tuple  # backing parameter names


_KIND_BY_SUFFIX = {
    "conv_in.weight": "conv1x1",
    "conv_in.bias": "bias",
    "conv_out.weight": "conv1x1",
    "conv_out.bias": "bias",
    "dconv.weight": "dconv",
    "dconv.bias": "bias",
    "input_proj.weight": "conv1x1",
    "input_proj.bias": "bias",
    "mask_head.weight": "conv1x1",
    "mask_head.bias": "bias",
    "prelu1.slope": "prelu",
    "prelu2.slope": "prelu",
    "norm1.gain": "gln",
    "norm1.bias": "gln",
    "norm2.gain": "gln",
    "norm2.bias": "gln",
}


def _param_kind(name):
    for suffix, kind in _KIND_BY_SUFFIX.items():
        if name.endswith(suffix):
            return kind
    raise KeyError(f"unknown parameter {name}")


def census(model, granularity="sublayer"):
    """Enumerate weight clusters: every trainable tensor appears exactly once,
    so the counts sum to the parameter total. Only conv weight matrices are
    quantizable; biases, norm gains and PReLU slopes stay full precision.

    granularity "sublayer" makes each conv weight its own cluster (the
    default); "block" merges the three conv weights of each ConvBlock.
    """
    if granularity not in ("sublayer", "block"):
        raise ValueError(f"unknown census granularity {granularity!r}")
    entries = []
    if granularity == "sublayer":
        for name, p in model.params.items():
            kind = _param_kind(name)
            quant = name.endswith(".weight") and kind in ("conv1x1", "dconv")
            entries.append(
                CensusEntry(name, int(p.data.size), kind, quant, (name,))
            )
        return entries

    # block granularity: merge the conv weights inside each ConvBlock
    merged = OrderedDict()
    for name, p in model.params.items():
        kind = _param_kind(name)
        quant = name.endswith(".weight") and kind in ("conv1x1", "dconv")
        if quant and name.startswith("tcn"):
            block_id = name.rsplit(".", 2)[0]  # tcn{b}.conv{k}
            merged.setdefault(block_id, []).append(name)
        else:
            entries.append(CensusEntry(name, int(p.data.size), kind, quant, (name,)))
    for block_id, names in merged.items():
        count = sum(int(model.params[n].data.size) for n in names)
        entries.append(CensusEntry(block_id, count, "convblock", True, tuple(names)))
    return entries


def quantizable_clusters(model, granularity="sublayer"):
    return [e for e in census(model, granularity) if e.quantizable]


def get_cluster_values(model, entry):
    return np.concatenate([model.params[n].data.ravel() for n in entry.params])


def set_cluster_values(model, entry, flat):
    flat = np.asarray(flat)
    if flat.size != entry.count:
        raise CheckpointError(
            f"cluster {entry.cluster_id}: got {flat.size} values, expected {entry.count}"
        )
    off = 0
    for n in entry.params:
        p = model.params[n]
        size = p.data.size
        p.data = flat[off : off + size].reshape(p.data.shape).astype(model.dtype)
        off += size


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model, directory):
    """Write model.json (manifest) + model.bin (raw little-endian float32)."""
    os.makedirs(directory, exist_ok=True)
    chunks = []
    manifest_params = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data.astype("<f4"))
        buf = raw.tobytes()
        manifest_params.append(
            {
                "id": name,
                "shape": list(p.data.shape),
                "offset": offset,
                "nbytes": len(buf),
                "kind": _param_kind(name),
            }
        )
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {
        "format": "quantsep-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": dataclasses.asdict(model.config),
        "params": manifest_params,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(os.path.join(directory, "model.bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(directory, "model.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest["blob_sha256"]


def load_checkpoint(directory):
    with open(os.path.join(directory, "model.json")) as f:
        manifest = json.load(f)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    with open(os.path.join(directory, "model.bin"), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("checkpoint blob does not match its recorded SHA-256")
    model = SepModel(SepConfig(**manifest["arch"]))
    names = set(model.params)
    for entry in manifest["params"]:
        if entry["id"] not in names:
            raise CheckpointError(f"checkpoint parameter {entry['id']} unknown to model")
        arr = np.frombuffer(
            blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"]
        ).reshape(entry["shape"])
        p = model.params[entry["id"]]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"checkpoint parameter {entry['id']} shape {arr.shape} !="
                f" model shape {p.data.shape}"
            )
        p.data = arr.astype(np.float32)
        names.discard(entry["id"])
    if names:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(names)[:3]}")
    return model


def checkpoint_hash(directory):
    with open(os.path.join(directory, "model.json")) as f:
        return json.load(f)["blob_sha256"]
