"""Mixed-precision architecture search over frozen quantized branches.

A super-network holds, for every weight cluster, that cluster's values
quantized at each candidate bit-width. Per-cluster softmax architecture
weights mix the branches (in weight space by default; output-space
mixing is selectable and mathematically identical for these linear
sublayers). Only the selection logits train, by SGD on the SI-SNR task
loss plus a beta-weighted sqrt(bits) complexity penalty; if a target
average bit-width is missed, beta doubles and the search restarts.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import quant, sepnet
from .alloc import PrecisionAssignment
from .tensor import Tensor


class NasError(RuntimeError):
    pass


@dataclasses.dataclass
class SuperNet:
    base: "sepnet.SepModel"  # structure and full-precision unquantized params
    granularity: str
    entries: list  # quantizable census entries, census order
    candidates: list  # ascending bit-widths
    branches: dict  # param name -> {bits: np.ndarray}
    logits: np.ndarray  # [n_clusters, n_candidates]

    @property
    def n_clusters(self):
        return len(self.entries)

    def mixing_weights(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def selection(self):
        """argmax branch per cluster (invariant to per-cluster logit shifts)."""
        a = self.mixing_weights()
        return {
            e.cluster_id: self.candidates[int(np.argmax(a[i]))]
            for i, e in enumerate(self.entries)
        }


def build_supernet(uniform_models, granularity="sublayer"):
    """Connect uniform-precision quantized models into one search space.

    uniform_models maps bit-width -> SepModel; all models must share the
    same census. Logits start at zero (uniform mixing).
    """
    if not uniform_models:
        raise NasError("build_supernet needs at least one uniform model")
    candidates = sorted(int(n) for n in uniform_models)
    ref = uniform_models[candidates[-1]]
    ref_entries = sepnet.quantizable_clusters(ref, granularity)
    ref_census = [(e.cluster_id, e.count) for e in ref_entries]
    for n, model in uniform_models.items():
        entries = sepnet.quantizable_clusters(model, granularity)
        if [(e.cluster_id, e.count) for e in entries] != ref_census:
            raise NasError(f"census mismatch between uniform models (bits={n})")
    branches = {}
    for e in ref_entries:
        for pname in e.params:
            branches[pname] = {
                int(n): uniform_models[n].params[pname].data.copy()
                for n in candidates
            }
    return SuperNet(
        base=ref.copy(),
        granularity=granularity,
        entries=ref_entries,
        candidates=candidates,
        branches=branches,
        logits=np.zeros((len(ref_entries), len(candidates))),
    )


def supernet_from_model(model, candidates=(2, 4, 8, 16), granularity="sublayer",
                        scale_method="mse"):
    """PTQ the trained model at every candidate width and wrap the copies
    in a SuperNet (the uniform branches are not retrained)."""
    uniform = {}
    for n in candidates:
        bits_map = {
            e.cluster_id: n for e in sepnet.quantizable_clusters(model, granularity)
        }
        packed = quant.quantize_model(model, bits_map, granularity, scale_method)
        uniform[int(n)] = quant.dequantize_model(packed, model)
    return build_supernet(uniform, granularity)


def _mixed_loss(sn, example, stft_cfg, a_tensors, mixing):
    """Task loss of one scene under the current mixture; gradients land on
    the per-cluster, per-branch scalar Tensors in a_tensors."""
    if mixing == "weight":
        overrides = {}
        for i, e in enumerate(sn.entries):
            for pname in e.params:
                acc = None
                for j, n in enumerate(sn.candidates):
                    term = a_tensors[i][j] * Tensor(sn.branches[pname][n])
                    acc = term if acc is None else acc + term
                overrides[pname] = acc
        return sepnet.scene_loss(sn.base, example, stft_cfg, param_overrides=overrides)

    if mixing != "output":
        raise NasError(f"unknown mixing mode {mixing!r}")
    cluster_of = {}
    for i, e in enumerate(sn.entries):
        for pname in e.params:
            cluster_of[pname] = i

    def conv_hook(name, x, dilation, groups):
        import quantsep.tensor as tz

        pname = f"{name}.weight"
        if pname not in cluster_of:
            return None
        i = cluster_of[pname]
        bias = sn.base.params[f"{name}.bias"]
        acc = None
        for j, n in enumerate(sn.candidates):
            # per-branch conv keeps the shared bias: the mixture weights sum to 1
            y = tz.conv1d(x, Tensor(sn.branches[pname][n]), bias, dilation=dilation,
                          groups=groups)
            term = a_tensors[i][j] * y
            acc = term if acc is None else acc + term
        return acc

    return sepnet.scene_loss(sn.base, example, stft_cfg, conv_hook=conv_hook)


def penalty_value(a, candidates, beta):
    """beta * sum over clusters and branches of a * sqrt(bits)."""
    roots = np.sqrt(np.asarray(candidates, dtype=np.float64))
    return float(beta * (a * roots[None, :]).sum())


def search(
    sn,
    examples,
    stft_cfg,
    beta=0.5,
    lr=1e-2,
    steps=400,
    batch_size=2,
    seed=0,
    target_avg_bits=None,
    max_rounds=5,
    mixing="weight",
):
    """Train the selection logits and return the argmax precision assignment.

    Each round runs `steps` SGD updates of the logits on the task loss
    plus the complexity penalty. If the achieved average bit-width
    exceeds target_avg_bits, beta is doubled and the logits reset, up to
    max_rounds rounds; the final achieved average is reported either way.
    """
    if beta < 0:
        raise NasError("beta must be nonnegative")
    counts = np.array([e.count for e in sn.entries], dtype=np.float64)
    roots = np.sqrt(np.asarray(sn.candidates, dtype=np.float64))
    rounds = []
    loss_curve = []
    cur_beta = float(beta)
    for round_idx in range(max_rounds):
        sn.logits = np.zeros_like(sn.logits)
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(examples))
        pos = 0
        for step in range(steps):
            batch = []
            while len(batch) < batch_size:
                if pos == len(order):
                    order = rng.permutation(len(examples))
                    pos = 0
                batch.append(examples[int(order[pos])])
                pos += 1
            a = sn.mixing_weights()
            a_tensors = [
                [Tensor(a[i, j], requires_grad=True) for j in range(len(sn.candidates))]
                for i in range(sn.n_clusters)
            ]
            task_loss = 0.0
            for ex in batch:
                loss = _mixed_loss(sn, ex, stft_cfg, a_tensors, mixing)
                if not np.isfinite(loss.data):
                    raise NasError(f"non-finite search loss at step {step}")
                loss.backward()
                task_loss += loss.item()
            task_loss /= len(batch)
            ga = np.array(
                [
                    [
                        (float(a_tensors[i][j].grad) if a_tensors[i][j].grad is not None else 0.0)
                        / len(batch)
                        for j in range(len(sn.candidates))
                    ]
                    for i in range(sn.n_clusters)
                ]
            )
            ga += cur_beta * roots[None, :]
            # softmax Jacobian: dL/dlogit = a * (dL/da - <a, dL/da>)
            glog = a * (ga - (a * ga).sum(axis=1, keepdims=True))
            sn.logits = sn.logits - lr * glog
            loss_curve.append(task_loss + penalty_value(a, sn.candidates, cur_beta))
        selection = sn.selection()
        achieved = sum(
            e.count * selection[e.cluster_id] for e in sn.entries
        ) / float(counts.sum())
        rounds.append({"round": round_idx, "beta": cur_beta, "achieved_avg_bits": achieved})
        if target_avg_bits is None or achieved <= target_avg_bits + 1e-9:
            break
        cur_beta *= 2.0
    total_bits = int(sum(e.count * selection[e.cluster_id] for e in sn.entries))
    a = sn.mixing_weights()
    return PrecisionAssignment(
        bits=selection,
        avg_bits=achieved,
        total_bits=total_bits,
        objective=float(loss_curve[-1]) if loss_curve else float("nan"),
        metric="NAS",
        budget_avg_bits=float(target_avg_bits) if target_avg_bits is not None else float("nan"),
        extra={
            "beta_history": rounds,
            "final_beta": cur_beta,
            "mixing": mixing,
            "arch_weights": a.tolist(),
        },
    )
