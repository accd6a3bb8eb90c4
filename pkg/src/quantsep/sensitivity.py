"""Per-cluster, per-bit-width quantization sensitivity.

Two metrics over a fixed probe set:

* "Hes": Hessian trace per cluster (Hutchinson probes through
  finite-difference Hessian-vector products) times the squared
  quantization error at each candidate bit-width.
* "KL": quantize one cluster at a time, run full and quantized models,
  and accumulate the per-frame KL divergence between their
  sigmoid-normalized separator outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings

import numpy as np

from . import quant, sepnet


class SensitivityError(RuntimeError):
    pass


# -- Hessian-vector products ---------------------------------------------------


def hvp(grad_fn, theta, z, eps_scale=1e-3, eps_floor=1e-6):
    """Central-difference Hessian-vector product.

    grad_fn(theta) must return (loss, gradient). The step is
    eps_scale * ||theta|| / ||z||, floored at eps_floor.
    """
    theta = np.asarray(theta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != theta.shape:
        raise SensitivityError(f"hvp: z shape {z.shape} != theta shape {theta.shape}")
    z_norm = float(np.linalg.norm(z))
    if z_norm == 0.0:
        return np.zeros_like(theta)
    eps = max(eps_scale * float(np.linalg.norm(theta)) / z_norm, eps_floor)
    _, g_plus = grad_fn(theta + eps * z)
    _, g_minus = grad_fn(theta - eps * z)
    out = (np.asarray(g_plus, dtype=np.float64) - np.asarray(g_minus, dtype=np.float64)) / (
        2.0 * eps
    )
    if not np.isfinite(out).all():
        raise SensitivityError(
            f"hvp: non-finite gradient (eps={eps:.3e}, ||theta||={np.linalg.norm(theta):.3e},"
            f" ||z||={z_norm:.3e})"
        )
    return out


def _probe_vectors(rng, dim, sampler):
    if sampler == "rademacher":
        return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
    if sampler == "gaussian":
        return rng.standard_normal(dim)
    raise SensitivityError(f"unknown probe sampler {sampler!r}")


def hutchinson_trace(grad_fn, theta, m, seed, coords=None, sampler="rademacher"):
    """(1/m) sum of z^T H z over m probe draws.

    coords restricts the probe to a coordinate subset (zeros elsewhere),
    which estimates the trace of that diagonal block.
    """
    if m < 1:
        raise SensitivityError("hutchinson_trace needs m >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if coords is None:
        coords = np.arange(theta.size)
    total = 0.0
    for _ in range(m):
        z = np.zeros_like(theta)
        z[coords] = _probe_vectors(rng, len(coords), sampler)
        hz = hvp(grad_fn, theta, z)
        total += float(z @ hz)
    return total / m


def exhaustive_rademacher_trace(grad_fn, theta, coords=None, max_dim=12):
    """Average z^T H z over every +-1 sign pattern (exact for any symmetric H
    restricted to the coords block); dimension capped at max_dim."""
    theta = np.asarray(theta, dtype=np.float64)
    if coords is None:
        coords = np.arange(theta.size)
    dim = len(coords)
    if dim > max_dim:
        raise SensitivityError(f"exhaustive enumeration capped at {max_dim} dims, got {dim}")
    total = 0.0
    for pattern in range(2**dim):
        z = np.zeros_like(theta)
        signs = [1.0 if (pattern >> j) & 1 else -1.0 for j in range(dim)]
        z[coords] = signs
        total += float(z @ hvp(grad_fn, theta, z))
    return total / 2**dim


def quadratic_grad_fn(A):
    """grad_fn of the quadratic loss 0.5 * x^T A x (gradient is exactly A x)."""
    A = np.asarray(A, dtype=np.float64)

    def grad_fn(x):
        g = A @ x
        return 0.5 * float(x @ g), g

    return grad_fn


# -- model probe loss -----------------------------------------------------------


def probe_fingerprint(examples, stft_cfg):
    h = hashlib.sha256()
    h.update(json.dumps(dataclasses.asdict(stft_cfg), sort_keys=True).encode())
    for ex in examples:
        h.update(str(ex.scene_seed).encode())
        h.update(np.ascontiguousarray(ex.target).tobytes())
    return h.hexdigest()


def model_grad_fn(model, examples, stft_cfg, entries, loss_kind="sisnr"):
    """Flatten the quantizable clusters into one vector and return
    (grad_fn, theta0, slices). The loss is the probe-set mean of the
    training loss (negative SI-SNR) or of a spectrum MSE."""
    work = model.astype(np.float64)
    slices = {}
    off = 0
    for e in entries:
        slices[e.cluster_id] = slice(off, off + e.count)
        off += e.count
    theta0 = np.concatenate(
        [sepnet.get_cluster_values(model, e).astype(np.float64) for e in entries]
    )

    spec_targets = None
    if loss_kind == "spec_mse":
        from . import dsp

        spec_targets = []
        for ex in examples:
            sp = dsp.stft(ex.target, stft_cfg)
            spec_targets.append((sp.data.real, sp.data.imag))
    elif loss_kind != "sisnr":
        raise SensitivityError(f"unknown sensitivity loss {loss_kind!r}")

    def grad_fn(theta):
        for e in entries:
            sepnet.set_cluster_values(work, e, theta[slices[e.cluster_id]])
        work.zero_grad()
        total = 0.0
        for i, ex in enumerate(examples):
            if loss_kind == "sisnr":
                loss = sepnet.scene_loss(work, ex, stft_cfg)
            else:
                from . import dsp
                from .tensor import Tensor, tmean

                re, im = work.forward(ex.feats)
                y_re = Tensor(ex.ref_re, dtype=np.float64)
                y_im = Tensor(ex.ref_im, dtype=np.float64)
                x_re = re * y_re - im * y_im
                x_im = re * y_im + im * y_re
                t_re, t_im = spec_targets[i]
                d_re = x_re - Tensor(t_re, dtype=np.float64)
                d_im = x_im - Tensor(t_im, dtype=np.float64)
                loss = tmean(d_re * d_re) + tmean(d_im * d_im)
            loss = loss * (1.0 / len(examples))
            loss.backward()
            total += loss.item()
        grad = np.concatenate(
            [
                np.concatenate(
                    [work.params[n].grad.ravel() for n in e.params]
                )
                for e in entries
            ]
        )
        return total, grad

    return grad_fn, theta0, slices


# -- profiles --------------------------------------------------------------------


@dataclasses.dataclass
class SensitivityProfile:
    metric: str  # "Hes" or "KL"
    granularity: str
    candidates: list
    clusters: list  # [(cluster_id, count)] in census order
    omega: dict  # cluster_id -> {bits: value}
    traces: dict  # cluster_id -> trace estimate (Hes only)
    m: int
    seed: int
    probe_fingerprint: str
    checkpoint_sha256: str

    def to_json(self):
        return {
            "metric": self.metric,
            "granularity": self.granularity,
            "candidates": list(self.candidates),
            "clusters": [[c, int(n)] for c, n in self.clusters],
            "omega": {c: {str(b): v for b, v in row.items()} for c, row in self.omega.items()},
            "traces": self.traces,
            "m": self.m,
            "seed": self.seed,
            "probe_fingerprint": self.probe_fingerprint,
            "checkpoint_sha256": self.checkpoint_sha256,
        }

    @staticmethod
    def from_json(obj):
        return SensitivityProfile(
            metric=obj["metric"],
            granularity=obj["granularity"],
            candidates=[int(b) for b in obj["candidates"]],
            clusters=[(c, int(n)) for c, n in obj["clusters"]],
            omega={c: {int(b): float(v) for b, v in row.items()} for c, row in obj["omega"].items()},
            traces={c: float(v) for c, v in obj.get("traces", {}).items()},
            m=obj["m"],
            seed=obj["seed"],
            probe_fingerprint=obj["probe_fingerprint"],
            checkpoint_sha256=obj["checkpoint_sha256"],
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @staticmethod
    def load(path):
        with open(path) as f:
            return SensitivityProfile.from_json(json.load(f))


def _quant_error_sq(w, n, scale_method):
    if n >= 32:
        return 0.0, 0.0  # identity quantization
    alpha = quant.fit_scale(w, n, method=scale_method)
    err = w - quant.quant_dequant(w, n, alpha)
    return float(np.dot(err, err)), alpha


def hessian_sensitivity(
    model,
    examples,
    stft_cfg,
    candidates=(2, 4, 8, 16),
    m=8,
    seed=0,
    granularity="sublayer",
    scale_method="mse",
    sampler="rademacher",
    loss_kind="sisnr",
    checkpoint_sha256="",
):
    """Omega[l][n] = clamped Tr(H_l) * squared PTQ error of cluster l at n bits."""
    entries = sepnet.quantizable_clusters(model, granularity)
    grad_fn, theta0, slices = model_grad_fn(model, examples, stft_cfg, entries, loss_kind)
    cluster_seeds = np.random.SeedSequence(seed).generate_state(len(entries), dtype=np.uint32)
    omega = {}
    traces = {}
    for idx, e in enumerate(entries):
        coords = np.arange(slices[e.cluster_id].start, slices[e.cluster_id].stop)
        tr = hutchinson_trace(
            grad_fn, theta0, m, int(cluster_seeds[idx]), coords=coords, sampler=sampler
        )
        traces[e.cluster_id] = tr
        if tr < 0.0:
            warnings.warn(
                f"negative Hessian trace estimate {tr:.3e} for {e.cluster_id}; clamping to 0"
            )
            tr = 0.0
        w = sepnet.get_cluster_values(model, e).astype(np.float64)
        row = {}
        for n in candidates:
            err_sq, _ = _quant_error_sq(w, n, scale_method)
            row[int(n)] = tr * err_sq
        omega[e.cluster_id] = row
    return SensitivityProfile(
        metric="Hes",
        granularity=granularity,
        candidates=[int(n) for n in candidates],
        clusters=[(e.cluster_id, e.count) for e in entries],
        omega=omega,
        traces=traces,
        m=m,
        seed=seed,
        probe_fingerprint=probe_fingerprint(examples, stft_cfg),
        checkpoint_sha256=checkpoint_sha256,
    )


def _frame_distributions(model, examples):
    """Sigmoid-gated, per-frame-normalized separator outputs, one [D, T]
    matrix per probe scene."""
    outs = []
    for ex in examples:
        _, _, head = model.forward(ex.feats, return_head=True)
        p = 1.0 / (1.0 + np.exp(-head.data.astype(np.float64)))
        p = p / p.sum(axis=0, keepdims=True)
        outs.append(p)
    return outs


def _kl_frames(p_full, p_quant, eps=1e-10):
    """Per-frame KL(P_full || P_quant) values with eps-smoothed Q."""
    q = p_quant + eps
    q = q / q.sum(axis=0, keepdims=True)
    terms = np.where(p_full > 0.0, p_full * (np.log(np.maximum(p_full, 1e-300)) - np.log(q)), 0.0)
    return terms.sum(axis=0)


def _kl_cluster_row(model, examples, full_dists, entry, candidates, scale_method):
    """Omega row for one cluster: KL accumulated per candidate bit-width.
    fsum makes the frame accumulation exactly order-invariant."""
    w = sepnet.get_cluster_values(model, entry).astype(np.float64)
    row = {}
    for n in candidates:
        if n >= 32:
            row[int(n)] = 0.0
            continue
        alpha = quant.fit_scale(w, n, method=scale_method)
        w_q = quant.quant_dequant(w, n, alpha)
        work = model.copy()
        sepnet.set_cluster_values(work, entry, w_q)
        quant_dists = _frame_distributions(work, examples)
        frame_kls = []
        for pf, pq in zip(full_dists, quant_dists):
            frame_kls.extend(_kl_frames(pf, pq).tolist())
        row[int(n)] = math.fsum(frame_kls)
    return entry.cluster_id, row


def kl_sensitivity(
    model,
    examples,
    stft_cfg,
    candidates=(2, 4, 8, 16),
    granularity="sublayer",
    scale_method="mse",
    checkpoint_sha256="",
    seed=0,
    jobs=1,
):
    """Quantize one cluster at a time and accumulate the output KL divergence
    against the full-precision model over all probe frames. Cluster rows are
    independent; jobs > 1 evaluates them in a process pool."""
    entries = sepnet.quantizable_clusters(model, granularity)
    full_dists = _frame_distributions(model, examples)
    omega = {}
    if jobs > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(
                    _kl_cluster_row, model, examples, full_dists, e, tuple(candidates),
                    scale_method,
                )
                for e in entries
            ]
            for fut in futures:
                cid, row = fut.result()
                omega[cid] = row
    else:
        for e in entries:
            cid, row = _kl_cluster_row(model, examples, full_dists, e, tuple(candidates),
                                        scale_method)
            omega[cid] = row
    return SensitivityProfile(
        metric="KL",
        granularity=granularity,
        candidates=[int(n) for n in candidates],
        clusters=[(e.cluster_id, e.count) for e in entries],
        omega=omega,
        traces={},
        m=0,
        seed=seed,
        probe_fingerprint=probe_fingerprint(examples, stft_cfg),
        checkpoint_sha256=checkpoint_sha256,
    )
