"""Bit-width allocation under a model-size budget.

Minimizes the summed sensitivity Omega[l][n_l] subject to
sum(c_l * n_l) <= budget_avg * sum(c_l), solved exactly by dynamic
programming over the integer bit budget, with an exhaustive brute-force
oracle for cross-checking. Ties break toward fewer total bits, then
toward smaller bit-widths at lower cluster ids; both solvers accumulate
objectives in the same right-to-left order so they agree bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

MIN_BITS = 2  # minimum precision enforced for every cluster


class AllocationError(ValueError):
    pass


@dataclasses.dataclass
class PrecisionAssignment:
    bits: dict  # cluster_id -> chosen bit-width
    avg_bits: float
    total_bits: int
    objective: float
    metric: str
    budget_avg_bits: float
    profile_fingerprint: str = ""
    checkpoint_sha256: str = ""
    extra: dict = dataclasses.field(default_factory=dict)

    def to_json(self):
        return {
            "bits": self.bits,
            "avg_bits": self.avg_bits,
            "total_bits": self.total_bits,
            "objective": self.objective,
            "metric": self.metric,
            "budget_avg_bits": self.budget_avg_bits,
            "profile_fingerprint": self.profile_fingerprint,
            "checkpoint_sha256": self.checkpoint_sha256,
            "extra": self.extra,
        }

    @staticmethod
    def from_json(obj):
        return PrecisionAssignment(
            bits={k: int(v) for k, v in obj["bits"].items()},
            avg_bits=float(obj["avg_bits"]),
            total_bits=int(obj["total_bits"]),
            objective=float(obj["objective"]),
            metric=obj["metric"],
            budget_avg_bits=float(obj["budget_avg_bits"]),
            profile_fingerprint=obj.get("profile_fingerprint", ""),
            checkpoint_sha256=obj.get("checkpoint_sha256", ""),
            extra=obj.get("extra", {}),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @staticmethod
    def load(path):
        with open(path) as f:
            return PrecisionAssignment.from_json(json.load(f))


def _problem_arrays(profile):
    ids = [c for c, _ in profile.clusters]
    counts = np.array([n for _, n in profile.clusters], dtype=np.int64)
    cands = sorted(int(n) for n in profile.candidates)
    if cands[0] < MIN_BITS:
        raise AllocationError(f"candidate bit-width below the {MIN_BITS}-bit minimum")
    omg = np.array(
        [[profile.omega[c][n] for n in cands] for c in ids], dtype=np.float64
    )
    return ids, counts, cands, omg


def _bit_budget(budget_avg_bits, budget_bytes, counts, cands):
    total = int(counts.sum())
    if budget_bytes is not None:
        budget_avg_bits = budget_bytes * 8.0 / total
    if budget_avg_bits is None:
        raise AllocationError("either budget_avg_bits or budget_bytes is required")
    if budget_avg_bits < MIN_BITS:
        raise AllocationError(
            f"budget of {budget_avg_bits} average bits is infeasible;"
            f" the minimum achievable average is {float(MIN_BITS)} (all clusters 2-bit)"
        )
    cap = int(np.floor(budget_avg_bits * total))
    return min(cap, max(cands) * total), budget_avg_bits


def _finish(ids, counts, cands, omg, choice_js, objective, budget_avg_bits, profile):
    bits = {c: cands[j] for c, j in zip(ids, choice_js)}
    total_bits = int(sum(counts[i] * cands[j] for i, j in enumerate(choice_js)))
    return PrecisionAssignment(
        bits=bits,
        avg_bits=total_bits / float(counts.sum()),
        total_bits=total_bits,
        objective=float(objective),
        metric=profile.metric,
        budget_avg_bits=float(budget_avg_bits),
        profile_fingerprint=profile.probe_fingerprint,
        checkpoint_sha256=profile.checkpoint_sha256,
    )


def allocate(profile, budget_avg_bits=None, budget_bytes=None):
    """Exact DP minimizer of the summed sensitivity under the bit budget."""
    ids, counts, cands, omg = _problem_arrays(profile)
    L = len(ids)
    R, budget_avg_bits = _bit_budget(budget_avg_bits, budget_bytes, counts, cands)
    if MIN_BITS * int(counts.sum()) > R:
        raise AllocationError(
            f"budget {budget_avg_bits} average bits infeasible; minimum achievable"
            f" average is {float(MIN_BITS)}"
        )

    # shrink the grid: every cluster uses at least MIN_BITS, and the
    # candidate widths are all even, so track (bits - 2*count)/2 instead
    total = int(counts.sum())
    base_bits = MIN_BITS * total
    Rt = (R - base_bits) // 2
    wt = np.array(
        [[int(counts[i]) * (n - MIN_BITS) // 2 for n in cands] for i in range(L)],
        dtype=np.int64,
    )

    big = np.iinfo(np.int64).max // 2
    dp_obj = np.zeros(Rt + 1)
    dp_bits = np.zeros(Rt + 1, dtype=np.int64)
    choice = np.full((L, Rt + 1), -1, dtype=np.int8)
    cobj = np.empty(Rt + 1)
    cbits = np.empty(Rt + 1, dtype=np.int64)
    for i in range(L - 1, -1, -1):
        new_obj = np.full(Rt + 1, np.inf)
        new_bits = np.full(Rt + 1, big, dtype=np.int64)
        for j, n in enumerate(cands):  # ascending, so ties keep the smaller n
            w = int(wt[i, j])
            if w > Rt:
                continue
            np.add(omg[i, j], dp_obj[: Rt + 1 - w], out=cobj[w:])
            cobj[:w] = np.inf
            np.add(w, dp_bits[: Rt + 1 - w], out=cbits[w:])
            cbits[:w] = big
            better = (cobj < new_obj) | ((cobj == new_obj) & (cbits < new_bits))
            new_obj = np.where(better, cobj, new_obj)
            new_bits = np.where(better, cbits, new_bits)
            choice[i] = np.where(better, j, choice[i])
        dp_obj, dp_bits = new_obj, new_bits

    if not np.isfinite(dp_obj[Rt]):
        raise AllocationError("no feasible assignment")  # unreachable after the pre-check
    js = []
    r = Rt
    for i in range(L):
        j = int(choice[i, r])
        js.append(j)
        r -= int(wt[i, j])
    return _finish(ids, counts, cands, omg, js, dp_obj[Rt], budget_avg_bits, profile)


def brute_force_allocate(profile, budget_avg_bits=None, budget_bytes=None, max_clusters=12):
    """Exhaustive oracle with identical objective arithmetic and tie rules."""
    ids, counts, cands, omg = _problem_arrays(profile)
    L = len(ids)
    if L > max_clusters:
        raise AllocationError(
            f"brute force capped at {max_clusters} clusters, got {L}"
        )
    R, budget_avg_bits = _bit_budget(budget_avg_bits, budget_bytes, counts, cands)
    if MIN_BITS * int(counts.sum()) > R:
        raise AllocationError(
            f"budget {budget_avg_bits} average bits infeasible; minimum achievable"
            f" average is {float(MIN_BITS)}"
        )

    C = len(cands)
    # right-to-left accumulation; final index is the lexicographic rank of
    # the assignment tuple, and the additions match the DP exactly
    obj = np.zeros(1)
    bits = np.zeros(1, dtype=np.int64)
    for i in range(L - 1, -1, -1):
        w = counts[i] * np.asarray(cands, dtype=np.int64)
        obj = (omg[i][:, None] + obj[None, :]).ravel()
        bits = (w[:, None] + bits[None, :]).ravel()
    feasible = bits <= R
    if not feasible.any():
        raise AllocationError("no feasible assignment")
    masked = np.where(feasible, obj, np.inf)
    best_obj = masked.min()
    tie = feasible & (obj == best_obj)
    masked_bits = np.where(tie, bits, np.iinfo(np.int64).max)
    best_bits = masked_bits.min()
    idx = int(np.argmax(tie & (bits == best_bits)))  # first hit = lex smallest

    js = []
    for i in range(L):
        js.append((idx // C ** (L - 1 - i)) % C)
    return _finish(ids, counts, cands, omg, js, best_obj, budget_avg_bits, profile)
