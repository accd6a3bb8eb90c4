"""Symmetric low-bit post-training quantization.

Each weight cluster shares a table {0, +-alpha, ..., +-alpha*(2^(n-1)-1)}
and stores nearest-table codes as two's-complement n-bit integers,
densely packed little-endian and zero-padded to a byte boundary per
cluster. The scale alpha is fitted per cluster by golden-section search
on the reconstruction MSE (absmax scaling available as an alternative),
and a minimum of 2 bits is enforced everywhere.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from . import sepnet

SUPPORTED_BITS = (2, 4, 8, 16)
PACKED_MAGIC = b"QSEP"
PACKED_VERSION = 1


class QuantError(ValueError):
    pass


def build_table(n, alpha):
    """The 2^n - 1 symmetric quantization levels with spacing alpha."""
    if n < 2:
        raise QuantError(f"bit-width {n} below the 2-bit minimum")
    if alpha <= 0:
        raise QuantError(f"scaling factor must be positive, got {alpha}")
    m = 2 ** (n - 1) - 1
    return alpha * np.arange(-m, m + 1, dtype=np.float64)


def quantize_values(weights, n, alpha):
    """Nearest-table codes; midpoints break toward the smaller magnitude,
    and out-of-range values clamp to the extreme codes."""
    if n < 2:
        raise QuantError(f"bit-width {n} below the 2-bit minimum")
    if alpha <= 0:
        raise QuantError(f"scaling factor must be positive, got {alpha}")
    w = np.asarray(weights, dtype=np.float64)
    m = 2 ** (n - 1) - 1
    mag = np.ceil(np.abs(w) / alpha - 0.5)
    codes = np.sign(w) * np.minimum(mag, m)
    return codes.astype(np.int64)


def dequantize_values(codes, alpha):
    return np.asarray(codes, dtype=np.float64) * alpha


def quant_dequant(weights, n, alpha):
    return dequantize_values(quantize_values(weights, n, alpha), alpha)


def _recon_mse(w, n, alpha):
    return float(np.mean((w - quant_dequant(w, n, alpha)) ** 2))


def fit_scale(weights, n, iters=200, method="mse"):
    """Fit the cluster scale alpha.

    "mse": golden-section search of the reconstruction MSE over
    [0.3, 1.5] * absmax/(2^(n-1)-1), `iters` shrink steps, falling back
    to the absmax scale whenever that candidate is at least as good.
    "absmax": plain absmax/(2^(n-1)-1).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise QuantError("cannot fit a scale to an empty cluster")
    absmax = float(np.max(np.abs(w)))
    if absmax == 0.0:
        return 1.0  # all-zero cluster: every code is 0 regardless
    m = 2 ** (n - 1) - 1
    base = absmax / m
    if method == "absmax":
        return base
    if method != "mse":
        raise QuantError(f"unknown scale fitting method {method!r}")

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.3 * base, 1.5 * base
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = _recon_mse(w, n, x1), _recon_mse(w, n, x2)
    for _ in range(iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = _recon_mse(w, n, x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = _recon_mse(w, n, x2)
    alpha = x1 if f1 <= f2 else x2
    best = min(f1, f2)
    if _recon_mse(w, n, base) <= best:
        return base
    return float(alpha)


# -- bit packing ----------------------------------------------------------------


def pack_codes(codes, n):
    """Two's-complement n-bit packing, LSB-first within each byte,
    zero-padded to a byte boundary."""
    if n not in SUPPORTED_BITS:
        raise QuantError(f"unsupported bit-width {n}; choose from {SUPPORTED_BITS}")
    codes = np.asarray(codes, dtype=np.int64)
    lo, hi = -(2 ** (n - 1)), 2 ** (n - 1) - 1
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise QuantError(f"code out of range for {n}-bit two's complement")
    u = (codes & (2**n - 1)).astype(np.uint32)
    if n == 16:
        return u.astype("<u2").tobytes()
    if n == 8:
        return u.astype(np.uint8).tobytes()
    per = 8 // n
    pad = (-len(u)) % per
    if pad:
        u = np.concatenate([u, np.zeros(pad, dtype=np.uint32)])
    u = u.reshape(-1, per)
    byte = np.zeros(len(u), dtype=np.uint32)
    for j in range(per):
        byte |= u[:, j] << (j * n)
    return byte.astype(np.uint8).tobytes()


def unpack_codes(buf, n, count):
    if n not in SUPPORTED_BITS:
        raise QuantError(f"unsupported bit-width {n}; choose from {SUPPORTED_BITS}")
    if n == 16:
        u = np.frombuffer(buf, dtype="<u2", count=count).astype(np.int64)
    elif n == 8:
        u = np.frombuffer(buf, dtype=np.uint8, count=count).astype(np.int64)
    else:
        per = 8 // n
        raw = np.frombuffer(buf, dtype=np.uint8, count=(count + per - 1) // per)
        u = np.zeros((len(raw), per), dtype=np.int64)
        for j in range(per):
            u[:, j] = (raw >> (j * n)) & (2**n - 1)
        u = u.ravel()[:count]
    u = u.copy()
    u[u >= 2 ** (n - 1)] -= 2**n
    return u


def packed_nbytes(count, n):
    return (count * n + 7) // 8


# -- whole-model quantization ---------------------------------------------------


@dataclasses.dataclass
class PackedModel:
    """Quantized clusters (manifest + packed code blob). Unquantized
    parameters live in the base checkpoint the manifest references."""

    manifest: dict
    blob: bytes

    @property
    def clusters(self):
        return self.manifest["clusters"]


def quantize_model(model, bits_map, granularity="sublayer", scale_method="mse",
                   base_checkpoint_sha256=None):
    """PTQ of every quantizable cluster at the bit-width bits_map[cluster_id]."""
    entries = sepnet.quantizable_clusters(model, granularity)
    missing = [e.cluster_id for e in entries if e.cluster_id not in bits_map]
    if missing:
        raise QuantError(f"bits_map missing clusters: {missing[:3]}")
    chunks = []
    cluster_rows = []
    offset_bits = 0
    for e in entries:
        n = int(bits_map[e.cluster_id])
        w = sepnet.get_cluster_values(model, e)
        alpha = fit_scale(w, n, method=scale_method)
        codes = quantize_values(w, n, alpha)
        buf = pack_codes(codes, n)
        cluster_rows.append(
            {
                "id": e.cluster_id,
                "bits": n,
                "alpha": float(alpha),
                "offset_bits": offset_bits,
                "count": int(e.count),
            }
        )
        chunks.append(buf)
        offset_bits += len(buf) * 8
    blob = b"".join(chunks)
    manifest = {
        "format": "quantsep-packed",
        "version": PACKED_VERSION,
        "granularity": granularity,
        "scale_method": scale_method,
        "clusters": cluster_rows,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "base_checkpoint_sha256": base_checkpoint_sha256,
    }
    return PackedModel(manifest, blob)


def dequantize_model(packed, base_model):
    """Reconstruct a model: quantized clusters become code * alpha, everything
    else is copied from the base model. Census mismatches are rejected."""
    model = base_model.copy()
    granularity = packed.manifest["granularity"]
    entries = {e.cluster_id: e for e in sepnet.quantizable_clusters(base_model, granularity)}
    rows = packed.clusters
    if set(entries) != {r["id"] for r in rows}:
        bad = sorted(set(entries) ^ {r["id"] for r in rows})[0]
        raise QuantError(f"census mismatch at cluster {bad!r}")
    for row in rows:
        e = entries[row["id"]]
        if e.count != row["count"]:
            raise QuantError(
                f"census mismatch at cluster {row['id']!r}:"
                f" {row['count']} codes vs {e.count} parameters"
            )
        buf = packed.blob[row["offset_bits"] // 8 :]
        codes = unpack_codes(buf, row["bits"], row["count"])
        sepnet.set_cluster_values(model, e, dequantize_values(codes, row["alpha"]))
    return model


def write_packed(packed, path):
    manifest_bytes = json.dumps(packed.manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(struct.pack("<H", PACKED_VERSION))
        f.write(struct.pack("<I", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(packed.blob)


def read_packed(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PACKED_MAGIC:
            raise QuantError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != PACKED_VERSION:
            raise QuantError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode())
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise QuantError(f"{path}: blob SHA-256 mismatch")
    return PackedModel(manifest, blob)


# -- size accounting --------------------------------------------------------------

FULL_PRECISION_BITS = 32


@dataclasses.dataclass(frozen=True)
class SizeReport:
    quantized_params: int
    unquantized_params: int
    quantized_bits: int  # sum over clusters of count * bits
    scale_bits: int  # one 32-bit alpha per cluster
    unquantized_bits: int
    avg_bits: float  # over quantized parameters
    packed_blob_bytes: int  # byte-aligned per cluster
    total_bytes: int
    full_precision_bytes: int

    @property
    def quantized_fraction_ratio(self):
        """Compression of the quantized fraction alone: 32 / average bits."""
        return FULL_PRECISION_BITS / self.avg_bits

    @property
    def end_to_end_ratio(self):
        return self.full_precision_bytes / self.total_bytes


def model_size(census_entries, bits_map):
    """Bit accounting for a precision assignment over the census."""
    q_entries = [e for e in census_entries if e.quantizable]
    missing = [e.cluster_id for e in q_entries if e.cluster_id not in bits_map]
    if missing:
        raise QuantError(f"bits_map missing clusters: {missing[:3]}")
    q_params = sum(e.count for e in q_entries)
    u_params = sum(e.count for e in census_entries if not e.quantizable)
    q_bits = sum(e.count * int(bits_map[e.cluster_id]) for e in q_entries)
    packed = sum(packed_nbytes(e.count, int(bits_map[e.cluster_id])) for e in q_entries)
    scale_bits = 32 * len(q_entries)
    u_bits = u_params * FULL_PRECISION_BITS
    total_params = q_params + u_params
    return SizeReport(
        quantized_params=q_params,
        unquantized_params=u_params,
        quantized_bits=q_bits,
        scale_bits=scale_bits,
        unquantized_bits=u_bits,
        avg_bits=q_bits / q_params if q_params else float("nan"),
        packed_blob_bytes=packed,
        total_bytes=packed + scale_bits // 8 + u_params * 4,
        full_precision_bytes=total_params * 4,
    )
