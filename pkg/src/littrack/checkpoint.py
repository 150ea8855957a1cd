"""Versioned binary checkpoint container and network (de)serializers.

Layout: 4-byte magic, little-endian u32 format version, u64 header length,
then a JSON header describing named array blocks (dtype, shape, offset, crc32)
followed by raw little-endian array payloads.  Loading is strict: bad magic,
version drift, truncation, or a checksum failure raise CheckpointError naming
the offending block, and a config-fingerprint mismatch is refused unless
forced.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dynmodel import DynModelParams, SigmaStats
from .mathnn import Layer, MlpParams
from .policy import CriticParams, PolicyParams

MAGIC = b"LTCK"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    iteration: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    rng_state: dict | None = None
    version: int = FORMAT_VERSION


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    blocks = []
    payloads = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        code = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr.astype(_DTYPES[code], copy=False)).tobytes()
        blocks.append({"name": name, "dtype": code, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw),
                       "crc32": zlib.crc32(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({
        "fingerprint": ckpt.fingerprint,
        "iteration": int(ckpt.iteration),
        "meta": ckpt.meta,
        "rng_state": ckpt.rng_state,
        "arrays": blocks,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str, expect_fingerprint: str | None = None,
                    force: bool = False) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != "
                              f"supported {FORMAT_VERSION}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    if len(data) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    base = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for blk in header["arrays"]:
        name = blk["name"]
        lo = base + blk["offset"]
        hi = lo + blk["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: array {name!r}: truncated payload")
        raw = data[lo:hi]
        if zlib.crc32(raw) != blk["crc32"]:
            raise CheckpointError(f"{path}: array {name!r}: checksum mismatch")
        arr = np.frombuffer(raw, dtype=_DTYPES[blk["dtype"]]).reshape(blk["shape"])
        arrays[name] = arr.copy()
    ckpt = Checkpoint(fingerprint=header["fingerprint"],
                      iteration=header["iteration"], arrays=arrays,
                      meta=header["meta"], rng_state=header["rng_state"],
                      version=version)
    if expect_fingerprint is not None and ckpt.fingerprint != expect_fingerprint \
            and not force:
        raise CheckpointError(
            f"{path}: config fingerprint mismatch: checkpoint {ckpt.fingerprint}, "
            f"active {expect_fingerprint} (pass --force to load anyway)")
    return ckpt


# ---------------------------------------------------------------------------
# network <-> array-dict adapters


def _pack_mlp(arrays: dict, prefix: str, mlp: MlpParams, meta: dict) -> None:
    meta[prefix] = {"acts": [layer.act for layer in mlp.layers]}
    for i, layer in enumerate(mlp.layers):
        arrays[f"{prefix}/{i}/w"] = layer.w
        arrays[f"{prefix}/{i}/b"] = layer.b


def _unpack_mlp(arrays: dict, prefix: str, meta: dict) -> MlpParams:
    acts = meta[prefix]["acts"]
    layers = [Layer(arrays[f"{prefix}/{i}/w"], arrays[f"{prefix}/{i}/b"], act)
              for i, act in enumerate(acts)]
    return MlpParams(layers)


def pack_policy(pol: PolicyParams, prefix: str = "policy") -> tuple[dict, dict]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"hist_len": pol.hist_len, "has_refs": pol.has_refs}
    _pack_mlp(arrays, f"{prefix}/encoder", pol.encoder, meta)
    _pack_mlp(arrays, f"{prefix}/trunk", pol.trunk, meta)
    arrays[f"{prefix}/log_std"] = pol.log_std
    return arrays, meta


def unpack_policy(arrays: dict, meta: dict, prefix: str = "policy") -> PolicyParams:
    return PolicyParams(
        encoder=_unpack_mlp(arrays, f"{prefix}/encoder", meta),
        trunk=_unpack_mlp(arrays, f"{prefix}/trunk", meta),
        log_std=arrays[f"{prefix}/log_std"],
        hist_len=int(meta["hist_len"]),
        has_refs=bool(meta["has_refs"]),
    )


def pack_critic(critic: CriticParams, prefix: str = "critic") -> tuple[dict, dict]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"hist_len": critic.hist_len}
    _pack_mlp(arrays, f"{prefix}/net", critic.net, meta)
    return arrays, meta


def unpack_critic(arrays: dict, meta: dict, prefix: str = "critic") -> CriticParams:
    return CriticParams(net=_unpack_mlp(arrays, f"{prefix}/net", meta),
                        hist_len=int(meta["hist_len"]))


def pack_dynmodel(model: DynModelParams, stats: SigmaStats | None,
                  prefix: str = "dyn") -> tuple[dict, dict]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"sigma_floor": model.sigma_floor}
    _pack_mlp(arrays, f"{prefix}/trunk", model.trunk, meta)
    _pack_mlp(arrays, f"{prefix}/mu", model.mu_head, meta)
    _pack_mlp(arrays, f"{prefix}/sigma", model.sigma_head, meta)
    if stats is not None:
        meta["stats_count"] = stats.count
        arrays[f"{prefix}/stats/sigma_min"] = stats.sigma_min
        arrays[f"{prefix}/stats/sigma_max"] = stats.sigma_max
    return arrays, meta


def unpack_dynmodel(arrays: dict, meta: dict, prefix: str = "dyn"
                    ) -> tuple[DynModelParams, SigmaStats | None]:
    model = DynModelParams(
        trunk=_unpack_mlp(arrays, f"{prefix}/trunk", meta),
        mu_head=_unpack_mlp(arrays, f"{prefix}/mu", meta),
        sigma_head=_unpack_mlp(arrays, f"{prefix}/sigma", meta),
        sigma_floor=float(meta["sigma_floor"]),
    )
    stats = None
    if f"{prefix}/stats/sigma_min" in arrays:
        stats = SigmaStats(sigma_min=arrays[f"{prefix}/stats/sigma_min"],
                           sigma_max=arrays[f"{prefix}/stats/sigma_max"],
                           count=int(meta["stats_count"]))
    return model, stats
