"""Raw volume files with JSON sidecars, dataset manifests, run configs and checkpoints.

A volume ``name.raw`` is described by ``name.json``::

    {"dims": [D, H, W], "spacing_mm": [sz, sy, sx], "dtype": "f32" | "u8",
     "channels": C, "byte_order": "little"}

The payload is channel-major then row-major (W fastest).  Checkpoints are
directories holding ``index.json`` plus one little-endian ``data.bin`` blob.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ArchitectureSpec, Network, resolve_spec
from .tensor import ConvKernelBank
from .trainer import OptimizerState, SamplerConfig, Subject, TrainConfig

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
CHECKPOINT_VERSION = 1


@dataclass
class Volume:
    data: np.ndarray  # (D, H, W) or (C, D, H, W)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[0]


def _volume_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path.with_suffix(".raw"), path
    return path, path.with_suffix(".json")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path, data, spacing=(1.0, 1.0, 1.0), dtype: str | None = None) -> Path:
    """Write ``data`` (3-D, or 4-D channel-first).  Floats go to f32, integers to u8."""
    raw, header = _volume_paths(path)
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise ValueError(f"volume must be 3-D or 4-D, got shape {data.shape}")
    if dtype is None:
        dtype = "f32" if np.issubdtype(data.dtype, np.floating) else "u8"
    if dtype not in DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    if dtype == "u8" and data.size and (data.min() < 0 or data.max() > 255):
        raise ValueError("values out of range for u8")
    channels = 1 if data.ndim == 3 else data.shape[0]
    meta = {
        "dims": [int(n) for n in data.shape[-3:]],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype,
        "channels": int(channels),
        "byte_order": "little",
    }
    _atomic_write(raw, np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())
    _atomic_write(header, (json.dumps(meta, indent=1) + "\n").encode())
    return raw


def read_volume(path) -> Volume:
    raw, header = _volume_paths(path)
    if not header.exists():
        raise FileNotFoundError(f"missing sidecar header {header}")
    meta = json.loads(header.read_text())
    if meta.get("dtype") not in DTYPES:
        raise ValueError(f"{header}: unknown dtype {meta.get('dtype')!r}")
    if meta.get("byte_order", "little") != "little":
        raise ValueError(f"{header}: byte_order must be 'little'")
    dt = DTYPES[meta["dtype"]]
    dims = tuple(int(n) for n in meta["dims"])
    channels = int(meta.get("channels", 1))
    expected = channels * int(np.prod(dims)) * dt.itemsize
    payload = raw.read_bytes()
    if len(payload) != expected:
        raise ValueError(f"{raw}: payload length mismatch, expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=dt).reshape(((channels,) if channels > 1 else ()) + dims)
    spacing = tuple(float(s) for s in meta["spacing_mm"])
    return Volume(data.astype(dt.newbyteorder("=")), spacing)


# -- manifests ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    modality_paths: dict[str, str]
    label_path: str | None = None
    split: str = "train"


def load_manifest(path) -> list[ManifestEntry]:
    """Load a manifest; relative paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for d in json.loads(path.read_text()):
        extra = set(d) - {"id", "modality_paths", "label_path", "split"}
        if extra:
            raise ValueError(f"manifest entry {d.get('id')!r}: unknown keys {sorted(extra)}")
        if d.get("split", "train") not in ("train", "val", "test"):
            raise ValueError(f"subject {d['id']}: split must be train, val or test")
        mods = {k: str(base / v) for k, v in d["modality_paths"].items()}
        label = str(base / d["label_path"]) if d.get("label_path") else None
        entries.append(ManifestEntry(d["id"], mods, label, d.get("split", "train")))
    return entries


def save_manifest(entries, path) -> Path:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        return str(p.relative_to(base)) if p.is_relative_to(base) else str(p)

    data = [
        {"id": e.id, "modality_paths": {k: rel(v) for k, v in e.modality_paths.items()},
         "label_path": rel(e.label_path) if e.label_path else None, "split": e.split}
        for e in entries
    ]
    _atomic_write(path, (json.dumps(data, indent=1) + "\n").encode())
    return path


def load_subject(entry: ManifestEntry, modalities=None, with_labels=True) -> Subject:
    """Read one subject's volumes in ``modalities`` order (default: manifest order)."""
    names = list(modalities) if modalities is not None else list(entry.modality_paths)
    vols = []
    spacing = None
    for name in names:
        if name not in entry.modality_paths:
            raise ValueError(f"subject {entry.id}: missing modality {name!r}")
        p = entry.modality_paths[name]
        if not Path(p).exists():
            raise ValueError(f"subject {entry.id}: modality {name!r} file not found: {p}")
        v = read_volume(p)
        if vols and v.data.shape != vols[0].shape:
            raise ValueError(f"subject {entry.id}: modality {name!r} shape differs")
        spacing = spacing or v.spacing
        vols.append(v.data.astype(np.float32))
    labels = None
    if with_labels and entry.label_path:
        labels = read_volume(entry.label_path).data.astype(np.int64)
        if labels.shape != vols[0].shape:
            raise ValueError(f"subject {entry.id}: label shape {labels.shape} != {vols[0].shape}")
    return Subject(entry.id, vols, labels, spacing or (1.0, 1.0, 1.0))


# -- run configuration -------------------------------------------------------

PRECISIONS = {"single": np.float32, "double": np.float64}


@dataclass
class RunConfig:
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    precision: str = "single"
    init_seed: int = 0

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def parse_run_config(d: dict) -> RunConfig:
    """Fail-closed: unknown keys at any level raise ``ValueError``."""
    extra = set(d) - {"arch", "train", "sampler", "precision", "init_seed"}
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    precision = d.get("precision", "single")
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
    train = TrainConfig.from_dict(d.get("train", {}))
    sampler_d = dict(d.get("sampler", {}))
    sampler_d.setdefault("patch_size", train.patch_size)
    return RunConfig(
        resolve_spec(d.get("arch", "hyperdense-2mod")),
        train,
        SamplerConfig.from_dict(sampler_d),
        precision,
        int(d.get("init_seed", 0)),
    )


def load_run_config(path) -> RunConfig:
    return parse_run_config(json.loads(Path(path).read_text()))


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    net: Network
    state: OptimizerState | None
    epoch: int
    rng_state: dict | None
    modalities: list[str] | None
    meta: dict


def _pack(arrays: dict[str, np.ndarray], buf: bytearray) -> list[dict]:
    index = []
    for name, a in arrays.items():
        le = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        index.append({"name": name, "shape": list(a.shape), "dtype": le.dtype.str,
                      "offset": len(buf), "nbytes": le.nbytes})
        buf += le.tobytes()
    return index


def _unpack(index: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for e in index:
        a = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                          offset=e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return out


def save_checkpoint(path, net: Network, state: OptimizerState | None = None, epoch=0,
                    rng_state=None, modalities=None, extra: dict | None = None) -> Path:
    """Write atomically: build in a temp dir, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = bytearray()
    index = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": net.spec.to_dict(),
        "dtype": np.dtype(net.dtype).name,
        "epoch": epoch,
        "rng_state": rng_state,
        "modalities": list(modalities) if modalities else None,
        "params": _pack(net.parameters(), buf),
        "extra": extra or {},
    }
    if state is not None:
        index["optimizer"] = {
            "epoch": state.epoch, "lr": state.lr,
            "r": _pack(state.r, buf), "v": _pack(state.v, buf),
        }
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    (tmp / "data.bin").write_bytes(bytes(buf))
    (tmp / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    index_path = path / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no checkpoint index at {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {index.get('format_version')}")
    blob = (path / "data.bin").read_bytes()
    spec = ArchitectureSpec.from_dict(index["architecture"])
    params = _unpack(index["params"], blob)
    banks = {}
    for key, arr in params.items():
        node, fld = key.rsplit(".", 1)
        banks.setdefault(node, {})[fld] = arr
    net = Network(spec, {n: ConvKernelBank(b["weights"], b["bias"], b.get("slopes"))
                         for n, b in banks.items()})
    state = None
    if "optimizer" in index:
        o = index["optimizer"]
        state = OptimizerState(_unpack(o["r"], blob), _unpack(o["v"], blob), o["epoch"], o["lr"])
    return Checkpoint(net, state, index["epoch"], index.get("rng_state"), index.get("modalities"),
                      index)
