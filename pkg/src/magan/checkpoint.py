"""Versioned binary checkpoints for :class:`~magan.model.MaganModel`.

Layout::

    b"MAGAN1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON (config, feature names, layer attributes,
            sharing map, tensor index, optimizer scalars)
    tensor payload: float64 little-endian, C order, concatenated

The shared generator core is written once. The sharing map records which
stored layer each generator direction runs through, and loading rebuilds
both directions around the same layer object. Output bytes depend only on
the model state, so equal models give identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .errors import FormatError
from .nn import DenseLayer, Discriminator, GeneratorPair

MAGIC = b"MAGAN1\n"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")

SHARING = {
    "G12": ["generators.in1", "generators.core", "generators.out2"],
    "G21": ["generators.in2", "generators.core", "generators.out1"],
}


def _layers(model) -> dict[str, DenseLayer]:
    out = {f"generators.{k}": v for k, v in model.generators.named_layers().items()}
    for tag, d in (("d1", model.d1), ("d2", model.d2)):
        out.update({f"{tag}.{k}": v for k, v in d.named_layers().items()})
    return out


def _groups(model):
    return (
        ("gen_opt", model.gen_opt, model.generators.parameters()),
        ("d1_opt", model.d1_opt, model.d1.parameters()),
        ("d2_opt", model.d2_opt, model.d2.parameters()),
    )


def _serialize(model) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = []
    layer_meta = {}
    for name, layer in _layers(model).items():
        layer_meta[name] = {
            "activation": layer.activation,
            "dropout": layer.dropout,
            "slope": layer.slope,
        }
        tensors.append((f"{name}.weights", layer.weights.data))
        tensors.append((f"{name}.bias", layer.bias.data))
    optim = {}
    for tag, state, params in _groups(model):
        optim[tag] = {
            "step": state.step,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "epsilon": state.epsilon,
            "skipped": state.skipped,
        }
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            tensors.append((f"{tag}.m.{i}", m))
            tensors.append((f"{tag}.v.{i}", v))

    index = []
    offset = 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _DTYPE.itemsize
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "names1": model.names1,
        "names2": model.names2,
        "layers": layer_meta,
        "sharing": SHARING,
        "optimizers": optim,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for _, a in tensors)
    return MAGIC + _LEN.pack(len(head)) + head + body


def save_model(model, path) -> Path:
    """Write ``model`` to ``path`` atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_serialize(model))
    os.replace(tmp, path)
    return path


def _read_header(raw: bytes) -> tuple[dict, int]:
    if not raw.startswith(MAGIC):
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}, got {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size:
        raise FormatError(f"file truncated at byte {len(raw)} while reading the header length")
    (n,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    if len(raw) < pos + n:
        raise FormatError(f"header declares {n} bytes but file ends at byte {len(raw)}")
    try:
        header = json.loads(raw[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header at byte {pos} is not valid JSON: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')!r}")
    return header, pos + n


def load_model(path):
    """Read a checkpoint written by :func:`save_model`."""
    from .model import MaganModel, TrainConfig

    raw = Path(path).read_bytes()
    header, base = _read_header(raw)
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + entry["offset"]
        end = start + count * _DTYPE.itemsize
        if end > len(raw):
            raise FormatError(f"tensor {entry['name']} runs past end of file (byte {end} > {len(raw)})")
        arrays[entry["name"]] = np.frombuffer(raw, _DTYPE, count, start).astype(np.float64).reshape(shape)

    def layer(name: str) -> DenseLayer:
        meta = header["layers"].get(name)
        if meta is None or f"{name}.weights" not in arrays:
            raise FormatError(f"checkpoint lacks layer {name}")
        return DenseLayer(
            weights=Tensor.parameter(arrays[f"{name}.weights"]),
            bias=Tensor.parameter(arrays[f"{name}.bias"]),
            activation=meta["activation"],
            dropout=meta["dropout"],
            slope=meta["slope"],
        )

    sharing = header["sharing"]
    if sharing.get("G12", [None, None])[1] != sharing.get("G21", [None, None])[1]:
        raise FormatError("checkpoint sharing map does not tie the generator cores")
    g12, g21 = sharing["G12"], sharing["G21"]
    cache: dict[str, DenseLayer] = {}
    for name in g12 + g21:
        if name not in cache:
            cache[name] = layer(name)
    gens = GeneratorPair(
        in1=cache[g12[0]], in2=cache[g21[0]], core=cache[g12[1]], out1=cache[g21[2]], out2=cache[g12[2]]
    )

    def disc(tag: str) -> Discriminator:
        trunk = [layer(f"{tag}.trunk{i}") for i in range(5)]
        return Discriminator(trunk=trunk, minibatch=layer(f"{tag}.minibatch"))

    d1, d2 = disc("d1"), disc("d2")

    def optim(tag: str, params) -> AdamState:
        meta = header["optimizers"][tag]
        n = len(params)
        return AdamState(
            m=[arrays[f"{tag}.m.{i}"].copy() for i in range(n)],
            v=[arrays[f"{tag}.v.{i}"].copy() for i in range(n)],
            step=meta["step"],
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            epsilon=meta["epsilon"],
            skipped=meta["skipped"],
        )

    try:
        return MaganModel(
            generators=gens,
            d1=d1,
            d2=d2,
            gen_opt=optim("gen_opt", gens.parameters()),
            d1_opt=optim("d1_opt", d1.parameters()),
            d2_opt=optim("d2_opt", d2.parameters()),
            config=TrainConfig.model_validate(header["config"]),
            names1=header["names1"],
            names2=header["names2"],
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing entry {exc}") from None
