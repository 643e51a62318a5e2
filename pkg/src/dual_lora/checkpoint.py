"""Versioned on-disk snapshot of named float64 arrays.

Layout::

    DLRA <version>\\n
    entries <n>\\n
    <name> <ndim> <d1> ... <dk>\\n        (one line per entry, in order)
    sha256 <hex digest of everything above plus the payload>\\n
    \\n
    <payload: little-endian float64 values of every entry, row-major, in order>
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

MAGIC = "DLRA"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


def encode(entries: dict[str, np.ndarray]) -> bytes:
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"entries {len(entries)}"]
    chunks = []
    for name, arr in entries.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid entry name {name!r}")
        a = np.asarray(arr, dtype="<f8", order="C")
        lines.append(" ".join([name, str(a.ndim), *map(str, a.shape)]))
        chunks.append(a.tobytes(order="C"))
    head = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(chunks)
    digest = hashlib.sha256(head + payload).hexdigest()
    return head + f"sha256 {digest}\n\n".encode("ascii") + payload


def decode(blob: bytes) -> dict[str, np.ndarray]:
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise IntegrityError("checkpoint header is incomplete")
    try:
        header = blob[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise IntegrityError("checkpoint header is not ASCII") from None
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError("not a DLRA checkpoint")
    if magic[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"checkpoint format version {magic[1]} is not supported (expected {FORMAT_VERSION})")
    try:
        n = int(header[1].split()[1])
        specs = []
        for line in header[2:2 + n]:
            parts = line.split()
            ndim = int(parts[1])
            shape = tuple(int(d) for d in parts[2:2 + ndim])
            if len(shape) != ndim:
                raise ValueError
            specs.append((parts[0], shape))
        tag, digest = header[2 + n].split()
        if tag != "sha256" or len(header) != 3 + n:
            raise ValueError
    except (IndexError, ValueError):
        raise IntegrityError("malformed checkpoint manifest") from None
    payload = blob[sep + 2:]
    head = ("\n".join(header[:2 + n]) + "\n").encode("ascii")
    if hashlib.sha256(head + payload).hexdigest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupt file)")
    out, offset = {}, 0
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise IntegrityError("checkpoint payload is shorter than its manifest")
        out[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise IntegrityError("checkpoint payload is longer than its manifest")
    return out


def save_entries(entries: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode(entries))


def load_entries(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# -- models ---------------------------------------------------------------------


def model_entries(model) -> dict[str, np.ndarray]:
    from .network import DualLoraModel, MergedModel

    if isinstance(model, MergedModel):
        entries = {name: t.data for name, t in model.named_parameters().items()}
        entries["meta.merged"] = np.array([1.0])
        return entries
    if not isinstance(model, DualLoraModel):
        raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")
    entries = {name: t.data for name, t in model.named_parameters().items()}
    entries["meta.alpha"] = np.array([model.cfg.alpha])
    if model.arcmargin is not None:
        entries["meta.margin"] = np.array([model.arcmargin.margin])
        entries["meta.scale"] = np.array([model.arcmargin.scale])
    return entries


def model_from_entries(entries: dict[str, np.ndarray]):
    from .losses import SubcenterArcMarginParams
    from .network import DualLoraModel, MergedModel, ModelConfig

    depth = 0
    while f"backbone.{depth}.W" in entries or f"backbone.{depth}.W0" in entries:
        depth += 1
    if "meta.merged" in entries:
        layers = [(entries[f"backbone.{i}.W"], entries.get(f"backbone.{i}.b")) for i in range(depth)]
        return MergedModel(layers, entries["heads.spk.W"], entries["heads.spk.b"])
    try:
        W0 = [entries[f"backbone.{i}.W0"] for i in range(depth)]
        cfg = ModelConfig(
            feat_dim=W0[0].shape[1],
            width=W0[0].shape[0],
            depth=depth,
            d_emb=entries["heads.spk.W"].shape[0],
            d_emb_lang=entries["heads.lang.W"].shape[0],
            r_spk=entries["backbone.0.A.spk"].shape[0],
            r_lang=entries["backbone.0.A.lang"].shape[0],
            alpha=float(entries["meta.alpha"][0]),
            disc_proj=entries["disc.proj_spk.W"].shape[0],
            disc_hidden=entries["disc.fc1.W"].shape[0],
            n_languages=entries["disc.fc2.W"].shape[0],
        )
        weights = [(W0[i], entries[f"backbone.{i}.b0"]) for i in range(depth)]
        model = DualLoraModel(cfg, weights, np.random.default_rng(0))
        if "arcmargin.weight" in entries:
            model.arcmargin = SubcenterArcMarginParams(entries["arcmargin.weight"].copy(),
                                                       float(entries["meta.margin"][0]), float(entries["meta.scale"][0]))
            model.arcmargin.class_weights.requires_grad = True
        for name, tensor in model.named_parameters().items():
            if entries[name].shape != tensor.shape:
                raise CheckpointError(f"entry {name} has shape {entries[name].shape}, expected {tensor.shape}")
            tensor.data[...] = entries[name]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing entry {exc.args[0]}") from None
    return model


def save_checkpoint(model, path: str | Path) -> None:
    save_entries(model_entries(model), path)


def load_checkpoint(path: str | Path):
    return model_from_entries(load_entries(path))
