"""Self-describing checkpoint container.

Layout: a UTF-8 text header followed by raw little-endian tensor bytes::

    DIFFGUIDE-CKPT 1
    [config]
    key=value ...
    [meta]
    key=value ...
    [tensors]
    name<TAB>shape<TAB>dtype<TAB>offset<TAB>nbytes<TAB>kind
    [end]

``shape`` is comma-separated (empty for scalars), ``offset`` counts from the
first payload byte and ``kind`` is ``param`` or ``buffer``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ModelConfig, parse_key_values
from .errors import CheckpointError
from .nn.module import Module

MAGIC = "DIFFGUIDE-CKPT"
VERSION = 1


def save_checkpoint(path: str | Path, model: Module, config: ModelConfig, meta: dict | None = None) -> None:
    params = dict(model.named_parameters())
    entries, payload, offset = [], [], 0
    for name, arr in model.state_dict().items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        kind = "param" if name in params else "buffer"
        shape = ",".join(str(s) for s in arr.shape)
        entries.append(f"{name}\t{shape}\t{arr.dtype.str.lstrip('<>=|')}\t{offset}\t{le.nbytes}\t{kind}")
        payload.append(le.tobytes())
        offset += le.nbytes
    lines = [f"{MAGIC} {VERSION}", "[config]", *config.to_lines(), "[meta]"]
    lines += [f"{k}={v}" for k, v in (meta or {}).items()]
    lines += ["[tensors]", *entries, "[end]"]
    header = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, str], dict[str, np.ndarray], dict[str, str]]:
    """Returns ``(config, meta, tensors, kinds)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n[end]\n")
    if end < 0:
        raise CheckpointError(f"{path}: not a checkpoint (no header terminator)")
    header = raw[:end].decode().split("\n")
    body = memoryview(raw)[end + len(b"\n[end]\n"):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic line {header[0]!r}")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"{path}: format version {first[1]} unsupported (expected {VERSION})")
    sections: dict[str, list[str]] = {}
    current = None
    for line in header[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    try:
        config = ModelConfig.from_text("\n".join(sections["config"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable config section: {exc}") from exc
    meta = parse_key_values("\n".join(sections.get("meta", [])))
    tensors, kinds = {}, {}
    for line in sections.get("tensors", []):
        name, shape, dtype, offset, nbytes, kind = line.split("\t")
        shape_t = tuple(int(s) for s in shape.split(",")) if shape else ()
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: tensor {name} runs past end of file")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype=np.dtype(dtype).newbyteorder("<"))
        tensors[name] = arr.reshape(shape_t).astype(np.dtype(dtype))
        kinds[name] = kind
    return config, meta, tensors, kinds


def load_into(model: Module, tensors: dict[str, np.ndarray], path: str | Path = "<checkpoint>") -> None:
    """Copy checkpoint tensors into ``model``, refusing any name or shape mismatch."""
    expected = {name: arr.shape for name, arr in model.state_dict().items()}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    wrong = sorted(n for n in set(expected) & set(tensors) if tensors[n].shape != expected[n])
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append(f"missing {missing[:5]}")
        if extra:
            parts.append(f"unexpected {extra[:5]}")
        if wrong:
            parts.append(f"shape mismatch {[(n, tensors[n].shape, expected[n]) for n in wrong[:5]]}")
        raise CheckpointError(f"{path}: weights do not match the stored config ({'; '.join(parts)})")
    model.load_state_dict(tensors)


def load_checkpoint(path: str | Path):
    """Rebuild the model described by a checkpoint; returns ``(model, config, meta)``."""
    from .model import ChangeNet

    config, meta, tensors, _ = read_checkpoint(path)
    model = ChangeNet(config)
    load_into(model, tensors, path)
    model.eval()
    return model, config, meta
