"""Checkpoints: a JSON manifest plus raw little-endian float64 payload.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
Parameters are stored flat, in manifest order, so a save/load/save cycle
reproduces both files byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .model import ModelDims, RDNParams

FORMAT = "rdn-checkpoint/1"
MANIFEST = "manifest.json"
PAYLOAD = "params.bin"


class CheckpointError(ValueError):
    """Manifest does not match the expected model or vocabulary."""


class CheckpointFormatError(CheckpointError):
    """Files are missing, unparsable or the payload has the wrong length."""


@dataclass
class Checkpoint:
    params: RDNParams
    vocab: Vocabulary
    iteration: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(params: RDNParams, meta: dict, path) -> Path:
    """Write ``params`` with ``meta`` (needs ``vocab``; may carry
    ``iteration``, ``seed`` and anything JSON-serializable)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    vocab = meta.pop("vocab")
    tokens = vocab.tokens if isinstance(vocab, Vocabulary) else list(vocab)
    if len(tokens) != params.dims.vocab_size:
        raise CheckpointError(f"vocab has {len(tokens)} tokens, model expects {params.dims.vocab_size}")
    named = list(params.named_parameters())
    manifest = {
        "format": FORMAT,
        "variant": params.variant,
        "dims": params.dims.as_dict(),
        "iteration": int(meta.pop("iteration", 0)),
        "seed": int(meta.pop("seed", 0)),
        "vocab": tokens,
        "vocab_fingerprint": Vocabulary(tokens).fingerprint,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "meta": meta,
    }
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (path / PAYLOAD).write_bytes(payload)
    return path


def load_checkpoint(
    path,
    dims: ModelDims | None = None,
    vocab_fingerprint: str | None = None,
) -> Checkpoint:
    """Read a checkpoint, validating it against ``dims``/``vocab_fingerprint`` if given."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        payload = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as err:
        raise CheckpointFormatError(f"missing checkpoint file: {err.filename}") from None
    except json.JSONDecodeError as err:
        raise CheckpointFormatError(f"unparsable manifest: {err}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointFormatError(f"unknown checkpoint format {manifest.get('format')!r}")

    vocab = Vocabulary(manifest["vocab"])
    if vocab.fingerprint != manifest["vocab_fingerprint"]:
        raise CheckpointFormatError("vocabulary does not match its stored fingerprint")
    if vocab_fingerprint is not None and vocab.fingerprint != vocab_fingerprint:
        raise CheckpointError(
            f"vocabulary fingerprint {vocab.fingerprint} != expected {vocab_fingerprint}"
        )

    stored_dims = ModelDims(**manifest["dims"])
    specs = manifest["parameters"]
    expected = sum(int(np.prod(s["shape"])) for s in specs) * 8
    if len(payload) != expected:
        raise CheckpointFormatError(f"payload is {len(payload)} bytes, manifest implies {expected}")

    params = RDNParams.init(stored_dims, manifest["variant"])
    template = dict(params.named_parameters())
    reference = dict(RDNParams.init(dims, manifest["variant"]).named_parameters()) if dims else template
    if [s["name"] for s in specs] != list(template):
        raise CheckpointError("parameter list in manifest does not match the model layout")
    offset = 0
    for spec in specs:
        name, shape = spec["name"], tuple(spec["shape"])
        if shape != reference[name].shape:
            raise CheckpointError(
                f"parameter {name}: stored shape {shape} != expected {reference[name].shape}"
            )
        if shape != template[name].shape:
            raise CheckpointError(f"parameter {name}: shape {shape} disagrees with stored dims")
        n = int(np.prod(shape))
        template[name].data[...] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
    return Checkpoint(params, vocab, manifest["iteration"], manifest["seed"], manifest.get("meta", {}))
