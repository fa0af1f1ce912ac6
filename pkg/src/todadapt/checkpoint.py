"""Checkpoint container: a directory with manifest.json plus one little-endian
IEEE-754 raw tensor file per parameter. Bit-exact across platforms."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Parameter
from .tokenization import Vocab
from .validation import ensure

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_container(
    directory,
    kind: str,
    config: dict,
    params: dict[str, Parameter],
    seed: Optional[int] = None,
    provenance: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (name, p) in enumerate(sorted(params.items())):
        dtype = str(p.data.dtype)
        ensure(dtype in _DTYPE_CODES, f"unsupported parameter dtype {dtype}")
        filename = f"p{idx:04d}.bin"
        p.data.astype(_DTYPE_CODES[dtype]).tofile(directory / filename)
        entries.append(
            {
                "name": name,
                "shape": list(p.data.shape),
                "dtype": dtype,
                "file": filename,
                "trainable": bool(p.trainable),
            }
        )
    manifest = {
        "kind": kind,
        "config": config,
        "seed": seed,
        "provenance": provenance or {},
        "params": entries,
    }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_container(directory) -> tuple[dict, dict[str, Parameter]]:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    params: dict[str, Parameter] = {}
    for entry in manifest["params"]:
        raw = np.fromfile(directory / entry["file"], dtype=_DTYPE_CODES[entry["dtype"]])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        ensure(
            raw.size == expected,
            f"{directory}/{entry['file']}: expected {expected} values, found {raw.size}",
        )
        data = raw.astype(entry["dtype"]).reshape(entry["shape"])
        params[entry["name"]] = Parameter(entry["name"], data, trainable=entry["trainable"])
    return manifest, params


def save_encoder(model, directory, seed: Optional[int] = None, provenance: Optional[dict] = None) -> Path:
    """Persist an encoder (base parameters only; banks are saved separately)."""
    return save_container(
        directory,
        kind="encoder",
        config=model.config.to_obj(),
        params=model.params,
        seed=seed,
        provenance=provenance,
        extra={"vocab": {"tokens": list(model.vocab.id_to_token), "min_frequency": model.vocab.min_frequency}},
    )


def load_encoder(directory):
    from .encoder import EncoderConfig, EncoderModel

    manifest, params = load_container(directory)
    ensure(manifest["kind"] == "encoder", f"{directory}: expected an encoder checkpoint")
    tokens = manifest["vocab"]["tokens"]
    vocab = Vocab(
        token_to_id={t: i for i, t in enumerate(tokens)},
        min_frequency=manifest["vocab"].get("min_frequency", 1),
    )
    config = EncoderConfig.from_obj(manifest["config"])
    return EncoderModel(config, vocab, params)
