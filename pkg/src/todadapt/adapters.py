"""Bottleneck adapters: per-layer injection, base freezing, and composition.

Adapter(h, r) = U g(D h + b_D) + b_U + r. Inside each transformer layer the
composed adapter output replaces the input of the second layer-norm, with
h = that layer-norm applied to the pre-norm sum and r = the pre-norm sum
itself, so a zero-initialized up-projection makes injection an exact
identity. Stacking feeds each adapter's output to the next as both hidden
input and residual; fusion mixes adapter outputs with a per-layer softmax
over learned logits.
"""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .checkpoint import load_container, save_container
from .encoder import EncoderModel
from .validation import ensure

ACTIVATIONS = {"relu": ag.relu, "gelu": ag.gelu}


class AdapterBank:
    """One adapter per transformer layer, trained for one domain."""

    def __init__(
        self,
        domain: str,
        n_layers: int,
        hidden: int,
        bottleneck: int,
        activation: str = "relu",
        params: Optional[dict[str, Parameter]] = None,
        provenance: Optional[dict] = None,
        include_biases: bool = True,
    ):
        ensure(bottleneck < hidden, f"bottleneck m={bottleneck} must be strictly below hidden={hidden}")
        ensure(activation in ACTIVATIONS, f"activation must be one of {sorted(ACTIVATIONS)}")
        self.domain = domain
        self.n_layers = n_layers
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.activation = activation
        self.provenance = provenance or {}
        self.include_biases = include_biases
        self.params = params or {}

    def layer_params(self, layer: int) -> dict[str, Parameter]:
        prefix = f"layer{layer}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        return {prefix + k: v for k, v in self.params.items()}

    def config_obj(self) -> dict:
        return {
            "domain": self.domain,
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "bottleneck": self.bottleneck,
            "activation": self.activation,
            "include_biases": self.include_biases,
        }


def init_adapter_bank(
    n_layers: int,
    hidden: int,
    bottleneck: int,
    seed: int,
    domain: str = "",
    activation: str = "relu",
    dtype=np.float32,
    include_biases: bool = True,
    provenance: Optional[dict] = None,
) -> AdapterBank:
    """Down-projections from a scaled normal (std 1/sqrt(h)); U and biases zero,
    so a fresh bank is an exact identity on the residual path."""
    ensure(bottleneck < hidden, f"bottleneck m={bottleneck} must be strictly below hidden={hidden}")
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    std = 1.0 / np.sqrt(hidden)
    for i in range(n_layers):
        down = rng.normal(0.0, std, size=(bottleneck, hidden)).astype(dtype)
        params[f"layer{i}.down"] = Parameter(f"layer{i}.down", down)
        params[f"layer{i}.up"] = Parameter(f"layer{i}.up", np.zeros((hidden, bottleneck), dtype=dtype))
        if include_biases:
            params[f"layer{i}.down_bias"] = Parameter(
                f"layer{i}.down_bias", np.zeros(bottleneck, dtype=dtype)
            )
            params[f"layer{i}.up_bias"] = Parameter(f"layer{i}.up_bias", np.zeros(hidden, dtype=dtype))
    return AdapterBank(
        domain=domain,
        n_layers=n_layers,
        hidden=hidden,
        bottleneck=bottleneck,
        activation=activation,
        params=params,
        provenance=provenance,
        include_biases=include_biases,
    )


def adapter_forward(bank: AdapterBank, layer: int, h: Tensor, r: Tensor) -> Tensor:
    """U g(D h + b_D) + b_U + r for one layer of one bank.

    D is stored (m, h) and U (h, m) as declared; activations are row vectors,
    so the projections apply as transposed matmuls.
    """
    lp = bank.layer_params(layer)
    g = ACTIVATIONS[bank.activation]
    mid = ag.matmul(h, ag.swapaxes(lp["down"], 0, 1))
    if "down_bias" in lp:
        mid = ag.add(mid, lp["down_bias"])
    up = ag.matmul(g(mid), ag.swapaxes(lp["up"], 0, 1))
    if "up_bias" in lp:
        up = ag.add(up, lp["up_bias"])
    return ag.add(up, r)


class FusionWeights:
    """Per-layer unnormalized logits over the fused banks; softmax at use time."""

    def __init__(self, n_layers: int, n_banks: int, dtype=np.float32):
        self.n_layers = n_layers
        self.n_banks = n_banks
        self.params = {
            f"layer{i}.logits": Parameter(f"layer{i}.logits", np.zeros(n_banks, dtype=dtype))
            for i in range(n_layers)
        }

    def named_parameters(self, prefix: str = "fusion.") -> dict[str, Parameter]:
        return {prefix + k: v for k, v in self.params.items()}


class AdapterComposition:
    """Attachable composition: single bank, ordered stack, or softmax fusion."""

    def __init__(
        self,
        banks: Sequence[AdapterBank],
        mode: str = "single",
        fusion: Optional[FusionWeights] = None,
    ):
        ensure(mode in ("single", "stack", "fuse"), f"unknown composition mode {mode!r}")
        ensure(len(banks) >= 1, "composition needs at least one bank")
        if mode == "single":
            ensure(len(banks) == 1, "single composition takes exactly one bank")
        if mode == "fuse":
            ensure(fusion is not None, "fuse composition requires fusion weights")
            ensure(fusion.n_banks == len(banks), "fusion weights sized to the bank count")
        self.banks = tuple(banks)
        self.mode = mode
        self.fusion = fusion

    def compose(self, layer: int, h: Tensor, r: Tensor) -> Tensor:
        if self.mode == "single":
            return adapter_forward(self.banks[0], layer, h, r)
        if self.mode == "stack":
            out = adapter_forward(self.banks[0], layer, h, r)
            for bank in self.banks[1:]:
                out = adapter_forward(bank, layer, out, out)
            return out
        weights = ag.softmax(self.fusion.params[f"layer{layer}.logits"], axis=-1)
        mixed = None
        for j, bank in enumerate(self.banks):
            term = ag.mul(adapter_forward(bank, layer, h, r), ag.rows(weights, np.array(j)))
            mixed = term if mixed is None else ag.add(mixed, term)
        return mixed

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for idx, bank in enumerate(self.banks):
            label = bank.domain or f"bank{idx}"
            out.update(bank.named_parameters(prefix=f"adapter.{idx}.{label}."))
        if self.fusion is not None:
            out.update(self.fusion.named_parameters())
        return out


def inject(
    model: EncoderModel,
    banks: Sequence[AdapterBank],
    compose: str = "single",
    fusion: Optional[FusionWeights] = None,
) -> EncoderModel:
    """Composed model view sharing the base parameters (no copies)."""
    for bank in banks:
        ensure(
            bank.n_layers == model.config.layers and bank.hidden == model.config.hidden,
            f"bank {bank.domain!r} shaped for {bank.n_layers} layers x {bank.hidden} hidden, "
            f"host has {model.config.layers} x {model.config.hidden}",
        )
    if compose == "fuse" and len(banks) == 1:
        warnings.warn("fusing a single bank degenerates to the single composition")
        if fusion is None:
            fusion = FusionWeights(model.config.layers, 1, dtype=model.config.np_dtype)
    composed = model.share_view()
    composed.adapters = AdapterComposition(banks, mode=compose, fusion=fusion)
    return composed


def freeze_base(model: EncoderModel) -> EncoderModel:
    """Freeze every base encoder parameter; adapter and fusion parameters stay
    trainable. Task heads live outside the model and are unaffected."""
    ensure(model.adapters is not None, "freeze_base expects an adapter-composed model")
    for p in model.params.values():
        p.freeze()
    return model


def adapter_trainable_count(n_layers: int, hidden: int, bottleneck: int, include_biases: bool = True) -> int:
    """Closed form per bank: L (2 m h + m + h) with biases, L 2 m h without."""
    per_layer = 2 * bottleneck * hidden
    if include_biases:
        per_layer += bottleneck + hidden
    return n_layers * per_layer


def save_adapter_bank(bank: AdapterBank, directory, seed: Optional[int] = None) -> None:
    save_container(
        directory,
        kind="adapter-bank",
        config=bank.config_obj(),
        params=bank.params,
        seed=seed,
        provenance=bank.provenance,
    )


def load_adapter_bank(directory) -> AdapterBank:
    manifest, params = load_container(directory)
    ensure(manifest["kind"] == "adapter-bank", f"{directory}: expected an adapter-bank checkpoint")
    cfg = manifest["config"]
    return AdapterBank(
        domain=cfg["domain"],
        n_layers=cfg["n_layers"],
        hidden=cfg["hidden"],
        bottleneck=cfg["bottleneck"],
        activation=cfg["activation"],
        params=params,
        provenance=manifest.get("provenance", {}),
        include_biases=cfg.get("include_biases", True),
    )
