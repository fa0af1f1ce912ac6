"""Finite-difference verification of the analytic gradients, one group of
parameters at a time, on a tiny double-precision model. Central differences;
relative error |a - n| / max(|a|, |n|, 1e-6) compared against a tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .adapters import FusionWeights, freeze_base, init_adapter_bank, inject
from .autograd import Parameter
from .corpus import NCEGroup, RSInstance
from .data import Ontology, SlotValue
from .downstream import DSTHead, DSTItem, _HistoryCache, dst_loss
from .encoder import EncoderConfig, EncoderModel, mask_tokens
from .objectives import (
    LINEAR_ON_CLS,
    MLMHead,
    ScoringHead,
    TextEncodeCache,
    mlm_loss,
    rs_class_loss,
    rs_contrast_loss,
)
from .tokenization import build_vocab
from .validation import ensure

GROUPS = (
    "encoder",
    "mlm_head",
    "rs_head_dual",
    "rs_head_linear",
    "adapters",
    "fusion",
    "dst_head",
)

_WORDS = (
    "book a table for two tonight please the train leaves at noon "
    "find me a cheap hotel near the station thanks that works "
    "what time does the museum open i need a taxi to the airport"
).split()


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GroupReport:
    group: str
    rows: list = field(default_factory=list)
    tolerance: float = 1e-4
    max_rel_err: float = 0.0
    passed: bool = True

    def to_obj(self) -> dict:
        return {
            "group": self.group,
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "rows": [
                {"name": r.name, "max_rel_err": r.max_rel_err, "n_checked": r.n_checked}
                for r in self.rows
            ],
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def _tiny_model(seed: int, layers: int = 2, hidden: int = 16) -> EncoderModel:
    rng = np.random.default_rng(seed)
    texts = [" ".join(rng.choice(_WORDS, size=6)) for _ in range(12)]
    vocab = build_vocab(texts + [" ".join(_WORDS)])
    config = EncoderConfig(
        layers=layers,
        hidden=hidden,
        heads=2,
        ffn=32,
        max_len=16,
        vocab_size=len(vocab),
        per_segment_cap=8,
        dropout=0.0,
        dtype="float64",
    )
    return EncoderModel.init(config, vocab, seed=seed)


def _texts(rng, n: int, length: int = 5) -> list[str]:
    return [" ".join(rng.choice(_WORDS, size=length)) for _ in range(n)]


def _rs_instances(rng, n: int) -> list[RSInstance]:
    out = []
    for i in range(n):
        out.append(
            RSInstance(
                context=" ".join(rng.choice(_WORDS, size=5)),
                response=" ".join(rng.choice(_WORDS, size=4)),
                label="positive" if i % 2 == 0 else "easy_negative",
                k_drawn=None,
            )
        )
    return out


def _nce_groups(rng, n_groups: int, group_size: int = 3) -> list[NCEGroup]:
    groups = []
    for _ in range(n_groups):
        responses = tuple(" ".join(rng.choice(_WORDS, size=4)) for _ in range(group_size))
        groups.append(
            NCEGroup(
                context=" ".join(rng.choice(_WORDS, size=5)),
                responses=responses,
                true_index=int(rng.integers(group_size)),
                n_negatives=group_size - 1,
            )
        )
    return groups


def _randomize(params: dict[str, Parameter], rng, scale: float = 0.2) -> None:
    for p in params.values():
        p.data = rng.normal(0.0, scale, size=p.data.shape).astype(p.data.dtype)


def _build(group: str, seed: int) -> tuple[Callable, dict[str, Parameter]]:
    """Deterministic scalar loss closure + the parameter tensors to check."""
    rng = np.random.default_rng(seed + 1)
    model = _tiny_model(seed)
    cfg = model.config
    cache = TextEncodeCache(model.vocab, cfg.max_len, cfg.per_segment_cap)

    if group in ("encoder", "mlm_head", "rs_head_linear"):
        lines = _texts(rng, 4)
        batch = cache.batch(lines)
        masked, labels = mask_tokens(batch, np.random.default_rng(seed + 2), cfg.vocab_size)
        ensure(np.any(labels >= 0), "masking produced no supervised positions")
        mlm_head = MLMHead(cfg.vocab_size, dtype=np.float64)
        rs_head = ScoringHead(LINEAR_ON_CLS, hidden=cfg.hidden, dtype=np.float64)
        _randomize(rs_head.params, rng)
        instances = _rs_instances(rng, 4)

        def compute():
            a, _ = mlm_loss(model, mlm_head, batch, masked, labels)
            b, _ = rs_class_loss(model, rs_head, instances, cache)
            return ag.add(a, b)

        checked = {
            "encoder": model.named_parameters(),
            "mlm_head": mlm_head.named_parameters(),
            "rs_head_linear": rs_head.named_parameters(),
        }[group]
        return compute, checked

    if group == "rs_head_dual":
        head = ScoringHead(hidden=cfg.hidden, dtype=np.float64)
        groups = _nce_groups(rng, 3)

        def compute():
            loss, _ = rs_contrast_loss(model, head, groups, cache)
            return loss

        # the dot scorer has no parameters of its own; its trainable surface
        # is the pooling projection feeding both sides
        checked = {k: p for k, p in model.named_parameters().items() if k.startswith("pool.")}
        return compute, checked

    if group in ("adapters", "fusion"):
        banks = []
        n_banks = 2 if group == "fusion" else 1
        for b in range(n_banks):
            bank = init_adapter_bank(
                n_layers=cfg.layers,
                hidden=cfg.hidden,
                bottleneck=4,
                seed=seed + 10 + b,
                domain=f"bank{b}",
                dtype=np.float64,
            )
            # zero-init U blocks gradient flow into D; randomize everything
            _randomize(bank.params, np.random.default_rng(seed + 20 + b))
            banks.append(bank)
        if group == "fusion":
            fusion = FusionWeights(cfg.layers, n_banks, dtype=np.float64)
            _randomize(fusion.params, np.random.default_rng(seed + 30))
            composed = inject(model, banks, compose="fuse", fusion=fusion)
            checked = fusion.named_parameters()
        else:
            composed = inject(model, banks, compose="single")
            checked = banks[0].named_parameters(prefix="")
        freeze_base(composed)
        head = ScoringHead(hidden=cfg.hidden, dtype=np.float64)
        groups_ = _nce_groups(rng, 3)

        def compute():
            loss, _ = rs_contrast_loss(composed, head, groups_, cache)
            return loss

        return compute, checked

    if group == "dst_head":
        ontology = Ontology(
            {
                ("transport", "destination"): ("airport", "station", "museum"),
                ("transport", "leaveat"): ("noon", "tonight"),
            }
        )
        head = DSTHead(ontology, cfg.hidden, seed=seed + 3, dtype=np.float64)
        history_cache = _HistoryCache(model.vocab, cfg.max_len)
        items = [
            DSTItem(
                dialog_id=f"d{i}",
                turn_index=0,
                history=tuple(_texts(rng, 2)),
                gold=(SlotValue("transport", "destination", "station"),),
            )
            for i in range(3)
        ]

        def compute():
            loss, _ = dst_loss(model, head, items, ontology, history_cache, cache)
            return loss

        return compute, head.named_parameters()

    raise ValueError(f"unknown gradient-check group {group!r}")


def check_group(
    group: str,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    entries_per_tensor: int = 6,
    seed: int = 0,
    corrupt_param: Optional[str] = None,
) -> GroupReport:
    """Compare analytic against central-difference gradients for one group.

    corrupt_param deliberately perturbs that tensor's analytic gradient, for
    verifying that the harness actually catches a wrong backward pass.
    """
    compute, checked = _build(group, seed)
    loss = compute()
    ag.backward(loss)
    analytic = {}
    for name, p in checked.items():
        ensure(p.grad is not None, f"no analytic gradient reached {name}")
        analytic[name] = p.grad.copy()
        if corrupt_param is not None and name == corrupt_param:
            analytic[name] = analytic[name] + 1.0

    report = GroupReport(group=group, tolerance=tolerance)
    entry_rng = np.random.default_rng(seed + 99)
    for name in sorted(checked):
        p = checked[name]
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        k = min(entries_per_tensor, n)
        picks = entry_rng.choice(n, size=k, replace=False)
        worst = 0.0
        for j in picks:
            j = int(j)
            saved = flat[j]
            flat[j] = saved + step
            plus = float(compute().data)
            flat[j] = saved - step
            minus = float(compute().data)
            flat[j] = saved
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[j]), numeric))
        report.rows.append(GradCheckRow(name=name, max_rel_err=worst, n_checked=k))
        report.max_rel_err = max(report.max_rel_err, worst)
    report.passed = report.max_rel_err < tolerance
    return report


def run_gradcheck(
    groups: Sequence[str] = GROUPS,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    entries_per_tensor: int = 6,
    seed: int = 0,
) -> list[GroupReport]:
    return [
        check_group(g, tolerance, step, entries_per_tensor, seed) for g in groups
    ]
