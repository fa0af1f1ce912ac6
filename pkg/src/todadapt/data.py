"""Domain types and file I/O for dialogs, ontologies, thread dumps, and corpora.

All on-disk formats are line-delimited JSON: streamable, diff-able, and
language-neutral. Parsed objects are immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .validation import SchemaError, check_type, ensure, require_keys

SPEAKERS = ("user", "system")
NONE_VALUE = "none"


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str

    def __post_init__(self):
        ensure(self.speaker in SPEAKERS, f"speaker must be one of {SPEAKERS}, got {self.speaker!r}")
        ensure(bool(self.text.strip()), "utterance text must be non-empty after trimming")


@dataclass(frozen=True)
class SlotValue:
    domain: str
    slot: str
    value: str


@dataclass(frozen=True)
class Dialog:
    """A multi-turn conversation; single-domain iff len(domains) == 1."""

    id: str
    domains: frozenset[str]
    turns: tuple[Utterance, ...]
    states: Optional[tuple[tuple[SlotValue, ...], ...]] = None

    def __post_init__(self):
        ensure(len(self.turns) > 0, f"dialog {self.id!r}: turns must be non-empty")
        if self.states is not None:
            ensure(
                len(self.states) == len(self.turns),
                f"dialog {self.id!r}: one state list per turn "
                f"({len(self.states)} states for {len(self.turns)} turns)",
            )

    @property
    def single_domain(self) -> bool:
        return len(self.domains) == 1


class Ontology:
    """Finite (domain, slot) -> admissible values map; "none" is implicit."""

    def __init__(self, values: dict[tuple[str, str], Sequence[str]]):
        ensure(len(values) > 0, "ontology must define at least one (domain, slot)")
        store: dict[tuple[str, str], tuple[str, ...]] = {}
        for key, vals in values.items():
            domain, slot = key
            vals = tuple(vals)
            ensure(len(vals) > 0, f"ontology {key}: value list must be non-empty")
            ensure(len(vals) == len(set(vals)), f"ontology {key}: duplicate values")
            ensure(NONE_VALUE not in vals, f"ontology {key}: {NONE_VALUE!r} is reserved")
            store[(domain, slot)] = vals
        self._values = store

    def slots(self) -> tuple[tuple[str, str], ...]:
        """All (domain, slot) pairs in insertion order."""
        return tuple(self._values)

    def values(self, domain: str, slot: str) -> tuple[str, ...]:
        ensure((domain, slot) in self._values, f"unknown ontology slot ({domain!r}, {slot!r})", KeyError)
        return self._values[(domain, slot)]

    def candidates(self, domain: str, slot: str) -> tuple[str, ...]:
        """Admissible values with "none" appended last."""
        return self.values(domain, slot) + (NONE_VALUE,)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._values

    def __eq__(self, other) -> bool:
        return isinstance(other, Ontology) and self._values == other._values

    def domains(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for d, _ in self._values:
            seen.setdefault(d)
        return tuple(seen)


@dataclass(frozen=True)
class ThreadComment:
    id: str
    parent_id: Optional[str]
    body: str
    subreddit: str
    created_utc: int


@dataclass(frozen=True)
class Thread:
    """One comment tree; comments ordered by (created_utc, id)."""

    root_id: str
    comments: tuple[ThreadComment, ...]
    children: dict[str, tuple[str, ...]] = field(hash=False)

    def comment(self, comment_id: str) -> ThreadComment:
        for c in self.comments:
            if c.id == comment_id:
                return c
        raise KeyError(comment_id)

    def children_of(self, comment_id: str) -> tuple[str, ...]:
        return self.children.get(comment_id, ())


@dataclass(frozen=True)
class DialogTriple:
    """(context, true response, false response) mined from one thread."""

    context: str
    response: str
    false_response: str
    domain: str
    subreddit: str
    thread_id: Optional[str] = None

    def __post_init__(self):
        ensure(self.response != self.false_response, "response and false_response must differ")


@dataclass(frozen=True)
class CorpusLine:
    text: str
    matched_terms: tuple[str, ...]

    def __post_init__(self):
        ensure(len(self.matched_terms) > 0, "matched_terms must be non-empty")


# ---------------------------------------------------------------------------
# jsonl helpers


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({err.msg})") from err
            yield lineno, obj


def _write_jsonl(path: Path, objs: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# dialogs


def dialog_to_obj(dialog: Dialog) -> dict:
    obj: dict = {
        "id": dialog.id,
        "domains": sorted(dialog.domains),
        "turns": [{"speaker": u.speaker, "text": u.text} for u in dialog.turns],
    }
    if dialog.states is not None:
        obj["states"] = [
            [{"domain": s.domain, "slot": s.slot, "value": s.value} for s in per_turn]
            for per_turn in dialog.states
        ]
    return obj


def dialog_from_obj(obj: dict, where: str, ontology: Optional[Ontology] = None) -> Dialog:
    require_keys(obj, ("id", "domains", "turns"), where)
    turns_raw = check_type(obj["turns"], list, "turns", where)
    turns = []
    for i, t in enumerate(turns_raw):
        require_keys(t, ("speaker", "text"), f"{where} turn {i}")
        turns.append(Utterance(speaker=t["speaker"], text=t["text"]))
    states = None
    if obj.get("states") is not None:
        states_raw = check_type(obj["states"], list, "states", where)
        states = []
        for per_turn in states_raw:
            triples = []
            for s in per_turn:
                require_keys(s, ("domain", "slot", "value"), f"{where} states")
                sv = SlotValue(domain=s["domain"], slot=s["slot"], value=s["value"])
                if ontology is not None and (sv.domain, sv.slot) not in ontology:
                    raise SchemaError(
                        f"{where}: state references ({sv.domain!r}, {sv.slot!r}) "
                        "absent from the ontology"
                    )
                triples.append(sv)
            states.append(tuple(triples))
        states = tuple(states)
    try:
        return Dialog(
            id=obj["id"],
            domains=frozenset(check_type(obj["domains"], list, "domains", where)),
            turns=tuple(turns),
            states=states,
        )
    except ValueError as err:
        raise SchemaError(f"{where}: {err}") from err


def load_dialogs(path, ontology: Optional[Ontology] = None) -> list[Dialog]:
    """Load dialogs.jsonl in file order, validating every invariant."""
    path = Path(path)
    return [dialog_from_obj(obj, f"{path}:{lineno}", ontology) for lineno, obj in _iter_jsonl(path)]


def save_dialogs(path, dialogs: Iterable[Dialog]) -> int:
    return _write_jsonl(Path(path), (dialog_to_obj(d) for d in dialogs))


def filter_single_domain(dialogs: Sequence[Dialog], domain: str) -> list[Dialog]:
    """Dialogs whose domain set is exactly {domain}."""
    return [d for d in dialogs if d.domains == frozenset([domain])]


# ---------------------------------------------------------------------------
# threads


def comment_from_obj(obj: dict, where: str) -> ThreadComment:
    require_keys(obj, ("id", "body", "subreddit", "created_utc"), where)
    return ThreadComment(
        id=check_type(obj["id"], str, "id", where),
        parent_id=obj.get("parent_id"),
        body=check_type(obj["body"], str, "body", where),
        subreddit=check_type(obj["subreddit"], str, "subreddit", where),
        created_utc=check_type(obj["created_utc"], int, "created_utc", where),
    )


def comment_to_obj(c: ThreadComment) -> dict:
    obj = {"id": c.id, "body": c.body, "subreddit": c.subreddit, "created_utc": c.created_utc}
    if c.parent_id is not None:
        obj["parent_id"] = c.parent_id
    return obj


def group_threads(comments: Sequence[ThreadComment]) -> tuple[list[Thread], int]:
    """Group comments into trees by root.

    Comments whose parent is absent from the input are promoted to roots
    (dumps are frequently truncated); the count of such orphans is returned.
    Grouping depends only on the id links, never on input order.
    """
    by_id = {c.id: c for c in comments}
    ensure(len(by_id) == len(comments), "duplicate comment ids in dump")
    orphans = 0
    root_of: dict[str, str] = {}

    def resolve(cid: str) -> str:
        seen = []
        while cid not in root_of:
            seen.append(cid)
            parent = by_id[cid].parent_id
            if parent is None or parent not in by_id:
                root_of[cid] = cid
                break
            ensure(parent not in seen, f"cycle detected at comment {cid!r}")
            cid = parent
        root = root_of[cid]
        for s in seen:
            root_of[s] = root
        return root

    for c in comments:
        if c.parent_id is not None and c.parent_id not in by_id:
            orphans += 1
        resolve(c.id)

    grouped: dict[str, list[ThreadComment]] = {}
    for c in comments:
        grouped.setdefault(root_of[c.id], []).append(c)

    threads = []
    for root_id in sorted(grouped):
        members = sorted(grouped[root_id], key=lambda c: (c.created_utc, c.id))
        children: dict[str, list[str]] = {}
        member_ids = {c.id for c in members}
        for c in members:
            if c.parent_id in member_ids:
                children.setdefault(c.parent_id, []).append(c.id)
        threads.append(
            Thread(
                root_id=root_id,
                comments=tuple(members),
                children={k: tuple(v) for k, v in children.items()},
            )
        )
    return threads, orphans


def load_thread_dump(path) -> tuple[list[Thread], int]:
    """Load threads.jsonl and group into threads; returns (threads, orphan count)."""
    path = Path(path)
    comments = [comment_from_obj(obj, f"{path}:{lineno}") for lineno, obj in _iter_jsonl(path)]
    return group_threads(comments)


def save_thread_dump(path, comments: Iterable[ThreadComment]) -> int:
    return _write_jsonl(Path(path), (comment_to_obj(c) for c in comments))


# ---------------------------------------------------------------------------
# corpora


def load_corpus_lines(path) -> list[CorpusLine]:
    out = []
    for lineno, obj in _iter_jsonl(Path(path)):
        require_keys(obj, ("text", "matched_terms"), f"{path}:{lineno}")
        out.append(CorpusLine(text=obj["text"], matched_terms=tuple(obj["matched_terms"])))
    return out


def corpus_line_to_obj(line: CorpusLine) -> dict:
    return {"text": line.text, "matched_terms": list(line.matched_terms)}


def save_corpus_lines(path, lines: Iterable[CorpusLine]) -> int:
    return _write_jsonl(Path(path), (corpus_line_to_obj(x) for x in lines))


def triple_to_obj(t: DialogTriple) -> dict:
    obj = {
        "context": t.context,
        "response": t.response,
        "false_response": t.false_response,
        "domain": t.domain,
        "subreddit": t.subreddit,
    }
    if t.thread_id is not None:
        obj["thread_id"] = t.thread_id
    return obj


def load_triples(path) -> list[DialogTriple]:
    out = []
    for lineno, obj in _iter_jsonl(Path(path)):
        require_keys(
            obj, ("context", "response", "false_response", "domain", "subreddit"), f"{path}:{lineno}"
        )
        try:
            out.append(
                DialogTriple(
                    context=obj["context"],
                    response=obj["response"],
                    false_response=obj["false_response"],
                    domain=obj["domain"],
                    subreddit=obj["subreddit"],
                    thread_id=obj.get("thread_id"),
                )
            )
        except ValueError as err:
            raise SchemaError(f"{path}:{lineno}: {err}") from err
    return out


def save_triples(path, triples: Iterable[DialogTriple]) -> int:
    return _write_jsonl(Path(path), (triple_to_obj(t) for t in triples))


# ---------------------------------------------------------------------------
# MultiWOZ 2.1 ingestion

MULTIWOZ_DOMAINS = ("taxi", "restaurant", "hotel", "attraction", "train", "hospital", "police", "bus")


def _read_id_list(directory: Path, stem: str) -> list[str]:
    for name in (f"{stem}.json", f"{stem}.txt"):
        p = directory / name
        if p.exists():
            text = p.read_text(encoding="utf-8").strip()
            if not text:
                return []
            if text[0] in "[{":
                return list(json.loads(text))
            return [ln.strip() for ln in text.splitlines() if ln.strip()]
    raise FileNotFoundError(f"neither {stem}.json nor {stem}.txt found under {directory}")


def _belief_from_metadata(metadata: dict) -> tuple[SlotValue, ...]:
    out = []
    for domain, groups in sorted(metadata.items()):
        if domain not in MULTIWOZ_DOMAINS or not isinstance(groups, dict):
            continue
        for slot, value in sorted(groups.get("semi", {}).items()):
            if isinstance(value, list):
                value = value[0] if value else ""
            value = str(value).strip()
            if value and value not in ("not mentioned", "none"):
                out.append(SlotValue(domain=domain, slot=slot, value=value.lower()))
    return tuple(out)


def convert_multiwoz(directory) -> dict[str, list[Dialog]]:
    """Convert a MultiWOZ 2.1 distribution directory to the dialog schema.

    Expects data.json plus valListFile/testListFile (.json or .txt). Domains
    come from non-empty goal entries; per-turn states carry the belief in
    effect after each turn, read from system-turn metadata.
    """
    directory = Path(directory)
    with open(directory / "data.json", encoding="utf-8") as fh:
        raw = json.load(fh)
    val_ids = set(_read_id_list(directory, "valListFile"))
    test_ids = set(_read_id_list(directory, "testListFile"))

    splits: dict[str, list[Dialog]] = {"train": [], "dev": [], "test": []}
    for dialog_id in sorted(raw):
        entry = raw[dialog_id]
        goal = entry.get("goal", {})
        domains = frozenset(d for d in MULTIWOZ_DOMAINS if goal.get(d))
        if not domains:
            continue
        turns: list[Utterance] = []
        states: list[tuple[SlotValue, ...]] = []
        current: tuple[SlotValue, ...] = ()
        log = entry.get("log", [])
        for i, item in enumerate(log):
            text = str(item.get("text", "")).strip()
            if not text:
                continue
            is_system = bool(item.get("metadata"))
            turns.append(Utterance(speaker="system" if is_system else "user", text=text))
            if is_system:
                current = _belief_from_metadata(item["metadata"])
            elif i + 1 < len(log) and log[i + 1].get("metadata"):
                current = _belief_from_metadata(log[i + 1]["metadata"])
            states.append(current)
        if not turns:
            continue
        dialog = Dialog(id=dialog_id, domains=domains, turns=tuple(turns), states=tuple(states))
        if dialog_id in test_ids:
            splits["test"].append(dialog)
        elif dialog_id in val_ids:
            splits["dev"].append(dialog)
        else:
            splits["train"].append(dialog)
    return splits


def ontology_from_dialogs(dialogs: Iterable[Dialog]) -> Ontology:
    """Derive the (domain, slot) -> observed values map from annotated dialogs."""
    observed: dict[tuple[str, str], dict[str, None]] = {}
    for d in dialogs:
        if d.states is None:
            continue
        for per_turn in d.states:
            for sv in per_turn:
                if sv.value != NONE_VALUE:
                    observed.setdefault((sv.domain, sv.slot), {}).setdefault(sv.value)
    ensure(len(observed) > 0, "no state annotations found; cannot derive an ontology")
    return Ontology({key: tuple(vals) for key, vals in sorted(observed.items())})
