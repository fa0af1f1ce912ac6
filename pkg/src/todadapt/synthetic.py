"""Seeded synthetic two-domain dialog world for tests and desk-scale
experiments: templated dialogs with slot annotations, threaded forum dumps,
flat web-crawl style lines, and ready-made response-selection triples.

The generative signal is topical: a context and its true response share a
topic cluster and an entity token, so response selection is learnable by a
small encoder, while false responses come from a different topic.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .data import (
    Dialog,
    DialogTriple,
    Ontology,
    SlotValue,
    Thread,
    ThreadComment,
    Utterance,
    group_threads,
)
from .validation import ensure

DOMAINS = ("transport", "dining")

# generic pseudo-domain for base pretraining: same pairing mechanics, disjoint
# vocabulary, no task slots, so a base trained on it gains response-matching
# skill without seeing either task domain's topic clusters
GENERIC_DOMAIN = "chatter"

_WORLD = {
    "chatter": {
        "topics": {
            "music": ("music", "guitar", "melody", "concert"),
            "garden": ("garden", "roses", "lawn", "seeds"),
            "cinema": ("cinema", "movie", "screen", "popcorn"),
            "weather": ("weather", "clouds", "sunshine", "breeze"),
        },
        "entities": ("village", "rooftop", "meadow", "courtyard", "balcony", "pier"),
        "slots": {},
    },
    "transport": {
        "topics": {
            "taxi": ("taxi", "cab", "ride", "driver"),
            "train": ("train", "rail", "platform", "carriage"),
            "bus": ("bus", "coach", "stop", "route"),
            "flight": ("flight", "plane", "airport", "gate"),
        },
        "entities": ("airport", "station", "museum", "harbor", "castle", "square"),
        "slots": {
            "destination": ("airport", "station", "museum", "harbor", "castle", "square"),
            "leaveat": ("morning", "noon", "evening", "midnight"),
        },
    },
    "dining": {
        "topics": {
            "pizza": ("pizza", "oven", "slice", "margherita"),
            "sushi": ("sushi", "rolls", "wasabi", "salmon"),
            "burger": ("burger", "fries", "patty", "ketchup"),
            "curry": ("curry", "spice", "naan", "masala"),
        },
        "entities": ("bistro", "diner", "tavern", "cafe", "buffet", "canteen"),
        "slots": {
            "food": ("pizza", "sushi", "burger", "curry"),
            "pricerange": ("cheap", "moderate", "expensive"),
        },
    },
}

_FILLERS = ("please", "thanks", "today", "soon", "now", "kindly", "right away")

_CONTEXT_TEMPLATES = (
    "can i get a {t} to the {e} {f}",
    "is there a {t} available near the {e} {f}",
    "i would like a {t} for the {e} {f}",
    "looking for a good {t} by the {e} {f}",
)

_RESPONSE_TEMPLATES = (
    "your {t} for the {e} is confirmed {f}",
    "we booked the {t} at the {e} {f}",
    "the {t} near the {e} is ready {f}",
)

_GENERIC_LINES = (
    "the weather is lovely this afternoon and the park is full",
    "she finished reading the novel before the storm arrived",
    "new elections were announced in the northern province yesterday",
    "the orchestra rehearsed the same passage for three hours",
    "he painted the fence a dull shade of green last weekend",
    "scientists observed the comet from the mountain observatory",
)


def world(domain: str) -> dict:
    ensure(domain in _WORLD, f"unknown synthetic domain {domain!r}; have {DOMAINS}")
    return _WORLD[domain]


def ontology_for(domains: Sequence[str] = DOMAINS) -> Ontology:
    values = {}
    for d in domains:
        for slot, vals in world(d)["slots"].items():
            values[(d, slot)] = tuple(vals)
    return Ontology(values)


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _topic_sentence(rng, templates, topic_words, entity) -> str:
    return _pick(rng, templates).format(
        t=_pick(rng, topic_words), e=entity, f=_pick(rng, _FILLERS)
    )


def make_triples(
    domain: str, n: int, seed: int, max_context_turns: int = 3
) -> list[DialogTriple]:
    """Response-selection triples: the false response talks about a different
    topic at a different entity. Contexts span 1..max_context_turns joined
    utterances so encoders see realistic history lengths, with the last turn
    always on-topic. Each triple gets its own thread id so easy negatives
    (different thread) draw from the whole set."""
    ensure(max_context_turns >= 1, "max_context_turns must be at least 1")
    w = world(domain)
    rng = np.random.default_rng(seed)
    topics = sorted(w["topics"])
    triples = []
    for i in range(n):
        topic = _pick(rng, topics)
        other = _pick(rng, [t for t in topics if t != topic])
        entity = _pick(rng, w["entities"])
        other_entity = _pick(rng, [e for e in w["entities"] if e != entity])
        n_turns = 1 + int(rng.integers(max_context_turns))
        context_turns = [
            _topic_sentence(rng, _CONTEXT_TEMPLATES, w["topics"][topic], entity)
            for _ in range(n_turns)
        ]
        triples.append(
            DialogTriple(
                context=" ".join(context_turns),
                response=_topic_sentence(rng, _RESPONSE_TEMPLATES, w["topics"][topic], entity),
                false_response=_topic_sentence(
                    rng, _RESPONSE_TEMPLATES, w["topics"][other], other_entity
                ),
                domain=domain,
                subreddit=domain,
                thread_id=f"{domain}-syn-{i}",
            )
        )
    return triples


def make_dialogs(
    domain: str,
    n: int,
    seed: int,
    with_states: bool = True,
    id_prefix: Optional[str] = None,
) -> list[Dialog]:
    """Four-turn task dialogs; the user names two slot values, the system
    confirms them with same-topic wording. States accumulate per turn."""
    w = world(domain)
    ensure(len(w["slots"]) >= 2, f"domain {domain!r} has no task slots for dialogs")
    rng = np.random.default_rng(seed)
    slots = sorted(w["slots"])
    first_slot, second_slot = slots[0], slots[1]
    topics = sorted(w["topics"])
    prefix = id_prefix if id_prefix is not None else domain
    dialogs = []
    for i in range(n):
        if domain == "dining":
            # food doubles as the topic so the value words carry signal
            first_value = _pick(rng, w["slots"][first_slot])
            topic_words = w["topics"][first_value]
            second_value = _pick(rng, w["slots"][second_slot])
            entity = _pick(rng, w["entities"])
            user1 = f"hello i want {first_value} at a {entity} {_pick(rng, _FILLERS)}"
            sys1 = f"sure the {_pick(rng, topic_words)} {entity} has a table {_pick(rng, _FILLERS)}"
            user2 = f"something {second_value} {_pick(rng, _FILLERS)}"
            sys2 = f"done a {second_value} {_pick(rng, topic_words)} spot at the {entity}"
        else:
            topic = _pick(rng, topics)
            topic_words = w["topics"][topic]
            first_value = _pick(rng, w["slots"][first_slot])
            second_value = _pick(rng, w["slots"][second_slot])
            user1 = f"hello i need a {_pick(rng, topic_words)} to the {first_value} {_pick(rng, _FILLERS)}"
            sys1 = f"sure your {_pick(rng, topic_words)} to the {first_value} is booked"
            user2 = f"make it {second_value} {_pick(rng, _FILLERS)}"
            sys2 = f"done the {_pick(rng, topic_words)} to the {first_value} leaves {second_value}"
        turns = (
            Utterance("user", user1),
            Utterance("system", sys1),
            Utterance("user", user2),
            Utterance("system", sys2),
        )
        states = None
        if with_states:
            first = (SlotValue(domain, first_slot, first_value),)
            both = (
                SlotValue(domain, first_slot, first_value),
                SlotValue(domain, second_slot, second_value),
            )
            states = (first, first, both, both)
        dialogs.append(
            Dialog(
                id=f"{prefix}-{i:04d}",
                domains=frozenset([domain]),
                turns=turns,
                states=states,
            )
        )
    return dialogs


def make_multi_domain_dialogs(domains: Sequence[str], n: int, seed: int) -> list[Dialog]:
    """Dialogs touching every given domain: per-domain halves concatenated."""
    ensure(len(domains) >= 2, "need at least two domains")
    rng = np.random.default_rng(seed)
    parts = {d: make_dialogs(d, n, int(rng.integers(2**31)), id_prefix=f"multi-{d}") for d in domains}
    out = []
    for i in range(n):
        turns = []
        states = []
        carried: list[SlotValue] = []
        for d in domains:
            piece = parts[d][i]
            turns.extend(piece.turns)
            for st in piece.states:
                states.append(tuple(carried) + tuple(st))
            carried.extend(piece.states[-1])
        out.append(
            Dialog(
                id=f"multi-{'-'.join(domains)}-{i:04d}",
                domains=frozenset(domains),
                turns=tuple(turns),
                states=tuple(states),
            )
        )
    return out


def make_splits(
    domain: str,
    n_train: int,
    n_dev: int,
    n_test: int,
    seed: int,
) -> dict:
    """Disjoint seeded train/dev/test dialog splits for one domain."""
    total = make_dialogs(domain, n_train + n_dev + n_test, seed)
    return {
        "train": total[:n_train],
        "dev": total[n_train : n_train + n_dev],
        "test": total[n_train + n_dev :],
    }


def make_threads(domain: str, n_threads: int, seed: int) -> list[Thread]:
    """Forum threads with a root, two immediate replies, and a deeper reply,
    so every (parent, child) pair has at least one non-child thread comment
    available as a hard negative."""
    w = world(domain)
    rng = np.random.default_rng(seed)
    topics = sorted(w["topics"])
    comments = []
    t0 = 1_600_000_000
    for i in range(n_threads):
        topic = _pick(rng, topics)
        other = _pick(rng, [t for t in topics if t != topic])
        entity = _pick(rng, w["entities"])
        root_id = f"{domain}-th{i}-root"
        bodies = [
            (root_id, None, _topic_sentence(rng, _CONTEXT_TEMPLATES, w["topics"][topic], entity)),
            (
                f"{domain}-th{i}-a",
                root_id,
                _topic_sentence(rng, _RESPONSE_TEMPLATES, w["topics"][topic], entity),
            ),
            (
                f"{domain}-th{i}-b",
                root_id,
                _topic_sentence(rng, _RESPONSE_TEMPLATES, w["topics"][other], entity),
            ),
            (
                f"{domain}-th{i}-a1",
                f"{domain}-th{i}-a",
                _topic_sentence(rng, _RESPONSE_TEMPLATES, w["topics"][topic], entity),
            ),
        ]
        for k, (cid, parent, body) in enumerate(bodies):
            comments.append(
                ThreadComment(
                    id=cid,
                    parent_id=parent,
                    body=body,
                    subreddit=domain,
                    created_utc=t0 + i * 100 + k,
                )
            )
    threads, orphans = group_threads(comments)
    ensure(orphans == 0, "synthetic threads must have no orphans")
    return threads


def make_flat_dump(
    domain: str,
    n_lines: int,
    seed: int,
    in_domain_fraction: float = 0.4,
) -> list[str]:
    """Web-crawl style lines: a seeded mix of in-domain sentences, generic
    sentences, lines with email/url tokens, and too-short fragments."""
    w = world(domain)
    rng = np.random.default_rng(seed)
    topics = sorted(w["topics"])
    lines = []
    for _ in range(n_lines):
        roll = rng.random()
        topic = _pick(rng, topics)
        entity = _pick(rng, w["entities"])
        if roll < in_domain_fraction:
            # 1..3 joined sentences so masked-token training covers the
            # position range that dialog histories occupy downstream
            n_sent = 1 + int(rng.integers(3))
            lines.append(
                " ".join(
                    _topic_sentence(rng, _CONTEXT_TEMPLATES, w["topics"][topic], entity)
                    for _ in range(n_sent)
                )
            )
        elif roll < in_domain_fraction + 0.35:
            lines.append(_pick(rng, _GENERIC_LINES))
        elif roll < in_domain_fraction + 0.45:
            lines.append(
                f"contact us at office@{entity}.example about the {_pick(rng, w['topics'][topic])}"
            )
        elif roll < in_domain_fraction + 0.55:
            lines.append(
                f"see www.{entity}-times.example for {_pick(rng, w['topics'][topic])} schedules"
            )
        else:
            lines.append(_pick(rng, ("ok", "fine", "yes", "no idea")))
    return lines
