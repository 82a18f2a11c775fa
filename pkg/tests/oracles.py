"""Independent re-implementations used as test oracles.

The embedding oracle below is written from the documented contract only:
lowercase, split on non-alphanumerics, hash "w:"+token and "t:"+trigram
features (trigrams over the space-joined token string) with blake2b
digest_size=8 taken big-endian modulo the bucket count, term-frequency
weights, L2-normalized float32 (float32 is part of the contract, so the
oracle uses it too; otherwise rank comparisons would hinge on rounding).
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from factpatch.memory import EditFact, render_surface

_WORDS = (
    "quartz heron maple ember stone violet harbor cedar falcon tundra "
    "copper lively marsh onyx prairie willow zephyr basalt meadow crest "
    "juniper raven saffron delta lagoon mica fjord bramble tarn hollow "
    "garnet plume sorrel wharf knoll vesper frost gully lichen drift"
).split()

_RELATION_SHAPES = (
    "The {w} of {{s}} is",
    "Which {w} belongs to {{s}}",
    "People link {{s}} with the {w}",
)


def oracle_embed(text: str, buckets: int) -> np.ndarray:
    tokens = re.findall(r"[a-z0-9]+", text.lower())
    assert tokens, "oracle cannot embed text without alphanumerics"
    joined = " ".join(tokens)
    features = ["w:" + t for t in tokens]
    features += ["t:" + joined[i : i + 3] for i in range(len(joined) - 2)]
    vec = np.zeros(buckets, dtype=np.float32)
    for feature in features:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
        vec[int.from_bytes(digest, "big") % buckets] += 1.0
    return vec / float(np.linalg.norm(vec))


def brute_force_top_ids(facts: list[EditFact], query: str, k: int, buckets: int) -> list[str]:
    """Rank every fact by dot product, break ties by seq desc then fact_id,
    keep only the newest fact per (subject, relation), return first k ids."""
    query_vec = oracle_embed(query, buckets)
    matrix = np.stack([oracle_embed(f.surface_text, buckets) for f in facts])
    scores = matrix @ query_vec
    ranked = sorted(
        range(len(facts)),
        key=lambda i: (-scores[i], -facts[i].seq, facts[i].fact_id),
    )
    newest: dict[tuple[str, str], int] = {}
    for fact in facts:
        key = (fact.subject, fact.relation)
        newest[key] = max(newest.get(key, -1), fact.seq)
    out: list[str] = []
    for i in ranked:
        fact = facts[i]
        if newest[(fact.subject, fact.relation)] != fact.seq:
            continue
        out.append(fact.fact_id)
        if len(out) == k:
            break
    return out


def random_facts(count: int, seed: int = 0, dup_rate: float = 0.05) -> list[EditFact]:
    """Word-soup corpus with dense seq. A dup_rate slice of facts reuses an
    earlier (subject, relation) key with a different object, so latest-wins
    dedup has something to do."""
    rng = np.random.default_rng(seed)
    facts: list[EditFact] = []
    for seq in range(count):
        if facts and rng.random() < dup_rate:
            donor = facts[int(rng.integers(len(facts)))]
            subject, relation = donor.subject, donor.relation
        else:
            a, b = rng.choice(_WORDS, size=2, replace=False)
            subject = f"{a.capitalize()} {b.capitalize()} {seq:04d}"
            shape = _RELATION_SHAPES[int(rng.integers(len(_RELATION_SHAPES)))]
            relation = shape.format(w=rng.choice(_WORDS))
        new_object = str(rng.choice(_WORDS))
        old_object = str(rng.choice(_WORDS)) if rng.random() < 0.5 else None
        facts.append(
            EditFact(
                fact_id=f"f{seq:06d}-{int(rng.integers(16**4)):04x}",
                seq=seq,
                subject=subject,
                relation=relation,
                old_object=old_object,
                new_object=new_object,
                surface_text=render_surface(subject, relation, new_object),
            )
        )
    return facts
