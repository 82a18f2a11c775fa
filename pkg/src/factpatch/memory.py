"""Append-only memory of edited facts.

Each edit is a subject / relation / object triple plus a rendered natural
language ``surface_text``. The store hands out immutable snapshots so the
retrieval and evaluation layers can work against a fixed view while edits
keep arriving.

File format: one JSON object per line (JSONL), UTF-8, fields
``fact_id, seq, subject, relation, old_object, new_object, surface_text``.
Appends write single lines, so a torn final line never corrupts earlier ones.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import ParseError, StorageError, ValidationError

SUBJECT_PLACEHOLDER = "{s}"

_FIELDS = ("fact_id", "seq", "subject", "relation", "old_object", "new_object", "surface_text")


def render_prompt(subject: str, relation: str) -> str:
    """Render the subject into a relation template, without any object.

    Relations containing ``{s}`` are treated as templates; anything else is
    used as a prefix, producing ``"<relation> <subject> is"``.
    """
    if SUBJECT_PLACEHOLDER in relation:
        return relation.replace(SUBJECT_PLACEHOLDER, subject)
    return f"{relation} {subject} is"


def render_surface(subject: str, relation: str, new_object: str) -> str:
    """Render the full statement of an edit, ending with the new object."""
    return f"{render_prompt(subject, relation)} {new_object}"


@dataclass(frozen=True)
class EditFact:
    """One edited fact. ``old_object`` is None when the prior answer is unknown."""

    fact_id: str
    seq: int
    subject: str
    relation: str
    old_object: str | None
    new_object: str
    surface_text: str

    def __post_init__(self) -> None:
        for name in ("fact_id", "subject", "relation", "new_object", "surface_text"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValidationError(f"EditFact.{name} must be a non-empty string")
        if self.old_object is not None and not self.old_object.strip():
            raise ValidationError("EditFact.old_object must be None or non-empty")
        if not isinstance(self.seq, int) or self.seq < 0:
            raise ValidationError("EditFact.seq must be a non-negative integer")

    @property
    def prompt(self) -> str:
        """The fact's statement truncated before the object."""
        return render_prompt(self.subject, self.relation)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FIELDS}

    @classmethod
    def from_dict(cls, record: dict) -> "EditFact":
        missing = [name for name in _FIELDS if name not in record and name != "old_object"]
        if missing:
            raise ValidationError(f"fact record missing fields: {', '.join(missing)}")
        return cls(
            fact_id=record["fact_id"],
            seq=record["seq"],
            subject=record["subject"],
            relation=record["relation"],
            old_object=record.get("old_object"),
            new_object=record["new_object"],
            surface_text=record["surface_text"],
        )


@dataclass(frozen=True)
class FactSet:
    """An immutable snapshot of the store at some high-water sequence number."""

    facts: tuple[EditFact, ...]
    high_water_seq: int

    def __len__(self) -> int:
        return len(self.facts)

    def __iter__(self) -> Iterator[EditFact]:
        return iter(self.facts)


def dedupe_latest(facts: Iterable[EditFact]) -> list[EditFact]:
    """Keep only the highest-seq fact per (subject, relation) key.

    The relative order of survivors is preserved. Passing the result through
    again is a no-op.
    """
    facts = list(facts)
    newest: dict[tuple[str, str], int] = {}
    for fact in facts:
        key = (fact.subject, fact.relation)
        if key not in newest or fact.seq > newest[key]:
            newest[key] = fact.seq
    return [f for f in facts if newest[(f.subject, f.relation)] == f.seq]


class FactStore:
    """Appends are serialized through one lock; snapshots are cheap copies.

    When ``path`` is given, every append is written and flushed to that file
    before returning, and any existing content is loaded on construction.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None):
        self._lock = threading.Lock()
        self._facts: list[EditFact] = []
        self._path = os.fspath(path) if path is not None else None
        if self._path is not None and os.path.exists(self._path):
            for fact in load_facts(self._path):
                self._facts.append(fact)

    @property
    def path(self) -> str | None:
        return self._path

    def __len__(self) -> int:
        with self._lock:
            return len(self._facts)

    def append(
        self,
        subject: str,
        relation: str,
        new_object: str,
        old_object: str | None = None,
        surface_text: str | None = None,
    ) -> EditFact:
        """Append one edit, assign it the next seq, and persist it if file-backed.

        Identical payloads appended twice get distinct fact ids and consecutive
        seq values; nothing is ever overwritten.
        """
        with self._lock:
            seq = len(self._facts)
            if surface_text is None:
                surface_text = render_surface(subject, relation, new_object)
            digest = hashlib.blake2b(
                "\x1f".join([subject, relation, new_object]).encode("utf-8"),
                digest_size=4,
            ).hexdigest()
            fact = EditFact(
                fact_id=f"f{seq:06d}-{digest}",
                seq=seq,
                subject=subject,
                relation=relation,
                old_object=old_object,
                new_object=new_object,
                surface_text=surface_text,
            )
            if self._path is not None:
                self._persist_line(fact)
            self._facts.append(fact)
            return fact

    def _persist_line(self, fact: EditFact) -> None:
        line = json.dumps(fact.to_dict(), ensure_ascii=False)
        try:
            with open(self._path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")
                handle.flush()
                os.fsync(handle.fileno())
        except OSError as exc:
            raise StorageError(f"could not persist fact to {self._path}: {exc}") from exc

    def snapshot(self) -> FactSet:
        with self._lock:
            facts = tuple(self._facts)
        return FactSet(facts=facts, high_water_seq=len(facts) - 1)


def save_facts(facts: Iterable[EditFact] | FactSet, path: str | os.PathLike[str]) -> int:
    """Write facts as JSONL, replacing the file. Returns the number written."""
    if isinstance(facts, FactSet):
        facts = facts.facts
    count = 0
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for fact in facts:
                handle.write(json.dumps(fact.to_dict(), ensure_ascii=False) + "\n")
                count += 1
    except OSError as exc:
        raise StorageError(f"could not write {os.fspath(path)}: {exc}") from exc
    return count


def load_facts(path: str | os.PathLike[str]) -> FactSet:
    """Load a JSONL fact file. A malformed line raises ParseError naming it."""
    path = os.fspath(path)
    facts: list[EditFact] = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON: {exc.msg}", line=lineno, path=path) from exc
                try:
                    facts.append(EditFact.from_dict(record))
                except ValidationError as exc:
                    raise ParseError(str(exc), line=lineno, path=path) from exc
    except OSError as exc:
        raise StorageError(f"could not read {path}: {exc}") from exc
    seqs = [f.seq for f in facts]
    if sorted(seqs) != list(range(len(facts))):
        raise ParseError("seq values are not a dense 0..N-1 range", path=path)
    facts.sort(key=lambda f: f.seq)
    return FactSet(facts=tuple(facts), high_water_seq=len(facts) - 1)


def payload_from_dict(record: dict) -> dict:
    """Validate a raw edit payload (no fact_id/seq yet) from an import file."""
    if "subject" not in record or "new_object" not in record or "relation" not in record:
        raise ValidationError("edit payload needs subject, relation and new_object")
    return {
        "subject": record["subject"],
        "relation": record["relation"],
        "new_object": record["new_object"],
        "old_object": record.get("old_object"),
        "surface_text": record.get("surface_text"),
    }
