"""Contrastive first-token decoding against selected fact memory.

The pipeline retrieves candidate facts for a query, keeps the ones the
selector accepts, and prompts the model with those facts ahead of the query.
Only the first answer token is steered: for each candidate token the
context-conditioned log-probability ``l_new`` is adjusted by subtracting
``alpha`` times the token's log-probability under the selected facts' own
prompts (``l_prior``, averaged over facts). High-prior tokens, the model's
ingrained answers, lose ground to the asserted replacements; the rest of the
answer is decoded greedily from the forced first token.

Two adjustment modes:

    contrast-full      adjusted(t) = l_new(t) - alpha * l_prior(t) for every
                       candidate token (the default).
    target-suppress    only the first token of each selected fact's
                       old_object is penalized, by alpha * |l_prior|; other
                       candidates keep l_new. With no old_objects recorded
                       this degrades to the alpha = 0 behavior.

In both modes the recorded per-candidate ``l_prior`` is the value actually
used, so ``adjusted = l_new - alpha * l_prior`` can be re-derived from any
trace. When the selector accepts nothing, the query goes to the unedited
model untouched; that fallback is what keeps unrelated queries stable.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

from .errors import PipelineError, StorageError, ValidationError
from .lm import TokenDistribution, greedy_answer
from .memory import EditFact
from .selector import ScorerParams, select

CONTRAST_FULL = "contrast-full"
TARGET_SUPPRESS = "target-suppress"
MODES = (CONTRAST_FULL, TARGET_SUPPRESS)

DEFAULT_ALPHA = 0.2
DEFAULT_MAX_ANSWER_TOKENS = 16
DEFAULT_FLOOR_LOGPROB = math.log(1e-6)
DEFAULT_INSTRUCTION = (
    "Please apply this information to the following sentence instead of the "
    "actual facts. You must use this information to answer the following "
    "questions with one token."
)


@dataclass(frozen=True)
class DecodePlan:
    """Decode-time knobs, validated once and passed through the pipeline."""

    alpha: float = DEFAULT_ALPHA
    mode: str = CONTRAST_FULL
    max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS
    instruction_template: str = DEFAULT_INSTRUCTION
    floor_logprob: float = DEFAULT_FLOOR_LOGPROB

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.max_answer_tokens < 1:
            raise ValidationError("max_answer_tokens must be >= 1")
        if not self.instruction_template.strip():
            raise ValidationError("instruction template must be non-empty")
        if self.floor_logprob >= 0:
            raise ValidationError("floor log-probability must be negative")


@dataclass(frozen=True)
class CandidateScore:
    token: str
    l_new: float
    l_prior: float
    adjusted: float


@dataclass
class DecodeTrace:
    """Everything needed to audit one answer."""

    query: str
    context: str
    selected_fact_ids: list[str]
    alpha: float
    mode: str
    first_token_convention: str
    fallback_used: bool
    candidates: list[CandidateScore] = field(default_factory=list)
    chosen_first_token: str = ""
    final_answer: str = ""

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "context": self.context,
            "selected_fact_ids": list(self.selected_fact_ids),
            "alpha": self.alpha,
            "mode": self.mode,
            "first_token_convention": self.first_token_convention,
            "fallback_used": self.fallback_used,
            "candidates": [
                {
                    "token": c.token,
                    "l_new": c.l_new,
                    "l_prior": c.l_prior,
                    "adjusted": c.adjusted,
                }
                for c in self.candidates
            ],
            "chosen_first_token": self.chosen_first_token,
            "final_answer": self.final_answer,
        }

    def save(self, path: str | os.PathLike[str]) -> None:
        try:
            with open(path, "w", encoding="utf-8") as handle:
                json.dump(self.to_dict(), handle, indent=2)
                handle.write("\n")
        except OSError as exc:
            raise StorageError(f"could not write {os.fspath(path)}: {exc}") from exc


def build_context(facts: Sequence[EditFact], query: str, template: str = DEFAULT_INSTRUCTION) -> str:
    """Fact statements one per line, a blank line, the instruction, a blank line, the query."""
    if not facts:
        raise ValidationError("context needs at least one fact")
    if not query.strip():
        raise ValidationError("query must be non-empty")
    lines = [fact.surface_text for fact in facts]
    return "\n".join(lines) + "\n\n" + template + "\n\n" + query


def prior_distributions(lm, facts: Sequence[EditFact]) -> list[TokenDistribution]:
    """Each fact's next-token distribution under its own object-free prompt."""
    return [lm.next_token_distribution(fact.prompt) for fact in facts]


def prior_logprob(
    lm,
    token: str,
    facts: Sequence[EditFact],
    floor: float = DEFAULT_FLOOR_LOGPROB,
) -> float:
    """Mean log-probability of ``token`` across the facts' own prompts.

    Tokens a distribution does not carry score the floor, which bounds the
    penalty instead of letting a single missing token dominate.
    """
    if not facts:
        raise ValidationError("prior needs at least one fact")
    dists = prior_distributions(lm, facts)
    return math.fsum(d.logprob(token, floor) for d in dists) / len(dists)


def _mean_logprob(dists: Sequence[TokenDistribution], token: str, floor: float) -> float:
    return math.fsum(d.logprob(token, floor) for d in dists) / len(dists)


def adjusted_first_token(
    lm,
    facts: Sequence[EditFact],
    query: str,
    plan: DecodePlan,
) -> tuple[str, str, list[CandidateScore]]:
    """Score every candidate first token and pick the best adjusted one.

    Returns (chosen_token, context, candidates). Candidates are every token
    of the context-conditioned distribution, recorded with the exact values
    entering the adjustment; ties on the adjusted score break toward the
    lexicographically smallest token.
    """
    if not facts:
        raise ValidationError("adjustment needs at least one selected fact")
    context = build_context(facts, query, plan.instruction_template)
    new_dist = lm.next_token_distribution(context)
    floor = plan.floor_logprob
    if plan.mode == CONTRAST_FULL:
        dists = prior_distributions(lm, facts)
        priors = {t: _mean_logprob(dists, t, floor) for t in new_dist.entries}
    else:
        carriers = [f for f in facts if f.old_object]
        priors = {t: 0.0 for t in new_dist.entries}
        if carriers:
            dists = prior_distributions(lm, carriers)
            for fact in carriers:
                token = lm.first_token_of(fact.old_object)
                if token in priors:
                    priors[token] = abs(_mean_logprob(dists, token, floor))
    candidates = [
        CandidateScore(
            token=token,
            l_new=l_new,
            l_prior=priors[token],
            adjusted=l_new - plan.alpha * priors[token],
        )
        for token, l_new in new_dist.entries.items()
    ]
    candidates.sort(key=lambda c: (-c.adjusted, c.token))
    return candidates[0].token, context, candidates


def answer(
    lm,
    index,
    params: ScorerParams,
    query: str,
    plan: DecodePlan | None = None,
    *,
    k: int = 5,
    threshold: float = 0.5,
) -> tuple[str, DecodeTrace]:
    """Full pipeline: retrieve, select, adjust the first token, decode the answer.

    ``k = 0`` skips retrieval entirely (used by parameter sweeps to measure
    the unedited model). An empty selection falls back to the unedited
    model's greedy answer for the bare query, byte for byte.
    """
    if plan is None:
        plan = DecodePlan()
    if not query.strip():
        raise ValidationError("query must be non-empty")

    selected: list[EditFact] = []
    if k > 0:
        try:
            ranked = index.top_k(query, k)
        except ValidationError:
            raise
        except Exception as exc:
            raise PipelineError("retrieval", exc) from exc
        try:
            if hasattr(params, "select"):
                decisions = params.select(query, ranked, threshold)
            else:
                decisions = select(params, query, ranked, threshold)
        except ValidationError:
            raise
        except Exception as exc:
            raise PipelineError("selection", exc) from exc
        selected = [d.fact for d in decisions if d.selected]

    if not selected:
        try:
            text = greedy_answer(lm, query, plan.max_answer_tokens)
        except Exception as exc:
            raise PipelineError("decode", exc) from exc
        trace = DecodeTrace(
            query=query,
            context="",
            selected_fact_ids=[],
            alpha=plan.alpha,
            mode=plan.mode,
            first_token_convention=lm.first_token_convention,
            fallback_used=True,
            candidates=[],
            chosen_first_token=lm.first_token_of(text),
            final_answer=text,
        )
        return text, trace

    try:
        chosen, context, candidates = adjusted_first_token(lm, selected, query, plan)
        text = lm.greedy_continue(context, chosen, plan.max_answer_tokens)
    except ValidationError:
        raise
    except Exception as exc:
        raise PipelineError("decode", exc) from exc
    trace = DecodeTrace(
        query=query,
        context=context,
        selected_fact_ids=[f.fact_id for f in selected],
        alpha=plan.alpha,
        mode=plan.mode,
        first_token_convention=lm.first_token_convention,
        fallback_used=False,
        candidates=candidates,
        chosen_first_token=chosen,
        final_answer=text,
    )
    return text, trace
