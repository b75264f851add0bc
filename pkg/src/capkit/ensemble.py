"""Caption-level ensembling: several models vote, one caption survives.

Three modes:
  - bleu-vote: pick the member whose caption scores highest sentence BLEU-1
    against the image's references (needs references).
  - majority: treat each distinct caption string as a class and take the
    argmax of column sums over a binary vote matrix.
  - consensus: reference-free; pick the caption with the highest mean
    sentence BLEU-1 against the other members' captions.

All ties resolve toward earlier registration (or the smaller class index),
so results are deterministic for a fixed member order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyMatrix,
    MissingReferences,
    TooFewCandidates,
    UnknownMode,
    ValidationError,
)
from .metrics import bleu_n

MODES = ("bleu-vote", "majority", "consensus")


@dataclass
class CandidateEntry:
    model: str
    tokens: list[str]
    logprob: float = 0.0


@dataclass
class CandidateSet:
    """One image's candidate captions in fixed registration order."""

    image_id: str
    entries: list[CandidateEntry] = field(default_factory=list)

    def register(self, model: str, tokens: list[str], logprob: float = 0.0) -> None:
        self.entries.append(CandidateEntry(model=model, tokens=list(tokens), logprob=logprob))


@dataclass
class VoteMatrix:
    """Binary (members x classes) decision matrix; each row votes once."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d)
        if d.ndim != 2 or d.size == 0:
            raise EmptyMatrix(f"vote matrix must be 2-d and non-empty, got shape {d.shape}")
        if not np.isin(d, (0, 1)).all():
            raise ValidationError("vote matrix entries must be 0 or 1")
        if not (d.sum(axis=1) == 1).all():
            raise ValidationError("every vote matrix row must contain exactly one 1")
        self.d = d.astype(np.int64)


def majority_vote(matrix: VoteMatrix) -> int:
    """Class index with the largest column sum; ties pick the smallest index."""
    sums = matrix.d.sum(axis=0)
    return int(np.argmax(sums))


def _sentence_bleu1(candidate: list[str], references: list[list[str]]) -> float:
    if not candidate:
        return 0.0
    return bleu_n(candidate, references, 1)


def bleu_vote(candidates: CandidateSet, references: list[list[str]] | None) -> CandidateEntry:
    """Entry with the best sentence BLEU-1 against the references."""
    if not candidates.entries:
        raise TooFewCandidates(f"no candidates for {candidates.image_id!r}")
    if not references:
        raise MissingReferences(f"bleu-vote needs references for {candidates.image_id!r}")
    scores = [_sentence_bleu1(e.tokens, references) for e in candidates.entries]
    return candidates.entries[int(np.argmax(scores))]


def consensus_vote(candidates: CandidateSet) -> CandidateEntry:
    """Entry with the best mean sentence BLEU-1 against the other entries."""
    entries = candidates.entries
    if len(entries) < 2:
        raise TooFewCandidates(
            f"consensus needs at least 2 candidates for {candidates.image_id!r}")
    scores = []
    for i, entry in enumerate(entries):
        others = [e.tokens for j, e in enumerate(entries) if j != i and e.tokens]
        if not others:
            scores.append(0.0)
            continue
        scores.append(sum(_sentence_bleu1(entry.tokens, [o]) for o in others) / len(others))
    return entries[int(np.argmax(scores))]


def caption_vote_matrix(candidates: CandidateSet) -> tuple[VoteMatrix, list[tuple[str, ...]]]:
    """Vote matrix whose classes are distinct captions, first-seen order."""
    if not candidates.entries:
        raise EmptyMatrix(f"no candidates for {candidates.image_id!r}")
    classes: list[tuple[str, ...]] = []
    index: dict[tuple[str, ...], int] = {}
    for entry in candidates.entries:
        key = tuple(entry.tokens)
        if key not in index:
            index[key] = len(classes)
            classes.append(key)
    d = np.zeros((len(candidates.entries), len(classes)), dtype=np.int64)
    for row, entry in enumerate(candidates.entries):
        d[row, index[tuple(entry.tokens)]] = 1
    return VoteMatrix(d=d), classes


def majority_caption(candidates: CandidateSet) -> list[str]:
    matrix, classes = caption_vote_matrix(candidates)
    return list(classes[majority_vote(matrix)])


def run_ensemble(all_candidates: dict[str, CandidateSet],
                 references: dict[str, list[list[str]]] | None,
                 mode: str) -> dict[str, list[str]]:
    """Vote per image. Returns image_id -> winning caption tokens."""
    if mode not in MODES:
        raise UnknownMode(f"mode {mode!r} not in {MODES}")
    if mode == "bleu-vote" and references is None:
        raise MissingReferences("bleu-vote requires a reference set")
    winners: dict[str, list[str]] = {}
    for image_id, cands in all_candidates.items():
        if cands.image_id != image_id:
            raise ValidationError(f"candidate set keyed {image_id!r} holds {cands.image_id!r}")
        if mode == "bleu-vote":
            if image_id not in references:
                raise MissingReferences(f"no references for {image_id!r}")
            winners[image_id] = list(bleu_vote(cands, references[image_id]).tokens)
        elif mode == "majority":
            winners[image_id] = majority_caption(cands)
        else:
            winners[image_id] = list(consensus_vote(cands).tokens)
    return winners
