"""Greedy and beam-search caption decoding.

Works against anything exposing next_token_logits(ids, memory) -> 1-d array
of unnormalized logits, which keeps the searcher testable on toy models.

Beam step: expand every live hypothesis over the whole vocabulary, rank all
expansions by cumulative log-probability (ties: lexicographically smaller id
sequence), and keep the top k. Finished members of that top k retire to a
completed pool instead of occupying live slots, so with k=1 the searcher
follows exactly the greedy path. Final ranking divides by length**alpha
(length includes the start id; alpha=0 means raw log-probability).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .textpipe import END_ID, START_ID, TokenSequence

DEFAULT_BEAM_WIDTH = 10


@dataclass
class BeamHypothesis:
    ids: list[int]
    logprob: float
    finished: bool

    def __post_init__(self):
        if self.logprob > 1e-9:
            raise ValidationError(f"hypothesis logprob must be <= 0, got {self.logprob}")


@dataclass
class BeamConfig:
    k: int = DEFAULT_BEAM_WIDTH
    max_len: int = 24
    alpha: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"beam width must be >= 1, got {self.k}")
        if self.max_len < 2:
            raise ValidationError(f"max_len must be >= 2, got {self.max_len}")
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def greedy_decode(memory, model, max_len: int = 24) -> TokenSequence:
    """Iterated argmax from the start id until the end id or max_len."""
    ids = [START_ID]
    while len(ids) < max_len:
        logits = np.asarray(model.next_token_logits(ids, memory))
        token = int(np.argmax(logits))
        ids.append(token)
        if token == END_ID:
            break
    return TokenSequence(ids=ids)


def beam_search(memory, model, cfg: BeamConfig | None = None) -> list[BeamHypothesis]:
    """Width-k search. Returns up to k completed hypotheses, best first."""
    cfg = cfg or BeamConfig()
    live = [BeamHypothesis(ids=[START_ID], logprob=0.0, finished=False)]
    completed: list[BeamHypothesis] = []
    while live:
        candidates: list[tuple[float, list[int]]] = []
        for hyp in live:
            logprobs = _log_softmax(np.asarray(model.next_token_logits(hyp.ids, memory)))
            for token, lp in enumerate(logprobs):
                candidates.append((hyp.logprob + float(lp), hyp.ids + [token]))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, ids in candidates[: cfg.k]:
            done = ids[-1] == END_ID or len(ids) >= cfg.max_len
            hyp = BeamHypothesis(ids=ids, logprob=min(score, 0.0), finished=done)
            if done:
                completed.append(hyp)
            else:
                live.append(hyp)
    completed.sort(key=lambda h: (-_ranking_score(h, cfg.alpha), h.ids))
    return completed[: cfg.k]


def _ranking_score(hyp: BeamHypothesis, alpha: float) -> float:
    if alpha == 0.0:
        return hyp.logprob
    return hyp.logprob / (len(hyp.ids) ** alpha)
