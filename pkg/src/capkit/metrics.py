"""Caption quality metrics over whitespace tokens.

All metrics work on plain token lists; specials never reach this module.
Sentence BLEU is unsmoothed (any zero n-gram precision zeroes the score).
Corpus BLEU pools clipped counts and lengths across images rather than
averaging sentence scores. Graph overlap (tuple F1) stands in for full
scene-graph parsing; graphs arrive pre-extracted.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

from .errors import MismatchedIds, ValidationError

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2
METEOR_GAMMA = 0.5
CIDER_MAX_N = 4

METRIC_ORDER = ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "meteor", "cider", "spice_f1")


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len: int, references: list[list[str]]) -> int:
    """Reference length nearest to the candidate, shorter wins ties."""
    return min((len(r) for r in references), key=lambda rl: (abs(rl - cand_len), rl))


def _clipped_matches(candidate: list[str], references: list[list[str]], n: int) -> tuple[int, int]:
    cand_counts = _ngram_counts(candidate, n)
    total = sum(cand_counts.values())
    if total == 0:
        return 0, 0
    max_ref = Counter()
    for ref in references:
        for gram, count in _ngram_counts(ref, n).items():
            if count > max_ref[gram]:
                max_ref[gram] = count
    clipped = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
    return clipped, total


def bleu_n(candidate: list[str], references: list[list[str]], n_max: int) -> float:
    """Sentence BLEU-n_max: clipped precision geometric mean times BP."""
    if n_max < 1:
        raise ValidationError(f"n_max must be >= 1, got {n_max}")
    if not references or any(not r for r in references):
        raise ValidationError("bleu_n needs at least one non-empty reference")
    if not candidate:
        log.warning("empty candidate scored as 0")
        return 0.0
    log_precisions = []
    for n in range(1, n_max + 1):
        clipped, total = _clipped_matches(candidate, references, n)
        if clipped == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    c = len(candidate)
    r = _closest_ref_length(c, references)
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * math.exp(sum(log_precisions) / n_max)


def corpus_bleu(candidates: dict[str, list[str]], references: dict[str, list[list[str]]],
                n_max: int) -> float:
    """Pooled BLEU: clipped counts and lengths summed over the corpus."""
    _require_same_ids(candidates, references)
    clipped_total = [0] * n_max
    count_total = [0] * n_max
    c_len = 0
    r_len = 0
    for image_id, cand in candidates.items():
        refs = references[image_id]
        if not refs or any(not r for r in refs):
            raise ValidationError(f"image {image_id!r} has an empty reference")
        if not cand:
            log.warning("empty candidate for %r pooled as 0 matches", image_id)
            continue
        for n in range(1, n_max + 1):
            clipped, total = _clipped_matches(cand, refs, n)
            clipped_total[n - 1] += clipped
            count_total[n - 1] += total
        c_len += len(cand)
        r_len += _closest_ref_length(len(cand), refs)
    if c_len == 0 or any(c == 0 for c in clipped_total) or any(t == 0 for t in count_total):
        return 0.0
    log_p = [math.log(clipped_total[i] / count_total[i]) for i in range(n_max)]
    bp = min(1.0, math.exp(1.0 - r_len / c_len))
    return bp * math.exp(sum(log_p) / n_max)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], references: list[list[str]],
            beta: float = ROUGE_BETA) -> float:
    """Best LCS F-score over references: F = (1+b^2)RP / (R + b^2 P)."""
    if not references or any(not r for r in references):
        raise ValidationError("rouge_l needs at least one non-empty reference")
    if not candidate:
        log.warning("empty candidate scored as 0")
        return 0.0
    best = 0.0
    b2 = beta * beta
    for ref in references:
        ell = _lcs_length(candidate, ref)
        if ell == 0:
            continue
        recall = ell / len(ref)
        precision = ell / len(candidate)
        score = ((1 + b2) * recall * precision) / (recall + b2 * precision)
        best = max(best, score)
    return best


# ---------------------------------------------------------------------------
# METEOR, exact-match variant


def _alignment(candidate: list[str], reference: list[str]) -> tuple[int, int]:
    """(matches, chunks) of the best unigram alignment.

    Matches are maximized first (that count is fixed by per-word minima),
    then the number of chunks is minimized by exhaustive search with
    branch-and-bound pruning. Adjacent-in-both matched pairs share a chunk.
    """
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    quota = {w: min(cand_counts[w], ref_counts[w])
             for w in cand_counts if w in ref_counts}
    m = sum(quota.values())
    if m == 0:
        return 0, 0

    ref_positions: dict[str, list[int]] = defaultdict(list)
    for j, w in enumerate(reference):
        ref_positions[w].append(j)

    # suffix occurrence counts let the search know when skipping is legal
    n = len(candidate)
    suffix: list[Counter] = [Counter() for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1].copy()
        suffix[i][candidate[i]] += 1

    used: set[int] = set()
    remaining = dict(quota)
    best = m + 1  # a chunk per match is always achievable

    def dfs(i: int, chunks: int, last_ci: int, last_ri: int) -> None:
        nonlocal best
        if chunks >= best:
            return
        if i == n:
            best = chunks
            return
        w = candidate[i]
        need = remaining.get(w, 0)
        if need > 0:
            # prefer the chunk-extending reference slot, then the rest
            slots = [r for r in ref_positions[w] if r not in used]
            extending = last_ci == i - 1
            slots.sort(key=lambda r: (not (extending and r == last_ri + 1), r))
            for r in slots:
                new_chunks = chunks if (extending and r == last_ri + 1) else chunks + 1
                used.add(r)
                remaining[w] = need - 1
                dfs(i + 1, new_chunks, i, r)
                remaining[w] = need
                used.discard(r)
        if need <= suffix[i + 1].get(w, 0):
            # this occurrence is skippable without losing a match
            dfs(i + 1, chunks, last_ci, last_ri)

    dfs(0, 0, -2, -2)
    return m, best


def meteor_exact(candidate: list[str], references: list[list[str]],
                 gamma: float = METEOR_GAMMA) -> float:
    """Harmonic mean weighted toward recall, with a fragmentation penalty.

    F = 10 P R / (R + 9 P), penalty = gamma * (chunks / matches)^3, best
    score over references.
    """
    if not references or any(not r for r in references):
        raise ValidationError("meteor_exact needs at least one non-empty reference")
    if not candidate:
        log.warning("empty candidate scored as 0")
        return 0.0
    best = 0.0
    for ref in references:
        m, chunks = _alignment(candidate, ref)
        if m == 0:
            continue
        precision = m / len(candidate)
        recall = m / len(ref)
        f_mean = 10 * precision * recall / (recall + 9 * precision)
        penalty = gamma * (chunks / m) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# CIDEr (plain variant, no length penalty)


def _require_same_ids(candidates: dict, references: dict) -> None:
    if set(candidates) != set(references):
        only_c = sorted(set(candidates) - set(references))[:5]
        only_r = sorted(set(references) - set(candidates))[:5]
        raise MismatchedIds(
            f"candidate/reference ids differ (candidate-only {only_c}, reference-only {only_r})")


def cider(candidates: dict[str, list[str]], references: dict[str, list[list[str]]],
          ) -> tuple[dict[str, float], float]:
    """tf-idf n-gram cosine, averaged over references and n=1..4, times 10.

    idf uses the count of images whose reference set contains the n-gram,
    clamped to 1 for n-grams unseen in any reference. A single-image corpus
    has idf 0 everywhere and scores 0 by construction.
    """
    _require_same_ids(candidates, references)
    if not candidates:
        raise ValidationError("cider needs at least one image")
    num_images = len(references)

    doc_freq: list[Counter] = [Counter() for _ in range(CIDER_MAX_N)]
    for refs in references.values():
        seen: list[set] = [set() for _ in range(CIDER_MAX_N)]
        for ref in refs:
            for n in range(1, CIDER_MAX_N + 1):
                seen[n - 1].update(_ngram_counts(ref, n))
        for n in range(CIDER_MAX_N):
            for gram in seen[n]:
                doc_freq[n][gram] += 1

    def tfidf(tokens: list[str], n: int) -> dict:
        counts = _ngram_counts(tokens, n)
        return {g: c * math.log(num_images / max(1, doc_freq[n - 1][g]))
                for g, c in counts.items()}

    def cosine(a: dict, b: dict) -> float:
        na = math.sqrt(sum(x * x for x in a.values()))
        nb = math.sqrt(sum(x * x for x in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        dot = sum(x * b[g] for g, x in a.items() if g in b)
        return dot / (na * nb)

    per_image: dict[str, float] = {}
    for image_id, cand in candidates.items():
        refs = references[image_id]
        if not refs:
            raise ValidationError(f"image {image_id!r} has no references")
        score_n = []
        for n in range(1, CIDER_MAX_N + 1):
            cand_vec = tfidf(cand, n)
            sims = [cosine(cand_vec, tfidf(ref, n)) for ref in refs]
            score_n.append(10.0 * sum(sims) / len(sims))
        per_image[image_id] = sum(score_n) / CIDER_MAX_N
    corpus = sum(per_image.values()) / len(per_image)
    return per_image, corpus


# ---------------------------------------------------------------------------
# scene-graph tuple overlap


@dataclass(frozen=True)
class SceneGraph:
    """Set of (object,), (object, attribute) or (subject, relation, object)."""

    tuples: frozenset[tuple[str, ...]]

    @classmethod
    def from_lists(cls, items: list[list[str]]) -> "SceneGraph":
        tuples = set()
        for item in items:
            if not 1 <= len(item) <= 3:
                raise ValidationError(f"graph tuple arity must be 1..3, got {item!r}")
            if not all(isinstance(part, str) and part for part in item):
                raise ValidationError(f"graph tuple parts must be non-empty strings: {item!r}")
            tuples.add(tuple(part.lower() for part in item))
        return cls(tuples=frozenset(tuples))


def tuple_f1(candidate: SceneGraph, reference: SceneGraph) -> float:
    """Plain F1 over exact tuple matches."""
    if not candidate.tuples or not reference.tuples:
        log.warning("empty scene graph scored as 0")
        return 0.0
    overlap = len(candidate.tuples & reference.tuples)
    if overlap == 0:
        return 0.0
    precision = overlap / len(candidate.tuples)
    recall = overlap / len(reference.tuples)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# corpus evaluation and the report


@dataclass
class MetricReport:
    corpus: dict[str, float]
    per_sentence: dict[str, dict[str, float]]

    def to_json(self, timestamp: str | None = None) -> str:
        """Fixed 6-decimal rendering so identical runs are byte-identical."""

        def fmt_block(scores: dict[str, float], pad: str) -> list[str]:
            keys = [k for k in METRIC_ORDER if k in scores]
            return [f'{pad}"{k}": {scores[k]:.6f}' + ("," if i < len(keys) - 1 else "")
                    for i, k in enumerate(keys)]

        lines = ["{"]
        lines.append('  "corpus": {')
        lines.extend(fmt_block(self.corpus, "    "))
        lines.append("  },")
        if timestamp is not None:
            lines.append(f'  "generated_at": "{timestamp}",')
        lines.append('  "per_sentence": {')
        ids = sorted(self.per_sentence)
        for i, image_id in enumerate(ids):
            lines.append(f'    "{image_id}": {{')
            lines.extend(fmt_block(self.per_sentence[image_id], "      "))
            lines.append("    }" + ("," if i < len(ids) - 1 else ""))
        lines.append("  }")
        lines.append("}")
        return "\n".join(lines) + "\n"


def evaluate_corpus(candidates: dict[str, list[str]],
                    references: dict[str, list[list[str]]],
                    graph_pairs: dict[str, tuple[SceneGraph, SceneGraph]] | None = None,
                    ) -> MetricReport:
    """Sentence scores per image plus pooled/averaged corpus scores."""
    _require_same_ids(candidates, references)
    if not candidates:
        raise ValidationError("nothing to evaluate")
    if graph_pairs is not None:
        _require_same_ids(graph_pairs, references)

    cider_per_image, cider_corpus = cider(candidates, references)
    per_sentence: dict[str, dict[str, float]] = {}
    for image_id, cand in candidates.items():
        refs = references[image_id]
        row = {f"bleu{n}": bleu_n(cand, refs, n) for n in range(1, 5)}
        row["rougeL"] = rouge_l(cand, refs)
        row["meteor"] = meteor_exact(cand, refs)
        row["cider"] = cider_per_image[image_id]
        if graph_pairs is not None:
            cand_graph, ref_graph = graph_pairs[image_id]
            row["spice_f1"] = tuple_f1(cand_graph, ref_graph)
        per_sentence[image_id] = row

    n_images = len(per_sentence)
    corpus = {f"bleu{n}": corpus_bleu(candidates, references, n) for n in range(1, 5)}
    corpus["rougeL"] = sum(r["rougeL"] for r in per_sentence.values()) / n_images
    corpus["meteor"] = sum(r["meteor"] for r in per_sentence.values()) / n_images
    corpus["cider"] = cider_corpus
    if graph_pairs is not None:
        corpus["spice_f1"] = sum(r["spice_f1"] for r in per_sentence.values()) / n_images
    return MetricReport(corpus=corpus, per_sentence=per_sentence)


# ---------------------------------------------------------------------------
# file formats


def read_candidate_file(text: str) -> dict[str, str]:
    """Lines of "<image_id>\\t<caption>" into an ordered id -> caption map."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValidationError(f"line {lineno}: missing tab separator")
        image_id, caption = line.split("\t", 1)
        if not image_id:
            raise ValidationError(f"line {lineno}: empty image id")
        if image_id in out:
            raise ValidationError(f"line {lineno}: duplicate candidate for {image_id!r}")
        out[image_id] = caption.rstrip("\n")
    return out


def dump_candidate_file(captions: dict[str, str]) -> str:
    return "".join(f"{image_id}\t{caption}\n" for image_id, caption in sorted(captions.items()))
