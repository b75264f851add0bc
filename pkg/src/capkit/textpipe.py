"""Caption text handling: normalization, tokens, vocabulary, id sequences.

Token id layout is fixed: pad=0, start=1, end=2, unk=3, then real words
densely from 4, ordered by descending frequency with ties broken
alphabetically. Construction is deterministic for a given corpus.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import EmptyCorpus, SpecialTokenCollision, ValidationError

log = logging.getLogger(__name__)

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = (PAD, START, END, UNK)

DEFAULT_MAX_LEN = 24
DEFAULT_MIN_FREQ = 1

_BAD_CHARS = re.compile(r"[^a-z0-9 ]")
_MANY_SPACES = re.compile(r" +")


def normalize(text: str) -> str:
    """Lowercase, strip punctuation to spaces, collapse runs, trim ends."""
    text = text.lower()
    text = _BAD_CHARS.sub(" ", text)
    return _MANY_SPACES.sub(" ", text).strip()


def tokenize(text: str) -> list[str]:
    """Split normalized text on spaces. Empty text gives an empty list."""
    return text.split()


def add_boundaries(tokens: list[str]) -> list[str]:
    """Wrap a token list in start/end markers."""
    for t in tokens:
        if t in SPECIALS:
            raise SpecialTokenCollision(f"token {t!r} collides with a special token")
    return [START, *tokens, END]


@dataclass
class Vocabulary:
    """Word <-> id mapping with the four fixed specials at ids 0..3."""

    word_to_id: dict[str, int]
    id_to_word: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    def lookup(self, token: str) -> int:
        return self.word_to_id.get(token, UNK_ID)

    def to_json(self) -> str:
        payload = {
            "specials": {PAD: PAD_ID, START: START_ID, END: END_ID, UNK: UNK_ID},
            "words": self.id_to_word[4:],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            payload = json.loads(text)
            words = list(payload["words"])
            specials = payload["specials"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"bad vocabulary JSON: {exc}") from exc
        expected = {PAD: PAD_ID, START: START_ID, END: END_ID, UNK: UNK_ID}
        if specials != expected:
            raise ValidationError(f"unexpected specials block: {specials}")
        return cls.from_words(words)

    @classmethod
    def from_words(cls, words: list[str]) -> "Vocabulary":
        id_to_word = list(SPECIALS) + list(words)
        word_to_id = {w: i for i, w in enumerate(id_to_word)}
        if len(word_to_id) != len(id_to_word):
            raise ValidationError("duplicate words in vocabulary")
        return cls(word_to_id=word_to_id, id_to_word=id_to_word)


@dataclass
class TokenSequence:
    """Fixed-length id sequence: content ids then trailing pad ids.

    length counts the non-pad prefix.
    """

    ids: list[int]
    length: int = field(default=-1)

    def __post_init__(self):
        if self.length < 0:
            self.length = len(self.ids)
        if self.length > len(self.ids):
            raise ValidationError(f"length {self.length} exceeds {len(self.ids)} ids")
        for i in self.ids[self.length:]:
            if i != PAD_ID:
                raise ValidationError("non-pad id after declared length")

    def content(self) -> list[int]:
        return self.ids[: self.length]


def build_vocab(corpus: list[list[str]], min_freq: int = DEFAULT_MIN_FREQ) -> Vocabulary:
    """Frequency-then-alphabetical vocabulary over plain token lists.

    Tokens must not include the special markers; those get fixed ids.
    """
    if not corpus:
        raise EmptyCorpus("no captions to build a vocabulary from")
    counts = Counter()
    for tokens in corpus:
        for t in tokens:
            if t in SPECIALS:
                raise SpecialTokenCollision(f"corpus token {t!r} is a special token")
            counts[t] += 1
    kept = [(w, c) for w, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda wc: (-wc[1], wc[0]))
    if not kept:
        log.warning("min_freq=%d filtered out every word; vocabulary has only specials", min_freq)
    return Vocabulary.from_words([w for w, _ in kept])


def encode(tokens: list[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Map boundary-wrapped tokens to padded ids of exactly max_len.

    Sequences that do not fit are truncated so the end id survives as the
    final content token. Unknown words map to the unk id.
    """
    if max_len < 2:
        raise ValidationError(f"max_len {max_len} cannot hold start and end markers")
    ids = [vocab.lookup(t) for t in tokens]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [END_ID]
    length = len(ids)
    ids = ids + [PAD_ID] * (max_len - length)
    return TokenSequence(ids=ids, length=length)


def decode(seq: TokenSequence | list[int], vocab: Vocabulary) -> str:
    """Ids back to text, dropping all special ids."""
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    words = [vocab.id_to_word[i] for i in ids if i >= 4]
    return " ".join(words)


# ---------------------------------------------------------------------------
# caption files: "<image_id>#<index>\t<caption text>" per line


def parse_caption_line(line: str, lineno: int) -> tuple[str, int, str]:
    if "\t" not in line:
        raise ValidationError(f"line {lineno}: missing tab separator")
    key, caption = line.split("\t", 1)
    if "#" not in key:
        raise ValidationError(f"line {lineno}: caption key {key!r} lacks '#<index>'")
    image_id, _, index = key.rpartition("#")
    if not image_id:
        raise ValidationError(f"line {lineno}: empty image id")
    try:
        idx = int(index)
    except ValueError:
        raise ValidationError(f"line {lineno}: caption index {index!r} is not an integer") from None
    return image_id, idx, caption.rstrip("\n")


def read_caption_file(text: str) -> dict[str, list[str]]:
    """Read raw caption text into image_id -> captions, keeping file order."""
    captions: dict[str, list[str]] = {}
    seen: set[tuple[str, int]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        image_id, idx, caption = parse_caption_line(line, lineno)
        if (image_id, idx) in seen:
            raise ValidationError(f"line {lineno}: duplicate caption key {image_id}#{idx}")
        seen.add((image_id, idx))
        captions.setdefault(image_id, []).append(caption)
    return captions
