"""Caption vocabulary, tokenizer and the rule-based paraphrase expander.

The three presentation types each have one canonical caption. Paraphrases
come from a small grammar: verb synonyms, preposition synonyms, item-order
swaps and clause reordering. Expansion is seeded and therefore reproducible.
A file of externally written paraphrases (one per line) can be loaded in
place of the expander.
"""

from __future__ import annotations

import itertools
import string
from pathlib import Path
from typing import Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<bos>", "<eos>"]
WORDS = [
    "place", "put", "arrange", "set", "lay",
    "on", "atop", "over", "onto", "top", "of", "under",
    "rice", "fried", "chicken", "saltgrilled", "salmon", "tamagoyaki", "croquette", "shrimp",
    "and", "is", "sits", "rests", "first", "then", "it",
    "a", "the", "bento", "box", "lunch", "with",
]  # fmt: skip
VOCAB = SPECIALS + WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

BASE_CAPTIONS = {
    1: "Place fried chicken on rice",
    2: "Place salt-grilled salmon and tamagoyaki on rice",
    3: "Place croquette and fried shrimp on rice, fried shrimp is on croquette",
}

# words that identify each presentation type
TYPE_MARKERS = {1: {"chicken"}, 2: {"salmon", "tamagoyaki"}, 3: {"croquette", "shrimp"}}

VERBS = ["place", "put", "arrange", "set", "lay"]
PREPS = ["on", "atop", "over", "onto", "on top of"]
REST_VERBS = ["is on", "is atop", "sits on", "rests on", "is on top of"]

_STRIP = str.maketrans("", "", string.punctuation)


class CaptionError(ValueError):
    pass


def normalize(caption: str) -> list[str]:
    return caption.lower().translate(_STRIP).split()


def tokenize(caption: str) -> list[int]:
    return [TOKEN_ID.get(w, UNK) for w in normalize(caption)]


def detokenize(ids: Sequence[int]) -> str:
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(VOCAB[i] if 0 <= i < len(VOCAB) else "<unk>")
    return " ".join(words)


def caption_type(caption: str | Sequence[int]) -> int | None:
    """Presentation type named by a caption, or None if absent/ambiguous."""
    words = set(normalize(caption)) if isinstance(caption, str) else {VOCAB[i] for i in caption if 0 <= i < len(VOCAB)}
    hits = [t for t, marks in TYPE_MARKERS.items() if words & marks]
    return hits[0] if len(hits) == 1 else None


def category_tokens(type_id: int) -> set[str]:
    return {
        1: {"fried", "chicken", "rice"},
        2: {"saltgrilled", "salmon", "tamagoyaki", "rice"},
        3: {"croquette", "fried", "shrimp", "rice"},
    }[type_id]


def _cap(s: str) -> str:
    return s[0].upper() + s[1:]


def _candidates(type_id: int) -> list[str]:
    """Every sentence the grammar can produce for a type, in a fixed order."""
    if type_id == 1:
        item_lists = ["fried chicken"]
    elif type_id == 2:
        item_lists = ["salt-grilled salmon and tamagoyaki", "tamagoyaki and salt-grilled salmon"]
    else:
        item_lists = ["croquette and fried shrimp", "fried shrimp and croquette"]
    main = []
    for verb, prep, items in itertools.product(VERBS, PREPS, item_lists):
        main.append(f"{verb} {items} {prep} rice")
        main.append(f"{prep} rice, {verb} {items}")
        main.append(f"{verb} rice first, then {verb} {items} {prep} it")
    if type_id != 3:
        return [_cap(s) for s in main]
    out = []
    for clause, rest in itertools.product(main, REST_VERBS):
        out.append(f"{clause}, fried shrimp {rest} croquette")
    return [_cap(s) for s in out]


def parse_type(base_caption: str) -> int:
    t = caption_type(base_caption)
    if t is None or not category_tokens(t) <= set(normalize(base_caption)):
        raise CaptionError(f"caption does not match any presentation grammar: {base_caption!r}")
    return t


def expand_captions(base_caption: str, n: int, seed: int) -> list[str]:
    """``n`` distinct paraphrases of ``base_caption``.

    Draws ``n`` sentences at random, drops duplicates and the base caption
    itself, then keeps drawing until ``n`` distinct ones remain.
    """
    type_id = parse_type(base_caption)
    if n <= 0:
        return []
    pool = _candidates(type_id)
    base_norm = " ".join(normalize(base_caption))
    usable = {" ".join(normalize(s)) for s in pool} - {base_norm}
    if n > len(usable):
        raise CaptionError(f"only {len(usable)} distinct paraphrases exist for type {type_id}, asked for {n}")
    rng = np.random.default_rng(seed)
    seen = {base_norm}
    out: list[str] = []
    while len(out) < n:
        for idx in rng.integers(0, len(pool), size=n - len(out)):
            sentence = pool[int(idx)]
            key = " ".join(normalize(sentence))
            if key not in seen:
                seen.add(key)
                out.append(sentence)
    return out


def select_captions(pool: Sequence[str], k: int, seed: int) -> list[str]:
    """Seeded sample of ``k`` captions without replacement."""
    if k > len(pool):
        raise CaptionError(f"cannot select {k} captions from a pool of {len(pool)}")
    idx = np.random.default_rng(seed).permutation(len(pool))[:k]
    return [pool[int(i)] for i in idx]


def load_paraphrases(path: str | Path) -> list[str]:
    """Externally produced paraphrases, one per line, blank lines ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]
