"""Samples, chat templates, the word-level tokenizer, JSONL I/O and the synthetic corpus."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore
from ._fileio import atomic_write_text
from .errors import ConfigError, DataError, SchemaError

TURN_MARKERS = "turn_markers"
INST_MARKERS = "inst_markers"
STYLES = (TURN_MARKERS, INST_MARKERS)

PAD, UNK = "<pad>", "<unk>"
MARKERS = ("<start_of_turn>", "<end_of_turn>", "[INST]", "[/INST]", "</s>")
RESERVED = (PAD, UNK) + MARKERS

_TOKEN_RE = re.compile("|".join(re.escape(m) for m in MARKERS) + r"|\w+|[^\w\s]")


@dataclass(frozen=True)
class Sample:
    instruction: str
    response: str
    meta: dict | None = None

    def __post_init__(self):
        if not isinstance(self.instruction, str) or not self.instruction:
            raise SchemaError("instruction must be a nonempty string")
        if not isinstance(self.response, str) or not self.response:
            raise SchemaError("response must be a nonempty string")

    def to_dict(self) -> dict:
        d = {"instruction": self.instruction, "response": self.response}
        if self.meta is not None:
            d["meta"] = self.meta
        return d


@dataclass(frozen=True)
class TokenizedSample:
    token_ids: np.ndarray
    loss_mask: np.ndarray
    source_index: int
    # [start, end) of the instruction tokens inside token_ids
    query_span: tuple[int, int] = field(default=(0, 0))

    def __len__(self) -> int:
        return int(self.token_ids.size)

    @property
    def query_ids(self) -> np.ndarray:
        return self.token_ids[self.query_span[0]:self.query_span[1]]


# -- templates ---------------------------------------------------------------

def _template_parts(instruction: str, response: str, style: str) -> tuple[str, str, str, str]:
    """Split a rendering into (prefix, instruction, prompt suffix, response part)."""
    if style == TURN_MARKERS:
        return ("<start_of_turn>user\n", instruction,
                "<end_of_turn>\n<start_of_turn>model\n", response + "<end_of_turn>")
    if style == INST_MARKERS:
        return "[INST]", instruction, "[/INST]", response + "</s>"
    raise ConfigError(f"unknown template style {style!r}; expected one of {STYLES}")


def render_template(sample: Sample, style: str = TURN_MARKERS) -> str:
    return "".join(_template_parts(sample.instruction, sample.response, style))


# -- tokenizer ---------------------------------------------------------------

def segment(text: str) -> list[str]:
    """Words, single punctuation marks, and template markers as atomic units."""
    return _TOKEN_RE.findall(text)


class Vocab:
    """Token <-> id bijection; reserved tokens always occupy the first ids."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise DataError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab contains duplicate tokens")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts) -> "Vocab":
        words = set()
        for text in texts:
            words.update(segment(text))
        words.difference_update(RESERVED)
        return cls(list(RESERVED) + sorted(words))

    @classmethod
    def from_samples(cls, samples) -> "Vocab":
        return cls.build(t for s in samples for t in (s.instruction, s.response))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    def save(self, path) -> None:
        atomic_write_text(path, "".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(text: str, vocab: Vocab) -> list[int]:
    unk = vocab.unk_id
    return [vocab.ids.get(t, unk) for t in segment(text)]


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


def tokenize_sample(sample: Sample, vocab: Vocab, style: str = TURN_MARKERS,
                    max_seq_len: int | None = None, source_index: int = 0) -> TokenizedSample:
    """Token ids plus a loss mask that is true exactly on the response part.

    Sequences longer than ``max_seq_len`` are cut from the right; the sample is
    rejected if no response token is left to predict.
    """
    prefix, instr, suffix, resp = _template_parts(sample.instruction, sample.response, style)
    pre_ids = tokenize(prefix, vocab)
    q_ids = tokenize(instr, vocab)
    prompt = pre_ids + q_ids + tokenize(suffix, vocab)
    answer = tokenize(resp, vocab)
    ids = np.array(prompt + answer, dtype=np.int64)
    mask = np.zeros(ids.size, dtype=bool)
    mask[len(prompt):] = True
    if max_seq_len is not None and ids.size > max_seq_len:
        ids, mask = ids[:max_seq_len], mask[:max_seq_len]
    if not mask[1:].any():
        raise DataError(f"sample {source_index}: no response token survives truncation")
    start = min(len(pre_ids), ids.size)
    span = (start, min(start + len(q_ids), ids.size))
    return TokenizedSample(ids, mask, source_index, span)


def tokenize_dataset(samples, vocab: Vocab, style: str = TURN_MARKERS,
                     max_seq_len: int | None = None) -> list[TokenizedSample]:
    return [tokenize_sample(s, vocab, style, max_seq_len, i) for i, s in enumerate(samples)]


# -- JSONL -------------------------------------------------------------------

def _sample_from_obj(obj, lineno: int) -> Sample:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    for key in ("instruction", "response"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: missing field {key!r}")
    meta = obj.get("meta")
    if meta is not None and not isinstance(meta, dict):
        raise SchemaError(f"line {lineno}: meta must be an object")
    try:
        return Sample(obj["instruction"], obj["response"], meta)
    except SchemaError as e:
        raise SchemaError(f"line {lineno}: {e}") from None


def load_jsonl(path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from None
            samples.append(_sample_from_obj(obj, lineno))
    return samples


def dumps_jsonl(samples) -> str:
    return "".join(json.dumps(s.to_dict(), ensure_ascii=False) + "\n" for s in samples)


def save_jsonl(samples, path) -> None:
    atomic_write_text(path, dumps_jsonl(samples))


# -- synthetic corpus --------------------------------------------------------

_NAMES = ("Tom", "Ann", "Sam", "Lily", "Ben", "Mia", "Jack", "Emma")
_ITEMS = ("apples", "books", "pens", "cookies", "toys", "cards", "stamps", "shells")
_SYLLABLES = ("ka", "zor", "vex", "lum", "qui", "dra", "pho", "nix", "tal", "gry",
              "oth", "mek", "sul", "bra", "yen", "fid", "wob", "ulk", "zan", "rho")
RARE_POOL_SIZE = 400


def rare_word_pool(size: int = RARE_POOL_SIZE) -> list[str]:
    """Fixed pool of pseudo-words, independent of any corpus seed."""
    rng = numcore.make_rng(20240601)
    pool, seen = [], set()
    while len(pool) < size:
        n = int(rng.integers(2, 4))
        word = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n))
        if word not in seen:
            seen.add(word)
            pool.append(word)
    return pool


def _clean_problem(rng) -> tuple[str, str]:
    name = _NAMES[int(rng.integers(len(_NAMES)))]
    item = _ITEMS[int(rng.integers(len(_ITEMS)))]
    a, b = (int(x) for x in rng.integers(2, 20, size=2))
    c = int(rng.integers(1, a + b))
    total, left = a + b, a + b - c
    if rng.integers(2) == 0:
        q = (f"{name} has {a} {item}. {name} buys {b} more {item} and then gives {c} {item} "
             f"to a friend. How many {item} does {name} have now?")
        r = (f"{name} starts with {a} {item}. After buying {b} more {item}, {name} has "
             f"{a} + {b} = {total} {item}. After giving away {c} {item}, {name} has "
             f"{total} - {c} = {left} {item}. The answer is: {left}")
    else:
        q = (f"There are {a} {item} in a box and {b} {item} on the table. {name} takes {c} "
             f"{item} away. How many {item} are left?")
        r = (f"There are {a} + {b} = {total} {item} in total. {name} takes {c} {item} away, "
             f"so there are {total} - {c} = {left} {item} left. The answer is: {left}")
    return q, r


def _dirty_problem(rng, pool) -> tuple[str, str]:
    q_words = [pool[int(i)] for i in rng.choice(len(pool), size=int(rng.integers(3, 6)), replace=False)]
    r_words = [pool[int(i)] for i in rng.choice(len(pool), size=int(rng.integers(3, 6)), replace=False)]
    return " ".join(q_words) + "?", " ".join(r_words)


def synth_corpus(n_clean: int, n_dirty: int, seed: int) -> list[Sample]:
    """Labelled clean/dirty instruction data with exactly the requested counts.

    Clean samples are long multi-step arithmetic word problems over a small,
    repetitive vocabulary with consistent answers. Dirty samples are short
    strings of rare pseudo-words with garbled responses.
    """
    if n_clean < 0 or n_dirty < 0:
        raise ConfigError("sample counts must be >= 0")
    rng = numcore.make_rng(seed)
    pool = rare_word_pool()
    labels = np.array(["clean"] * n_clean + ["dirty"] * n_dirty)
    labels = labels[rng.permutation(labels.size)]
    out = []
    for label in labels:
        q, r = _clean_problem(rng) if label == "clean" else _dirty_problem(rng, pool)
        out.append(Sample(q, r, {"label": str(label)}))
    return out


def labels_of(samples) -> np.ndarray:
    """Boolean array, true where ``meta.label == 'dirty'``."""
    return np.array([(s.meta or {}).get("label") == "dirty" for s in samples], dtype=bool)
