"""Vocabulary, corpus ingestion, synthetic tasks, batching and masking."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Token/id bijection with fixed reserved ids 0..3; unknowns map to UNK."""

    def __init__(self, tokens):
        self._tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens) -> list:
        return [self.id(t) for t in tokens]

    def decode(self, ids, strip_special: bool = True) -> list:
        toks = [self._tokens[i] for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in RESERVED]
        return toks

    def tokens(self) -> list:
        """Full token list in id order (reserved entries first)."""
        return list(self._tokens)

    @classmethod
    def from_tokens(cls, tokens) -> "Vocab":
        """Rebuild from a saved full token list (including reserved entries)."""
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("token list does not start with the reserved entries")
        return cls(tokens[4:])


def build_vocab(sentences, max_size: int | None = None) -> Vocab:
    """Frequency-ranked vocabulary, ties broken lexicographically."""
    counts: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(RESERVED))]
    return Vocab(ranked)


def load_parallel(src_path, tgt_path=None):
    """Read a parallel corpus: two aligned files, or one tab-separated file."""
    src_path = Path(src_path)
    if tgt_path is None:
        pairs = []
        for i, line in enumerate(src_path.read_text(encoding="utf-8").splitlines()):
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{src_path}:{i + 1}: expected 2 tab-separated fields")
            pairs.append((parts[0].split(), parts[1].split()))
        return pairs
    src_lines = src_path.read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"corpus files differ in length: {len(src_lines)} vs {len(tgt_lines)}"
        )
    return [(s.split(), t.split()) for s, t in zip(src_lines, tgt_lines)]


@dataclass
class SyntheticCorpus:
    """Generated parallel data plus the ground truth needed for evaluation."""

    pairs: list
    task: str
    lexicon: dict | None = None  # lexicon task: source token -> target token
    filler_tokens: frozenset = frozenset()

    def source_coverage(self, src_tokens, sentence_tokens) -> set:
        """Source tokens of ``src_tokens`` covered by a target-side sentence.

        Uses the exact generator alignment: a source token is covered when
        its known translation appears in the sentence.  Filler tokens have
        no translation and are never covered.
        """
        present = set(sentence_tokens)
        covered = set()
        for tok in src_tokens:
            if tok in self.filler_tokens:
                continue
            translated = self.lexicon[tok] if self.lexicon else tok
            if translated in present:
                covered.add(tok)
        return covered


def _swap_adjacent(tokens):
    out = list(tokens)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def gen_synthetic(
    task: str,
    vocab_size: int,
    len_range: tuple,
    count: int,
    seed: int,
    filler_rate: float = 0.0,
) -> SyntheticCorpus:
    """Generate a parallel corpus for one of the toy tasks.

    copy     target repeats the source
    reverse  target is the source reversed
    lexicon  tokens pass through a fixed random bijection, then adjacent
             pairs are swapped (non-monotonic alignments); with
             ``filler_rate`` > 0, that fraction of source positions hold
             untranslatable filler tokens that produce no target token.

    Everything is a pure function of ``seed``.
    """
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {len_range}")
    rng = np.random.default_rng(seed)
    content = [str(i) for i in range(vocab_size)]
    lexicon = None
    fillers: tuple = ()
    if task == "lexicon":
        shuffled = list(content)
        rng.shuffle(shuffled)
        lexicon = {c: f"t{m}" for c, m in zip(content, shuffled)}
        n_fillers = max(1, vocab_size // 5) if filler_rate > 0 else 0
        fillers = tuple(f"f{i}" for i in range(n_fillers))
    elif task not in ("copy", "reverse"):
        raise ValueError(f"unknown synthetic task {task!r}")

    pairs = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        src = [content[int(k)] for k in rng.integers(0, vocab_size, size=n)]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            if filler_rate > 0:
                src = [
                    fillers[int(rng.integers(0, len(fillers)))]
                    if rng.random() < filler_rate
                    else tok
                    for tok in src
                ]
            mapped = [lexicon[t] for t in src if t not in fillers]
            if not mapped:  # keep at least one content token
                keep = content[int(rng.integers(0, vocab_size))]
                src[int(rng.integers(0, len(src)))] = keep
                mapped = [lexicon[t] for t in src if t not in fillers]
            tgt = _swap_adjacent(mapped)
        pairs.append((src, tgt))
    return SyntheticCorpus(
        pairs=pairs, task=task, lexicon=lexicon, filler_tokens=frozenset(fillers)
    )


@dataclass
class ParallelBatch:
    """Padded id matrices with masks; every row ends with EOS before padding."""

    src: np.ndarray  # (B, I) int
    src_mask: np.ndarray  # (B, I) float 0/1
    tgt: np.ndarray  # (B, T) int, gold targets ending in EOS
    tgt_mask: np.ndarray  # (B, T) float 0/1
    src_lengths: list = field(default_factory=list)
    tgt_lengths: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.src.shape[0]

    def decoder_input(self) -> np.ndarray:
        """Gold targets shifted right behind a BOS token."""
        shifted = np.full_like(self.tgt, PAD)
        shifted[:, 0] = BOS
        shifted[:, 1:] = self.tgt[:, :-1]
        return shifted


def _pad_block(rows, pad_value=PAD):
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad_value, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    return ids, mask


def encode_pair(pair, src_vocab: Vocab, tgt_vocab: Vocab):
    src_tokens, tgt_tokens = pair
    return (
        src_vocab.encode(src_tokens) + [EOS],
        tgt_vocab.encode(tgt_tokens) + [EOS],
    )


def make_batches(
    pairs,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    batch_tokens: int = 512,
    seed: int = 0,
):
    """Length-bucketed batches, deterministic under the seed.

    Pairs are sorted by length so each batch wastes little padding, then the
    batch order is shuffled.  ``batch_tokens`` caps padded source plus target
    tokens per batch.
    """
    encoded = [encode_pair(p, src_vocab, tgt_vocab) for p in pairs]
    order = sorted(range(len(encoded)), key=lambda i: (len(encoded[i][0]), len(encoded[i][1]), i))
    groups = []
    current: list = []
    max_s = max_t = 0
    for idx in order:
        s, t = encoded[idx]
        new_s = max(max_s, len(s))
        new_t = max(max_t, len(t))
        if current and (len(current) + 1) * (new_s + new_t) > batch_tokens:
            groups.append(current)
            current, max_s, max_t = [], 0, 0
            new_s, new_t = len(s), len(t)
        current.append(idx)
        max_s, max_t = new_s, new_t
    if current:
        groups.append(current)
    rng = np.random.default_rng(seed)
    rng.shuffle(groups)

    batches = []
    for group in groups:
        src_rows = [encoded[i][0] for i in group]
        tgt_rows = [encoded[i][1] for i in group]
        src, src_mask = _pad_block(src_rows)
        tgt, tgt_mask = _pad_block(tgt_rows)
        batches.append(
            ParallelBatch(
                src=src,
                src_mask=src_mask,
                tgt=tgt,
                tgt_mask=tgt_mask,
                src_lengths=[len(r) for r in src_rows],
                tgt_lengths=[len(r) for r in tgt_rows],
            )
        )
    return batches
