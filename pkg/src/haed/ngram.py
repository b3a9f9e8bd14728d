"""Backoff n-gram language model over token ids.

Interpolated absolute discounting: every seen n-gram's stored probability
already includes its backoff share, so each context's distribution sums
to exactly 1 by construction, all the way down to a uniform floor over
the vocabulary. Rows are therefore finite for every token (unseen events
get the floor mass), which lets an n-gram stand in for the neural decoder
LM anywhere a `next_log_probs(prefix)` object is accepted.

On-disk format (text, one float repr per line component, sorted ids):

    HAED-NGRAM 1
    order/vocab_size/discount/sos/eos header lines
    \\<L>-grams   : "<logp> <ctx ids...> <w>" per seen n-gram
    \\<L>-backoff : "<logbow> <ctx ids...>" per seen context
    \\end
"""

from __future__ import annotations

import math
import os
from collections import defaultdict

import numpy as np


class NGramError(ValueError):
    pass


class NGramLM:
    def __init__(self, order: int, vocab_size: int, sos_id: int, eos_id: int, discount: float):
        if order < 1:
            raise NGramError("order must be >= 1")
        if not 0.0 < discount < 1.0:
            raise NGramError("discount must be in (0, 1)")
        self.order = order
        self.vocab_size = vocab_size
        self.sos_id = sos_id
        self.eos_id = eos_id
        self.discount = discount
        # stored[L][ctx][w] = log p(w | ctx), full interpolated value; L = len(ctx)
        self.stored: list[dict] = [dict() for _ in range(order)]
        # bow[L][ctx] = log backoff weight for unseen continuations of ctx
        self.bow: list[dict] = [dict() for _ in range(order)]
        self._row_cache: dict[tuple, np.ndarray] = {}

    # -- scoring ---------------------------------------------------------

    def context_of(self, prefix_ids) -> tuple:
        if self.order == 1:
            return ()
        padded = [self.sos_id] * (self.order - 1) + list(prefix_ids)
        return tuple(padded[len(padded) - (self.order - 1) :])

    def log_prob(self, token: int, context: tuple) -> float:
        L = len(context)
        probs = self.stored[L].get(context)
        if probs is not None and token in probs:
            return probs[token]
        if L == 0:
            return self.bow[0][()] - math.log(self.vocab_size)
        lower = self.log_prob(token, context[1:])
        b = self.bow[L].get(context)
        return lower if b is None else b + lower

    def next_log_probs(self, prefix_ids) -> np.ndarray:
        """(V,) log distribution over the next token given a prefix."""
        ctx = self.context_of(prefix_ids)
        row = self._row_cache.get(ctx)
        if row is None:
            row = np.array([self.log_prob(w, ctx) for w in range(self.vocab_size)])
            self._row_cache[ctx] = row
        return row

    def sequence_log_prob(self, tokens) -> float:
        """log p of the token sequence followed by eos."""
        total = 0.0
        prefix: list[int] = []
        for tok in list(tokens) + [self.eos_id]:
            total += self.log_prob(tok, self.context_of(prefix))
            prefix.append(tok)
        return total

    # -- persistence -------------------------------------------------------

    def save(self, path: str) -> None:
        lines = [
            "HAED-NGRAM 1",
            f"order {self.order}",
            f"vocab_size {self.vocab_size}",
            f"discount {self.discount!r}",
            f"sos {self.sos_id}",
            f"eos {self.eos_id}",
        ]
        for L in range(self.order):
            lines.append(f"\\{L}-grams")
            for ctx in sorted(self.stored[L]):
                for w in sorted(self.stored[L][ctx]):
                    parts = [repr(self.stored[L][ctx][w])] + [str(c) for c in ctx] + [str(w)]
                    lines.append(" ".join(parts))
            lines.append(f"\\{L}-backoff")
            for ctx in sorted(self.bow[L]):
                lines.append(" ".join([repr(self.bow[L][ctx])] + [str(c) for c in ctx]))
        lines.append("\\end")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "NGramLM":
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f]
        if not lines or lines[0] != "HAED-NGRAM 1":
            raise NGramError(f"{path}: not an n-gram model file")
        header = {}
        i = 1
        while i < len(lines) and not lines[i].startswith("\\"):
            key, val = lines[i].split(" ", 1)
            header[key] = val
            i += 1
        lm = cls(
            int(header["order"]),
            int(header["vocab_size"]),
            int(header["sos"]),
            int(header["eos"]),
            float(header["discount"]),
        )
        section = None
        for ln in lines[i:]:
            if ln == "\\end":
                break
            if ln.startswith("\\"):
                section = ln
                continue
            parts = ln.split()
            value = float(parts[0])
            ids = [int(p) for p in parts[1:]]
            L = int(section[1 : section.index("-")])
            if section.endswith("-grams"):
                ctx, w = tuple(ids[:-1]), ids[-1]
                lm.stored[L].setdefault(ctx, {})[w] = value
            else:
                lm.bow[L][tuple(ids)] = value
        return lm


def ngram_train(
    sequences: list[list[int]],
    order: int,
    vocab_size: int,
    sos_id: int,
    eos_id: int,
    discount: float = 0.1,
) -> NGramLM:
    """Count-and-smooth an n-gram model; eos terminates every sequence."""
    if not sequences:
        raise NGramError("empty training text")
    lm = NGramLM(order, vocab_size, sos_id, eos_id, discount)
    counts = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
    for seq in sequences:
        history = [sos_id] * (order - 1)
        for w in list(seq) + [eos_id]:
            for L in range(order):
                ctx = tuple(history[len(history) - L :]) if L else ()
                counts[L][ctx][int(w)] += 1
            history.append(int(w))
            history = history[-(order - 1) :] if order > 1 else []

    d = discount
    # unigrams: discounted counts plus a uniform floor
    uni = counts[0][()]
    total = sum(uni.values())
    types = len(uni)
    bow0 = d * types / total
    lm.bow[0][()] = math.log(bow0)
    floor = bow0 / vocab_size
    lm.stored[0][()] = {
        w: math.log((c - d) / total + floor) for w, c in uni.items()
    }
    for L in range(1, order):
        for ctx, table in counts[L].items():
            ctx_total = sum(table.values())
            ctx_types = len(table)
            bow = d * ctx_types / ctx_total
            lm.bow[L][ctx] = math.log(bow)
            lm.stored[L][ctx] = {
                w: math.log((c - d) / ctx_total + bow * math.exp(lm.log_prob(w, ctx[1:])))
                for w, c in table.items()
            }
    return lm
