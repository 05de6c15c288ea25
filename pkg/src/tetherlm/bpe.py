"""Minimal byte-pair-encoding tokenizer.

The canonical encoding of a byte string applies the merge rules in rule
order, each as a single left-to-right pass. `Tokenizer.encode` computes
it directly; `IncrementalEncoder` maintains the same result as bytes are
appended, which is what the byte-level frontier needs to decide cheaply
whether appending one more token keeps a path canonical.

Rule tables must be well formed (each rule's sides exist before the
rule), which train_bpe guarantees. Under that condition a rule's output
token can never equal either side of its own rule, so one left-to-right
pass per rule is already a fixed point, and within a stage a new item can
only ever merge with the current tail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

EOS_ID = 256


def _one_pass(items: list[int], pair: tuple[int, int], out: int) -> list[int]:
    left, right = pair
    res: list[int] = []
    i = 0
    n = len(items)
    while i < n:
        if i + 1 < n and items[i] == left and items[i + 1] == right:
            res.append(out)
            i += 2
        else:
            res.append(items[i])
            i += 1
    return res


@dataclass(frozen=True, eq=False)
class Tokenizer:
    """Byte-level BPE: 256 base byte tokens, the EOS token, one id per merge."""

    merges: tuple[tuple[int, int], ...]
    token_bytes: tuple[bytes, ...]
    eos_id: int = EOS_ID

    @classmethod
    def from_merges(cls, merges) -> "Tokenizer":
        table: list[bytes] = [bytes([b]) for b in range(256)] + [b""]
        rules: list[tuple[int, int]] = []
        for left, right in merges:
            if not (0 <= left < len(table) and 0 <= right < len(table)):
                raise ValueError(f"merge ({left}, {right}) references an unknown token")
            if EOS_ID in (left, right):
                raise ValueError("merges may not involve the EOS token")
            table.append(table[left] + table[right])
            rules.append((int(left), int(right)))
        return cls(tuple(rules), tuple(table))

    @property
    def vocab_size(self) -> int:
        return len(self.token_bytes)

    def encode(self, data: bytes) -> list[int]:
        """Canonical token sequence: merges applied in rule order."""
        items = list(data)
        for rule_index, pair in enumerate(self.merges):
            items = _one_pass(items, pair, 257 + rule_index)
        return items

    def decode(self, tokens) -> bytes:
        return b"".join(self.token_bytes[t] for t in tokens)

    def to_json(self) -> str:
        return json.dumps({"merges": [list(m) for m in self.merges], "eos": self.eos_id})

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        doc = json.loads(text)
        if doc.get("eos", EOS_ID) != EOS_ID:
            raise ValueError("eos id must be 256 in this scheme")
        return cls.from_merges(doc["merges"])


def train_bpe(corpus, num_merges: int) -> Tokenizer:
    """Greedy most-frequent-pair training.

    Ties break on the lexicographic order of the pair's byte strings, so
    training is deterministic. Stops early once no adjacent pair exists.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    streams = [list(doc) for doc in corpus]
    table: list[bytes] = [bytes([b]) for b in range(256)] + [b""]
    merges: list[tuple[int, int]] = []
    for _ in range(num_merges):
        counts: dict[tuple[int, int], int] = {}
        for s in streams:
            for a, b in zip(s, s[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
        if not counts:
            break
        top = max(counts.values())
        best = min(
            (p for p, c in counts.items() if c == top),
            key=lambda p: (table[p[0]], table[p[1]]),
        )
        new_id = len(table)
        table.append(table[best[0]] + table[best[1]])
        merges.append(best)
        streams = [_one_pass(s, best, new_id) for s in streams]
    return Tokenizer.from_merges(merges)


class IncrementalEncoder:
    """Streamwise canonical encoder.

    One token stream per rule stage; stage 0 holds raw bytes. Appending
    bytes feeds stage 1, whose retractions and new outputs cascade down;
    the last stage always equals Tokenizer.encode of all bytes so far.

    Retracting j input units pops tail items until j are accounted for
    (a merged item counts for two); a half-retracted merged item
    re-injects the rule's left token as a fresh input.
    """

    __slots__ = ("tok", "items", "flags")

    def __init__(self, tok: Tokenizer):
        self.tok = tok
        n = len(tok.merges)
        self.items: list[list[int]] = [[] for _ in range(n + 1)]
        self.flags: list[list[bool]] = [[] for _ in range(n + 1)]

    def copy(self) -> "IncrementalEncoder":
        other = IncrementalEncoder.__new__(IncrementalEncoder)
        other.tok = self.tok
        other.items = [list(s) for s in self.items]
        other.flags = [list(s) for s in self.flags]
        return other

    @property
    def tokens(self) -> list[int]:
        return self.items[-1]

    def append(self, data: bytes) -> tuple[int, list[int]]:
        """Commit bytes; returns (retracted, new) for the final stage."""
        return self._run(data, commit=True)

    def peek(self, data: bytes) -> tuple[int, list[int]]:
        """As append, but leaves every stream untouched."""
        return self._run(data, commit=False)

    def _run(self, data: bytes, commit: bool) -> tuple[int, list[int]]:
        retract, new = 0, list(data)
        for stage in range(len(self.items)):
            retract, new = self._feed(stage, retract, new, commit)
        return retract, new

    def _feed(self, stage: int, retract_in: int, incoming: list[int], commit: bool):
        items = self.items[stage]
        flags = self.flags[stage]
        popped = 0  # real tail items logically removed this call
        new_t: list[int] = []
        new_f: list[bool] = []

        def pop_tail() -> tuple[int, bool, bool]:
            nonlocal popped
            if new_t:
                return new_t.pop(), new_f.pop(), True
            idx = len(items) - 1 - popped
            if idx < 0:
                raise RuntimeError("stage retraction underflow; stream state corrupt")
            popped += 1
            return items[idx], flags[idx], False

        def tail_token():
            if new_t:
                return new_t[-1]
            idx = len(items) - 1 - popped
            return items[idx] if idx >= 0 else None

        retract_out = 0
        queue: list[int] = []
        if stage > 0:
            left, right = self.tok.merges[stage - 1]
            out_tok = 256 + stage
            r = retract_in
            while r > 0:
                _, merged, was_new = pop_tail()
                if not was_new:
                    retract_out += 1
                if merged and r == 1:
                    queue.append(left)  # left input survives the retraction
                    r = 0
                else:
                    r -= 2 if merged else 1
            queue.extend(incoming)
            for x in queue:
                if tail_token() == left and x == right:
                    _, _, was_new = pop_tail()
                    if not was_new:
                        retract_out += 1
                    new_t.append(out_tok)
                    new_f.append(True)
                else:
                    new_t.append(x)
                    new_f.append(False)
        else:
            # stage 0 relays raw bytes; nothing upstream ever retracts them
            new_t = list(incoming)
            new_f = [False] * len(incoming)

        if commit:
            if popped:
                del items[len(items) - popped:]
                del flags[len(flags) - popped:]
            items.extend(new_t)
            flags.extend(new_f)
        return retract_out, new_t
