"""Word-level vocabulary with character fallback.

Reserved control tokens sit at fixed indices so checkpoints and manifests can
name them stably. Unknown words are spelled out character by character, which
keeps the vocabulary at template-lexicon scale while still covering arbitrary
numbers in answers.
"""

from __future__ import annotations

import string

PAD, UNK, EOA, SEG, T1T2, T2T3 = range(6)
RESERVED = ["<pad>", "<unk>", "<eoa>", "[SEG]", "<T1T2>", "<T2T3>"]
CHARSET = list(string.ascii_lowercase + string.digits + ".%,?()->:;'/")


class Vocab:
    def __init__(self, tokens: list):
        if tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("reserved tokens must come first at fixed indices")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, words) -> "Vocab":
        seen = set(RESERVED) | set(CHARSET)
        extra = []
        for w in sorted(set(words)):
            w = w.lower()
            if w and w not in seen:
                seen.add(w)
                extra.append(w)
        return cls(RESERVED + CHARSET + sorted(extra))

    def tokenize(self, text: str) -> list:
        """Whitespace split (case-folded except reserved), char fallback."""
        out = []
        for raw in text.split():
            if raw in self.ids:  # reserved tokens keep their case
                out.append(raw)
                continue
            word = raw.lower()
            if word in self.ids:
                out.append(word)
            else:
                out.extend(ch if ch in self.ids else "<unk>" for ch in word)
        return out

    def encode(self, text: str) -> list:
        return [self.ids[t] for t in self.tokenize(text)]

    def decode(self, ids, skip_special: bool = False) -> str:
        toks = [self.tokens[i] for i in ids]
        if skip_special:
            toks = [t for t in toks if t not in RESERVED]
        return " ".join(toks)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])
