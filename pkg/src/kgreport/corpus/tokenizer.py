from __future__ import annotations

from typing import Iterable

PAD, UNK, BOS, EOS, CLS, ENC, SEP, EMPTY = (
    "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[CLS]", "[ENC]", "[SEP]", "[MASK-NEG]")
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, CLS, ENC, SEP, EMPTY)

# ids of the specials never move
PAD_ID, UNK_ID, BOS_ID, EOS_ID, CLS_ID, ENC_ID, SEP_ID, EMPTY_ID = range(len(SPECIAL_TOKENS))

_SILENT = {PAD_ID, BOS_ID, EOS_ID}


_SPECIAL_BY_LOWER = {t.lower(): t for t in SPECIAL_TOKENS}


def normalize(text: str) -> str:
    """Lowercase and single-space; bracketed special tokens keep their spelling."""
    return " ".join(_SPECIAL_BY_LOWER.get(w, w) for w in text.lower().split())


class Vocabulary:
    """Closed word-level vocabulary with the special tokens at ids 0-7.

    ``[MASK-NEG]`` is the sentinel encoded when a sample has no positive node.
    """

    def __init__(self, words: Iterable[str]):
        lexicon = sorted({w for w in words if w not in SPECIAL_TOKENS})
        self.itos = list(SPECIAL_TOKENS) + lexicon
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(w for t in texts for w in normalize(t).split())

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def tokenize(self, text: str) -> list:
        return [self.stoi.get(w, UNK_ID) for w in normalize(text).split()]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[int(i)] for i in ids if int(i) not in _SILENT)

    def to_list(self) -> list:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: list) -> "Vocabulary":
        if tuple(itos[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary does not start with the reserved special tokens")
        vocab = cls(())
        vocab.itos = list(itos)
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        return vocab
