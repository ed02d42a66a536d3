"""Integer vocabulary over characters or whitespace words.

Ids 0 and 1 are reserved for padding and unknown.  Construction is
deterministic: frequency descending, ties broken lexicographically.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PAD_ID = 0
UNK_ID = 1
RESERVED = ("<pad>", "<unk>")


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)
    mode: str = "char"

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        toks = list(text) if self.mode == "char" else text.split()
        return [self.token_to_id.get(t, UNK_ID) for t in toks]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": self.id_to_token[len(RESERVED):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(RESERVED) + list(d["tokens"]), mode=d["mode"])


def build_vocab(corpus: str, mode: str = "char", max_size: int = 256) -> Vocab:
    """Keep the most frequent tokens up to max_size (reserved ids
    included in the budget); overflow tokens map to the unknown id."""
    if not corpus:
        raise ValueError("build_vocab: corpus is empty")
    if mode not in ("char", "word"):
        raise ValueError(f"build_vocab: unknown mode {mode!r}")
    counts = Counter(list(corpus) if mode == "char" else corpus.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[:max(0, max_size - len(RESERVED))]]
    return Vocab(list(RESERVED) + keep, mode=mode)
