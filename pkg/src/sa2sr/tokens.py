"""Character token inventory for the recognizer.

29 output symbols: 26 lowercase letters, space, apostrophe, and the
blank, which sits at the last index.  Transcripts are lowercased and any
character outside the inventory is dropped.
"""

from __future__ import annotations

ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
BLANK_ID = len(ALPHABET)  # 28
VOCAB_SIZE = len(ALPHABET) + 1  # 29

_CHAR_TO_ID = {c: i for i, c in enumerate(ALPHABET)}


def encode_text(text: str) -> list[int]:
    """Map a transcript to token ids, never emitting the blank."""
    return [_CHAR_TO_ID[c] for c in text.lower() if c in _CHAR_TO_ID]


def decode_ids(ids) -> str:
    """Map non-blank token ids back to text."""
    out = []
    for i in ids:
        if i == BLANK_ID:
            raise ValueError(f"decode_ids: blank id {BLANK_ID} is not a character")
        out.append(ALPHABET[i])
    return "".join(out)
