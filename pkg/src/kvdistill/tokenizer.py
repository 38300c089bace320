"""Byte-level toy tokenizer: ids 0-255 are raw bytes, plus BOS and EOS."""

from __future__ import annotations

BOS = 256
EOS = 257
MIN_VOCAB = 258


def encode(text: str, add_bos: bool = True) -> list[int]:
    ids = list(text.encode("utf-8"))
    return [BOS] + ids if add_bos else ids


def decode(ids) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def read_id_file(path) -> list[int]:
    """Newline-separated integer token ids (blank lines ignored)."""
    with open(path, encoding="utf-8") as fh:
        return [int(line) for line in fh if line.strip()]


def format_id_file(ids) -> str:
    return "".join(f"{int(i)}\n" for i in ids)
