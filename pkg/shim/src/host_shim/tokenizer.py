"""A toy subword tokenizer with the shape of the real thing.

Words are split on whitespace and then chopped into pieces of at most four
characters; continuation pieces carry a ``##`` prefix, wordpiece-style.  The
point is not linguistics — it is that phrases get split across several
tokens, including mid-word, exactly the situation the region-alignment path
has to survive with a real tokenizer.

``map_token_spans`` goes the other way: given the pieces and the plain text,
it reconstructs the character range of every token so region ids can be
assigned by character overlap.
"""

from __future__ import annotations

from .errors import UnmappableToken

CONT = "##"
MAX_PIECE = 4


def tokenize(text: str) -> list[str]:
    pieces: list[str] = []
    for word in text.split():
        for i in range(0, len(word), MAX_PIECE):
            chunk = word[i:i + MAX_PIECE]
            pieces.append(chunk if i == 0 else CONT + chunk)
    return pieces


def map_token_spans(pieces: list[str], plain_text: str) -> list[tuple[int, int]]:
    """(char_start, char_end) in ``plain_text`` for every piece.

    Walks the text left to right, skipping whitespace before word-initial
    pieces only; a piece that does not match the text at the cursor raises
    UnmappableToken with enough context to debug the tokenizer.
    """
    spans: list[tuple[int, int]] = []
    cursor = 0
    for idx, piece in enumerate(pieces):
        body = piece[len(CONT):] if piece.startswith(CONT) else piece
        if not piece.startswith(CONT):
            while cursor < len(plain_text) and plain_text[cursor].isspace():
                cursor += 1
        if plain_text[cursor:cursor + len(body)] != body:
            raise UnmappableToken(
                f"piece {idx} ({piece!r}) does not match text at {cursor}: "
                f"{plain_text[cursor:cursor + 12]!r}")
        spans.append((cursor, cursor + len(body)))
        cursor += len(body)
    return spans
