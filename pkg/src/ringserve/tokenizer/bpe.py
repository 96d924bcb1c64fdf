"""Byte-level BPE tokenizer over a flat merge table."""

from __future__ import annotations

import codecs
import copy
import threading
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .pretokenize import pretokenize
from .table import DuplicateMerge, MergeTable, SymbolScratch

NO_RANK = 0xFFFFFFFF


class TokenizerError(Exception):
    pass


class TokenizerParseError(TokenizerError, ValueError):
    def __init__(self, path: str, line: int, msg: str) -> None:
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class InvalidTokenId(TokenizerError, ValueError):
    pass


def escape_token(tok: bytes) -> str:
    """Printable ASCII verbatim; everything else (and backslash) as ``\\xNN``."""
    return "".join(chr(b) if 0x21 <= b <= 0x7E and b != 0x5C else f"\\x{b:02X}" for b in tok)


def unescape_token(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if text[i + 1:i + 2] != "x" or len(text) < i + 4:
                raise ValueError(f"bad escape at column {i}")
            out.append(int(text[i + 2:i + 4], 16))
            i += 4
        else:
            out += ch.encode("utf-8")
            i += 1
    return bytes(out)


class Tokenizer:
    def __init__(self, vocab: dict[bytes, int], merges: Sequence[tuple[bytes, bytes]],
                 special: Optional[dict[int, bytes]] = None, wide: bool = True) -> None:
        missing = [b for b in range(256) if bytes([b]) not in vocab]
        if missing:
            raise TokenizerError(f"vocab lacks {len(missing)} base byte tokens (first: {missing[0]:#04x})")
        self.vocab = dict(vocab)
        size = max(max(vocab.values()) + 1, max(special, default=-1) + 1 if special else 0)
        self.id_to_bytes: list[Optional[bytes]] = [None] * size
        for tok, i in vocab.items():
            self.id_to_bytes[i] = tok
        self.special = dict(special or {})
        for i, tok in self.special.items():
            self.id_to_bytes[i] = tok
        self.byte_ids = [vocab[bytes([b])] for b in range(256)]
        triples = []
        seen = set()
        for left, right in merges:
            if (left, right) in seen:
                raise DuplicateMerge(f"duplicate merge {left!r} {right!r}")
            seen.add((left, right))
            try:
                triples.append((vocab[left], vocab[right], vocab[left + right]))
            except KeyError as exc:
                raise TokenizerError(f"merge {left!r} {right!r} references unknown token") from exc
        self.merges = list(merges)
        self.table = MergeTable(triples)
        self.wide = wide
        self._local = threading.local()

    # -- construction ----------------------------------------------------------
    @classmethod
    def byte_level(cls, merges: Sequence[tuple[bytes, bytes]] = (), **kw) -> "Tokenizer":
        """Ids 0-255 are raw bytes; each merge gets the next id in order."""
        vocab = {bytes([b]): b for b in range(256)}
        for left, right in merges:
            vocab.setdefault(left + right, len(vocab))
        return cls(vocab, merges, **kw)

    @classmethod
    def load(cls, vocab_path: str | Path, merges_path: str | Path, **kw) -> "Tokenizer":
        vocab: dict[bytes, int] = {}
        vp = str(vocab_path)
        with open(vocab_path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TokenizerParseError(vp, n, "expected token<TAB>id")
                try:
                    tok, idx = unescape_token(parts[0]), int(parts[1])
                except ValueError as exc:
                    raise TokenizerParseError(vp, n, str(exc)) from None
                if tok in vocab:
                    raise TokenizerParseError(vp, n, f"duplicate token {parts[0]!r}")
                vocab[tok] = idx
        merges = []
        seen = set()
        mp = str(merges_path)
        with open(merges_path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise TokenizerParseError(mp, n, "expected 'left right'")
                try:
                    pair = (unescape_token(parts[0]), unescape_token(parts[1]))
                except ValueError as exc:
                    raise TokenizerParseError(mp, n, str(exc)) from None
                if pair in seen:
                    raise DuplicateMerge(f"{mp}:{n}: duplicate merge {line!r}")
                if pair[0] not in vocab or pair[1] not in vocab or pair[0] + pair[1] not in vocab:
                    raise TokenizerParseError(mp, n, "merge references a token missing from the vocab")
                seen.add(pair)
                merges.append(pair)
        return cls(vocab, merges, **kw)

    def save(self, vocab_path: str | Path, merges_path: str | Path) -> None:
        with open(vocab_path, "w", encoding="utf-8") as fh:
            for tok, i in sorted(self.vocab.items(), key=lambda kv: kv[1]):
                fh.write(f"{escape_token(tok)}\t{i}\n")
        with open(merges_path, "w", encoding="utf-8") as fh:
            for left, right in self.merges:
                fh.write(f"{escape_token(left)} {escape_token(right)}\n")

    def with_special(self, special: dict[int, bytes]) -> "Tokenizer":
        """Copy sharing the merge table, with extra decode-only ids."""
        clone = copy.copy(self)
        clone.special = {**self.special, **special}
        size = max(len(self.id_to_bytes), max(special, default=-1) + 1)
        clone.id_to_bytes = self.id_to_bytes + [None] * (size - len(self.id_to_bytes))
        for i, tok in special.items():
            if i < len(self.id_to_bytes) and self.id_to_bytes[i] is not None:
                raise TokenizerError(f"special id {i} collides with a vocabulary token")
            clone.id_to_bytes[i] = tok
        clone._local = threading.local()
        return clone

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_bytes)

    # -- encode ----------------------------------------------------------------
    @property
    def scratch(self) -> SymbolScratch:
        s = getattr(self._local, "scratch", None)
        if s is None:
            s = self._local.scratch = SymbolScratch()
        return s

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        out: list[int] = []
        scratch = self.scratch
        for piece in pretokenize(data, self.wide):
            self._encode_piece(piece, scratch, out)
        return out

    def _encode_piece(self, piece: bytes, scratch: SymbolScratch, out: list[int]) -> None:
        n = len(piece)
        if n == 1:
            out.append(self.byte_ids[piece[0]])
            return
        scratch.ensure(n)
        w = scratch.words  # node k occupies words 4k..4k+3: id, prev, next, length
        ranks = scratch.ranks
        lookup = self.table.lookup
        byte_ids = self.byte_ids
        for k in range(n):
            b = 4 * k
            w[b] = byte_ids[piece[k]]
            w[b + 1] = k - 1
            w[b + 2] = k + 1 if k + 1 < n else -1
            w[b + 3] = 1
        for k in range(n - 1):
            hit = lookup(w[4 * k], w[4 * k + 4])
            ranks[k] = NO_RANK if hit is None else hit[1]
        ranks[n - 1] = NO_RANK
        while True:
            best, bi, k = NO_RANK, -1, 0
            while k != -1:
                r = ranks[k]
                if r < best:
                    best, bi = r, k
                k = w[4 * k + 2]
            if bi < 0:
                break
            j = w[4 * bi + 2]
            w[4 * bi] = lookup(w[4 * bi], w[4 * j])[0]
            w[4 * bi + 3] += w[4 * j + 3]
            nj = w[4 * j + 2]
            w[4 * bi + 2] = nj
            if nj != -1:
                w[4 * nj + 1] = bi
                hit = lookup(w[4 * bi], w[4 * nj])
                ranks[bi] = NO_RANK if hit is None else hit[1]
            else:
                ranks[bi] = NO_RANK
            p = w[4 * bi + 1]
            if p != -1:
                hit = lookup(w[4 * p], w[4 * bi])
                ranks[p] = NO_RANK if hit is None else hit[1]
        k = 0
        while k != -1:
            out.append(w[4 * k])
            k = w[4 * k + 2]

    # -- decode ----------------------------------------------------------------
    def token_bytes(self, i: int) -> bytes:
        if not 0 <= i < len(self.id_to_bytes) or self.id_to_bytes[i] is None:
            raise InvalidTokenId(f"token id {i} not in vocabulary")
        return self.id_to_bytes[i]

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.token_bytes(int(i)) for i in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def detokenizer(self) -> "IncrementalDetokenizer":
        return IncrementalDetokenizer(self)


class IncrementalDetokenizer:
    """Streams text for ids arriving in chunks; holds back incomplete UTF-8."""

    def __init__(self, tok: Tokenizer) -> None:
        self.tok = tok
        self._dec = codecs.getincrementaldecoder("utf-8")(errors="replace")

    def feed(self, ids: Iterable[int]) -> str:
        return self._dec.decode(self.tok.decode_bytes(ids))

    def flush(self) -> str:
        return self._dec.decode(b"", final=True)

