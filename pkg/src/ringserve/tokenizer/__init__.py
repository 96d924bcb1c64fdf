from .bpe import (IncrementalDetokenizer, InvalidTokenId, Tokenizer, TokenizerError,
                  TokenizerParseError, escape_token, unescape_token)
from .pretokenize import boundaries_scalar, boundaries_wide, pretokenize
from .table import DuplicateMerge, MergeTable, SymbolScratch

__all__ = [
    "DuplicateMerge", "IncrementalDetokenizer", "InvalidTokenId", "MergeTable", "SymbolScratch",
    "Tokenizer", "TokenizerError", "TokenizerParseError", "boundaries_scalar", "boundaries_wide",
    "escape_token", "pretokenize", "unescape_token",
]
