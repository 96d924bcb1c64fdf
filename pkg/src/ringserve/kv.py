"""Paged KV-cache page accounting (pages only; no tensors)."""

from __future__ import annotations

import math
from typing import Hashable


class KvExhausted(Exception):
    pass


class KvPagePool:
    def __init__(self, page_size: int = 16, total_pages: int = 65536) -> None:
        if page_size < 1 or total_pages < 1:
            raise ValueError("page_size and total_pages must be positive")
        self.page_size = page_size
        self.total_pages = total_pages
        # popped from the end, so low page ids go out first
        self.free_list: list[int] = list(range(total_pages - 1, -1, -1))
        self.maps: dict[Hashable, list[int]] = {}

    @property
    def free_pages(self) -> int:
        return len(self.free_list)

    @property
    def allocated_pages(self) -> int:
        return sum(len(p) for p in self.maps.values())

    def pages_for(self, token_count: int) -> int:
        return math.ceil(token_count / self.page_size)

    def alloc(self, request: Hashable, token_count: int) -> list[int]:
        need = self.pages_for(token_count)
        if need > len(self.free_list):
            raise KvExhausted(f"need {need} pages, {len(self.free_list)} free")
        pages = [self.free_list.pop() for _ in range(need)]
        self.maps.setdefault(request, []).extend(pages)
        return pages

    def free(self, request: Hashable) -> None:
        pages = self.maps.pop(request, None)
        if pages:
            self.free_list.extend(reversed(pages))

    def check(self) -> None:
        """Raise AssertionError if conservation or exclusivity is broken."""
        seen: set[int] = set()
        for pages in self.maps.values():
            for p in pages:
                assert p not in seen, f"page {p} mapped twice"
                seen.add(p)
        assert not seen.intersection(self.free_list), "page both free and mapped"
        assert len(seen) + len(self.free_list) == self.total_pages, "page count not conserved"
