"""Simulated host-memory chunk cache standing in for PCIe offload and fetch."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple

import numpy as np

ROLES = ("q", "k", "v", "o", "do", "hidden", "attn_out", "resid", "stats")


class StoreError(RuntimeError):
    """Misuse of the store: missing key, duplicate key, bad release, double free."""


class HostMemoryExhausted(StoreError):
    """An offload would push resident bytes past the host budget."""


class ChunkKey(NamedTuple):
    layer: int
    chunk: int
    role: str


@dataclass
class StoreLedger:
    bytes_offloaded: int = 0
    bytes_fetched: int = 0
    offload_count: int = 0
    fetch_count: int = 0
    free_count: int = 0
    hbm_checkout_highwater: int = 0
    # high-water of simultaneously checked-out chunks, per role
    role_highwater: dict[str, int] = field(default_factory=dict)


class OffloadStore:
    """Host chunk cache with a byte budget and traffic counters.

    ``fetch`` models a host-to-device copy: the key is marked checked out
    until ``release``. The checkout high-water marks are the residency
    evidence used by the attention tests.
    """

    def __init__(self, capacity_bytes: int | float = float("inf")):
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        self.capacity_bytes = capacity_bytes
        self._resident: dict[ChunkKey, np.ndarray] = {}
        self._checkout: Counter[ChunkKey] = Counter()
        self._fetch_multiplicity: Counter[ChunkKey] = Counter()
        self.ledger = StoreLedger()
        self.resident_bytes = 0

    @staticmethod
    def _key(key) -> ChunkKey:
        key = ChunkKey(*key)
        if key.role not in ROLES:
            raise StoreError(f"unknown tensor role {key.role!r}")
        return key

    def __contains__(self, key) -> bool:
        return ChunkKey(*key) in self._resident

    def __len__(self) -> int:
        return len(self._resident)

    def offload(self, key, chunk: np.ndarray) -> None:
        key = self._key(key)
        if key in self._resident:
            raise StoreError(f"duplicate offload for {key}")
        payload = np.array(chunk, copy=True)
        payload.setflags(write=False)
        size = int(payload.nbytes)
        if self.resident_bytes + size > self.capacity_bytes:
            raise HostMemoryExhausted(
                f"offloading {key} ({size} B) exceeds host budget "
                f"{self.capacity_bytes} B ({self.resident_bytes} B resident)")
        self._resident[key] = payload
        self.resident_bytes += size
        self.ledger.bytes_offloaded += size
        self.ledger.offload_count += 1
        self._check()

    def fetch(self, key) -> np.ndarray:
        key = self._key(key)
        if key not in self._resident:
            raise StoreError(f"fetch of absent key {key}")
        payload = self._resident[key]
        self._checkout[key] += 1
        self._fetch_multiplicity[key] += 1
        self.ledger.bytes_fetched += int(payload.nbytes)
        self.ledger.fetch_count += 1
        self._update_highwater()
        return payload.copy()

    def release(self, key) -> None:
        key = self._key(key)
        if self._checkout[key] <= 0:
            raise StoreError(f"release of {key} which is not checked out")
        self._checkout[key] -= 1
        if self._checkout[key] == 0:
            del self._checkout[key]

    def free(self, key) -> None:
        key = self._key(key)
        if key not in self._resident:
            raise StoreError(f"free of absent key {key} (double free?)")
        self.resident_bytes -= int(self._resident.pop(key).nbytes)
        self._checkout.pop(key, None)
        self.ledger.free_count += 1
        self._check()

    def checked_out(self, role: str | None = None) -> int:
        return sum(n for k, n in self._checkout.items() if role is None or k.role == role)

    def highwater(self, role: str) -> int:
        return self.ledger.role_highwater.get(role, 0)

    def reset_highwater(self) -> None:
        self.ledger.hbm_checkout_highwater = self.checked_out()
        self.ledger.role_highwater = {}
        self._update_highwater()

    def _update_highwater(self) -> None:
        led = self.ledger
        led.hbm_checkout_highwater = max(led.hbm_checkout_highwater, self.checked_out())
        for role in {k.role for k in self._checkout}:
            led.role_highwater[role] = max(led.role_highwater.get(role, 0), self.checked_out(role))

    def _check(self) -> None:
        assert self.resident_bytes <= self.capacity_bytes, "host capacity exceeded"
        assert self.resident_bytes == sum(int(p.nbytes) for p in self._resident.values())

    def report(self) -> dict[str, Any]:
        led = asdict(self.ledger)
        led["resident_bytes"] = self.resident_bytes
        led["resident_chunks"] = len(self._resident)
        led["max_fetch_multiplicity"] = max(self._fetch_multiplicity.values(), default=0)
        cap = self.capacity_bytes
        led["capacity_bytes"] = None if cap == float("inf") else int(cap)
        return led

    def dump_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)
