"""Thread-safe hash map and set over integer 3-vector block keys.

Both structures share one storage layout: a bucket region of ``bucket_count``
entries followed by an excess region that absorbs collisions as per-bucket
linked lists (entry indices chained through an offset array, 0 = end of
list).  A stack of free excess indices feeds the lists.

The structural invariant that makes lock-free readers possible: an occupied
entry never moves, and no reachable chain link is severed while a reader
could be traversing it.  Removal therefore only clears the occupancy flag
(bucket case) or re-links the predecessor past the victim while leaving the
victim's own offset untouched (excess case); the stale offset is reset only
when the slot is reused by an insertion.

Writers serialize per chain: every structural modification takes the chain's
lock (striped over buckets) and re-validates after acquiring it.  Readers
never lock; they validate against a per-chain version counter and retry the
traversal if a writer interleaved.  This keeps the retrieval path read-only
while still guaranteeing that a key present for the whole call is found.

All operations either succeed or raise; there is no silent failure mode.
``try_insert_once`` exposes the single-shot, failure-permitting insertion
that older voxel-hashing schemes rely on, so its loss behaviour can be
measured against the guaranteed loop.
"""

from __future__ import annotations

import random
import threading
from typing import Any, Callable, Iterable, Optional

import numpy as np

BlockKey = tuple[int, int, int]

# Spatial hash primes; fixed so independently built peers agree on buckets.
HASH_P1 = 73856093
HASH_P2 = 19349669
HASH_P3 = 83492791

_MASK32 = 0xFFFFFFFF


class CapacityExhausted(RuntimeError):
    """Raised when an insert needs an excess entry and the free list is empty."""


def hash_key(key: BlockKey, bucket_count: int) -> int:
    """Bucket index for a block key.

    Products are wrapping 32-bit (two's complement for negative
    coordinates), combined with XOR; the final reduction is a true
    non-negative modulo.  This exact arithmetic is normative so that any
    client implementation lands on the same bucket.
    """
    x, y, z = key
    h = ((x * HASH_P1) & _MASK32) ^ ((y * HASH_P2) & _MASK32) ^ ((z * HASH_P3) & _MASK32)
    return h % bucket_count


class FreeListStack:
    """LIFO pool of free excess-entry indices.

    CPython's list append/pop are single bytecodes under the GIL, which
    gives the at-most-once pop guarantee without an explicit lock.
    """

    def __init__(self, indices: Iterable[int] = ()) -> None:
        self._slots: list[int] = list(indices)

    def push(self, index: int) -> None:
        self._slots.append(index)

    def pop(self) -> Optional[int]:
        try:
            return self._slots.pop()
        except IndexError:
            return None

    def __len__(self) -> int:
        return len(self._slots)


class _HashCore:
    """Shared machinery of the map and set variants."""

    def __init__(
        self,
        bucket_count: int = 1 << 20,
        excess_capacity: int = 1 << 20,
        *,
        store_values: bool = False,
        lock_stripes: int = 1024,
    ) -> None:
        if bucket_count < 1:
            raise ValueError("bucket_count must be >= 1")
        if excess_capacity < 1:
            raise ValueError("excess_capacity must be >= 1")
        if lock_stripes & (lock_stripes - 1):
            raise ValueError("lock_stripes must be a power of two")
        self.bucket_count = bucket_count
        self.excess_capacity = excess_capacity
        capacity = bucket_count + excess_capacity
        self.capacity = capacity

        self._keys: list[Optional[BlockKey]] = [None] * capacity
        self._occ = np.zeros(capacity, dtype=np.uint8)
        # Offset of the next chain element; only ever points into the excess
        # region [bucket_count, capacity), so 0 is unambiguous as "end".
        self._next: list[int] = [0] * capacity
        self._values: Optional[list[Any]] = [None] * capacity if store_values else None

        # Excess indices, preloaded; pop order is irrelevant to correctness.
        self.free_stack = FreeListStack(range(bucket_count, capacity))

        self._stripe_mask = lock_stripes - 1
        self._locks = [threading.Lock() for _ in range(lock_stripes)]
        # Per-chain seqlock word: odd while a writer mutates the chain.
        self._version: list[int] = [0] * lock_stripes

    # -- internals ---------------------------------------------------------

    def _stripe(self, bucket: int) -> int:
        return bucket & self._stripe_mask

    def _scan_chain(self, key: BlockKey, bucket: int) -> tuple[Optional[int], int]:
        """Walk one chain; returns (entry index of key or None, last entry seen).

        The last entry seen is the chain tail, needed by insertion.  Must be
        called either under the chain lock or wrapped in seqlock validation.
        """
        occ = self._occ
        keys = self._keys
        nxt = self._next
        e = bucket
        last = bucket
        while True:
            if occ[e] and keys[e] == key:
                return e, e
            last = e
            e = nxt[e]
            if e == 0:
                return None, last

    def _find(self, key: BlockKey) -> Optional[int]:
        """Lock-free retrieval; retries while a writer touches the chain."""
        bucket = hash_key(key, self.bucket_count)
        stripe = self._stripe(bucket)
        version = self._version
        while True:
            v0 = version[stripe]
            if v0 & 1:
                continue
            pos, _ = self._scan_chain(key, bucket)
            if version[stripe] == v0:
                return pos

    def _insert_pos(
        self, key: BlockKey, value_factory: Optional[Callable[[], Any]] = None
    ) -> tuple[int, bool]:
        """Insert key if absent; returns (entry index, newly_created).

        Loops over a non-blocking attempt: each retry begins with a fresh
        retrieval, so concurrent same-key inserters converge on one entry.
        When a factory is given its value is stored before the entry is
        published, so readers never observe a half-built entry.
        """
        bucket = hash_key(key, self.bucket_count)
        stripe = self._stripe(bucket)
        lock = self._locks[stripe]
        version = self._version
        while True:
            pos = self._find(key)
            if pos is not None:
                return pos, False
            if not lock.acquire(blocking=False):
                continue
            try:
                # Re-validate under the lock: another writer may have
                # inserted the key or reshaped the chain meanwhile.
                pos, tail = self._scan_chain(key, bucket)
                if pos is not None:
                    return pos, False
                if not self._occ[bucket]:
                    version[stripe] += 1
                    self._keys[bucket] = key
                    if value_factory is not None:
                        self._values[bucket] = value_factory()
                    self._occ[bucket] = 1
                    version[stripe] += 1
                    return bucket, True
                new = self.free_stack.pop()
                if new is None:
                    raise CapacityExhausted(
                        f"excess list exhausted ({self.excess_capacity} entries)"
                    )
                version[stripe] += 1
                self._keys[new] = key
                self._next[new] = 0  # clear offset left stale by removal
                if value_factory is not None:
                    self._values[new] = value_factory()
                self._occ[new] = 1
                self._next[tail] = new  # publish last
                version[stripe] += 1
                return new, True
            finally:
                lock.release()

    # -- public ops shared by map and set ----------------------------------

    def try_insert_once(self, key: BlockKey) -> Optional[int]:
        """Single non-blocking insertion attempt, allowed to fail.

        Returns the entry index on success (or if the key already exists),
        None when the attempt lost a lock race.  This emulates the
        failure-permitting insertion of frame-rate-repaired voxel hash maps
        and exists so tests can demonstrate the resulting key loss.
        """
        bucket = hash_key(key, self.bucket_count)
        stripe = self._stripe(bucket)
        lock = self._locks[stripe]
        pos = self._find(key)
        if pos is not None:
            return pos
        if not lock.acquire(blocking=False):
            return None
        try:
            pos, tail = self._scan_chain(key, bucket)
            if pos is not None:
                return pos
            if not self._occ[bucket]:
                self._version[stripe] += 1
                self._keys[bucket] = key
                self._occ[bucket] = 1
                self._version[stripe] += 1
                return bucket
            new = self.free_stack.pop()
            if new is None:
                return None
            self._version[stripe] += 1
            self._keys[new] = key
            self._next[new] = 0
            self._occ[new] = 1
            self._next[tail] = new
            self._version[stripe] += 1
            return new
        finally:
            lock.release()

    def remove(self, key: BlockKey) -> bool:
        """Remove key; True if it was present.  Loops like insertion."""
        bucket = hash_key(key, self.bucket_count)
        stripe = self._stripe(bucket)
        lock = self._locks[stripe]
        version = self._version
        while True:
            if self._find(key) is None:
                return False
            if not lock.acquire(blocking=False):
                continue
            try:
                occ = self._occ
                keys = self._keys
                nxt = self._next
                if occ[bucket] and keys[bucket] == key:
                    # Bucket case: clear occupancy only; the bucket's offset
                    # and all downstream links stay intact (the invariant).
                    version[stripe] += 1
                    occ[bucket] = 0
                    keys[bucket] = None
                    if self._values is not None:
                        self._values[bucket] = None
                    version[stripe] += 1
                    return True
                prev = bucket
                e = nxt[bucket]
                while e:
                    if occ[e] and keys[e] == key:
                        version[stripe] += 1
                        nxt[prev] = nxt[e]  # link past the victim
                        occ[e] = 0
                        keys[e] = None
                        if self._values is not None:
                            self._values[e] = None
                        # nxt[e] intentionally NOT reset: readers paused on
                        # the victim must still reach the chain tail.
                        version[stripe] += 1
                        self.free_stack.push(e)
                        return True
                    prev = e
                    e = nxt[e]
                # Key vanished between the find and the lock; re-check.
            finally:
                lock.release()

    def __contains__(self, key: BlockKey) -> bool:
        return self._find(key) is not None

    def snapshot_keys(self) -> list[BlockKey]:
        """All keys stably present; concurrent churn may or may not appear."""
        out = []
        keys = self._keys
        # copy first: nonzero on a concurrently mutating array is not safe
        for e in np.flatnonzero(self._occ.copy()):
            k = keys[e]
            if k is not None:
                out.append(k)
        return out

    def approx_size(self) -> int:
        """Occupancy count; exact at quiescence, approximate under churn."""
        return int(self._occ.sum())

    def clear(self) -> None:
        """Quiescent-only bulk reset (no concurrent ops allowed)."""
        self._keys = [None] * self.capacity
        self._occ[:] = 0
        self._next = [0] * self.capacity
        if self._values is not None:
            self._values = [None] * self.capacity
        self.free_stack = FreeListStack(range(self.bucket_count, self.capacity))

    # -- introspection used by tests and the consistency checker -----------

    def chain_entries(self, bucket: int) -> list[int]:
        """Entry indices reachable from a bucket, the bucket itself first."""
        out = [bucket]
        e = self._next[bucket]
        while e:
            out.append(e)
            e = self._next[e]
        return out

    def reachable_excess(self) -> set[int]:
        """Excess indices linked from any bucket (occupied or not)."""
        out: set[int] = set()
        for b in range(self.bucket_count):
            e = self._next[b]
            while e:
                if e in out:
                    break  # stale-offset cycle through freed entries
                out.add(e)
                e = self._next[e]
        return out


class BlockHashSet(_HashCore):
    """Concurrent hash set of block keys; the streaming-state structure."""

    def __init__(
        self,
        bucket_count: int = 1 << 20,
        excess_capacity: int = 1 << 20,
        *,
        lock_stripes: int = 1024,
    ) -> None:
        super().__init__(bucket_count, excess_capacity, store_values=False,
                         lock_stripes=lock_stripes)

    def insert(self, key: BlockKey) -> bool:
        """Add key; True if it was newly inserted (duplicates collapse)."""
        _, created = self._insert_pos(key)
        return created

    def extract_batch(self, max_n: int) -> list[BlockKey]:
        """Remove and return up to max_n keys.

        Scans occupied entries starting at a rotating random offset (the
        cheap stand-in for a random subset) and claims each candidate via
        an atomic remove, so concurrent extractors never return the same
        key twice.
        """
        return self._extract(max_n, None)

    def extract_matching(
        self, max_n: int, predicate: Callable[[BlockKey], bool]
    ) -> list[BlockKey]:
        """Like extract_batch, but only removes keys satisfying predicate."""
        return self._extract(max_n, predicate)

    def _extract(
        self, max_n: int, predicate: Optional[Callable[[BlockKey], bool]]
    ) -> list[BlockKey]:
        if max_n <= 0:
            return []
        candidates = np.flatnonzero(self._occ.copy())
        if candidates.size == 0:
            return []
        start = random.randrange(self.capacity)
        split = int(np.searchsorted(candidates, start))
        out: list[BlockKey] = []
        keys = self._keys
        for e in np.concatenate((candidates[split:], candidates[:split])):
            if len(out) >= max_n:
                break
            k = keys[e]
            if k is None or (predicate is not None and not predicate(k)):
                continue
            if self.remove(k):
                out.append(k)
        return out


class BlockHashMap(_HashCore):
    """Concurrent hash map from block key to an arbitrary payload object."""

    def __init__(
        self,
        bucket_count: int = 1 << 20,
        excess_capacity: int = 1 << 20,
        *,
        lock_stripes: int = 1024,
    ) -> None:
        super().__init__(bucket_count, excess_capacity, store_values=True,
                         lock_stripes=lock_stripes)

    def insert(self, key: BlockKey, value: Any) -> int:
        """Insert key with value if absent; existing payloads are kept.

        Returns the entry position either way so the caller can merge into
        an existing payload in place.
        """
        pos, _ = self._insert_pos(key, lambda: value)
        return pos

    def put(self, key: BlockKey, value: Any) -> int:
        """Upsert: store value for key, overwriting any existing payload.

        The overwrite revalidates the entry under the chain lock so a
        concurrent remove/reuse of the slot cannot corrupt another key's
        payload.
        """
        while True:
            pos, created = self._insert_pos(key, lambda: value)
            if created:
                return pos
            bucket = hash_key(key, self.bucket_count)
            lock = self._locks[self._stripe(bucket)]
            if not lock.acquire(blocking=False):
                continue
            try:
                if self._occ[pos] and self._keys[pos] == key:
                    self._values[pos] = value
                    return pos
            finally:
                lock.release()

    def get(self, key: BlockKey, default: Any = None) -> Any:
        bucket = hash_key(key, self.bucket_count)
        stripe = self._stripe(bucket)
        version = self._version
        while True:
            v0 = version[stripe]
            if v0 & 1:
                continue
            pos, _ = self._scan_chain(key, bucket)
            value = default if pos is None else self._values[pos]
            if version[stripe] == v0:
                return value

    def get_or_create(self, key: BlockKey, factory: Callable[[], Any]) -> tuple[Any, bool]:
        """Value for key, creating it via factory if absent.

        Returns (value, created).  Exactly one concurrent caller creates;
        the others receive that caller's fully built value (or None if the
        key was concurrently removed again).
        """
        made: list[Any] = []

        def build() -> Any:
            made.append(factory())
            return made[0]

        _, created = self._insert_pos(key, build)
        if created:
            return made[0], True
        return self.get(key), False

    def value_at(self, pos: int) -> Any:
        return self._values[pos]

    def snapshot_items(self) -> list[tuple[BlockKey, Any]]:
        out = []
        keys = self._keys
        values = self._values
        for e in np.flatnonzero(self._occ.copy()):
            k = keys[e]
            if k is not None:
                out.append((k, values[e]))
        return out
