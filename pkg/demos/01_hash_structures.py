#!/usr/bin/env python3
"""Tour of the concurrent block-key hash map and set.

These structures back everything in the pipeline: the reconstruction
model, the server's global models, and every per-client pending set.
Insert/remove/retrieve are guaranteed to succeed under full concurrency,
and a full scan never sees a key twice.
"""

import threading
import time

from voxelstream import BlockHashMap, BlockHashSet, hash_key

# the spatial hash: wrapping 32-bit products, xor, modulo bucket count
print("hash of block (1,2,3) into 2^20 buckets:", hash_key((1, 2, 3), 1 << 20))
print("negative coordinates wrap:", hash_key((-1, 0, 0), 1 << 20))

# map usage: insert keeps existing payloads, put overwrites
grid = BlockHashMap(bucket_count=1 << 12, excess_capacity=1 << 12)
grid.insert((0, 0, 0), "first")
grid.insert((0, 0, 0), "second")  # no effect: the key already exists
print("\ninsert keeps the first payload:", grid.get((0, 0, 0)))
grid.put((0, 0, 0), "second")
print("put overwrites:", grid.get((0, 0, 0)))

# set usage with concurrent writers on overlapping keys
pending = BlockHashSet(bucket_count=1 << 12, excess_capacity=1 << 12)


def writer(tid: int) -> None:
    for i in range(20000):
        key = (i % 500, tid % 2, 0)  # threads deliberately share keys
        if i % 3 == 2:
            pending.remove(key)
        else:
            pending.insert(key)


threads = [threading.Thread(target=writer, args=(t,)) for t in range(8)]
t0 = time.perf_counter()
for t in threads:
    t.start()
for t in threads:
    t.join()
elapsed = time.perf_counter() - t0
keys = pending.snapshot_keys()
print(f"\n160k mixed ops from 8 threads in {elapsed:.2f}s")
print(f"final size {len(keys)}, duplicates: {len(keys) - len(set(keys))}")

# extraction removes and returns a bounded batch; concurrent extractors
# never receive the same key
batch = pending.extract_batch(64)
print(f"extracted {len(batch)} keys, {pending.approx_size()} remain")

only_positive = pending.extract_matching(1 << 30, lambda k: k[0] >= 250)
print(f"extracted {len(only_positive)} keys with x >= 250, "
      f"{pending.approx_size()} remain")
