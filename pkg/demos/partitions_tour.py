#!/usr/bin/env python3
"""
A short tour of the partition space the grouping search walks through.

Counts partitions, draws uniform samples, and applies single-task moves.
"""

from collections import Counter

import numpy as np

from tgopt.partitions import Partition, bell_number, enumerate_partitions, mutate_groups, sample_uniform_partition

# how fast the space grows
for n in (3, 4, 12, 29, 42):
    print(f"{n:3d} tasks -> {bell_number(n)} partitions")

# uniform draws over the 15 partitions of four tasks
ids = ["a", "b", "c", "d"]
rng = np.random.default_rng(0)
counts = Counter(sample_uniform_partition(ids, rng) for _ in range(30_000))
print("\nfrequency of each partition of 4 tasks (ideal 1/15 = 0.067):")
for p in enumerate_partitions(ids):
    print(f"  {str(p):22s} {counts[p] / 30_000:.3f}")

# one mutation moves exactly one task
p = Partition.from_groups([["a", "b"], ["c"], ["d"]])
print("\nstart:", p)
for _ in range(5):
    p = mutate_groups(p, ids, rng)
    print("  ->", p)
