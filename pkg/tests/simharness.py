"""Deterministic virtual-time driver for scheduler behavior tests.

Workers are plain records with a speed; a lease costs unit.size / speed
(plus a fixed per-lease overhead).  Events are processed on a heap keyed by
finish time with worker id as the tie break, so runs are fully
reproducible and independent of wall-clock noise.
"""

import heapq
from dataclasses import dataclass


@dataclass
class SimWorker:
    wid: int
    wclass: str
    speed: float            # elements per virtual second
    overhead: float = 0.0   # fixed virtual seconds per lease


def simulate(sched, workers, budget):
    """Drive acquire/release in virtual time until `budget` or termination.

    Returns the virtual time of the last completed release.
    """
    now = 0.0
    heap = []
    idle = []

    def seat(worker, t):
        lease = sched.acquire(worker.wid, worker.wclass, blocking=False)
        if lease is None:
            idle.append(worker)
        else:
            cost = lease.unit.size / worker.speed + worker.overhead
            heapq.heappush(heap, (t + cost, worker.wid, worker, lease))

    for worker in workers:
        seat(worker, now)
    while heap:
        t, _, worker, lease = heapq.heappop(heap)
        if t > budget:
            break
        now = t
        successor = sched.release(lease, lease.unit.size)
        # wake everyone who was blocked, in deterministic id order
        waiting, idle[:] = sorted(idle, key=lambda w: w.wid), []
        for blocked in waiting:
            seat(blocked, now)
        if successor is not None:
            cost = successor.unit.size / worker.speed + worker.overhead
            heapq.heappush(heap, (now + cost, worker.wid, worker, successor))
        else:
            seat(worker, now)
    return now
