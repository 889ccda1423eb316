"""Multiply-accumulate instrumentation for the compute kernels.

Counts are kept per scope name plus a running total. The counter is a
per-run accumulator; concurrent kernels would have to merge counts
associatively, which plain integer addition satisfies.
"""

from contextlib import contextmanager


class MacCounter:
    def __init__(self):
        self.enabled = False
        self.totals = {}
        self._scopes = []
        self._ever_enabled = False

    def add(self, macs):
        if not self.enabled:
            return
        macs = int(macs)
        self.totals["total"] = self.totals.get("total", 0) + macs
        for name in self._scopes:
            self.totals[name] = self.totals.get(name, 0) + macs

    def reset(self):
        self.totals = {}

    def read(self, scope="total"):
        return self.totals.get(scope, 0)


MAC_COUNTER = MacCounter()


@contextmanager
def mac_counting(reset=True):
    """Enable MAC counting for the duration of the block; yields the counter."""
    if reset:
        MAC_COUNTER.reset()
    prev = MAC_COUNTER.enabled
    MAC_COUNTER.enabled = True
    MAC_COUNTER._ever_enabled = True
    try:
        yield MAC_COUNTER
    finally:
        MAC_COUNTER.enabled = prev


@contextmanager
def mac_scope(name):
    """Attribute counted MACs to `name` (nests; totals still accumulate)."""
    MAC_COUNTER._scopes.append(name)
    try:
        yield
    finally:
        MAC_COUNTER._scopes.pop()
