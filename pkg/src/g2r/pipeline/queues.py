"""Bounded hand-off queue between the control thread and the consumer."""

from __future__ import annotations

import threading
from collections import deque

_CLOSED = object()


class QueueClosed(Exception):
    pass


class ResultQueue:
    """Bounded FIFO. ``drop_oldest`` evicts the oldest item instead of blocking when full."""

    def __init__(self, capacity: int, drop_oldest: bool):
        if capacity < 1:
            raise ValueError("queue capacity must be at least 1")
        self.capacity = capacity
        self.drop_oldest = drop_oldest
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0

    def put(self, item, timeout: float | None = None) -> bool:
        """Returns False if the item could not be queued (closed, or timed out while blocking)."""
        with self._cond:
            if self._closed:
                return False
            if len(self._items) >= self.capacity:
                if self.drop_oldest:
                    self._items.popleft()
                    self.dropped += 1
                elif not self._cond.wait_for(lambda: len(self._items) < self.capacity or self._closed, timeout):
                    return False
                if self._closed:
                    return False
            self._items.append(item)
            self._cond.notify_all()
            return True

    def get(self, timeout: float | None = None):
        """Next item; raises QueueClosed once closed and empty, TimeoutError on timeout."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("queue get timed out")
            if self._items:
                item = self._items.popleft()
                self._cond.notify_all()
                return item
            raise QueueClosed()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._items)
