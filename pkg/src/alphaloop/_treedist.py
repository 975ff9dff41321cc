"""Ordered tree edit distance with unit costs (Zhang and Shasha's keyroot
dynamic program)."""

from __future__ import annotations

from typing import Callable, Generic, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


class AnnotatedTree(Generic[T]):
    """Post-order numbering of a tree with leftmost-leaf descendants and keyroots."""

    def __init__(
        self,
        root: T,
        get_children: Callable[[T], Sequence[T]],
        get_label: Callable[[T], str],
    ) -> None:
        self.labels: list[str] = []
        self.lmds: list[int] = []

        def visit(node: T) -> int:
            children = get_children(node)
            leftmost = -1
            for position, child in enumerate(children):
                child_lmd = visit(child)
                if position == 0:
                    leftmost = child_lmd
            index = len(self.labels)
            self.labels.append(get_label(node))
            self.lmds.append(index if leftmost < 0 else leftmost)
            return self.lmds[index]

        visit(root)

        # A keyroot is the highest node sharing its leftmost leaf.
        highest: dict[int, int] = {}
        for index, lmd in enumerate(self.lmds):
            highest[lmd] = index
        self.keyroots = sorted(highest.values())

    def __len__(self) -> int:
        return len(self.labels)


def tree_distance(
    a: T,
    b: T,
    get_children: Callable[[T], Sequence[T]],
    get_label: Callable[[T], str],
) -> int:
    """Minimum number of node insertions, deletions and relabels turning
    ``a`` into ``b``."""
    left = AnnotatedTree(a, get_children, get_label)
    right = AnnotatedTree(b, get_children, get_label)
    treedists = np.zeros((len(left), len(right)), dtype=np.int64)

    for i in left.keyroots:
        for j in right.keyroots:
            _forest_distance(left, right, i, j, treedists)

    return int(treedists[-1, -1])


def _forest_distance(
    left: AnnotatedTree[T],
    right: AnnotatedTree[T],
    i: int,
    j: int,
    treedists: np.ndarray,
) -> None:
    li = left.lmds[i]
    lj = right.lmds[j]
    m = i - li + 2
    n = j - lj + 2
    fd = np.zeros((m, n), dtype=np.int64)
    ioff = li - 1
    joff = lj - 1

    for x in range(1, m):
        fd[x, 0] = fd[x - 1, 0] + 1
    for y in range(1, n):
        fd[0, y] = fd[0, y - 1] + 1

    for x in range(1, m):
        for y in range(1, n):
            xi = x + ioff
            yj = y + joff
            if left.lmds[xi] == li and right.lmds[yj] == lj:
                relabel = 0 if left.labels[xi] == right.labels[yj] else 1
                fd[x, y] = min(
                    fd[x - 1, y] + 1,
                    fd[x, y - 1] + 1,
                    fd[x - 1, y - 1] + relabel,
                )
                treedists[xi, yj] = fd[x, y]
            else:
                p = left.lmds[xi] - 1 - ioff
                q = right.lmds[yj] - 1 - joff
                fd[x, y] = min(
                    fd[x - 1, y] + 1,
                    fd[x, y - 1] + 1,
                    fd[p, q] + treedists[xi, yj],
                )
