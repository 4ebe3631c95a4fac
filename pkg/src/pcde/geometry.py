"""Hyperrectangle partitions of the unit cube.

Five partition collections are supported:

* ``UDP`` uniform dyadic partitions (every cell split into ``2**d`` cubes, to a
  common depth),
* ``RDP`` recursive dyadic partitions (a cube of volume ``>= 2**d / n`` may be
  split into ``2**d`` cubes),
* ``RDSP`` recursive dyadic split partitions (a cell of volume ``>= 2 / n`` may
  be halved along any axis),
* ``RSP`` recursive split partitions (a cell of volume ``>= 2 / n`` may be cut
  along any axis at a point of the grid ``(1/n) Z``, both children keeping a
  volume ``>= 1 / n``),
* ``HRP`` arbitrary hyperrectangle tilings with corners on ``(1/n) Z^d``.

Cells are half-open: a cell owns its lower faces, and the upper boundary of the
root belongs to the last cell touching it.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ContractError, DomainError, ResourceBudgetError

LN2 = math.log(2.0)
_VOL_RTOL = 1e-12


class CollectionKind(str, enum.Enum):
    UDP = "UDP"
    RDP = "RDP"
    RDSP = "RDSP"
    RSP = "RSP"
    HRP = "HRP"

    @classmethod
    def parse(cls, value) -> "CollectionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown partition collection {value!r}") from None


@dataclass(frozen=True)
class Hyperrectangle:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must be nonempty and of equal length")
        if any(not a < b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate hyperrectangle {lo} x {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, d: int) -> "Hyperrectangle":
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def key(self) -> tuple:
        return (self.lower, self.upper)

    def contains(self, x, closed_upper: Sequence[bool] | None = None) -> bool:
        """Half-open membership test.

        ``closed_upper[j]`` makes the upper face on axis ``j`` part of the cell;
        it is set for faces lying on the root's upper boundary.
        """
        x = np.asarray(x, dtype=float)
        if closed_upper is None:
            closed_upper = (False,) * self.dim
        for j in range(self.dim):
            if x[j] < self.lower[j]:
                return False
            if x[j] > self.upper[j] or (x[j] == self.upper[j] and not closed_upper[j]):
                return False
        return True

    def contains_many(self, X: np.ndarray, closed_upper: Sequence[bool] | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        mask = np.all(X >= lo, axis=1)
        below = X < hi
        if closed_upper is not None:
            below |= (X == hi) & np.asarray(closed_upper, dtype=bool)
        return mask & np.all(below, axis=1)

    def dyadic_children(self) -> tuple:
        """The ``2**d`` congruent sub-cells, child ``i`` upper on axis ``j`` iff bit ``j`` of ``i`` is set."""
        mid = tuple((a + b) / 2.0 for a, b in zip(self.lower, self.upper))
        out = []
        for idx in range(2 ** self.dim):
            lo, hi = [], []
            for j in range(self.dim):
                if (idx >> j) & 1:
                    lo.append(mid[j])
                    hi.append(self.upper[j])
                else:
                    lo.append(self.lower[j])
                    hi.append(mid[j])
            out.append(Hyperrectangle(tuple(lo), tuple(hi)))
        return tuple(out)

    def axis_children(self, axis: int, position: float) -> tuple:
        if not self.lower[axis] < position < self.upper[axis]:
            raise ValueError(f"split position {position} outside cell on axis {axis}")
        left_hi = list(self.upper)
        left_hi[axis] = position
        right_lo = list(self.lower)
        right_lo[axis] = position
        return (
            Hyperrectangle(self.lower, tuple(left_hi)),
            Hyperrectangle(tuple(right_lo), self.upper),
        )


@dataclass(frozen=True)
class Split:
    """Split descriptor of an internal node.

    ``kind`` is ``"dyadic"`` (full ``2**d`` split), ``"axis"`` (two children
    separated at ``position`` on ``axis``) or ``"flat"`` (HRP: the children are
    an arbitrary tiling of the node's cell).
    """

    kind: str
    axis: int | None = None
    position: float | None = None

    def children(self, cell: Hyperrectangle) -> tuple:
        if self.kind == "dyadic":
            return cell.dyadic_children()
        if self.kind == "axis":
            return cell.axis_children(self.axis, self.position)
        raise ValueError("flat splits carry their children explicitly")


@dataclass(frozen=True)
class Node:
    cell: Hyperrectangle
    split: Split | None = None
    children: tuple = ()

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def leaves(self) -> Iterator[Hyperrectangle]:
        if self.is_leaf:
            yield self.cell
        else:
            for child in self.children:
                yield from child.leaves()

    @property
    def n_leaves(self) -> int:
        if self.is_leaf:
            return 1
        return sum(c.n_leaves for c in self.children)

    def signature(self) -> str:
        """Compact, deterministic text form used as a model identifier."""
        if self.is_leaf:
            return "L"
        inner = ",".join(c.signature() for c in self.children)
        if self.split.kind == "dyadic":
            return f"D({inner})"
        if self.split.kind == "axis":
            return f"S{self.split.axis}@{self.split.position:.12g}({inner})"
        cells = ";".join(
            "[" + ",".join(f"{a:.12g}" for a in c.cell.lower) + "|"
            + ",".join(f"{b:.12g}" for b in c.cell.upper) + "]"
            for c in self.children
        )
        return f"F({cells})"


def make_node(cell: Hyperrectangle, split: Split | None = None, children=None) -> Node:
    """Build a node, creating leaf children from the split if none are given."""
    if split is None:
        return Node(cell)
    if children is None:
        children = tuple(Node(c) for c in split.children(cell))
    return Node(cell, split, tuple(children))


@dataclass(frozen=True)
class PartitionTree:
    kind: CollectionKind
    root: Node
    n: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CollectionKind.parse(self.kind))
        if int(self.n) < 1:
            raise ValueError("sample size n must be positive")
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def trivial(cls, kind, n: int, d: int) -> "PartitionTree":
        return cls(kind, Node(Hyperrectangle.unit(d)), n)

    @classmethod
    def uniform(cls, n: int, d: int, depth: int, kind=CollectionKind.UDP) -> "PartitionTree":
        """Uniform dyadic tree of the given depth (``2**(d*depth)`` leaves)."""
        return cls(kind, _uniform_node(Hyperrectangle.unit(d), depth), n)

    @classmethod
    def from_cells(cls, cells: Sequence[Hyperrectangle], n: int) -> "PartitionTree":
        """Flat HRP partition from an explicit list of cells tiling the unit cube."""
        cells = list(cells)
        d = cells[0].dim
        root = Hyperrectangle.unit(d)
        total = sum(c.volume for c in cells)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("cells do not tile the unit cube")
        if len(cells) == 1:
            return cls(CollectionKind.HRP, Node(root), n)
        return cls(CollectionKind.HRP, Node(root, Split("flat"), tuple(Node(c) for c in cells)), n)

    @property
    def dim(self) -> int:
        return self.root.cell.dim

    @cached_property
    def leaves(self) -> tuple:
        """Leaf cells in depth-first order; the index of a cell is its leaf id."""
        return tuple(self.root.leaves())

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @cached_property
    def signature(self) -> str:
        return self.root.signature()

    def _closed_upper(self, cell: Hyperrectangle) -> tuple:
        return tuple(u == r for u, r in zip(cell.upper, self.root.cell.upper))

    def leaf_of(self, x) -> int:
        """Leaf id of the cell containing ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        root = self.root.cell
        if x.shape[0] != root.dim or not root.contains(x, (True,) * root.dim):
            raise DomainError(f"point {x.tolist()} outside the root cell")
        node, offset = self.root, 0
        while not node.is_leaf:
            if node.split.kind == "flat":
                for i, child in enumerate(node.children):
                    if child.cell.contains(x, self._closed_upper(child.cell)):
                        return offset + i
                raise DomainError("flat partition does not cover the point")
            if node.split.kind == "dyadic":
                mid = [(a + b) / 2.0 for a, b in zip(node.cell.lower, node.cell.upper)]
                idx = sum(1 << j for j in range(len(mid)) if x[j] >= mid[j])
            else:
                idx = int(x[node.split.axis] >= node.split.position)
            for child in node.children[:idx]:
                offset += child.n_leaves
            node = node.children[idx]
        return offset

    def leaf_index(self, X) -> np.ndarray:
        """Vectorised :meth:`leaf_of` for an ``(m, d)`` array."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        root = self.root.cell
        if X.shape[1] != root.dim:
            raise DomainError("dimension mismatch between points and partition")
        inside = root.contains_many(X, (True,) * root.dim)
        if not np.all(inside):
            bad = X[~inside][0]
            raise DomainError(f"point {bad.tolist()} outside the root cell")
        out = np.empty(X.shape[0], dtype=np.int64)
        self._descend(self.root, X, np.arange(X.shape[0]), 0, out)
        return out

    def _descend(self, node, X, rows, offset, out):
        if node.is_leaf:
            out[rows] = offset
            return
        if node.split.kind == "flat":
            for i, child in enumerate(node.children):
                m = child.cell.contains_many(X[rows], self._closed_upper(child.cell))
                out[rows[m]] = offset + i
            return
        pts = X[rows]
        if node.split.kind == "dyadic":
            mid = (np.asarray(node.cell.lower) + np.asarray(node.cell.upper)) / 2.0
            code = ((pts >= mid) * (1 << np.arange(len(mid)))).sum(axis=1)
        else:
            code = (pts[:, node.split.axis] >= node.split.position).astype(int)
        for i, child in enumerate(node.children):
            sel = rows[code == i]
            if sel.size:
                self._descend(child, X, sel, offset, out)
            offset += child.n_leaves


def _uniform_node(cell: Hyperrectangle, depth: int) -> Node:
    if depth == 0:
        return Node(cell)
    return Node(cell, Split("dyadic"), tuple(_uniform_node(c, depth - 1) for c in cell.dyadic_children()))


# ---------------------------------------------------------------------------
# Growth rules
# ---------------------------------------------------------------------------

def udp_max_depth(n: int, d: int) -> int:
    """Largest J with 2**(d*J) <= n: the uniform recursion stops once cells reach volume 1/n."""
    J = 0
    while 2 ** (d * (J + 1)) <= n:
        J += 1
    return J


def _at_least(volume: float, threshold: float) -> bool:
    return volume >= threshold * (1.0 - _VOL_RTOL)


def _grid_index(v: float, n: int, up: bool) -> int:
    t = v * n
    r = round(t)
    if abs(t - r) < 1e-9:
        return int(r)
    return math.ceil(t) if up else math.floor(t)


def split_options(cell: Hyperrectangle, kind, n: int) -> list:
    """Every split allowed for ``cell`` by the growth rule of ``kind``.

    UDP cells have no individual split option (the whole partition is refined
    at once) and HRP has no tree structure; both return an empty list.
    """
    kind = CollectionKind.parse(kind)
    d = cell.dim
    vol = cell.volume
    if kind is CollectionKind.RDP:
        return [Split("dyadic")] if _at_least(vol, 2 ** d / n) else []
    if kind is CollectionKind.RDSP:
        if not _at_least(vol, 2.0 / n):
            return []
        return [Split("axis", j, (cell.lower[j] + cell.upper[j]) / 2.0) for j in range(d)]
    if kind is CollectionKind.RSP:
        if not _at_least(vol, 2.0 / n):
            return []
        out = []
        for j in range(d):
            lo, hi = cell.lower[j], cell.upper[j]
            k0 = _grid_index(lo, n, up=True)
            k1 = _grid_index(hi, n, up=False)
            width = hi - lo
            for k in range(k0 + 1, k1 + 1):
                pos = k / n
                if not lo < pos < hi:
                    continue
                if _at_least(vol * (pos - lo) / width, 1.0 / n) and _at_least(vol * (hi - pos) / width, 1.0 / n):
                    out.append(Split("axis", j, pos))
        return out
    return []


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------

class _Budget:
    def __init__(self, max_count):
        self.max_count = max_count
        self.count = 0

    def tick(self):
        self.count += 1
        if self.max_count is not None and self.count > self.max_count:
            raise ResourceBudgetError(f"enumeration exceeded the budget of {self.max_count} partitions")


def _subtrees(cell, kind, n, budget):
    """Yield ``(node, n_leaves)`` for every subtree rooted at ``cell`` with at most ``budget`` leaves."""
    yield Node(cell), 1
    if budget < 2:
        return
    for split in split_options(cell, kind, n):
        kids = split.children(cell)
        if len(kids) > budget:
            continue
        for combo, count in _combine(kids, kind, n, budget):
            yield Node(cell, split, combo), count


def _combine(kids, kind, n, budget):
    if not kids:
        yield (), 0
        return
    first, rest = kids[0], kids[1:]
    for node, c in _subtrees(first, kind, n, budget - len(rest)):
        for nodes, cs in _combine(rest, kind, n, budget - c):
            yield (node,) + nodes, c + cs


def _hrp_tilings(n: int, d: int, max_leaves: int):
    shape = (n,) * d
    free = np.ones(shape, dtype=bool)
    min_cells = n ** (d - 1)  # volume >= 1/n, in grid-cell units of 1/n**d
    order = list(itertools.product(range(n), repeat=d))

    def boxes_from(corner):
        ranges = [range(c + 1, n + 1) for c in corner]
        for ext in itertools.product(*ranges):
            size = int(np.prod([e - c for e, c in zip(ext, corner)]))
            if size < min_cells:
                continue
            sl = tuple(slice(c, e) for c, e in zip(corner, ext))
            if free[sl].all():
                yield sl, ext

    def rec(start, cells):
        idx = start
        while idx < len(order) and not free[order[idx]]:
            idx += 1
        if idx == len(order):
            yield list(cells)
            return
        if len(cells) >= max_leaves:
            return
        corner = order[idx]
        for sl, ext in list(boxes_from(corner)):
            free[sl] = False
            cells.append(Hyperrectangle(tuple(c / n for c in corner), tuple(e / n for e in ext)))
            yield from rec(idx, cells)
            cells.pop()
            free[sl] = True

    yield from rec(0, [])


def enumerate_partitions(kind, n: int, d: int, max_leaves: int | None = None,
                         max_count: int | None = 1_000_000) -> Iterator[PartitionTree]:
    """Yield every partition of ``kind`` with at most ``max_leaves`` leaves, each once.

    Partitions reachable through several split orders (possible for RDSP and
    RSP) are reported once, under the first tree found. Raises
    :class:`ResourceBudgetError` after ``max_count`` partitions.
    """
    kind = CollectionKind.parse(kind)
    n, d = int(n), int(d)
    budget = _Budget(max_count)
    cap = max_leaves if max_leaves is not None else math.inf
    if kind is CollectionKind.UDP:
        for J in range(udp_max_depth(n, d) + 1):
            if 2 ** (d * J) > cap:
                break
            budget.tick()
            yield PartitionTree.uniform(n, d, J)
        return
    if kind is CollectionKind.HRP:
        if max_leaves is None or max_leaves > 4 or n > 8:
            raise ResourceBudgetError("HRP enumeration is limited to max_leaves <= 4 and n <= 8")
        for cells in _hrp_tilings(n, d, max_leaves):
            budget.tick()
            yield PartitionTree.from_cells(cells, n)
        return
    if max_leaves is None:
        # every admissible cell has volume >= 1/n, hence at most n leaves
        cap = n
    seen = set() if kind in (CollectionKind.RDSP, CollectionKind.RSP) else None
    for node, _ in _subtrees(Hyperrectangle.unit(d), kind, n, int(cap)):
        if seen is not None:
            key = frozenset(c.key for c in node.leaves())
            if key in seen:
                continue
            seen.add(key)
        budget.tick()
        yield PartitionTree(kind, node, n)


# ---------------------------------------------------------------------------
# Kraft coding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CodingConstants:
    A0: float
    B0: float
    c0: float
    Sigma0: float


def ceil_ln2(x: float) -> float:
    """Smallest multiple of ln 2 that is >= x (with a 1e-12 guard against misrounding)."""
    return LN2 * math.ceil(x / LN2 - 1e-12)


def coding_constants(kind, n: int, d: int) -> CodingConstants:
    kind = CollectionKind.parse(kind)
    ln_n = math.log(n)
    if kind is CollectionKind.UDP:
        levels = 1.0 + ln_n / (d * LN2)
        return CodingConstants(math.log(max(2.0, levels)), 0.0, 0.0, levels)
    if kind is CollectionKind.RDP:
        return CodingConstants(0.0, LN2, 2 ** d / (2 ** d - 1), 2.0)
    if kind is CollectionKind.RDSP:
        return CodingConstants(0.0, ceil_ln2(math.log(1 + d)), 2.0, 2.0 * (1 + d))
    if kind is CollectionKind.RSP:
        return CodingConstants(0.0, ceil_ln2(math.log(1 + d)) + ceil_ln2(ln_n), 2.0, 4.0 * (1 + d) * n)
    return CodingConstants(0.0, d * ceil_ln2(ln_n), 1.0, float((2 * n) ** d))


def coding_weight(tree: PartitionTree, c: float) -> float:
    """Kraft weight ``c * (A0 + B0 * n_leaves)`` of a partition in its collection."""
    const = coding_constants(tree.kind, tree.n, tree.dim)
    if c < const.c0:
        raise ContractError(f"c={c} is below c0={const.c0} for {tree.kind.value}; Kraft bound not guaranteed")
    return c * (const.A0 + const.B0 * tree.n_leaves)


def kraft_sum(kind, n: int, d: int, c: float, max_leaves: int | None = None,
              max_count: int | None = 1_000_000) -> float:
    """Sum of ``exp(-coding_weight)`` over the (possibly truncated) collection."""
    total = 0.0
    for tree in enumerate_partitions(kind, n, d, max_leaves, max_count=max_count):
        total += math.exp(-coding_weight(tree, c))
    return total


def kraft_tree_sum(kind, n: int, d: int, c: float, max_leaves: int | None = None) -> float:
    """Exact ``sum exp(-coding_weight)`` over split trees, without enumerating them.

    Each cell carries the generating polynomial (in the leaf count) of its
    subtrees, so the cost is polynomial in the number of cells. Trees are
    counted once per split sequence, so for RDSP and RSP the value bounds the
    partition sum of :func:`kraft_sum` from above; for RDP the two agree.
    """
    kind = CollectionKind.parse(kind)
    if kind in (CollectionKind.UDP, CollectionKind.HRP):
        return kraft_sum(kind, n, d, c, max_leaves)
    const = coding_constants(kind, n, d)
    if c < const.c0:
        raise ContractError(f"c={c} is below c0={const.c0} for {kind.value}; Kraft bound not guaranteed")
    cap = n if max_leaves is None else min(int(max_leaves), n)
    leaf = math.exp(-c * const.B0)
    memo = {}

    def gen(cell):
        hit = memo.get(cell.key)
        if hit is not None:
            return hit
        out = np.zeros(cap + 1)
        out[1] = leaf
        for split in split_options(cell, kind, n):
            prod = np.zeros(cap + 1)
            prod[0] = 1.0
            for kid in split.children(cell):
                prod = np.convolve(prod, gen(kid))[:cap + 1]
            out += prod
        memo[cell.key] = out
        return out

    return math.exp(-c * const.A0) * float(gen(Hyperrectangle.unit(d)).sum())
