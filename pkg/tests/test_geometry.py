import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcde.exceptions import ContractError, DomainError, ResourceBudgetError
from pcde.geometry import (
    CollectionKind,
    Hyperrectangle,
    Node,
    PartitionTree,
    Split,
    ceil_ln2,
    coding_constants,
    coding_weight,
    enumerate_partitions,
    kraft_sum,
    kraft_tree_sum,
    split_options,
)

LN2 = math.log(2.0)
TREE_KINDS = ["UDP", "RDP", "RDSP", "RSP"]


def test_hyperrectangle_rejects_degenerate_cells():
    with pytest.raises(ValueError):
        Hyperrectangle((0.2,), (0.2,))
    assert Hyperrectangle((0.0, 0.5), (0.5, 1.0)).volume == 0.25


def test_leaf_of_quadrant():
    tree = PartitionTree.uniform(16, 2, 1, kind="RDP")
    leaf = tree.leaves[tree.leaf_of([0.1, 0.9])]
    assert leaf.lower == (0.0, 0.5) and leaf.upper == (0.5, 1.0)


def test_leaf_of_lower_corner_and_upper_boundary():
    tree = PartitionTree.uniform(64, 2, 2)
    assert tree.leaves[tree.leaf_of([0.0, 0.0])].lower == (0.0, 0.0)
    assert tree.leaves[tree.leaf_of([1.0, 1.0])].upper == (1.0, 1.0)


def test_leaf_of_half_open_rsp_split():
    root = Hyperrectangle.unit(2)
    split = Split("axis", 0, 0.3)
    tree = PartitionTree("RSP", Node(root, split, tuple(Node(c) for c in split.children(root))), 10)
    assert tree.leaf_of([0.3, 0.5]) == 1
    left, right = tree.leaves
    assert not left.contains([0.3, 0.5]) and right.contains([0.3, 0.5])


def test_leaf_of_outside_raises():
    tree = PartitionTree.trivial("RDP", 8, 1)
    with pytest.raises(DomainError):
        tree.leaf_of([1.5])


@pytest.mark.parametrize("kind,n,d", [("RDP", 64, 2), ("RDSP", 32, 2), ("RSP", 8, 1)])
def test_tiling_against_direct_membership(kind, n, d, rng):
    trees = list(enumerate_partitions(kind, n, d, max_leaves=6))
    X = rng.random((10_000, d))
    for tree in trees[:: max(1, len(trees) // 15)]:
        idx = tree.leaf_index(X)
        member = np.column_stack([leaf.contains_many(X, tree._closed_upper(leaf)) for leaf in tree.leaves])
        assert np.all(member.sum(axis=1) == 1)
        assert np.array_equal(np.argmax(member, axis=1), idx)
        assert all(tree.leaf_of(x) == i for x, i in zip(X[:50], idx[:50]))


def test_udp_count():
    assert len(list(enumerate_partitions("UDP", 64, 1))) == 7


def test_rdp_small_enumeration_by_brute_force():
    # every binary dyadic tree on [0,1] whose split cells have length >= 2/16, <= 4 leaves
    def count(length, budget):
        # number of trees with leaf count k for k <= budget
        out = {1: 1}
        if length >= 2 / 16 - 1e-12:
            sub = count(length / 2, budget)
            for a, ca in sub.items():
                for b, cb in sub.items():
                    if a + b <= budget:
                        out[a + b] = out.get(a + b, 0) + ca * cb
        return out

    expected = sum(count(1.0, 4).values())
    assert len(list(enumerate_partitions("RDP", 16, 1, max_leaves=4))) == expected == 9


@pytest.mark.parametrize("kind", TREE_KINDS + ["HRP"])
def test_single_leaf_enumeration(kind):
    trees = list(enumerate_partitions(kind, 8, 1, max_leaves=1))
    assert len(trees) == 1 and trees[0].n_leaves == 1


@pytest.mark.parametrize("kind,n,d", [("RDP", 64, 2), ("RDSP", 32, 2), ("RSP", 16, 1), ("UDP", 256, 2), ("HRP", 4, 2)])
def test_enumeration_soundness(kind, n, d):
    seen = set()
    for tree in enumerate_partitions(kind, n, d, max_leaves=4):
        leaves = tree.leaves
        assert abs(sum(c.volume for c in leaves) - 1.0) < 1e-12
        assert all(c.volume >= 1.0 / n - 1e-12 for c in leaves)
        key = frozenset(c.key for c in leaves)
        assert key not in seen
        seen.add(key)
        assert tree.n_leaves <= 4


def test_hrp_is_gated():
    with pytest.raises(ResourceBudgetError):
        list(enumerate_partitions("HRP", 16, 1, max_leaves=4))


def test_enumeration_budget():
    with pytest.raises(ResourceBudgetError):
        list(enumerate_partitions("RSP", 32, 1, max_leaves=8, max_count=10))


def test_rsp_split_positions_keep_children_large():
    cell = Hyperrectangle((0.0,), (0.25,))
    pos = [s.position for s in split_options(cell, "RSP", 8)]
    assert pos == [0.125]


def test_ceil_ln2():
    assert ceil_ln2(LN2) == pytest.approx(LN2)
    assert ceil_ln2(math.log(3)) == pytest.approx(2 * LN2)
    assert ceil_ln2(math.log(16)) == pytest.approx(4 * LN2)
    assert ceil_ln2(0.0) == 0.0


def test_coding_weight_examples():
    udp = PartitionTree.uniform(64, 1, 3)
    assert coding_weight(udp, 1.0) == pytest.approx(math.log(7))
    rdp = PartitionTree.uniform(64, 1, 2, kind="RDP")
    assert coding_weight(rdp, 2.0) == pytest.approx(8 * LN2)
    root = Hyperrectangle.unit(2)
    split = Split("axis", 0, 0.5)
    rsp = PartitionTree("RSP", Node(root, split, tuple(Node(c) for c in split.children(root))), 16)
    assert coding_weight(rsp, 2.0) == pytest.approx(2 * 2 * (2 * LN2 + 4 * LN2))


def test_coding_weight_below_c0():
    with pytest.raises(ContractError):
        coding_weight(PartitionTree.trivial("RDP", 16, 1), 1.0)


def test_kraft_examples():
    assert kraft_sum("UDP", 64, 1, 1.0) == pytest.approx(1.0)
    assert kraft_sum("RDP", 16, 1, 2.0, max_leaves=8) <= 1.0
    c = coding_constants("RDP", 16, 1)
    assert kraft_sum("RDP", 16, 1, 2.0, max_leaves=1) == pytest.approx(math.exp(-2.0 * (c.A0 + c.B0)))


def test_kraft_truncation_is_monotone():
    vals = [kraft_sum("RDSP", 16, 2, 2.0, max_leaves=k) for k in (1, 2, 3, 4)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=2))
def test_leaf_of_is_total_on_the_cube(x):
    tree = PartitionTree.uniform(64, 2, 2)
    leaf = tree.leaves[tree.leaf_of(x)]
    assert leaf.contains(x, tree._closed_upper(leaf))


def test_collection_kind_parse():
    assert CollectionKind.parse("rdp") is CollectionKind.RDP
    with pytest.raises(ValueError):
        CollectionKind.parse("XYZ")


@pytest.mark.parametrize("kind,d,cap", [("RDP", 1, 5), ("RDP", 2, 7), ("RDSP", 1, 4)])
def test_kraft_tree_sum_matches_enumeration(kind, d, cap):
    c = max(coding_constants(kind, 16, d).c0, 2 * math.log(2))
    assert kraft_tree_sum(kind, 16, d, c, cap) == pytest.approx(kraft_sum(kind, 16, d, c, cap), rel=1e-12)


def test_kraft_tree_sum_bounds_rsp_partitions():
    c = 2.0
    assert kraft_sum("RSP", 8, 2, c, 3) <= kraft_tree_sum("RSP", 8, 2, c, 3) + 1e-15
    # distinct split orders reach the same RDSP partition in 2-D
    assert kraft_sum("RDSP", 16, 2, c, 4) < kraft_tree_sum("RDSP", 16, 2, c, 4)
    with pytest.raises(ContractError):
        kraft_tree_sum("RDSP", 16, 1, 1.0)
