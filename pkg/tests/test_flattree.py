"""Flat array mirror and compiled kernels: bit-level agreement with the
linked reference implementation."""

import numpy as np
import pytest

from nbsim.morton import DomainBounds
from nbsim.flattree import FlatTree
from nbsim.octree import (
    WORK_PP,
    build,
    compute_moments,
    root_cell,
    serialize,
    traverse_accel,
)
from nbsim.physics import Bodies, direct_accelerations

from test_octree import random_bodies


def built_pair(n=160, seed=17, span=5.0):
    """Linked tree with moments plus its flat mirror (moments via kernel)."""
    bodies = random_bodies(n, seed, span)
    root = build(bodies, DomainBounds(span + 0.5))
    flat = FlatTree.from_cell(root)  # flattened before moments exist
    compute_moments(root)
    flat.compute_moments()
    return bodies, root, flat


class TestLayout:
    def test_preorder_and_children_consistent(self):
        _, root, flat = built_pair()
        # record 0 is the root; every child index is greater than its parent
        assert flat.count[0] == root.count
        for i in range(len(flat)):
            for s in range(8):
                c = flat.children[i, s]
                assert c == -1 or c > i

    def test_to_bytes_equals_linked_serialize(self):
        _, root, flat = built_pair()
        assert flat.to_bytes() == serialize(root)

    def test_from_bytes_equals_from_cell(self):
        _, root, flat = built_pair()
        other = FlatTree.from_bytes(serialize(root))
        np.testing.assert_array_equal(other.centre, flat.centre)
        np.testing.assert_array_equal(other.side, flat.side)
        np.testing.assert_array_equal(other.mass, flat.mass)
        np.testing.assert_array_equal(other.com, flat.com)
        np.testing.assert_array_equal(other.quad, flat.quad)
        np.testing.assert_array_equal(other.count, flat.count)
        np.testing.assert_array_equal(other.children, flat.children)

    def test_bytes_roundtrip(self):
        _, root, flat = built_pair()
        assert FlatTree.from_bytes(flat.to_bytes()).to_bytes() == flat.to_bytes()

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="serialized"):
            FlatTree.from_bytes(b"XXXX" + b"\x00" * 20)


class TestMoments:
    def test_kernel_matches_reference_bitwise(self):
        for seed in (17, 99, 3):
            bodies, root, flat = built_pair(seed=seed)
            # compare via the shared wire format: every mass, com and quad
            # entry must agree to the last bit
            assert flat.to_bytes() == serialize(root)

    def test_empty_and_single(self):
        flat = FlatTree.from_cell(root_cell(DomainBounds(1.0)))
        flat.compute_moments()
        assert flat.mass[0] == 0.0

        b = Bodies.zeros(1)
        b.mass[0] = 2.5
        b.position[0] = (0.1, 0.2, 0.3)
        root = build(b, DomainBounds(1.0))
        flat = FlatTree.from_cell(root)
        flat.compute_moments()
        assert flat.mass[0] == 2.5
        np.testing.assert_array_equal(flat.com[0], b.position[0])


class TestTraversal:
    @pytest.mark.parametrize("theta", [0.0, 0.3, 0.7, 1.2])
    def test_batch_matches_linked_bitwise(self, theta):
        bodies, root, flat = built_pair(n=140, seed=29)
        acc, work = flat.traverse(bodies.position, theta, 0.05)
        for i in range(len(bodies)):
            ref_acc, ref_work = traverse_accel(root, bodies.position[i], theta, 0.05)
            np.testing.assert_array_equal(acc[i], ref_acc)
            assert work[i] == ref_work

    def test_theta_zero_matches_direct(self):
        bodies, _, flat = built_pair(n=128, seed=31)
        acc, work = flat.traverse(bodies.position, 0.0, 0.05)
        ref = direct_accelerations(bodies.mass, bodies.position, 0.05)
        np.testing.assert_allclose(acc, ref, rtol=1e-13, atol=1e-15)
        assert np.all(work == (len(bodies) - 1) * WORK_PP)

    def test_traced_matches_linked_trace(self):
        bodies, root, flat = built_pair(n=90, seed=37)
        for theta in (0.4, 0.9):
            for i in (0, 17, 55):
                ref_trace: list = []
                ref_acc, ref_work = traverse_accel(
                    root, bodies.position[i], theta, 0.05, ref_trace
                )
                acc, work, trace = flat.traverse_traced(bodies.position[i], theta, 0.05)
                np.testing.assert_array_equal(acc, ref_acc)
                assert work == ref_work
                assert trace == ref_trace

    def test_empty_tree(self):
        flat = FlatTree.from_cell(root_cell(DomainBounds(1.0)))
        flat.compute_moments()
        acc, work = flat.traverse(np.zeros((2, 3)), 0.5, 0.0)
        np.testing.assert_array_equal(acc, np.zeros((2, 3)))
        assert np.all(work == 0)

    def test_single_body_tree(self):
        b = Bodies.zeros(1)
        b.mass[0] = 2.0
        b.position[0] = (0.5, 0.0, 0.0)
        root = build(b, DomainBounds(1.0))
        compute_moments(root)
        flat = FlatTree.from_cell(root)
        acc, work = flat.traverse(
            np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]), 0.5, 0.0
        )
        np.testing.assert_array_equal(acc[0], np.zeros(3))
        assert work[0] == 0
        np.testing.assert_allclose(acc[1], [2.0, 0.0, 0.0])
        assert work[1] == WORK_PP

    def test_deep_tree_fits_traversal_stack(self):
        b = Bodies.zeros(2)
        b.mass[:] = 1.0
        b.position[0] = (2.0**-19 + 2.0**-25, 0.0, 0.0)
        b.position[1] = (2.0**-19 - 2.0**-25, 0.0, 0.0)
        root = build(b, DomainBounds(1.0))
        compute_moments(root)
        flat = FlatTree.from_cell(root)
        acc, work = flat.traverse(b.position, 0.0, 0.0)
        ref = direct_accelerations(b.mass, b.position, 0.0)
        np.testing.assert_allclose(acc, ref, rtol=1e-13)
        assert np.all(work == WORK_PP)
