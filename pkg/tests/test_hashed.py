"""Hashed octree: keys, hash table, build, branch-node exchange, and
request-driven force walks, all checked against the linked/flat references."""

import numpy as np
import pytest

from nbsim.flattree import FlatTree
from nbsim.hashed import (
    LOCAL_OWNER,
    REMOTE_CHILD,
    ROOT_KEY,
    HashedTree,
    body_key_to_cell_key,
    branch_node_indices,
    build_hashed,
    cell_geometry,
    child_key,
    distribute_branch_nodes,
    fetch_children,
    insert_neighbour_body,
    key_level,
    key_slot,
    make_child_server,
    parent_key,
    recombine_dirty,
    traverse_async,
    traverse_sync,
)
from nbsim.morton import MORTON_BITS, DomainBounds, morton_key, morton_keys, sort_order
from nbsim.octree import MAX_DEPTH, build, compute_moments, root_cell, serialize
from nbsim.physics import Bodies
from nbsim.transport import run_spmd

from test_octree import PLANAR_POINTS, planar_bodies, random_bodies

BOUNDS = DomainBounds(5.5)


def sorted_bodies(n: int, seed: int, span: float = 5.0) -> Bodies:
    b = random_bodies(n, seed, span)
    return b.take(sort_order(morton_keys(b.position, BOUNDS)))


def serial_cells_by_key(cell, key=ROOT_KEY, out=None):
    """Map hierarchical key -> linked cell, for every cell in the tree."""
    if out is None:
        out = {}
        if cell.count == 0:
            return out
    out[key] = cell
    if cell.children is not None:
        for s in range(8):
            c = cell.children[s]
            if c is not None:
                serial_cells_by_key(c, (key << 3) | s, out)
    return out


def assert_cell_matches_serial(tree, idx, serial_cell):
    """Bitwise agreement of one hashed cell with its linked counterpart."""
    assert tree.side[idx] == serial_cell.side
    assert np.array_equal(tree.centre[idx], serial_cell.centre)
    assert int(tree.count[idx]) == serial_cell.count
    if serial_cell.count == 1:
        assert tree.mass[idx] == serial_cell.body_mass
        assert np.array_equal(tree.com[idx], serial_cell.body_pos)
    else:
        assert tree.mass[idx] == serial_cell.mass
        assert np.array_equal(tree.com[idx], serial_cell.com)
        q = serial_cell.quad
        packed = (q[0, 0], q[0, 1], q[0, 2], q[1, 1], q[1, 2], q[2, 2])
        assert tuple(tree.quad[idx]) == packed


class TestKeys:
    def test_children_of_root_are_octal_10_to_17(self):
        assert [child_key(ROOT_KEY, s) for s in range(8)] == [0o10 + s for s in range(8)]

    def test_children_of_octal_12(self):
        assert [child_key(0o12, s) for s in range(8)] == [0o120 + s for s in range(8)]

    def test_parent_inverts_child(self):
        rng = np.random.Generator(np.random.Philox(key=5))
        for _ in range(200):
            key = ROOT_KEY
            for _ in range(int(rng.integers(1, MAX_DEPTH + 1))):
                slot = int(rng.integers(8))
                down = child_key(key, slot)
                assert parent_key(down) == key
                assert key_slot(down) == slot
                assert key_level(down) == key_level(key) + 1
                key = down

    def test_root_has_no_parent_or_slot(self):
        with pytest.raises(ValueError, match="no parent"):
            parent_key(ROOT_KEY)
        with pytest.raises(ValueError, match="no slot"):
            key_slot(ROOT_KEY)

    def test_child_beyond_depth_cap_raises(self):
        key = ROOT_KEY
        for _ in range(MAX_DEPTH):
            key = child_key(key, 3)
        assert key_level(key) == MAX_DEPTH
        with pytest.raises(ValueError, match="depth cap"):
            child_key(key, 0)

    def test_malformed_keys_rejected(self):
        for bad in (0, -1, 0o2, 0o4, 0o100 >> 1):
            with pytest.raises(ValueError):
                key_level(bad)

    def test_level_counts_octal_digits(self):
        assert key_level(ROOT_KEY) == 0
        assert key_level(0o17) == 1
        assert key_level(0o120) == 2
        assert key_level(0o1654) == 3

    def test_body_key_truncation(self):
        rng = np.random.Generator(np.random.Philox(key=6))
        for _ in range(100):
            skey = int(rng.integers(0, 1 << 63))
            assert body_key_to_cell_key(skey, 0) == ROOT_KEY
            assert body_key_to_cell_key(skey, MORTON_BITS) == (1 << 63) | skey
            level = int(rng.integers(1, MORTON_BITS))
            ck = body_key_to_cell_key(skey, level)
            assert key_level(ck) == level
            for lvl in range(level):
                want = (skey >> (3 * (MORTON_BITS - 1 - lvl))) & 7
                got = (ck >> (3 * (level - 1 - lvl))) & 7
                assert got == want

    def test_body_cell_contains_its_position(self):
        rng = np.random.Generator(np.random.Philox(key=7))
        for _ in range(50):
            pos = rng.uniform(-5.0, 5.0, 3)
            skey = morton_key(pos, BOUNDS)
            for level in (1, 3, 9, MORTON_BITS):
                centre, side = cell_geometry(body_key_to_cell_key(skey, level), BOUNDS)
                assert np.all(pos >= centre - side / 2 - 1e-12)
                assert np.all(pos < centre + side / 2 + 1e-12)


class TestGeometry:
    def test_matches_linked_child_chain_bitwise(self):
        rng = np.random.Generator(np.random.Philox(key=8))
        for _ in range(100):
            key = ROOT_KEY
            cell = root_cell(BOUNDS)
            for _ in range(int(rng.integers(0, 12))):
                slot = int(rng.integers(8))
                key = child_key(key, slot)
                cell = cell.child_cell(slot)
            centre, side = cell_geometry(key, BOUNDS)
            assert side == cell.side
            assert np.array_equal(centre, cell.centre)

    def test_root_geometry(self):
        centre, side = cell_geometry(ROOT_KEY, BOUNDS)
        assert np.array_equal(centre, np.zeros(3))
        assert side == 11.0


class TestHashTable:
    def test_insert_lookup_absent(self):
        tree = HashedTree(BOUNDS, 2)
        i = tree.add_cell(ROOT_KEY, np.zeros(3), 11.0)
        j = tree.add_cell(0o13, np.ones(3), 5.5)
        assert tree.lookup(ROOT_KEY) == i
        assert tree.lookup(0o13) == j
        assert tree.lookup(0o14) == -1
        assert len(tree) == 2

    def test_duplicate_key_is_a_collision(self):
        tree = HashedTree(BOUNDS, 2)
        tree.add_cell(0o12, np.zeros(3), 1.0)
        with pytest.raises(KeyError, match="key collision"):
            tree.add_cell(0o12, np.zeros(3), 1.0)

    def test_cell_arrays_grow_on_demand(self):
        tree = HashedTree(BOUNDS, 1)
        keys = [body_key_to_cell_key(k, MORTON_BITS) for k in range(300)]
        for k in keys:
            tree.add_cell(k, np.zeros(3), 1.0)
        assert len(tree) == 300
        assert all(tree.lookup(k) == i for i, k in enumerate(keys))

    def test_mean_probe_under_four_at_1e5_cells(self):
        rng = np.random.Generator(np.random.Philox(key=9))
        raw = np.unique(rng.integers(0, 1 << 63, 120_000, dtype=np.uint64))[:100_000]
        assert len(raw) == 100_000
        tree = HashedTree(BOUNDS, 1024)
        for k in raw:
            tree.add_cell((1 << 63) | int(k), np.zeros(3), 1.0)
        assert tree.table_slots == 131072  # doubled from 4096 as the load grew
        assert tree.mean_probe_length() < 4.0


class TestBuild:
    @pytest.mark.parametrize("n,seed", [(1, 0), (2, 1), (3, 2), (64, 3), (400, 4)])
    def test_serializes_identically_to_linked_build(self, n, seed):
        bodies = sorted_bodies(n, seed)
        tree = build_hashed(bodies, BOUNDS)
        root = build(bodies, BOUNDS)
        compute_moments(root)
        assert tree.to_serial_bytes() == serialize(root)

    def test_empty_build_is_an_empty_root(self):
        tree = build_hashed(Bodies.zeros(0), BOUNDS)
        assert len(tree) == 1
        assert int(tree.count[0]) == 0
        root = root_cell(BOUNDS)
        assert tree.to_serial_bytes() == serialize(root)

    def test_unsorted_input_rejected(self):
        bodies = sorted_bodies(32, 5)
        swapped = bodies.take(np.r_[1, 0, np.arange(2, 32)])
        with pytest.raises(ValueError, match="sorted"):
            build_hashed(swapped, BOUNDS)

    def test_coincident_bodies_rejected(self):
        bodies = sorted_bodies(8, 6)
        bodies.position[4] = bodies.position[3]
        with pytest.raises(ValueError, match="tree resolution"):
            build_hashed(bodies, BOUNDS)

    def test_keys_index_every_cell(self):
        tree = build_hashed(sorted_bodies(200, 7), BOUNDS)
        assert int(tree.key[0]) == ROOT_KEY
        for i in range(len(tree)):
            key = int(tree.key[i])
            assert tree.lookup(key) == i
            assert key_level(key) == int(tree.level[i])
            centre, side = cell_geometry(key, BOUNDS)
            assert side == tree.side[i]
            assert np.array_equal(centre, tree.centre[i])

    def test_leaves_have_count_one_and_no_children(self):
        tree = build_hashed(sorted_bodies(150, 8), BOUNDS)
        assert int(tree.count[0]) == 150
        for i in range(len(tree)):
            has_children = tree.local_child_mask(i) != 0
            assert has_children == (int(tree.count[i]) > 1)

    def test_planar_leaf_depths(self):
        bodies = planar_bodies()
        bounds = DomainBounds(4.0)
        order = sort_order(morton_keys(bodies.position, bounds))
        tree = build_hashed(bodies.take(order), bounds)
        from test_octree import PLANAR_DEPTHS

        for (x, y), depth in PLANAR_DEPTHS.items():
            skey = morton_key(np.array([x - 4.0, y - 4.0, 0.0]), bounds)
            idx = tree.lookup(body_key_to_cell_key(skey, depth))
            assert idx >= 0 and int(tree.count[idx]) == 1
            if depth > 1:  # one level up the cell is shared
                up = tree.lookup(body_key_to_cell_key(skey, depth - 1))
                assert int(tree.count[up]) > 1


class TestNeighbourInsert:
    def chunk_with_copies(self, n=90, seed=11, lo=25, hi=65):
        bodies = sorted_bodies(n, seed)
        local = bodies.take(np.arange(lo, hi))
        tree = build_hashed(local, BOUNDS)
        insert_neighbour_body(tree, float(bodies.mass[lo - 1]), bodies.position[lo - 1])
        insert_neighbour_body(tree, float(bodies.mass[hi]), bodies.position[hi])
        return bodies, local, tree, (lo - 1, hi)

    def test_recombined_tree_matches_linked_build_over_union(self):
        bodies, _, tree, (left, right) = self.chunk_with_copies()
        recombine_dirty(tree)
        union = bodies.take(np.arange(left, right + 1))
        root = build(union, BOUNDS)
        compute_moments(root)
        assert tree.to_serial_bytes() == serialize(root)

    def test_copy_flags_follow_the_insertion_paths(self):
        bodies, local, tree, (left, right) = self.chunk_with_copies()
        assert int(tree.count[0]) == len(local) + 2
        assert tree.ncopy[0] == 2
        for who in (left, right):
            skey = morton_key(bodies.position[who], BOUNDS)
            # the copy's own leaf is flagged, holds the body, and is clean
            for level in range(MORTON_BITS + 1):
                idx = tree.lookup(body_key_to_cell_key(skey, level))
                if idx < 0:
                    continue
                assert tree.ncopy[idx] >= 1
                if int(tree.count[idx]) == 1:
                    assert tree.mass[idx] == bodies.mass[who]
                    assert not tree.dirty[idx]

    def test_coincident_copy_rejected(self):
        bodies, local, tree, _ = self.chunk_with_copies()
        with pytest.raises(ValueError, match="tree resolution"):
            insert_neighbour_body(tree, 1.0, local.position[3])


# The 21 planar points split into three Morton-contiguous ranks of seven.
# Branch rectangles are written (depth, x0, y0) in the figure's [0,8) frame;
# each is the coarsest square holding none of that rank's received copies.
RANK_BRANCH_RECTS = {
    0: [(1, 0, 0), (2, 0, 4), (2, 0, 6), (3, 2, 4)],
    1: [(3, 3, 4), (3, 3, 5), (3, 4, 2), (3, 4, 3), (3, 5, 2)],
    2: [(1, 4, 4), (2, 6, 0), (2, 6, 2), (3, 5, 3)],
}

# Boundary bodies each rank receives: the left rank's last and the right
# rank's first point, in that order.
RANK_COPIES = {
    0: [PLANAR_POINTS[7]],
    1: [PLANAR_POINTS[6], PLANAR_POINTS[14]],
    2: [PLANAR_POINTS[13]],
}


def quad_cell_key(depth: int, x0: int, y0: int) -> int:
    """Key of the planar square [x0, x0+8/2^depth) x [y0, ...) at z just above 0."""
    key = ROOT_KEY
    for lvl in range(1, depth + 1):
        width = 8 >> lvl
        xbit = (x0 // width) & 1
        ybit = (y0 // width) & 1
        zbit = 1 if lvl == 1 else 0
        key = (key << 3) | (xbit << 2) | (ybit << 1) | zbit
    return key


def planar_rank_tree(rank: int):
    bounds = DomainBounds(4.0)
    bodies = planar_bodies()
    local = bodies.take(np.arange(7 * rank, 7 * rank + 7))
    tree = build_hashed(local, bounds)
    for x, y in RANK_COPIES[rank]:
        insert_neighbour_body(tree, 1.0, np.array([x - 4.0, y - 4.0, 0.0]))
    return tree


class TestPlanarBranchNodes:
    @pytest.mark.parametrize("rank", [0, 1, 2])
    def test_branch_sets_match_the_frozen_rectangles(self, rank):
        tree = planar_rank_tree(rank)
        got = {int(tree.key[i]) for i in branch_node_indices(tree)}
        assert got == {quad_cell_key(*rect) for rect in RANK_BRANCH_RECTS[rank]}

    def test_without_copies_the_root_is_the_only_branch_node(self):
        bounds = DomainBounds(4.0)
        tree = build_hashed(planar_bodies(), bounds)
        assert [int(tree.key[i]) for i in branch_node_indices(tree)] == [ROOT_KEY]


def contiguous_chunks(n: int, parts: int) -> list[tuple[int, int]]:
    cuts = np.linspace(0, n, parts + 1).astype(int)
    return [(int(cuts[i]), int(cuts[i + 1])) for i in range(parts)]


def rank_tree_with_copies(bodies: Bodies, chunks, rank: int):
    lo, hi = chunks[rank]
    local = bodies.take(np.arange(lo, hi))
    tree = build_hashed(local, BOUNDS)
    if rank > 0:
        insert_neighbour_body(tree, float(bodies.mass[lo - 1]), bodies.position[lo - 1])
    if rank < len(chunks) - 1:
        insert_neighbour_body(tree, float(bodies.mass[hi]), bodies.position[hi])
    return local, tree


class TestBranchInvariants:
    @pytest.mark.parametrize("parts", [2, 3, 4])
    def test_purity_coverage_and_antichain(self, parts):
        bodies = sorted_bodies(256, 20 + parts)
        chunks = contiguous_chunks(len(bodies), parts)
        serial_root = build(bodies, BOUNDS)
        compute_moments(serial_root)
        serial = serial_cells_by_key(serial_root)
        all_branch_keys: list[int] = []
        for rank in range(parts):
            _, tree = rank_tree_with_copies(bodies, chunks, rank)
            for idx in branch_node_indices(tree):
                key = int(tree.key[idx])
                all_branch_keys.append(key)
                # purity: the branch subtree saw only this rank's bodies, so
                # its stored values equal the serial tree's cell bit-for-bit
                assert_cell_matches_serial(tree, idx, serial[key])
        # disjoint: no branch cell contains another rank's branch cell
        for a in all_branch_keys:
            for b in all_branch_keys:
                if a != b:
                    gap = key_level(b) - key_level(a)
                    assert not (gap > 0 and (b >> (3 * gap)) == a)
        # coverage: every body lies under exactly one branch node
        for skey in morton_keys(bodies.position, BOUNDS):
            owners = [
                k
                for k in all_branch_keys
                if body_key_to_cell_key(int(skey), key_level(k)) == k
            ]
            assert len(owners) == 1

    @pytest.mark.parametrize("parts", [2, 3, 4])
    def test_leaf_union_equals_serial_leaves(self, parts):
        bodies = sorted_bodies(192, 30 + parts)
        chunks = contiguous_chunks(len(bodies), parts)
        serial_leaves = {
            key for key, cell in serial_cells_by_key(build(bodies, BOUNDS)).items() if cell.count == 1
        }
        union: set[int] = set()
        for rank in range(parts):
            _, tree = rank_tree_with_copies(bodies, chunks, rank)
            for i in range(len(tree)):
                if int(tree.count[i]) == 1 and tree.ncopy[i] == 0:
                    key = int(tree.key[i])
                    assert key not in union  # ranks' local leaves are disjoint
                    union.add(key)
        assert union == serial_leaves


def _distribute_rank(ep, bodies, chunks):
    lo, hi = chunks[ep.rank]
    local = bodies.take(np.arange(lo, hi))
    tree = build_hashed(local, BOUNDS)
    branch_keys = distribute_branch_nodes(ep, tree, local)
    n = len(tree)
    return {
        "branch_keys": branch_keys,
        "key": tree.key[:n].copy(),
        "count": tree.count[:n].copy(),
        "mass": tree.mass[:n].copy(),
        "com": tree.com[:n].copy(),
        "quad": tree.quad[:n].copy(),
        "centre": tree.centre[:n].copy(),
        "side": tree.side[:n].copy(),
        "owner": tree.owner[:n].copy(),
        "children": tree.children[:n].copy(),
        "ncopy": tree.ncopy[:n].copy(),
        "dirty": tree.dirty[:n].copy(),
    }


class TestDistribute:
    @pytest.mark.parametrize("parts", [2, 3, 4])
    def test_every_held_cell_is_serially_exact(self, parts):
        bodies = sorted_bodies(192, 40 + parts)
        chunks = contiguous_chunks(len(bodies), parts)
        serial_root = build(bodies, BOUNDS)
        compute_moments(serial_root)
        serial = serial_cells_by_key(serial_root)
        results, _ = run_spmd(parts, _distribute_rank, bodies, chunks)
        for snap in results:
            held = {int(k): i for i, k in enumerate(snap["key"])}
            assert held[ROOT_KEY] == 0
            for key, i in held.items():
                cell = serial[key]  # raises KeyError if we invented a cell
                assert snap["side"][i] == cell.side
                assert np.array_equal(snap["centre"][i], cell.centre)
                assert int(snap["count"][i]) == cell.count
                if cell.count == 1:
                    assert snap["mass"][i] == cell.body_mass
                    assert np.array_equal(snap["com"][i], cell.body_pos)
                else:
                    assert snap["mass"][i] == cell.mass
                    assert np.array_equal(snap["com"][i], cell.com)
                    q = cell.quad
                    assert tuple(snap["quad"][i]) == (
                        q[0, 0], q[0, 1], q[0, 2], q[1, 1], q[1, 2], q[2, 2],
                    )
                if key != ROOT_KEY:  # ancestor closure, with a linked child slot
                    p = held[parent_key(key)]
                    assert snap["children"][p][key & 7] == i
            assert not snap["dirty"].any()
            assert not snap["ncopy"].any()

    def test_owners_and_remote_placeholders(self):
        parts = 3
        bodies = sorted_bodies(150, 50)
        chunks = contiguous_chunks(len(bodies), parts)
        results, _ = run_spmd(parts, _distribute_rank, bodies, chunks)
        for rank, snap in enumerate(results):
            held = {int(k): i for i, k in enumerate(snap["key"])}
            for src, other in enumerate(results):
                if src == rank:
                    continue
                for key in other["branch_keys"]:
                    i = held[key]
                    assert snap["owner"][i] == src
                    # children of a remote internal branch are placeholders
                    if int(snap["count"][i]) > 1:
                        assert (snap["children"][i] == REMOTE_CHILD).any()

    def test_single_rank_exchanges_nothing(self):
        bodies = sorted_bodies(64, 51)
        results, net = run_spmd(1, _distribute_rank, bodies, [(0, 64)])
        assert results[0]["branch_keys"] == [ROOT_KEY]
        tree = build_hashed(bodies, BOUNDS)
        assert np.array_equal(results[0]["key"], tree.key[: len(tree)])
        stats = net.stats()
        assert all(m == 0 for per_rank in stats.values() for (m, _) in per_rank.values())


def _fetch_rank(ep, bodies, chunks):
    lo, hi = chunks[ep.rank]
    local = bodies.take(np.arange(lo, hi))
    tree = build_hashed(local, BOUNDS)
    distribute_branch_nodes(ep, tree, local)
    serve = make_child_server(ep, tree)
    # pull the children of every remote internal branch node we can see
    fetched = {}
    for i in range(len(tree)):
        if int(tree.owner[i]) >= 0 and int(tree.count[i]) > 1 and tree.has_remote_children(i):
            fetch_children(ep, tree, i, serve)
            key = int(tree.key[i])
            rows = {}
            for s in range(8):
                c = int(tree.children[i, s])
                if c >= 0:
                    rows[s] = tree.pack_record(c)
            fetched[key] = rows
    ep.done_consensus(serve)
    own = {
        int(tree.key[i]): i
        for i in range(len(tree))
        if int(tree.owner[i]) == LOCAL_OWNER
    }
    served = {
        key: {
            s: tree.pack_record(int(tree.children[idx, s]))
            for s in range(8)
            if int(tree.children[idx, s]) >= 0
        }
        for key, idx in own.items()
        if int(tree.count[idx]) > 1
    }
    return fetched, served


class TestChildBatches:
    def test_fetched_children_match_the_owners_cells(self):
        bodies = sorted_bodies(160, 60)
        chunks = contiguous_chunks(len(bodies), 2)
        results, _ = run_spmd(2, _fetch_rank, bodies, chunks)
        pulled = 0
        for rank, (fetched, _) in enumerate(results):
            other_served = results[1 - rank][1]
            for key, rows in fetched.items():
                assert rows  # an internal cell always serves at least one child
                assert rows == other_served[key]
                pulled += len(rows)
        assert pulled > 0


def _sync_force_rank(ep, bodies, chunks, theta, eps):
    lo, hi = chunks[ep.rank]
    local = bodies.take(np.arange(lo, hi))
    tree = build_hashed(local, BOUNDS)
    distribute_branch_nodes(ep, tree, local)
    serve = make_child_server(ep, tree)
    acc, work, requests = traverse_sync(ep, tree, local.position, theta, eps, serve)
    acc2, work2, second_pass_requests = traverse_sync(ep, tree, local.position, theta, eps, serve)
    ep.done_consensus(serve)
    assert np.array_equal(acc, acc2) and np.array_equal(work, work2)
    return lo, hi, acc, work, requests, second_pass_requests


def _async_force_rank(ep, bodies, chunks, theta, eps):
    lo, hi = chunks[ep.rank]
    local = bodies.take(np.arange(lo, hi))
    tree = build_hashed(local, BOUNDS)
    distribute_branch_nodes(ep, tree, local)
    serve = make_child_server(ep, tree)
    acc, work, requests, traces = traverse_async(
        ep, tree, local.position, theta, eps, serve, collect_trace=True
    )
    ep.done_consensus(serve)
    return lo, hi, acc, work, requests, traces


def serial_reference(bodies, theta, eps):
    root = build(bodies, BOUNDS)
    flat = FlatTree.from_cell(root)
    flat.compute_moments()
    return flat.traverse(bodies.position, theta, eps), flat


class TestForces:
    def test_single_tree_walk_matches_flat_traversal_bitwise(self):
        bodies = sorted_bodies(220, 70)
        tree = build_hashed(bodies, BOUNDS)
        (acc_ref, work_ref), _ = serial_reference(bodies, 0.7, 0.05)
        acc, work, requests = traverse_sync(None, tree, bodies.position, 0.7, 0.05)
        assert requests == 0
        assert np.array_equal(acc, acc_ref)
        assert np.array_equal(work, work_ref)

    @pytest.mark.parametrize("parts,theta", [(2, 0.4), (3, 0.6)])
    def test_blocking_walk_is_bitwise_serial_across_ranks(self, parts, theta):
        bodies = sorted_bodies(180, 71)
        chunks = contiguous_chunks(len(bodies), parts)
        (acc_ref, work_ref), _ = serial_reference(bodies, theta, 0.05)
        results, _ = run_spmd(parts, _sync_force_rank, bodies, chunks, theta, 0.05)
        total_requests = 0
        for lo, hi, acc, work, requests, second in results:
            assert np.array_equal(acc, acc_ref[lo:hi])
            assert np.array_equal(work, work_ref[lo:hi])
            assert second == 0  # fetched subtrees are cached across walks
            total_requests += requests
        assert total_requests >= 1

    def test_async_walk_same_interactions_close_accelerations(self):
        parts, theta, eps = 2, 0.5, 0.05
        bodies = sorted_bodies(150, 72)
        chunks = contiguous_chunks(len(bodies), parts)
        (acc_ref, work_ref), flat = serial_reference(bodies, theta, eps)
        results, _ = run_spmd(parts, _async_force_rank, bodies, chunks, theta, eps)
        total_requests = 0
        for lo, hi, acc, work, requests, traces in results:
            np.testing.assert_allclose(acc, acc_ref[lo:hi], rtol=1e-12, atol=1e-14)
            assert np.array_equal(work, work_ref[lo:hi])
            total_requests += requests
            for b, trace in enumerate(traces):
                _, _, ref_trace = flat.traverse_traced(bodies.position[lo + b], theta, eps)
                assert sorted(trace) == sorted(ref_trace)
        assert total_requests >= 1
