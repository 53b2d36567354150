"""Rooted trees of block headers with depth and stability queries.

Depth of a node is the maximum cumulative cost over paths to any tip in
its subtree, where cost is 1 per block (confirmation counting) or the
block's hash work (fork choice). The stability score of a block is its
depth clipped by its lead over every other block at the same height; a
block on a losing fork scores negative. These are the quantities that
drive confirmation reporting and anchor advancement.

Depths are memoized per node and invalidated along the ancestor path on
insertion, so repeated queries after incremental growth stay cheap and
exactly match a from-scratch traversal.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Optional

from btcstate.chain import (
    Block,
    BlockHeader,
    Hash256,
    WorkPolicy,
    work_from_bits,
    work_from_hash,
)


class UnknownBlockError(KeyError):
    """Raised when a queried hash is not in the tree."""


class TreeStructureError(ValueError):
    """Raised for malformed tree dumps or structurally invalid insertions."""


class DepthKind(Enum):
    CONFIRMATION = "confirmation"  # every block costs 1
    WORK = "work"  # every block costs its hash work


@dataclass(frozen=True)
class WorkRatio:
    """An exact work-denominated score: numerator work units over the work
    of a reference block. Compared by cross-multiplication, never floats."""

    num: int
    den: int

    def __post_init__(self) -> None:
        if self.den <= 0:
            raise ValueError("reference work must be positive")

    def cmp(self, threshold: int) -> int:
        lhs = self.num
        rhs = threshold * self.den
        return (lhs > rhs) - (lhs < rhs)

    def __ge__(self, threshold: int) -> bool:
        return self.cmp(threshold) >= 0

    def __lt__(self, threshold: int) -> bool:
        return self.cmp(threshold) < 0

    def __float__(self) -> float:
        return self.num / self.den


class _Node:
    __slots__ = ("hash", "prev", "height", "bits", "header", "block", "children", "work")

    def __init__(
        self,
        hash_: Hash256,
        prev: Optional[Hash256],
        height: int,
        bits: int,
        header: Optional[BlockHeader],
        work: int,
    ):
        self.hash = hash_
        self.prev = prev
        self.height = height
        self.bits = bits
        self.header = header
        self.block: Optional[Block] = None
        self.children: list[Hash256] = []
        self.work = work


class BlockTree:
    """Single-rooted header tree; single-writer, many concurrent readers."""

    def __init__(self, genesis: BlockHeader, work_policy: WorkPolicy = WorkPolicy.TARGET):
        self.work_policy = work_policy
        self._nodes: dict[Hash256, _Node] = {}
        self._by_height: dict[int, list[Hash256]] = {}
        self._depth_c: dict[Hash256, int] = {}
        self._depth_w: dict[Hash256, int] = {}
        self.root = genesis.hash()
        self._put(_Node(self.root, None, 0, genesis.bits, genesis, self._work_of(genesis.bits, self.root)))

    @classmethod
    def raw(
        cls,
        root_hash: Hash256,
        root_bits: int,
        work_policy: WorkPolicy = WorkPolicy.TARGET,
    ) -> "BlockTree":
        """Build a tree keyed by externally supplied hashes (no headers).

        Used by dump files and synthetic tests; PoW is not rechecked here.
        """
        tree = cls.__new__(cls)
        tree.work_policy = work_policy
        tree._nodes = {}
        tree._by_height = {}
        tree._depth_c = {}
        tree._depth_w = {}
        tree.root = root_hash
        tree._put(_Node(root_hash, None, 0, root_bits, None, tree._work_of(root_bits, root_hash)))
        return tree

    # -- structure ----------------------------------------------------------

    def _work_of(self, bits: int, hash_: Hash256) -> int:
        if self.work_policy is WorkPolicy.TARGET:
            return work_from_bits(bits)
        return work_from_hash(hash_)

    def _put(self, node: _Node) -> None:
        self._nodes[node.hash] = node
        self._by_height.setdefault(node.height, []).append(node.hash)

    def __contains__(self, hash_: Hash256) -> bool:
        return hash_ in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def _node(self, hash_: Hash256) -> _Node:
        try:
            return self._nodes[hash_]
        except KeyError:
            raise UnknownBlockError(hash_.rev_hex()) from None

    def add_header(self, header: BlockHeader) -> Hash256:
        """Insert a header under its parent. Re-inserting is a no-op."""
        h = header.hash()
        if h in self._nodes:
            return h
        parent = self._node(header.prev)
        node = _Node(h, header.prev, parent.height + 1, header.bits, header, self._work_of(header.bits, h))
        self._put(node)
        parent.children.append(h)
        self._invalidate_up(header.prev)
        return h

    def add_raw(self, hash_: Hash256, prev: Hash256, bits: int) -> Hash256:
        """Insert a node by explicit hash (dump loading, synthetic trees)."""
        if hash_ in self._nodes:
            return hash_
        parent = self._node(prev)
        node = _Node(hash_, prev, parent.height + 1, bits, None, self._work_of(bits, hash_))
        self._put(node)
        parent.children.append(hash_)
        self._invalidate_up(prev)
        return hash_

    def remove_subtree(self, hash_: Hash256) -> int:
        """Remove a node and all its descendants; returns the count removed."""
        if hash_ == self.root:
            raise TreeStructureError("cannot remove the root")
        node = self._node(hash_)
        parent = self._node(node.prev)
        parent.children.remove(hash_)
        removed = 0
        stack = [hash_]
        while stack:
            h = stack.pop()
            n = self._nodes.pop(h)
            self._by_height[n.height].remove(h)
            if not self._by_height[n.height]:
                del self._by_height[n.height]
            self._depth_c.pop(h, None)
            self._depth_w.pop(h, None)
            stack.extend(n.children)
            removed += 1
        self._invalidate_up(node.prev)
        return removed

    def header(self, hash_: Hash256) -> Optional[BlockHeader]:
        return self._node(hash_).header

    def height(self, hash_: Hash256) -> int:
        return self._node(hash_).height

    def parent(self, hash_: Hash256) -> Optional[Hash256]:
        return self._node(hash_).prev

    def children(self, hash_: Hash256) -> list[Hash256]:
        return list(self._node(hash_).children)

    def bits(self, hash_: Hash256) -> int:
        return self._node(hash_).bits

    def node_work(self, hash_: Hash256) -> int:
        return self._node(hash_).work

    def set_block(self, hash_: Hash256, block: Block) -> None:
        self._node(hash_).block = block

    def drop_block(self, hash_: Hash256) -> None:
        self._node(hash_).block = None

    def block(self, hash_: Hash256) -> Optional[Block]:
        return self._node(hash_).block

    def has_block(self, hash_: Hash256) -> bool:
        return self._node(hash_).block is not None

    def hashes(self) -> Iterator[Hash256]:
        return iter(self._nodes)

    def at_height(self, height: int) -> list[Hash256]:
        return list(self._by_height.get(height, ()))

    def max_height(self) -> int:
        return max(self._by_height)

    def heights(self) -> Iterable[int]:
        return self._by_height.keys()

    def ancestors(self, hash_: Hash256) -> Iterator[Hash256]:
        """Walk parent links up to and including the root."""
        node = self._node(hash_)
        while node.prev is not None:
            yield node.prev
            node = self._nodes[node.prev]

    # -- depth and stability --------------------------------------------------

    def _invalidate_up(self, hash_: Optional[Hash256]) -> None:
        while hash_ is not None:
            self._depth_c.pop(hash_, None)
            self._depth_w.pop(hash_, None)
            hash_ = self._nodes[hash_].prev

    def depth(self, hash_: Hash256, kind: DepthKind) -> int:
        """Maximum cumulative cost from this block to any tip below it."""
        cache = self._depth_c if kind is DepthKind.CONFIRMATION else self._depth_w
        if hash_ in cache:
            return cache[hash_]
        self._node(hash_)
        # Iterative post-order: children before parents, memoizing as we go.
        stack: list[tuple[Hash256, bool]] = [(hash_, False)]
        while stack:
            h, expanded = stack.pop()
            if h in cache:
                continue
            node = self._nodes[h]
            if expanded:
                cost = 1 if kind is DepthKind.CONFIRMATION else node.work
                best = max((cache[c] for c in node.children), default=0)
                cache[h] = cost + best
            else:
                stack.append((h, True))
                stack.extend((c, False) for c in node.children if c not in cache)
        return cache[hash_]

    def stability(
        self,
        hash_: Hash256,
        kind: DepthKind,
        reference: Optional[Hash256] = None,
    ) -> int | WorkRatio:
        """Depth clipped by the lead over every same-height rival.

        Confirmation kind returns a signed block count. Work kind returns
        an exact ratio against the work of `reference` (the root when not
        given), matching how work-based thresholds are specified.
        """
        node = self._node(hash_)
        d = self.depth(hash_, kind)
        score = d
        for rival in self._by_height.get(node.height, ()):
            if rival != hash_:
                score = min(score, d - self.depth(rival, kind))
        if kind is DepthKind.CONFIRMATION:
            return score
        ref = reference if reference is not None else self.root
        return WorkRatio(score, self._node(ref).work)

    def is_delta_stable(
        self,
        hash_: Hash256,
        delta: int,
        kind: DepthKind,
        reference: Optional[Hash256] = None,
        require_separation: bool = True,
    ) -> bool:
        """Whether the block's depth and its lead over every same-height
        rival both reach `delta`.

        With require_separation False only the depth condition is checked
        (the weaker guard some policies use for work-based advancement).
        """
        if delta < 0:
            raise ValueError("delta must be non-negative")
        node = self._node(hash_)
        if kind is DepthKind.CONFIRMATION:
            threshold = delta
        else:
            ref = reference if reference is not None else self.root
            threshold = delta * self._node(ref).work
        d = self.depth(hash_, kind)
        if d < threshold:
            return False
        if not require_separation:
            return True
        for rival in self._by_height.get(node.height, ()):
            if rival != hash_ and d - self.depth(rival, kind) < threshold:
                return False
        return True

    def confirmations(self, hash_: Hash256) -> int:
        """Confirmation count of a block: its confirmation-based stability."""
        score = self.stability(hash_, DepthKind.CONFIRMATION)
        assert isinstance(score, int)
        return score

    def current_chain(self) -> list[Hash256]:
        """Root-to-tip path maximizing cumulative work depth.

        Ties at any step break toward the child with the smallest header
        hash, keeping the selection identical across replicas.
        """
        chain = [self.root]
        node = self._nodes[self.root]
        while node.children:
            best = None
            best_depth = -1
            for child in sorted(node.children):
                d = self.depth(child, DepthKind.WORK)
                if d > best_depth:
                    best = child
                    best_depth = d
            assert best is not None
            chain.append(best)
            node = self._nodes[best]
        return chain

    def tip(self) -> Hash256:
        return self.current_chain()[-1]

    # -- dump / load -----------------------------------------------------------

    def dump_lines(self) -> list[str]:
        """One node per line, parents before children."""
        lines = ["blocktree 1"]
        queue = [self.root]
        while queue:
            h = queue.pop(0)
            node = self._nodes[h]
            prev = node.prev.rev_hex() if node.prev is not None else "-"
            has_block = 1 if node.block is not None else 0
            lines.append(
                f"node {h.rev_hex()} {prev} {node.height} {node.bits:08x} {has_block}"
            )
            queue.extend(sorted(node.children))
        return lines

    @classmethod
    def from_dump(
        cls, lines: Iterable[str], work_policy: WorkPolicy = WorkPolicy.TARGET
    ) -> "BlockTree":
        tree: Optional[BlockTree] = None
        count = 0
        for lineno, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if count == 0:
                if line != "blocktree 1":
                    raise TreeStructureError(f"line {lineno}: expected 'blocktree 1' magic")
                count += 1
                continue
            fields = line.split()
            if len(fields) != 6 or fields[0] != "node":
                raise TreeStructureError(f"line {lineno}: malformed node line")
            _, hash_hex, prev_hex, height_s, bits_hex, _flag = fields
            try:
                h = Hash256.from_rev_hex(hash_hex)
                bits = int(bits_hex, 16)
                height = int(height_s)
            except ValueError as exc:
                raise TreeStructureError(f"line {lineno}: {exc}") from None
            if prev_hex == "-":
                if tree is not None:
                    raise TreeStructureError(f"line {lineno}: second root")
                tree = cls.raw(h, bits, work_policy)
                if height != 0:
                    raise TreeStructureError(f"line {lineno}: root height must be 0")
            else:
                if tree is None:
                    raise TreeStructureError(f"line {lineno}: node before root")
                prev = Hash256.from_rev_hex(prev_hex)
                if prev not in tree:
                    raise TreeStructureError(f"line {lineno}: orphaned node (unknown parent)")
                tree.add_raw(h, prev, bits)
                if tree.height(h) != height:
                    raise TreeStructureError(f"line {lineno}: stated height disagrees with parent")
            count += 1
        if tree is None:
            raise TreeStructureError("empty tree dump")
        return tree
