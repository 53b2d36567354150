"""The lightweight sync endpoint that faces the (simulated) Bitcoin network.

It keeps a header tree of every valid fork it hears about, fetches block
bodies on demand, caches outbound transactions for relay, and serves the
state machine's update requests: given the requester's anchor and the set
of headers it already holds bodies for, return new blocks that extend the
requester's chain plus the headers of anything further that still needs
syncing.

The endpoint performs no fork resolution on purpose; competing branches
are all retained and the requester resolves them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from btcstate import wire
from btcstate.blocktree import BlockTree
from btcstate.chain import (
    Block,
    BlockHeader,
    Hash256,
    NetworkKind,
    SerializationError,
    Transaction,
)
from btcstate.validation import ChainPolicy, ViolationCode, header_violation
from btcstate.wire import BLOCK_ITEM, TX_ITEM

MAX_HEADERS_PER_RESPONSE = 100
MAX_RESPONSE_BYTES = 2 * 1024 * 1024  # soft limit
HEADERS_BATCH = 2000


class UnknownAnchorError(KeyError):
    """The requested anchor header is not in the local tree."""


@dataclass
class AdapterConfig:
    network: NetworkKind
    connection_target: int = 5  # peers to stay connected to
    addr_pool_low: int = 500
    addr_pool_high: int = 2000
    max_headers: int = MAX_HEADERS_PER_RESPONSE
    max_response_bytes: int = MAX_RESPONSE_BYTES
    tx_expiry: float = 600.0  # seconds an undelivered transaction is kept
    checkpoint_height: int = 1 << 31  # at or above: one block per response
    preset_peers: tuple[int, ...] = ()

    @classmethod
    def for_network(cls, network: NetworkKind, **overrides) -> "AdapterConfig":
        if network is NetworkKind.MAINNET:
            cfg = cls(network, connection_target=5, addr_pool_low=500, addr_pool_high=2000)
        elif network is NetworkKind.TESTNET:
            cfg = cls(network, connection_target=5, addr_pool_low=100, addr_pool_high=1000)
        else:
            cfg = cls(network, connection_target=1, addr_pool_low=1, addr_pool_high=1)
        for key, value in overrides.items():
            setattr(cfg, key, value)
        return cfg


@dataclass(frozen=True)
class GetSuccessorsRequest:
    """Update request: the requester's anchor header, the hashes above it
    for which it already holds bodies, and transactions to relay."""

    anchor: BlockHeader
    processed: frozenset[Hash256]
    transactions: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class GetSuccessorsResponse:
    blocks: tuple[tuple[Block, BlockHeader], ...]
    next_headers: tuple[BlockHeader, ...]


@dataclass
class _TxCacheEntry:
    tx: Transaction
    inserted_at: float
    delivered_to: set[int] = field(default_factory=set)


class Adapter:
    """Single logical actor; callers serialize message and request handling."""

    def __init__(
        self,
        config: AdapterConfig,
        genesis: BlockHeader,
        policy: ChainPolicy,
        rng: random.Random,
        address_book=None,
    ):
        self.config = config
        self.policy = policy
        self.rng = rng
        self.address_book = address_book
        self.tree = BlockTree(genesis)
        self.block_store: dict[Hash256, Block] = {}
        self._block_sizes: dict[Hash256, int] = {}
        self.peers: set[int] = set()
        self.addr_pool: set[int] = set()
        self.tx_cache: dict[Hash256, _TxCacheEntry] = {}
        self.pending_fetch: set[Hash256] = set()
        self._announced_by: dict[Hash256, int] = {}
        self._outbox: list[tuple[int, wire.Message]] = []
        self._rr = 0  # round-robin cursor for fetch fallback

    # -- outbox ---------------------------------------------------------------

    def take_outbox(self) -> list[tuple[int, wire.Message]]:
        out = self._outbox
        self._outbox = []
        return out

    def _send(self, peer: int, msg: wire.Message) -> None:
        self._outbox.append((peer, msg))

    # -- peer discovery ---------------------------------------------------------

    def discover_peers(self, now: float) -> None:
        """Top up the address pool and maintain the connection count.

        Regtest connects to the preconfigured list and skips discovery.
        Service continues as long as at least one connection is active,
        even when the pool cannot be refilled.
        """
        if self.config.network is NetworkKind.REGTEST and self.config.preset_peers:
            for peer in self.config.preset_peers:
                if peer not in self.peers:
                    self._connect(peer)
            return
        if len(self.addr_pool) < self.config.addr_pool_low and self.address_book is not None:
            need = self.config.addr_pool_high - len(self.addr_pool)
            self.addr_pool.update(self.address_book.sample_addresses(self.rng, need))
        candidates = sorted(self.addr_pool - self.peers)
        while len(self.peers) < self.config.connection_target and candidates:
            pick = candidates.pop(self.rng.randrange(len(candidates)))
            self._connect(pick)

    def _connect(self, peer: int) -> None:
        self.peers.add(peer)
        have = frozenset(self.tree.hashes())
        self._send(peer, wire.GetHeaders(have))

    def drop_peer(self, peer: int, now: float) -> None:
        """Remove a lost or misbehaving connection and replace it. The peer
        also leaves the address pool so it is not immediately redialed."""
        self.peers.discard(peer)
        self.addr_pool.discard(peer)
        for entry in self.tx_cache.values():
            entry.delivered_to.discard(peer)
        self.discover_peers(now)

    # -- header/block ingestion ---------------------------------------------------

    def accept_header(self, header: BlockHeader, now: float) -> Optional[ViolationCode]:
        """Insert a valid header; duplicates are no-ops. Returns the violation
        when rejected, None when accepted. Every valid fork is retained."""
        if header.hash() in self.tree:
            return None
        violation = header_violation(header, self.tree, self.policy, now)
        if violation is not None:
            return violation
        self.tree.add_header(header)
        return None

    def store_block(self, block: Block) -> bool:
        """Keep a body whose header is already known and whose merkle root
        commits to its transactions; anything else is ignored."""
        h = block.header.hash()
        if h not in self.tree or h in self.block_store:
            return False
        if block.computed_merkle_root() != block.header.merkle_root:
            return False
        self.block_store[h] = block
        self._block_sizes[h] = block.size()
        self.pending_fetch.discard(h)
        return True

    # -- request handling (the update protocol) --------------------------------------

    def handle_request(self, req: GetSuccessorsRequest, now: float) -> GetSuccessorsResponse:
        """Serve one update request.

        Walks the header tree breadth-first from the anchor. A block is
        returned when the requester lacks it and its parent is available
        to the requester (the anchor itself, something the requester holds,
        or a block earlier in this response). The response size limit is
        soft: the block that crosses it is still included, then collection
        stops. At or above the checkpoint height only a single block is
        returned per response. Headers the requester lacks that are not
        returned as blocks are reported so it knows more syncing remains;
        missing bodies are fetched from peers in the background for
        future requests.
        """
        anchor_hash = req.anchor.hash()
        if anchor_hash not in self.tree:
            raise UnknownAnchorError(anchor_hash.rev_hex())
        for raw in req.transactions:
            try:
                self.cache_transaction(Transaction.from_bytes(raw), now)
            except SerializationError:
                continue  # unparseable relay payloads are dropped
        processed = set(req.processed)
        available = processed | {anchor_hash}
        anchor_height = self.tree.height(anchor_hash)
        block_cap = 1 if anchor_height >= self.config.checkpoint_height else None

        blocks: list[tuple[Block, BlockHeader]] = []
        included: set[Hash256] = set()
        next_headers: list[BlockHeader] = []
        total_bytes = 0

        queue: list[Hash256] = [anchor_hash]
        pos = 0
        while pos < len(queue) and len(next_headers) < self.config.max_headers:
            cur = queue[pos]
            pos += 1
            parent = self.tree.parent(cur)
            if cur not in processed and (parent in available or parent in included):
                body = self.block_store.get(cur)
                if body is None:
                    if cur != anchor_hash:
                        self._schedule_fetch(cur)
                elif total_bytes < self.config.max_response_bytes and (
                    block_cap is None or len(blocks) < block_cap
                ):
                    header = self.tree.header(cur)
                    assert header is not None
                    blocks.append((body, header))
                    included.add(cur)
                    total_bytes += self._block_sizes[cur]
            if cur != anchor_hash and cur not in processed and cur not in included:
                header = self.tree.header(cur)
                assert header is not None
                next_headers.append(header)
            queue.extend(sorted(self.tree.children(cur)))
        return GetSuccessorsResponse(tuple(blocks), tuple(next_headers))

    def _schedule_fetch(self, hash_: Hash256) -> None:
        if hash_ in self.pending_fetch or not self.peers:
            return
        peer = self._announced_by.get(hash_)
        if peer is None or peer not in self.peers:
            ordered = sorted(self.peers)
            peer = ordered[self._rr % len(ordered)]
            self._rr += 1
        self.pending_fetch.add(hash_)
        self._send(peer, wire.GetData((wire.InvItem(BLOCK_ITEM, hash_),)))

    # -- transaction cache -----------------------------------------------------------

    def cache_transaction(self, tx: Transaction, now: float) -> None:
        txid = tx.txid()
        if txid in self.tx_cache:
            return
        self.tx_cache[txid] = _TxCacheEntry(tx, now)
        for peer in sorted(self.peers):
            self._send(peer, wire.Inv((wire.InvItem(TX_ITEM, txid),)))

    def tick_tx_cache(self, now: float) -> None:
        """Drop entries delivered to every connected peer or past expiry;
        re-advertise the rest to peers that have not pulled them yet."""
        expired = [
            txid
            for txid, entry in self.tx_cache.items()
            if now - entry.inserted_at > self.config.tx_expiry
            or (self.peers and self.peers <= entry.delivered_to)
        ]
        for txid in expired:
            del self.tx_cache[txid]
        for txid, entry in self.tx_cache.items():
            for peer in sorted(self.peers - entry.delivered_to):
                self._send(peer, wire.Inv((wire.InvItem(TX_ITEM, txid),)))

    # -- peer messages ------------------------------------------------------------

    def on_peer_message(self, peer: int, msg: wire.Message, now: float) -> None:
        """Apply one message from a connected peer. Malformed traffic gets
        the peer disconnected and replaced."""
        if peer not in self.peers:
            return
        if isinstance(msg, wire.HeadersMsg):
            fresh = 0
            for header in msg.headers:
                h = header.hash()
                known = h in self.tree
                if self.accept_header(header, now) is None and not known:
                    fresh += 1
                    self._announced_by[h] = peer
                    if h not in self.block_store:
                        self._schedule_fetch(h)
            if fresh and len(msg.headers) >= HEADERS_BATCH:
                self._send(peer, wire.GetHeaders(frozenset(self.tree.hashes())))
        elif isinstance(msg, wire.BlockMsg):
            self.pending_fetch.discard(msg.block.header.hash())
            self.store_block(msg.block)
        elif isinstance(msg, wire.Inv):
            wanted = []
            for item in msg.items:
                if item.kind == BLOCK_ITEM and item.hash in self.tree and item.hash not in self.block_store:
                    self._announced_by[item.hash] = peer
                    wanted.append(item)
            if wanted:
                self._send(peer, wire.GetData(tuple(wanted)))
        elif isinstance(msg, wire.GetData):
            for item in msg.items:
                if item.kind == TX_ITEM and item.hash in self.tx_cache:
                    entry = self.tx_cache[item.hash]
                    entry.delivered_to.add(peer)
                    self._send(peer, wire.TxMsg(entry.tx))
                elif item.kind == BLOCK_ITEM and item.hash in self.block_store:
                    self._send(peer, wire.BlockMsg(self.block_store[item.hash]))
        elif isinstance(msg, wire.AddrMsg):
            self.addr_pool.update(msg.addresses)
        elif isinstance(msg, wire.TxMsg):
            pass  # inbound transactions are not our concern; peers relay them
        else:
            self.drop_peer(peer, now)
