"""The replicated state machine that tracks the chain's spendable outputs.

The materialized UTXO set covers the chain up to and including the anchor,
the highest block considered stable under the work-based stability rule
(threshold delta, 144 in production). Full blocks above the anchor are kept
separately so any reorganization above the anchor resolves automatically;
queries overlay those unstable blocks on the materialized set per request.

Responses from the sync endpoint are applied one at a time in simulator
order; the whole state is deterministic given the message sequence.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable, Optional

from btcstate.adapter import GetSuccessorsRequest, GetSuccessorsResponse
from btcstate.blocktree import BlockTree, DepthKind
from btcstate.chain import (
    Block,
    BlockHeader,
    Hash256,
    MAX_MONEY,
    NetworkKind,
    OutPoint,
    SerializationError,
    Transaction,
    TxOut,
    WorkPolicy,
    script_address,
)
from btcstate.validation import (
    ChainPolicy,
    ValidationError,
    check_block_shape,
    check_header,
)

DEFAULT_DELTA = 144
DEFAULT_TAU = 2
DEFAULT_PAGE_SIZE = 1000


class ApiError(Exception):
    pass


class ApiUnavailableError(ApiError):
    """State is not synced; serving now could return stale data."""


class FilterRejectedError(ApiError):
    """The confirmation filter or page token cannot be honored."""


class NetworkMismatchError(ApiError):
    pass


class MalformedTransactionError(ApiError):
    pass


class Utxo:
    __slots__ = ("outpoint", "value", "height")

    def __init__(self, outpoint: OutPoint, value: int, height: int):
        self.outpoint = outpoint
        self.value = value
        self.height = height

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Utxo)
            and self.outpoint == other.outpoint
            and self.value == other.value
            and self.height == other.height
        )

    def __repr__(self) -> str:  # pragma: no cover
        return f"Utxo({self.outpoint.txid.rev_hex()[:12]}:{self.outpoint.vout}, {self.value}, h={self.height})"


class UtxosPage:
    """One page of a UTXO listing, height-descending, with the tip of the
    chain the listing reflects and a continuation token when truncated."""

    __slots__ = ("utxos", "tip_hash", "tip_height", "next_page")

    def __init__(
        self,
        utxos: tuple[Utxo, ...],
        tip_hash: Hash256,
        tip_height: int,
        next_page: Optional[str],
    ):
        self.utxos = utxos
        self.tip_hash = tip_hash
        self.tip_height = tip_height
        self.next_page = next_page


class UtxoSet:
    """Outpoint-indexed unspent outputs with an address index for retrieval."""

    def __init__(self, network: NetworkKind):
        self.network = network
        self.by_outpoint: dict[OutPoint, tuple[TxOut, int]] = {}
        self.by_address: dict[str, set[OutPoint]] = {}

    def __len__(self) -> int:
        return len(self.by_outpoint)

    def add(self, outpoint: OutPoint, txout: TxOut, height: int) -> None:
        self.by_outpoint[outpoint] = (txout, height)
        address = script_address(txout.script_pubkey, self.network)
        self.by_address.setdefault(address, set()).add(outpoint)

    def remove(self, outpoint: OutPoint) -> bool:
        entry = self.by_outpoint.pop(outpoint, None)
        if entry is None:
            return False
        address = script_address(entry[0].script_pubkey, self.network)
        bucket = self.by_address.get(address)
        if bucket is not None:
            bucket.discard(outpoint)
            if not bucket:
                del self.by_address[address]
        return True

    def address_utxos(self, address: str) -> list[tuple[OutPoint, TxOut, int]]:
        out = []
        for outpoint in self.by_address.get(address, ()):
            txout, height = self.by_outpoint[outpoint]
            out.append((outpoint, txout, height))
        return out

    def apply_block(self, block: Block, height: int) -> int:
        """Spend the inputs and insert the outputs of every transaction.

        Spending conditions are never verified here; an input that names
        an unknown outpoint is counted as an anomaly and skipped, keeping
        the two indexes consistent no matter what the block contains.
        """
        anomalies = 0
        for tx in block.transactions:
            if not tx.is_coinbase():
                for txin in tx.inputs:
                    if not self.remove(txin.outpoint):
                        anomalies += 1
            txid = tx.txid()
            for vout, txout in enumerate(tx.outputs):
                self.add(OutPoint(txid, vout), txout, height)
        return anomalies


_PAGE_TAG = "p1"


def _encode_page_token(min_conf: int, utxo: Utxo) -> str:
    return f"{_PAGE_TAG}:{min_conf}:{utxo.height}:{utxo.outpoint.txid.hex()}:{utxo.outpoint.vout}"


def _decode_page_token(token: str) -> tuple[int, tuple[int, bytes, int]]:
    parts = token.split(":")
    if len(parts) != 5 or parts[0] != _PAGE_TAG:
        raise FilterRejectedError("unrecognized page token")
    try:
        min_conf = int(parts[1])
        height = int(parts[2])
        txid = bytes.fromhex(parts[3])
        vout = int(parts[4])
    except ValueError:
        raise FilterRejectedError("corrupt page token") from None
    if len(txid) != 32:
        raise FilterRejectedError("corrupt page token")
    return min_conf, (-height, txid, vout)


class Canister:
    """Deterministic single-writer state machine over sync responses."""

    def __init__(
        self,
        genesis: BlockHeader,
        network: NetworkKind,
        delta: int = DEFAULT_DELTA,
        tau: int = DEFAULT_TAU,
        policy: Optional[ChainPolicy] = None,
        page_size: int = DEFAULT_PAGE_SIZE,
        work_policy: WorkPolicy = WorkPolicy.TARGET,
        require_separation: bool = True,
    ):
        self.network = network
        self.delta = delta
        self.tau = tau
        self.policy = policy if policy is not None else ChainPolicy.for_network(network)
        self.page_size = page_size
        self.require_separation = require_separation
        self.tree = BlockTree(genesis, work_policy)
        self.anchor: Hash256 = genesis.hash()
        self.utxos = UtxoSet(network)
        self.outbound_txs: deque[bytes] = deque()
        self.synced = True
        self.anomaly_count = 0
        self.blocks_ingested = 0
        self.reorgs = 0
        # Valid-looking headers rejected for extending below the anchor; a
        # rising count is the local symptom of a reorganization too deep to
        # absorb (recovery would need a state reset).
        self.below_anchor_rejects = 0

    # -- request/response cycle --------------------------------------------------

    def anchor_height(self) -> int:
        return self.tree.height(self.anchor)

    def _bodied_hashes(self) -> list[Hash256]:
        out = []
        for height in range(self.anchor_height() + 1, self.tree.max_height() + 1):
            for h in self.tree.at_height(height):
                if self.tree.has_block(h):
                    out.append(h)
        return out

    def max_body_height(self) -> int:
        """Greatest height for which a block body is held (anchor if none)."""
        top = self.anchor_height()
        for height in range(self.tree.max_height(), top, -1):
            if any(self.tree.has_block(h) for h in self.tree.at_height(height)):
                return height
        return top

    def build_request(self) -> GetSuccessorsRequest:
        """Anchor, the hashes we already hold bodies for, and the drained
        outbound transaction queue."""
        anchor_header = self.tree.header(self.anchor)
        assert anchor_header is not None
        txs = tuple(self.outbound_txs)
        self.outbound_txs.clear()
        return GetSuccessorsRequest(anchor_header, frozenset(self._bodied_hashes()), txs)

    def requeue_transactions(self, txs: Iterable[bytes]) -> None:
        """Put drained transactions back (used when a request round fails)."""
        for raw in txs:
            self.outbound_txs.appendleft(raw)

    def handle_response(self, resp: GetSuccessorsResponse, now: float) -> None:
        """Apply one response: store valid blocks, advance the anchor while
        the lowest unstable block is work-stable, append reported headers,
        and recompute the synced flag. Invalid items are skipped one by
        one; a bad pair never poisons the rest of the response."""
        old_tip = self.tree.current_chain()[-1]
        for block, header in resp.blocks:
            if self._ingest_block(block, header, now):
                self._advance_anchor()
        for header in resp.next_headers:
            self._ingest_header(header, now)
        gap = self.tree.max_height() - self.max_body_height()
        self.synced = gap <= self.tau
        if old_tip not in set(self.tree.current_chain()):
            self.reorgs += 1

    def _ingest_header(self, header: BlockHeader, now: float) -> bool:
        h = header.hash()
        if h in self.tree:
            return True
        if header.prev in self.tree and self.tree.height(header.prev) + 1 <= self.anchor_height():
            self.below_anchor_rejects += 1
            return False  # below the anchor only the settled header may remain
        try:
            check_header(header, self.tree, self.policy, now)
        except ValidationError:
            return False
        self.tree.add_header(header)
        return True

    def _ingest_block(self, block: Block, header: BlockHeader, now: float) -> bool:
        if block.header != header:
            return False
        h = header.hash()
        if h in self.tree and self.tree.has_block(h):
            return False
        try:
            check_block_shape(block)
        except ValidationError:
            return False
        prev = header.prev
        if prev != self.anchor and not (prev in self.tree and self.tree.has_block(prev)):
            return False  # parent body must be available for replay order
        if not self._ingest_header(header, now):
            return False
        self.tree.set_block(h, block)
        self.blocks_ingested += 1
        return True

    def _advance_anchor(self) -> None:
        """Advance while the best block right above the anchor is stable.

        Stability is measured in work relative to the current anchor block's
        work: depth at least delta times that work and, unless separation
        checking is disabled, the same margin over every same-height rival.
        Each advancement folds the block into the UTXO set, prunes rival
        branches at that height, and drops the block body.
        """
        while True:
            next_height = self.anchor_height() + 1
            at_height = self.tree.at_height(next_height)
            candidates = [h for h in at_height if self.tree.has_block(h)]
            if not candidates:
                return
            best = None
            best_depth = -1
            for h in sorted(candidates):
                d = self.tree.depth(h, DepthKind.WORK)
                if d > best_depth:
                    best = h
                    best_depth = d
            assert best is not None
            threshold = self.delta * self.tree.node_work(self.anchor)
            if best_depth < threshold:
                return
            if self.require_separation:
                for rival in at_height:
                    if rival != best and best_depth - self.tree.depth(rival, DepthKind.WORK) < threshold:
                        return
            block = self.tree.block(best)
            assert block is not None
            self.anomaly_count += self.utxos.apply_block(block, next_height)
            for rival in list(at_height):
                if rival != best:
                    self.tree.remove_subtree(rival)
            self.tree.drop_block(best)
            self.anchor = best

    # -- query helpers ---------------------------------------------------------

    def _selected_chain(self, min_conf: Optional[int]) -> tuple[list[Hash256], Hash256]:
        """Unstable blocks to overlay (in chain order) and the tip of the
        chain the result reflects.

        With a confirmation filter, the chain is cut before the first block
        whose confirmation count falls short; the materialized prefix up to
        the anchor is always included since it cannot be unwound.
        """
        chain = self.tree.current_chain()
        anchor_pos = chain.index(self.anchor)
        applied: list[Hash256] = []
        tip = self.anchor
        for h in chain[anchor_pos + 1 :]:
            if not self.tree.has_block(h):
                break
            if min_conf is not None and self.tree.confirmations(h) < min_conf:
                break
            applied.append(h)
            tip = h
        return applied, tip

    def _address_entries(
        self, address: str, applied: list[Hash256]
    ) -> list[Utxo]:
        spent: set[OutPoint] = set()
        created: dict[OutPoint, tuple[TxOut, int]] = {}
        for h in applied:
            block = self.tree.block(h)
            assert block is not None
            height = self.tree.height(h)
            for tx in block.transactions:
                if not tx.is_coinbase():
                    for txin in tx.inputs:
                        spent.add(txin.outpoint)
                txid = tx.txid()
                for vout, txout in enumerate(tx.outputs):
                    if script_address(txout.script_pubkey, self.network) == address:
                        created[OutPoint(txid, vout)] = (txout, height)
        entries = [
            Utxo(op, txout.value, height)
            for op, txout, height in self.utxos.address_utxos(address)
            if op not in spent
        ]
        entries.extend(
            Utxo(op, txout.value, height)
            for op, (txout, height) in created.items()
            if op not in spent
        )
        entries.sort(key=lambda u: (-u.height, bytes(u.outpoint.txid), u.outpoint.vout))
        return entries

    def _check_available(self, network: NetworkKind) -> None:
        if network is not self.network:
            raise NetworkMismatchError(f"state tracks {self.network.value}, not {network.value}")
        if not self.synced:
            raise ApiUnavailableError("known headers outrun available blocks")

    def _check_min_conf(self, min_conf: int) -> None:
        if min_conf < 1:
            raise FilterRejectedError("min_confirmations must be positive")
        if min_conf > self.delta:
            raise FilterRejectedError(
                f"min_confirmations {min_conf} exceeds the stability threshold {self.delta}"
            )

    # -- public API -----------------------------------------------------------

    def get_utxos(
        self,
        address: str,
        network: NetworkKind,
        min_confirmations: Optional[int] = None,
        page: Optional[str] = None,
    ) -> UtxosPage:
        """UTXOs of an address, height-descending, paginated.

        The result reflects the materialized set at the anchor plus the
        unstable blocks along the currently selected chain, minus outputs
        those blocks spend. A min_confirmations filter restricts the
        overlay to blocks with at least that many confirmations; it is
        rejected above the stability threshold because spends already
        folded into the materialized set could not be excluded.
        """
        self._check_available(network)
        if page is not None and min_confirmations is not None:
            raise FilterRejectedError("filter takes confirmations or a page token, not both")
        after_key = None
        if page is not None:
            token_conf, after_key = _decode_page_token(page)
            min_confirmations = token_conf if token_conf > 0 else None
        if min_confirmations is not None:
            self._check_min_conf(min_confirmations)
        applied, tip = self._selected_chain(min_confirmations)
        entries = self._address_entries(address, applied)
        if after_key is not None:
            entries = [
                u
                for u in entries
                if (-u.height, bytes(u.outpoint.txid), u.outpoint.vout) > after_key
            ]
        page_entries = entries[: self.page_size]
        next_token = None
        if len(entries) > self.page_size:
            next_token = _encode_page_token(min_confirmations or 0, page_entries[-1])
        return UtxosPage(
            tuple(page_entries), tip, self.tree.height(tip), next_token
        )

    def get_balance(
        self,
        address: str,
        network: NetworkKind,
        min_confirmations: Optional[int] = None,
    ) -> int:
        """Total satoshi over the same selection as get_utxos, unpaginated."""
        self._check_available(network)
        if min_confirmations is not None:
            self._check_min_conf(min_confirmations)
        applied, _ = self._selected_chain(min_confirmations)
        return sum(u.value for u in self._address_entries(address, applied))

    def send_transaction(self, tx_bytes: bytes, network: NetworkKind) -> Hash256:
        """Queue a syntactically valid transaction for relay on the next
        update request. Spending semantics are not checked."""
        self._check_available(network)
        try:
            tx = Transaction.from_bytes(bytes(tx_bytes))
        except SerializationError as exc:
            raise MalformedTransactionError(str(exc)) from None
        if not tx.inputs or not tx.outputs:
            raise MalformedTransactionError("transaction needs inputs and outputs")
        if any(not 0 <= out.value <= MAX_MONEY for out in tx.outputs):
            raise MalformedTransactionError("output value out of range")
        self.outbound_txs.append(bytes(tx_bytes))
        return tx.txid()

    # -- metrics helpers ---------------------------------------------------------

    def confirmations_of_tx(self, txid: Hash256) -> Optional[int]:
        """Confirmation count of the unstable block containing txid, if any."""
        for h in self._bodied_hashes():
            block = self.tree.block(h)
            assert block is not None
            if any(tx.txid() == txid for tx in block.transactions):
                return self.tree.confirmations(h)
        return None

    def current_tip_height(self) -> int:
        return self.tree.height(self.tree.current_chain()[-1])

    # -- snapshot ---------------------------------------------------------------

    def snapshot_lines(self) -> list[str]:
        lines = [
            "btcstate-snapshot 1",
            f"network {self.network.value}",
            f"delta {self.delta}",
            f"tau {self.tau}",
            f"page-size {self.page_size}",
            f"separation {1 if self.require_separation else 0}",
            f"work-policy {self.tree.work_policy.value}",
            f"anchor {self.anchor.rev_hex()}",
            f"synced {1 if self.synced else 0}",
        ]
        order = [self.tree.root]
        pos = 0
        while pos < len(order):
            h = order[pos]
            pos += 1
            order.extend(sorted(self.tree.children(h)))
        for h in order:
            header = self.tree.header(h)
            assert header is not None
            lines.append(f"header {header.to_bytes().hex()}")
        for h in order:
            block = self.tree.block(h)
            if block is not None:
                lines.append(f"block {block.to_bytes().hex()}")
        for outpoint, (txout, height) in sorted(
            self.utxos.by_outpoint.items(), key=lambda kv: (bytes(kv[0].txid), kv[0].vout)
        ):
            lines.append(
                "utxo "
                f"{outpoint.txid.rev_hex()} {outpoint.vout} {txout.value} "
                f"{txout.script_pubkey.hex()} {height}"
            )
        for raw in self.outbound_txs:
            lines.append(f"queued-tx {raw.hex()}")
        lines.append("end")
        return lines

    @classmethod
    def from_snapshot(cls, lines: Iterable[str]) -> "Canister":
        it = iter(lines)
        header_line = next(it, "").strip()
        if header_line != "btcstate-snapshot 1":
            raise ValueError("not a state snapshot (bad magic)")
        fields: dict[str, str] = {}
        headers: list[BlockHeader] = []
        blocks: list[Block] = []
        utxo_lines: list[tuple[OutPoint, TxOut, int]] = []
        queued: list[bytes] = []
        for raw in it:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line == "end":
                break
            key, _, value = line.partition(" ")
            if key == "header":
                headers.append(BlockHeader.from_bytes(bytes.fromhex(value)))
            elif key == "block":
                blocks.append(Block.from_bytes(bytes.fromhex(value)))
            elif key == "utxo":
                txid_hex, vout, amount, script_hex, height = value.split()
                utxo_lines.append(
                    (
                        OutPoint(Hash256.from_rev_hex(txid_hex), int(vout)),
                        TxOut(int(amount), bytes.fromhex(script_hex)),
                        int(height),
                    )
                )
            elif key == "queued-tx":
                queued.append(bytes.fromhex(value))
            else:
                fields[key] = value
        if not headers:
            raise ValueError("snapshot has no headers")
        network = NetworkKind.from_str(fields["network"])
        state = cls(
            headers[0],
            network,
            delta=int(fields["delta"]),
            tau=int(fields["tau"]),
            page_size=int(fields["page-size"]),
            work_policy=WorkPolicy(fields["work-policy"]),
            require_separation=fields.get("separation", "1") == "1",
        )
        for header in headers[1:]:
            state.tree.add_header(header)
        for block in blocks:
            h = block.header.hash()
            state.tree.set_block(h, block)
        for outpoint, txout, height in utxo_lines:
            state.utxos.add(outpoint, txout, height)
        state.anchor = Hash256.from_rev_hex(fields["anchor"])
        state.synced = fields.get("synced", "1") == "1"
        state.outbound_txs.extend(queued)
        return state
