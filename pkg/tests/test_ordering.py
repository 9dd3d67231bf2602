"""Tests for endorsement policies, block cutting, validation flags and the orderer."""

import dataclasses
import itertools
import random
from collections.abc import Callable

import pytest

from ci_ledger.chaincode import (
    BUILTIN_CONTRACTS,
    LIFECYCLE,
    ContractError,
    ContractFunction,
    ContractRegistry,
    InvocationContext,
    contract,
)
from ci_ledger.identity import OrgMaterials, PermissionDenied, Role
from ci_ledger.ledger import ChainFault, Endorsement, Transaction, TxFlag
from ci_ledger.network import Network
from ci_ledger.ordering import (
    And,
    BadProposal,
    BlockCutConfig,
    ConfigError,
    EndorsementMismatch,
    Or,
    Org,
    Orderer,
    OutOf,
    PendingTx,
    PeerUnavailable,
    PolicyError,
    UnknownChannel,
    audit_chain,
    cut_blocks,
    evaluate_policy,
    format_policy,
    parse_policy,
    policy_orgs,
)

CHANNEL = "main"
ORGS = ("Org1", "Org2", "Org3", "Org4")
ACCOUNTS = [f"acct{i}" for i in range(5)]


def _mint(ctx: InvocationContext, args: list[str]) -> None:
    for key in args:
        ctx.put_state(key, b"100")


def _transfer(ctx: InvocationContext, args: list[str]) -> dict:
    src, dst, amount = args[0], args[1], int(args[2])
    balance = int(ctx.get_state(src) or b"0")
    if balance < amount:
        raise ContractError("InsufficientFunds", src)
    ctx.put_state(src, str(balance - amount).encode())
    ctx.put_state(dst, str(int(ctx.get_state(dst) or b"0") + amount).encode())
    return {"moved": amount}


BANK = contract(
    "bank",
    "1.0",
    ContractFunction("mint", _mint),
    ContractFunction("transfer", _transfer),
)


def _tx(i: int, channel: str = CHANNEL) -> Transaction:
    return Transaction.create(channel, "kv", "put", [str(i)], "creator", i.to_bytes(8, "big"))


def _random_policy(rng: random.Random, depth: int = 0):
    if depth >= 3 or rng.random() < 0.3:
        return Org(rng.choice(ORGS))
    children = tuple(_random_policy(rng, depth + 1) for _ in range(rng.randint(1, 3)))
    kind = rng.choice(("And", "Or", "OutOf"))
    if kind == "And":
        return And(children)
    if kind == "Or":
        return Or(children)
    return OutOf(rng.randint(1, len(children)), children)


def _oracle(policy, orgs: frozenset[str]) -> bool:
    """Reference semantics: OutOf holds when some k-subset of children all hold."""
    if isinstance(policy, Org):
        return policy.name in orgs
    if isinstance(policy, And):
        return all(_oracle(c, orgs) for c in policy.children)
    if isinstance(policy, Or):
        return any(_oracle(c, orgs) for c in policy.children)
    return any(
        all(_oracle(c, orgs) for c in combo)
        for combo in itertools.combinations(policy.children, policy.k)
    )


class TestPolicies:
    """Tests for endorsement policy parsing and evaluation."""

    @pytest.mark.parametrize(
        "text",
        [
            "Org1",
            "And(Org1, Org2)",
            "Or(Org1, Org2, Org3)",
            "OutOf(2, Org1, Org2, Org3)",
            "OutOf(1, Org1, And(Org2, Org3))",
        ],
    )
    def test_format_parse_roundtrip(self, text: str) -> None:
        """Test formatting a parsed policy gives the input back."""
        assert format_policy(parse_policy(text)) == text

    def test_whitespace_tolerated(self) -> None:
        """Test spacing does not matter."""
        assert parse_policy("And(Org1,Org2)") == parse_policy("  And( Org1 , Org2 ) ")

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "And()",
            "Or(Org1,)",
            "And(Org1",
            "Org1 Org2",
            "OutOf(3, Org1, Org2)",
            "OutOf(0, Org1)",
            "OutOf(Org1, Org2)",
            "3",
            "Org1$",
        ],
    )
    def test_malformed(self, text: str) -> None:
        """Test malformed policies raise PolicyError."""
        with pytest.raises(PolicyError):
            parse_policy(text)

    def test_empty_children_rejected(self) -> None:
        """Test nodes without operands are refused at construction."""
        with pytest.raises(PolicyError):
            And(())
        with pytest.raises(PolicyError):
            OutOf(1, ())

    def test_examples(self) -> None:
        """Test hand-checked evaluations."""
        policy = parse_policy("OutOf(2, Org1, Org2, Org3)")
        assert not evaluate_policy(policy, {"Org1"})
        assert evaluate_policy(policy, {"Org1", "Org3"})
        assert evaluate_policy(parse_policy("Or(Org1, Org2)"), ["Org2"])
        assert not evaluate_policy(parse_policy("And(Org1, Org2)"), [])

    def test_orgs_mentioned(self) -> None:
        """Test policy_orgs collects every leaf."""
        assert policy_orgs(parse_policy("OutOf(1, Org1, And(Org2, Org1))")) == {"Org1", "Org2"}

    @pytest.mark.slow
    def test_matches_brute_force(self) -> None:
        """Test evaluation agrees with the subset oracle on random policies."""
        rng = random.Random(7)
        subsets = [
            frozenset(c) for r in range(len(ORGS) + 1) for c in itertools.combinations(ORGS, r)
        ]
        assert len(subsets) == 16
        for _ in range(2000):
            policy = _random_policy(rng)
            assert parse_policy(format_policy(policy)) == policy
            for orgs in subsets:
                assert evaluate_policy(policy, orgs) == _oracle(policy, orgs), (policy, orgs)


class TestBlockCutting:
    """Tests for cut_blocks and BlockCutConfig."""

    def test_size_limit(self) -> None:
        """Test 25 simultaneous transactions cut into 10, 10 and 5."""
        pending = [PendingTx(_tx(i), 0) for i in range(25)]
        batches = cut_blocks(pending, BlockCutConfig(), None)
        assert [len(b) for b in batches] == [10, 10, 5]
        assert [tx for b in batches for tx in b] == [p.transaction for p in pending]

    def test_partial_batch_waits(self) -> None:
        """Test an underfull batch stays pending until max_wait elapses."""
        pending = [PendingTx(_tx(i), 0) for i in range(25)]
        assert [len(b) for b in cut_blocks(pending, BlockCutConfig(), 0)] == [10, 10]
        assert [len(b) for b in cut_blocks(pending, BlockCutConfig(), 500)] == [10, 10, 5]

    def test_time_limit(self) -> None:
        """Test a late arrival starts a new batch."""
        pending = [PendingTx(_tx(0), 0), PendingTx(_tx(1), 100), PendingTx(_tx(2), 600)]
        batches = cut_blocks(pending, BlockCutConfig(max_tx_per_block=10, max_wait_ms=500))
        assert [len(b) for b in batches] == [2, 1]
        held = cut_blocks(pending, BlockCutConfig(max_wait_ms=500), 700)
        assert [len(b) for b in held] == [2]

    def test_empty_queue(self) -> None:
        """Test nothing pending gives no batches."""
        assert cut_blocks([], BlockCutConfig(), None) == []

    @pytest.mark.parametrize("kwargs", [{"max_tx_per_block": 0}, {"max_wait_ms": -1}])
    def test_invalid_config(self, kwargs: dict) -> None:
        """Test out-of-range settings raise ConfigError."""
        with pytest.raises(ConfigError):
            BlockCutConfig(**kwargs)


class TestOrderer:
    """Tests for the orderer node."""

    @pytest.fixture
    def orderer(self, consortium: list[OrgMaterials]) -> Orderer:
        node = Orderer(consortium[0].signers(Role.ORDERER)[0], BlockCutConfig(3, 500))
        node.genesis(CHANNEL, _tx(0))
        return node

    def test_cut_respects_wait(self, orderer: Orderer) -> None:
        """Test blocks are cut by size or once the oldest tx has waited long enough."""
        for i in range(1, 5):
            orderer.submit(_tx(i), now_ms=0)
        assert [len(b.transactions) for b in orderer.cut(CHANNEL, 100)] == [3]
        assert orderer.pending(CHANNEL) == 1
        assert orderer.oldest_arrival(CHANNEL) == 0
        assert [b.height for b in orderer.cut(CHANNEL, 500)] == [2]
        assert orderer.height(CHANNEL) == 3
        assert orderer.blocks(CHANNEL, 1)[0].prev_hash == orderer.blocks(CHANNEL)[0].block_hash

    def test_rejects_forged_tx_id(self, orderer: Orderer) -> None:
        """Test a transaction whose id does not match its fields."""
        with pytest.raises(BadProposal):
            orderer.submit(dataclasses.replace(_tx(1), args=("edited",)))

    def test_unknown_channel(self, orderer: Orderer) -> None:
        """Test submitting to a channel without genesis."""
        with pytest.raises(UnknownChannel):
            orderer.submit(_tx(1, channel="other"))

    def test_second_genesis(self, orderer: Orderer) -> None:
        """Test a channel gets one genesis block."""
        with pytest.raises(Exception, match="already has a genesis"):
            orderer.genesis(CHANNEL, _tx(9))

    def test_needs_order_permission(self, consortium: list[OrgMaterials]) -> None:
        """Test a client identity cannot run the orderer."""
        with pytest.raises(PermissionDenied):
            Orderer(consortium[0].by_name("User1@org1"))


class TestValidation:
    """Tests for validation flags and serializable commits."""

    @pytest.fixture
    def bank(self, make_network: Callable[..., Network]) -> Network:
        registry = ContractRegistry((LIFECYCLE, *BUILTIN_CONTRACTS, BANK))
        net = make_network(registry=registry, extra_contracts=(BANK,))
        assert net.transact(CHANNEL, "bank", "mint", ACCOUNTS, net.client()).valid
        return net

    def _balances(self, net: Network) -> dict[str, int]:
        entries = net.chain(CHANNEL).state.entries
        return {a: int(entries[a].value) for a in ACCOUNTS}

    def _run_transfers(
        self, bank: Network, rng: random.Random, count: int, expected: dict[str, int]
    ) -> list[TxFlag]:
        """Endorse count concurrent transfers, commit them and replay the Valid ones serially."""
        height = bank.chain(CHANNEL).height
        for _ in range(count):
            src, dst = rng.sample(ACCOUNTS, 2)
            args = [src, dst, str(rng.randint(1, 3))]
            try:
                endorsed = bank.invoke_contract(CHANNEL, "bank", "transfer", args, bank.client())
            except ContractError:
                continue
            bank.submit(endorsed)
        bank.flush(CHANNEL)

        flags = []
        for block in bank.chain(CHANNEL).blocks[height:]:
            for tx, flag in zip(block.transactions, block.validation_flags):
                flags.append(flag)
                if flag is TxFlag.VALID:
                    src, dst, amount = tx.args[0], tx.args[1], int(tx.args[2])
                    expected[src] -= amount
                    expected[dst] += amount
        return flags

    def test_concurrent_transfers_serialize(self, bank: Network) -> None:
        """Test committed state equals a serial replay of the Valid transfers."""
        rng = random.Random(11)
        expected = self._balances(bank)
        for _ in range(3):
            flags = self._run_transfers(bank, rng, 30, expected)
            assert TxFlag.VALID in flags
            assert TxFlag.MVCC_CONFLICT in flags
            assert set(flags) <= {TxFlag.VALID, TxFlag.MVCC_CONFLICT}
            assert self._balances(bank) == expected
            assert sum(expected.values()) == 100 * len(ACCOUNTS)

    @pytest.mark.slow
    def test_many_workloads_serialize(self, bank: Network) -> None:
        """Test 200 workloads of 50 concurrent transfers each replay to the committed state."""
        rng = random.Random(12)
        expected = self._balances(bank)
        for workload in range(200):
            flags = self._run_transfers(bank, rng, 50, expected)
            assert set(flags) <= {TxFlag.VALID, TxFlag.MVCC_CONFLICT}, workload
            assert self._balances(bank) == expected, workload
        assert sum(expected.values()) == 100 * len(ACCOUNTS)

    def test_overdraft_refused_at_endorsement(self, bank: Network) -> None:
        """Test a contract error aborts before ordering."""
        with pytest.raises(ContractError, match="InsufficientFunds"):
            bank.invoke_contract(
                CHANNEL, "bank", "transfer", ["acct0", "acct1", "1000"], bank.client()
            )
        assert bank.orderer.pending(CHANNEL) == 0

    def test_bad_signature(self, bank: Network) -> None:
        """Test a corrupted endorsement flags BadSignature and leaves state alone."""
        before = self._balances(bank)
        endorsed = bank.invoke_contract(
            CHANNEL, "bank", "transfer", ["acct0", "acct1", "5"], bank.client()
        )
        first, *rest = endorsed.transaction.endorsements
        forged = dataclasses.replace(
            endorsed.transaction,
            endorsements=(Endorsement(first.key_id, bytes(64)), *rest),
        )
        bank.submit(forged)
        bank.flush(CHANNEL)
        assert bank.tx_flag(CHANNEL, forged.tx_id) is TxFlag.BAD_SIGNATURE
        assert self._balances(bank) == before

    def test_client_endorsement_is_bad_signature(self, bank: Network) -> None:
        """Test an endorsement by a non-peer identity is rejected."""
        endorsed = bank.invoke_contract(
            CHANNEL, "bank", "transfer", ["acct0", "acct1", "5"], bank.client()
        )
        tx = endorsed.transaction
        client = bank.client()
        extra = Endorsement(client.key_id, client.sign(tx.endorsement_payload()))
        bank.submit(dataclasses.replace(tx, endorsements=(*tx.endorsements, extra)))
        bank.flush(CHANNEL)
        assert bank.tx_flag(CHANNEL, tx.tx_id) is TxFlag.BAD_SIGNATURE

    def test_policy_fail(self, bank: Network) -> None:
        """Test a single-org endorsement under And(Org1, Org2)."""
        endorsed = bank.invoke_contract(
            CHANNEL,
            "bank",
            "transfer",
            ["acct0", "acct1", "5"],
            bank.client(),
            endorsers=[bank.peer("peer0.org1")],
        )
        bank.submit(endorsed)
        bank.flush(CHANNEL)
        assert bank.tx_flag(CHANNEL, endorsed.tx_id) is TxFlag.POLICY_FAIL

    def test_duplicate_tx_id(self, bank: Network) -> None:
        """Test resubmission in the same block and in a later block."""
        endorsed = bank.invoke_contract(
            CHANNEL, "bank", "transfer", ["acct0", "acct1", "5"], bank.client()
        )
        bank.submit(endorsed)
        bank.submit(endorsed)
        (block,) = bank.flush(CHANNEL)
        assert block.validation_flags == (TxFlag.VALID, TxFlag.DUPLICATE_TX_ID)
        bank.submit(endorsed)
        (later,) = bank.flush(CHANNEL)
        assert later.validation_flags == (TxFlag.DUPLICATE_TX_ID,)
        assert self._balances(bank)["acct0"] == 95

    def test_all_peers_agree(self, bank: Network) -> None:
        """Test every peer ends with the same chain fingerprint."""
        bank.transact(CHANNEL, "bank", "transfer", ["acct2", "acct3", "7"], bank.client())
        fingerprints = {p.chain(CHANNEL).fingerprint() for p in bank.peers}
        assert len(fingerprints) == 1


class TestEndorsement:
    """Tests for endorsement collection."""

    def test_stale_peer_mismatch_then_sync(self, network: Network) -> None:
        """Test a peer that missed a block disagrees until it catches up."""
        digest = "e" * 64
        args = [digest, "app", "1.0", "f" * 64]
        stale = network.peer("peer0.org2")
        stale.online = False
        assert network.transact(CHANNEL, "provenance", "register", args, network.client()).valid
        stale.online = True
        assert stale.chain(CHANNEL).height < network.orderer.height(CHANNEL)

        endorsers = [network.peer("peer0.org1"), stale]
        with pytest.raises(EndorsementMismatch):
            network.invoke_contract(
                CHANNEL, "provenance", "register", args, network.client(), endorsers=endorsers
            )

        network.sync(stale, CHANNEL)
        assert stale.chain(CHANNEL).fingerprint() == network.chain(CHANNEL).fingerprint()
        endorsed = network.invoke_contract(
            CHANNEL, "provenance", "register", args, network.client(), endorsers=endorsers
        )
        assert endorsed.result["status"] == "AlreadyRegistered"

    def test_offline_endorser(self, network: Network) -> None:
        """Test naming an offline peer as endorser."""
        peer = network.peer("peer0.org1")
        peer.online = False
        with pytest.raises(PeerUnavailable):
            network.invoke_contract(
                CHANNEL, "provenance", "verify", ["e" * 64], network.client(), endorsers=[peer]
            )


class TestAudit:
    """Tests for audit_chain."""

    def test_clean_chain_passes(self, network: Network) -> None:
        """Test a committed chain replays to the same flags."""
        assert audit_chain(network.chain(CHANNEL).blocks, network.membership)

    def test_flag_tamper_detected(self, network: Network) -> None:
        """Test an edited validation flag is reported as FlagMismatch."""
        blocks = list(network.chain(CHANNEL).blocks)
        last = blocks[-1]
        blocks[-1] = last.with_flags([TxFlag.MVCC_CONFLICT] * len(last.transactions))
        check = audit_chain(blocks, network.membership)
        assert not check
        assert check.height == last.height
        assert check.reason is ChainFault.FLAG_MISMATCH
        assert "stored MvccConflict" in check.detail
