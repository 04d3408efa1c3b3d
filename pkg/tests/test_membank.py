import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodealign.membank import (BankFormatError, MemoryBank, bank_update, hallucinate,
                               missing_categories)
from nodealign.nodes import NodeSet
from nodealign.numerics import Tensor


def nodes(emb, labels, hallucinated=None):
    emb = np.asarray(emb, dtype=float)
    return NodeSet(Tensor(emb.reshape(len(labels), emb.shape[-1])),
                   np.asarray(labels), "source", hallucinated)


def test_empty_update_is_noop():
    bank = MemoryBank.empty(4, 2)
    out = bank_update(bank, nodes(np.zeros((0, 2)), []))
    assert np.array_equal(out.prototypes, bank.prototypes) and not out.seen.any()


def test_first_and_second_update():
    bank = bank_update(MemoryBank.empty(4, 2), nodes([[1, 1], [3, 3]], [2, 2]))
    np.testing.assert_array_equal(bank.prototypes[2], [2, 2])
    assert bank.seen.tolist() == [False, False, True, False]
    bank = bank_update(bank, nodes([[4, 4]], [2]))
    np.testing.assert_allclose(bank.prototypes[2], [2.2, 2.2], rtol=1e-14)
    np.testing.assert_array_equal(bank.prototypes[0], [0, 0])


def test_update_does_not_mutate_input():
    bank = MemoryBank.empty(3, 2)
    bank_update(bank, nodes([[1, 1]], [0]))
    assert not bank.seen.any()


def test_hallucinated_nodes_are_ignored():
    bank = bank_update(MemoryBank.empty(3, 2), nodes([[1, 1], [9, 9]], [0, 1], [False, True]))
    assert bank.seen.tolist() == [True, False, False]


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(1, 30))
def test_geometric_convergence(eta, steps):
    bank = MemoryBank(np.zeros((2, 3)), np.array([True, False]), eta)
    target = np.array([1.0, -2.0, 0.5])
    gap = np.abs(bank.prototypes[0] - target)
    for _ in range(steps):
        bank = bank_update(bank, nodes([target], [0]))
    np.testing.assert_allclose(np.abs(bank.prototypes[0] - target), gap * eta ** steps,
                               rtol=1e-9, atol=1e-14)


def test_missing_categories():
    bank = MemoryBank(np.zeros((4, 2)), np.array([True, True, True, False]))
    assert missing_categories(bank, nodes(np.zeros((2, 2)), [0, 2])) == {1}
    assert missing_categories(bank, nodes(np.zeros((3, 2)), [0, 1, 2])) == set()
    assert missing_categories(MemoryBank.empty(4, 2), nodes(np.zeros((1, 2)), [0])) == set()


def test_hallucinate_contracts():
    bank = MemoryBank(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([True, True]))
    out = hallucinate(bank, {1}, per_cat=3, noise=0.0, seed=0)
    assert len(out) == 3 and out.labels.tolist() == [1, 1, 1]
    assert out.hallucinated.all()
    assert np.array_equal(out.embeddings.data, np.tile([3.0, 4.0], (3, 1)))
    assert len(hallucinate(bank, set(), seed=0)) == 0
    a = hallucinate(bank, {0, 1}, seed=5).embeddings.data
    b = hallucinate(bank, {0, 1}, seed=5).embeddings.data
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        hallucinate(MemoryBank.empty(2, 2), {0})


def test_serialization_roundtrip(tmp_path):
    bank = bank_update(MemoryBank.empty(3, 4, momentum=0.8),
                       nodes(np.random.default_rng(0).normal(size=(4, 4)), [0, 0, 2, 2]))
    bank.save(tmp_path / "bank.bin")
    back = MemoryBank.load(tmp_path / "bank.bin")
    assert np.array_equal(back.prototypes, bank.prototypes)
    assert np.array_equal(back.seen, bank.seen) and back.momentum == 0.8
    import json, struct
    blob = bank.to_bytes()
    (n,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4:4 + n])
    header["version"] = 99
    raw = json.dumps(header).encode()
    with pytest.raises(BankFormatError):
        MemoryBank.from_bytes(struct.pack("<I", len(raw)) + raw + blob[4 + n:])
