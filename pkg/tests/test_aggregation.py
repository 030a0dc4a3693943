import pytest
import torch

from fsr.aggregation import (
    Aggregator,
    MCABlock,
    NoAttendableTokenError,
    masked_attention,
    pool_gap,
    pool_gmp,
)


def softmax_oracle(logits, mask):
    """Softmax recomputed over the unmasked subset only, zeros elsewhere."""
    keep = [i for i, m in enumerate(mask) if not m]
    mx = max(logits[i] for i in keep)
    exps = {i: torch.exp(torch.tensor(logits[i] - mx, dtype=torch.float64)).item() for i in keep}
    total = sum(exps.values())
    return [exps[i] / total if i in exps else 0.0 for i in range(len(logits))]


def test_single_unmasked_token_gets_weight_one():
    q = torch.randn(1, 1, 8)
    k = torch.randn(1, 5, 8)
    mask = torch.tensor([[True, True, False, True, True]])
    a = masked_attention(q, k, mask)
    assert a[0, 0, 2].item() == 1.0
    assert torch.count_nonzero(a) == 1


def test_equal_logits_uniform_over_unmasked():
    q = torch.zeros(1, 1, 4)
    k = torch.randn(1, 6, 4)
    mask = torch.tensor([[False, True, False, False, True, False]])
    a = masked_attention(q, k, mask)[0, 0]
    assert torch.all(a[mask[0]] == 0)
    torch.testing.assert_close(a[~mask[0]], torch.full((4,), 0.25))


def test_random_attention_against_oracle():
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        q = torch.randn(1, 1, 8, generator=g, dtype=torch.float64)
        k = torch.randn(1, 12, 8, generator=g, dtype=torch.float64)
        mask = torch.rand(1, 12, generator=g) < 0.5
        mask[0, torch.randint(12, (1,), generator=g)] = False
        a = masked_attention(q, k, mask)[0, 0]
        logits = (q[0, 0] @ k[0].T / 8 ** 0.5).tolist()
        torch.testing.assert_close(a, torch.tensor(softmax_oracle(logits, mask[0].tolist()),
                                                   dtype=torch.float64), rtol=0, atol=1e-12)
        assert torch.all(a[mask[0]] == 0)
        assert abs(a.sum().item() - 1) < 1e-6


def test_all_masked_raises():
    block = MCABlock(8, 16)
    with pytest.raises(NoAttendableTokenError):
        block(torch.randn(1, 1, 8), torch.randn(1, 4, 8), torch.ones(1, 4, dtype=torch.bool))
    with pytest.raises(NoAttendableTokenError):
        pool_gap(torch.randn(1, 4, 8), torch.ones(1, 4, dtype=torch.bool))


def test_pool_examples():
    x = torch.tensor([[[1.0, 3.0], [3.0, 1.0]]])
    none = torch.zeros(1, 2, dtype=torch.bool)
    assert pool_gap(x, none).tolist() == [[[2.0, 2.0]]]
    assert pool_gmp(x, none).tolist() == [[[3.0, 3.0]]]
    one = torch.tensor([[True, False]])
    assert pool_gap(x, one).tolist() == [[[3.0, 1.0]]]
    assert pool_gmp(x, one).tolist() == [[[3.0, 1.0]]]


@pytest.mark.parametrize("kind", ["mca", "gap", "gmp"])
def test_masked_tokens_have_no_influence(kind):
    torch.manual_seed(0)
    agg = Aggregator(16, 32, depth=2, kind=kind)
    patches = torch.randn(2, 10, 16)
    mask = torch.rand(2, 10) < 0.4
    mask[:, 0] = False
    base = agg(patches)
    out = agg(patches, mask)
    perturbed = patches.clone()
    perturbed[mask] += torch.randn(int(mask.sum()), 16) * 100
    assert torch.equal(agg(perturbed, mask), out)
    assert base.shape == (2, 1, 16)


@pytest.mark.parametrize("kind", ["mca", "gap", "gmp"])
def test_order_invariance(kind):
    torch.manual_seed(1)
    agg = Aggregator(16, 32, depth=2, kind=kind).double()
    patches = torch.randn(1, 9, 16, dtype=torch.float64)
    mask = torch.tensor([[False, True, False, False, True, False, False, False, True]])
    perm = torch.randperm(9)
    a = agg(patches, mask)
    b = agg(patches[:, perm], mask[:, perm])
    torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)


def test_mca_returns_attention_per_block():
    agg = Aggregator(8, 16, depth=2)
    mask = torch.zeros(3, 5, dtype=torch.bool)
    out, attns = agg(torch.randn(3, 5, 8), mask, return_attention=True)
    assert out.shape == (3, 1, 8)
    assert len(attns) == 2 and attns[0].shape == (3, 1, 5)


def test_bad_kind():
    with pytest.raises(ValueError):
        Aggregator(8, 16, kind="cls")
    with pytest.raises(ValueError):
        Aggregator(8, 16, depth=0, kind="mca")
