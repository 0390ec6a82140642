import math

import numpy as np
import pytest

from gexmap.errors import ArgumentError, DimensionError, NumericError
from gexmap.objective import (
    combined_loss,
    combined_loss_terms,
    metrics_report,
    mse_loss,
    pcc,
    pcc_columns,
    pcc_loss,
    summarize_pcc,
)
from gexmap.tensor import Tensor, gradcheck


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def pearson_oracle(a, b, eps=1e-8):
    """Population moments, cov / (std_a * std_b + eps)."""
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    va = math.fsum((x - ma) ** 2 for x in a) / n
    vb = math.fsum((y - mb) ** 2 for y in b) / n
    return cov / (math.sqrt(va) * math.sqrt(vb) + eps)


def test_mse_examples():
    assert mse_loss(t64([[1.0, 2.0]]), [[1.0, 2.0]]).item() == 0.0
    assert mse_loss(t64(np.zeros((3, 2)) + 2), np.zeros((3, 2))).item() == 4.0
    rng = np.random.default_rng(0)
    p, q = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    expect = sum((p[i, j] - q[i, j]) ** 2 for i in range(3) for j in range(2)) / 6
    assert abs(mse_loss(t64(p), q).item() - expect) < 1e-12
    with pytest.raises(DimensionError):
        mse_loss(t64(np.zeros((3, 2))), np.zeros((2, 3)))


def test_pcc_examples():
    assert abs(pcc([1, 2, 3], [2, 4, 6])[0] - 1.0) < 1e-6
    assert abs(pcc([1, 2, 3], [3, 2, 1])[0] + 1.0) < 1e-6
    r, degenerate = pcc([1, 2, 3, 4], [1, 3, 2, 4])
    assert abs(r - 0.8) < 1e-8 and not degenerate
    with pytest.raises(ArgumentError):
        pcc([1.0], [2.0])


def test_pcc_degenerate():
    assert pcc([1, 1, 1], [1, 2, 3]) == (0.0, True)
    assert pcc([1, 2, 3], [5, 5, 5]) == (0.0, True)


def test_pcc_scale_shift_invariance():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    base = pcc(a, b, eps=0.0)[0]
    for alpha, beta in [(0.3, 2.0), (7.0, -1.0), (1e-2, 0.0)]:
        assert abs(pcc(alpha * a + beta, b, eps=0.0)[0] - base) < 1e-10
        assert abs(pcc(-alpha * a + beta, b, eps=0.0)[0] + base) < 1e-10
        # the eps in the denominator shifts r by at most eps / (std_a * std_b)
        bound = 1e-8 / (alpha * a.std() * b.std())
        assert abs(pcc(alpha * a + beta, b)[0] - base) <= bound


def test_pcc_loss_examples():
    rng = np.random.default_rng(2)
    y = rng.uniform(0, 5, (8, 3))
    assert pcc_loss(t64(y), y).item() <= 1e-6
    assert abs(pcc_loss(t64(-y), y).item() - 2.0) <= 1e-6
    with pytest.raises(NumericError):
        pcc_loss(t64(y), np.ones((8, 3)))


def test_pcc_loss_skips_constant_target_genes():
    rng = np.random.default_rng(3)
    y = rng.uniform(0, 5, (8, 3))
    y[:, 1] = 2.0
    pred = y + rng.normal(0, 0.1, y.shape)
    r0 = pcc(pred[:, 0], y[:, 0])[0]
    r2 = pcc(pred[:, 2], y[:, 2])[0]
    assert abs(pcc_loss(t64(pred), y).item() - (1 - (r0 + r2) / 2)) < 1e-12


def test_pcc_loss_gradcheck():
    rng = np.random.default_rng(4)
    pred = t64(rng.standard_normal((5, 3)), grad=True)
    y = rng.uniform(0, 2, (5, 3))
    assert gradcheck(lambda p: pcc_loss(p, y), [pred], tol=1e-4).passed


def test_constant_prediction_gets_zero_gradient():
    pred = t64(np.full((4, 2), 3.0), grad=True)
    r, degenerate = pcc_columns(pred, np.array([[1.0, 0], [2, 1], [3, 0], [4, 1]]))
    r.sum().backward()
    assert degenerate.tolist() == [True, True]
    assert not np.any(pred.grad)


def test_combined_examples():
    rng = np.random.default_rng(5)
    p, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    assert combined_loss(t64(p), y, 0.0).item() == mse_loss(t64(p), y).item()
    assert combined_loss(t64(p), y, 1.0, use_mse=False).item() == pcc_loss(t64(p), y).item()
    assert abs(combined_loss(t64(y), y, 1.0).item()) <= 1e-6
    terms = combined_loss_terms(t64(p), y, 0.5)
    assert terms.total.item() == terms.mse + 0.5 * terms.pcc


def test_combined_argument_errors():
    p = t64(np.ones((3, 2)))
    with pytest.raises(ArgumentError):
        combined_loss(p, np.ones((3, 2)), -1.0)
    with pytest.raises(ArgumentError):
        combined_loss(p, np.ones((3, 2)), 0.5, use_mse=False, use_pcc=False)
    with pytest.raises(ArgumentError):
        combined_loss(p, np.ones((3, 2)), 0.0, use_mse=False)


def test_metrics_identity():
    y = np.random.default_rng(6).uniform(0, 3, (10, 4))
    rep = metrics_report(y, y)
    assert rep.mse == 0 and rep.mae == 0
    assert abs(rep.pcc_m - 1) < 1e-6


def test_quartiles_of_three():
    assert summarize_pcc([0.0, 0.5, 1.0]) == (0.25, 0.5, 0.5)


def test_metrics_against_oracle():
    rng = np.random.default_rng(7)
    p, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    rep = metrics_report(p, y)
    cells = [(i, j) for i in range(6) for j in range(4)]
    assert abs(rep.mse - sum((p[c] - y[c]) ** 2 for c in cells) / 24) < 1e-12
    assert abs(rep.mae - sum(abs(p[c] - y[c]) for c in cells) / 24) < 1e-12
    for g in range(4):
        assert abs(rep.pcc_per_gene[g] - pearson_oracle(p[:, g].tolist(), y[:, g].tolist())) < 1e-12
    assert rep.pcc_m == float(np.mean(rep.pcc_per_gene))
    assert rep.pcc_f <= rep.pcc_s


def test_metrics_degenerate_genes_counted():
    rng = np.random.default_rng(8)
    y = rng.uniform(0, 3, (6, 3))
    y[:, 0] = 1.0
    rep = metrics_report(rng.standard_normal((6, 3)), y)
    assert rep.n_degenerate_genes == 1
    assert len(rep.pcc_per_gene) == 2


def test_metrics_csv():
    y = np.random.default_rng(9).uniform(0, 3, (5, 2))
    text = metrics_report(y + 0.1, y).to_csv()
    lines = text.splitlines()
    assert lines[0] == "metric,value"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["mse", "mae", "pcc_f", "pcc_s", "pcc_m", "n_degenerate_genes"]


def test_jensen():
    rng = np.random.default_rng(10)
    for _ in range(50):
        shape = tuple(rng.integers(2, 8, 2))
        rep = metrics_report(rng.standard_normal(shape) * 3, rng.standard_normal(shape))
        assert 0 <= rep.mae**2 <= rep.mse + 1e-15


def test_pcc_bounds():
    rng = np.random.default_rng(11)
    for _ in range(50):
        rep = metrics_report(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))
        assert np.all(np.abs(rep.pcc_per_gene) <= 1)
