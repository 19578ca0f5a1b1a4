import numpy as np
import pytest
import torch

from cognigraph.arch_graph import VertexRecord, lw_slices
from cognigraph.vertex_encoder import VARIANTS, VEN, EncodingError, encode_vertex, encode_vertices, feature_dim, ven_forward

CLOSED_FORM = {
    ("op", "top5"): 10, ("op", "hist"): 10,
    ("lw", "top5"): 95, ("lw", "hist"): 190,
    ("oplw_c", "top5"): 105, ("oplw_c", "hist"): 200,
    ("oplw_w", "top5"): 100, ("oplw_w", "hist"): 195,
    ("oplw_ven", "top5"): 100, ("oplw_ven", "hist"): 195,
}


def _record(rng, mode="top5", kind="regular"):
    a = rng.standard_normal(10)
    if kind == "down":
        a[6:9] = 0.0
    return VertexRecord("visual", "visual.b4", "regular", 1, (1, 3), kind, a, rng.standard_normal(95 if mode == "top5" else 190))


@pytest.mark.parametrize("variant,mode", sorted(CLOSED_FORM))
def test_dimensions(variant, mode, rng):
    ven = VEN(95 if mode == "top5" else 190).double()
    out = encode_vertex(_record(rng, mode), ven, variant, mode)
    assert out.shape == (CLOSED_FORM[(variant, mode)],) == (feature_dim(variant, mode),)


def test_unknown_variant():
    with pytest.raises(EncodingError):
        feature_dim("opl", "top5")
    with pytest.raises(EncodingError):
        encode_vertices(torch.zeros(10), torch.zeros(95), "mean", "top5")
    assert len(VARIANTS) == 5


def test_ven_matches_straight_line_mlp(rng):
    torch.manual_seed(0)
    ven = VEN(95).double()
    x = rng.standard_normal(5)
    W = [ven.net[i].weight.detach().numpy() for i in (0, 2, 4)]
    b = [ven.net[i].bias.detach().numpy() for i in (0, 2, 4)]
    h1 = [max(0.0, sum(W[0][r, c] * x[c] for c in range(5)) + b[0][r]) for r in range(60)]
    h2 = [max(0.0, sum(W[1][r, c] * h1[c] for c in range(60)) + b[1][r]) for r in range(60)]
    y = np.array([sum(W[2][r, c] * h2[c] for c in range(60)) + b[2][r] for r in range(95)])
    assert np.abs(ven_forward(x, ven).detach().numpy() - y).max() < 1e-6


def test_zero_ven_gives_output_bias():
    ven = VEN(95)
    with torch.no_grad():
        for p in ven.parameters():
            p.zero_()
        ven.net[4].bias.copy_(torch.arange(95.0))
    assert torch.equal(ven_forward(np.ones(5), ven), torch.arange(95.0))
    with pytest.raises(EncodingError):
        ven_forward(np.ones(4), ven)


def test_zero_lw_annihilates_ven_part(rng):
    rec = _record(rng)
    rec.lw = np.zeros(95)
    out = encode_vertex(rec, VEN(95).double(), "oplw_ven").detach().numpy()
    assert np.array_equal(out[:5], rec.unweighted_alphas) and np.all(out[5:] == 0)


def test_op_variant_keeps_masked_zeros(rng):
    rec = _record(rng, kind="down")
    out = encode_vertex(rec, None, "op").numpy()
    assert np.all(out[6:9] == 0) and np.array_equal(out, rec.op_alphas)


@pytest.mark.parametrize("mode", ["top5", "hist"])
def test_oplw_w_matches_per_op_scaling(mode, rng):
    rec = _record(rng, mode)
    out = encode_vertex(rec, None, "oplw_w", mode).numpy()
    weighted = [2, 3, 4, 5, 6]
    ref = list(rec.op_alphas[[0, 1, 7, 8, 9]])
    for op, sl in zip(weighted, lw_slices(mode)):
        ref += [rec.op_alphas[op] * s for s in rec.lw[sl]]
    assert np.abs(out - np.array(ref)).max() < 1e-7


def test_oplw_w_homogeneous_in_lw(rng):
    rec = _record(rng)
    a = encode_vertex(rec, None, "oplw_w").numpy()
    rec.lw = 3.0 * rec.lw
    b = encode_vertex(rec, None, "oplw_w").numpy()
    assert np.allclose(b[5:], 3.0 * a[5:]) and np.array_equal(a[:5], b[:5])


def test_ven_gradient_matches_finite_differences(rng):
    torch.manual_seed(1)
    ven = VEN(95).double()
    a = torch.from_numpy(rng.standard_normal((2, 10)))
    s = torch.from_numpy(rng.standard_normal((2, 95)))
    target = torch.from_numpy(rng.standard_normal((2, 100)))

    def loss():
        return ((encode_vertices(a, s, "oplw_ven", "top5", ven) - target) ** 2).mean()

    ven.zero_grad()
    loss().backward()
    for p in ven.parameters():
        flat = p.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 5)):
            g = float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + 1e-6
                up = float(loss())
                flat[idx] = orig - 1e-6
                down = float(loss())
                flat[idx] = orig
            fd = (up - down) / 2e-6
            if max(abs(g), abs(fd)) > 1e-8:
                assert abs(g - fd) / max(abs(g), abs(fd)) < 1e-3
