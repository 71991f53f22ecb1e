import itertools

import numpy as np
import pytest
import torch

from conftest import rel_grad_error
from toothseg.errors import ConfigError
from toothseg.mesh import CellCloud
from toothseg.nn import (
    GeometricAffine,
    GeometryBranch,
    GeometryBranchConfig,
    ResPBlock,
    StageConfig,
    farthest_point_sample,
    geometric_affine,
    geometry_forward,
    interpolate_features,
    knn,
)


def _tiny_cfg(in_dim=6, **kw):
    stages = [StageConfig(32, 8, 1, 1, 16), StageConfig(8, 4, 1, 1, 24)]
    return GeometryBranchConfig(in_dim=in_dim, embed_dim=8, stages=stages, out_dim=12, **kw)


def _cloud(n=64, seed=0, mode="B_N"):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    f = b if mode == "B" else np.concatenate([b, nrm], 1)
    return CellCloud(f, mode, b)


# --- sampling and neighborhoods ------------------------------------------------


def test_fps_full_is_permutation(rng):
    pts = rng.random((20, 3))
    idx = farthest_point_sample(pts, 20)
    assert sorted(idx.tolist()) == list(range(20))


def test_fps_square_picks_diagonal():
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    idx = set(farthest_point_sample(sq, 2).tolist())
    assert idx in ({0, 2}, {1, 3})


def test_fps_beats_random_subsets(rng):
    pts = rng.random((64, 3))

    def min_gap(sel):
        p = pts[sel]
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        return d[np.triu_indices(len(sel), 1)].min()

    ours = min_gap(farthest_point_sample(pts, 16))
    others = [min_gap(rng.choice(64, 16, replace=False)) for _ in range(1000)]
    assert ours >= max(others)


def test_fps_content_determined_start(rng):
    pts = rng.random((30, 3))
    perm = rng.permutation(30)
    a = farthest_point_sample(pts, 10)
    b = farthest_point_sample(pts[perm], 10)
    np.testing.assert_array_equal(perm[b], a)


def test_fps_errors(rng):
    with pytest.raises(ConfigError):
        farthest_point_sample(rng.random((5, 3)), 6)


def test_knn_matches_sort(rng):
    q = torch.as_tensor(rng.random((1, 10, 3)))
    r = torch.as_tensor(rng.random((1, 25, 3)))
    idx = knn(q, r, 4)
    d = ((q[0, :, None] - r[0, None]) ** 2).sum(-1)
    np.testing.assert_array_equal(idx[0].numpy(), d.argsort(dim=-1)[:, :4].numpy())


def test_interpolation_weights(rng):
    fine = torch.tensor([[[0.0, 0, 0]]], dtype=torch.float64)
    coarse = torch.tensor([[[1.0, 0, 0], [0, 2, 0], [0, 0, 4], [9, 9, 9]]], dtype=torch.float64)
    feats = torch.tensor([[[1.0], [2.0], [3.0], [100.0]]], dtype=torch.float64)
    w = np.array([1 / 1, 1 / 2, 1 / 4])
    expect = (w * [1, 2, 3]).sum() / w.sum()
    out = interpolate_features(fine, coarse, feats, k=3, eps=0.0)
    assert abs(out.item() - expect) < 1e-12


# --- GAM ----------------------------------------------------------------------


def test_gam_zero_difference():
    c = torch.randn(5, 4)
    nb = c.unsqueeze(1).expand(5, 3, 4)
    assert torch.count_nonzero(geometric_affine(nb, c)) == 0


def test_gam_affine_collapse():
    nb, c = torch.randn(5, 3, 4), torch.randn(5, 4)
    beta = torch.tensor([0.5, -1.0, 2.0, 0.0])
    out = geometric_affine(nb, c, alpha=torch.zeros(4), beta=beta)
    assert torch.equal(out, beta.expand_as(out))


@pytest.mark.parametrize("seed", range(5))
def test_gam_moments(seed):
    g = torch.Generator().manual_seed(seed)
    nb = torch.randn(32, 8, 8, generator=g, dtype=torch.float64)
    c = nb.mean(dim=1) + 0.1 * torch.randn(32, 8, generator=g, dtype=torch.float64)
    out = geometric_affine(nb, c)
    assert out.numel() >= 1000
    assert abs(out.mean().item()) < 5e-2
    assert abs(out.std(correction=0).item() - 1) < 5e-2


@pytest.mark.parametrize("seed", range(3))
def test_gam_matches_recomputation(seed):
    g = torch.Generator().manual_seed(seed)
    nb = torch.randn(16, 8, 12, generator=g, dtype=torch.float64) * 3 + 1
    c = torch.randn(16, 12, generator=g, dtype=torch.float64)
    d = nb - c.unsqueeze(-2)
    sigma = d.std(correction=0)  # one scalar for the whole group tensor
    torch.testing.assert_close(geometric_affine(nb, c), d / (sigma + 1e-5), rtol=0, atol=1e-12)


def test_gam_batched_sigma_is_per_sample():
    a = torch.randn(1, 4, 3, 5)
    b = 100 * torch.randn(1, 4, 3, 5)
    c = torch.zeros(1, 4, 5)
    both = geometric_affine(torch.cat([a, b]), torch.cat([c, c]))
    torch.testing.assert_close(both[0], geometric_affine(a, c)[0])


def test_gam_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        GeometricAffine(4, eps=0.0)


def test_gam_gradient():
    torch.manual_seed(0)
    alpha, beta = torch.randn(6), torch.randn(6)
    err = rel_grad_error(lambda n, c, a, b: geometric_affine(n, c, a, b), [torch.randn(4, 5, 6), torch.randn(4, 6), alpha, beta])
    assert err < 1e-4


# --- ResP ---------------------------------------------------------------------


def test_resp_identity_when_last_norm_zeroed():
    blk = ResPBlock(16)
    with torch.no_grad():
        blk.net2.norm.weight.zero_()
        blk.net2.norm.bias.zero_()
    x = torch.randn(2, 8, 16)
    torch.testing.assert_close(blk(x), x, rtol=0, atol=0)


@pytest.mark.parametrize("shape", [(3, 16), (2, 7, 5), (1, 2, 3, 9)])
def test_resp_shape(shape):
    assert ResPBlock(shape[-1])(torch.randn(*shape)).shape == shape


def test_resp_gradient():
    torch.manual_seed(0)
    blk = ResPBlock(16).double()
    assert rel_grad_error(blk, [torch.randn(8, 16)]) < 1e-4


# --- full branch --------------------------------------------------------------


def test_branch_output_shape_at_1024():
    cfg = GeometryBranchConfig.desk(1024, in_dim=6)
    out = geometry_forward(_cloud(1024), cfg)
    assert out.shape == (1024, cfg.out_dim)
    assert torch.isfinite(out).all()


def test_branch_permutation_equivariant():
    torch.manual_seed(0)
    cfg = _tiny_cfg()
    model = GeometryBranch(cfg).double().eval()
    c = _cloud(48)
    perm = np.random.default_rng(1).permutation(48)
    pc = CellCloud(c.features[perm], c.mode, c.barycenters[perm])
    a = geometry_forward(c, cfg, model)
    b = geometry_forward(pc, cfg, model)
    torch.testing.assert_close(b, a[perm], rtol=0, atol=1e-4)


def test_branch_duplicate_points_finite():
    cfg = _tiny_cfg()
    c = CellCloud(np.tile([[0.1, 0.2, 0.3, 0, 0, 1]], (40, 1)), "B_N", np.tile([[0.1, 0.2, 0.3]], (40, 1)))
    out = geometry_forward(c, cfg)
    assert torch.isfinite(out).all()


def test_branch_dim_and_size_checks():
    cfg = _tiny_cfg()
    with pytest.raises(ConfigError):
        geometry_forward(_cloud(40, mode="B"), cfg)
    with pytest.raises(ConfigError):
        geometry_forward(_cloud(20), cfg)
    with pytest.raises(ConfigError):
        GeometryBranchConfig(stages=[StageConfig(8, 4), StageConfig(8, 4)]).check()
    with pytest.raises(ConfigError):
        GeometryBranchConfig(in_dim=5).check()


def test_branch_global_concat_switch():
    cfg = _tiny_cfg(global_concat=True)
    out = geometry_forward(_cloud(40), cfg)
    assert out.shape == (40, 12)


@pytest.mark.parametrize("in_dim,mode", [(3, "B"), (6, "B_N")])
def test_branch_eval_deterministic(in_dim, mode):
    cfg = _tiny_cfg(in_dim=in_dim)
    model = GeometryBranch(cfg).eval()
    c = _cloud(40, mode=mode)
    assert torch.equal(geometry_forward(c, cfg, model), geometry_forward(c, cfg, model))


def test_pooling_path_gradient():
    # stage grouping + GAM + max-pool, differentiated w.r.t. features
    torch.manual_seed(0)
    cfg = GeometryBranchConfig(in_dim=3, embed_dim=4, stages=[StageConfig(6, 3, 1, 0, 4)], out_dim=3)
    model = GeometryBranch(cfg).double()
    xyz = torch.randn(1, 10, 3, dtype=torch.float64)
    err = rel_grad_error(lambda f: model(f, xyz), [torch.randn(1, 10, 3)])
    assert err < 1e-4


def test_default_config_matches_documented_layout():
    cfg = GeometryBranchConfig.for_points(16000)
    assert [s.points for s in cfg.stages] == [16000, 4000, 1000, 250]
    assert [s.channels for s in cfg.stages] == [64, 128, 256, 512]
    assert all(s.k == 24 for s in cfg.stages)
    assert cfg.embed_dim == 64 and cfg.out_dim == 256 and cfg.decoder_k == 3 and cfg.eps == 1e-5
    for a, b in itertools.pairwise(cfg.stages):
        assert b.points < a.points
