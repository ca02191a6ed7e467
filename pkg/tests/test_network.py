import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pose_match import network as nn
from pose_match.errors import CorruptFile, IndexOutOfRange, ShapeMismatch
from pose_match.tensorio import load_collection, save_collection

from conftest import random_pose

SMALL = nn.ModelConfig(width=16, desc_dim=8, heads=2, coarse_blocks=1, fine_blocks=1,
                       sa_widths=(8, 8, 8))
seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def w():
    return nn.init_weights(0, SMALL)


def block_inputs(seed, n_m=9, n_o=7, c=16):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-1, 1, size=(n_m, 3)), rng.uniform(-1, 1, size=(n_o, 3)),
            rng.normal(size=(n_m + 1, c)), rng.normal(size=(n_o + 1, c)))


def permute_rows(f, perm):
    return np.vstack([f[:1], f[1:][perm]])


def kernel_oracle(q, k, v):
    """Quadratic-form kernel attention per head, one query at a time."""
    phi = lambda x: np.where(x > 0, x + 1, np.exp(x))
    out = np.zeros((q.shape[0], q.shape[1], v.shape[2]))
    for h in range(q.shape[1]):
        for i in range(q.shape[0]):
            sims = np.array([phi(q[i, h]) @ phi(k[j, h]) for j in range(k.shape[0])])
            out[i, h] = sims @ v[:, h] / sims.sum()
    return out


# --- weights --------------------------------------------------------------------

def test_seeded_init_is_bit_identical():
    a, b = nn.init_weights(3, SMALL), nn.init_weights(3, SMALL)
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = nn.init_weights(4, SMALL)
    assert any(not np.array_equal(a[k], c[k]) for k in a if a[k].any())


def test_weights_are_read_only(w):
    with pytest.raises(ValueError):
        w["coarse/in_proj/w"][0, 0] = 1.0


def test_save_load_round_trip(w, tmp_path):
    w.save(tmp_path / "w.tnsr")
    back = nn.init_or_load_weights(str(tmp_path / "w.tnsr"))
    assert back.config == SMALL
    assert all(back[k].tobytes() == w[k].tobytes() for k in w)


def test_width_mismatch_raises(w, tmp_path):
    w.save(tmp_path / "w.tnsr")
    with pytest.raises(ShapeMismatch):
        nn.load_weights(tmp_path / "w.tnsr", nn.ModelConfig(width=32, desc_dim=8, heads=2))


def test_tampered_tensor_shape_raises(w, tmp_path):
    tensors, meta = load_collection(_saved(w, tmp_path))
    tensors["coarse/bg_m"] = np.zeros(5)
    save_collection(tmp_path / "bad.tnsr", tensors, meta)
    with pytest.raises(ShapeMismatch):
        nn.load_weights(tmp_path / "bad.tnsr")


def test_non_finite_weights_rejected(w, tmp_path):
    tensors, meta = load_collection(_saved(w, tmp_path))
    tensors["coarse/bg_m"] = np.full(16, np.nan)
    save_collection(tmp_path / "nan.tnsr", tensors, meta)
    with pytest.raises(CorruptFile):
        nn.load_weights(tmp_path / "nan.tnsr")


def _saved(w, tmp_path):
    path = tmp_path / "w.tnsr"
    w.save(path)
    return path


def test_config_validation():
    with pytest.raises(ShapeMismatch):
        nn.ModelConfig(width=10, heads=4)


# --- geometric transformer -----------------------------------------------------------

def test_block_shapes(w):
    pm, po, fm, fo = block_inputs(0)
    om, oo = nn.geometric_transformer_block(pm, po, fm, fo, w, "coarse/gt0")
    assert om.shape == fm.shape and oo.shape == fo.shape
    assert np.all(np.isfinite(om)) and np.all(np.isfinite(oo))


@given(seeds)
def test_block_permutation_equivariance(w, seed):
    pm, po, fm, fo = block_inputs(seed)
    rng = np.random.default_rng(seed + 1)
    perm_m, perm_o = rng.permutation(len(pm)), rng.permutation(len(po))
    om, oo = nn.geometric_transformer_block(pm, po, fm, fo, w, "coarse/gt0")
    pm2, fm2 = pm[perm_m], permute_rows(fm, perm_m)
    po2, fo2 = po[perm_o], permute_rows(fo, perm_o)
    om2, oo2 = nn.geometric_transformer_block(pm2, po2, fm2, fo2, w, "coarse/gt0")
    assert np.allclose(om2, permute_rows(om, perm_m), atol=1e-10)
    assert np.allclose(oo2, permute_rows(oo, perm_o), atol=1e-10)


def test_zero_output_projection_is_residual_identity(w):
    pm, po, fm, fo = block_inputs(1)
    zeroed = w.replace(**{f"coarse/gt0/{s}/o/{p}": np.zeros_like(w[f"coarse/gt0/{s}/o/{p}"])
                          for s in ("self", "cross") for p in ("w", "b")})
    ln = lambda x: nn.layer_norm(x, np.ones(16), np.zeros(16))
    fm, fo = ln(fm), ln(fo)
    om, oo = nn.geometric_transformer_block(pm, po, fm, fo, zeroed, "coarse/gt0")
    # post-norm: the identity holds up to the layer-norm epsilon
    assert np.allclose(om, fm, atol=1e-4) and np.allclose(oo, fo, atol=1e-4)


@given(seeds)
def test_attention_rows_sum_to_one(w, seed):
    pm, po, fm, fo = block_inputs(seed)
    *_, maps = nn.geometric_transformer_block(pm, po, fm, fo, w, "coarse/gt0", return_attn=True)
    for m in maps.values():
        assert np.abs(m.sum(axis=-1) - 1).max() < 1e-9


@given(seeds)
def test_geometric_bias_rigid_invariance(w, seed):
    pts = np.random.default_rng(seed).uniform(-0.7, 0.7, size=(20, 3))
    moved = random_pose(seed, 0.3).apply(pts)
    p = w.sub("coarse/gt0/self")
    b0, b1 = nn.geometric_bias(pts, p), nn.geometric_bias(moved, p)
    # bucket edges can flip under rounding; require agreement away from edges
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) * (SMALL.n_bins / SMALL.max_dist)
    safe = np.abs(d - np.round(d)) > 1e-9
    assert np.array_equal(b0[:, 1:, 1:][:, safe], b1[:, 1:, 1:][:, safe])
    assert not b0[:, 0, :].any() and not b0[:, :, 0].any()


def test_block_shape_errors(w):
    pm, po, fm, fo = block_inputs(2)
    with pytest.raises(ShapeMismatch):
        nn.geometric_transformer_block(pm, po, fm[:, :8], fo, w, "coarse/gt0")
    with pytest.raises(ShapeMismatch):
        nn.geometric_transformer_block(pm, po, fm[1:], fo, w, "coarse/gt0")


# --- linear attention ----------------------------------------------------------------

@given(seeds)
def test_linear_core_matches_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(8, 2, 4)), rng.normal(size=(8, 2, 4)), rng.normal(size=(8, 2, 4))
    assert np.abs(nn.linear_attention_core(q, k, v) - kernel_oracle(q, k, v)).max() < 1e-10


def test_single_key_attends_fully(w):
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(5, 16)), rng.normal(size=(1, 16))
    p = w.sub("fine/sdpt0/lin")
    lin = nn.linear_cross_attention(x, y, w, "fine/sdpt0/lin")
    soft = nn.softmax_attention_layer(x, y, p)
    assert np.allclose(lin, soft, atol=1e-12)


def test_linear_attention_permutation(w):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(6, 16)), rng.normal(size=(9, 16))
    base = nn.linear_cross_attention(x, y, w, "fine/sdpt0/lin")
    assert np.allclose(nn.linear_cross_attention(x, y[::-1], w, "fine/sdpt0/lin"), base, atol=1e-12)
    assert np.allclose(nn.linear_cross_attention(x[::-1], y, w, "fine/sdpt0/lin"), base[::-1], atol=1e-12)


def test_linear_attention_shape_error(w):
    with pytest.raises(ShapeMismatch):
        nn.linear_cross_attention(np.ones((3, 16)), np.ones((3, 8)), w, "fine/sdpt0/lin")


def test_chunked_block_matches_plain_composition(w):
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(700, 16)), rng.normal(size=(530, 16))
    p = w.sub("fine/sdpt0/lin")
    split = lambda z, name: (z @ p[f"{name}/w"] + p[f"{name}/b"]).reshape(len(z), 2, 8)
    att = nn.linear_attention_core(split(x, "q"), split(y, "k"), split(y, "v")).reshape(700, 16)
    ref = nn.layer_norm(x + att @ p["o/w"] + p["o/b"], p["norm/g"], p["norm/b"])
    assert np.abs(nn.linear_cross_attention(x, y, w, "fine/sdpt0/lin") - ref).max() < 1e-12


def test_linear_attention_scales_linearly():
    w = nn.init_weights(0)
    rng = np.random.default_rng(0)
    x1, x4 = rng.normal(size=(1024, 256)), rng.normal(size=(4096, 256))

    def ratio():
        small, large = [], []
        for _ in range(9):
            for x, acc in ((x1, small), (x4, large)):
                t0 = time.perf_counter()
                nn.linear_cross_attention(x, x, w, "fine/sdpt0/lin")
                acc.append(time.perf_counter() - t0)
        return min(large) / min(small)

    # median over trials damps scheduler noise on a shared machine
    assert np.median([ratio() for _ in range(5)]) < 4.0


# --- SDPT ----------------------------------------------------------------------------

def test_sdpt_dense_equals_sparse(w):
    pm, po, fm, fo = block_inputs(6)
    im, io = np.arange(len(fm)), np.arange(len(fo))
    om, oo = nn.sdpt_block((pm, fm), (po, fo), im, io, w, "fine/sdpt0")
    gm, go = nn.geometric_transformer_block(pm, po, fm, fo, w, "fine/sdpt0/gt")
    assert np.allclose(om, nn.linear_cross_attention(fm, gm, w, "fine/sdpt0/lin"), atol=1e-12)
    assert np.allclose(oo, nn.linear_cross_attention(fo, go, w, "fine/sdpt0/lin"), atol=1e-12)
    assert om.shape == fm.shape and oo.shape == fo.shape


def test_sdpt_spreads_to_non_sparse_rows(w):
    pm, po, fm, fo = block_inputs(7, n_m=20, n_o=20)
    sparse = np.array([0, 1, 3, 5, 7])
    om, _ = nn.sdpt_block((pm, fm), (po, fo), sparse, sparse, w, "fine/sdpt0")
    outside = np.setdiff1d(np.arange(21), sparse)
    assert np.abs(om[outside] - fm[outside]).min(axis=1).max() > 0
    # perturbing a sparse row moves a dense row outside the selection
    fm2 = fm.copy()
    fm2[3] += 1.0
    om2, _ = nn.sdpt_block((pm, fm2), (po, fo), sparse, sparse, w, "fine/sdpt0")
    assert np.abs(om2[outside] - om[outside]).max() > 1e-6


def test_sdpt_is_deterministic(w):
    pm, po, fm, fo = block_inputs(8)
    idx = np.array([0, 2, 4, 6])
    a = nn.sdpt_block((pm, fm), (po, fo), idx, idx, w, "fine/sdpt0")
    b = nn.sdpt_block((pm, fm), (po, fo), idx, idx, w, "fine/sdpt0")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_sdpt_permutation_equivariance(w):
    pm, po, fm, fo = block_inputs(9, n_m=12, n_o=10)
    rng = np.random.default_rng(9)
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    sparse_m = np.array([0, 1, 4, 8, 11])
    om, oo = nn.sdpt_block((pm, fm), (po, fo), sparse_m, np.arange(11), w, "fine/sdpt0")
    moved = np.concatenate([[0], inv[sparse_m[1:] - 1] + 1])
    om2, oo2 = nn.sdpt_block((pm[perm], permute_rows(fm, perm)), (po, fo), moved, np.arange(11),
                             w, "fine/sdpt0")
    assert np.allclose(om2, permute_rows(om, perm), atol=1e-10)
    assert np.allclose(oo2, oo, atol=1e-10)


@pytest.mark.parametrize("idx", [[1, 2, 3], [0, 2, 99], [0, -1], []])
def test_sdpt_index_errors(w, idx):
    pm, po, fm, fo = block_inputs(10)
    with pytest.raises(IndexOutOfRange):
        nn.sdpt_block((pm, fm), (po, fo), idx, [0, 1], w, "fine/sdpt0")


def test_ablation_blocks_preserve_shapes(w):
    pm, po, fm, fo = block_inputs(11)
    for block in (nn.full_geometric_block, nn.linear_only_block):
        om, oo = block((pm, fm), (po, fo), w, "fine/sdpt0")
        assert om.shape == fm.shape and oo.shape == fo.shape


# --- positional encoding -------------------------------------------------------------

def test_pe_width_for_any_n(w):
    for n in (1, 2, 17, 200):
        pts = np.random.default_rng(n).uniform(-1, 1, size=(n, 3))
        assert nn.positional_encoding(pts, w).shape == (n, 16)


def test_pe_is_position_sensitive(w):
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(50, 3))
    a = nn.positional_encoding(pts, w)
    b = nn.positional_encoding(pts + np.array([0.1, 0.0, 0.0]), w)
    assert np.abs(a - b).max() > 1e-3


def test_pe_duplicates_share_rows(w):
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(40, 3))
    pts = np.vstack([pts, pts[7:8]])
    enc = nn.positional_encoding(pts, w)
    assert np.array_equal(enc[7], enc[40])


def test_ball_query_stays_in_radius():
    pts = np.random.default_rng(2).uniform(-1, 1, size=(300, 3))
    idx = nn.ball_query(pts, 0.2, 16)
    assert idx.shape == (300, 16)
    assert np.all(np.linalg.norm(pts[idx] - pts[:, None], axis=-1) <= 0.2)
