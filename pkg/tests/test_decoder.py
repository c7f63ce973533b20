import numpy as np
import pytest

from depict.decoder import (
    DecoderConfig,
    forward,
    init_params,
    layerwise_rate_probe,
    own_layer_rate_changes,
    perturb,
    perturb_params,
    predict_labels,
    read_checkpoint,
    write_checkpoint,
)
from depict.errors import BadMagic, ConfigInvalid, NonFinite, ShapeCorrupt, ShapeMismatch, VersionMismatch
from depict.matcore import rng
from depict.operators import LayerNormParams, SubspaceDictionary, layer_norm, mssa_update


def zero_alpha(params):
    for lp in params.sa + params.ca:
        lp.alpha = 0.0
    return params


def Z0(D=16, N=20, seed=0):
    return rng(seed).standard_normal((D, N))


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        DecoderConfig(variant="XA")
    with pytest.raises(ConfigInvalid):
        DecoderConfig(variant="CA", ca_layers=0)
    with pytest.raises(ConfigInvalid):
        DecoderConfig(sa_layers=-1)
    with pytest.raises(ConfigInvalid):
        DecoderConfig(step_form="half")
    assert DecoderConfig(heads=3, head_dim=2).dict_cols == 6
    assert DecoderConfig(variant="SA", ca_layers=3).ca_count == 0


def test_ca_identity_steps():
    cfg = DecoderConfig(variant="CA", sa_layers=0, ca_layers=1)
    params = zero_alpha(init_params(cfg, 1))
    Z = Z0()
    res = forward(Z, params, cfg)
    assert np.array_equal(res.logits, params.q0.T @ layer_norm(Z, LayerNormParams.identity(16)))
    assert len(res.trace) == 2


def test_sa_without_layers():
    cfg = DecoderConfig(variant="SA", sa_layers=0)
    params = init_params(cfg, 2)
    Z = Z0()
    res = forward(Z, params, cfg)
    assert np.array_equal(res.logits, params.q0.T @ layer_norm(Z, params.final_ln))
    assert res.logits.shape == (4, 20)


def manual_steps(S, params, cfg):
    for lp in params.sa:
        upd = mssa_update(layer_norm(S, lp.ln), SubspaceDictionary(lp.P, cfg.heads), lp.alpha, cfg.rate_config())
        S = S + upd
    return S


def test_sa_without_queries_is_pure_refinement():
    cfg = DecoderConfig(variant="SA", num_classes=0, sa_layers=3)
    params = init_params(cfg, 3)
    Z = Z0()
    res = forward(Z, params, cfg)
    assert res.q.shape == (16, 0) and res.logits.shape == (0, 20)
    assert np.array_equal(res.z, manual_steps(Z, params, cfg))


def test_sa_concatenation_oracle():
    cfg = DecoderConfig(variant="SA", sa_layers=2)
    params = init_params(cfg, 4, alpha=0.4, q_scale=0.5)
    Z = Z0(seed=4)
    res = forward(Z, params, cfg)
    S = manual_steps(np.hstack([Z, params.q0]), params, cfg)
    assert np.max(np.abs(res.z - S[:, :20])) <= 1e-12
    assert np.max(np.abs(res.q - S[:, 20:])) <= 1e-12
    assert np.max(np.abs(res.logits - S[:, 20:].T @ layer_norm(S[:, :20], params.final_ln))) <= 1e-12


def test_forward_deterministic_and_trace_length():
    cfg = DecoderConfig(sa_layers=2, ca_layers=3)
    params = init_params(cfg, 5)
    Z = Z0(seed=5)
    a, b = forward(Z, params, cfg), forward(Z, params, cfg)
    assert np.array_equal(a.logits, b.logits)
    assert len(a.trace) == 1 + 2 + 3


def test_forward_errors():
    cfg = DecoderConfig()
    params = init_params(cfg, 0)
    with pytest.raises(ShapeMismatch):
        forward(np.ones((8, 4)), params, cfg)
    with pytest.raises(ShapeMismatch):
        forward(Z0(), init_params(DecoderConfig(sa_layers=1), 0), cfg)
    params.sa[0].alpha = float("nan")
    with pytest.raises(NonFinite, match="sa layer 0"):
        forward(Z0(), params, cfg)


def test_predict_labels():
    assert np.array_equal(predict_labels(np.eye(3)[:, [2, 0, 1]]), [2, 0, 1])
    assert np.array_equal(predict_labels(np.zeros((4, 5))), np.zeros(5))
    M = rng(6).integers(0, 3, (4, 30)).astype(float)  # plenty of ties
    scan = []
    for j in range(30):
        best = 0
        for c in range(1, 4):
            if M[c, j] > M[best, j]:
                best = c
        scan.append(best)
    assert np.array_equal(predict_labels(M), scan)


def test_probe_rows_and_alpha_zero():
    cfg = DecoderConfig(sa_layers=3, heads=2)
    params = zero_alpha(init_params(cfg, 7))
    rows = layerwise_rate_probe(params, cfg, Z0(seed=7))
    assert len(rows) == 3 * 2 * 4
    for layer in range(3):
        for h in range(2):
            vals = {r["proj_rate"] for r in rows if r["layer"] == layer and r["head"] == h}
            assert len(vals) == 1
    changes = own_layer_rate_changes(rows)
    assert len(changes) == 6 and all(d == 0.0 for *_, d in changes)


def test_probe_sign_on_single_layer():
    cfg = DecoderConfig(sa_layers=1, heads=1, head_dim=4)
    Z = Z0(seed=8)
    signs = []
    for alpha in (-0.05, 0.05):
        params = init_params(cfg, 8, alpha=alpha)
        (_, _, _, d), = own_layer_rate_changes(layerwise_rate_probe(params, cfg, Z))
        signs.append(np.sign(d))
    assert signs == [1.0, -1.0]


@pytest.mark.parametrize("variant", ["SA", "CA"])
def test_per_head_orthogonal_gauge(variant):
    cfg = DecoderConfig(variant=variant, sa_layers=2, heads=2, head_dim=3)
    params = init_params(cfg, 9, alpha=0.5, q_scale=1.0)
    Z = Z0(seed=9)
    base = forward(Z, params, cfg).logits
    moved = forward(Z, perturb(params, cfg, "per_head_orthogonal", seed=1), cfg).logits
    assert np.max(np.abs(base - moved)) <= 1e-10
    assert np.array_equal(predict_labels(base), predict_labels(moved))


def test_full_orthogonal_single_head_collapses():
    cfg = DecoderConfig(heads=1, head_dim=6)
    params = init_params(cfg, 10, alpha=0.5, q_scale=1.0)
    Z = Z0(seed=10)
    moved = perturb(params, cfg, "full_orthogonal", seed=2)
    assert np.array_equal(predict_labels(forward(Z, params, cfg).logits), predict_labels(forward(Z, moved, cfg).logits))


def test_other_perturbations():
    cfg = DecoderConfig()
    params = init_params(cfg, 11)
    same = perturb(params, cfg, "gaussian_noise", sigma=0.0)
    for (_, a), (_, b) in zip(params.flatten(), same.flatten()):
        assert np.array_equal(a, b)
    noisy = perturb(params, cfg, "gaussian_noise", seed=3, sigma=0.1)
    assert not np.array_equal(noisy.sa[0].P, params.sa[0].P)
    assert np.array_equal(noisy.q0, params.q0)
    ortho = perturb(noisy, cfg, "orthogonalize_heads")
    for lp in ortho.sa + ortho.ca:
        for B in SubspaceDictionary(lp.P, cfg.heads).blocks():
            assert np.allclose(B.T @ B, np.eye(cfg.head_dim), atol=1e-12)
    with pytest.raises(ConfigInvalid):
        perturb_params(params, "shear")
    with pytest.raises(ShapeMismatch):
        perturb_params(params, "per_head_orthogonal", heads=3)


@pytest.mark.parametrize("variant", ["SA", "CA"])
def test_checkpoint_round_trip(tmp_path, variant):
    cfg = DecoderConfig(variant=variant, step_form="full", normalize_queries=True, epsilon=0.3)
    params = init_params(cfg, 12, alpha=-0.2)
    path = tmp_path / "m.dpct"
    write_checkpoint(path, cfg, params)
    cfg2, params2 = read_checkpoint(path)
    assert cfg2 == cfg
    for (n1, a), (n2, b) in zip(params.flatten(), params2.flatten()):
        assert n1 == n2 and np.array_equal(a, b)
    assert (tmp_path / "m.dpct.json").exists()


def test_checkpoint_errors(tmp_path):
    cfg = DecoderConfig()
    path = tmp_path / "m.dpct"
    write_checkpoint(path, cfg, init_params(cfg, 0))
    raw = path.read_bytes()
    cases = [
        (b"NOPE" + raw[4:], BadMagic),
        (raw[:4] + (9).to_bytes(4, "little") + raw[8:], VersionMismatch),
        (raw[:-8], ShapeCorrupt),
        (raw + b"\0" * 8, ShapeCorrupt),
        (raw[:12], ShapeCorrupt),
    ]
    for data, err in cases:
        path.write_bytes(data)
        with pytest.raises(err):
            read_checkpoint(path)
