import numpy as np
import pytest

from gradreg.autodiff import Tensor
from gradreg.losses import LossWeights, MindParams
from gradreg.net import THIN_CONFIG, UNetConfig
from gradreg.phantom import PhantomConfig, _blob_fields, generate_phantom_pair
from gradreg.train import (
    AdamState,
    TrainConfig,
    adam_step,
    format_train_config,
    init_adam,
    instance_optimize,
    load_checkpoint,
    parse_train_config,
    register_pair,
    save_checkpoint,
    train_dual_branch,
    train_mono_branch,
    write_loss_history_csv,
)
from gradreg.volume import Volume, normalize_intensity
from gradreg.warp import warp_trilinear

THIN = dict(
    unet=UNetConfig(
        enc_channels=THIN_CONFIG.enc_channels,
        dec_channels=THIN_CONFIG.dec_channels,
        refine_channels=THIN_CONFIG.refine_channels,
    )
)


def phantom_pair(seed, n=16):
    case = generate_phantom_pair(PhantomConfig(dims=(n, n, n), seed=seed))
    return case.moving, case.fixed


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_fresh_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    state = init_adam([p])
    adam_step(state, [p], [np.zeros(3)], lr=0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])
    assert state.step == 1
    assert np.all(state.m[0] == 0.0) and np.all(state.v[0] == 0.0)


def test_adam_first_step_hand_value():
    # t=1: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
    lr, g = 0.01, 0.3
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = init_adam([p])
    adam_step(state, [p], [np.array([g])], lr=lr)
    expected = 2.0 - lr * g / (abs(g) + state.eps)
    assert p.value[0] == pytest.approx(expected, rel=1e-12)
    assert p.value[0] - 2.0 == pytest.approx(-lr, rel=1e-6)  # ~ -lr * sign(g)


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(0)
        p = Tensor(rng.standard_normal(5), requires_grad=True)
        state = init_adam([p])
        for t in range(10):
            g = np.sin(p.value) + 0.1 * t
            adam_step(state, [p], [g], lr=0.05)
        return p.value.tobytes()

    assert run() == run()


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = init_adam([p])
    with pytest.raises(FloatingPointError):
        adam_step(state, [p], [np.array([np.nan])], lr=0.1)


# ---------------------------------------------------------------------------
# config files and CSV
# ---------------------------------------------------------------------------


def test_config_roundtrip():
    cfg = TrainConfig(
        learning_rate=3e-4,
        iterations=42,
        weights=LossWeights(0.5, 0.5, 1.0),
        fusion_mode="gated",
        seed=9,
        checkpoint_interval=10,
        mind=MindParams(patch_radius=2, variance_floor=1e-5),
        unet=UNetConfig(enc_channels=(4, 4, 4, 4), dec_channels=(4, 4, 4, 4), refine_channels=(4, 4, 4, 3)),
        smooth_mode="l2",
    )
    text = format_train_config(cfg)
    back = parse_train_config(text)
    assert back == cfg


def test_config_defaults_and_overrides():
    cfg = parse_train_config("iterations=5\n", overrides={"seed": "3", "alpha": "0.7"})
    assert cfg.iterations == 5
    assert cfg.seed == 3
    assert cfg.weights.alpha == 0.7
    assert cfg.learning_rate == 1e-5  # paper default
    assert cfg.weights == LossWeights(0.7, 0.3, 0.8)
    assert cfg.batch_size == 1


def test_config_unknown_key_rejected():
    with pytest.raises(ValueError):
        parse_train_config("learning_rat=1e-4\n")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)
    with pytest.raises(ValueError):
        TrainConfig(fusion_mode="mean")


def test_loss_history_csv(tmp_path):
    from gradreg.losses import LossReport

    hist = [LossReport(0.5, 0.4, 0.0, 0.0, 0.66), LossReport(0.4, 0.3, 0.01, 0.02, 0.53)]
    write_loss_history_csv(hist, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,isim,gsim,igreg,greg,total"
    assert lines[1].startswith("0,0.5,0.4,")
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def test_zero_iterations_is_identity_model():
    ct, mr = phantom_pair(0)
    cfg = TrainConfig(iterations=0, seed=1, **THIN)
    model = train_dual_branch([(ct, mr)], cfg)
    assert model.history == []
    field, warped, report = register_pair(model, ct, mr)
    assert np.all(field.disp == 0.0)
    assert warped.data.tobytes() == normalize_intensity(ct).data.tobytes()
    assert report.igreg == report.greg == 0.0


def test_needs_at_least_one_pair():
    with pytest.raises(ValueError):
        train_dual_branch([], TrainConfig(iterations=1))


def test_average_and_zeroed_gated_agree_on_first_iteration():
    # with zero-initialized heads the branch fields start at zero and a
    # zero-weight gate is exactly average fusion, so iteration 1 is shared;
    # the trajectories may split afterwards once the bottleneck bias moves
    ct, mr = phantom_pair(2)
    avg_cfg = TrainConfig(iterations=1, seed=5, learning_rate=1e-3, fusion_mode="average", **THIN)
    gat_cfg = TrainConfig(iterations=1, seed=5, learning_rate=1e-3, fusion_mode="gated", **THIN)

    avg_model = train_dual_branch([(ct, mr)], avg_cfg)

    from gradreg.autodiff import Tape
    from gradreg.train import (
        _build_model,
        _dual_step,
        _grads_for,
        _model_params,
        prepare_pair,
    )

    gated_model = _build_model(gat_cfg, "dual")
    gated_model.fusion.gate_w.value[:] = 0.0
    pair = prepare_pair(ct, mr, gat_cfg.mind)
    params = [t for _, t in _model_params(gated_model)]
    state = init_adam(params)
    tape = Tape()
    _, total, report = _dual_step(gated_model, pair, tape)
    tape.backward(total)
    adam_step(state, params, _grads_for(params), gat_cfg.learning_rate)

    assert report == avg_model.history[0]


def test_training_reduces_loss_on_phantom():
    ct, mr = phantom_pair(3)
    cfg = TrainConfig(iterations=120, seed=2, learning_rate=1e-3, fusion_mode="average", **THIN)
    model = train_dual_branch([(ct, mr)], cfg)
    totals = [r.total for r in model.history]
    k = max(1, len(totals) // 10)
    assert np.median(totals[-k:]) < np.median(totals[:k])
    assert all(np.isfinite(t) for t in totals)


def test_register_pair_consistency():
    ct, mr = phantom_pair(4)
    cfg = TrainConfig(iterations=25, seed=3, learning_rate=1e-3, fusion_mode="gated", **THIN)
    model = train_dual_branch([(ct, mr)], cfg)
    field, warped, report = register_pair(model, ct, mr)
    redone = warp_trilinear(normalize_intensity(ct), field)
    assert redone.data.tobytes() == warped.data.tobytes()
    assert np.isfinite(report.total)
    assert np.any(field.disp != 0.0)


def test_mono_branch_model():
    ct, mr = phantom_pair(5)
    cfg = TrainConfig(iterations=10, seed=4, learning_rate=1e-3, **THIN)
    model = train_mono_branch([(ct, mr)], cfg)
    assert model.net_g is None and model.fusion is None
    field, warped, report = register_pair(model, ct, mr)
    assert report.gsim == 0.0 and report.greg == 0.0
    assert field.disp.shape == (3, 16, 16, 16)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    ct, mr = phantom_pair(6)
    cfg = TrainConfig(iterations=8, seed=7, learning_rate=1e-3, fusion_mode="gated", **THIN)
    model = train_dual_branch([(ct, mr)], cfg)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == cfg
    for (na, ta), (nb, tb) in zip(
        model.net_i.parameters(), back.net_i.parameters()
    ):
        assert na == nb and ta.value.tobytes() == tb.value.tobytes()
    f1, w1, r1 = register_pair(model, ct, mr)
    f2, w2, r2 = register_pair(back, ct, mr)
    assert f1.disp.tobytes() == f2.disp.tobytes()
    assert w1.data.tobytes() == w2.data.tobytes()
    assert r1 == r2


def test_same_seed_bit_identical_checkpoints(tmp_path):
    ct, mr = phantom_pair(8)
    cfg = TrainConfig(iterations=5, seed=11, learning_rate=1e-3, fusion_mode="gated", **THIN)
    for name in ("a.ckpt", "b.ckpt"):
        model = train_dual_branch([(ct, mr)], cfg)
        save_checkpoint(model, tmp_path / name)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_mono_checkpoint_roundtrip(tmp_path):
    ct, mr = phantom_pair(9)
    cfg = TrainConfig(iterations=3, seed=12, learning_rate=1e-3, **THIN)
    model = train_mono_branch([(ct, mr)], cfg)
    save_checkpoint(model, tmp_path / "mono.ckpt")
    back = load_checkpoint(tmp_path / "mono.ckpt")
    assert back.branch_mode == "mono"
    f1, _, _ = register_pair(model, ct, mr)
    f2, _, _ = register_pair(back, ct, mr)
    assert f1.disp.tobytes() == f2.disp.tobytes()


def test_interval_checkpoints_written(tmp_path):
    ct, mr = phantom_pair(10)
    cfg = TrainConfig(
        iterations=4, seed=13, learning_rate=1e-3, checkpoint_interval=2, **THIN
    )
    train_dual_branch([(ct, mr)], cfg, out_dir=tmp_path)
    assert (tmp_path / "checkpoint_000002.ckpt").exists()
    assert (tmp_path / "checkpoint_000004.ckpt").exists()


# ---------------------------------------------------------------------------
# instance optimization
# ---------------------------------------------------------------------------


def test_instance_optimize_identical_pair_stays_at_zero():
    v, _ = phantom_pair(11)
    cfg = TrainConfig(learning_rate=0.05, iterations=100, fusion_mode="average", seed=0)
    phi_ig, phi_g, history = instance_optimize(v, v, cfg)
    assert np.abs(phi_ig.disp).max() <= 1e-3
    assert np.abs(phi_g.disp).max() <= 1e-3
    assert all(np.isfinite(r.total) for r in history)


def test_instance_optimize_recovers_known_translation():
    n = 16
    blobs = _blob_fields((n, n, n), [(7.5, 8.0, 8.2)], [(4.5, 5.0, 4.0)])
    shape = blobs[0]
    disp = np.zeros((3, n, n, n))
    disp[0] = 1.0  # moving samples at x+1, corrective field is -1 along x
    from gradreg.warp import DeformationField

    moved = warp_trilinear(Volume(shape), DeformationField(disp))
    moving = Volume(0.7 * moved.data + 0.15)
    fixed = Volume(1.0 - shape**0.7)
    cfg = TrainConfig(learning_rate=0.05, iterations=150, fusion_mode="average", seed=0)
    phi_ig, _, history = instance_optimize(moving, fixed, cfg)
    foreground = shape > 0.5
    assert phi_ig.disp[0][foreground].mean() == pytest.approx(-1.0, abs=0.3)
    assert abs(phi_ig.disp[1][foreground].mean()) <= 0.3
    assert abs(phi_ig.disp[2][foreground].mean()) <= 0.3
    assert history[-1].total < history[0].total
