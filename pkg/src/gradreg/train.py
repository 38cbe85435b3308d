"""End-to-end unsupervised training of the dual-branch registration model,
instance-wise optimization, Adam, checkpointing, and the flat key=value
config format."""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .fusion import GatedFusionParams, average_fuse_op, gated_fuse_op, init_gated_fusion
from .gradmap import normalized_gradient_map
from .losses import (
    DEFAULT_WEIGHTS,
    LossReport,
    LossWeights,
    MindParams,
    mind_graph,
    mind_loss_op,
    smoothness_op,
    total_loss_op,
)
from .net import Network, UNetConfig, build_unet, dual_branch_forward
from .volume import Volume, atomic_write_bytes, normalize_intensity
from .warp import DeformationField, warp_op


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 1
    iterations: int = 100
    weights: LossWeights = DEFAULT_WEIGHTS
    fusion_mode: str = "average"
    seed: int = 0
    checkpoint_interval: int = 0
    mind: MindParams = field(default_factory=MindParams)
    unet: UNetConfig = field(default_factory=UNetConfig)
    smooth_mode: str = "l2sq"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.fusion_mode not in ("average", "gated"):
            raise ValueError(f"fusion_mode must be average or gated, got {self.fusion_mode!r}")
        if self.smooth_mode not in ("l2", "l2sq"):
            raise ValueError(f"smooth_mode must be l2 or l2sq, got {self.smooth_mode!r}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list[Tensor]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.value) for p in params],
        v=[np.zeros_like(p.value) for p in params],
    )


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray], lr: float):
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i} at step {t}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainedModel:
    net_i: Network
    net_g: Network | None
    fusion: GatedFusionParams | None
    config: TrainConfig
    history: list[LossReport] = field(default_factory=list)
    branch_mode: str = "dual"


class PreparedPair(NamedTuple):
    ct: Tensor
    mr: Tensor
    gct: Tensor
    gmr: Tensor
    mr_feats: Tensor
    gmr_feats: Tensor


def prepare_pair(ct: Volume, mr: Volume, mind: MindParams) -> PreparedPair:
    """Normalize both volumes, derive the gradient-map inputs, and
    precompute the fixed-side MIND features."""
    if ct.dims != mr.dims:
        raise ValueError(f"pair dims mismatch: {ct.dims} vs {mr.dims}")
    ct_n = normalize_intensity(ct)
    mr_n = normalize_intensity(mr)
    gct = normalized_gradient_map(ct)
    gmr = normalized_gradient_map(mr)
    mr_t = Tensor(mr_n.data[None])
    gmr_t = Tensor(gmr.data[None])
    return PreparedPair(
        ct=Tensor(ct_n.data[None]),
        mr=mr_t,
        gct=Tensor(gct.data[None]),
        gmr=gmr_t,
        mr_feats=mind_graph(mr_t, mind),
        gmr_feats=mind_graph(gmr_t, mind),
    )


def _derived_seeds(seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(4)


def _model_params(model: TrainedModel) -> list[tuple[str, Tensor]]:
    named = [(f"net_i/{k}", t) for k, t in model.net_i.parameters()]
    if model.net_g is not None:
        named += [(f"net_g/{k}", t) for k, t in model.net_g.parameters()]
    if model.fusion is not None:
        named += [(f"fusion/{k}", t) for k, t in model.fusion.parameters()]
    return named


def _grads_for(params: list[Tensor]) -> list[np.ndarray]:
    out = []
    for p in params:
        out.append(p.grad if p.grad is not None else np.zeros_like(p.value))
        p.grad = None
    return out


def _fuse_fn(model: TrainedModel):
    if model.branch_mode == "mono":
        return None
    if model.config.fusion_mode == "gated":
        fusion = model.fusion
        return lambda fi, fg, tape: gated_fuse_op(fusion, fi, fg, tape)
    return average_fuse_op


def _build_model(config: TrainConfig, branch_mode: str) -> TrainedModel:
    s = _derived_seeds(config.seed)
    net_i = build_unet(replace(config.unet, seed=int(s[0])))
    if branch_mode == "mono":
        return TrainedModel(net_i, None, None, config, branch_mode="mono")
    net_g = build_unet(replace(config.unet, seed=int(s[1])))
    fusion = init_gated_fusion(int(s[2])) if config.fusion_mode == "gated" else None
    return TrainedModel(net_i, net_g, fusion, config)


def _dual_step(model: TrainedModel, pair: PreparedPair, tape: Tape | None):
    cfg = model.config
    out = dual_branch_forward(
        model.net_i, model.net_g, _fuse_fn(model), pair.ct, pair.mr, pair.gct, pair.gmr, tape
    )
    isim = mind_loss_op(out.warped_ct, pair.mr_feats, cfg.mind, tape)
    gsim = mind_loss_op(out.warped_gct, pair.gmr_feats, cfg.mind, tape)
    igreg = smoothness_op(out.phi_ig, cfg.smooth_mode, tape)
    greg = smoothness_op(out.phi_g, cfg.smooth_mode, tape)
    total = total_loss_op(isim, gsim, igreg, greg, cfg.weights, tape)
    report = LossReport(
        float(isim.value), float(gsim.value), float(igreg.value), float(greg.value),
        float(total.value),
    )
    return out, total, report


def _mono_step(model: TrainedModel, pair: PreparedPair, tape: Tape | None):
    cfg = model.config
    x = ad.concat_channels([pair.ct, pair.mr], tape)
    phi = model.net_i.forward(x, tape)
    warped = warp_op(pair.ct, phi, tape)
    isim = mind_loss_op(warped, pair.mr_feats, cfg.mind, tape)
    igreg = smoothness_op(phi, cfg.smooth_mode, tape)
    total = ad.add(isim, ad.scale(igreg, cfg.weights.gamma, tape), tape)
    report = LossReport(float(isim.value), 0.0, float(igreg.value), 0.0, float(total.value))
    return phi, warped, total, report


def _train(pairs, config: TrainConfig, branch_mode: str, out_dir=None) -> TrainedModel:
    if not pairs:
        raise ValueError("need at least one training pair")
    model = _build_model(config, branch_mode)
    prepared = [prepare_pair(ct, mr, config.mind) for ct, mr in pairs]
    seeds = _derived_seeds(config.seed)
    order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seeds[3]))))
    order = order_rng.permutation(len(prepared))
    params = [t for _, t in _model_params(model)]
    state = init_adam(params)

    for it in range(config.iterations):
        pair = prepared[order[it % len(prepared)]]
        tape = Tape()
        if branch_mode == "mono":
            _, _, total, report = _mono_step(model, pair, tape)
        else:
            _, total, report = _dual_step(model, pair, tape)
        if not np.isfinite(report.total):
            raise FloatingPointError(
                f"non-finite loss at iteration {it}: isim={report.isim} gsim={report.gsim} "
                f"igreg={report.igreg} greg={report.greg}"
            )
        tape.backward(total)
        adam_step(state, params, _grads_for(params), config.learning_rate)
        model.history.append(report)
        if (
            out_dir is not None
            and config.checkpoint_interval > 0
            and (it + 1) % config.checkpoint_interval == 0
        ):
            save_checkpoint(model, Path(out_dir) / f"checkpoint_{it + 1:06d}.ckpt")
    return model


def train_dual_branch(pairs, config: TrainConfig, out_dir=None) -> TrainedModel:
    """Train both branches and the fusion on (moving, fixed) volume pairs.

    Pairs are visited in a seeded cyclic order; no labels or ground-truth
    fields are consumed anywhere in the loop.
    """
    return _train(pairs, config, "dual", out_dir)


def train_mono_branch(pairs, config: TrainConfig, out_dir=None) -> TrainedModel:
    """Ablation: image branch only, fused field = phi_i, no gradient branch."""
    return _train(pairs, config, "mono", out_dir)


def register_pair(model: TrainedModel, ct: Volume, mr: Volume):
    """Inference: returns (fused field, warped moving volume, loss report).

    The moving volume is intensity-normalized before warping, matching the
    training-time pipeline.
    """
    pair = prepare_pair(ct, mr, model.config.mind)
    if model.branch_mode == "mono":
        phi, warped, _, report = _mono_step(model, pair, None)
        phi_ig = phi
        warped_ct = warped
    else:
        out, _, report = _dual_step(model, pair, None)
        phi_ig = out.phi_ig
        warped_ct = out.warped_ct
    return (
        DeformationField(phi_ig.value),
        Volume(warped_ct.value[0], ct.spacing),
        report,
    )


def instance_optimize(ct: Volume, mr: Volume, config: TrainConfig):
    """Optimize the training objective directly over two free displacement
    fields (plus fusion parameters in gated mode) for a single pair; no
    networks involved. Returns (phi_ig, phi_g, history)."""
    pair = prepare_pair(ct, mr, config.mind)
    nx, ny, nz = ct.dims
    phi_i = Tensor(np.zeros((3, nz, ny, nx)), requires_grad=True)
    phi_g = Tensor(np.zeros((3, nz, ny, nx)), requires_grad=True)
    params = [phi_i, phi_g]
    if config.fusion_mode == "gated":
        fusion = init_gated_fusion(int(_derived_seeds(config.seed)[2]))
        fuse = lambda fi, fg, tape: gated_fuse_op(fusion, fi, fg, tape)
        params += [t for _, t in fusion.parameters()]
    else:
        fuse = average_fuse_op
    state = init_adam(params)
    history: list[LossReport] = []

    def forward(tape):
        phi_ig = fuse(phi_i, phi_g, tape)
        warped_ct = warp_op(pair.ct, phi_ig, tape)
        warped_gct = warp_op(pair.gct, phi_g, tape)
        isim = mind_loss_op(warped_ct, pair.mr_feats, config.mind, tape)
        gsim = mind_loss_op(warped_gct, pair.gmr_feats, config.mind, tape)
        igreg = smoothness_op(phi_ig, config.smooth_mode, tape)
        greg = smoothness_op(phi_g, config.smooth_mode, tape)
        total = total_loss_op(isim, gsim, igreg, greg, config.weights, tape)
        return phi_ig, total, LossReport(
            float(isim.value), float(gsim.value), float(igreg.value), float(greg.value),
            float(total.value),
        )

    for it in range(config.iterations):
        tape = Tape()
        _, total, report = forward(tape)
        if not np.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        tape.backward(total)
        adam_step(state, params, _grads_for(params), config.learning_rate)
        history.append(report)

    phi_ig_final, _, _ = forward(None)
    return DeformationField(phi_ig_final.value), DeformationField(phi_g.value), history


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "learning_rate",
    "batch_size",
    "iterations",
    "alpha",
    "beta",
    "gamma",
    "fusion_mode",
    "seed",
    "checkpoint_interval",
    "smooth_mode",
    "mind_patch_radius",
    "mind_variance_floor",
    "mind_offsets",
    "enc_channels",
    "dec_channels",
    "refine_channels",
}


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(","))


def parse_train_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Parse the flat key=value config; overrides (e.g. from CLI flags) win."""
    kv = _parse_kv(text)
    if overrides:
        kv.update(overrides)
    unknown = set(kv) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    base = TrainConfig()
    weights = LossWeights(
        alpha=float(kv.get("alpha", base.weights.alpha)),
        beta=float(kv.get("beta", base.weights.beta)),
        gamma=float(kv.get("gamma", base.weights.gamma)),
    )
    mind = MindParams(
        offsets=(
            tuple(tuple(int(c) for c in v.split(",")) for v in kv["mind_offsets"].split(";"))
            if "mind_offsets" in kv
            else MindParams().offsets
        ),
        patch_radius=int(kv.get("mind_patch_radius", base.mind.patch_radius)),
        variance_floor=float(kv.get("mind_variance_floor", base.mind.variance_floor)),
    )
    unet = UNetConfig(
        enc_channels=_int_tuple(kv["enc_channels"]) if "enc_channels" in kv else UNetConfig().enc_channels,
        dec_channels=_int_tuple(kv["dec_channels"]) if "dec_channels" in kv else UNetConfig().dec_channels,
        refine_channels=_int_tuple(kv["refine_channels"]) if "refine_channels" in kv else UNetConfig().refine_channels,
    )
    return TrainConfig(
        learning_rate=float(kv.get("learning_rate", base.learning_rate)),
        batch_size=int(kv.get("batch_size", base.batch_size)),
        iterations=int(kv.get("iterations", base.iterations)),
        weights=weights,
        fusion_mode=kv.get("fusion_mode", base.fusion_mode),
        seed=int(kv.get("seed", base.seed)),
        checkpoint_interval=int(kv.get("checkpoint_interval", base.checkpoint_interval)),
        mind=mind,
        unet=unet,
        smooth_mode=kv.get("smooth_mode", base.smooth_mode),
    )


def format_train_config(config: TrainConfig) -> str:
    offsets = ";".join(",".join(str(c) for c in r) for r in config.mind.offsets)
    lines = [
        f"learning_rate={config.learning_rate!r}",
        f"batch_size={config.batch_size}",
        f"iterations={config.iterations}",
        f"alpha={config.weights.alpha!r}",
        f"beta={config.weights.beta!r}",
        f"gamma={config.weights.gamma!r}",
        f"fusion_mode={config.fusion_mode}",
        f"seed={config.seed}",
        f"checkpoint_interval={config.checkpoint_interval}",
        f"smooth_mode={config.smooth_mode}",
        f"mind_patch_radius={config.mind.patch_radius}",
        f"mind_variance_floor={config.mind.variance_floor!r}",
        f"mind_offsets={offsets}",
        "enc_channels=" + ",".join(str(c) for c in config.unet.enc_channels),
        "dec_channels=" + ",".join(str(c) for c in config.unet.dec_channels),
        "refine_channels=" + ",".join(str(c) for c in config.unet.refine_channels),
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# loss history CSV
# ---------------------------------------------------------------------------

LOSS_CSV_HEADER = "iter,isim,gsim,igreg,greg,total"


def write_loss_history_csv(history: list[LossReport], path):
    lines = [LOSS_CSV_HEADER]
    for i, r in enumerate(history):
        lines.append(f"{i},{r.isim!r},{r.gsim!r},{r.igreg!r},{r.greg!r},{r.total!r}")
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# checkpoints: a zip archive with the config as text, a name manifest, and
# one raw float64 little-endian file per parameter tensor.
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_add(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(model: TrainedModel, path):
    named = _model_params(model)
    manifest_lines = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        config_text = format_train_config(model.config) + f"branch_mode={model.branch_mode}\n"
        _zip_add(zf, "config.txt", config_text.encode())
        for name, t in named:
            shape = ",".join(str(s) for s in t.value.shape)
            manifest_lines.append(f"{name} float64 {shape}")
            _zip_add(zf, f"tensors/{name}.bin", t.value.astype("<f8").tobytes())
        _zip_add(zf, "manifest.txt", ("\n".join(manifest_lines) + "\n").encode())
    atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path) -> TrainedModel:
    with zipfile.ZipFile(path) as zf:
        kv = _parse_kv(zf.read("config.txt").decode())
        branch_mode = kv.pop("branch_mode", "dual")
        config = parse_train_config("", overrides=kv)
        model = _build_model(config, branch_mode)
        manifest = zf.read("manifest.txt").decode().splitlines()
        named = dict(_model_params(model))
        seen = set()
        for line in manifest:
            name, dtype, shape_s = line.split()
            shape = tuple(int(s) for s in shape_s.split(","))
            raw = zf.read(f"tensors/{name}.bin")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            if name not in named:
                raise ValueError(f"checkpoint tensor {name!r} not expected by config")
            if named[name].value.shape != shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} shape {shape} != expected "
                    f"{named[name].value.shape}"
                )
            named[name].value = arr.copy()
            seen.add(name)
        missing = set(named) - seen
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    return model
