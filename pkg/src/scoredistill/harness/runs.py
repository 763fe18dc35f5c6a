"""2D distillation and toy-3D optimization runs with metrics, snapshots and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..backends.base import Denoiser
from ..conditioning import ConditionSet, VisualPrompt
from ..losses import gradient
from ..optim import Adam
from ..render import LatentImageRenderer, VoxelRenderer, grid_vjp, render, render_grid, save_scene, save_views_png
from ..render.fixtures import named_scene
from ..schedule import continuous_to_step, make_schedule
from ..sgc import GRID_ORDER, DegenerateInputError, SGCExtractors, luminance, pearson, sgc_loss
from ..timesteps import sample_t, window_at
from ..views import CameraPose, MultiViewReference
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

SNAPSHOT_KEYS = ("x0", "x0_cond", "x0_uncond", "x0_guided")


class RunAborted(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: Path | None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class RunRecord:
    run_dir: Path
    metrics_path: Path
    rows: list
    snapshots: list
    checkpoint: Path | None
    config_hash: str
    wall_clock: float
    status: str = "completed"
    summary: dict = field(default_factory=dict)

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        run_dir = Path(run_dir)
        meta_path = run_dir / "run.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{run_dir} has no run.json; not a run directory")
        meta = json.loads(meta_path.read_text())
        metrics = run_dir / meta["metrics"]
        with metrics.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        ckpt = meta.get("checkpoint")
        return cls(run_dir, metrics, rows, [run_dir / s for s in meta.get("snapshots", [])],
                   run_dir / ckpt if ckpt else None, meta["config_hash"], meta.get("wall_clock", float("nan")),
                   meta.get("status", "unknown"), meta.get("summary", {}))


class MetricsWriter:
    """Append-only CSV with a fixed header, flushed after every row."""

    def __init__(self, path: Path, columns):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)
        self._fh.flush()
        self.rows: list = []

    @staticmethod
    def _fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def write(self, row: dict) -> None:
        extra = set(row) - set(self.columns)
        if extra:
            raise KeyError(f"metric columns not in header: {sorted(extra)}")
        cells = [self._fmt(row.get(c)) for c in self.columns]
        self._w.writerow(cells)
        self._fh.flush()
        self.rows.append(dict(zip(self.columns, cells)))

    def close(self) -> None:
        self._fh.close()


# -- backend and condition resolution ---------------------------------------------

def load_backend(cfg: ExperimentConfig) -> Denoiser:
    kind = cfg["backend"]
    if kind == "toy":
        from ..backends.toy import ToyDenoiser

        path = cfg["backend.weights"]
        if not path:
            raise ConfigError("backend=toy needs backend.weights (train one with `scoredistill train-toy`)")
        return ToyDenoiser.load(path)
    if kind == "mixture_oracle":
        from ..oracles import MixtureDenoiser, four_mode_mixture

        return MixtureDenoiser(four_mode_mixture(), make_schedule(1000))
    from ..backends.external import external_adapter

    return external_adapter()


def backend_fingerprint(backend: Denoiser) -> str:
    if hasattr(backend, "config_hash") and hasattr(backend, "params"):
        from ..backends.toy import params_digest

        return f"toy:{backend.config_hash()}:{params_digest(backend.params)[:16]}"
    if hasattr(backend, "mixture"):
        m = backend.mixture
        blob = json.dumps([m.modes.tolist(), m.sigma, m.weights.tolist(), backend.class_modes]).encode()
        return f"mixture:{hashlib.sha256(blob).hexdigest()[:16]}"
    return type(backend).__name__


def run_hash(cfg: ExperimentConfig, backend: Denoiser) -> str:
    blob = json.dumps({"config": cfg.flat, "backend": backend_fingerprint(backend)}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _dataset_of(backend):
    meta = getattr(backend, "metadata", {}) or {}
    if "dataset" not in meta:
        return None
    from ..backends.training import dataset_from_description

    arch = backend.arch
    return dataset_from_description(meta["dataset"], token_dim=arch.token_dim, visual_tokens=arch.visual_tokens)


def visual_prompt_for(cfg: ExperimentConfig, backend, dataset, class_id) -> VisualPrompt | None:
    source = cfg["visual.source"]
    if source == "none":
        return None
    if not backend.capabilities.supports_visual_condition:
        raise ConfigError(f"visual.source={source} but the backend has no visual conditioning")
    if dataset is None:
        raise ConfigError("visual prompts need a toy backend whose metadata records its dataset")
    label = backend.class_id(class_id) if hasattr(backend, "class_id") else int(class_id)
    image = dataset.reference_image(label)
    return VisualPrompt(source, image, dataset.visual_tokens([label])[0])


def conditions_for(cfg: ExperimentConfig, backend, dataset) -> tuple[ConditionSet, VisualPrompt | None]:
    text = cfg["task.prompt"] or cfg["task.class_id"]
    vp = visual_prompt_for(cfg, backend, dataset, text)
    tau = cfg["visual.tau"]
    return ConditionSet(text, None if vp is None else vp.embedding, tau), vp


def class_modes(backend, dataset, text) -> np.ndarray | None:
    """Mode locations of the conditioned class, when the backend's data is a known mixture."""
    if hasattr(backend, "mixture_for"):
        return backend.mixture_for(text).modes
    if dataset is not None and hasattr(dataset, "class_modes"):
        label = backend.class_id(text)
        return dataset.mixture.modes[dataset.class_modes[label - 1]]
    return None


def _rngs(seed: int):
    init, tstream, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(tstream), np.random.default_rng(noise))


def _pick_t(cfg: ExperimentConfig, step: int, rng, T: int) -> tuple[int, float, float]:
    if cfg["schedule.sampling"] == "window":
        lo, hi = window_at(step, cfg.window)
        return sample_t(step, cfg.window, rng, T), lo, hi
    lo, hi = cfg["schedule.t_min"], cfg["schedule.t_max"]
    return continuous_to_step(rng.uniform(lo, hi), T), lo, hi


def _snapshot_steps(cfg: ExperimentConfig) -> set:
    n, every = cfg["iterations"], cfg["snapshot_every"]
    steps = {n - 1}
    if every:
        steps.update(range(0, n, every))
    return steps


def _prepare_dir(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "snapshots").mkdir(exist_ok=True)
    return out


def _write_meta(out: Path, cfg: ExperimentConfig, h: str, backend, status: str, snaps, ckpt, wall, summary):
    meta = {"config_hash": h, "config": cfg.flat, "backend": backend_fingerprint(backend), "status": status,
            "metrics": "metrics.csv", "snapshots": [str(s.relative_to(out)) for s in snaps],
            "checkpoint": None if ckpt is None else str(Path(ckpt).relative_to(out)),
            "wall_clock": wall, "summary": summary}
    tmp = out / "run.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True, default=float))
    tmp.replace(out / "run.json")
    (out / "config.yaml").write_text(cfg.to_yaml())


def _abort(out, cfg, h, backend, renderer, theta_good, step, snaps, t0, summary, why) -> RunAborted:
    ckpt = save_scene(out / "checkpoint.npz", renderer.scene(theta_good), renderer)
    _write_meta(out, cfg, h, backend, "aborted", snaps, ckpt, time.time() - t0, {**summary, "abort_step": step})
    return RunAborted(f"step {step}: {why}; last good parameters in {ckpt}", step, ckpt)


# -- 2D -----------------------------------------------------------------------------

def run_2d_distillation(cfg: ExperimentConfig, out, backend: Denoiser | None = None) -> RunRecord:
    """Optimize a single sample/image directly (latent-image renderer) with the configured loss."""
    if cfg["experiment"] != "2d":
        raise ConfigError("run_2d_distillation needs experiment=2d")
    t0 = time.time()
    backend = backend or load_backend(cfg)
    dataset = _dataset_of(backend)
    out = _prepare_dir(out)
    h = run_hash(cfg, backend)
    loss_cfg = cfg.loss
    sched = backend.schedule
    renderer = LatentImageRenderer(backend.latent_shape)
    conditions, _ = conditions_for(cfg, backend, dataset)
    modes = class_modes(backend, dataset, conditions.text)
    rng_init, rng_t, rng_noise = _rngs(cfg["seed"])
    theta = cfg["task.init_scale"] * rng_init.standard_normal(renderer.layout()[-1].stop)
    D = theta.size
    coord_cols = [f"x_{i}" for i in range(D)] if D <= 8 else []
    cols = ["step", "t", "t_min", "t_max", "grad_norm", "delta_dif", "delta_cfg", "cfg_term", "pag_term",
            "dist_to_mode"] + coord_cols
    writer = MetricsWriter(out / "metrics.csv", cols)
    opt = Adam(cfg["step_size"])
    snaps, snap_steps = [], _snapshot_steps(cfg)

    def dist(x):
        if modes is None:
            return None
        return float(np.min(np.linalg.norm(modes - backend.decode(x).reshape(1, -1), axis=1)))

    summary = {"init_dist_to_mode": dist(theta)}
    ckpt = None
    try:
        for step in range(cfg["iterations"]):
            t, lo, hi = _pick_t(cfg, step, rng_t, sched.T)
            image = render(theta, None, renderer)
            x = backend.encode(image)
            try:
                rep = gradient(x, t, conditions, backend, loss_cfg, rng=rng_noise)
            except (ValueError, FloatingPointError, RuntimeError) as exc:
                raise _abort(out, cfg, h, backend, renderer, theta, step, snaps, t0, summary, str(exc)) from exc
            g_theta = renderer.vjp(theta, None, backend.encode_vjp(image, rep.grad))
            row = {"step": step, "t": t, "t_min": lo, "t_max": hi, "grad_norm": rep.grad_norm,
                   "dist_to_mode": dist(theta), **{k: rep.terms.get(k) for k in
                                                   ("delta_dif", "delta_cfg", "cfg_term", "pag_term")}}
            row.update({c: float(v) for c, v in zip(coord_cols, theta)})
            writer.write(row)
            if step in snap_steps:
                snap = {"x0": backend.decode(x)}
                snap.update({k: backend.decode(v) for k, v in rep.snapshots(loss_cfg.guidance.cfg_scale).items()})
                path = out / "snapshots" / f"step_{step:06d}.npz"
                np.savez(path, step=step, t=t, **snap)
                snaps.append(path)
                ckpt = save_scene(out / "checkpoint.npz", renderer.scene(theta), renderer)
            new = opt.update(theta, g_theta)
            if not (np.all(np.isfinite(g_theta)) and np.all(np.isfinite(new))):
                raise _abort(out, cfg, h, backend, renderer, theta, step, snaps, t0, summary,
                             "non-finite gradient or parameters")
            theta = new
    finally:
        writer.close()
    ckpt = save_scene(out / "final.npz", renderer.scene(theta), renderer)
    summary.update(final_dist_to_mode=dist(theta), final_x=backend.decode(theta).tolist() if D <= 8 else None)
    wall = time.time() - t0
    _write_meta(out, cfg, h, backend, "completed", snaps, ckpt, wall, summary)
    return RunRecord(out, writer.path, writer.rows, snaps, ckpt, h, wall, "completed", summary)


# -- 3D -----------------------------------------------------------------------------

def reference_views(renderer: VoxelRenderer, target: str, elevation: float) -> MultiViewReference:
    theta = named_scene(renderer, target)
    return MultiViewReference(render_grid(theta, renderer, elevation).views, provenance=f"voxel:{target}")


def _sgc_extractors(cfg: ExperimentConfig, reference: MultiViewReference) -> SGCExtractors:
    for k in ("semantic", "depth", "normal", "reward"):
        if cfg[f"sgc.extractors.{k}"] != "toy":
            raise ConfigError(f"sgc.extractors.{k}=external needs an external extractor plug-in; none is bundled")
    return SGCExtractors.toy(reference.views.shape[1:], reward_targets=reference.views,
                             reward_per_view=cfg["sgc.reward_per_view"])


def view_pearsons(views, reference: MultiViewReference, depth=luminance) -> dict:
    """Per-view depth Pearson; NaN where a map is flat (e.g. an empty scene)."""
    out = {}
    for i, tag in enumerate(GRID_ORDER):
        try:
            out[f"pearson_{tag}"] = pearson(depth(reference.views[i]), depth(views[i]), tag)
        except DegenerateInputError:
            out[f"pearson_{tag}"] = float("nan")
    return out


def run_3d_toy(cfg: ExperimentConfig, out, backend: Denoiser | None = None,
               reference: MultiViewReference | None = None) -> RunRecord:
    """VPCSM on randomly posed renders plus SGC on the canonical grid, per step."""
    if cfg["experiment"] != "3d":
        raise ConfigError("run_3d_toy needs experiment=3d")
    t0 = time.time()
    backend = backend or load_backend(cfg)
    dataset = _dataset_of(backend)
    out = _prepare_dir(out)
    h = run_hash(cfg, backend)
    renderer = VoxelRenderer(grid=cfg["renderer.grid"], image_size=cfg["renderer.image_size"])
    if tuple(backend.latent_shape) != renderer.image_shape:
        raise ConfigError(f"backend latent shape {backend.latent_shape} != renderer image {renderer.image_shape}")
    elev = cfg["pose.elevation"]
    reference = reference or reference_views(renderer, cfg["scene.target"], elev)
    weights = cfg.sgc
    extractors = _sgc_extractors(cfg, reference)
    loss_cfg = cfg.loss
    w_vpcsm = cfg["loss.vpcsm_weight"]
    conditions, _ = conditions_for(cfg, backend, dataset)
    sched = backend.schedule
    rng_init, rng_t, rng_noise = _rngs(cfg["seed"])
    theta = renderer.random_scene(rng_init, cfg["scene.init_density"], cfg["scene.init_scale"]).values
    cams = render_grid(theta, renderer, elev).cameras
    cols = (["step", "t", "t_min", "t_max", "vpcsm_grad_norm", "cfg_term", "pag_term", "sgc_grad_norm",
             "L_depth", "L_normal", "L_semantic", "L_IR", "L_SGC"] + [f"pearson_{v}" for v in GRID_ORDER])
    writer = MetricsWriter(out / "metrics.csv", cols)
    opt = Adam(cfg["step_size"])
    snaps, snap_steps = [], _snapshot_steps(cfg)
    summary: dict = {"first_step_all_pearson_above_0.9": None}
    prompt = cfg["task.prompt"] or str(cfg["task.class_id"])
    ckpt = None
    try:
        for step in range(cfg["iterations"]):
            t, lo, hi = _pick_t(cfg, step, rng_t, sched.T)
            grad = np.zeros_like(theta)
            row = {"step": step, "t": t, "t_min": lo, "t_max": hi}
            rep = None
            if w_vpcsm > 0.0:
                poses = [CameraPose(a, elev) for a in rng_noise.uniform(0.0, 360.0, cfg["pose.batch"])]
                images = np.stack([renderer.render(theta, p) for p in poses])
                try:
                    rep = gradient(backend.encode(images), t, conditions, backend, loss_cfg, rng=rng_noise)
                except (ValueError, FloatingPointError, RuntimeError) as exc:
                    raise _abort(out, cfg, h, backend, renderer, theta, step, snaps, t0, summary,
                                 str(exc)) from exc
                d_img = backend.encode_vjp(images, rep.grad) * (w_vpcsm / len(poses))
                g_v = sum(renderer.vjp(theta, p, d) for p, d in zip(poses, d_img))
                grad += g_v
                row.update(vpcsm_grad_norm=float(np.linalg.norm(g_v)), cfg_term=rep.terms.get("cfg_term"),
                           pag_term=rep.terms.get("pag_term"))
            else:
                row.update(vpcsm_grad_norm=0.0, cfg_term=0.0, pag_term=0.0)
            grid = render_grid(theta, renderer, elev)
            try:
                res = sgc_loss(grid, reference, prompt, weights, extractors, with_grad=not weights.all_zero)
            except RuntimeError as exc:
                raise _abort(out, cfg, h, backend, renderer, theta, step, snaps, t0, summary, str(exc)) from exc
            g_s = grid_vjp(theta, renderer, res.grad, cams) if res.grad is not None else np.zeros_like(theta)
            grad += g_s
            pears = view_pearsons(grid.views, reference)
            row.update(sgc_grad_norm=float(np.linalg.norm(g_s)), L_SGC=res.total, **res.components, **pears)
            writer.write(row)
            if summary["first_step_all_pearson_above_0.9"] is None and all(p > 0.9 for p in pears.values()):
                summary["first_step_all_pearson_above_0.9"] = step
            if step in snap_steps:
                snap = {"views": grid.views}
                if rep is not None:
                    snap["x0"] = images[0]
                    snap.update({k: backend.decode(v[0]) for k, v in
                                 rep.snapshots(loss_cfg.guidance.cfg_scale).items()})
                path = out / "snapshots" / f"step_{step:06d}.npz"
                np.savez(path, step=step, t=t, **snap)
                save_views_png(grid.views, path.with_suffix(".png"))
                snaps.append(path)
                ckpt = save_scene(out / "checkpoint.npz", renderer.scene(theta), renderer)
            new = opt.update(theta, grad)
            if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(new))):
                raise _abort(out, cfg, h, backend, renderer, theta, step, snaps, t0, summary,
                             "non-finite gradient or parameters")
            theta = new
    finally:
        writer.close()
    ckpt = save_scene(out / "final.npz", renderer.scene(theta), renderer)
    final = render_grid(theta, renderer, elev)
    pears = view_pearsons(final.views, reference)
    target = named_scene(renderer, cfg["scene.target"])
    geo = {f"geometric_{k}": v for k, v in view_pearsons(
        np.stack([renderer.depth(theta, c) for c in cams]),
        MultiViewReference(np.stack([renderer.depth(target, c) for c in cams])), depth=lambda d: d).items()}
    summary.update(final_pearson=pears, min_final_pearson=float(np.min(list(pears.values()))), **geo)
    save_views_png(final.views, out / "final.png")
    wall = time.time() - t0
    _write_meta(out, cfg, h, backend, "completed", snaps, ckpt, wall, summary)
    return RunRecord(out, writer.path, writer.rows, snaps, ckpt, h, wall, "completed", summary)
