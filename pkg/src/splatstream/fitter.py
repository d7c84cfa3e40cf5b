"""Multi-level photometric fitting of a forest against reference views.

Each iteration renders the cumulative node set of every supervised level
for every camera, combines the per-level mean-L1 losses with level weights,
adds position/scale regularizers, and takes a gradient step.  Photometric
gradients reach color, opacity, position offsets, and the barycentric
split coordinates (chained through projection and the position paths of
the binding and subdivision maps, with face rotation and scale treated as
locally constant).  Rotation and scale residuals see only the regularizers
by design; the renderer exposes no covariance gradients.

Growth bookkeeping is interleaved on its configured cadence: the finest
level's screen-space gradients are accumulated every iteration, the depth
cap advances on its schedule, and qualifying leaves are split every
``step_k`` steps.  Everything is deterministic for a fixed config.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .binding import MIN_DELTA_SCALE, covariance_batch, resolve_batch
from .errors import SplatError
from .forest import Forest, SplitPoint, project_simplex, project_simplex_batch
from .growth import GrowthConfig, accumulate, advance_cap, growth_step
from .mesh import Camera, FrameVertices, face_frames_batch
from .renderer import RenderOutput, project_batch, render


class FitError(SplatError):
    pass


@dataclass
class FitConfig:
    """Optimization settings; learning-rate defaults follow the conventional
    Adam-calibrated values, so plain-GD runs usually override them."""

    iterations: int = 400
    optimizer: str = "gd"  # "gd" | "adam"
    lr_beta: float = 1e-2
    lr_delta_mu: float = 5e-3
    lr_delta_scale: float = 2e-2
    lr_delta_rot: float = 1e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lambda_pos: float = 0.01
    lambda_scale: float = 1.0
    tau_pos: float = 1.0
    tau_scale: float = 0.6
    level_weights: list | None = None  # None = uniform over supervised levels
    supervised_levels: str = "all"  # "all" (<= current cap) | "finest"
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    # split points are kept this far inside the simplex so no child triangle
    # ever degenerates under beta optimization
    beta_margin: float = 0.02
    # newborn children copy their parent's color/opacity instead of the
    # mid-range defaults; gentler on the render right after a growth event,
    # but the blended-in children also weaken the growth signal, so this is
    # off by default
    inherit_child_appearance: bool = False

    def __post_init__(self):
        for name in (
            "lr_beta",
            "lr_delta_mu",
            "lr_delta_scale",
            "lr_delta_rot",
            "lr_color",
            "lr_opacity",
        ):
            if getattr(self, name) <= 0:
                raise FitError(f"{name} must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise FitError(f"unknown optimizer {self.optimizer!r}")
        if self.supervised_levels not in ("all", "finest"):
            raise FitError(f"unknown supervision mode {self.supervised_levels!r}")
        if self.iterations < 0:
            raise FitError("iterations must be >= 0")
        if self.level_weights is not None:
            w = list(self.level_weights)
            if not w or any(x < 0 for x in w) or not any(x > 0 for x in w):
                raise FitError("level_weights need at least one positive entry")
            self.level_weights = w
        if not 0.0 <= self.beta_margin < 1.0 / 3.0:
            raise FitError("beta_margin must lie in [0, 1/3)")


@dataclass
class SupervisionSet:
    cameras: list[Camera]
    references: list[np.ndarray]
    frame: FrameVertices

    def __post_init__(self):
        if not self.cameras:
            raise FitError("need at least one camera")
        if len(self.cameras) != len(self.references):
            raise FitError("one reference image per camera required")
        refs = []
        for cam, ref in zip(self.cameras, self.references):
            ref = np.asarray(ref, dtype=np.float64)
            if ref.shape != (cam.height, cam.width, 3):
                raise FitError(
                    f"reference shape {ref.shape} does not match camera "
                    f"{cam.height}x{cam.width}"
                )
            refs.append(ref)
        self.references = refs


def level_render_set(forest: Forest, level: int) -> list[int]:
    """Cumulative render set: every node at or below ``level``."""
    max_present = forest.max_level_present()
    if level < 0 or level > max_present:
        raise FitError(f"level {level} outside present range 0..{max_present}")
    return [n.node_id for n in forest.nodes if n.level <= level]


def supervised_level_list(forest: Forest, cfg: FitConfig) -> list[int]:
    top = min(forest.current_depth_cap, forest.max_level_present())
    if cfg.supervised_levels == "finest":
        return [forest.max_level_present()]
    return list(range(top + 1))


def _level_weights(cfg: FitConfig, levels: list[int]) -> dict[int, float]:
    if cfg.level_weights is None:
        return {lvl: 1.0 / len(levels) for lvl in levels}
    if max(levels) >= len(cfg.level_weights):
        raise FitError(
            f"level_weights has {len(cfg.level_weights)} entries but level "
            f"{max(levels)} is supervised"
        )
    return {lvl: float(cfg.level_weights[lvl]) for lvl in levels}


@dataclass
class Gradients:
    """Per-node gradient arrays in node-id order."""

    d_color: np.ndarray
    d_opacity: np.ndarray
    d_delta_mu: np.ndarray
    d_delta_scale: np.ndarray
    d_beta: np.ndarray


def _forward_backward(forest: Forest, sup: SupervisionSet, cfg: FitConfig):
    """One full pass: total loss, per-node gradients, and the finest-level
    render outputs (one per camera) for growth accumulation."""
    n = len(forest)
    params = forest.gather_params()
    corners = forest.resolve_all_corners(sup.frame)
    r, t, s = face_frames_batch(corners)
    mu, rot, scale = resolve_batch(
        params["delta_mu"], params["delta_rot"], params["delta_scale"], r, t, s
    )
    cov3d = covariance_batch(rot, scale)
    levels = forest.levels_array()
    node_ids = np.arange(n, dtype=np.int64)

    sup_levels = supervised_level_list(forest, cfg)
    weights = _level_weights(cfg, sup_levels)
    finest = forest.max_level_present()
    ncam = len(sup.cameras)

    def camera_pass(cam_idx: int):
        cam = sup.cameras[cam_idx]
        ref = sup.references[cam_idx]
        batch = project_batch(
            node_ids, mu, cov3d, params["opacity"], params["color"], cam
        )
        results = {}
        for lvl in sup_levels:
            sub = batch.subset(levels[batch.node_ids] <= lvl)
            results[lvl] = (sub, render(sub, cam, cfg.background, reference=ref))
        return results

    if cfg.threads > 1 and ncam > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_camera = list(pool.map(camera_pass, range(ncam)))
    else:
        per_camera = [camera_pass(i) for i in range(ncam)]

    d_color = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_mu_world = np.zeros((n, 3))
    photometric = 0.0
    finest_outputs: list[RenderOutput] = []
    for results in per_camera:
        for lvl, (sub, out) in results.items():
            w = weights[lvl] / ncam
            photometric += w * out.loss
            ids = out.node_ids
            d_color[ids] += w * out.grad_color
            d_opacity[ids] += w * out.grad_opacity
            jacs_sorted = sub.jacs[out.order]
            d_mu_world[ids] += w * np.einsum("nij,ni->nj", jacs_sorted, out.grad_mean2d)
            if lvl == finest:
                finest_outputs.append(out)

    # chain world-position gradients into delta_mu (frame rotation/scale
    # treated as constants) and into barycentric coordinates via centroids
    d_delta_mu = s[:, None] * np.einsum("nji,nj->ni", r, d_mu_world)
    d_beta = np.zeros((n, 3))
    split_grad = np.zeros((n, 3))
    corner_share = d_mu_world / 3.0
    for node in forest.nodes:
        g = corner_share[node.node_id]
        if g[0] == 0.0 and g[1] == 0.0 and g[2] == 0.0:
            continue
        for ref in node.corners:
            if isinstance(ref, SplitPoint):
                split_grad[ref.node_id] += g
    for nid in range(n - 1, -1, -1):
        h = split_grad[nid]
        if h[0] == 0.0 and h[1] == 0.0 and h[2] == 0.0:
            continue
        node = forest.nodes[nid]
        d_beta[nid] += corners[nid] @ h
        for k, ref in enumerate(node.corners):
            if isinstance(ref, SplitPoint):
                split_grad[ref.node_id] += node.beta[k] * h

    # regularizers: zero inside the thresholds, quadratic outside
    pos_excess = np.maximum(np.abs(params["delta_mu"]) - cfg.tau_pos, 0.0)
    scale_excess = np.maximum(params["delta_scale"] - cfg.tau_scale, 0.0)
    loss_pos = float(np.sum(pos_excess**2)) / n
    loss_scale = float(np.sum(scale_excess**2)) / n
    d_delta_mu += cfg.lambda_pos * 2.0 * pos_excess * np.sign(params["delta_mu"]) / n
    d_delta_scale = cfg.lambda_scale * 2.0 * scale_excess / n

    total = photometric + cfg.lambda_scale * loss_scale + cfg.lambda_pos * loss_pos
    grads = Gradients(
        d_color=d_color,
        d_opacity=d_opacity,
        d_delta_mu=d_delta_mu,
        d_delta_scale=d_delta_scale,
        d_beta=d_beta,
    )
    return total, grads, finest_outputs, params


def loss(forest: Forest, sup: SupervisionSet, cfg: FitConfig):
    """Total loss and its per-node gradients for the current parameters."""
    total, grads, _, _ = _forward_backward(forest, sup, cfg)
    return total, grads


def _project_margin_simplex(raw: np.ndarray, margin: float) -> np.ndarray:
    """Euclidean projection onto {beta >= margin, sum(beta) = 1}.

    The plain simplex projection shifted by the margin; identical to
    :func:`project_simplex` when ``margin`` is zero.
    """
    if margin <= 0.0:
        return project_simplex(raw)
    span = 1.0 - 3.0 * margin
    inner = project_simplex((np.asarray(raw, dtype=np.float64) - margin) / span)
    return margin + span * inner


def _project_margin_simplex_batch(raw: np.ndarray, margin: float) -> np.ndarray:
    if margin <= 0.0:
        return project_simplex_batch(raw)
    span = 1.0 - 3.0 * margin
    return margin + span * project_simplex_batch((raw - margin) / span)


class _AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        m = self.m.get(name)
        if m is None or len(m) < len(grad):
            grown_m = np.zeros_like(grad)
            grown_v = np.zeros_like(grad)
            if m is not None:
                grown_m[: len(m)] = m
                grown_v[: len(m)] = self.v[name]
            self.m[name], self.v[name] = grown_m, grown_v
        self.m[name] = beta1 * self.m[name] + (1 - beta1) * grad
        self.v[name] = beta2 * self.v[name] + (1 - beta2) * grad * grad
        m_hat = self.m[name] / (1 - beta1**self.t)
        v_hat = self.v[name] / (1 - beta2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + eps)


def _apply_update(
    forest: Forest,
    params: dict,
    grads: Gradients,
    cfg: FitConfig,
    adam: _AdamState | None,
):
    if adam is not None:
        adam.t += 1
        step_color = adam.step("color", grads.d_color, cfg.lr_color)
        step_opacity = adam.step("opacity", grads.d_opacity, cfg.lr_opacity)
        step_mu = adam.step("delta_mu", grads.d_delta_mu, cfg.lr_delta_mu)
        step_scale = adam.step("delta_scale", grads.d_delta_scale, cfg.lr_delta_scale)
        step_beta = adam.step("beta", grads.d_beta, cfg.lr_beta)
    else:
        step_color = cfg.lr_color * grads.d_color
        step_opacity = cfg.lr_opacity * grads.d_opacity
        step_mu = cfg.lr_delta_mu * grads.d_delta_mu
        step_scale = cfg.lr_delta_scale * grads.d_delta_scale
        step_beta = cfg.lr_beta * grads.d_beta

    color = np.clip(params["color"] - step_color, 0.0, 1.0)
    opacity = np.clip(params["opacity"] - step_opacity, 0.0, 1.0)
    delta_mu = params["delta_mu"] - step_mu
    delta_scale = np.maximum(params["delta_scale"] - step_scale, MIN_DELTA_SCALE)
    quat_norm = np.linalg.norm(params["delta_rot"], axis=1)
    quat = params["delta_rot"] / np.where(quat_norm > 0, quat_norm, 1.0)[:, None]

    sub_ids = [n.node_id for n in forest.nodes if n.beta is not None]
    if sub_ids:
        betas = np.stack([forest.nodes[i].beta for i in sub_ids])
        betas = _project_margin_simplex_batch(
            betas - step_beta[sub_ids], cfg.beta_margin
        )
    for node in forest.nodes:
        g = node.gaussian
        nid = node.node_id
        g.color[:] = color[nid]
        g.opacity = float(opacity[nid])
        g.delta_mu[:] = delta_mu[nid]
        g.delta_scale[:] = delta_scale[nid]
        g.delta_rot[:] = quat[nid]
    for row, nid in enumerate(sub_ids):
        forest.nodes[nid].beta[:] = betas[row]


@dataclass
class TrainingLog:
    """Per-iteration record of the fit: loss, forest size, level histogram."""

    seed: int
    rows: list[dict] = field(default_factory=list)

    def append(self, iteration: int, loss_value: float, forest: Forest):
        hist: dict[int, int] = {}
        for node in forest.nodes:
            hist[node.level] = hist.get(node.level, 0) + 1
        self.rows.append(
            {
                "iteration": iteration,
                "loss": loss_value,
                "nodes": len(forest),
                "max_level": forest.max_level_present(),
                "level_hist": hist,
            }
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# seed={self.seed}\n")
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "nodes", "max_level"])
            for row in self.rows:
                writer.writerow(
                    [
                        row["iteration"],
                        f"{row['loss']:.12g}",
                        row["nodes"],
                        row["max_level"],
                    ]
                )


def fit(forest: Forest, sup: SupervisionSet, cfg: FitConfig) -> TrainingLog:
    """Run the training-growth loop in place and return the log."""
    log = TrainingLog(seed=cfg.seed)
    adam = _AdamState() if cfg.optimizer == "adam" else None
    for it in range(cfg.iterations):
        advance_cap(forest, cfg.growth, it)
        total, grads, finest_outputs, params = _forward_backward(forest, sup, cfg)
        _apply_update(forest, params, grads, cfg, adam)
        accumulate(forest, finest_outputs)
        if (it + 1) % cfg.growth.step_k == 0:
            split = growth_step(forest, cfg.growth)
            if cfg.inherit_child_appearance:
                for pid in split:
                    parent = forest.node(pid).gaussian
                    for cid in forest.node(pid).children:
                        child = forest.node(cid).gaussian
                        child.color[:] = parent.color
                        child.opacity = parent.opacity
        log.append(it, total, forest)
    return log
