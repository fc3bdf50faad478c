"""Attacker toolkit against a two-member (ViT + CNN) random-selection ensemble.

* ``random_linf``: random corner of the l-inf ball, the baseline.
* SAGA: iterated sign steps on a blend of the CNN input gradient and the ViT
  input gradient weighted by an attention-rollout map.
* Against a shielded member the attacker only sees the adjoint of the first
  clear node; ``bpda_upsample`` maps it back to image shape with a randomly
  initialised transposed convolution and uses that in place of the gradient.

Everything the attacker reads goes through an :class:`AttackerView`, whose
``denied`` counter must stay at zero for a well-behaved attack.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, forward
from .models import EnsembleModel, Model, choose_members, predict
from .shield import AdjointOnly, AttackerView, Enclave, FullGradient, attacker_gradient, shield
from .tensor import ShapeError, conv_transpose2d

SETTINGS = ("none", "vit", "cnn", "ensemble")
COLUMNS = ("Clean", "Random", "None", "ViT", "CNN", "Ensemble")
ROWS = ("ViT", "CNN", "Ensemble")


@dataclass(frozen=True)
class SagaConfig:
    step: float = 3.1e-3
    steps: int = 10
    alpha_k: float = 2.0e-4
    upsample: bool = True
    upsample_range: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step size must be positive")
        if not 0.0 <= self.alpha_k <= 1.0:
            raise ValueError("alpha_k must lie in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    @property
    def alpha_v(self) -> float:
        return 1.0 - self.alpha_k

    @property
    def budget(self) -> float:
        return self.steps * self.step


@dataclass(frozen=True)
class UpsamplerConfig:
    kernel: int | None = None  # derived from the shapes when None
    stride: int | None = None  # spatial reduction factor of the shield
    init_range: float = 1.0
    seed: int = 0


# --- primitives ----------------------------------------------------------------

def random_linf(x, eps: float, rng: np.random.Generator) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    s = rng.choice(np.array([-1.0, 1.0]), size=x.shape)
    return np.clip(x + eps * s, 0.0, 1.0)


def attention_rollout(weights, x_adv) -> np.ndarray:
    """Attention-rollout saliency map multiplied into ``x_adv``.

    ``weights[l][h]`` is head ``h`` of layer ``l``, shape (T, T) or (B, T, T)
    with token 0 the class token. Each layer contributes
    ``sum_h (0.5 W + 0.5 I)``; layers compose as ``M_L ... M_1``. The class
    row over patch tokens is laid on the patch grid, upsampled to pixels by
    nearest neighbour and broadcast over channels.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if not weights or not weights[0]:
        raise ShapeError("need at least one layer with one head")
    first = np.asarray(weights[0][0])
    T = first.shape[-1]
    lead = first.shape[:-2]
    roll = None
    for layer in weights:
        m = np.zeros(lead + (T, T))
        for w in layer:
            w = np.asarray(w)
            if w.shape != lead + (T, T):
                raise ShapeError(f"attention weights must all be {lead + (T, T)}, got {w.shape}")
            m = m + 0.5 * w + 0.5 * np.eye(T)
        roll = m if roll is None else np.matmul(m, roll)
    cls_row = roll[..., 0, 1:]
    n = T - 1
    side = int(round(np.sqrt(n)))
    H, W = x_adv.shape[-2:]
    if side * side != n or H % side or W % side:
        raise ShapeError(f"{n} patch tokens do not tile a {H}x{W} image")
    grid = cls_row.reshape(lead + (side, side))
    pix = np.repeat(np.repeat(grid, H // side, axis=-2), W // side, axis=-1)
    return pix[..., None, :, :] * x_adv


def blend_gradient(grad_cnn, grad_vit, phi, alpha_k: float) -> np.ndarray:
    grad_cnn, grad_vit, phi = (np.asarray(a, dtype=np.float64) for a in (grad_cnn, grad_vit, phi))
    if not grad_cnn.shape == grad_vit.shape == phi.shape:
        raise ShapeError(f"blend shapes differ: {grad_cnn.shape}, {grad_vit.shape}, {phi.shape}")
    return alpha_k * grad_cnn + (1.0 - alpha_k) * phi * grad_vit


def upsample_geometry(in_hw, out_hw, cfg: UpsamplerConfig):
    """Return ``(kernel, stride)`` so a transposed conv maps ``in_hw`` onto ``out_hw``."""
    h, H = in_hw[0], out_hw[0]
    stride = cfg.stride if cfg.stride is not None else max(H // h, 1)
    kernel = cfg.kernel if cfg.kernel is not None else H - (h - 1) * stride
    for a, b in zip(in_hw, out_hw):
        if kernel < 1 or (a - 1) * stride + kernel != b:
            raise ShapeError(f"no transposed conv with kernel {kernel}, stride {stride} maps {in_hw} to {out_hw}")
    return kernel, stride


def upsample_kernel(cin: int, cout: int, kernel: int, cfg: UpsamplerConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(-cfg.init_range, cfg.init_range, size=(cin, cout, kernel, kernel))


def bpda_upsample(adjoint, cfg: UpsamplerConfig, out_shape, kernel: np.ndarray | None = None) -> np.ndarray:
    """Map a spatial adjoint (..., Cin, h, w) to the image shape ``out_shape`` (C, H, W)."""
    adjoint = np.asarray(adjoint, dtype=np.float64)
    C, H, W = out_shape
    k, stride = upsample_geometry(adjoint.shape[-2:], (H, W), cfg)
    if kernel is None:
        kernel = upsample_kernel(adjoint.shape[-3], C, k, cfg)
    if kernel.shape != (adjoint.shape[-3], C, k, k):
        raise ShapeError(f"kernel shape {kernel.shape} does not fit adjoint {adjoint.shape} -> {out_shape}")
    return conv_transpose2d(adjoint, kernel, stride)


def adjoint_grid(model: Model, adjoint) -> np.ndarray:
    """Lay an adjoint out as (..., channels, h, w) for upsampling.

    CNN adjoints already are; ViT token adjoints drop the class token and put
    each patch's embedding vector at its grid position.
    """
    adjoint = np.asarray(adjoint)
    if model.kind != "vit":
        return adjoint
    patches = adjoint[..., 1:, :]
    n, d = patches.shape[-2:]
    side = int(round(np.sqrt(n)))
    grid = patches.reshape(patches.shape[:-2] + (side, side, d))
    return np.moveaxis(grid, -1, -3)


# --- SAGA ---------------------------------------------------------------------------

def canonical_shields(ensemble: EnsembleModel, setting: str) -> tuple:
    """Enclaves for one shield setting: ``none``, ``vit``, ``cnn`` or ``ensemble``."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown shield setting {setting!r}")
    out = []
    for m in ensemble.members:
        on = setting == "ensemble" or setting == m.kind
        out.append(shield(m.graph, m.selection) if on else Enclave(m.graph))
    return tuple(out)


@dataclass
class AttackOutcome:
    labels: np.ndarray
    member_preds: dict  # kind -> adversarial predictions
    ensemble_preds: np.ndarray
    x_adv: np.ndarray
    linf: np.ndarray
    reads: int = 0
    denied: int = 0

    @property
    def success(self) -> np.ndarray:
        return self.ensemble_preds != self.labels

    def accuracy(self, who: str) -> float:
        preds = self.ensemble_preds if who == "ensemble" else self.member_preds[who]
        return float(np.mean(preds == self.labels))


def _member_gradient(model: Model, params, enclave: Enclave, x_adv, onehot, up_cfg, kernels, stats):
    g = model.graph
    vals = forward(g, model.bindings(params, x_adv, onehot))
    adj = backward(g, vals, wrt=[model.input])
    view = AttackerView(g, enclave, vals, adj)
    info = attacker_gradient(view)
    phi_weights = None
    if model.kind == "vit":
        phi_weights = [[view.value(a) for a in layer] for layer in model.attention]
    if isinstance(info, FullGradient):
        grad = info.grad
    elif up_cfg is None:
        grad = np.zeros_like(x_adv)
    else:
        grid = adjoint_grid(model, info.adjoint)
        key = model.kind
        if key not in kernels:
            k, _ = upsample_geometry(grid.shape[-2:], x_adv.shape[-2:], up_cfg)
            kernels[key] = upsample_kernel(grid.shape[-3], x_adv.shape[-3], k, up_cfg)
        grad = bpda_upsample(grid, up_cfg, x_adv.shape[-3:], kernel=kernels[key])
    stats["reads"] += view.reads
    stats["denied"] += view.denied
    return grad, phi_weights


def saga_attack(ensemble: EnsembleModel, shields, x, labels, cfg: SagaConfig,
                upsampler: UpsamplerConfig | None = None,
                selection_rng: np.random.Generator | None = None) -> AttackOutcome:
    """Run ``cfg.steps`` SAGA iterations on a batch ``x`` (B, C, H, W).

    ``shields`` holds one enclave per ensemble member. With ``cfg.upsample``
    off, a shielded member contributes a zero gradient term.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    members = {m.kind: (m, p, e) for m, p, e in zip(ensemble.members, ensemble.params, shields)}
    k = ensemble.members[0].graph[ensemble.members[0].label].shape[0]
    onehot = np.eye(k)[labels]
    up_cfg = (upsampler or UpsamplerConfig(init_range=cfg.upsample_range, seed=cfg.seed)) if cfg.upsample else None
    kernels: dict = {}
    stats = {"reads": 0, "denied": 0}
    x_adv = x.copy()
    for _ in range(cfg.steps):
        g_cnn, _ = _member_gradient(*members["cnn"], x_adv, onehot, up_cfg, kernels, stats)
        g_vit, att = _member_gradient(*members["vit"], x_adv, onehot, up_cfg, kernels, stats)
        phi = attention_rollout(att, x_adv)
        blend = blend_gradient(g_cnn, g_vit, phi, cfg.alpha_k)
        x_adv = np.clip(x_adv + cfg.step * np.sign(blend), 0.0, 1.0)
    member_preds = {kind: predict(m, p, x_adv) for kind, (m, p, _) in members.items()}
    rng = selection_rng if selection_rng is not None else np.random.default_rng(cfg.seed)
    pick = choose_members(len(x_adv), rng, len(ensemble.members))
    stacked = np.stack([member_preds[m.kind] for m in ensemble.members])
    ens = stacked[pick, np.arange(len(x_adv))]
    linf = np.abs(x_adv - x).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)
    return AttackOutcome(labels, member_preds, ens, x_adv, linf, stats["reads"], stats["denied"])


# --- evaluation grid ------------------------------------------------------------------

@dataclass
class AttackReport:
    """Table-shaped robust accuracies: rows are models, columns are settings."""

    cells: dict = field(default_factory=dict)  # (row, column) -> accuracy in [0, 1]
    meta: dict = field(default_factory=dict)

    def get(self, row: str, col: str) -> float:
        return self.cells[(row, col)]

    def to_json(self) -> str:
        table = {r: {c: round(self.cells[(r, c)], 6) for c in COLUMNS if (r, c) in self.cells} for r in ROWS}
        return json.dumps({"table": table, "meta": self.meta}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("Model Acc.",) + COLUMNS)
        for r in ROWS:
            w.writerow((r,) + tuple(f"{self.cells[(r, c)]:.4f}" if (r, c) in self.cells else "" for c in COLUMNS))
        return buf.getvalue()


def _member_rows(ensemble):
    return {m.kind: ("ViT" if m.kind == "vit" else "CNN") for m in ensemble.members}


def evaluate_robust_accuracy(ensemble: EnsembleModel, setting: str, dataset, attack_fn=None,
                             repeats: int = 10, seed: int = 0, cfg: SagaConfig | None = None):
    """Mean robust accuracy of each member and of the ensemble over ``repeats`` runs.

    ``setting`` is a shield setting from :data:`SETTINGS`, or ``"clean"`` /
    ``"random"`` for the baselines. ``attack_fn(x, labels, repeat)`` may
    replace SAGA and must return an :class:`AttackOutcome`. Returns
    ``(row, outcomes)`` with ``row`` mapping ``ViT``/``CNN``/``Ensemble`` to
    accuracies.
    """
    cfg = cfg or SagaConfig(seed=seed)
    x, labels = dataset.images, dataset.labels
    names = _member_rows(ensemble)
    code = ("clean", "random") + SETTINGS
    outcomes = []
    for r in range(repeats):
        sel_rng = np.random.default_rng([seed, code.index(setting), r, 1])
        if attack_fn is not None:
            out = attack_fn(x, labels, r)
        elif setting in ("clean", "random"):
            xa = x if setting == "clean" else random_linf(
                x, cfg.budget, np.random.default_rng([seed, code.index(setting), r, 2]))
            preds = {m.kind: predict(m, p, xa) for m, p in zip(ensemble.members, ensemble.params)}
            pick = choose_members(len(xa), sel_rng, len(ensemble.members))
            stacked = np.stack([preds[m.kind] for m in ensemble.members])
            linf = np.abs(xa - x).reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)
            out = AttackOutcome(labels, preds, stacked[pick, np.arange(len(xa))], xa, linf)
        else:
            run_seed = int(np.random.default_rng([seed, code.index(setting), r, 3]).integers(2**31))
            run_cfg = dataclasses.replace(cfg, seed=run_seed)
            out = saga_attack(ensemble, canonical_shields(ensemble, setting), x, labels, run_cfg,
                              selection_rng=sel_rng)
        outcomes.append(out)
    row = {names[kind]: float(np.mean([o.accuracy(kind) for o in outcomes])) for kind in names}
    row["Ensemble"] = float(np.mean([o.accuracy("ensemble") for o in outcomes]))
    return row, outcomes


def run_grid(ensemble: EnsembleModel, dataset, cfg: SagaConfig, repeats: int = 10, seed: int = 0,
             workers: int = 1, settings=SETTINGS):
    """Baselines plus SAGA under each shield setting in ``settings``.

    Returns ``(AttackReport, outcomes_by_setting)``.
    """
    columns = dict(zip(("clean", "random") + SETTINGS, COLUMNS))
    jobs = ["clean", "random"] + [s for s in SETTINGS if s in settings]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_job, [(ensemble, s, dataset, repeats, seed, cfg) for s in jobs]))
    else:
        results = [_grid_job((ensemble, s, dataset, repeats, seed, cfg)) for s in jobs]
    report = AttackReport(meta={"repeats": repeats, "seed": seed, "samples": len(dataset),
                                "step": cfg.step, "steps": cfg.steps, "alpha_k": cfg.alpha_k,
                                "upsample": cfg.upsample, "upsample_range": cfg.upsample_range})
    outcomes = {}
    for setting, (row, outs) in zip(jobs, results):
        for r, acc in row.items():
            report.cells[(r, columns[setting])] = acc
        outcomes[setting] = outs
    return report, outcomes


def _grid_job(args):
    ensemble, setting, dataset, repeats, seed, cfg = args
    return evaluate_robust_accuracy(ensemble, setting, dataset, repeats=repeats, seed=seed, cfg=cfg)
