"""Parametric target policies: recurrent deep rules and per-stage linear rules.

The deep rule is time-invariant: one parameter set evaluated at every
stage, carrying a latent state between stages, so a trained policy rolls
out on any horizon.  Stage 1 consumes the initial volumes (inflow slots
zeroed, stage-one flag set); later stages consume the realized inflow
(initial-volume slots zeroed).  The volume head is squashed into
[vmin, vmax] per hydro unless ``squash=False``.

The linear rule is time-specific: stage t applies a matrix to the stacked
history [w_2, ..., w_t, x0], exactly linear so its gradient is an outer
product.

Backward passes take per-stage cotangents (the target-row duals) and
return the exact gradient of sum_t lam_t . targets_t with respect to the
parameters, via reverse accumulation through the latent recurrence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .model import GridCase
from .scenarios import ScenarioPath


@dataclass(frozen=True)
class PolicySpec:
    """Shapes, bounds and input normalization shared by params and tapes."""
    kind: str                        # "ts-ddr" | "ts-ldr"
    n_hydros: int
    horizon: int                     # LDR is horizon-bound; DDR stores it for metadata only
    latent_dim: int = 16
    hidden_layers: int = 2
    squash: bool = True
    vmin: tuple = ()
    vmax: tuple = ()
    x0: tuple = ()
    w_scale: tuple = ()              # per-hydro inflow normalizer
    x0_scale: tuple = ()

    @property
    def input_dim(self) -> int:
        # [w slots | x0 slots | stage-one flag | latent]
        return 2 * self.n_hydros + 1 + self.latent_dim


def spec_for_case(case: GridCase, kind: str, latent_dim: int = 16,
                  hidden_layers: int = 2, squash: bool = True,
                  w_scale=None) -> PolicySpec:
    """Build a PolicySpec sized for a case; ``w_scale`` defaults to each
    hydro's half-capacity stage water use (same anchor as make_lattice)."""
    gens = {g.id: g for g in case.generators}
    if w_scale is None:
        w_scale = [max(0.5 * h.phi * gens[h.generator].pmax * case.stage_hours, 1e-9)
                   for h in case.hydros]
    return PolicySpec(kind=kind, n_hydros=case.n_hydros, horizon=case.horizon,
                      latent_dim=latent_dim, hidden_layers=hidden_layers,
                      squash=squash,
                      vmin=tuple(float(h.vmin) for h in case.hydros),
                      vmax=tuple(float(h.vmax) for h in case.hydros),
                      x0=tuple(float(h.v0) for h in case.hydros),
                      w_scale=tuple(float(v) for v in w_scale),
                      x0_scale=tuple(max(float(h.vmax), 1e-9) for h in case.hydros))


@dataclass
class DdrParams:
    """Weights of the recurrent deep rule: hidden stack plus two heads
    (volume targets, next latent)."""
    spec: PolicySpec
    w: list[np.ndarray]              # hidden layer weights
    b: list[np.ndarray]
    w_x: np.ndarray                  # target head
    b_x: np.ndarray
    w_l: np.ndarray                  # latent head
    b_l: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [*self.w, *self.b, self.w_x, self.b_x, self.w_l, self.b_l]


@dataclass
class LdrParams:
    """Per-stage matrices over the stacked history [w_2..w_t, x0]."""
    spec: PolicySpec
    theta: list[np.ndarray]          # stage t: (n_hydros, t * n_hydros)

    def arrays(self) -> list[np.ndarray]:
        return list(self.theta)


@dataclass
class RolloutTape:
    """Everything the backward pass needs to replay one forward rollout."""
    inputs: list[np.ndarray] = field(default_factory=list)        # first-layer inputs
    hidden: list[list[np.ndarray]] = field(default_factory=list)  # activations per layer
    head_x_pre: list[np.ndarray] = field(default_factory=list)    # pre-squash target head
    latents: list[np.ndarray] = field(default_factory=list)       # l_1 .. l_T
    targets: np.ndarray | None = None


# -- flat-vector packing (Adam and finite differences work on one vector) ----

def pack(params) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()]) if params.arrays() \
        else np.zeros(0)

def unpack_like(params, vec: np.ndarray):
    """New params object with the same shapes filled from ``vec``."""
    arrays = []
    off = 0
    for a in params.arrays():
        arrays.append(vec[off:off + a.size].reshape(a.shape).copy())
        off += a.size
    if off != vec.size:
        raise ValueError("vector length does not match parameter count")
    if isinstance(params, DdrParams):
        k = len(params.w)
        return DdrParams(spec=params.spec, w=arrays[:k], b=arrays[k:2 * k],
                         w_x=arrays[2 * k], b_x=arrays[2 * k + 1],
                         w_l=arrays[2 * k + 2], b_l=arrays[2 * k + 3])
    return LdrParams(spec=params.spec, theta=arrays)


def init_params(spec: PolicySpec, seed: int):
    """Deterministic seeded initialization.

    Deep rule: uniform +-sqrt(6 / (fan_in + fan_out)) weights and zero
    biases, on unit-scale normalized inputs.  Linear rule: identity on the
    initial-volume block, so the starting policy holds the initial volumes.
    """
    if spec.kind == "ts-ddr":
        rng = np.random.default_rng(seed)
        dims = [spec.input_dim] + [spec.latent_dim] * spec.hidden_layers
        w, b = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (d_in + d_out))
            w.append(rng.uniform(-lim, lim, size=(d_out, d_in)))
            b.append(np.zeros(d_out))
        lim = np.sqrt(6.0 / (dims[-1] + spec.n_hydros))
        w_x = rng.uniform(-lim, lim, size=(spec.n_hydros, dims[-1]))
        lim = np.sqrt(6.0 / (dims[-1] + spec.latent_dim))
        w_l = rng.uniform(-lim, lim, size=(spec.latent_dim, dims[-1]))
        return DdrParams(spec=spec, w=w, b=b, w_x=w_x, b_x=np.zeros(spec.n_hydros),
                         w_l=w_l, b_l=np.zeros(spec.latent_dim))
    if spec.kind == "ts-ldr":
        H = spec.n_hydros
        theta = []
        for t in range(spec.horizon):
            m = np.zeros((H, (t + 1) * H))
            m[:, t * H:] = np.eye(H)     # the x0 block is last in the stack
            theta.append(m)
        return LdrParams(spec=spec, theta=theta)
    raise ValueError(f"unknown policy kind {spec.kind!r}")


# -- deep rule ----------------------------------------------------------------

def _squash(spec: PolicySpec, pre: np.ndarray) -> np.ndarray:
    if not spec.squash:
        return pre.copy()
    lo = np.asarray(spec.vmin)
    hi = np.asarray(spec.vmax)
    return lo + (hi - lo) * expit(pre)


def _squash_grad(spec: PolicySpec, pre: np.ndarray) -> np.ndarray:
    if not spec.squash:
        return np.ones_like(pre)
    lo = np.asarray(spec.vmin)
    hi = np.asarray(spec.vmax)
    s = expit(pre)
    return (hi - lo) * s * (1.0 - s)


def ddr_forward(params: DdrParams, path: ScenarioPath, x0=None,
                horizon: int | None = None) -> tuple[np.ndarray, RolloutTape]:
    """Roll the recurrent rule along a path; returns (targets, tape).

    ``horizon`` defaults to the path length; any length works because the
    parameters are stage-invariant.
    """
    spec = params.spec
    H = spec.n_hydros
    T = horizon if horizon is not None else path.inflows.shape[0]
    if path.inflows.shape[1] != H:
        raise ValueError("path hydro dimension does not match the policy")
    if T > path.inflows.shape[0]:
        raise ValueError("rollout horizon exceeds the path length")
    x0 = np.asarray(spec.x0 if x0 is None else x0, dtype=float)
    w_scale = np.asarray(spec.w_scale)
    x0_scale = np.asarray(spec.x0_scale)

    tape = RolloutTape()
    lat = np.zeros(spec.latent_dim)
    targets = np.zeros((T, H))
    for t in range(T):
        head = np.zeros(2 * H + 1)
        if t == 0:
            head[H:2 * H] = x0 / x0_scale
            head[2 * H] = 1.0
        else:
            head[:H] = path.inflows[t] / w_scale
        a = np.concatenate([head, lat])
        acts = []
        z = a
        for w, b in zip(params.w, params.b):
            z = np.tanh(w @ z + b)
            acts.append(z)
        hx = params.w_x @ z + params.b_x
        lat = np.tanh(params.w_l @ z + params.b_l)
        targets[t] = _squash(spec, hx)
        tape.inputs.append(a)
        tape.hidden.append(acts)
        tape.head_x_pre.append(hx)
        tape.latents.append(lat)
    tape.targets = targets
    return targets, tape


def ddr_backward(params: DdrParams, tape: RolloutTape, lam: np.ndarray) -> DdrParams:
    """Gradient of sum_t lam_t . targets_t w.r.t. the parameters.

    Reverse accumulation through the latent chain; ``lam`` entries are
    treated as constants (they come from the dispatch duals).
    """
    spec = params.spec
    T = len(tape.inputs)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (T, spec.n_hydros):
        raise ValueError(f"cotangents must be ({T}, {spec.n_hydros}), got {lam.shape}")
    g_w = [np.zeros_like(w) for w in params.w]
    g_b = [np.zeros_like(b) for b in params.b]
    g_wx = np.zeros_like(params.w_x)
    g_bx = np.zeros_like(params.b_x)
    g_wl = np.zeros_like(params.w_l)
    g_bl = np.zeros_like(params.b_l)

    g_lat = np.zeros(spec.latent_dim)     # dL/d latent_t flowing backwards
    for t in range(T - 1, -1, -1):
        z_last = tape.hidden[t][-1] if params.w else tape.inputs[t]
        gh_x = lam[t] * _squash_grad(spec, tape.head_x_pre[t])
        gh_l = g_lat * (1.0 - tape.latents[t] ** 2)
        g_wx += np.outer(gh_x, z_last)
        g_bx += gh_x
        g_wl += np.outer(gh_l, z_last)
        g_bl += gh_l
        g_z = params.w_x.T @ gh_x + params.w_l.T @ gh_l
        for k in range(len(params.w) - 1, -1, -1):
            z_in = tape.hidden[t][k - 1] if k > 0 else tape.inputs[t]
            g_pre = g_z * (1.0 - tape.hidden[t][k] ** 2)
            g_w[k] += np.outer(g_pre, z_in)
            g_b[k] += g_pre
            g_z = params.w[k].T @ g_pre
        # the tail of the first-layer input is latent_{t-1}
        g_lat = g_z[2 * spec.n_hydros + 1:]
    return DdrParams(spec=spec, w=g_w, b=g_b, w_x=g_wx, b_x=g_bx, w_l=g_wl, b_l=g_bl)


# -- linear rule ---------------------------------------------------------------

def _history_stack(spec: PolicySpec, path: ScenarioPath, x0, t: int) -> np.ndarray:
    """[w_2, ..., w_t, x0] for stage index t (0-based): t inflow blocks."""
    blocks = [path.inflows[s] for s in range(1, t + 1)]
    blocks.append(np.asarray(x0, dtype=float))
    return np.concatenate(blocks)


def ldr_forward(params: LdrParams, path: ScenarioPath, x0=None) -> np.ndarray:
    spec = params.spec
    T = spec.horizon
    if path.inflows.shape[0] < T:
        raise ValueError("path shorter than the linear rule's horizon")
    x0 = np.asarray(spec.x0 if x0 is None else x0, dtype=float)
    targets = np.zeros((T, spec.n_hydros))
    for t in range(T):
        s_t = _history_stack(spec, path, x0, t)
        if params.theta[t].shape[1] != s_t.size:
            raise ValueError(f"stage {t}: rule expects {params.theta[t].shape[1]} "
                             f"history entries, got {s_t.size}")
        targets[t] = params.theta[t] @ s_t
    return targets


def ldr_backward(params: LdrParams, path: ScenarioPath, x0, lam: np.ndarray) -> LdrParams:
    """dL/d theta_t = lam_t (outer) history_t; exact, no approximation."""
    spec = params.spec
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (spec.horizon, spec.n_hydros):
        raise ValueError("cotangent shape mismatch")
    x0 = np.asarray(spec.x0 if x0 is None else x0, dtype=float)
    grads = []
    for t in range(spec.horizon):
        s_t = _history_stack(spec, path, x0, t)
        grads.append(np.outer(lam[t], s_t))
    return LdrParams(spec=spec, theta=grads)


# -- rollout facade used by evaluation and the trainer ------------------------

class Policy:
    """Bundles spec+params behind a uniform ``rollout(path) -> targets``."""

    def __init__(self, params):
        self.params = params

    @property
    def spec(self) -> PolicySpec:
        return self.params.spec

    @property
    def kind(self) -> str:
        return self.params.spec.kind

    def rollout(self, path: ScenarioPath) -> np.ndarray:
        if isinstance(self.params, DdrParams):
            targets, _ = ddr_forward(self.params, path)
            return targets
        return ldr_forward(self.params, path)

    def rollout_with_tape(self, path: ScenarioPath):
        if isinstance(self.params, DdrParams):
            return ddr_forward(self.params, path)
        return ldr_forward(self.params, path), None

    def gradient(self, path: ScenarioPath, tape, lam: np.ndarray) -> np.ndarray:
        if isinstance(self.params, DdrParams):
            return pack(ddr_backward(self.params, tape, lam))
        return pack(ldr_backward(self.params, path, None, lam))

    def with_vector(self, vec: np.ndarray) -> "Policy":
        return Policy(unpack_like(self.params, vec))

    def vector(self) -> np.ndarray:
        return pack(self.params)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, case_hash: str, seed: int, extra: dict | None = None) -> None:
    spec = params.spec
    doc = {
        "version": CHECKPOINT_VERSION,
        "case_hash": case_hash,
        "seed": seed,
        "spec": {
            "kind": spec.kind, "n_hydros": spec.n_hydros, "horizon": spec.horizon,
            "latent_dim": spec.latent_dim, "hidden_layers": spec.hidden_layers,
            "squash": spec.squash, "vmin": list(spec.vmin), "vmax": list(spec.vmax),
            "x0": list(spec.x0), "w_scale": list(spec.w_scale),
            "x0_scale": list(spec.x0_scale),
        },
        "shapes": [list(a.shape) for a in params.arrays()],
        "values": [a.ravel().tolist() for a in params.arrays()],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Returns (params, case_hash, extra)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    sd = doc["spec"]
    spec = PolicySpec(kind=sd["kind"], n_hydros=sd["n_hydros"], horizon=sd["horizon"],
                      latent_dim=sd["latent_dim"], hidden_layers=sd["hidden_layers"],
                      squash=sd["squash"], vmin=tuple(sd["vmin"]), vmax=tuple(sd["vmax"]),
                      x0=tuple(sd["x0"]), w_scale=tuple(sd["w_scale"]),
                      x0_scale=tuple(sd["x0_scale"]))
    arrays = [np.array(v, dtype=float).reshape(shape)
              for v, shape in zip(doc["values"], doc["shapes"])]
    template = init_params(spec, seed=0)
    params = unpack_like(template, np.concatenate([a.ravel() for a in arrays])
                         if arrays else np.zeros(0))
    return params, doc["case_hash"], doc.get("extra", {})
