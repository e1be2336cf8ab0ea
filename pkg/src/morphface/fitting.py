"""Landmark fitting: VDC / WPDC costs, Levenberg-Marquardt and meta-joint step selection.

Parameters are flattened as ``[scale, pitch, yaw, roll, tx, ty, id..., exp...]``
everywhere in this module (see :meth:`ModelParams.to_vector`). Rotation is
optimized directly in Euler-angle space; this is fine for face poses but
degrades near yaw = +-90 degrees (gimbal lock).

Meta-joint fitting works at test time, without ground-truth parameters: the
incumbent estimate is the anchor for both costs and is refreshed every
meta-iteration. Each branch runs ``meta_k`` LM steps on the meta-train
landmarks with a proximal term that keeps the candidate near the anchor,
measured either in vertex space (VDC) or in importance-weighted parameter
space (WPDC). The candidate with the lower meta-test landmark error is kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, List, Optional

import numpy as np

from morphface.errors import (
    ConfigurationError,
    DegenerateGeometryError,
    InvalidArgumentError,
    UnderConstrainedError,
)
from morphface.model import (
    N_POSE,
    ModelParams,
    MorphableBasis,
    euler_from_rotation,
    landmark_basis,
    project_model,
    rotation_derivatives,
    rotation_from_euler,
)

log = logging.getLogger(__name__)

VDC = "VDC"
WPDC = "WPDC"

_MAX_DAMPING = 1e16


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    convergence_tol: float = 1e-8
    damping_init: float = 1e-3
    id_regularization: float = 1e-4
    exp_regularization: float = 1e-3
    meta_k: int = 3
    meta_test_fraction: float = 0.25
    rng_seed: int = 0
    # weight of the proximal VDC/WPDC anchor term in the meta-joint branches
    anchor_weight: float = 1e-2

    def __post_init__(self):
        if self.max_iterations < 1 or self.meta_k < 1:
            raise ConfigurationError("max_iterations and meta_k must be positive")
        if not 0.0 < self.meta_test_fraction < 1.0:
            raise ConfigurationError(f"meta_test_fraction must be in (0, 1), got {self.meta_test_fraction}")
        if not (self.convergence_tol > 0 and self.damping_init > 0):
            raise ConfigurationError("convergence_tol and damping_init must be strictly positive")
        if self.id_regularization < 0 or self.exp_regularization < 0 or self.anchor_weight < 0:
            raise ConfigurationError("regularization weights must be non-negative")


@dataclass
class MetaStep:
    """Everything needed to replay one meta-iteration."""

    anchor: np.ndarray
    weights: np.ndarray
    vdc_candidate: np.ndarray
    wpdc_candidate: np.ndarray
    vdc_error: float
    wpdc_error: float
    branch: str
    anchor_weight: float


@dataclass
class FitResult:
    params: ModelParams
    final_cost: float
    iterations: int
    cost_trace: List[float]
    branch_trace: List[str] = field(default_factory=list)
    converged: bool = False
    meta_steps: List[MetaStep] = field(default_factory=list)
    train_indices: Optional[np.ndarray] = None
    test_indices: Optional[np.ndarray] = None
    diagnostic: str = ""


# ---------------------------------------------------------------------------
# costs

def vdc(basis: MorphableBasis, params_pred: ModelParams, params_gt: ModelParams) -> float:
    """Mean squared distance between the projected vertices of two parameter sets."""
    diff = project_model(basis, params_pred) - project_model(basis, params_gt)
    return float(np.mean(np.sum(diff ** 2, axis=1)))


def _check_same_layout(basis, params_pred, params_gt):
    params_pred.check_compatible(basis)
    params_gt.check_compatible(basis)


def wpdc_weights(basis: MorphableBasis, params_pred: ModelParams, params_gt: ModelParams) -> np.ndarray:
    """Per-parameter importance: vertex displacement caused by swapping in one predicted value.

    ``w_i = || V(p_gt with p_i := pred_i) - V(p_gt) ||``, normalized so the
    largest weight is 1. If nothing moves, every weight is ``1 / P``.
    """
    _check_same_layout(basis, params_pred, params_gt)
    pred, gt = params_pred.to_vector(), params_gt.to_vector()
    ref = project_model(basis, params_gt)
    raw = np.zeros(pred.size)
    for i in np.flatnonzero(pred != gt):
        vec = gt.copy()
        vec[i] = pred[i]
        moved = project_model(basis, ModelParams.from_vector(vec, basis.n_id, basis.n_exp))
        raw[i] = np.linalg.norm(moved - ref)
    top = raw.max()
    if top == 0.0:
        return np.full(pred.size, 1.0 / pred.size)
    return raw / top


def wpdc(basis: MorphableBasis, params_pred: ModelParams, params_gt: ModelParams,
         weights: Optional[np.ndarray] = None) -> float:
    if weights is None:
        weights = wpdc_weights(basis, params_pred, params_gt)
    else:
        _check_same_layout(basis, params_pred, params_gt)
    d = params_pred.to_vector() - params_gt.to_vector()
    return float(np.sum(weights * d ** 2))


# ---------------------------------------------------------------------------
# landmark residual

class LandmarkProblem:
    """Residuals and analytic Jacobian of the regularized landmark objective.

    Residual layout: ``(x0, y0, x1, y1, ...)`` for the selected landmarks,
    followed by ``sqrt(lam_id) * id`` and ``sqrt(lam_exp) * exp``.
    """

    def __init__(self, basis: MorphableBasis, observed, lam_id=0.0, lam_exp=0.0, subset=None):
        mean, bid, bexp = landmark_basis(basis)
        observed = np.asarray(observed, dtype=np.float64)
        if subset is not None:
            subset = np.asarray(subset)
            mean, bid, bexp, observed = mean[subset], bid[subset], bexp[subset], observed[subset]
        self.mean = mean
        self.shape_basis = np.concatenate([bid, bexp], axis=2)
        self.observed = observed
        self.n_id, self.n_exp = basis.n_id, basis.n_exp
        self.reg = np.sqrt(np.concatenate([np.full(basis.n_id, lam_id), np.full(basis.n_exp, lam_exp)]))

    @property
    def n_params(self):
        return N_POSE + self.n_id + self.n_exp

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        shape = self.mean + self.shape_basis @ x[N_POSE:]
        rot = rotation_from_euler(*x[1:4])
        return x[0] * shape @ rot[:2].T + x[4:6]

    def residual(self, x):
        data = (self.project(x) - self.observed).reshape(-1)
        return np.concatenate([data, self.reg * x[N_POSE:]])

    def jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        f = x[0]
        shape = self.mean + self.shape_basis @ x[N_POSE:]
        rot = rotation_from_euler(*x[1:4])
        L = len(self.mean)
        J = np.zeros((2 * L, self.n_params))
        J[:, 0] = (shape @ rot[:2].T).reshape(-1)
        for a, d_rot in enumerate(rotation_derivatives(*x[1:4])):
            J[:, 1 + a] = (f * shape @ d_rot[:2].T).reshape(-1)
        J[0::2, 4] = 1.0
        J[1::2, 5] = 1.0
        J[:, N_POSE:] = (f * np.einsum("ab,lbk->lak", rot[:2], self.shape_basis)).reshape(2 * L, -1)
        reg = np.zeros((self.reg.size, self.n_params))
        reg[:, N_POSE:] = np.diag(self.reg)
        return np.vstack([J, reg])

    def __call__(self, x):
        return self.residual(x), self.jacobian(x)

    def sse(self, x) -> float:
        return float(np.sum((self.project(x) - self.observed) ** 2))


def _affine_pose(shape, obs):
    design = np.column_stack([shape, np.ones(len(shape))])
    sol, _, rank, _ = np.linalg.lstsq(design, obs, rcond=None)
    if rank < 4:
        raise DegenerateGeometryError("model landmarks are coplanar or collinear, pose is ambiguous")
    M, t = sol[:3].T, sol[3]
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    scale = float(np.mean(s))
    if scale <= 1e-12 * max(1.0, np.abs(shape).max()) or not np.any(obs - obs.mean(axis=0)):
        raise DegenerateGeometryError("observed landmarks collapse to a point, scale is undetermined")
    rows = u @ vt
    return scale, np.vstack([rows, np.cross(rows[0], rows[1])]), t


def initial_params(basis: MorphableBasis, observed, subset=None, rounds: int = 5,
                   lam_id: float = 1e-4, lam_exp: float = 1e-3) -> ModelParams:
    """Closed-form starting point by alternating pose and shape solves.

    Pose: fit an affine camera ``obs ~ M @ X + t`` by linear least squares and
    project ``M`` onto the nearest scaled rotation. Shape: with the pose
    fixed, the landmarks are linear in the coefficients, solved as ridge
    regression. ``rounds=0`` gives the pose of the mean shape.
    """
    mean, bid, bexp = landmark_basis(basis)
    obs = np.asarray(observed, dtype=np.float64)
    if subset is not None:
        mean, bid, bexp, obs = mean[subset], bid[subset], bexp[subset], obs[subset]
    shape_basis = np.concatenate([bid, bexp], axis=2)
    ridge = np.concatenate([np.full(basis.n_id, lam_id), np.full(basis.n_exp, lam_exp)])
    coeffs = np.zeros(basis.n_id + basis.n_exp)
    scale, rot, t = _affine_pose(mean, obs)
    for _ in range(rounds):
        A = (scale * np.einsum("ab,lbk->lak", rot[:2], shape_basis)).reshape(-1, coeffs.size)
        b = (obs - t - scale * mean @ rot[:2].T).reshape(-1)
        coeffs = np.linalg.solve(A.T @ A + np.diag(ridge), A.T @ b)
        scale, rot, t = _affine_pose(mean + shape_basis @ coeffs, obs)
    return ModelParams(
        scale=scale,
        rotation=euler_from_rotation(rot),
        translation_2d=t,
        id_coeffs=coeffs[:basis.n_id],
        exp_coeffs=coeffs[basis.n_id:],
    )


# ---------------------------------------------------------------------------
# Levenberg-Marquardt

@dataclass
class _LMRun:
    x: np.ndarray
    cost: float
    trace: List[float]
    accepted: int
    converged: bool


def levenberg_marquardt(
    fun: Callable[[np.ndarray], tuple],
    x0: np.ndarray,
    max_steps: int,
    tol: float,
    damping: float,
    max_attempts: Optional[int] = None,
    atol: float = 0.0,
) -> _LMRun:
    """Minimize ``||r(x)||^2`` where ``fun(x) -> (r, J)``.

    Uses Marquardt's diagonal scaling. A step whose relative cost decrease is
    below ``tol`` ends the run as converged and is not applied, so a start at
    an exact minimizer takes zero steps. Steps that make the scale parameter
    non-positive are rejected. A cost at or below ``atol`` counts as an exact fit.
    """
    x = np.array(x0, dtype=np.float64)
    r, J = fun(x)
    cost = float(r @ r)
    trace = [cost]
    mu = damping
    accepted = 0
    attempts = 0
    max_attempts = max_attempts if max_attempts is not None else 10 * max_steps + 50
    converged = cost <= atol
    while not converged and accepted < max_steps and attempts < max_attempts:
        attempts += 1
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1.0))
        try:
            step = -np.linalg.solve(A + mu * np.diag(diag), g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        x_new = x + step
        if not (x_new[0] > 0 and np.all(np.isfinite(x_new))):
            mu *= 10.0
            continue
        r_new, J_new = fun(x_new)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            if cost - cost_new < tol * cost:
                converged = True
                break
            x, r, J, cost = x_new, r_new, J_new, cost_new
            trace.append(cost)
            accepted += 1
            mu = max(mu / 3.0, 1e-15)
            converged = cost <= atol
        else:
            mu *= 4.0
            if mu > _MAX_DAMPING:
                # no descent direction left at working precision
                converged = True
    return _LMRun(x, cost, trace, accepted, converged)


def _validate_observed(basis: MorphableBasis, observed) -> np.ndarray:
    obs = np.asarray(observed, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != 2:
        raise InvalidArgumentError(f"observed landmarks must be (L, 2), got shape {obs.shape}")
    if not np.all(np.isfinite(obs)):
        raise InvalidArgumentError("observed landmarks contain non-finite values")
    if len(obs) < 4:
        raise UnderConstrainedError(f"need at least 4 landmarks, got {len(obs)}")
    if len(obs) != basis.landmark_count:
        raise InvalidArgumentError(
            f"got {len(obs)} observed landmarks, basis defines {basis.landmark_count}"
        )
    return obs


_START_PITCH = np.deg2rad([-30.0, 0.0, 30.0])
_START_YAW = np.deg2rad([-60.0, -30.0, 0.0, 30.0, 60.0])


def start_points(basis: MorphableBasis, observed) -> List[ModelParams]:
    """Zero shape coefficients with a closed-form pose, then re-posed on a pitch/yaw grid.

    Orthographic views of a shallow face cap confuse pitch and yaw, so a
    single start can settle in the wrong basin.
    """
    base = initial_params(basis, observed, rounds=0)
    starts = [base]
    roll = base.rotation[2]
    for pitch in _START_PITCH:
        for yaw in _START_YAW:
            starts.append(base.replace(rotation=(pitch, yaw, roll)))
    return starts


def fit_landmarks(
    basis: MorphableBasis,
    observed,
    config: FitConfig = FitConfig(),
    init: Optional[ModelParams] = None,
) -> FitResult:
    """Regularized landmark least squares by Levenberg-Marquardt.

    Minimizes ``sum_j ||V_2d(p)[lmk_j] - obs_j||^2 + lam_id |id|^2 + lam_exp |exp|^2``.
    Without ``init``, LM runs from every :func:`start_points` candidate and
    the lowest final cost wins (ties go to the earlier start).
    """
    obs = _validate_observed(basis, observed)
    starts = start_points(basis, obs) if init is None else [init]
    for s in starts:
        s.check_compatible(basis)
    problem = LandmarkProblem(basis, obs, config.id_regularization, config.exp_regularization)
    atol = exact_fit_tolerance(obs)
    best = None
    for s in starts:
        run = levenberg_marquardt(problem, s.to_vector(), config.max_iterations,
                                  config.convergence_tol, config.damping_init, atol=atol)
        if best is None or run.cost < best.cost:
            best = run
    params = ModelParams.from_vector(best.x, basis.n_id, basis.n_exp)
    diagnostic = "" if best.converged else f"no convergence after {best.accepted} steps"
    if not best.converged:
        log.warning("fit_landmarks: %s (cost %.6g)", diagnostic, best.cost)
    return FitResult(params, best.cost, best.accepted, best.trace, converged=best.converged, diagnostic=diagnostic)


def exact_fit_tolerance(observed) -> float:
    """Squared-residual level indistinguishable from rounding in the landmark coordinates."""
    obs = np.asarray(observed, dtype=np.float64)
    return obs.shape[0] * (1e-12 * max(1.0, float(np.abs(obs).max()))) ** 2


def landmark_cost(basis: MorphableBasis, observed, params: ModelParams, config: FitConfig = FitConfig()) -> float:
    """Value of the :func:`fit_landmarks` objective at ``params``."""
    problem = LandmarkProblem(basis, observed, config.id_regularization, config.exp_regularization)
    r = problem.residual(params.to_vector())
    return float(r @ r)


def reprojection_rmse(basis: MorphableBasis, observed, params: ModelParams) -> float:
    diff = project_model(basis, params)[basis.landmark_indices] - np.asarray(observed, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))


# ---------------------------------------------------------------------------
# meta-joint

def meta_split(n_landmarks: int, config: FitConfig):
    """Seeded meta-train / meta-test landmark split."""
    n_test = int(round(config.meta_test_fraction * n_landmarks))
    if n_test < 2:
        raise ConfigurationError(
            f"meta-test subset has {n_test} landmarks (need >= 2); raise meta_test_fraction"
        )
    if n_landmarks - n_test < 4:
        raise ConfigurationError(f"meta-train subset has {n_landmarks - n_test} landmarks (need >= 4)")
    perm = np.random.default_rng(config.rng_seed).permutation(n_landmarks)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


class _AnchoredProblem:
    """Meta-train landmark residual plus a proximal pull toward the anchor."""

    def __init__(self, basis, train: LandmarkProblem, anchor, branch, weights, anchor_weight):
        self.train = train
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.branch = branch
        if branch == VDC:
            # vertex-space proximity over the whole mesh, scaled to a mean
            self.full = LandmarkProblem(
                _all_vertices(basis), np.zeros((basis.vertex_count, 2))
            )
            self.anchor_verts = self.full.project(self.anchor)
            self.coef = np.sqrt(anchor_weight / basis.vertex_count)
        else:
            self.coef = np.sqrt(anchor_weight * np.asarray(weights, dtype=np.float64))

    def __call__(self, x):
        r, J = self.train(x)
        if self.branch == VDC:
            extra_r = self.coef * (self.full.project(x) - self.anchor_verts).reshape(-1)
            extra_J = self.coef * self.full.jacobian(x)[: self.anchor_verts.size]
        else:
            extra_r = self.coef * (x - self.anchor)
            extra_J = np.diag(self.coef)
        return np.concatenate([r, extra_r]), np.vstack([J, extra_J])


@lru_cache(maxsize=4)
def _all_vertices(basis: MorphableBasis) -> MorphableBasis:
    """The same model with every vertex as a landmark (bases hash by identity)."""
    return MorphableBasis(basis.mean_shape, basis.id_basis, basis.exp_basis, basis.triangles,
                          np.arange(basis.vertex_count))


def meta_candidates(basis, observed, anchor, weights, train_idx, config: FitConfig):
    """Run ``meta_k`` LM steps per branch from ``anchor``; returns ``(vdc_x, wpdc_x)``."""
    # the anchor term regularizes each step, so no ridge prior here
    train = LandmarkProblem(basis, observed, subset=train_idx)
    out = []
    for branch in (VDC, WPDC):
        prob = _AnchoredProblem(basis, train, anchor, branch, weights, config.anchor_weight)
        run = levenberg_marquardt(prob, anchor, config.meta_k, config.convergence_tol, config.damping_init)
        out.append(run.x)
    return out[0], out[1]


def meta_test_error(basis, observed, x, test_idx) -> float:
    """Sum of squared landmark reprojection errors over the meta-test subset."""
    return LandmarkProblem(basis, observed, subset=test_idx).sse(x)


def select_branch(vdc_error: float, wpdc_error: float) -> str:
    return VDC if vdc_error < wpdc_error else WPDC


def meta_joint_fit(
    basis: MorphableBasis,
    observed,
    params_gt_proxy: ModelParams,
    config: FitConfig = FitConfig(),
) -> FitResult:
    """Alternate VDC- and WPDC-anchored lookahead, keeping the branch that wins on meta-test.

    ``config.max_iterations`` bounds the total number of kept LM steps, so a
    run spends the same step budget as :func:`fit_landmarks`.
    """
    obs = _validate_observed(basis, observed)
    params_gt_proxy.check_compatible(basis)
    train_idx, test_idx = meta_split(len(obs), config)

    x = params_gt_proxy.to_vector()
    prev_anchor = x.copy()
    best_err = meta_test_error(basis, obs, x, test_idx)
    trace = [best_err]
    branches: List[str] = []
    steps: List[MetaStep] = []
    spent = 0
    # grows when neither candidate beats the incumbent on meta-test, shrinks on success
    tighten = 1.0
    exact = exact_fit_tolerance(obs[test_idx])
    converged = best_err <= exact
    while not converged and spent + config.meta_k <= config.max_iterations:
        step_cfg = replace(config, anchor_weight=config.anchor_weight * tighten)
        weights = wpdc_weights(
            basis,
            ModelParams.from_vector(x, basis.n_id, basis.n_exp),
            ModelParams.from_vector(prev_anchor, basis.n_id, basis.n_exp),
        )
        cand_v, cand_w = meta_candidates(basis, obs, x, weights, train_idx, step_cfg)
        err_v = meta_test_error(basis, obs, cand_v, test_idx)
        err_w = meta_test_error(basis, obs, cand_w, test_idx)
        branch = select_branch(err_v, err_w)
        steps.append(MetaStep(x.copy(), weights, cand_v, cand_w, err_v, err_w, branch, step_cfg.anchor_weight))
        branches.append(branch)
        new_x, new_err = (cand_v, err_v) if branch == VDC else (cand_w, err_w)
        spent += config.meta_k
        if not new_err < best_err:
            tighten *= 10.0
            converged = tighten > 1e8
            continue
        gain = best_err - new_err
        prev_anchor, x, best_err = x, new_x, new_err
        trace.append(best_err)
        tighten = max(tighten / 10.0, 1.0)
        converged = best_err <= exact or gain < config.convergence_tol * (best_err + gain)

    params = ModelParams.from_vector(x, basis.n_id, basis.n_exp)
    diagnostic = "" if converged else f"step budget exhausted after {len(branches)} meta-iterations"
    return FitResult(
        params=params,
        final_cost=landmark_cost(basis, obs, params, config),
        iterations=spent,
        cost_trace=trace,
        branch_trace=branches,
        converged=converged,
        meta_steps=steps,
        train_indices=train_idx,
        test_indices=test_idx,
        diagnostic=diagnostic,
    )
