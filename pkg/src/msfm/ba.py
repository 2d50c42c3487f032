"""Bundle adjustment: Levenberg-Marquardt over cameras, focal lengths and points.

Each camera contributes 7 parameters (3 rotation, 3 translation, 1 focal);
principal points stay fixed.  Rotations update multiplicatively on the left,
R <- exp([w]x) R.  The damped normal equations are solved by eliminating the
3x3 point blocks (Schur complement), which keeps the dense solve at 7 * n_cam
unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import MsfmError
from .model import Camera, Model, make_intrinsics

BA_MAX_ITERS = 100
BA_REL_TOL = 1e-6

CAM_PARAMS = 7  # rotation (3), translation (3), focal (1)


def rodrigues(w: np.ndarray) -> np.ndarray:
    """exp([w]x) for a rotation vector w."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]], dtype=np.float64)
        return np.eye(3) + W
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


@dataclass
class BAProblem:
    """Observation arrays plus the parameter state being optimized."""

    R: np.ndarray          # (n_cam, 3, 3) world-to-camera rotations
    t: np.ndarray          # (n_cam, 3)
    f: np.ndarray          # (n_cam,)
    pp: np.ndarray         # (n_cam, 2) fixed principal points
    X: np.ndarray          # (n_pts, 3)
    cam_idx: np.ndarray    # (n_obs,)
    pt_idx: np.ndarray     # (n_obs,)
    uv: np.ndarray         # (n_obs, 2) measured pixels

    @property
    def n_cams(self) -> int:
        return len(self.f)

    @property
    def n_pts(self) -> int:
        return len(self.X)

    @property
    def n_obs(self) -> int:
        return len(self.uv)

    def residuals(self, R=None, t=None, f=None, X=None) -> np.ndarray:
        """(n_obs, 2) reprojection residuals, prediction minus measurement."""
        R = self.R if R is None else R
        t = self.t if t is None else t
        f = self.f if f is None else f
        X = self.X if X is None else X
        xc = np.einsum("oij,oj->oi", R[self.cam_idx], X[self.pt_idx]) + t[self.cam_idx]
        z = xc[:, 2]
        fo = f[self.cam_idx]
        pred = fo[:, None] * xc[:, :2] / z[:, None] + self.pp[self.cam_idx]
        return pred - self.uv

    def jacobian_blocks(self):
        """Per-observation (2,7) camera and (2,3) point Jacobian blocks."""
        Ro = self.R[self.cam_idx]
        Xo = self.X[self.pt_idx]
        xc = np.einsum("oij,oj->oi", Ro, Xo) + self.t[self.cam_idx]
        x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
        fo = self.f[self.cam_idx]
        n = self.n_obs
        # d(pixel)/d(camera-frame point)
        d_uv = np.zeros((n, 2, 3))
        d_uv[:, 0, 0] = fo / z
        d_uv[:, 0, 2] = -fo * x / z ** 2
        d_uv[:, 1, 1] = fo / z
        d_uv[:, 1, 2] = -fo * y / z ** 2
        # rotation: left increment, d(xc)/dw = -[R X]x
        RX = xc - self.t[self.cam_idx]
        d_rot = np.zeros((n, 3, 3))
        d_rot[:, 0, 1] = RX[:, 2]
        d_rot[:, 0, 2] = -RX[:, 1]
        d_rot[:, 1, 0] = -RX[:, 2]
        d_rot[:, 1, 2] = RX[:, 0]
        d_rot[:, 2, 0] = RX[:, 1]
        d_rot[:, 2, 1] = -RX[:, 0]
        Jc = np.zeros((n, 2, CAM_PARAMS))
        Jc[:, :, 0:3] = d_uv @ d_rot
        Jc[:, :, 3:6] = d_uv
        Jc[:, 0, 6] = x / z
        Jc[:, 1, 6] = y / z
        Jp = d_uv @ Ro
        return Jc, Jp

    def dense_jacobian(self) -> np.ndarray:
        """Full (2 n_obs, 7 n_cam + 3 n_pts) Jacobian, for verification."""
        Jc, Jp = self.jacobian_blocks()
        J = np.zeros((2 * self.n_obs, CAM_PARAMS * self.n_cams + 3 * self.n_pts))
        for o in range(self.n_obs):
            c = self.cam_idx[o] * CAM_PARAMS
            p = CAM_PARAMS * self.n_cams + self.pt_idx[o] * 3
            J[2 * o:2 * o + 2, c:c + CAM_PARAMS] = Jc[o]
            J[2 * o:2 * o + 2, p:p + 3] = Jp[o]
        return J

    def pack(self) -> np.ndarray:
        """Parameter vector for finite differencing: zero rotation increments."""
        parts = []
        for c in range(self.n_cams):
            parts.append(np.zeros(3))
            parts.append(self.t[c])
            parts.append([self.f[c]])
        parts.append(self.X.reshape(-1))
        return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])

    def residuals_at(self, params: np.ndarray) -> np.ndarray:
        """Residual vector at a packed parameter vector (increments applied)."""
        nc = self.n_cams
        R = np.array([rodrigues(params[7 * c:7 * c + 3]) @ self.R[c] for c in range(nc)])
        t = np.stack([params[7 * c + 3:7 * c + 6] for c in range(nc)])
        f = np.array([params[7 * c + 6] for c in range(nc)])
        X = params[7 * nc:].reshape(-1, 3)
        return self.residuals(R=R, t=t, f=f, X=X).reshape(-1)


def problem_from_model(model: Model, feature_store) -> tuple[BAProblem, list[int], list[int]]:
    cam_ids = model.image_ids()
    pt_ids = model.point_ids()
    cam_pos = {c: i for i, c in enumerate(cam_ids)}
    pt_pos = {p: i for i, p in enumerate(pt_ids)}
    obs_cam, obs_pt, obs_uv = [], [], []
    for pid in pt_ids:
        for image_id in sorted(model.points[pid].track):
            obs_cam.append(cam_pos[image_id])
            obs_pt.append(pt_pos[pid])
            obs_uv.append(feature_store.position(image_id, model.points[pid].track[image_id]))
    problem = BAProblem(
        R=np.stack([model.cameras[c].R for c in cam_ids]),
        t=np.stack([model.cameras[c].t for c in cam_ids]),
        f=np.array([model.cameras[c].K[0, 0] for c in cam_ids]),
        pp=np.stack([model.cameras[c].K[:2, 2] for c in cam_ids]),
        X=np.stack([model.points[p].position for p in pt_ids]),
        cam_idx=np.array(obs_cam, dtype=np.int64),
        pt_idx=np.array(obs_pt, dtype=np.int64),
        uv=np.asarray(obs_uv, dtype=np.float64).reshape(-1, 2),
    )
    return problem, cam_ids, pt_ids


@dataclass
class BAStats:
    initial_cost: float
    final_cost: float
    iterations: int
    pruned_points: int = 0


_SCHUR_POINT_CHUNK = 64


def _lm_iterate(problem: BAProblem, max_iters: int, rel_tol: float) -> tuple[float, float, int]:
    nc, npnt = problem.n_cams, problem.n_pts
    nu = CAM_PARAMS
    res = problem.residuals()
    cost = float((res ** 2).sum())
    if not np.isfinite(cost):
        raise FloatingPointError("non-finite initial cost")
    initial_cost = cost
    lam = 1e-6
    diag3 = np.arange(3)
    diag7 = np.arange(nu)
    it = 0
    while it < max_iters:
        it += 1
        Jc, Jp = problem.jacobian_blocks()
        res = problem.residuals()
        g_cam = np.zeros((nc, nu))
        H_cc = np.zeros((nc, nu, nu))
        np.add.at(g_cam, problem.cam_idx, np.einsum("oki,ok->oi", Jc, res))
        np.add.at(H_cc, problem.cam_idx, np.einsum("oki,okj->oij", Jc, Jc))
        g_pt = np.zeros((npnt, 3))
        H_pp = np.zeros((npnt, 3, 3))
        np.add.at(g_pt, problem.pt_idx, np.einsum("oki,ok->oi", Jp, res))
        np.add.at(H_pp, problem.pt_idx, np.einsum("oki,okj->oij", Jp, Jp))
        B = np.einsum("oki,okj->oij", Jc, Jp)  # (n_obs, 7, 3) cam-point coupling
        # per-point stacked coupling: U[p] is the (nc*7, 3) column of W for point p
        U = np.zeros((npnt, nc, nu, 3))
        U[problem.pt_idx, problem.cam_idx] = B
        U = U.reshape(npnt, nc * nu, 3)

        accepted = False
        for _ in range(12):
            H_pp_d = H_pp.copy()
            H_pp_d[:, diag3, diag3] += lam * np.maximum(H_pp[:, diag3, diag3], 1e-12)
            try:
                M = np.linalg.inv(H_pp_d)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue

            # reduced camera system: damped block diagonal minus W M W^T
            S = np.zeros((nc * nu, nc * nu))
            for lo in range(0, npnt, _SCHUR_POINT_CHUNK):
                Uc = U[lo:lo + _SCHUR_POINT_CHUNK]
                UM = Uc @ M[lo:lo + _SCHUR_POINT_CHUNK]
                S -= np.einsum("pij,pkj->ik", UM, Uc, optimize=True)
            H_cc_d = H_cc.copy()
            H_cc_d[:, diag7, diag7] += lam * np.maximum(H_cc[:, diag7, diag7], 1e-12)
            # pin the 7-dim similarity gauge: first camera's pose plus the
            # scale direction (second camera's translation radius); pure
            # stiffness toward the current values, so no bias is introduced
            kappa = 1e8 * max(float(np.abs(H_cc).max()), 1.0)
            H_cc_d[0, :6, :6] += kappa * np.eye(6)
            if nc > 1:
                t1 = problem.t[1]
                norm1 = np.linalg.norm(t1)
                if norm1 > 1e-9:
                    that = t1 / norm1
                    H_cc_d[1, 3:6, 3:6] += kappa * np.outer(that, that)
            for c in range(nc):
                S[c * nu:(c + 1) * nu, c * nu:(c + 1) * nu] += H_cc_d[c]

            WM = np.einsum("oab,obc->oac", B, M[problem.pt_idx])
            rhs = -g_cam.copy()
            np.add.at(rhs, problem.cam_idx,
                      np.einsum("oab,ob->oa", WM, g_pt[problem.pt_idx]))
            try:
                chol = cho_factor(S, lower=True, check_finite=False)
                delta_cam = cho_solve(chol, rhs.reshape(-1), check_finite=False).reshape(nc, nu)
            except (np.linalg.LinAlgError, ValueError):
                lam *= 10.0
                continue

            # back-substitute the point updates
            contrib = np.einsum("oab,oa->ob", B, delta_cam[problem.cam_idx])
            acc = np.zeros((npnt, 3))
            np.add.at(acc, problem.pt_idx, contrib)
            delta_pt = np.einsum("pij,pj->pi", M, -g_pt - acc)

            R_new = np.stack([rodrigues(delta_cam[c, 0:3]) @ problem.R[c] for c in range(nc)])
            t_new = problem.t + delta_cam[:, 3:6]
            f_new = problem.f + delta_cam[:, 6]
            X_new = problem.X + delta_pt
            res_new = problem.residuals(R=R_new, t=t_new, f=f_new, X=X_new)
            cost_new = float((res_new ** 2).sum())
            if np.isfinite(cost_new) and cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-30)
                problem.R, problem.t, problem.f, problem.X = R_new, t_new, f_new, X_new
                cost = cost_new
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if rel < rel_tol:
                    return initial_cost, cost, it
                break
            lam *= 10.0
        if not accepted:
            break
    return initial_cost, cost, it


def refine_points_only(problem: BAProblem, sweeps: int = 2) -> float:
    """Gauss-Newton sweeps on point positions with cameras held fixed.

    Each point's 3x3 system is independent and well conditioned, which mops
    up the numerical floor the coupled solve leaves behind.  Steps are
    accepted per point only when they reduce that point's cost; returns the
    final total cost.
    """
    npnt = problem.n_pts
    for _ in range(sweeps):
        res = problem.residuals()
        _, Jp = problem.jacobian_blocks()
        H = np.zeros((npnt, 3, 3))
        g = np.zeros((npnt, 3))
        np.add.at(H, problem.pt_idx, np.einsum("oki,okj->oij", Jp, Jp))
        np.add.at(g, problem.pt_idx, np.einsum("oki,ok->oi", Jp, res))
        H[:, np.arange(3), np.arange(3)] += 1e-12
        try:
            delta = np.linalg.solve(H, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        cost_pt = np.bincount(problem.pt_idx, weights=(res ** 2).sum(axis=1),
                              minlength=npnt)
        X_new = problem.X + delta
        res_new = problem.residuals(X=X_new)
        cost_pt_new = np.bincount(problem.pt_idx, weights=(res_new ** 2).sum(axis=1),
                                  minlength=npnt)
        improved = np.isfinite(cost_pt_new) & (cost_pt_new < cost_pt)
        problem.X[improved] = X_new[improved]
    return float((problem.residuals() ** 2).sum())


def bundle_adjust(model: Model, feature_store, *,
                  max_iters: int = BA_MAX_ITERS,
                  rel_tol: float = BA_REL_TOL) -> BAStats:
    """Optimize all cameras (pose + focal) and points in place.

    Points producing non-finite residuals (behind a camera) are pruned once
    and the optimization retried; a second failure raises.
    """
    pruned = 0
    for attempt in range(2):
        problem, cam_ids, pt_ids = problem_from_model(model, feature_store)
        if problem.n_obs == 0:
            return BAStats(0.0, 0.0, 0)
        res = problem.residuals()
        bad = ~np.isfinite(res).all(axis=1)
        xc = np.einsum("oij,oj->oi", problem.R[problem.cam_idx],
                       problem.X[problem.pt_idx]) + problem.t[problem.cam_idx]
        bad |= xc[:, 2] <= 1e-9
        if bad.any():
            if attempt == 1:
                raise MsfmError("bundle adjustment still degenerate after pruning")
            for p in np.unique(problem.pt_idx[bad]):
                model.remove_point(pt_ids[p])
                pruned += 1
            continue
        initial, final, iters = _lm_iterate(problem, max_iters, rel_tol)
        final = min(final, refine_points_only(problem))
        for i, image_id in enumerate(cam_ids):
            old = model.cameras[image_id]
            U, _, Vt = np.linalg.svd(problem.R[i])
            R = U @ Vt
            if np.linalg.det(R) < 0:
                R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
            model.cameras[image_id] = Camera(
                K=make_intrinsics(float(problem.f[i]), old.K[0, 2], old.K[1, 2]),
                R=R, t=problem.t[i], image_id=image_id,
            )
        for j, pid in enumerate(pt_ids):
            model.set_position(pid, problem.X[j])
        return BAStats(initial_cost=initial, final_cost=final,
                       iterations=iters, pruned_points=pruned)
    raise MsfmError("unreachable")
