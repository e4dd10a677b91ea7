"""Least-squares rigid fit of a reference point set onto predicted points.

The rotation comes from the SVD of the cross-covariance with a determinant
correction.  Its reverse-mode derivative is written out explicitly so that
gradients stay finite when singular values are repeated.
"""
from __future__ import annotations

import numpy as np
import torch

from rigidgraph.errors import InvalidInputError

DENOM_EPS = 1e-8


def _proper_svd(A: torch.Tensor):
    U, S, Vh = torch.linalg.svd(A)
    d = torch.sign(torch.det(U @ Vh))
    if d == 0:
        d = torch.ones((), dtype=A.dtype)
    D = torch.ones(3, dtype=A.dtype)
    D[2] = d
    return U * D, S * D, Vh


class ProperRotation(torch.autograd.Function):
    """R = U·diag(1, 1, det(UVᵀ))·Vᵀ from A = U·S·Vᵀ, the rotation maximizing tr(RᵀA)."""

    @staticmethod
    def forward(ctx, A):
        U, S, Vh = _proper_svd(A)
        R = U @ Vh
        ctx.save_for_backward(U, S, Vh)
        return R

    @staticmethod
    def backward(ctx, grad_R):
        U, S, Vh = ctx.saved_tensors
        X = U.T @ grad_R @ Vh.T
        denom = S[:, None] + S[None, :]
        inv = torch.where(denom.abs() > DENOM_EPS, 1.0 / torch.where(denom.abs() > DENOM_EPS, denom, 1.0), 0.0)
        K = (X - X.T) * inv
        K.fill_diagonal_(0.0)
        return U @ K @ Vh


def shape_match(pred, ref):
    """Rigid transform (R, t) minimizing Σ‖pred_i − (R·ref_i + t)‖² and the projected points.

    Works on numpy arrays or torch tensors (differentiable in ``pred``); returns
    the same kind.
    """
    is_np = isinstance(pred, np.ndarray)
    P = pred.to(torch.float64) if torch.is_tensor(pred) else torch.tensor(np.asarray(pred), dtype=torch.float64)
    Q = ref.to(torch.float64) if torch.is_tensor(ref) else torch.tensor(np.array(ref, dtype=np.float64))
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise InvalidInputError("pred and ref must both have shape (n, 3)")
    if P.shape[0] < 3:
        raise InvalidInputError("shape matching needs at least 3 points")
    c = P.mean(dim=0)
    c0 = Q.mean(dim=0)
    A = (P - c).T @ (Q - c0)
    s = torch.linalg.svdvals(A.detach())
    if not torch.isfinite(s).all():
        raise InvalidInputError("non-finite points in shape matching")
    if s[1] <= 1e-12 * max(float(s[0]), 1e-300):
        raise InvalidInputError("degenerate point set: cross-covariance has rank < 2")
    R = ProperRotation.apply(A)
    t = c - R @ c0
    proj = Q @ R.T + t
    if is_np:
        return R.detach().numpy(), t.detach().numpy(), proj.detach().numpy()
    return R, t, proj


def rotmat_to_quat_t(R: torch.Tensor) -> torch.Tensor:
    """Differentiable rotation matrix to unit quaternion (w, x, y, z); branch picked on values."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = torch.stack([R[0, 0], R[1, 1], R[2, 2]]).detach()
    if tr.detach() >= diag.max():
        s = torch.sqrt(1.0 + tr) * 2.0
        q = torch.stack([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(torch.argmax(diag))
        if i == 0:
            s = torch.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = torch.stack([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = torch.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = torch.stack([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = torch.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = torch.stack([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0].detach() < 0:
        q = -q
    return q / torch.linalg.norm(q)


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q[0], q[1], q[2], q[3]
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
        ]
    )


def rotvec_to_rotmat_t(rv: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, smooth at zero via a Taylor branch."""
    theta2 = rv @ rv
    K = torch.zeros(3, 3, dtype=rv.dtype)
    K = torch.stack(
        [
            torch.stack([torch.zeros((), dtype=rv.dtype), -rv[2], rv[1]]),
            torch.stack([rv[2], torch.zeros((), dtype=rv.dtype), -rv[0]]),
            torch.stack([-rv[1], rv[0], torch.zeros((), dtype=rv.dtype)]),
        ]
    )
    if theta2.detach() < 1e-12:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = torch.sqrt(theta2)
        a = torch.sin(theta) / theta
        b = (1.0 - torch.cos(theta)) / theta2
    return torch.eye(3, dtype=rv.dtype) + a * K + b * (K @ K)
