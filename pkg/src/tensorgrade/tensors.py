"""Jacobian fields, deformation tensors and log-Euclidean voxel metrics.

Symmetric 3x3 tensors are stored as 6 channels per voxel in the order
``(a11, a22, a33, a12, a13, a23)``. Jacobians use 9 channels, row-major.

A displacement volume ``u`` maps grid point ``x`` to ``x - u(x)``; the local
Jacobian is therefore ``J = I - grad(u)``, with derivatives taken in
physical units (mm). The deformation tensor ``sqrt(J^T J)`` and its matrix
log both derive from one eigendecomposition of ``J^T J``, since
``log sqrt(M) = 0.5 log M``.

The per-voxel eigensolver is a closed-form characteristic-polynomial method
with a cyclic-Jacobi fallback for nearly degenerate spectra. The Jacobi
sweep count is fixed and every rotation is masked per matrix, so results
for a voxel never depend on which other voxels share its batch.
"""

from __future__ import annotations

import numpy as np

from .volume import Volume, VolumeError

SYM_COMPONENTS = ("a11", "a22", "a33", "a12", "a13", "a23")

EIG_FLOOR = 1e-6
DEGENERATE_GAP = 1e-6
_JACOBI_SWEEPS = 12

_ROWS6 = np.array([0, 1, 2, 0, 0, 1])
_COLS6 = np.array([0, 1, 2, 1, 2, 2])


def sym6_to_mat(v6: np.ndarray) -> np.ndarray:
    """Expand ``(..., 6)`` symmetric components to ``(..., 3, 3)`` matrices."""
    v6 = np.asarray(v6, dtype=np.float64)
    out = np.empty(v6.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., _ROWS6, _COLS6] = v6
    out[..., _COLS6, _ROWS6] = v6
    return out


def mat_to_sym6(m: np.ndarray, *, check: bool = False, tol: float = 1e-12) -> np.ndarray:
    """Collapse ``(..., 3, 3)`` symmetric matrices to 6 components."""
    m = np.asarray(m, dtype=np.float64)
    if check and np.abs(m - np.swapaxes(m, -1, -2)).max(initial=0.0) > tol:
        raise VolumeError("matrix is not symmetric within tolerance")
    return m[..., _ROWS6, _COLS6].copy()


def _frob6(d: np.ndarray) -> np.ndarray:
    # Frobenius norm of a symmetric matrix from its 6 components; the
    # expression shape is fixed so scalar and field paths round identically.
    return np.sqrt(
        d[..., 0] * d[..., 0]
        + d[..., 1] * d[..., 1]
        + d[..., 2] * d[..., 2]
        + 2.0 * (d[..., 3] * d[..., 3] + d[..., 4] * d[..., 4] + d[..., 5] * d[..., 5])
    )


def _eigvals_trig(s6: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenvalues of ``(n, 6)`` symmetric matrices, descending.

    Returns ``(w, iso)`` where ``iso`` flags exact multiples of the identity
    (handled without trigonometry).
    """
    a11, a22, a33, a12, a13, a23 = (s6[:, k] for k in range(6))
    q = (a11 + a22 + a33) / 3.0
    p1 = a12 * a12 + a13 * a13 + a23 * a23
    d1, d2, d3 = a11 - q, a22 - q, a33 - q
    p2 = d1 * d1 + d2 * d2 + d3 * d3 + 2.0 * p1
    iso = p2 == 0.0
    p = np.sqrt(np.where(iso, 1.0, p2) / 6.0)
    b11, b22, b33 = d1 / p, d2 / p, d3 / p
    b12, b13, b23 = a12 / p, a13 / p, a23 / p
    det_b = (
        b11 * (b22 * b33 - b23 * b23)
        - b12 * (b12 * b33 - b23 * b13)
        + b13 * (b12 * b23 - b22 * b13)
    )
    r = np.clip(det_b / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    w1 = q + 2.0 * p * np.cos(phi)
    w3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    w2 = 3.0 * q - w1 - w3
    w = np.stack([w1, w2, w3], axis=1)
    w[iso] = q[iso, np.newaxis]
    # Guard against ulp-level ordering violations near degeneracies.
    w = -np.sort(-w, axis=1)
    return w, iso


def _jacobi_rotation(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    """One masked Jacobi rotation zeroing ``a[:, p, q]`` in place."""
    apq = a[:, p, q]
    active = apq != 0.0
    with np.errstate(over="ignore"):
        theta = np.where(
            active, (a[:, q, q] - a[:, p, p]) / np.where(active, 2.0 * apq, 1.0), 0.0
        )
    # hypot avoids overflow for huge tangent ratios (t then underflows to 0).
    t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
    t = np.where(theta == 0.0, 1.0, t)
    t = np.where(active, t, 0.0)
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    tau = s / (1.0 + c)
    r = 3 - p - q
    app, aqq = a[:, p, p].copy(), a[:, q, q].copy()
    arp, arq = a[:, r, p].copy(), a[:, r, q].copy()
    a[:, p, p] = app - t * apq
    a[:, q, q] = aqq + t * apq
    a[:, p, q] = 0.0
    a[:, q, p] = 0.0
    new_rp = arp - s * (arq + tau * arp)
    new_rq = arq + s * (arp - tau * arq)
    a[:, r, p] = a[:, p, r] = new_rp
    a[:, r, q] = a[:, q, r] = new_rq
    vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
    v[:, :, p] = vp - s[:, None] * (vq + tau[:, None] * vp)
    v[:, :, q] = vq + s[:, None] * (vp - tau[:, None] * vq)


def _jacobi_sym3(s33: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi on a ``(m, 3, 3)`` symmetric batch; descending order."""
    a = s33.copy()
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    for _ in range(_JACOBI_SWEEPS):
        for p, q in ((0, 1), (0, 2), (1, 2)):
            _jacobi_rotation(a, v, p, q)
    w = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w, v


def _canonical_signs(v: np.ndarray) -> np.ndarray:
    """Flip eigenvector columns so the largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(v), axis=1)
    lead = np.take_along_axis(v, idx[:, None, :], axis=1)[:, 0, :]
    return np.where(lead[:, None, :] < 0.0, -v, v)


def sym_eigen_field(s6: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a batch of symmetric 3x3 matrices.

    Parameters
    ----------
    s6 : ndarray, shape (n, 6)
        Symmetric components in :data:`SYM_COMPONENTS` order.

    Returns
    -------
    w : ndarray, shape (n, 3)
        Eigenvalues, descending.
    v : ndarray, shape (n, 3, 3)
        Orthonormal eigenvectors as columns, matching ``w``.
    """
    s6 = np.asarray(s6, dtype=np.float64)
    n = s6.shape[0]
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    # Exactly diagonal matrices (common: identity tensors, axis-aligned
    # scalings) sort their diagonal directly; values and vectors are exact.
    diagonal = (s6[:, 3] == 0.0) & (s6[:, 4] == 0.0) & (s6[:, 5] == 0.0)
    w = np.empty((n, 3), dtype=np.float64)
    if diagonal.any():
        idx = np.nonzero(diagonal)[0]
        order = np.argsort(-s6[idx, :3], axis=1, kind="stable")
        w[idx] = np.take_along_axis(s6[idx, :3], order, axis=1)
        v[idx] = 0.0
        v[idx[:, None], order, np.arange(3)[None, :]] = 1.0
    general = ~diagonal
    if general.any():
        gen = np.nonzero(general)[0]
        w[gen], _ = _eigvals_trig(s6[gen])
    scale = np.maximum(np.maximum(np.abs(w[:, 0]), np.abs(w[:, 2])), 1e-30)
    gap = np.minimum(w[:, 0] - w[:, 1], w[:, 1] - w[:, 2])
    degenerate = general & (gap < DEGENERATE_GAP * scale)
    analytic = general & ~degenerate

    if analytic.any():
        idx = np.nonzero(analytic)[0]
        s33 = sym6_to_mat(s6[idx])
        wa = w[idx]
        eye = np.eye(3)
        m_hi = (s33 - wa[:, 1, None, None] * eye) @ (s33 - wa[:, 2, None, None] * eye)
        m_lo = (s33 - wa[:, 0, None, None] * eye) @ (s33 - wa[:, 1, None, None] * eye)
        v1 = _best_column(m_hi)
        v3 = _best_column(m_lo)
        v3 = v3 - np.sum(v3 * v1, axis=1, keepdims=True) * v1
        norm3 = np.linalg.norm(v3, axis=1)
        ok = norm3 > 0.1  # near-collinear vectors mean the gap test missed; re-route
        v3 = v3 / np.where(ok, norm3, 1.0)[:, None]
        v2 = np.cross(v3, v1)
        va = np.stack([v1, v2, v3], axis=2)
        v[idx[ok]] = va[ok]
        if not ok.all():
            degenerate[idx[~ok]] = True

    if degenerate.any():
        idx = np.nonzero(degenerate)[0]
        wd, vd = _jacobi_sym3(sym6_to_mat(s6[idx]))
        w[idx] = wd
        v[idx] = vd

    return w, _canonical_signs(v)


def _best_column(m: np.ndarray) -> np.ndarray:
    """Largest-norm column of each matrix, normalized."""
    norms = np.linalg.norm(m, axis=1)
    j = np.argmax(norms, axis=1)
    cols = np.take_along_axis(m, j[:, None, None], axis=2)[:, :, 0]
    lead = np.take_along_axis(norms, j[:, None], axis=1)[:, 0]
    return cols / np.maximum(lead, 1e-300)[:, None]


def sym_eigen(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose one symmetric 3x3 matrix.

    Input must be symmetric within 1e-12 (absolute). Returns descending
    eigenvalues and orthonormal eigenvector columns.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (3, 3):
        raise VolumeError(f"expected a 3x3 matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise VolumeError("matrix holds non-finite values")
    if np.abs(s - s.T).max() > 1e-12:
        raise VolumeError("matrix is not symmetric within 1e-12")
    w, v = sym_eigen_field(mat_to_sym6(s)[np.newaxis])
    return w[0], v[0]


def _reconstruct_sym6(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Assemble 6-component ``V diag(w) V^T`` from a (n,3)/(n,3,3) pair."""
    out = np.empty((w.shape[0], 6), dtype=np.float64)
    for k, (i, j) in enumerate(zip(_ROWS6, _COLS6)):
        out[:, k] = (
            w[:, 0] * v[:, i, 0] * v[:, j, 0]
            + w[:, 1] * v[:, i, 1] * v[:, j, 1]
            + w[:, 2] * v[:, i, 2] * v[:, j, 2]
        )
    return out


def _spectral_map(s6, fn, *, floor=None):
    """Apply ``fn`` to eigenvalues; returns mapped field and clamp count."""
    w, v = sym_eigen_field(s6)
    clamped = 0
    if floor is not None:
        below = w < floor
        clamped = int(np.count_nonzero(below.any(axis=1)))
        if clamped:
            w = np.maximum(w, floor)
    return _reconstruct_sym6(fn(w), v), clamped


def jacobian_field(disp: Volume) -> Volume:
    """Per-voxel Jacobian ``J = I - grad(u)`` of a displacement volume.

    Derivatives are central differences divided by ``2 * spacing`` at
    interior voxels and one-sided differences at boundary voxels, in mm.
    Output has 9 channels, row-major: entry ``(r, c)`` at channel ``3r + c``.
    """
    if disp.channels != 3:
        raise VolumeError(f"displacement volume needs 3 channels, got {disp.channels}")
    nx, ny, nz = disp.dims
    if min(nx, ny, nz) < 2:
        raise VolumeError(f"dims must be >= 2 on every axis, got {disp.dims}")
    sx, sy, sz = disp.spacing
    axis_spacing = ((2, sx), (1, sy), (0, sz))
    out = np.empty(disp.data.shape[:3] + (9,), dtype=np.float64)
    for r in range(3):
        u_r = disp.data[..., r]
        for c, (axis, h) in enumerate(axis_spacing):
            grad = np.gradient(u_r, h, axis=axis)
            out[..., 3 * r + c] = (1.0 if r == c else 0.0) - grad
    return Volume(out, disp.spacing)


def deformation_tensor(j: np.ndarray) -> np.ndarray:
    """Unique SPD square root of ``J^T J`` for one 3x3 Jacobian.

    Eigenvalues of ``J^T J`` are clamped to :data:`EIG_FLOOR` before the
    square root, so degenerate Jacobians yield bounded output instead of
    an error.
    """
    j = np.asarray(j, dtype=np.float64)
    if j.shape != (3, 3):
        raise VolumeError(f"expected a 3x3 matrix, got shape {j.shape}")
    if not np.isfinite(j).all():
        raise VolumeError("Jacobian holds non-finite values")
    s6 = mat_to_sym6(j.T @ j)[np.newaxis]
    phi6, _ = _spectral_map(s6, np.sqrt, floor=EIG_FLOOR)
    return sym6_to_mat(phi6[0])


def tensor_log(phi: np.ndarray) -> np.ndarray:
    """Matrix logarithm of one SPD 3x3 tensor via eigendecomposition."""
    w, v = sym_eigen(phi)
    if w[2] < EIG_FLOOR:
        raise VolumeError(
            f"eigenvalue {w[2]:.3e} below floor {EIG_FLOOR:.0e}; "
            "input is not an admissible deformation tensor"
        )
    log6 = _reconstruct_sym6(np.log(w)[np.newaxis], v[np.newaxis])
    return sym6_to_mat(log6[0])


def tensor_exp(lg: np.ndarray) -> np.ndarray:
    """Matrix exponential of one symmetric 3x3 tensor."""
    w, v = sym_eigen(lg)
    exp6 = _reconstruct_sym6(np.exp(w)[np.newaxis], v[np.newaxis])
    return sym6_to_mat(exp6[0])


def log_distance_voxel(l1: np.ndarray, l2: np.ndarray) -> float:
    """Log-Euclidean distance between two log-tensors: ``||L1 - L2||_F``.

    Equals ``sqrt(Trace((L1 - L2)^2))`` for symmetric arguments.
    """
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    for name, m in (("L1", l1), ("L2", l2)):
        if m.shape != (3, 3):
            raise VolumeError(f"{name} must be 3x3, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise VolumeError(f"{name} holds non-finite values")
        if np.abs(m - m.T).max() > 1e-12:
            raise VolumeError(f"{name} is not symmetric within 1e-12")
    return float(_frob6(mat_to_sym6(l1) - mat_to_sym6(l2)))


def _require_channels(vol: Volume, channels: int, what: str) -> None:
    if vol.channels != channels:
        raise VolumeError(f"{what} needs {channels} channels, got {vol.channels}")


def deformation_tensor_field(jac: Volume) -> tuple[Volume, int]:
    """Deformation tensors for a 9-channel Jacobian volume.

    Returns the 6-channel tensor volume and the number of voxels whose
    ``J^T J`` eigenvalues were clamped at :data:`EIG_FLOOR`.
    """
    _require_channels(jac, 9, "Jacobian volume")
    j = jac.data.reshape(-1, 3, 3)
    s6 = mat_to_sym6(np.swapaxes(j, 1, 2) @ j)
    phi6, clamps = _spectral_map(s6, np.sqrt, floor=EIG_FLOOR)
    return Volume(phi6.reshape(jac.data.shape[:3] + (6,)), jac.spacing), clamps


def log_tensor_field(phi: Volume) -> Volume:
    """Matrix log of a 6-channel SPD tensor volume."""
    _require_channels(phi, 6, "tensor volume")
    s6 = phi.data.reshape(-1, 6)
    w, v = sym_eigen_field(s6)
    if (w[:, 2] < EIG_FLOOR).any():
        bad = int(np.count_nonzero(w[:, 2] < EIG_FLOOR))
        raise VolumeError(
            f"{bad} voxels have eigenvalues below the {EIG_FLOOR:.0e} floor; "
            "inputs must be clamped deformation tensors"
        )
    log6 = _reconstruct_sym6(np.log(w), v)
    return Volume(log6.reshape(phi.data.shape[:3] + (6,)), phi.spacing)


def tensor_exp_field(lg: Volume) -> Volume:
    """Matrix exp of a 6-channel symmetric tensor volume."""
    _require_channels(lg, 6, "log-tensor volume")
    s6 = lg.data.reshape(-1, 6)
    w, v = sym_eigen_field(s6)
    exp6 = _reconstruct_sym6(np.exp(w), v)
    return Volume(exp6.reshape(lg.data.shape[:3] + (6,)), lg.spacing)


def displacement_to_log_tensor(disp: Volume) -> tuple[Volume, int]:
    """Fused displacement -> ``log sqrt(J^T J)`` pipeline for one volume.

    Uses the identity ``log sqrt(M) = 0.5 log M`` so only one
    eigendecomposition per voxel is needed. Returns the 6-channel
    log-tensor volume and the clamped-voxel count.
    """
    jac = jacobian_field(disp)
    j = jac.data.reshape(-1, 3, 3)
    s6 = mat_to_sym6(np.swapaxes(j, 1, 2) @ j)
    log6, clamps = _spectral_map(s6, lambda w: 0.5 * np.log(w), floor=EIG_FLOOR)
    return Volume(log6.reshape(disp.data.shape[:3] + (6,)), disp.spacing), clamps


def log_distance_field(l1: Volume, l2: Volume) -> np.ndarray:
    """Per-voxel log-Euclidean distances between two log-tensor volumes."""
    _require_channels(l1, 6, "log-tensor volume")
    _require_channels(l2, 6, "log-tensor volume")
    if l1.dims != l2.dims:
        raise VolumeError(f"dims differ: {l1.dims} vs {l2.dims}")
    return _frob6(l1.data - l2.data)


def det_from_log(lg: Volume) -> np.ndarray:
    """Per-voxel determinant of ``exp(L)`` from the log-tensor trace."""
    _require_channels(lg, 6, "log-tensor volume")
    d = lg.data
    return np.exp(d[..., 0] + d[..., 1] + d[..., 2])
