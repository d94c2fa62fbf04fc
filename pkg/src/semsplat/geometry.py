"""Scene representation, camera model, and 3D->2D Gaussian projection.

Everything here is pure math over numpy arrays: the splatting kernels in
``rasterizer`` consume the projected quantities produced by this module.
Parameters are stored as float32; all computation is done in float64 so the
finite-difference gradient checks have headroom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Near plane and frustum guard band (multiples of the image rectangle).
NEAR_PLANE = 0.2
GUARD_BAND = 1.3
# Anti-aliasing dilation added to the projected covariance diagonal (px^2).
COV2D_BLUR = 0.3

# Real spherical harmonics constants, degree 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


class DegenerateRotationError(ValueError):
    """Raised when a quaternion with (near-)zero norm is used as a rotation."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


@dataclass
class GaussianSet:
    """Parallel parameter arrays for N Gaussians.

    Raw (pre-activation) parameters; the optimizer only ever sees these.
    Activations: opacity = sigmoid(opacity_logits), scale = exp(log_scales).
    ``sh_coeffs`` has shape (N, K, 3) with K = (degree+1)^2 basis functions,
    ``features`` has shape (N, D).
    """

    positions: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float32)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float32)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float32)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.validate_shapes()

    def validate_shapes(self):
        n = len(self.positions)
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N,3), got {self.positions.shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ValueError(f"sh_coeffs must be (N,K,3), got {self.sh_coeffs.shape}")
        k = self.sh_coeffs.shape[1]
        if k not in (1, 4, 9, 16):
            raise ValueError(f"sh_coeffs K={k} is not (deg+1)^2 for degree 0..3")
        if self.opacity_logits.shape != (n,):
            raise ValueError(f"opacity_logits must be (N,), got {self.opacity_logits.shape}")
        if self.log_scales.shape != (n, 3):
            raise ValueError(f"log_scales must be (N,3), got {self.log_scales.shape}")
        if self.rotations.shape != (n, 4):
            raise ValueError(f"rotations must be (N,4), got {self.rotations.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must be (N,D), got {self.features.shape}")

    def __len__(self):
        return len(self.positions)

    @property
    def num_gaussians(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def normalize_rotations(self):
        """Renormalize quaternions in place (called after every optimizer step)."""
        q = self.rotations.astype(np.float64)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DegenerateRotationError("quaternion collapsed to zero norm")
        self.rotations = (q / norms).astype(np.float32)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(), self.sh_coeffs.copy(), self.opacity_logits.copy(),
            self.log_scales.copy(), self.rotations.copy(), self.features.copy(),
        )

    def select(self, idx) -> "GaussianSet":
        return GaussianSet(
            self.positions[idx], self.sh_coeffs[idx], self.opacity_logits[idx],
            self.log_scales[idx], self.rotations[idx], self.features[idx],
        )

    @staticmethod
    def concatenate(parts: list["GaussianSet"]) -> "GaussianSet":
        return GaussianSet(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.sh_coeffs for p in parts]),
            np.concatenate([p.opacity_logits for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.features for p in parts]),
        )

    @staticmethod
    def empty(sh_degree: int = 3, feature_dim: int = 32) -> "GaussianSet":
        k = (sh_degree + 1) ** 2
        return GaussianSet(
            np.zeros((0, 3)), np.zeros((0, k, 3)), np.zeros((0,)),
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, feature_dim)),
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: +x right, +y down, +z forward in camera space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # 4x4

    def __post_init__(self):
        w2c = np.ascontiguousarray(self.world_to_camera, dtype=np.float64)
        object.__setattr__(self, "world_to_camera", w2c)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        r = w2c[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-5:
            raise ValueError("rotation block of world_to_camera is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def replace_size(self, width: int, height: int) -> "Camera":
        """Same pose, rescaled intrinsics for a new image size."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      width, height, self.world_to_camera.copy())


def look_at_w2c(position, target, up) -> np.ndarray:
    """World-to-camera transform facing `target` from `position`.

    `up` is the world direction that maps to image-up (camera -y; camera y
    points down).
    """
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    down = -up + np.dot(up, fwd) * fwd
    nd = np.linalg.norm(down)
    if nd < 1e-9:
        raise ValueError("view direction parallel to up vector")
    down /= nd
    right = np.cross(down, fwd)
    w2c = np.eye(4)
    w2c[0, :3] = right
    w2c[1, :3] = down
    w2c[2, :3] = fwd
    w2c[:3, 3] = -w2c[:3, :3] @ position
    return w2c


@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray  # 2x2 symmetric
    depth: float
    in_frustum: bool


def quat_to_rotmat(quat: np.ndarray) -> np.ndarray:
    """Rotation matrices from (possibly unnormalized) quaternions, (N,4) wxyz."""
    q = np.asarray(quat, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateRotationError("zero-norm quaternion")
    q = q / norms[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """wxyz quaternion from a rotation matrix (Shepperd's method)."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        return np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                         (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    i = int(np.argmax(np.diag(r)))
    if i == 0:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        return np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                         (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    if i == 1:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        return np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                         0.25 * s, (r[1, 2] + r[2, 1]) / s])
    s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
    return np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                     (r[1, 2] + r[2, 1]) / s, 0.25 * s])


def build_covariance3d(log_scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2*log_scale)) R^T. Accepts single or batched inputs."""
    ls = np.asarray(log_scale, dtype=np.float64)
    single = ls.ndim == 1
    ls = np.atleast_2d(ls)
    rot = quat_to_rotmat(quat)
    rot = rot[None] if rot.ndim == 2 else rot
    s = np.exp(ls)
    m = rot * s[:, None, :]  # R @ diag(s)
    cov = m @ np.swapaxes(m, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return cov[0] if single else cov


def projection_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of pinhole projection at camera-space points t, (N,2,3)."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    j = np.zeros((len(t), 2, 3))
    j[:, 0, 0] = fx / tz
    j[:, 0, 2] = -fx * tx / tz**2
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -fy * ty / tz**2
    return j


def project_gaussians(cam: Camera, positions: np.ndarray, cov3d: np.ndarray):
    """Project a batch of 3D Gaussians into the image plane.

    Returns (mean2d (N,2), cov2d packed (N,3) as [a,b,c] of [[a,b],[b,c]],
    depth (N,), in_frustum (N,) bool). cov2d includes the blur-floor dilation.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    cov3d = np.asarray(cov3d, dtype=np.float64)
    if cov3d.ndim == 2:
        cov3d = cov3d[None]
    r, tr = cam.rotation, cam.translation
    t = positions @ r.T + tr
    depth = t[:, 2]
    # Clamp depth for the math; out-of-frustum entries are flagged, not used.
    safe_z = np.where(depth > 1e-8, depth, 1e-8)
    ts = t.copy()
    ts[:, 2] = safe_z
    mean2d = np.stack([
        cam.fx * ts[:, 0] / safe_z + cam.cx,
        cam.fy * ts[:, 1] / safe_z + cam.cy,
    ], axis=1)
    j = projection_jacobian(ts, cam.fx, cam.fy)
    u = j @ r  # (N,2,3)
    c2 = u @ cov3d @ np.swapaxes(u, 1, 2)
    a = c2[:, 0, 0] + COV2D_BLUR
    b = 0.5 * (c2[:, 0, 1] + c2[:, 1, 0])
    c = c2[:, 1, 1] + COV2D_BLUR
    cov2d = np.stack([a, b, c], axis=1)
    # Guard band: mean within the image rectangle scaled by GUARD_BAND about its center.
    half_w, half_h = cam.width / 2, cam.height / 2
    in_frustum = (
        (depth > NEAR_PLANE)
        & (np.abs(mean2d[:, 0] - half_w) <= GUARD_BAND * half_w)
        & (np.abs(mean2d[:, 1] - half_h) <= GUARD_BAND * half_h)
    )
    return mean2d, cov2d, depth, in_frustum


def project_gaussian(cam: Camera, position: np.ndarray, cov3d: np.ndarray) -> Projected2D:
    """Single-Gaussian wrapper around project_gaussians."""
    mean2d, cov2d, depth, ok = project_gaussians(cam, position, cov3d)
    a, b, c = cov2d[0]
    return Projected2D(mean2d[0], np.array([[a, b], [b, c]]), float(depth[0]), bool(ok[0]))


def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (N, (degree+1)^2)."""
    d = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = len(d)
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def eval_sh(sh_coeffs: np.ndarray, view_dir: np.ndarray):
    """Evaluate SH color: clamp(sum_k basis_k * coeff_k + 0.5, min=0).

    sh_coeffs: (K,3) or (N,K,3); view_dir: (3,) or (N,3) unit vectors.
    Returns (color, clamped_mask) with color shaped like the batch.
    """
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    coeffs = coeffs[None] if single else coeffs
    k = coeffs.shape[1]
    degree = int(round(np.sqrt(k))) - 1
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("nk,nkc->nc", basis, coeffs) + 0.5
    clamped = raw < 0
    color = np.where(clamped, 0.0, raw)
    if single:
        return color[0], clamped[0]
    return color, clamped


def sh_basis_grad(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """d basis_k / d dir as (N, K, 3) for unit directions (pre-normalization chain)."""
    d = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = len(d)
    k = (degree + 1) ** 2
    g = np.zeros((n, k, 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        g[:, 9, 0] = SH_C3[0] * (6 * x * y)
        g[:, 9, 1] = SH_C3[0] * (3 * x * x - 3 * y * y)
        g[:, 10, 0] = SH_C3[1] * (y * z)
        g[:, 10, 1] = SH_C3[1] * (x * z)
        g[:, 10, 2] = SH_C3[1] * (x * y)
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * z * z - x * x - 3 * y * y)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
        g[:, 13, 0] = SH_C3[4] * (4 * z * z - 3 * x * x - y * y)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (x * x - y * y)
        g[:, 15, 0] = SH_C3[6] * (3 * x * x - 3 * y * y)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g
