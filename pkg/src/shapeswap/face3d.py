"""Procedural blendshape face model with linear blend skinning.

A desk-scale stand-in for a full morphable face asset: a dome-shaped
template mesh on a ring/sector grid, orthonormal shape and expression
bases built from smooth random fields, two skinning joints (neck root and
jaw), and an orthographic camera. Everything is float64 numpy and pure,
so outputs are bit-reproducible for a given seed.

Conventions: the face lives in [-1, 1]^3 with +z toward the viewer and +y
toward the chin; normalized image coordinates map linearly onto pixels,
-1 -> 0 and +1 -> (size - 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_LANDMARKS = 17
NUM_SEG_CLASSES = 19
POSE_FEATURE_DIM = 4
JAW_AXIS = np.array([-1.0, 0.0, 0.0])

# Segmentation class ids used by the renderer. 19 slots are kept so channel
# counts stay fixed; ids 11..18 are reserved and never emitted.
CLASS_BACKGROUND = 0
CLASS_SKIN = 1
CLASS_BROW_L = 2
CLASS_BROW_R = 3
CLASS_EYE_L = 4
CLASS_EYE_R = 5
CLASS_NOSE = 6
CLASS_LIP_UPPER = 7
CLASS_LIP_LOWER = 8
CLASS_MOUTH_INNER = 9
CLASS_HAIR = 10

_FL3D_MAGIC = b"FL3D"
_FL3D_VERSION = 1


@dataclass
class Camera:
    s: float
    t2d: np.ndarray  # (2,) translation in normalized units

    def to_dict(self) -> dict:
        return {"s": float(self.s), "t2d": [float(v) for v in self.t2d]}

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(s=float(d["s"]), t2d=np.asarray(d["t2d"], dtype=np.float64))


@dataclass
class FaceParams:
    """Coefficients driving one face instance.

    beta: shape (B,), theta: global axis-angle rotation plus jaw opening
    (4,), psi: expression (E,), camera: orthographic scale + translation.
    """

    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    camera: Camera

    def validate(self) -> None:
        for name in ("beta", "theta", "psi"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
            if np.max(np.abs(arr)) > 3.0 + 1e-12:
                raise ValueError(f"{name} magnitude exceeds 3")
        if not (self.camera.s > 0):
            raise ValueError("camera scale must be positive")

    def to_dict(self) -> dict:
        return {
            "beta": [float(v) for v in self.beta],
            "theta": [float(v) for v in self.theta],
            "psi": [float(v) for v in self.psi],
            "camera": self.camera.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "FaceParams":
        return FaceParams(
            beta=np.asarray(d["beta"], dtype=np.float64),
            theta=np.asarray(d["theta"], dtype=np.float64),
            psi=np.asarray(d["psi"], dtype=np.float64),
            camera=Camera.from_dict(d["camera"]),
        )


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)


@dataclass
class LandmarkSet:
    points: np.ndarray  # (17, 2) pixel coordinates

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (NUM_LANDMARKS, 2):
            raise ValueError(f"expected {NUM_LANDMARKS}x2 landmarks, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite landmarks")


@dataclass
class BlendModel:
    template: np.ndarray              # (V, 3)
    shape_basis: np.ndarray           # (V, 3, B), orthonormal columns
    expr_basis: np.ndarray            # (V, 3, E), orthonormal columns
    pose_corrective_basis: np.ndarray  # (V, 3, 4)
    joint_regressor: np.ndarray       # (J, V), rows convex
    skin_weights: np.ndarray          # (V, J), rows sum to 1
    contour_indices: np.ndarray       # (17,) boundary-ring vertex ids
    region_labels: np.ndarray         # (V,) segmentation class ids
    rings: int = 0
    sectors: int = 0
    faces: np.ndarray = field(default=None, repr=False)  # (F, 3), derived

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def expr_dim(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def num_joints(self) -> int:
        return self.joint_regressor.shape[0]


def _grid_factor(v: int) -> tuple[int, int]:
    """Split V into rings x sectors with rings ~ sqrt(V/2)."""
    upper = int(np.sqrt(v / 2.0))
    for rings in range(upper, 1, -1):
        if v % rings == 0:
            return rings, v // rings
    raise ValueError(f"vertex count {v} admits no ring/sector grid (needs a divisor >= 2)")


def _grid_faces(rings: int, sectors: int) -> np.ndarray:
    """Triangulate the ring grid; index `rings*sectors` is the virtual center."""
    def vid(r, s):
        return r * sectors + (s % sectors)

    tris = []
    center = rings * sectors
    for s in range(sectors):
        tris.append((center, vid(0, s), vid(0, s + 1)))
    for r in range(rings - 1):
        for s in range(sectors):
            a, b = vid(r, s), vid(r, s + 1)
            c, d = vid(r + 1, s), vid(r + 1, s + 1)
            tris.append((a, b, c))
            tris.append((b, d, c))
    return np.asarray(tris, dtype=np.int64)


def _template_grid(rings: int, sectors: int) -> np.ndarray:
    """Dome-shaped face shell: elliptical disc bulging toward +z.

    The profile is a paraboloid, not a hemisphere: its rim slope is finite,
    so the mesh boundary stays on the visible silhouette for all rotations
    the sampler emits and contour landmarks are never self-occluded.
    """
    a, b, c = 0.66, 0.82, 0.34
    r = np.arange(rings, dtype=np.float64)
    s = np.arange(sectors, dtype=np.float64)
    rho = (r[:, None] + 1.0) / rings
    phi = 2.0 * np.pi * s[None, :] / sectors
    x = a * rho * np.cos(phi)
    y = b * rho * np.sin(phi)
    z = c * (1.0 - rho**2)
    # gentle nose ridge so shading has structure
    z = z + 0.10 * np.exp(-((x / 0.14) ** 2
                            + ((y - 0.08) / 0.22) ** 2))
    return np.stack([x, y, z], axis=-1).reshape(rings * sectors, 3)


def _region_labels(template: np.ndarray, rings: int, sectors: int) -> np.ndarray:
    x, y = template[:, 0], template[:, 1]
    labels = np.full(template.shape[0], CLASS_SKIN, dtype=np.int64)

    def ellipse(cx, cy, ax, ay):
        return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0

    labels[ellipse(-0.24, -0.34, 0.14, 0.05)] = CLASS_BROW_L
    labels[ellipse(+0.24, -0.34, 0.14, 0.05)] = CLASS_BROW_R
    labels[ellipse(-0.22, -0.17, 0.11, 0.06)] = CLASS_EYE_L
    labels[ellipse(+0.22, -0.17, 0.11, 0.06)] = CLASS_EYE_R
    nose = (np.abs(x) <= 0.055 + 0.16 * np.clip(y + 0.12, 0.0, None)) & (y >= -0.12) & (y <= 0.20)
    labels[nose] = CLASS_NOSE
    mouth = ellipse(0.0, 0.40, 0.18, 0.085)
    labels[mouth & (y <= 0.40)] = CLASS_LIP_UPPER
    labels[mouth & (y > 0.40)] = CLASS_LIP_LOWER
    labels[ellipse(0.0, 0.40, 0.10, 0.032)] = CLASS_MOUTH_INNER
    ring = np.repeat(np.arange(rings), sectors)
    labels[(ring >= rings - 3) & (y < -0.30)] = CLASS_HAIR
    return labels


def _smooth_fields(rng: np.random.Generator, template: np.ndarray, count: int,
                   waves: int = 4) -> np.ndarray:
    """Random low-frequency vector fields evaluated at template vertices.

    Fields are functions of 3D position only, so coincident vertices always
    receive identical offsets and the mesh cannot tear.
    """
    v = template.shape[0]
    out = np.zeros((v, 3, count))
    for k in range(count):
        for _ in range(waves):
            kvec = rng.uniform(0.6, 2.8, size=3) * rng.choice([-1.0, 1.0], size=3)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.normal(0.0, 1.0, size=3)
            wave = np.sin(template @ kvec + phase)
            out[:, :, k] += wave[:, None] * amp[None, :]
    return out


def _fourier(rng: np.random.Generator, phi: np.ndarray, order: int = 3,
             scale: float = 1.0, const_scale: float | None = None) -> np.ndarray:
    if const_scale is None:
        const_scale = scale
    out = np.full(phi.shape, rng.normal(0.0, const_scale))
    for n in range(1, order + 1):
        out += rng.normal(0.0, scale / n) * np.cos(n * phi)
        out += rng.normal(0.0, scale / n) * np.sin(n * phi)
    return out


def _structured_fields(rng: np.random.Generator, rings: int, sectors: int,
                       count: int, angular_mask=None) -> np.ndarray:
    """Deformation fields that cannot self-occlude the mesh rim.

    Offsets are purely radial in-plane, scaled with ring radius along each
    ray, so every deformed outline is a star-shaped polar curve that can
    never fold over itself; the out-of-plane component carries a
    (1 - rho^2)^2 envelope that keeps the rim slope at its template value.
    The constant Fourier term of the radial gain is kept small so overall
    face area varies far less than outline shape.
    """
    a, b = 0.66, 0.82
    r = np.repeat(np.arange(rings, dtype=np.float64), sectors)
    s = np.tile(np.arange(sectors, dtype=np.float64), rings)
    rho = (r + 1.0) / rings
    phi = 2.0 * np.pi * s / sectors
    radial = np.stack([a * rho * np.cos(phi), b * rho * np.sin(phi)], axis=1)

    out = np.zeros((rings * sectors, 3, count))
    for k in range(count):
        u = _fourier(rng, phi, scale=1.0, const_scale=0.25)
        # z stays small: its mid-radius slope times rotation is what folds
        # the projection, and outline identity lives in u anyway
        w = _fourier(rng, phi, scale=0.35)
        if angular_mask is not None:
            u, w = u * angular_mask, w * angular_mask
        out[:, :2, k] = u[:, None] * radial
        out[:, 2, k] = w * (1.0 - rho**2) ** 2
    return out


def _orthonormalize(basis: np.ndarray) -> np.ndarray:
    v, _, k = basis.shape
    flat = basis.reshape(v * 3, k)
    q, r = np.linalg.qr(flat)
    # fix signs so the construction is canonical
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs[None, :]).reshape(v, 3, k)


def build_model(seed: int, dims: tuple[int, int, int, int] = (512, 8, 4, 2)) -> BlendModel:
    """Build the procedural blend model for a seed and (V, B, E, J) dims."""
    v, b, e, j = dims
    if v < 64:
        raise ValueError(f"need at least 64 vertices, got {v}")
    if min(b, e, j) < 1:
        raise ValueError("basis/joint dims must be positive")
    if j != 2:
        raise ValueError("this model is defined for exactly 2 joints (neck, jaw)")

    rings, sectors = _grid_factor(v)
    rng = np.random.default_rng(seed)
    template = _template_grid(rings, sectors)

    shape_basis = _orthonormalize(_structured_fields(rng, rings, sectors, b))
    # expressions concentrate around the mouth (phi ~ pi/2) and brows (~3pi/2)
    s_idx = np.tile(np.arange(sectors, dtype=np.float64), rings)
    phi = 2.0 * np.pi * s_idx / sectors
    expr_mask = (np.exp(-((np.angle(np.exp(1j * (phi - 0.5 * np.pi)))) / 0.9) ** 2)
                 + 0.7 * np.exp(-((np.angle(np.exp(1j * (phi - 1.5 * np.pi)))) / 0.9) ** 2))
    expr_basis = _orthonormalize(
        _structured_fields(rng, rings, sectors, e, angular_mask=expr_mask))
    x, y = template[:, 0], template[:, 1]

    pose_basis = _smooth_fields(rng, template, POSE_FEATURE_DIM)
    norms = np.sqrt((pose_basis.reshape(v * 3, -1) ** 2).sum(axis=0))
    pose_basis = 0.15 * pose_basis / norms[None, None, :]

    joint_targets = np.array([[0.0, 0.00, 0.10],    # neck root
                              [0.0, 0.32, 0.22]])   # jaw hinge
    reg = np.exp(-((template[None, :, :] - joint_targets[:, None, :]) ** 2).sum(-1) / 0.08)
    joint_regressor = reg / reg.sum(axis=1, keepdims=True)

    w_jaw = 1.0 / (1.0 + np.exp(-(y - 0.30) / 0.06))
    skin_weights = np.stack([1.0 - w_jaw, w_jaw], axis=1)

    boundary = np.arange((rings - 1) * sectors, rings * sectors)
    picks = np.floor(np.arange(NUM_LANDMARKS) * sectors / NUM_LANDMARKS).astype(np.int64)
    contour_indices = boundary[picks]

    model = BlendModel(
        template=template,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        pose_corrective_basis=pose_basis,
        joint_regressor=joint_regressor,
        skin_weights=skin_weights,
        contour_indices=contour_indices,
        region_labels=_region_labels(template, rings, sectors),
        rings=rings,
        sectors=sectors,
    )
    model.faces = _grid_faces(rings, sectors)
    return model


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) to rotation matrix."""
    theta = float(np.linalg.norm(axis_angle))
    if theta < 1e-12:
        return np.eye(3)
    k = axis_angle / theta
    kx = np.array([[0.0, -k[2], k[1]],
                   [k[2], 0.0, -k[0]],
                   [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def pose_features(theta: np.ndarray) -> np.ndarray:
    """Jaw-driven corrective coefficients; zero for any purely global rotation."""
    jaw = float(theta[3])
    return np.array([np.sin(jaw), 1.0 - np.cos(jaw),
                     np.sin(2.0 * jaw), 1.0 - np.cos(2.0 * jaw)])


def _transform(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = rot
    out[:3, 3] = trans
    return out


def joint_transforms(model: BlendModel, beta: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-joint 4x4 skinning transforms (rest pose removed)."""
    v_shaped = model.template + model.shape_basis @ beta
    joints = model.joint_regressor @ v_shaped
    r_root = rodrigues(theta[:3])
    r_jaw = rodrigues(JAW_AXIS * float(theta[3]))
    a0 = _transform(r_root, joints[0])
    a1 = a0 @ _transform(r_jaw, joints[1] - joints[0])
    g0 = a0 @ _transform(np.eye(3), -joints[0])
    g1 = a1 @ _transform(np.eye(3), -joints[1])
    return np.stack([g0, g1])


def rim_gain_response(model: BlendModel) -> np.ndarray:
    """(sectors, B) matrix mapping shape coefficients to rim radial gain.

    Row s gives, per basis column, the fractional radial displacement of
    boundary vertex s; used by the sampler to keep outlines fold-free.
    """
    rim = np.arange((model.rings - 1) * model.sectors, model.rings * model.sectors)
    xy = model.template[rim, :2]
    denom = (xy**2).sum(axis=1)
    resp = (model.shape_basis[rim, :2, :] * xy[:, :, None]).sum(axis=1)
    return resp / denom[:, None]


def build_mesh(model: BlendModel, beta: np.ndarray, theta: np.ndarray,
               psi: np.ndarray) -> Mesh:
    """Pose the model: blendshape offsets, then linear blend skinning."""
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if beta.shape != (model.shape_dim,):
        raise ValueError(f"beta has shape {beta.shape}, model wants ({model.shape_dim},)")
    if psi.shape != (model.expr_dim,):
        raise ValueError(f"psi has shape {psi.shape}, model wants ({model.expr_dim},)")
    if theta.shape != (4,):
        raise ValueError(f"theta has shape {theta.shape}, expected (4,)")

    offsets = (model.shape_basis @ beta
               + model.expr_basis @ psi
               + model.pose_corrective_basis @ pose_features(theta))
    v_posed = model.template + offsets

    g = joint_transforms(model, beta, theta)
    # per-vertex blended transform
    t = np.einsum("vj,jab->vab", model.skin_weights, g)
    hom = np.concatenate([v_posed, np.ones((v_posed.shape[0], 1))], axis=1)
    verts = np.einsum("vab,vb->va", t, hom)[:, :3]
    return Mesh(vertices=verts)


def project(points3d: np.ndarray, camera: Camera) -> np.ndarray:
    """Orthographic projection to normalized 2D: drop z, scale, translate."""
    points3d = np.asarray(points3d, dtype=np.float64)
    if not np.all(np.isfinite(points3d)):
        raise ValueError("non-finite points")
    if not (camera.s > 0):
        raise ValueError("camera scale must be positive")
    return camera.s * points3d[:, :2] + camera.t2d[None, :]


def to_pixels(points_norm: np.ndarray, image_size: int) -> np.ndarray:
    """Map normalized [-1, 1] coordinates onto the [0, size-1] pixel grid."""
    return (points_norm + 1.0) * 0.5 * (image_size - 1)


def contour_landmarks(model: BlendModel, mesh: Mesh, camera: Camera,
                      image_size: int = 64) -> LandmarkSet:
    pts = project(mesh.vertices[model.contour_indices], camera)
    return LandmarkSet(points=to_pixels(pts, image_size))


def cross_identity_landmarks(model: BlendModel, src: FaceParams, tgt: FaceParams,
                             image_size: int = 64) -> tuple[LandmarkSet, LandmarkSet]:
    """Landmarks of the target and of the source shape under target pose.

    P_t uses (beta_t, theta_t, psi_t, camera_t); the second set swaps in the
    source shape only, projecting with the target camera.
    """
    mesh_t = build_mesh(model, tgt.beta, tgt.theta, tgt.psi)
    mesh_s2t = build_mesh(model, src.beta, tgt.theta, tgt.psi)
    p_t = contour_landmarks(model, mesh_t, tgt.camera, image_size)
    p_s2t = contour_landmarks(model, mesh_s2t, tgt.camera, image_size)
    return p_t, p_s2t


# --- serialization ----------------------------------------------------------

_ARRAY_ORDER = ("template", "shape_basis", "expr_basis", "pose_corrective_basis",
                "joint_regressor", "skin_weights", "contour_indices", "region_labels")


def save_model(model: BlendModel, path: str | Path) -> None:
    """Write the FL3D binary: magic, version, dims, float64 arrays in order."""
    v, b = model.num_vertices, model.shape_dim
    e, j = model.expr_dim, model.num_joints
    with open(path, "wb") as fh:
        fh.write(_FL3D_MAGIC)
        fh.write(struct.pack("<5I", _FL3D_VERSION, v, b, e, j))
        for name in _ARRAY_ORDER:
            arr = np.ascontiguousarray(getattr(model, name), dtype="<f8")
            fh.write(arr.tobytes())


def load_model(path: str | Path) -> BlendModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FL3D_MAGIC:
            raise ValueError(f"not an FL3D file: bad magic {magic!r}")
        version, v, b, e, j = struct.unpack("<5I", fh.read(20))
        if version != _FL3D_VERSION:
            raise ValueError(f"unsupported FL3D version {version}")
        shapes = {
            "template": (v, 3),
            "shape_basis": (v, 3, b),
            "expr_basis": (v, 3, e),
            "pose_corrective_basis": (v, 3, POSE_FEATURE_DIM),
            "joint_regressor": (j, v),
            "skin_weights": (v, j),
            "contour_indices": (NUM_LANDMARKS,),
            "region_labels": (v,),
        }
        arrays = {}
        for name in _ARRAY_ORDER:
            shape = shapes[name]
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"truncated FL3D file while reading {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    rings, sectors = _grid_factor(v)
    model = BlendModel(
        template=arrays["template"],
        shape_basis=arrays["shape_basis"],
        expr_basis=arrays["expr_basis"],
        pose_corrective_basis=arrays["pose_corrective_basis"],
        joint_regressor=arrays["joint_regressor"],
        skin_weights=arrays["skin_weights"],
        contour_indices=arrays["contour_indices"].astype(np.int64),
        region_labels=arrays["region_labels"].astype(np.int64),
        rings=rings,
        sectors=sectors,
    )
    model.faces = _grid_faces(rings, sectors)
    return model


def save_landmarks_json(landmarks: LandmarkSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([[float(x), float(y)] for x, y in landmarks.points], fh)


def load_landmarks_json(path: str | Path) -> LandmarkSet:
    with open(path) as fh:
        return LandmarkSet(points=np.asarray(json.load(fh), dtype=np.float64))
