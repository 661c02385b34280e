"""Synthetic face corpus with exact ground truth.

Renders the procedural blend model to small RGB images plus segmentation
maps, computes dense ground-truth displacement fields between two shapes
sharing pose/expression/camera, and materializes train/val datasets with a
JSONL manifest. Every sample's randomness is derived from
(master_seed, identity, index), so generation order and worker count can
never change the output bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import face3d
from .config import RunConfig
from .seeds import derive_seed, rng_for

BACKGROUND_COLOR = np.array([-0.82, -0.80, -0.78])
LIGHT_DIR = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])

_SFLW_MAGIC = b"SFLW"


# --- segmentation helpers ---------------------------------------------------

def seg_one_hot(classes: np.ndarray, num_classes: int = face3d.NUM_SEG_CLASSES) -> np.ndarray:
    """(H, W) class map -> (H, W, C) float32 one-hot."""
    out = np.zeros(classes.shape + (num_classes,), dtype=np.float32)
    h, w = classes.shape
    out[np.arange(h)[:, None], np.arange(w)[None, :], classes] = 1.0
    return out


_SEG_PALETTE = np.array([
    (0, 0, 0), (224, 172, 138), (80, 48, 28), (96, 60, 36),
    (60, 110, 180), (70, 120, 170), (240, 190, 150), (200, 80, 80),
    (170, 50, 60), (90, 20, 30), (50, 34, 20), (128, 128, 0),
    (0, 128, 128), (128, 0, 128), (64, 64, 64), (192, 192, 192),
    (255, 128, 0), (0, 255, 128), (128, 0, 255),
], dtype=np.uint8)


# --- rasterization ----------------------------------------------------------

def _vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    fn = np.cross(e1, e2)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens < 1e-12] = 1.0
    normals = normals / lens
    # the shell faces the viewer; flip any normal pointing away
    flip = normals[:, 2] < 0
    normals[flip] = -normals[flip]
    return normals


def _with_center(values: np.ndarray, sectors: int) -> np.ndarray:
    """Append the virtual center vertex (mean of the innermost ring)."""
    center = values[:sectors].mean(axis=0, keepdims=True)
    return np.concatenate([values, center], axis=0)


def rasterize(pix: np.ndarray, depth: np.ndarray, faces: np.ndarray,
              labels: np.ndarray, height: int, width: int,
              attrs: dict[str, np.ndarray] | None = None):
    """Z-buffered triangle rasterization at pixel centers.

    pix: (V, 2) x/y pixel coordinates, depth: (V,) with larger = closer.
    Vertex labels are taken from the dominant barycentric vertex; attrs are
    interpolated. Returns (mask, label_map, interpolated attrs).
    """
    attrs = attrs or {}
    zbuf = np.full((height, width), -np.inf)
    label_map = np.zeros((height, width), dtype=np.int64)
    out = {name: np.zeros((height, width) + a.shape[1:], dtype=np.float64)
           for name, a in attrs.items()}

    for tri in faces:
        p = pix[tri]
        x0, y0 = p[:, 0].min(), p[:, 1].min()
        x1, y1 = p[:, 0].max(), p[:, 1].max()
        ix0, ix1 = max(0, int(np.ceil(x0))), min(width - 1, int(np.floor(x1)))
        iy0, iy1 = max(0, int(np.ceil(y0))), min(height - 1, int(np.floor(y1)))
        if ix0 > ix1 or iy0 > iy1:
            continue
        denom = ((p[1, 1] - p[2, 1]) * (p[0, 0] - p[2, 0])
                 + (p[2, 0] - p[1, 0]) * (p[0, 1] - p[2, 1]))
        if abs(denom) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(ix0, ix1 + 1), np.arange(iy0, iy1 + 1))
        l0 = ((p[1, 1] - p[2, 1]) * (gx - p[2, 0]) + (p[2, 0] - p[1, 0]) * (gy - p[2, 1])) / denom
        l1 = ((p[2, 1] - p[0, 1]) * (gx - p[2, 0]) + (p[0, 0] - p[2, 0]) * (gy - p[2, 1])) / denom
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        z = l0 * depth[tri[0]] + l1 * depth[tri[1]] + l2 * depth[tri[2]]
        rows, cols = gy[inside], gx[inside]
        zi = z[inside]
        closer = zi > zbuf[rows, cols]
        if not closer.any():
            continue
        rows, cols, zi = rows[closer], cols[closer], zi[closer]
        zbuf[rows, cols] = zi
        bary = np.stack([l0[inside][closer], l1[inside][closer], l2[inside][closer]])
        label_map[rows, cols] = labels[tri[np.argmax(bary, axis=0)]]
        for name, a in attrs.items():
            vals = (bary[0][:, None] * a[tri[0]][None, :]
                    + bary[1][:, None] * a[tri[1]][None, :]
                    + bary[2][:, None] * a[tri[2]][None, :])
            out[name][rows, cols] = vals.reshape((-1,) + a.shape[1:])

    mask = np.isfinite(zbuf)
    return mask, label_map, out


# --- rendering --------------------------------------------------------------

def _palette(texture_seed: int) -> np.ndarray:
    """Per-class base colors in [-1, 1], seeded per identity."""
    rng = rng_for("texture", texture_seed)
    pal = np.tile(BACKGROUND_COLOR, (face3d.NUM_SEG_CLASSES, 1))
    skin = np.array([0.38, 0.16, -0.02]) + rng.uniform(-0.30, 0.30, 3)
    brow = np.array([-0.62, -0.70, -0.74]) + rng.uniform(-0.18, 0.18, 3)
    eye = np.array(rng.choice([[-0.45, -0.25, 0.35], [-0.45, 0.15, -0.25],
                               [-0.15, -0.35, -0.45]])) + rng.uniform(-0.1, 0.1, 3)
    lip = skin + np.array([0.22, -0.30, -0.22]) + rng.uniform(-0.08, 0.08, 3)
    hair = np.array([-0.45, -0.58, -0.62]) + rng.uniform(-0.3, 0.2, 3)
    pal[face3d.CLASS_SKIN] = skin
    pal[face3d.CLASS_BROW_L] = pal[face3d.CLASS_BROW_R] = brow
    pal[face3d.CLASS_EYE_L] = pal[face3d.CLASS_EYE_R] = eye
    pal[face3d.CLASS_NOSE] = skin + rng.uniform(-0.06, 0.10, 3)
    pal[face3d.CLASS_LIP_UPPER] = lip
    pal[face3d.CLASS_LIP_LOWER] = lip + rng.uniform(-0.05, 0.12, 3)
    pal[face3d.CLASS_MOUTH_INNER] = np.array([-0.55, -0.80, -0.80])
    pal[face3d.CLASS_HAIR] = hair
    return np.clip(pal, -1.0, 1.0)


def render_face(model: face3d.BlendModel, params: face3d.FaceParams,
                texture_seed: int, image_size: int = 64):
    """Render one face; returns (image (H,W,3) float32 in [-1,1], seg (H,W) int64)."""
    params.validate()
    mesh = face3d.build_mesh(model, params.beta, params.theta, params.psi)
    pix = face3d.to_pixels(face3d.project(mesh.vertices, params.camera), image_size)
    normals = _vertex_normals(mesh.vertices, model.faces[model.sectors:])

    s = model.sectors
    pix_c = _with_center(pix, s)
    depth_c = _with_center(mesh.vertices[:, 2:3], s)[:, 0]
    normals_c = _with_center(normals, s)
    labels_c = np.concatenate([model.region_labels, [face3d.CLASS_SKIN]])

    mask, seg, interp = rasterize(pix_c, depth_c, model.faces, labels_c,
                                  image_size, image_size, {"normal": normals_c})

    shade_n = interp["normal"]
    lens = np.linalg.norm(shade_n, axis=-1, keepdims=True)
    lens[lens < 1e-9] = 1.0
    shade = 0.55 + 0.45 * np.clip((shade_n / lens) @ LIGHT_DIR, 0.0, None)

    pal = _palette(texture_seed)
    image = np.tile(BACKGROUND_COLOR, (image_size, image_size, 1))
    face_px = mask
    image[face_px] = pal[seg[face_px]] * shade[face_px][:, None]

    rng = rng_for("grain", texture_seed)
    ys, xs = np.mgrid[0:image_size, 0:image_size] / image_size
    grain = np.zeros((image_size, image_size))
    for _ in range(3):
        k = rng.uniform(3.0, 14.0, 2)
        grain += rng.uniform(0.015, 0.04) * np.sin(k[0] * xs * 2 * np.pi
                                                   + k[1] * ys * 2 * np.pi
                                                   + rng.uniform(0, 2 * np.pi))
    image[face_px] += grain[face_px][:, None]
    return np.clip(image, -1.0, 1.0).astype(np.float32), seg


# --- ground-truth flow ------------------------------------------------------

def ground_truth_flow(model: face3d.BlendModel, params_tgt: face3d.FaceParams,
                      params_src_shape: face3d.FaceParams, image_size: int = 64) -> np.ndarray:
    """Backward displacement field realizing the reshape warp exactly.

    At pixels covered by the reshaped geometry (source shape under target
    pose), the flow points to where that surface point sits in the target
    render; off-face pixels get inverse-distance-weighted extrapolation from
    the covered boundary. Returns (H, W, 2) float32 (dx, dy).
    """
    if not (np.array_equal(params_tgt.theta, params_src_shape.theta)
            and np.array_equal(params_tgt.psi, params_src_shape.psi)
            and params_tgt.camera.s == params_src_shape.camera.s
            and np.array_equal(params_tgt.camera.t2d, params_src_shape.camera.t2d)):
        raise ValueError("ground_truth_flow requires shared pose/expression/camera")

    cam = params_tgt.camera
    mesh_t = face3d.build_mesh(model, params_tgt.beta, params_tgt.theta, params_tgt.psi)
    mesh_s2t = face3d.build_mesh(model, params_src_shape.beta, params_tgt.theta, params_tgt.psi)
    pix_t = face3d.to_pixels(face3d.project(mesh_t.vertices, cam), image_size)
    pix_s2t = face3d.to_pixels(face3d.project(mesh_s2t.vertices, cam), image_size)

    s = model.sectors
    disp = _with_center(pix_t - pix_s2t, s)
    pix_c = _with_center(pix_s2t, s)
    depth_c = _with_center(mesh_s2t.vertices[:, 2:3], s)[:, 0]
    labels = np.zeros(pix_c.shape[0], dtype=np.int64)

    mask, _, interp = rasterize(pix_c, depth_c, model.faces, labels,
                                image_size, image_size, {"disp": disp})
    flow = interp["disp"]

    # continue rim values one step outward so bilinear sampling at the
    # silhouette mixes consistent neighbors, then IDW for the far field
    for _ in range(2):
        grown = mask.copy()
        acc = np.zeros_like(flow)
        cnt = np.zeros(mask.shape)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                src_y = slice(max(0, -dy), mask.shape[0] - max(0, dy))
                src_x = slice(max(0, -dx), mask.shape[1] - max(0, dx))
                dst_y = slice(max(0, dy), mask.shape[0] - max(0, -dy))
                dst_x = slice(max(0, dx), mask.shape[1] - max(0, -dx))
                m_src = mask[src_y, src_x]
                acc[dst_y, dst_x] += np.where(m_src[..., None], flow[src_y, src_x], 0.0)
                cnt[dst_y, dst_x] += m_src
        fill = ~mask & (cnt > 0)
        flow[fill] = acc[fill] / cnt[fill][:, None]
        grown |= fill
        mask = grown

    uncovered = ~mask
    if uncovered.any() and mask.any():
        inner = mask.copy()
        shifted = np.zeros_like(mask)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rolled = np.roll(mask, (dy, dx), axis=(0, 1))
            if dy == 1:
                rolled[0, :] = True
            elif dy == -1:
                rolled[-1, :] = True
            if dx == 1:
                rolled[:, 0] = True
            elif dx == -1:
                rolled[:, -1] = True
            shifted |= ~rolled
        boundary = mask & shifted
        if not boundary.any():
            boundary = mask
        by, bx = np.nonzero(boundary)
        bvals = flow[by, bx]
        uy, ux = np.nonzero(uncovered)
        k = min(8, by.size)  # nearest-K keeps the extrapolation local
        for start in range(0, uy.size, 4096):
            sl = slice(start, start + 4096)
            d2 = ((uy[sl][:, None] - by[None, :]) ** 2
                  + (ux[sl][:, None] - bx[None, :]) ** 2).astype(np.float64)
            near = np.argpartition(d2, k - 1, axis=1)[:, :k]
            rows = np.arange(d2.shape[0])[:, None]
            w = 1.0 / (d2[rows, near] + 1e-9)
            picked = bvals[near]
            flow[uy[sl], ux[sl]] = (w[..., None] * picked).sum(axis=1) / w.sum(axis=1, keepdims=True)

    return flow.astype(np.float32)


# --- flow file format -------------------------------------------------------

def save_flow(flow: np.ndarray, path: str | Path) -> None:
    """SFLW binary: magic, u32 H, u32 W, then HxWx2 little-endian float32."""
    h, w, c = flow.shape
    if c != 2:
        raise ValueError("flow must be HxWx2")
    with open(path, "wb") as fh:
        fh.write(_SFLW_MAGIC)
        fh.write(struct.pack("<2I", h, w))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def load_flow(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _SFLW_MAGIC:
            raise ValueError(f"not an SFLW file: {path}")
        h, w = struct.unpack("<2I", fh.read(8))
        buf = fh.read(8 * h * w)
        if len(buf) != 8 * h * w:
            raise ValueError(f"truncated SFLW file: {path}")
        return np.frombuffer(buf, dtype="<f4").reshape(h, w, 2).copy()


# --- image files ------------------------------------------------------------

def encode_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def decode_image(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 127.5 - 1.0)


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(encode_image(image), mode="RGB").save(path)


def load_image_png(path: str | Path) -> np.ndarray:
    return decode_image(np.asarray(PILImage.open(path).convert("RGB")))


def save_seg_png(seg: np.ndarray, path: str | Path) -> None:
    img = PILImage.fromarray(seg.astype(np.uint8), mode="P")
    img.putpalette(_SEG_PALETTE.flatten().tolist())
    img.save(path)


def load_seg_png(path: str | Path) -> np.ndarray:
    return np.asarray(PILImage.open(path)).astype(np.int64)


# --- dataset generation -----------------------------------------------------

@dataclass
class SampleRecord:
    identity_id: int
    sample_index: int
    split: str
    image_path: str
    seg_path: str
    params: face3d.FaceParams
    landmarks: np.ndarray       # (17, 2), pixel coords
    expression_label: np.ndarray

    def to_json_line(self) -> str:
        return json.dumps({
            "identity_id": self.identity_id,
            "sample_index": self.sample_index,
            "split": self.split,
            "image": self.image_path,
            "seg": self.seg_path,
            "params": self.params.to_dict(),
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
            "expression_label": [float(v) for v in self.expression_label],
        })

    @staticmethod
    def from_json_line(line: str) -> "SampleRecord":
        d = json.loads(line)
        return SampleRecord(
            identity_id=int(d["identity_id"]),
            sample_index=int(d["sample_index"]),
            split=d["split"],
            image_path=d["image"],
            seg_path=d["seg"],
            params=face3d.FaceParams.from_dict(d["params"]),
            landmarks=np.asarray(d["landmarks"], dtype=np.float64),
            expression_label=np.asarray(d["expression_label"], dtype=np.float64),
        )


_MAX_RIM_GAIN = 0.40


def identity_beta(master_seed: int, identity_id: int, shape_dim: int,
                  model: face3d.BlendModel | None = None) -> np.ndarray:
    """Shape coefficients for one identity.

    Draws are rejected while the induced rim radial gain exceeds the envelope
    that keeps outlines star-shaped and un-occluded; rejection runs inside
    the identity's own rng stream, so the result is deterministic.
    """
    rng = rng_for(master_seed, "identity", identity_id)
    model = model or _default_model()
    response = face3d.rim_gain_response(model)
    beta = rng.uniform(-2.2, 2.2, shape_dim)
    gain = np.abs(response @ beta).max()
    # normalize outline amplitude into a fixed band: identities are strongly
    # separated yet always star-shaped and occlusion-free
    target = rng.uniform(0.36, 0.44)
    factor = target / max(gain, 1e-9)
    factor = min(factor, 2.9 / max(np.abs(beta).max(), 1e-9))
    return beta * factor


_MODEL_CACHE: dict = {}


def _default_model(seed: int = 7, dims=(512, 8, 4, 2)) -> face3d.BlendModel:
    key = (seed, dims)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = face3d.build_model(seed, dims)
    return _MODEL_CACHE[key]


def identity_texture_seed(master_seed: int, identity_id: int) -> int:
    return derive_seed(master_seed, "texture_seed", identity_id)


def sample_params(master_seed: int, identity_id: int, sample_index: int,
                  shape_dim: int, expr_dim: int,
                  model: face3d.BlendModel | None = None) -> face3d.FaceParams:
    beta = identity_beta(master_seed, identity_id, shape_dim, model)
    rng = rng_for(master_seed, "sample", identity_id, sample_index)
    theta = np.concatenate([rng.uniform(-0.15, 0.15, 3), [rng.uniform(0.0, 0.25)]])
    psi = rng.uniform(-1.5, 1.5, expr_dim)
    cam = face3d.Camera(s=float(rng.uniform(0.92, 1.18)), t2d=rng.uniform(-0.07, 0.07, 2))
    return face3d.FaceParams(beta=beta, theta=theta, psi=psi, camera=cam)


def make_record(model: face3d.BlendModel, cfg: RunConfig, identity_id: int,
                sample_index: int, out_dir: Path, write_files: bool = True) -> SampleRecord:
    d = cfg.data
    params = sample_params(d.master_seed, identity_id, sample_index,
                           cfg.face3d.shape_dim, cfg.face3d.expr_dim, model)
    image, seg = render_face(model, params, identity_texture_seed(d.master_seed, identity_id),
                             d.image_size)
    mesh = face3d.build_mesh(model, params.beta, params.theta, params.psi)
    lm = face3d.contour_landmarks(model, mesh, params.camera, d.image_size)
    name = f"id{identity_id:03d}_s{sample_index:03d}.png"
    if write_files:
        save_image_png(image, out_dir / "img" / name)
        save_seg_png(seg, out_dir / "seg" / name)
    split = "train" if sample_index < d.per_identity - d.val_per_identity else "val"
    return SampleRecord(
        identity_id=identity_id,
        sample_index=sample_index,
        split=split,
        image_path=f"img/{name}",
        seg_path=f"seg/{name}",
        params=params,
        landmarks=lm.points,
        expression_label=params.psi.copy(),
    )


def generate_dataset(cfg: RunConfig, out_dir: str | Path, overwrite: bool = False) -> Path:
    """Materialize the dataset; returns the manifest path.

    A second call with an existing manifest is a no-op unless overwrite=True.
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    if manifest_path.exists() and not overwrite:
        return manifest_path

    (out_dir / "img").mkdir(parents=True, exist_ok=True)
    (out_dir / "seg").mkdir(parents=True, exist_ok=True)

    f = cfg.face3d
    model = face3d.build_model(f.model_seed, (f.vertices, f.shape_dim, f.expr_dim, f.joints))
    face3d.save_model(model, out_dir / "model.fl3d")

    records = []
    for identity in range(cfg.data.identities):
        for k in range(cfg.data.per_identity):
            records.append(make_record(model, cfg, identity, k, out_dir))

    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json_line() + "\n")
    with open(out_dir / "meta.json", "w") as fh:
        json.dump({"config_hash": cfg.content_hash(), "config": cfg.to_dict()}, fh, indent=2)
    return manifest_path


def read_manifest(manifest_path: str | Path) -> list[SampleRecord]:
    with open(manifest_path) as fh:
        return [SampleRecord.from_json_line(line) for line in fh if line.strip()]


def dataset_hash(manifest_path: str | Path) -> str:
    """Hash of manifest + every referenced file, for provenance checks."""
    import hashlib
    root = Path(manifest_path).parent
    h = hashlib.sha256()
    h.update(Path(manifest_path).read_bytes())
    for rec in read_manifest(manifest_path):
        h.update(Path(root / rec.image_path).read_bytes())
        h.update(Path(root / rec.seg_path).read_bytes())
    return h.hexdigest()[:16]
