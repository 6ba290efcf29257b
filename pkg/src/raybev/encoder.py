"""Point encoder: radar points to BEV Gaussian primitives to a feature map.

Pipeline per frame batch:

1. Per-point input channels ``(x, y, z, r, rcs, v_r, dt, rho)`` are
   standardized with config-supplied statistics and pushed through a small
   MLP to give point features ``f_p``.
2. Optional semantic injection samples an image feature map at each point's
   camera projection, either by plain bilinear sampling or with a
   lightweight deformable head (learned sample offsets plus softmax
   attention over K samples around the projection). Out-of-view points
   receive zeros. The image may arrive pre-aligned or as a feature pyramid
   that is bilinearly upsampled to the finest level, concatenated and mixed
   by a learned 1x1 convolution.
3. A linear head maps the fused feature to raw Gaussian attributes which
   `gaussians.activate_arrays` squashes into a bounded offset, positive
   bounded scales, a unit quaternion, an opacity and free features.
4. Attributes are interpreted in each point's ray frame (ray-centric mode)
   or directly in the perception frame (ego-centric mode), unified via
   `gaussians.ego_transform_arrays`, marginalized to 2D and splatted.

`encode_full` additionally returns the intermediate caches the manual
backward pass consumes, plus a discrete decision signature (relu masks,
cutoff masks, bilinear corner indices, footprint rectangles and similar)
that finite-difference probing uses to reject probes that cross a kink.

Images use pixel-center coordinates: integer ``(u, v)`` hits a pixel
exactly, samples clamp to the edge, and a point is in view when
``depth > 0 and 0 <= u < width and 0 <= v < height``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FeatureLengthMismatch, FormatError, ShapeMismatch, WidthMismatch
from .gaussians import (
    Activation,
    ActivationLimits,
    CovarianceParts,
    EgoArrays,
    activate_arrays,
    covariance_parts,
    ego_transform_arrays,
    marginalize_arrays,
)
from .geometry import ray_frames
from .params import ParameterSet, init_mlp_flat, mlp_param_count
from .rasterizer import BevGridSpec, FeatureMap, GaussianPatch, gaussian_patch, splat_arrays

POINTS_MAGIC = b"RAYBEV.POINTS\x00\x00\x00"
POINTS_VERSION = 1

POINT_CHANNEL_NAMES = ("x", "y", "z", "r", "rcs", "v_r", "dt", "rho")

DEFAULT_INPUT_MEAN = (20.0, 0.0, 0.5, 22.0, 0.0, 0.0, 0.2, 22.0)
DEFAULT_INPUT_STD = (15.0, 12.0, 1.5, 15.0, 8.0, 3.0, 0.2, 15.0)


@dataclass(frozen=True)
class RadarPoint:
    """One radar detection in the sensor frame."""

    position: np.ndarray
    rcs: float = 0.0
    v_r: float = 0.0
    dt: float = 0.0


def points_array(points) -> np.ndarray:
    """Coerce points to the packed (n, 7) layout (x, y, z, rcs, v_r, dt, reserved)."""
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 7:
            raise ShapeMismatch(f"packed points must be (n, 7), got {arr.shape}")
        return arr
    arr = np.zeros((len(points), 7), dtype=np.float64)
    for i, p in enumerate(points):
        arr[i, 0:3] = np.asarray(p.position, dtype=np.float64)
        arr[i, 3] = p.rcs
        arr[i, 4] = p.v_r
        arr[i, 5] = p.dt
    return arr


def save_points(path, points) -> None:
    """Write points as little-endian float32 records of 7 values."""
    arr = points_array(points)
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC)
        fh.write(struct.pack("<2I", POINTS_VERSION, arr.shape[0]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_points(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = len(POINTS_MAGIC) + 8
    if len(raw) < head or raw[: len(POINTS_MAGIC)] != POINTS_MAGIC:
        raise FormatError(f"{path}: not a radar point file")
    version, count = struct.unpack_from("<2I", raw, len(POINTS_MAGIC))
    if version != POINTS_VERSION:
        raise FormatError(f"{path}: unsupported point file version {version}")
    if len(raw) != head + 28 * count:
        raise FormatError(f"{path}: payload does not match {count} records")
    data = np.frombuffer(raw, dtype="<f4", offset=head).astype(np.float64)
    return data.reshape(count, 7)


def point_channels(points7: np.ndarray) -> np.ndarray:
    """Raw input channels (x, y, z, r, rcs, v_r, dt, rho) for packed points."""
    p = points7[:, 0:3]
    r = np.linalg.norm(p, axis=1)
    rho = np.hypot(p[:, 0], p[:, 1])
    return np.column_stack([p, r, points7[:, 3], points7[:, 4], points7[:, 5], rho])


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack; flat params hold per-layer weights then biases."""

    widths: tuple[int, ...]
    params: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise WidthMismatch(f"an MLP needs at least two widths, got {self.widths}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation '{self.activation}'")
        expected = mlp_param_count(self.widths)
        if self.params.shape != (expected,):
            raise WidthMismatch(
                f"widths {self.widths} need {expected} parameters, got shape {self.params.shape}"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (weight, bias) views into the flat parameter vector."""
        out = []
        off = 0
        for i in range(len(self.widths) - 1):
            fin, fout = self.widths[i], self.widths[i + 1]
            w = self.params[off : off + fin * fout].reshape(fin, fout)
            off += fin * fout
            b = self.params[off : off + fout]
            off += fout
            out.append((w, b))
        return out


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]


def mlp_forward(x: np.ndarray, spec: MlpSpec) -> tuple[np.ndarray, MlpCache]:
    """Run the stack; hidden layers use the spec activation, the last is linear."""
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise WidthMismatch(f"input width {x.shape} does not match MLP input {spec.widths[0]}")
    layers = spec.layers()
    inputs = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1 and spec.activation == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
        if i < len(layers) - 1:
            inputs.append(h)
    return h, MlpCache(inputs=inputs, pre=pre)


def point_featurize(points, mlp: MlpSpec, input_mean=DEFAULT_INPUT_MEAN, input_std=DEFAULT_INPUT_STD) -> np.ndarray:
    """Standardized point channels through the point MLP."""
    points7 = points_array(points)
    x = (point_channels(points7) - np.asarray(input_mean, dtype=np.float64)) / np.asarray(
        input_std, dtype=np.float64
    )
    f_p, _ = mlp_forward(x, mlp)
    return f_p


@dataclass(frozen=True)
class CameraProjection:
    """Pinhole projection from sensor coordinates to pixel-center coordinates."""

    matrix: np.ndarray
    image_width: int
    image_height: int

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project (n, 3) points; returns (u, v, in_view).

        Points at or behind the camera plane are out of view and get
        placeholder coordinates (0, 0).
        """
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ShapeMismatch(f"projection matrix must be (3, 4), got {m.shape}")
        h = points @ m[:, :3].T + m[:, 3]
        depth = h[:, 2]
        ok = depth > 1e-12
        safe = np.where(ok, depth, 1.0)
        u = np.where(ok, h[:, 0] / safe, 0.0)
        v = np.where(ok, h[:, 1] / safe, 0.0)
        in_view = ok & (u >= 0) & (u < self.image_width) & (v >= 0) & (v < self.image_height)
        return u, v, in_view


def pinhole_projection(fx, fy, cx, cy, width, height, extrinsic=None) -> CameraProjection:
    """Build a CameraProjection from intrinsics and an optional (3, 4) extrinsic."""
    if extrinsic is None:
        extrinsic = np.hstack([np.eye(3), np.zeros((3, 1))])
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraProjection(matrix=k @ np.asarray(extrinsic, dtype=np.float64), image_width=int(width), image_height=int(height))


@dataclass
class BilinearCache:
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    free_x: np.ndarray
    free_y: np.ndarray


def _bilinear_batch(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, BilinearCache]:
    """Edge-clamped bilinear samples at pixel-center coordinates.

    ``free_x``/``free_y`` mark samples whose coordinate was not clamped,
    i.e. where the value actually varies with position.
    """
    c, h, w = img.shape
    x = np.clip(u, 0.0, float(w - 1))
    y = np.clip(v, 0.0, float(h - 1))
    free_x = (u > 0.0) & (u < w - 1.0)
    free_y = (v > 0.0) & (v < h - 1.0)
    x0 = np.minimum(np.floor(x), w - 2).astype(np.int64) if w > 1 else np.zeros(len(u), np.int64)
    y0 = np.minimum(np.floor(y), h - 2).astype(np.int64) if h > 1 else np.zeros(len(v), np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = x - x0
    ty = y - y0
    flat = img.reshape(c, h * w)
    v00 = flat[:, y0 * w + x0].T
    v01 = flat[:, y0 * w + x1].T
    v10 = flat[:, y1 * w + x0].T
    v11 = flat[:, y1 * w + x1].T
    txc = tx[:, None]
    tyc = ty[:, None]
    vals = (
        v00 * (1.0 - txc) * (1.0 - tyc)
        + v01 * txc * (1.0 - tyc)
        + v10 * (1.0 - txc) * tyc
        + v11 * txc * tyc
    )
    return vals, BilinearCache(x0=x0, x1=x1, y0=y0, y1=y1, tx=tx, ty=ty, free_x=free_x, free_y=free_y)


def bilinear_sample(img: np.ndarray, u, v) -> np.ndarray:
    """Single edge-clamped bilinear sample; integer coordinates hit pixels exactly."""
    vals, _ = _bilinear_batch(np.asarray(img, dtype=np.float64), np.atleast_1d(np.float64(u)), np.atleast_1d(np.float64(v)))
    return vals[0]


def upsample_bilinear(level: np.ndarray, h0: int, w0: int) -> np.ndarray:
    """Resize (c, h, w) to (c, h0, w0) with half-pixel-aligned bilinear sampling."""
    c, h, w = level.shape
    if (h, w) == (h0, w0):
        return level.astype(np.float64, copy=True)
    ys = np.clip((np.arange(h0, dtype=np.float64) + 0.5) * (h / h0) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(w0, dtype=np.float64) + 0.5) * (w / w0) - 0.5, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(ys), h - 2).astype(np.int64) if h > 1 else np.zeros(h0, np.int64)
    x0 = np.minimum(np.floor(xs), w - 2).astype(np.int64) if w > 1 else np.zeros(w0, np.int64)
    y0 = np.maximum(y0, 0)
    x0 = np.maximum(x0, 0)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[None, :, None]
    tx = (xs - x0)[None, None, :]
    lvl = level.astype(np.float64, copy=False)
    top = lvl[:, y0, :][:, :, x0] * (1 - tx) + lvl[:, y0, :][:, :, x1] * tx
    bot = lvl[:, y1, :][:, :, x0] * (1 - tx) + lvl[:, y1, :][:, :, x1] * tx
    return top * (1 - ty) + bot * ty


def _concat_upsampled(pyramid: Sequence[np.ndarray]) -> np.ndarray:
    if not pyramid:
        raise ShapeMismatch("feature pyramid must have at least one level")
    h0, w0 = pyramid[0].shape[1], pyramid[0].shape[2]
    return np.concatenate([upsample_bilinear(np.asarray(l, dtype=np.float64), h0, w0) for l in pyramid], axis=0)


def align_resolution(pyramid: Sequence[np.ndarray], mix_w: np.ndarray, mix_b: np.ndarray) -> np.ndarray:
    """Upsample all pyramid levels to level-0 size, concatenate, mix with 1x1 conv.

    Args:
        pyramid: list of (c_i, h_i, w_i) arrays; level 0 sets the output size.
        mix_w: (sum c_i, c_out) channel mixing weights.
        mix_b: (c_out,) bias.
    """
    stacked = _concat_upsampled(pyramid)
    if mix_w.ndim != 2 or mix_w.shape[0] != stacked.shape[0]:
        raise ShapeMismatch(
            f"mix weights {mix_w.shape} do not match {stacked.shape[0]} stacked channels"
        )
    if mix_b.shape != (mix_w.shape[1],):
        raise ShapeMismatch(f"mix bias {mix_b.shape} does not match {mix_w.shape[1]} outputs")
    return np.tensordot(mix_w.T, stacked, axes=1) + mix_b[:, None, None]


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes, modes and bounds of the point encoder."""

    mode: str = "ray_centric"
    offsets_enabled: bool = True
    si_mode: str = "off"
    feature_dim: int = 16
    point_feature_dim: int = 32
    mlp_hidden: tuple[int, ...] = (64, 64)
    mlp_activation: str = "relu"
    image_feature_dim: int = 8
    pyramid_channels: tuple[int, ...] = ()
    deform_points: int = 4
    limits: ActivationLimits = field(default_factory=ActivationLimits)
    eps_reg: float = 1e-6
    w_min: float = 1e-4
    k_sigma: float = 3.0
    input_mean: tuple[float, ...] = DEFAULT_INPUT_MEAN
    input_std: tuple[float, ...] = DEFAULT_INPUT_STD

    def __post_init__(self):
        if self.mode not in ("ray_centric", "ego_centric"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.si_mode not in ("off", "bilinear", "deform"):
            raise ValueError(f"unknown si_mode '{self.si_mode}'")
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be >= 3 (occupancy + orientation channels)")
        if self.point_feature_dim < 1 or self.deform_points < 1:
            raise ValueError("point_feature_dim and deform_points must be positive")
        if len(self.input_mean) != 8 or len(self.input_std) != 8:
            raise ValueError("input statistics must cover the 8 point channels")
        if any(s <= 0 for s in self.input_std):
            raise ValueError("input_std entries must be positive")

    @property
    def mlp_widths(self) -> tuple[int, ...]:
        return (8, *self.mlp_hidden, self.point_feature_dim)

    @property
    def head_in(self) -> int:
        extra = self.image_feature_dim if self.si_mode != "off" else 0
        return self.point_feature_dim + extra

    @property
    def head_out(self) -> int:
        return 11 + self.feature_dim


@dataclass
class FrameInputs:
    """Per-frame context: augmentation and optional camera semantics."""

    m_aug: np.ndarray = field(default_factory=lambda: np.eye(3))
    image: np.ndarray | None = None
    pyramid: list[np.ndarray] | None = None
    projection: CameraProjection | None = None


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParameterSet:
    """Fresh parameters for a config; deformable offsets start at zero."""
    arrays: dict[str, np.ndarray] = {}
    arrays["point_mlp"] = init_mlp_flat(cfg.mlp_widths, rng)
    if cfg.si_mode != "off" and cfg.pyramid_channels:
        ctot = int(sum(cfg.pyramid_channels))
        arrays["mix_w"] = rng.normal(0.0, 1.0 / np.sqrt(ctot), size=(ctot, cfg.image_feature_dim))
        arrays["mix_b"] = np.zeros(cfg.image_feature_dim)
    if cfg.si_mode == "deform":
        arrays["deform_w"] = np.zeros((cfg.point_feature_dim, 3 * cfg.deform_points))
        arrays["deform_b"] = np.zeros(3 * cfg.deform_points)
    arrays["head_w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.head_in), size=(cfg.head_in, cfg.head_out))
    arrays["head_b"] = np.zeros(cfg.head_out)
    return ParameterSet(arrays)


class _Signature:
    """Hash over the discrete decisions a forward pass makes."""

    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)

    def add(self, label: str, arr) -> None:
        self._h.update(label.encode("utf-8"))
        self._h.update(np.ascontiguousarray(arr).tobytes())

    def digest(self) -> str:
        return self._h.hexdigest()


@dataclass
class SiCache:
    mode: str
    img: np.ndarray
    u: np.ndarray
    v: np.ndarray
    in_view: np.ndarray
    stacked: np.ndarray | None = None
    ref: BilinearCache | None = None
    ref_vals: np.ndarray | None = None
    pre_attention: np.ndarray | None = None
    alpha: np.ndarray | None = None
    pos_u: np.ndarray | None = None
    pos_v: np.ndarray | None = None
    inside: np.ndarray | None = None
    sample_vals: np.ndarray | None = None
    sample_cache: BilinearCache | None = None
    f_i: np.ndarray | None = None


@dataclass
class EncodeCache:
    points7: np.ndarray
    x: np.ndarray
    mlp: MlpCache
    f_p: np.ndarray
    si: SiCache | None
    fused: np.ndarray
    raw: np.ndarray
    act: Activation
    parts: CovarianceParts
    ego: EgoArrays
    frames: np.ndarray | None
    mean_xy: np.ndarray
    cov2: np.ndarray
    patches: list[GaussianPatch | None]


@dataclass
class EncodeResult:
    fmap: FeatureMap
    cache: EncodeCache | None
    signature: str | None


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _si_forward(
    f_p: np.ndarray,
    img: np.ndarray,
    points: np.ndarray,
    proj: CameraProjection,
    cfg: EncoderConfig,
    deform_w: np.ndarray | None,
    deform_b: np.ndarray | None,
    sig: _Signature | None,
    stacked: np.ndarray | None,
) -> tuple[np.ndarray, SiCache]:
    n = f_p.shape[0]
    u, v, in_view = proj.project(points)
    if sig is not None:
        sig.add("in_view", in_view)
    cache = SiCache(mode=cfg.si_mode, img=img, u=u, v=v, in_view=in_view, stacked=stacked)
    if cfg.si_mode == "bilinear":
        vals, ref = _bilinear_batch(img, u, v)
        f_i = vals * in_view[:, None]
        cache.ref = ref
        cache.ref_vals = vals
        if sig is not None:
            sig.add("bil_x0", ref.x0)
            sig.add("bil_y0", ref.y0)
    else:
        k = cfg.deform_points
        g = f_p @ deform_w + deform_b
        delta = g[:, : 2 * k].reshape(n, k, 2)
        pre_attention = g[:, 2 * k :]
        alpha = _softmax(pre_attention)
        pos_u = u[:, None] + delta[:, :, 0]
        pos_v = v[:, None] + delta[:, :, 1]
        inside = (
            (pos_u >= 0.0)
            & (pos_u < proj.image_width)
            & (pos_v >= 0.0)
            & (pos_v < proj.image_height)
        )
        vals, sc = _bilinear_batch(img, pos_u.ravel(), pos_v.ravel())
        vals = vals.reshape(n, k, -1) * inside[:, :, None]
        f_i = (alpha[:, :, None] * vals).sum(axis=1) * in_view[:, None]
        cache.pre_attention = pre_attention
        cache.alpha = alpha
        cache.pos_u = pos_u
        cache.pos_v = pos_v
        cache.inside = inside
        cache.sample_vals = vals
        cache.sample_cache = sc
        if sig is not None:
            sig.add("deform_inside", inside)
            sig.add("deform_x0", sc.x0)
            sig.add("deform_y0", sc.y0)
            sig.add("deform_free", np.concatenate([sc.free_x, sc.free_y]))
    cache.f_i = f_i
    return f_i, cache


def semantic_inject(f_p, img, points, proj: CameraProjection, cfg: EncoderConfig, deform_w=None, deform_b=None) -> np.ndarray:
    """Fuse point features with projected image features.

    Returns ``concat(f_p, f_i)`` where ``f_i`` is the bilinear sample at the
    projection (bilinear mode) or the attention-weighted sum over K learned
    offset samples (deform mode). Out-of-view points get zero image features.
    """
    f_p = np.asarray(f_p, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if cfg.si_mode == "off":
        raise ValueError("semantic_inject called with si_mode='off'")
    if cfg.si_mode == "deform":
        if deform_w is None or deform_b is None:
            raise ValueError("deform mode needs deform_w and deform_b")
        k = cfg.deform_points
        if deform_w.shape != (f_p.shape[1], 3 * k) or deform_b.shape != (3 * k,):
            raise ShapeMismatch(
                f"deform params {deform_w.shape}/{deform_b.shape} do not match ({f_p.shape[1]}, {3 * k})"
            )
    f_i, _ = _si_forward(f_p, img, points, proj, cfg, deform_w, deform_b, None, None)
    return np.concatenate([f_p, f_i], axis=1)


def _empty_cache(cfg: EncoderConfig) -> EncodeCache:
    zero = np.zeros((0, 0))
    return EncodeCache(
        points7=np.zeros((0, 7)),
        x=np.zeros((0, 8)),
        mlp=MlpCache(inputs=[], pre=[]),
        f_p=zero,
        si=None,
        fused=zero,
        raw=zero,
        act=activate_arrays(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, cfg.feature_dim)), cfg.limits
        ),
        parts=covariance_parts(np.zeros((0, 3)), np.zeros((0, 4))),
        ego=EgoArrays(mean=np.zeros((0, 3)), cov=np.zeros((0, 3, 3)), a=np.zeros((0, 3, 3)), p_ego=np.zeros((0, 3))),
        frames=None,
        mean_xy=np.zeros((0, 2)),
        cov2=np.zeros((0, 2, 2)),
        patches=[],
    )


def encode_full(
    points,
    params: ParameterSet,
    cfg: EncoderConfig,
    frame_inputs: FrameInputs | None,
    grid: BevGridSpec,
    *,
    threads: int = 1,
    want_cache: bool = False,
    want_signature: bool = False,
) -> EncodeResult:
    """Full encode pass, optionally returning gradient caches and the signature."""
    fi = frame_inputs or FrameInputs()
    if grid.channels != cfg.feature_dim:
        raise FeatureLengthMismatch(
            f"grid carries {grid.channels} channels but the encoder emits {cfg.feature_dim}"
        )
    points7 = points_array(points)
    n = points7.shape[0]
    sig = _Signature() if want_signature else None
    if n == 0:
        return EncodeResult(
            fmap=FeatureMap.zeros(grid),
            cache=_empty_cache(cfg) if want_cache else None,
            signature=sig.digest() if sig else None,
        )

    x = (point_channels(points7) - np.asarray(cfg.input_mean)) / np.asarray(cfg.input_std)
    mlp = MlpSpec(widths=cfg.mlp_widths, params=params.require("point_mlp", (mlp_param_count(cfg.mlp_widths),)), activation=cfg.mlp_activation)
    f_p, mlp_cache = mlp_forward(x, mlp)
    if sig is not None:
        for z in mlp_cache.pre[:-1]:
            sig.add("relu", z > 0.0)

    si_cache = None
    fused = f_p
    if cfg.si_mode != "off":
        if fi.projection is None:
            raise ValueError("semantic injection requires a camera projection")
        stacked = None
        if fi.image is not None:
            img = np.asarray(fi.image, dtype=np.float64)
        elif fi.pyramid is not None:
            stacked = _concat_upsampled(fi.pyramid)
            mix_w = params.require("mix_w", (stacked.shape[0], cfg.image_feature_dim))
            mix_b = params.require("mix_b", (cfg.image_feature_dim,))
            img = np.tensordot(mix_w.T, stacked, axes=1) + mix_b[:, None, None]
        else:
            raise ValueError("semantic injection requires an image or a feature pyramid")
        if img.shape[0] != cfg.image_feature_dim:
            raise ShapeMismatch(
                f"image has {img.shape[0]} channels, config expects {cfg.image_feature_dim}"
            )
        dw = db = None
        if cfg.si_mode == "deform":
            dw = params.require("deform_w", (cfg.point_feature_dim, 3 * cfg.deform_points))
            db = params.require("deform_b", (3 * cfg.deform_points,))
        f_i, si_cache = _si_forward(f_p, img, points7[:, 0:3], fi.projection, cfg, dw, db, sig, stacked)
        fused = np.concatenate([f_p, f_i], axis=1)

    head_w = params.require("head_w", (cfg.head_in, cfg.head_out))
    head_b = params.require("head_b", (cfg.head_out,))
    raw = fused @ head_w + head_b

    act = activate_arrays(
        raw[:, 0:3], raw[:, 3:6], raw[:, 6:10], raw[:, 10], raw[:, 11:], cfg.limits,
        offsets_enabled=cfg.offsets_enabled,
    )
    if sig is not None:
        sig.add("scale_cap", act.cap_mask)
        sig.add("quat_fallback", act.quat_fallback)

    parts = covariance_parts(act.scale, act.quat)
    frames = ray_frames(points7[:, 0:3]) if cfg.mode == "ray_centric" else None
    ego = ego_transform_arrays(
        points7[:, 0:3], act.delta_mu, parts.sigma, frames, fi.m_aug,
        eps_reg=cfg.eps_reg, ray_centric=cfg.mode == "ray_centric",
    )
    mean_xy, cov2 = marginalize_arrays(ego.mean, ego.cov)
    fmap = splat_arrays(
        mean_xy, cov2, act.opacity, act.feature, grid,
        k_sigma=cfg.k_sigma, w_min=cfg.w_min, threads=threads,
    )

    patches: list[GaussianPatch | None] = []
    if want_cache or want_signature:
        for g in range(n):
            patch = gaussian_patch(
                mean_xy[g], cov2[g], act.opacity[g], grid, k_sigma=cfg.k_sigma, w_min=cfg.w_min
            )
            patches.append(patch)
            if sig is not None:
                if patch is None:
                    sig.add("fp_none", np.array([g], dtype=np.int64))
                else:
                    rect = np.array(
                        [patch.fp.ix_lo, patch.fp.ix_hi, patch.fp.iy_lo, patch.fp.iy_hi], dtype=np.int64
                    )
                    sig.add("fp_rect", rect)
                    sig.add("fp_mask", patch.w > 0.0)

    cache = None
    if want_cache:
        cache = EncodeCache(
            points7=points7, x=x, mlp=mlp_cache, f_p=f_p, si=si_cache, fused=fused, raw=raw,
            act=act, parts=parts, ego=ego, frames=frames, mean_xy=mean_xy, cov2=cov2, patches=patches,
        )
    return EncodeResult(fmap=fmap, cache=cache, signature=sig.digest() if sig else None)


def encode(points, params: ParameterSet, cfg: EncoderConfig, frame_inputs: FrameInputs | None, grid: BevGridSpec, *, threads: int = 1) -> FeatureMap:
    """Encode radar points into a BEV feature map (see module docstring)."""
    return encode_full(points, params, cfg, frame_inputs, grid, threads=threads).fmap
