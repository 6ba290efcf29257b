"""Command line surface: data synthesis, training, rendering, checks, bench.

Exit codes form a scriptable contract: 0 success, 1 validation or
configuration error, 2 runtime failure (IO, corrupt files), 3 selftest
failure.

The run configuration is a JSON file with optional sections ``grid``,
``encoder``, ``scene``, ``sim``, ``images``, ``train`` plus a top-level
``scenes`` count; every unknown or mistyped field is reported with its
field path. Omitted fields fall back to package defaults.

Rendered images put +x at the top and +y on the left, matching a
forward/left BEV convention. Pixel values are min-max normalized per
channel; the constants are written into the image comment header.

The worker count for splatting comes from ``RAYBEV_THREADS`` when set,
else from ``--threads``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import encoder as encoder_mod
from . import geometry
from .encoder import EncoderConfig, FrameInputs, encode_full, init_params, load_points, save_points
from .errors import ConfigError, FormatError, PlacementFailure, RayBevError
from .gaussians import ActivationLimits
from .grad import (
    TrainConfig,
    TrainingScene,
    adam_init,
    AdamState,
    finite_difference_check,
    train,
)
from .params import ParameterSet, load_checkpoint, save_checkpoint
from .rasterizer import (
    BevGridSpec,
    FeatureMap,
    load_feature_map,
    pillar_scatter,
    save_feature_map,
    splat_arrays,
    splat_reference,
)
from .synthlab import (
    ImageSpec,
    SceneSpec,
    SimConfig,
    default_camera,
    load_pyramid,
    make_scene,
    save_pyramid,
)


# --- configuration ----------------------------------------------------------


class RunConfig:
    """Validated bundle of everything one run needs."""

    def __init__(self, grid, encoder, scene, sim, images, tcfg, scenes):
        self.grid: BevGridSpec = grid
        self.encoder: EncoderConfig = encoder
        self.scene: SceneSpec = scene
        self.sim: SimConfig = sim
        self.images: ImageSpec | None = images
        self.tcfg: TrainConfig = tcfg
        self.scenes: int = scenes


def _type_name(value) -> str:
    return type(value).__name__


class _Fields:
    """Typed field reader that tracks consumption to flag unknown keys."""

    def __init__(self, data: dict, path: str):
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def take(self, key: str, kind: str, default):
        self.seen.add(key)
        if key not in self.data:
            return default
        return _coerce(self.data[key], kind, f"{self.path}.{key}")

    def finish(self) -> None:
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigError(f"{self.path}.{unknown[0]}: unknown field")


def _coerce(val, kind: str, path: str):
    if kind == "float":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {_type_name(val)}")
        return float(val)
    if kind == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer, got {_type_name(val)}")
        return int(val)
    if kind == "bool":
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected true/false, got {_type_name(val)}")
        return val
    if kind == "str":
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {_type_name(val)}")
        return val
    if kind == "pair":
        if (
            not isinstance(val, list)
            or len(val) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val)
        ):
            raise ConfigError(f"{path}: expected a [lo, hi] number pair")
        return (float(val[0]), float(val[1]))
    if kind == "int_pair":
        if not isinstance(val, list) or len(val) != 2 or any(isinstance(v, bool) or not isinstance(v, int) for v in val):
            raise ConfigError(f"{path}: expected a [lo, hi] integer pair")
        return (int(val[0]), int(val[1]))
    if kind == "int_list":
        if not isinstance(val, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in val):
            raise ConfigError(f"{path}: expected a list of integers")
        return tuple(int(v) for v in val)
    raise AssertionError(f"unhandled kind {kind}")


def _section(data: dict, key: str) -> dict:
    val = data.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"{key}: expected an object, got {_type_name(val)}")
    return val


def _build_grid(data: dict) -> BevGridSpec:
    f = _Fields(_section(data, "grid"), "grid")
    kwargs = dict(
        x_min=f.take("x_min", "float", 0.0),
        x_max=f.take("x_max", "float", 51.2),
        y_min=f.take("y_min", "float", -25.6),
        y_max=f.take("y_max", "float", 25.6),
        cell=f.take("cell", "float", 0.4),
        channels=f.take("channels", "int", 8),
    )
    f.finish()
    try:
        return BevGridSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None


def _build_encoder(data: dict, images: ImageSpec | None) -> EncoderConfig:
    f = _Fields(_section(data, "encoder"), "encoder")
    kwargs = dict(
        mode=f.take("mode", "str", "ray_centric"),
        offsets_enabled=f.take("offsets_enabled", "bool", True),
        si_mode=f.take("si_mode", "str", "off"),
        feature_dim=f.take("feature_dim", "int", 8),
        point_feature_dim=f.take("point_feature_dim", "int", 24),
        mlp_hidden=f.take("mlp_hidden", "int_list", (48, 48)),
        image_feature_dim=f.take("image_feature_dim", "int", 6),
        pyramid_channels=f.take("pyramid_channels", "int_list", ()),
        deform_points=f.take("deform_points", "int", 4),
        eps_reg=f.take("eps_reg", "float", 1e-6),
        w_min=f.take("w_min", "float", 1e-4),
        k_sigma=f.take("k_sigma", "float", 3.0),
    )
    limits = ActivationLimits(
        d_max=f.take("d_max", "float", 1.5),
        s_min=f.take("s_min", "float", 0.05),
        s_max=f.take("s_max", "float", 8.0),
    )
    f.finish()
    if kwargs["si_mode"] != "off":
        if images is None:
            raise ConfigError("images: section required when encoder.si_mode is not 'off'")
        if not kwargs["pyramid_channels"]:
            kwargs["pyramid_channels"] = (1,) * images.levels
        elif len(kwargs["pyramid_channels"]) != images.levels:
            raise ConfigError("encoder.pyramid_channels: length must equal images.levels")
    try:
        return EncoderConfig(limits=limits, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"encoder: {exc}") from None


def _build_scene(data: dict) -> SceneSpec:
    f = _Fields(_section(data, "scene"), "scene")
    kwargs = dict(
        n_boxes=f.take("n_boxes", "int", 5),
        x_range=f.take("x_range", "pair", (7.0, 42.0)),
        y_range=f.take("y_range", "pair", (-24.0, 24.0)),
        min_gap=f.take("min_gap", "float", 6.0),
        yaw_mode=f.take("yaw_mode", "str", "uniform"),
        yaw_jitter=f.take("yaw_jitter", "float", 0.12),
        motion=f.take("motion", "bool", False),
        speed_range=f.take("speed_range", "pair", (3.0, 7.0)),
    )
    f.finish()
    try:
        return SceneSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from None


def _build_sim(data: dict) -> SimConfig:
    f = _Fields(_section(data, "sim"), "sim")
    kwargs = dict(
        points_per_box=f.take("points_per_box", "int_pair", (10, 16)),
        sigma_r=f.take("sigma_r", "float", 0.12),
        sigma_theta=f.take("sigma_theta", "float", 0.01),
        sigma_phi=f.take("sigma_phi", "float", 0.004),
        frames=f.take("frames", "int", 1),
        frame_dt=f.take("frame_dt", "float", 0.1),
        ego_speed=f.take("ego_speed", "float", 0.0),
        ego_yaw_rate=f.take("ego_yaw_rate", "float", 0.0),
        clutter_points=f.take("clutter_points", "int", 0),
    )
    f.finish()
    try:
        return SimConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"sim: {exc}") from None


def _build_images(data: dict) -> ImageSpec | None:
    if "images" not in data:
        return None
    f = _Fields(_section(data, "images"), "images")
    kwargs = dict(
        h0=f.take("h0", "int", 96),
        w0=f.take("w0", "int", 96),
        levels=f.take("levels", "int", 3),
        noise_std=f.take("noise_std", "float", 0.05),
    )
    f.finish()
    if kwargs["h0"] < 2 or kwargs["w0"] < 2 or kwargs["levels"] < 1:
        raise ConfigError("images: h0/w0 must be >= 2 and levels >= 1")
    return ImageSpec(**kwargs)


def _build_train(data: dict) -> TrainConfig:
    f = _Fields(_section(data, "train"), "train")
    kwargs = dict(
        steps=f.take("steps", "int", 200),
        lr=f.take("lr", "float", 1e-2),
        beta1=f.take("beta1", "float", 0.9),
        beta2=f.take("beta2", "float", 0.999),
        eps=f.take("eps", "float", 1e-8),
    )
    f.finish()
    if kwargs["steps"] < 0:
        raise ConfigError("train.steps: must be >= 0")
    if kwargs["lr"] <= 0:
        raise ConfigError("train.lr: must be positive")
    return TrainConfig(**kwargs)


_SECTIONS = ("grid", "encoder", "scene", "sim", "images", "train", "scenes")


def build_run_config(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    images = _build_images(data)
    grid = _build_grid(data)
    enc = _build_encoder(data, images)
    if grid.channels != enc.feature_dim:
        raise ConfigError(
            f"grid.channels: must equal encoder.feature_dim ({grid.channels} != {enc.feature_dim})"
        )
    scenes = _coerce(data.get("scenes", 4), "int", "scenes")
    if scenes < 1:
        raise ConfigError("scenes: must be >= 1")
    return RunConfig(
        grid=grid,
        encoder=enc,
        scene=_build_scene(data),
        sim=_build_sim(data),
        images=images,
        tcfg=_build_train(data),
        scenes=scenes,
    )


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_run_config(data)


def _load_or_default(config_path) -> RunConfig:
    if config_path is None:
        return build_run_config({})
    return load_run_config(config_path)


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get("RAYBEV_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"RAYBEV_THREADS: expected an integer, got '{env}'") from None
        if value < 1:
            raise ConfigError("RAYBEV_THREADS: must be >= 1")
        return value
    if flag is None:
        return 1
    if flag < 1:
        raise ConfigError("--threads: must be >= 1")
    return flag


# --- synth ------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _grid_dict(grid: BevGridSpec) -> dict:
    return {
        "x_min": grid.x_min,
        "x_max": grid.x_max,
        "y_min": grid.y_min,
        "y_max": grid.y_max,
        "cell": grid.cell,
        "channels": grid.channels,
    }


def cmd_synth(args) -> int:
    rc = _load_or_default(args.config)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for idx in range(rc.scenes):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, idx]))
        scene = make_scene(rc.scene, rc.sim, rc.grid, rng, images=rc.images)
        files = {
            "points": f"scene_{idx:03d}.points.bin",
            "target": f"scene_{idx:03d}.target.fmap",
        }
        save_points(os.path.join(out_dir, files["points"]), scene.points7)
        save_feature_map(os.path.join(out_dir, files["target"]), scene.target)
        if scene.pyramid is not None:
            files["pyramid"] = f"scene_{idx:03d}.pyr.bin"
            save_pyramid(os.path.join(out_dir, files["pyramid"]), scene.pyramid)
        entries.append(
            {
                "index": idx,
                "files": files,
                "sha256": {name: _sha256(os.path.join(out_dir, name)) for name in files.values()},
            }
        )
    manifest = {
        "seed": args.seed,
        "grid": _grid_dict(rc.grid),
        "images": (
            {"h0": rc.images.h0, "w0": rc.images.w0, "levels": rc.images.levels} if rc.images else None
        ),
        "scenes": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"synth: wrote {rc.scenes} scenes to {out_dir}")
    return 0


# --- train ------------------------------------------------------------------


def _read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("scenes"), list):
        raise FormatError(f"{path}: missing scene list")
    return manifest


def _load_scenes(manifest: dict, data_dir) -> list[TrainingScene]:
    img_meta = manifest.get("images")
    scenes = []
    for entry in manifest["scenes"]:
        files = entry.get("files", {})
        if "points" not in files or "target" not in files:
            raise FormatError(f"manifest scene {entry.get('index')}: missing file names")
        for name, digest in entry.get("sha256", {}).items():
            actual = _sha256(os.path.join(data_dir, name))
            if actual != digest:
                raise FormatError(
                    f"{name}: sha256 mismatch (manifest {digest[:12]}.., file {actual[:12]}..)"
                )
        points = load_points(os.path.join(data_dir, files["points"]))
        target = load_feature_map(os.path.join(data_dir, files["target"]))
        pyramid = None
        projection = None
        if "pyramid" in files:
            if not img_meta:
                raise FormatError("manifest: pyramid files present but no image metadata")
            pyramid = load_pyramid(os.path.join(data_dir, files["pyramid"]))
            projection = default_camera(int(img_meta["h0"]), int(img_meta["w0"]))
        scenes.append(
            TrainingScene(
                points7=points,
                frame_inputs=FrameInputs(pyramid=pyramid, projection=projection),
                target=target,
            )
        )
    return scenes


def _check_manifest_grid(manifest: dict, grid: BevGridSpec) -> None:
    stored = manifest.get("grid")
    if not isinstance(stored, dict):
        return
    for key, have in _grid_dict(grid).items():
        want = stored.get(key)
        if want is not None and abs(float(want) - float(have)) > 1e-9:
            raise ConfigError(f"grid.{key}: manifest value {want} != config value {have}")


def _state_to_arrays(params: ParameterSet, state: AdamState) -> dict:
    arrays = {}
    for name in params.names():
        arrays[f"param/{name}"] = params[name]
    for name in params.names():
        arrays[f"adam_m/{name}"] = state.m[name]
        arrays[f"adam_v/{name}"] = state.v[name]
    arrays["step"] = np.array(float(state.step))
    return arrays


def _arrays_to_state(arrays: dict, reference: ParameterSet) -> tuple[ParameterSet, AdamState]:
    params = {}
    m = {}
    v = {}
    for key, value in arrays.items():
        if key.startswith("param/"):
            params[key[len("param/"):]] = value
        elif key.startswith("adam_m/"):
            m[key[len("adam_m/"):]] = value
        elif key.startswith("adam_v/"):
            v[key[len("adam_v/"):]] = value
    for name in reference.names():
        for group, label in ((params, "param"), (m, "adam_m"), (v, "adam_v")):
            if name not in group:
                raise ConfigError(f"checkpoint: missing {label}/{name} for this encoder config")
            if group[name].shape != reference[name].shape:
                raise ConfigError(
                    f"checkpoint: {label}/{name} has shape {group[name].shape}, "
                    f"config expects {reference[name].shape}"
                )
    step = int(arrays.get("step", np.zeros(())))
    loaded = ParameterSet({k: params[k] for k in reference.names()})
    state = AdamState(
        m=ParameterSet({k: m[k] for k in reference.names()}),
        v=ParameterSet({k: v[k] for k in reference.names()}),
        step=step,
    )
    return loaded, state


def cmd_train(args) -> int:
    rc = _load_or_default(args.config)
    manifest = _read_manifest(args.data)
    _check_manifest_grid(manifest, rc.grid)
    scenes = _load_scenes(manifest, args.data)
    ckpt_path = args.out or os.path.join(args.data, "checkpoint.bin")
    reference = init_params(rc.encoder, np.random.default_rng(np.random.SeedSequence([args.seed, 0xA11CE])))
    resumed = os.path.exists(ckpt_path) and not args.fresh
    if resumed:
        params, state = _arrays_to_state(load_checkpoint(ckpt_path), reference)
    else:
        params, state = reference, adam_init(reference)
    result = train(params, scenes, rc.encoder, rc.grid, rc.tcfg, state=state)
    save_checkpoint(ckpt_path, _state_to_arrays(params, state))
    curve_path = os.path.splitext(ckpt_path)[0] + ".losses.txt"
    first_step = state.step - rc.tcfg.steps + 1
    with open(curve_path, "a" if resumed else "w") as fh:
        for i, loss in enumerate(result.losses):
            fh.write(f"{first_step + i} {loss:.10g}\n")
    final = float(result.losses[-1]) if rc.tcfg.steps else float("nan")
    print(
        f"train: steps={rc.tcfg.steps} total_step={state.step} final_loss={final:.6g} "
        f"wall_s={result.wall_s:.3f} checkpoint={ckpt_path}"
    )
    return 0


# --- render -----------------------------------------------------------------


def _to_image(plane: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Orient a (H, W) BEV plane with +x up / +y left and normalize to bytes."""
    img = plane.T[::-1, ::-1]
    lo = float(img.min())
    hi = float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((img - lo) * scale).astype(np.uint8)
    return pix, lo, hi


def _write_pgm(path, pix: np.ndarray, comment: str) -> None:
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        fh.write(f"# {comment}\n".encode())
        fh.write(f"{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def _write_ppm(path, rgb: np.ndarray, comments: list[str]) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n")
        for comment in comments:
            fh.write(f"# {comment}\n".encode())
        fh.write(f"{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def cmd_render(args) -> int:
    fmap = load_feature_map(args.map)
    prefix = args.out or os.path.splitext(args.map)[0]
    data = fmap.data
    planes = []
    for c in range(data.shape[0]):
        pix, lo, hi = _to_image(data[c])
        comment = f"channel={c} min={lo:.17g} max={hi:.17g}"
        _write_pgm(f"{prefix}_c{c}.pgm", pix, comment)
        planes.append((pix, comment))
        print(f"channel={c} min={lo:.9g} max={hi:.9g} nonzero={int(np.count_nonzero(data[c]))}")
    rows, cols = planes[0][0].shape
    rgb = np.zeros((rows, cols, 3), dtype=np.uint8)
    comments = []
    for c in range(min(3, len(planes))):
        rgb[:, :, c] = planes[c][0]
        comments.append(planes[c][1])
    _write_ppm(f"{prefix}.ppm", rgb, comments)
    print(f"render: wrote {len(planes)} graymaps and {prefix}.ppm")
    return 0


# --- selftest ---------------------------------------------------------------


class _Check:
    def __init__(self, name: str, max_err: float, tol: float):
        self.name = name
        self.max_err = max_err
        self.tol = tol
        self.passed = max_err <= tol


def _check_orthonormality() -> _Check:
    rng = np.random.default_rng(20260816)
    pts = rng.uniform(-60.0, 60.0, size=(2000, 3))
    pts = pts[np.linalg.norm(pts, axis=1) > 1e-3]
    frames = geometry.ray_frames(pts)
    gram = frames @ np.transpose(frames, (0, 2, 1))
    eye_err = float(np.max(np.abs(gram - np.eye(3))))
    det_err = float(np.max(np.abs(np.linalg.det(frames) - 1.0)))
    return _Check("frame_orthonormality", max(eye_err, det_err), 1e-9)


def _check_spherical() -> _Check:
    rng = np.random.default_rng(7)
    n = 200
    r = rng.uniform(1.0, 60.0, size=n)
    theta = rng.uniform(-np.pi, np.pi, size=n)
    phi = rng.uniform(-1.2, 1.2, size=n)
    pts = geometry.cartesian_from_spherical(r, theta, phi)
    frames = geometry.ray_frames(pts)
    eps = 1e-5
    worst = 0.0
    # Central differences of the spherical parameterization give the three
    # measurement directions; the frame rows must reproduce them.
    d_r = (geometry.cartesian_from_spherical(r + eps, theta, phi) - geometry.cartesian_from_spherical(r - eps, theta, phi)) / (2 * eps)
    d_t = (geometry.cartesian_from_spherical(r, theta + eps, phi) - geometry.cartesian_from_spherical(r, theta - eps, phi)) / (2 * eps)
    d_p = (geometry.cartesian_from_spherical(r, theta, phi + eps) - geometry.cartesian_from_spherical(r, theta, phi - eps)) / (2 * eps)
    rho = r * np.cos(phi)
    worst = max(worst, float(np.max(np.abs(d_r - frames[:, 0, :]))))
    worst = max(worst, float(np.max(np.abs(d_t / rho[:, None] - frames[:, 1, :]))))
    worst = max(worst, float(np.max(np.abs(d_p / r[:, None] - frames[:, 2, :]))))
    return _Check("spherical_consistency", worst, 1e-7)


def _random_gaussians(rng, n, grid: BevGridSpec):
    span_x = grid.x_max - grid.x_min
    span_y = grid.y_max - grid.y_min
    mean_xy = np.stack(
        [
            rng.uniform(grid.x_min + 0.1 * span_x, grid.x_max - 0.1 * span_x, size=n),
            rng.uniform(grid.y_min + 0.1 * span_y, grid.y_max - 0.1 * span_y, size=n),
        ],
        axis=1,
    )
    a = rng.normal(0.0, 0.6, size=(n, 2, 2))
    cov2 = a @ np.transpose(a, (0, 2, 1)) + 0.05 * np.eye(2)
    opacity = rng.uniform(0.2, 1.0, size=n)
    feature = rng.normal(size=(n, grid.channels))
    return mean_xy, cov2, opacity, feature


def _check_splat_oracle() -> _Check:
    rng = np.random.default_rng(11)
    grid = BevGridSpec(x_min=0.0, x_max=32.0, y_min=-16.0, y_max=16.0, cell=1.0, channels=4)
    mean_xy, cov2, opacity, feature = _random_gaussians(rng, 50, grid)
    tiled = splat_arrays(mean_xy, cov2, opacity, feature, grid, k_sigma=4.5)
    dense = splat_reference(mean_xy, cov2, opacity, feature, grid)
    err = float(np.max(np.abs(tiled.data - dense.data)))
    return _Check("splat_vs_dense", err, 1e-9)


def _check_gradients() -> _Check:
    rng = np.random.default_rng(3)
    cfg = EncoderConfig(feature_dim=4, point_feature_dim=8, mlp_hidden=(8,))
    grid = BevGridSpec(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0, cell=1.0, channels=4)
    points = np.zeros((12, 7))
    points[:, 0] = rng.uniform(2.0, 14.0, size=12)
    points[:, 1] = rng.uniform(-6.0, 6.0, size=12)
    points[:, 2] = rng.uniform(0.0, 2.0, size=12)
    points[:, 3] = rng.normal(5.0, 2.0, size=12)
    points[:, 4] = rng.normal(0.0, 1.0, size=12)
    target = FeatureMap(
        np.zeros((3, grid.height, grid.width)),
        BevGridSpec(grid.x_min, grid.x_max, grid.y_min, grid.y_max, grid.cell, 3),
    )
    scene = TrainingScene(points7=points, frame_inputs=FrameInputs(), target=target)
    params = init_params(cfg, rng)
    report = finite_difference_check(params, [scene], cfg, grid, n_probes=8, rng=rng)
    return _Check("gradient_fd", report.max_rel_err, 1e-4)


def _check_flip_equivariance() -> _Check:
    rng = np.random.default_rng(5)
    cfg = EncoderConfig(feature_dim=4, point_feature_dim=12, mlp_hidden=(16,))
    grid = BevGridSpec(x_min=0.0, x_max=12.8, y_min=-6.4, y_max=6.4, cell=0.2, channels=4)
    n = 40
    points = np.zeros((n, 7))
    points[:, 0] = rng.uniform(2.0, 12.0, size=n)
    points[:, 1] = rng.uniform(-6.0, 6.0, size=n)
    points[:, 2] = rng.uniform(0.0, 2.0, size=n)
    points[:, 3] = rng.normal(8.0, 3.0, size=n)
    points[:, 4] = rng.normal(0.0, 2.0, size=n)
    params = init_params(cfg, rng)
    ident = encode_full(points, params, cfg, FrameInputs(), grid).fmap.data
    flip = encode_full(
        points, params, cfg, FrameInputs(m_aug=geometry.bev_aug_matrix(flip_y=True)), grid
    ).fmap.data
    err = float(np.max(np.abs(flip - ident[:, ::-1, :])))
    return _Check("flip_equivariance", err, 1e-5)


MUTATIONS = ("frame_row3_sign",)


def _install_mutation(name: str):
    """Deliberately break one computation; returns a restore callback."""
    if name == "frame_row3_sign":
        orig = geometry.ray_frames

        def mutated(points):
            frames = orig(points).copy()
            frames[..., 2, :] = -frames[..., 2, :]
            return frames

        geometry.ray_frames = mutated
        encoder_mod.ray_frames = mutated

        def restore():
            geometry.ray_frames = orig
            encoder_mod.ray_frames = orig

        return restore
    raise ConfigError(f"--mutate: unknown mutation '{name}'")


def cmd_selftest(args) -> int:
    restore = _install_mutation(args.mutate) if args.mutate else None
    try:
        checks = [
            _check_orthonormality(),
            _check_spherical(),
            _check_splat_oracle(),
            _check_gradients(),
            _check_flip_equivariance(),
        ]
    finally:
        if restore is not None:
            restore()
    for c in checks:
        print(f"check={c.name} max_err={c.max_err:.3g} tol={c.tol:.3g} pass={'yes' if c.passed else 'NO'}")
    ok = all(c.passed for c in checks)
    print(f"selftest: {'pass' if ok else 'FAIL'} ({sum(c.passed for c in checks)}/{len(checks)})")
    return 0 if ok else 3


# --- bench ------------------------------------------------------------------


def _median_ms(fn, repeats: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def bench_encode(n_points: int, repeats: int, seed: int, threads: int, rc: RunConfig | None = None) -> dict:
    rc = rc or build_run_config({})
    rng = np.random.default_rng(seed)
    points = np.zeros((n_points, 7))
    if n_points:
        points[:, 0] = rng.uniform(3.0, 45.0, size=n_points)
        points[:, 1] = rng.uniform(-20.0, 20.0, size=n_points)
        points[:, 2] = rng.uniform(0.0, 2.5, size=n_points)
        points[:, 3] = rng.normal(8.0, 4.0, size=n_points)
        points[:, 4] = rng.normal(0.0, 2.0, size=n_points)
    params = init_params(rc.encoder, rng)
    frame = FrameInputs()
    ms = _median_ms(lambda: encode_full(points, params, rc.encoder, frame, rc.grid, threads=threads), repeats)
    return {
        "points": n_points,
        "repeats": repeats,
        "median_ms": ms,
        "points_per_s": n_points / (ms / 1e3) if ms > 0 else 0.0,
    }


def bench_splat(
    n_gaussians: int,
    side: int,
    repeats: int,
    dense_repeats: int,
    seed: int,
    threads: int,
    cell: float = 0.16,
) -> dict:
    rng = np.random.default_rng(seed)
    grid = BevGridSpec(
        x_min=0.0, x_max=side * cell, y_min=-side * cell / 2, y_max=side * cell / 2, cell=cell, channels=8
    )
    mean_xy, cov2, opacity, feature = _random_gaussians(rng, n_gaussians, grid)
    ms = _median_ms(
        lambda: splat_arrays(mean_xy, cov2, opacity, feature, grid, threads=threads), repeats
    )
    out = {
        "gaussians": n_gaussians,
        "grid_side": side,
        "repeats": repeats,
        "median_ms": ms,
        "gaussians_per_s": n_gaussians / (ms / 1e3) if ms > 0 else 0.0,
    }
    if dense_repeats > 0:
        dense_ms = _median_ms(
            lambda: splat_reference(mean_xy, cov2, opacity, feature, grid), dense_repeats, warmup=0
        )
        out["dense_median_ms"] = dense_ms
        out["speedup_vs_dense"] = dense_ms / ms if ms > 0 else 0.0
    return out


def bench_pillar(n_points: int, repeats: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    grid = build_run_config({}).grid
    pts = np.stack(
        [rng.uniform(grid.x_min, grid.x_max, size=n_points), rng.uniform(grid.y_min, grid.y_max, size=n_points)],
        axis=1,
    )
    feature = rng.normal(size=(n_points, grid.channels))
    ms = _median_ms(lambda: pillar_scatter(pts, feature, grid), repeats)
    return {
        "points": n_points,
        "repeats": repeats,
        "median_ms": ms,
        "points_per_s": n_points / (ms / 1e3) if ms > 0 else 0.0,
    }


def _print_bench(tag: str, values: dict) -> None:
    parts = [f"bench={tag}"]
    for key, val in values.items():
        if isinstance(val, float):
            parts.append(f"{key}={val:.6g}")
        else:
            parts.append(f"{key}={val}")
    print(" ".join(parts))


def cmd_bench(args) -> int:
    threads = resolve_threads(args.threads)
    rc = _load_or_default(args.config)
    _print_bench("encode", bench_encode(args.points, args.repeats, args.seed, threads, rc))
    _print_bench("encode_empty", bench_encode(0, max(3, args.repeats // 4), args.seed, threads, rc))
    _print_bench(
        "splat",
        bench_splat(args.gaussians, args.grid_side, args.repeats, args.dense_repeats, args.seed, threads),
    )
    _print_bench("pillar", bench_pillar(args.points, args.repeats, args.seed))
    return 0


# --- argument parsing -------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="raybev",
        description="Synthetic radar BEV Gaussian-splatting toolkit.",
        epilog="exit codes: 0 ok, 1 validation error, 2 runtime failure, 3 selftest failure",
    )
    sub = p.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate scenes, targets and a hashed manifest")
    synth.add_argument("--config", help="JSON run configuration")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output directory")
    synth.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="fit encoder parameters on a synthesized dataset")
    tr.add_argument("--config", help="JSON run configuration")
    tr.add_argument("--data", required=True, help="directory holding manifest.json")
    tr.add_argument("--out", help="checkpoint path (default <data>/checkpoint.bin)")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    tr.set_defaults(func=cmd_train)

    rend = sub.add_parser("render", help="export a feature map as PGM/PPM images")
    rend.add_argument("map", help="feature map file")
    rend.add_argument("--out", help="output path prefix (default: map path sans extension)")
    rend.set_defaults(func=cmd_render)

    st = sub.add_parser("selftest", help="run built-in correctness checks")
    st.add_argument("--mutate", choices=MUTATIONS, help=argparse.SUPPRESS)
    st.set_defaults(func=cmd_selftest)

    be = sub.add_parser("bench", help="measure encode/splat/pillar throughput")
    be.add_argument("--config", help="JSON run configuration")
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--threads", type=int, default=None)
    be.add_argument("--points", type=int, default=4096)
    be.add_argument("--gaussians", type=int, default=10_000)
    be.add_argument("--grid-side", type=int, default=320)
    be.add_argument("--repeats", type=int, default=20)
    be.add_argument("--dense-repeats", type=int, default=2)
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, PlacementFailure, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except RayBevError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - keep the exit-code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
