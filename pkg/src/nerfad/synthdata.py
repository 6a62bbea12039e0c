"""Procedural talking-face frames with analytic ground truth.

A head is a flat-shaded sphere with two eye discs and a mouth carved by two
nested ellipsoids (lip ring and dark cavity).  The first four AU components
drive the mouth (aperture, width, lip thickness, jaw drop); the remaining AUs
are distractors that never touch a pixel.  Every frame also carries analytic
landmarks and a pseudo-audio feature that linearly embeds a three-frame window
of the driving AUs.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .rays import CameraModel

MANIFEST_VERSION = 1
N_DRIVING = 4
AU_APERTURE, AU_WIDTH, AU_LIP, AU_JAW = range(N_DRIVING)

CAMERA_DISTANCE = 4.0
FOCAL_PER_PIXEL = 1.5
SCENE_RADIUS = 1.25

BACKGROUND = (0.90, 0.92, 0.95)
EYE_COLOR = (0.10, 0.10, 0.16)
LIP_COLOR = (0.72, 0.20, 0.26)
CAVITY_COLOR = (0.28, 0.02, 0.06)

APERTURE_RANGE = (0.02, 0.20)
WIDTH_RANGE = (0.22, 0.36)
LIP_RANGE = (0.04, 0.09)
JAW_RANGE = (0.0, 0.12)
MOUTH_DEPTH = 0.3
MOUTH_BASE = -0.38
EYE_RADIUS = 0.12

# per-frame spike probability of each distractor AU, and its decay factor
DISTRACTOR_RATES = (0.04, 0.06, 0.08, 0.10)
DISTRACTOR_DECAY = 0.6


class SynthDataError(ValueError):
    pass


@dataclass(frozen=True)
class AUCode:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
            raise SynthDataError(f"AU values must lie in [0, 1], got {v}")
        object.__setattr__(self, "values", v)

    @property
    def labels(self) -> np.ndarray:
        return (self.values >= 0.5).astype(np.int64)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class IdentityParams:
    head_radius: float
    albedo: tuple[float, float, float]
    eye_x: float
    eye_y: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "IdentityParams":
        albedo = np.clip(np.array([0.86, 0.66, 0.52]) + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)
        return cls(
            head_radius=float(rng.uniform(0.92, 1.08)),
            albedo=tuple(float(c) for c in albedo),
            eye_x=float(rng.uniform(0.28, 0.40)),
            eye_y=float(rng.uniform(0.15, 0.30)),
        )

    def to_dict(self) -> dict:
        return {"head_radius": self.head_radius, "albedo": list(self.albedo),
                "eye_x": self.eye_x, "eye_y": self.eye_y}

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityParams":
        return cls(float(d["head_radius"]), tuple(float(c) for c in d["albedo"]),
                   float(d["eye_x"]), float(d["eye_y"]))


@dataclass(frozen=True)
class SceneSpec:
    identity: IdentityParams
    au: AUCode
    aperture: float  # inner half-height of the mouth
    width: float  # inner half-width
    lip: float  # lip thickness
    jaw: float  # downward mouth offset

    @property
    def radius(self) -> float:
        return self.identity.head_radius

    @property
    def mouth_center(self) -> np.ndarray:
        r = self.radius
        y = MOUTH_BASE * r - self.jaw
        return np.array([0.0, y, np.sqrt(r * r - y * y)])

    def eye_centers(self) -> np.ndarray:
        r = self.radius
        pts = []
        for sx in (-1.0, 1.0):
            x, y = sx * self.identity.eye_x * r, self.identity.eye_y * r
            pts.append([x, y, np.sqrt(r * r - x * x - y * y)])
        return np.array(pts)


def _lerp(rng_pair, t):
    lo, hi = rng_pair
    return lo + (hi - lo) * t


def build_scene(identity: IdentityParams, au: AUCode, n_au: int | None = None) -> SceneSpec:
    if not isinstance(au, AUCode):
        au = AUCode(au)
    if n_au is not None and len(au) != n_au:
        raise SynthDataError(f"AU code length {len(au)} != n_AU {n_au}")
    if len(au) < N_DRIVING:
        raise SynthDataError(f"AU code needs at least {N_DRIVING} components")
    v = au.values
    return SceneSpec(
        identity=identity,
        au=au,
        aperture=_lerp(APERTURE_RANGE, v[AU_APERTURE]),
        width=_lerp(WIDTH_RANGE, v[AU_WIDTH]),
        lip=_lerp(LIP_RANGE, v[AU_LIP]),
        jaw=_lerp(JAW_RANGE, v[AU_JAW]),
    )


def default_camera(resolution: int) -> CameraModel:
    return CameraModel.look_at(
        eye=(0.0, 0.0, CAMERA_DISTANCE), target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
        focal=FOCAL_PER_PIXEL * resolution, width=resolution, height=resolution,
    )


def scene_bounds() -> tuple[float, float]:
    """Near/far depths enclosing the scene bounding sphere from the default camera."""
    return CAMERA_DISTANCE - SCENE_RADIUS, CAMERA_DISTANCE + SCENE_RADIUS


# ---- rendering -------------------------------------------------------------

def _ellipsoid_level(scene: SceneSpec, p: np.ndarray, grow: float) -> np.ndarray:
    q = p - scene.mouth_center
    a = scene.width + grow
    b = scene.aperture + grow
    c = MOUTH_DEPTH + grow
    return (q[..., 0] / a) ** 2 + (q[..., 1] / b) ** 2 + (q[..., 2] / c) ** 2


def shade_points(scene: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Flat colour of head-surface points (..., 3)."""
    color = np.broadcast_to(np.asarray(scene.identity.albedo), p.shape).copy()
    eyes = scene.eye_centers()
    er = EYE_RADIUS * scene.radius
    for e in eyes:
        color[np.linalg.norm(p - e, axis=-1) <= er] = EYE_COLOR
    color[_ellipsoid_level(scene, p, scene.lip) <= 1.0] = LIP_COLOR
    color[_ellipsoid_level(scene, p, 0.0) <= 1.0] = CAVITY_COLOR
    return color


def trace(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Closed-form ray/sphere intersection followed by flat shading."""
    r = scene.radius
    o = np.broadcast_to(origins, dirs.shape)
    b = np.einsum("ij,ij->i", o, dirs)
    c = np.einsum("ij,ij->i", o, o) - r * r
    disc = b * b - c
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    hit = (disc > 0.0) & (t > 0.0)
    out = np.broadcast_to(np.asarray(BACKGROUND), dirs.shape).copy()
    if np.any(hit):
        p = o[hit] + t[hit, None] * dirs[hit]
        out[hit] = shade_points(scene, p)
    return out


def render_image(scene: SceneSpec, camera: CameraModel) -> np.ndarray:
    dirs = camera.all_directions()
    img = trace(scene, camera.translation[None, :], dirs)
    return img.reshape(camera.height, camera.width, 3)


def _rim_point(scene: SceneSpec, theta: float, grow: float) -> np.ndarray:
    """Point on the sphere/ellipsoid intersection curve in direction ``theta``."""
    r = scene.radius
    m = scene.mouth_center
    ax, ay = np.cos(theta) * (scene.width + grow), np.sin(theta) * (scene.aperture + grow)

    def point(s):
        x, y = s * ax, m[1] + s * ay
        return np.array([x, y, np.sqrt(max(r * r - x * x - y * y, 0.0))])

    lo, hi = 0.0, 1.0
    while _ellipsoid_level(scene, point(hi), grow) <= 1.0:
        hi *= 1.5
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _ellipsoid_level(scene, point(mid), grow) <= 1.0:
            lo = mid
        else:
            hi = mid
    return point(0.5 * (lo + hi))


@dataclass(frozen=True)
class LandmarkLayout:
    """Index layout: outer lip ring, 4 inner lip points, 2 eyes, chin, head top."""

    n_landmarks: int = 20

    def __post_init__(self):
        if self.n_outer < 4:
            raise SynthDataError("need at least 12 landmarks (4 outer lip points)")

    @property
    def n_outer(self) -> int:
        return self.n_landmarks - 8

    @property
    def lip_subset(self) -> list[int]:
        return list(range(self.n_outer + 4))

    @property
    def outer_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_outer) / self.n_outer

    def outer_index(self, angle: float) -> int:
        diff = np.abs((self.outer_angles - angle + np.pi) % (2.0 * np.pi) - np.pi)
        return int(np.argmin(diff))

    @property
    def mouth_top(self) -> int:
        return self.outer_index(np.pi / 2)

    @property
    def mouth_bottom(self) -> int:
        return self.outer_index(3 * np.pi / 2)

    @property
    def mouth_corners(self) -> tuple[int, int]:
        return self.outer_index(0.0), self.outer_index(np.pi)


def landmarks_3d(scene: SceneSpec, layout: LandmarkLayout) -> np.ndarray:
    pts = [_rim_point(scene, th, scene.lip) for th in layout.outer_angles]
    pts += [_rim_point(scene, th, 0.0) for th in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)]
    pts += list(scene.eye_centers())
    r = scene.radius
    chin_y = -0.8 * r - 0.5 * scene.jaw
    pts.append([0.0, chin_y, np.sqrt(r * r - chin_y**2)])
    top_y = 0.85 * r
    pts.append([0.0, top_y, np.sqrt(r * r - top_y**2)])
    return np.array(pts)


@dataclass
class ReferenceFrame:
    image: np.ndarray
    camera: CameraModel
    landmarks: np.ndarray
    au: AUCode
    audio_feature: np.ndarray | None = None


def render_reference(scene: SceneSpec, camera: CameraModel, resolution: int | None = None,
                     layout: LandmarkLayout | None = None) -> ReferenceFrame:
    if resolution is not None and resolution != camera.width:
        camera = camera.scaled(resolution / camera.width)
    if camera.width < 8 or camera.height < 8:
        raise SynthDataError("resolution must be at least 8x8")
    layout = layout or LandmarkLayout()
    image = render_image(scene, camera)
    lm = camera.project(landmarks_3d(scene, layout))
    return ReferenceFrame(image=image, camera=camera, landmarks=lm, au=scene.au)


# ---- audio ---------------------------------------------------------------

def audio_embedding(seed: int, dim: int = 16, window: int = 3) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA0D10]))
    return rng.normal(0.0, 0.5, size=(dim, window * N_DRIVING))


def synth_audio_feature(trajectory: np.ndarray, t: int, seed: int = 0, noise: float = 0.02,
                        dim: int = 16, stream: int = 0) -> np.ndarray:
    """Seeded linear embedding of driving AUs at frames t-1, t, t+1 plus noise."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] == 0:
        raise SynthDataError("trajectory must be a nonempty (frames, n_AU) array")
    n = traj.shape[0]
    if not 0 <= t < n:
        raise SynthDataError(f"frame {t} outside trajectory of length {n}")
    idx = np.clip([t - 1, t, t + 1], 0, n - 1)
    window = (traj[idx, :N_DRIVING] - 0.5) * 2.0
    feat = audio_embedding(seed, dim) @ window.reshape(-1)
    if noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA0D11, int(stream), int(t)]))
        feat = feat + noise * rng.standard_normal(dim)
    return feat


# ---- trajectories ----------------------------------------------------------

def _reflect(z, lo, hi):
    span = hi - lo
    z = (z - lo) % (2 * span)
    return lo + np.where(z > span, 2 * span - z, z)


def au_trajectory(n_frames: int, n_au: int, rng: np.random.Generator, step: float = 0.2) -> np.ndarray:
    """Smooth random-walk driving AUs that saturate at 0 and 1, plus sparse
    distractors built from decaying random spikes with per-AU firing rates."""
    out = np.zeros((n_frames, n_au))
    if n_frames == 0:
        return out
    n_dis = n_au - N_DRIVING
    rates = np.array([DISTRACTOR_RATES[i % len(DISTRACTOR_RATES)] for i in range(n_dis)])
    zd = rng.uniform(-0.25, 1.25, N_DRIVING)
    zx = np.zeros(n_dis)
    vd = np.zeros(N_DRIVING)
    for t in range(n_frames):
        out[t, :N_DRIVING] = np.clip(zd, 0.0, 1.0)
        out[t, N_DRIVING:] = np.clip(zx, 0.0, 1.0)
        vd = 0.5 * vd + rng.normal(0.0, step, N_DRIVING)
        zd = _reflect(zd + vd, -0.25, 1.25)
        fire = rng.random(n_dis) < rates
        zx = DISTRACTOR_DECAY * zx + fire * rng.uniform(0.6, 1.0, n_dis)
    return out


# ---- dataset ----------------------------------------------------------------

@dataclass
class DataConfig:
    n_frames: int = 72
    resolution: int = 32
    n_identities: int = 1
    n_au: int = 8
    n_landmarks: int = 20
    audio_dim: int = 16
    audio_noise: float = 0.02
    crop_size: int = 32
    au_step: float = 0.2

    def validate(self) -> None:
        if self.n_frames < 0 or self.n_identities < 1:
            raise SynthDataError("need n_frames >= 0 and n_identities >= 1")
        if self.n_au < N_DRIVING:
            raise SynthDataError(f"n_au must be at least {N_DRIVING}")
        if self.resolution < 8:
            raise SynthDataError("resolution must be at least 8")
        if self.crop_size > self.resolution or self.crop_size % 4:
            raise SynthDataError("crop_size must be a multiple of 4 no larger than the resolution")
        LandmarkLayout(self.n_landmarks)


def crop_rect_for(resolution: int, crop_size: int) -> list[int]:
    """Square face crop centred on the head, as ``[x0, y0, w, h]``."""
    x0 = (resolution - crop_size) // 2
    return [x0, x0, crop_size, crop_size]


def _mouth_rect(landmarks: np.ndarray, layout: LandmarkLayout, resolution: int) -> list[int]:
    lip = landmarks[: layout.n_outer]
    x0 = int(np.floor(lip[:, 0].min()))
    y0 = int(np.floor(lip[:, 1].min()))
    x1 = int(np.ceil(lip[:, 0].max()))
    y1 = int(np.ceil(lip[:, 1].max()))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, resolution), min(y1, resolution)
    return [x0, y0, x1 - x0, y1 - y0]


def _frame_identities(n_frames: int, n_identities: int) -> np.ndarray:
    per = int(np.ceil(n_frames / n_identities)) if n_frames else 1
    return np.minimum(np.arange(n_frames) // per, n_identities - 1)


def _num(x) -> list:
    return [float(v) for v in np.asarray(x, dtype=np.float64).reshape(-1)]


def generate_dataset(config: DataConfig, seed: int, out_dir: str | os.PathLike) -> dict:
    """Render frames and write ``manifest.json`` plus ``frames/*.png``."""
    config.validate()
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthDataError(f"cannot write dataset to {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise SynthDataError(f"cannot write dataset to {out}")

    root = np.random.SeedSequence(int(seed))
    id_seq, traj_seq = root.spawn(2)
    id_rng = np.random.default_rng(id_seq)
    identities = [IdentityParams.sample(id_rng) for _ in range(config.n_identities)]
    layout = LandmarkLayout(config.n_landmarks)
    camera = default_camera(config.resolution)
    near, far = scene_bounds()
    owner = _frame_identities(config.n_frames, config.n_identities)

    trajectories = {}
    for k, tseq in enumerate(traj_seq.spawn(config.n_identities)):
        count = int(np.sum(owner == k))
        trajectories[k] = au_trajectory(count, config.n_au, np.random.default_rng(tseq), config.au_step)

    frames = []
    local = np.zeros(config.n_identities, dtype=int)
    for i in range(config.n_frames):
        k = int(owner[i])
        t = int(local[k])
        local[k] += 1
        traj = trajectories[k]
        au = AUCode(traj[t])
        scene = build_scene(identities[k], au, config.n_au)
        ref = render_reference(scene, camera, layout=layout)
        audio = synth_audio_feature(traj, t, seed=seed, noise=config.audio_noise,
                                    dim=config.audio_dim, stream=k)
        rel = f"frames/{i:05d}.png"
        save_png(out / rel, ref.image)
        frames.append({
            "index": i,
            "identity": k,
            "time": t,
            "image": rel,
            "camera": {"intrinsics": [camera.focal, camera.cx, camera.cy],
                       "extrinsics": _num(camera.extrinsics)},
            "au": _num(au.values),
            "landmarks": [_num(p) for p in ref.landmarks],
            "audio": _num(audio),
            "crop_rect": crop_rect_for(config.resolution, config.crop_size),
            "mouth_rect": _mouth_rect(ref.landmarks, layout, config.resolution),
        })

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "config": asdict(config),
        "resolution": [config.resolution, config.resolution],
        "n_au": config.n_au,
        "n_driving_au": N_DRIVING,
        "n_landmarks": config.n_landmarks,
        "lip_subset": layout.lip_subset,
        "near": near,
        "far": far,
        "background": list(BACKGROUND),
        "palette": {"lip": list(LIP_COLOR), "cavity": list(CAVITY_COLOR)},
        "identities": [p.to_dict() for p in identities],
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def save_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class Dataset:
    root: Path
    manifest: dict
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    au: np.ndarray  # (N, n_au)
    landmarks: np.ndarray  # (N, n_lm, 2)
    audio: np.ndarray  # (N, audio_dim)
    identity: np.ndarray  # (N,)
    camera: CameraModel
    near: float
    far: float
    background: np.ndarray
    crop_rects: np.ndarray  # (N, 4)
    mouth_rects: np.ndarray  # (N, 4)
    lip_subset: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_au(self) -> int:
        return int(self.manifest["n_au"])

    @property
    def n_driving(self) -> int:
        return int(self.manifest.get("n_driving_au", N_DRIVING))

    def crops(self, idx=None) -> np.ndarray:
        """Face crops as (N, 3, h, w) arrays."""
        idx = np.arange(len(self)) if idx is None else np.atleast_1d(idx)
        return np.stack([crop(self.images[i], self.crop_rects[i]) for i in idx])

    def reference_index(self, identity: int) -> int:
        """First frame of an identity: the source of its identity conditions."""
        return int(np.flatnonzero(self.identity == identity)[0])


def crop(image: np.ndarray, rect) -> np.ndarray:
    """(H, W, 3) frame -> (3, h, w) crop."""
    x0, y0, w, h = (int(v) for v in rect)
    if x0 < 0 or y0 < 0 or y0 + h > image.shape[0] or x0 + w > image.shape[1]:
        raise SynthDataError(f"crop rect {rect} outside frame {image.shape[:2]}")
    return np.ascontiguousarray(image[y0 : y0 + h, x0 : x0 + w].transpose(2, 0, 1))


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise SynthDataError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise SynthDataError(f"unsupported manifest version {manifest.get('version')}")
    frames = manifest["frames"]
    h, w = manifest["resolution"]
    n_au = manifest["n_au"]
    n_lm = manifest["n_landmarks"]
    if frames:
        images = np.stack([load_png(root / f["image"]) for f in frames])
        intr = frames[0]["camera"]["intrinsics"]
        ext = np.array(frames[0]["camera"]["extrinsics"]).reshape(3, 4)
    else:
        images = np.zeros((0, h, w, 3))
        cam0 = default_camera(w)
        intr = [cam0.focal, cam0.cx, cam0.cy]
        ext = cam0.extrinsics
    camera = CameraModel(focal=intr[0], cx=intr[1], cy=intr[2], rotation=ext[:, :3],
                         translation=ext[:, 3], width=w, height=h)
    return Dataset(
        root=root,
        manifest=manifest,
        images=images,
        au=np.array([f["au"] for f in frames]).reshape(-1, n_au),
        landmarks=np.array([f["landmarks"] for f in frames]).reshape(-1, n_lm, 2),
        audio=np.array([f["audio"] for f in frames]).reshape(-1, manifest["config"]["audio_dim"]),
        identity=np.array([f["identity"] for f in frames], dtype=int),
        camera=camera,
        near=float(manifest["near"]),
        far=float(manifest["far"]),
        background=np.array(manifest["background"]),
        crop_rects=np.array([f["crop_rect"] for f in frames], dtype=int).reshape(-1, 4),
        mouth_rects=np.array([f["mouth_rect"] for f in frames], dtype=int).reshape(-1, 4),
        lip_subset=list(manifest["lip_subset"]),
    )


def occurrence_rates(labels: np.ndarray, floor: float = 0.01) -> np.ndarray:
    """Per-AU positive rate of binarised labels, floored to keep weights finite."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        return np.ones(labels.shape[-1] if labels.ndim == 2 else 0)
    return np.maximum(labels.mean(axis=0), floor)
