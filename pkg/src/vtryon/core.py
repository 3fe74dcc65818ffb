"""Data model, VVT-style dataset loading and the procedural toy dataset.

On-disk layout of one clip directory::

    <root>/<clip_id>/frames/00000.png    8-bit RGB
    <root>/<clip_id>/poses/00000.json    [{"x": .., "y": .., "c": ..} x 18]
    <root>/<clip_id>/parsing/00000.png   8-bit labels
    <root>/<clip_id>/model.png           clothing source image
    <root>/manifest.json

Images are float32 ``H x W x 3`` arrays in [0, 1] once loaded.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

N_JOINTS = 18
N_LABELS = 20

# OpenPose COCO-18 order
JOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)

# CIHP label ids used by the toy renderer
BACKGROUND, HAIR, UPPER_CLOTHES, PANTS, NECK, FACE, LEFT_ARM, RIGHT_ARM = 0, 2, 5, 9, 10, 13, 14, 15

DEFAULT_LABEL_SETS = {
    "clothes_arms": (UPPER_CLOTHES, LEFT_ARM, RIGHT_ARM),
    "face_neck_hair": (HAIR, NECK, FACE),
}


class DatasetNotFoundError(FileNotFoundError):
    pass


class DatasetIntegrityError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _check_image(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {pixels.shape}")
    if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    pixels.setflags(write=False)
    return pixels


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pixels", _check_image(self.pixels))
        if self.index < 0:
            raise ValueError("frame index must be non-negative")

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class ModelImage:
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _check_image(self.pixels))

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class PoseKeypoints:
    joints: np.ndarray  # (18, 3): x, y, confidence

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (N_JOINTS, 3):
            raise ShapeError(f"expected ({N_JOINTS}, 3) joints, got {joints.shape}")
        if np.any((joints[:, 2] < 0) | (joints[:, 2] > 1)):
            raise ValueError("joint confidences must lie in [0, 1]")
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)

    def check_bounds(self, height: int, width: int) -> bool:
        vis = self.joints[:, 2] > 0
        x, y = self.joints[vis, 0], self.joints[vis, 1]
        return bool(np.all((x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)))

    def shifted(self, dx: float, dy: float) -> "PoseKeypoints":
        j = self.joints.copy()
        j[:, 0] += dx
        j[:, 1] += dy
        return PoseKeypoints(j)

    def to_json(self) -> list:
        return [{"x": float(x), "y": float(y), "c": float(c)} for x, y, c in self.joints]

    @classmethod
    def from_json(cls, items) -> "PoseKeypoints":
        if len(items) != N_JOINTS:
            raise ShapeError(f"pose file has {len(items)} joints, expected {N_JOINTS}")
        return cls(np.array([[d["x"], d["y"], d["c"]] for d in items], dtype=np.float64))


@dataclass(frozen=True)
class ParsingMap:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"parsing map must be 2-D, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= N_LABELS):
            raise ValueError(f"labels must lie in [0, {N_LABELS - 1}]")
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class RegionHeatmaps:
    channels: np.ndarray  # (20, H, W) in {0, 1}

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 3 or ch.shape[0] != N_LABELS:
            raise ShapeError(f"expected ({N_LABELS}, H, W) heatmaps, got {ch.shape}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)


class RegionKind(str, enum.Enum):
    CLOTHES_ARMS = "clothes_arms"
    FACE_NECK_HAIR = "face_neck_hair"
    FOREGROUND = "foreground"
    CUSTOM = "custom"


@dataclass(frozen=True)
class RegionMask:
    mask: np.ndarray  # (H, W) in {0, 1}
    region_kind: RegionKind = RegionKind.CUSTOM

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float32)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("region mask must be binary")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class VideoClip:
    frames: tuple
    poses: tuple
    parsing: tuple
    clip_id: str = ""
    model: ModelImage | None = None
    model_pose: PoseKeypoints | None = None
    model_parsing: ParsingMap | None = None

    def __post_init__(self):
        for name in ("frames", "poses", "parsing"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not len(self.frames) == len(self.poses) == len(self.parsing):
            raise DatasetIntegrityError(
                f"clip {self.clip_id!r}: {len(self.frames)} frames, {len(self.poses)} poses, "
                f"{len(self.parsing)} parsing maps")
        if not self.frames:
            raise DatasetIntegrityError(f"clip {self.clip_id!r} is empty")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ShapeError(f"clip {self.clip_id!r} mixes resolutions {sorted(shapes)}")

    def __len__(self):
        return len(self.frames)

    @property
    def resolution(self):
        return self.frames[0].shape


# ---------------------------------------------------------------------------
# conversions


def parsing_to_heatmaps(p: ParsingMap) -> RegionHeatmaps:
    onehot = (p.labels[None] == np.arange(N_LABELS)[:, None, None]).astype(np.float32)
    return RegionHeatmaps(onehot)


def extract_region_mask(h: RegionHeatmaps, kind, label_sets=None, labels=None) -> RegionMask:
    """OR together the heatmap channels configured for ``kind``.

    ``foreground`` is every non-background channel. ``custom`` needs explicit
    ``labels``.
    """
    kind = RegionKind(kind)
    if kind is RegionKind.FOREGROUND:
        selected = tuple(range(1, N_LABELS))
    elif kind is RegionKind.CUSTOM:
        selected = tuple(labels or ())
    else:
        sets = dict(DEFAULT_LABEL_SETS)
        sets.update(label_sets or {})
        selected = tuple(sets.get(kind.value, ()))
    if not selected:
        raise ConfigurationError(f"empty label set for region kind {kind.value!r}")
    mask = h.channels[list(selected)].max(axis=0)
    return RegionMask(mask, kind)


def pose_to_heatmaps(k: PoseKeypoints, height: int, width: int, sigma: float = 2.0) -> np.ndarray:
    """Rasterize joints into ``(18, H, W)`` Gaussian bumps with peak 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    out = np.zeros((N_JOINTS, height, width), dtype=np.float32)
    for j, (x, y, c) in enumerate(k.joints):
        if c <= 0:
            continue
        out[j] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma ** 2))
    return out


# ---------------------------------------------------------------------------
# disk IO


def _frame_name(i: int, ext: str) -> str:
    return f"{i:05d}.{ext}"


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, pixels: np.ndarray):
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_parsing(path) -> ParsingMap:
    with Image.open(path) as im:
        return ParsingMap(np.asarray(im, dtype=np.int64))


def write_parsing(path, p: ParsingMap):
    Image.fromarray(p.labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_pose(path) -> PoseKeypoints:
    return PoseKeypoints.from_json(json.loads(Path(path).read_text()))


def write_pose(path, k: PoseKeypoints):
    Path(path).write_text(json.dumps(k.to_json()))


def _sorted_indexed(directory: Path, ext: str) -> list[Path]:
    files = [p for p in directory.glob(f"*.{ext}") if p.stem.isdigit()]
    return sorted(files, key=lambda p: int(p.stem))


def load_manifest(dataset_root) -> dict:
    path = Path(dataset_root) / "manifest.json"
    if not path.is_file():
        raise DatasetNotFoundError(f"no manifest.json under {dataset_root}")
    return json.loads(path.read_text())


def load_clip(dataset_root, clip_id: str) -> VideoClip:
    root = Path(dataset_root) / clip_id
    if not root.is_dir():
        raise DatasetNotFoundError(f"clip {clip_id!r} not found under {dataset_root}")
    frame_files = _sorted_indexed(root / "frames", "png")
    pose_files = _sorted_indexed(root / "poses", "json")
    parse_files = _sorted_indexed(root / "parsing", "png")
    if not len(frame_files) == len(pose_files) == len(parse_files):
        raise DatasetIntegrityError(
            f"clip {clip_id!r}: {len(frame_files)} frames, {len(pose_files)} poses, "
            f"{len(parse_files)} parsing maps")
    if [p.stem for p in frame_files] != [p.stem for p in pose_files] or \
            [p.stem for p in frame_files] != [p.stem for p in parse_files]:
        raise DatasetIntegrityError(f"clip {clip_id!r}: frame indices of annotations do not line up")
    frames = [Frame(read_image(p), int(p.stem)) for p in frame_files]
    poses = [read_pose(p) for p in pose_files]
    parsing = [read_parsing(p) for p in parse_files]
    model = model_pose = model_parsing = None
    if (root / "model.png").is_file():
        model = ModelImage(read_image(root / "model.png"))
    if (root / "model_pose.json").is_file():
        model_pose = read_pose(root / "model_pose.json")
    if (root / "model_parsing.png").is_file():
        model_parsing = read_parsing(root / "model_parsing.png")
    return VideoClip(frames, poses, parsing, clip_id, model, model_pose, model_parsing)


def load_split(dataset_root, split: str | None = None) -> list[VideoClip]:
    manifest = load_manifest(dataset_root)
    return [load_clip(dataset_root, c["id"]) for c in manifest["clips"]
            if split is None or c["split"] == split]


# ---------------------------------------------------------------------------
# toy dataset


@dataclass
class _Person:
    skin: np.ndarray
    hair: np.ndarray
    clothes: np.ndarray
    pants: np.ndarray


def _hsv_color(rng, s_range=(0.55, 0.95), v_range=(0.45, 0.9), hue=None):
    import colorsys
    h = rng.uniform() if hue is None else hue % 1.0
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(*s_range), rng.uniform(*v_range)))


def _random_person(rng, clothes_hue=None) -> _Person:
    skin = np.array([0.93, 0.76, 0.62]) * rng.uniform(0.6, 1.0)
    hair = np.array([0.25, 0.15, 0.08]) * rng.uniform(0.3, 1.6)
    pants = _hsv_color(rng, (0.2, 0.6), (0.15, 0.45))
    clothes = _hsv_color(rng, hue=clothes_hue)
    return _Person(skin, np.clip(hair, 0, 1), clothes, pants)


def _figure_joints(height, width, cx, bob, arm_r, arm_l, fore_r, fore_l, leg_r, leg_l):
    """Joint positions (x, y) for the articulated toy figure."""
    u = height / 64.0
    top = 2.0 * u + bob
    head = np.array([cx, top + 7 * u])
    neck = np.array([cx, top + 14 * u])
    sh_r, sh_l = neck + [-6 * u, 1 * u], neck + [6 * u, 1 * u]
    hip_r, hip_l = neck + [-4 * u, 20 * u], neck + [4 * u, 20 * u]

    def limb(start, angle, length):
        return start + length * np.array([math.sin(angle), math.cos(angle)])

    el_r, el_l = limb(sh_r, -arm_r, 10 * u), limb(sh_l, arm_l, 10 * u)
    wr_r, wr_l = limb(el_r, -(arm_r + fore_r), 9 * u), limb(el_l, arm_l + fore_l, 9 * u)
    kn_r, kn_l = limb(hip_r, leg_r, 12 * u), limb(hip_l, leg_l, 12 * u)
    an_r, an_l = limb(kn_r, leg_r * 0.5, 11 * u), limb(kn_l, leg_l * 0.5, 11 * u)
    nose = head + [0, 1 * u]
    eye_r, eye_l = head + [-2 * u, -1 * u], head + [2 * u, -1 * u]
    ear_r, ear_l = head + [-4.5 * u, 0], head + [4.5 * u, 0]
    pts = [nose, neck, sh_r, el_r, wr_r, sh_l, el_l, wr_l, hip_r, kn_r, an_r, hip_l, kn_l, an_l,
           eye_r, eye_l, ear_r, ear_l]
    return np.array(pts), head


def _seg_dist(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _in_polygon(px, py, poly):
    pos = np.ones(px.shape, dtype=bool)
    neg = np.ones(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        pos &= cross >= 0
        neg &= cross <= 0
    return pos | neg


def render_figure(height, width, joints, head, person: _Person, background):
    """Paint the figure back to front; returns (rgb float array, label map)."""
    u = height / 64.0
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    labels = np.zeros((height, width), dtype=np.int64)
    J = joints
    parts = []
    for hip, knee, ankle in ((8, 9, 10), (11, 12, 13)):
        m = (_seg_dist(px, py, J[hip], J[knee]) <= 2.6 * u) | (_seg_dist(px, py, J[knee], J[ankle]) <= 2.3 * u)
        parts.append((m, PANTS))
    torso = [J[2] + [-1.0 * u, -1.0 * u], J[8] + [-1.0 * u, 1.0 * u], J[11] + [1.0 * u, 1.0 * u],
             J[5] + [1.0 * u, -1.0 * u]]
    parts.append((_in_polygon(px, py, torso), UPPER_CLOTHES))
    for sh, el, wr, lab in ((2, 3, 4, RIGHT_ARM), (5, 6, 7, LEFT_ARM)):
        m = (_seg_dist(px, py, J[sh], J[el]) <= 2.0 * u) | (_seg_dist(px, py, J[el], J[wr]) <= 1.7 * u)
        parts.append((m, lab))
    parts.append((_seg_dist(px, py, J[1] + [0, 1 * u], head) <= 2.0 * u, NECK))
    face = np.hypot(px - head[0], py - head[1]) <= 5.0 * u
    parts.append((face, FACE))
    hair = (np.hypot(px - head[0], py - head[1]) <= 5.6 * u) & (py <= head[1] - 1.5 * u)
    parts.append((hair, HAIR))
    for m, lab in parts:
        labels[m] = lab
    palette = np.zeros((N_LABELS, 3))
    palette[BACKGROUND] = background
    palette[HAIR] = person.hair
    palette[UPPER_CLOTHES] = person.clothes
    palette[PANTS] = person.pants
    palette[NECK] = palette[FACE] = palette[LEFT_ARM] = palette[RIGHT_ARM] = person.skin
    rgb = palette[labels]
    # darker collar stripe keeps clothes from being a flat fill
    collar = (labels == UPPER_CLOTHES) & (py <= J[1][1] + 4.0 * u)
    rgb[collar] *= 0.75
    return rgb.astype(np.float32), labels


def _joints_to_pose(joints, height, width) -> PoseKeypoints:
    out = np.zeros((N_JOINTS, 3))
    for j, (x, y) in enumerate(joints):
        x, y = round(float(x), 3), round(float(y), 3)
        if 0 <= x <= width - 1 and 0 <= y <= height - 1:
            out[j] = (x, y, 1.0)
    return PoseKeypoints(out)


def _clip_motion(rng, n_frames, height, width):
    u = height / 64.0
    period = rng.uniform(10, 16)
    phase = rng.uniform(0, 2 * math.pi)
    sway = rng.uniform(1.0, 4.0) * u
    amp_arm = rng.uniform(0.25, 0.6)
    amp_leg = rng.uniform(0.1, 0.3)
    for t in range(n_frames):
        w = 2 * math.pi * t / period + phase
        yield dict(
            cx=width / 2 + sway * math.sin(0.5 * w),
            bob=0.8 * u * (1 + math.sin(2 * w)),
            arm_r=0.15 + amp_arm * (0.5 + 0.5 * math.sin(w)),
            arm_l=0.15 + amp_arm * (0.5 + 0.5 * math.sin(w + math.pi)),
            fore_r=0.3 * (0.5 + 0.5 * math.sin(w + 0.6)),
            fore_l=0.3 * (0.5 + 0.5 * math.sin(w + math.pi + 0.6)),
            leg_r=amp_leg * math.sin(w + math.pi),
            leg_l=amp_leg * math.sin(w),
        )


def make_toy_dataset(out, n_clips: int = 5, frames_per_clip: int = 12, height: int = 64,
                     width: int = 48, seed: int = 0, test_fraction: float = 0.2,
                     label_sets=None) -> dict:
    """Write ``n_clips`` procedurally animated clips plus ``manifest.json``.

    Each clip gets one person (skin, hair, clothes, pants colours, background)
    animated along smooth sinusoidal trajectories, and a model image of a
    different person in a rest pose wearing a clearly different clothes hue.
    Output is a pure function of the arguments.
    """
    if min(n_clips, frames_per_clip, height, width) <= 0:
        raise ValueError("sizes must be positive")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(test_fraction * n_clips))) if n_clips >= 2 else 0
    clips = []
    hues = (np.arange(n_clips) / n_clips + rng.uniform()) % 1.0
    rng.shuffle(hues)
    for c in range(n_clips):
        clip_id = f"clip_{c:03d}"
        clip_rng = np.random.default_rng([seed, c])
        person = _random_person(clip_rng, clothes_hue=hues[c])
        background = 0.75 + 0.2 * clip_rng.uniform(size=3)
        d = out / clip_id
        for sub in ("frames", "poses", "parsing"):
            (d / sub).mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(_clip_motion(clip_rng, frames_per_clip, height, width)):
            joints, head = _figure_joints(height, width, **m)
            rgb, labels = render_figure(height, width, joints, head, person, background)
            write_image(d / "frames" / _frame_name(t, "png"), rgb)
            write_parsing(d / "parsing" / _frame_name(t, "png"), ParsingMap(labels))
            write_pose(d / "poses" / _frame_name(t, "json"), _joints_to_pose(joints, height, width))
        model_person = _random_person(clip_rng, clothes_hue=hues[c] + 0.5)
        rest = dict(cx=width / 2, bob=0.0, arm_r=0.3, arm_l=0.3, fore_r=0.15, fore_l=0.15,
                    leg_r=0.0, leg_l=0.0)
        joints, head = _figure_joints(height, width, **rest)
        rgb, labels = render_figure(height, width, joints, head, model_person,
                                    0.75 + 0.2 * clip_rng.uniform(size=3))
        write_image(d / "model.png", rgb)
        write_parsing(d / "model_parsing.png", ParsingMap(labels))
        write_pose(d / "model_pose.json", _joints_to_pose(joints, height, width))
        split = "test" if c >= n_clips - n_test else "train"
        clips.append({"id": clip_id, "split": split})
    sets = {k: list(v) for k, v in DEFAULT_LABEL_SETS.items()}
    sets.update({k: list(v) for k, v in (label_sets or {}).items()})
    manifest = {
        "schema": 1,
        "clips": clips,
        "label_sets": sets,
        "height": height,
        "width": width,
        "frames_per_clip": frames_per_clip,
        "seed": seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
