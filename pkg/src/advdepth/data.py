"""Stereo datasets: on-disk KITTI/CityScapes layouts, augmentation, synthetic scenes.

On-disk layout (shared by every dataset kind)::

    <root>/images/<id>_L.png
    <root>/images/<id>_R.png
    <root>/depth/<id>.png      optional, uint16, metres = raw / 256, 0 = missing
    <root>/depth/<id>.npy      optional float depth, preferred over the PNG
    <root>/splits/{train,val,test}.txt
    <root>/rig.json            optional {"focal_px": .., "baseline_m": ..}
"""

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from advdepth.geometry import D_MAX, CameraRig

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
KITTI_SIZE = (256, 512)
DEFAULT_RIG = {"focal_px": 720.0, "baseline_m": 0.54}
DEPTH_PNG_SCALE = 256.0
CITYSCAPES_TOP, CITYSCAPES_BOTTOM = 50, 224

_ID_RE = re.compile(r"^[A-Za-z0-9_\-./]+$")


class ManifestError(ValueError):
    pass


class DatasetIOError(OSError):
    pass


@dataclass
class StereoSample:
    left: torch.Tensor
    right: torch.Tensor
    rig: CameraRig
    id: str
    gt_depth: np.ndarray = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"{self.id}: left {tuple(self.left.shape)} != right {tuple(self.right.shape)}")

    def replace(self, **kw):
        d = dict(left=self.left, right=self.right, rig=self.rig, id=self.id,
                 gt_depth=self.gt_depth, extras=dict(self.extras))
        d.update(kw)
        return StereoSample(**d)


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list

    def __post_init__(self):
        seen = {}
        for name in SPLITS:
            for sid in getattr(self, name):
                if sid in seen:
                    raise ManifestError(f"sample id {sid!r} appears in both {seen[sid]} and {name}")
                seen[sid] = name

    def counts(self):
        return {name: len(getattr(self, name)) for name in SPLITS}

    def ids(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)


def parse_split_file(path):
    ids = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if not _ID_RE.match(text) or ".." in text.split("/"):
                raise ManifestError(f"{path}:{lineno}: malformed sample id {text!r}")
            ids.append(text)
    return ids


def read_manifest(root):
    root = Path(root)
    lists = {}
    for name in SPLITS:
        path = root / "splits" / f"{name}.txt"
        lists[name] = parse_split_file(path) if path.exists() else []
    manifest = SplitManifest(**lists)
    log.info("manifest %s: %s", root, manifest.counts())
    return manifest


def write_manifest(root, manifest):
    split_dir = Path(root) / "splits"
    split_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        (split_dir / f"{name}.txt").write_text("".join(f"{i}\n" for i in manifest.ids(name)), encoding="utf-8")


def read_rig(root, width_px):
    path = Path(root) / "rig.json"
    params = dict(DEFAULT_RIG)
    if path.exists():
        params.update(json.loads(path.read_text(encoding="utf-8")))
    return CameraRig(float(params["focal_px"]), float(params["baseline_m"]), int(width_px))


def _open_image(path, sid):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DatasetIOError(f"sample {sid!r}: missing image file {path}") from None


def read_depth(root, sid):
    """Ground-truth depth in metres (0 = missing), or ``None`` if absent."""
    npy = Path(root) / "depth" / f"{sid}.npy"
    if npy.exists():
        return np.load(npy).astype(np.float64)
    png = Path(root) / "depth" / f"{sid}.png"
    if png.exists():
        with Image.open(png) as im:
            raw = np.asarray(im, dtype=np.float64)
        return raw / DEPTH_PNG_SCALE
    return None


def write_depth_png(path, depth):
    raw = np.clip(np.round(np.asarray(depth) * DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def to_tensor(hwc):
    return torch.from_numpy(np.ascontiguousarray(hwc.transpose(2, 0, 1))).float()


def to_uint8(chw):
    arr = chw.detach().cpu().clamp(0, 1).numpy().transpose(1, 2, 0)
    return (arr * 255.0 + 0.5).astype(np.uint8)


def resize(image, size):
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    out = F.interpolate(image.unsqueeze(0), size=tuple(size), mode="area" if image.shape[-1] > size[1] else "bilinear")
    return out.squeeze(0).clamp(0, 1)


def cityscapes_crop(image_hwc):
    """Drop the top 50 / bottom 224 rows, then crop the sides back to 2:1."""
    h, w = image_hwc.shape[:2]
    body = image_hwc[CITYSCAPES_TOP:h - CITYSCAPES_BOTTOM]
    rows = body.shape[0]
    side = (w - 2 * rows) // 2
    if side < 0:
        raise ValueError(f"frame {w}x{h} too narrow to restore a 2:1 ratio")
    return body[:, side:side + 2 * rows]


def _load_folder(root, manifest, split, size, with_depth, crop=None):
    root = Path(root)
    with_depth = split != "train" if with_depth is None else with_depth
    for sid in manifest.ids(split):
        left = _open_image(root / "images" / f"{sid}_L.png", sid)
        right = _open_image(root / "images" / f"{sid}_R.png", sid)
        depth = read_depth(root, sid) if with_depth else None
        if crop is not None:
            left, right = crop(left), crop(right)
            if depth is not None:
                depth = crop(depth)
        native_w = depth.shape[1] if depth is not None else left.shape[1]
        rig = read_rig(root, native_w)
        l_t, r_t = to_tensor(left), to_tensor(right)
        if size is not None:
            l_t, r_t = resize(l_t, size), resize(r_t, size)
        yield StereoSample(l_t, r_t, rig, sid, depth)


def load_kitti(root, manifest=None, split="train", size=KITTI_SIZE, with_depth=None):
    """Stream samples of one split, resized to ``size``.

    Ground truth stays at native resolution and is skipped for the training
    split unless ``with_depth`` says otherwise.
    """
    manifest = read_manifest(root) if manifest is None else manifest
    yield from _load_folder(root, manifest, split, size, with_depth)


def load_cityscapes(root, manifest=None, split="train", size=KITTI_SIZE, with_depth=None):
    manifest = read_manifest(root) if manifest is None else manifest
    yield from _load_folder(root, manifest, split, size, with_depth, crop=cityscapes_crop)


def load_split(kind, root, split, size, with_depth=None):
    if kind == "cityscapes":
        return load_cityscapes(root, None, split, size, with_depth)
    return load_kitti(root, None, split, size, with_depth)


# --- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    gamma: float = 1.0
    brightness: float = 1.0
    color: tuple = (1.0, 1.0, 1.0)
    flip: bool = False


def sample_augment_params(rng_seed):
    rng = np.random.default_rng(rng_seed)
    coins = rng.random(4)
    gamma = rng.uniform(0.8, 1.2)
    brightness = rng.uniform(0.5, 2.0)
    color = tuple(rng.uniform(0.8, 1.2, 3))
    return AugmentParams(
        gamma=float(gamma) if coins[0] < 0.5 else 1.0,
        brightness=float(brightness) if coins[1] < 0.5 else 1.0,
        color=tuple(float(c) for c in color) if coins[2] < 0.5 else (1.0, 1.0, 1.0),
        flip=bool(coins[3] < 0.5),
    )


def apply_augment(sample, params):
    def photometric(img):
        out = img
        if params.gamma != 1.0:
            out = out ** params.gamma
        if params.brightness != 1.0:
            out = out * params.brightness
        if params.color != (1.0, 1.0, 1.0):
            out = out * torch.tensor(params.color, dtype=out.dtype).view(-1, 1, 1)
        return out.clamp(0, 1)

    left, right = photometric(sample.left), photometric(sample.right)
    if params.flip:
        # a mirrored right view is a valid left view and vice versa
        left, right = torch.flip(right, dims=[-1]), torch.flip(left, dims=[-1])
    return sample.replace(left=left, right=right)


def augment(sample, rng_seed):
    return apply_augment(sample, sample_augment_params(rng_seed))


def sample_seed(seed, epoch, index):
    return np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0]


def epoch_order(n, seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 7919])).permutation(n)


class StereoDataset(torch.utils.data.Dataset):
    """Indexable training view over a list of samples with seeded augmentation."""

    def __init__(self, samples, do_augment=False, seed=0):
        self.samples = list(samples)
        self.do_augment = do_augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        sample = self.samples[i]
        if self.do_augment:
            sample = augment(sample, sample_seed(self.seed, self.epoch, i))
        return sample.left, sample.right

    def batches(self, batch_size, shuffle=True):
        n = len(self)
        order = epoch_order(n, self.seed, self.epoch) if shuffle else np.arange(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            items = [self[int(i)] for i in idx]
            yield (torch.stack([a for a, _ in items]), torch.stack([b for _, b in items]))


# --- synthetic scenes -------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Layered fronto-parallel scene: a far textured wall plus rectangles.

    Objects stand on a ground plane, so nearer ones are larger and lower in
    the frame; pixel disparities are integers so both views render exactly.
    """

    height: int = 64
    width: int = 128
    focal_px: float = 100.0
    baseline_m: float = 1.0
    depth_range: tuple = (4.5, 7.0)
    num_layers: int = 2
    object_size_m: tuple = (0.8, 1.0)
    camera_height_m: float = 0.6
    horizon: float = 0.3
    object_contrast: float = 0.03
    texture_cells: tuple = (8, 16, 32)

    def __post_init__(self):
        self.depth_range = tuple(self.depth_range)
        self.object_size_m = tuple(self.object_size_m)
        self.texture_cells = tuple(self.texture_cells)
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth_range must satisfy 0 < near < far")
        if self.max_disparity() > D_MAX:
            raise ValueError(
                f"near depth {self.depth_range[0]} m gives disparity {self.max_disparity():.3f} > d_max {D_MAX}"
            )

    @property
    def rig(self):
        return CameraRig(self.focal_px, self.baseline_m, self.width)

    def pixel_disparity(self, depth):
        return self.focal_px * self.baseline_m / depth

    def max_disparity(self):
        return int(np.floor(self.pixel_disparity(self.depth_range[0]))) / self.width


def _noise_texture(rng, h, w, base, contrast, cells=(4, 8, 16)):
    tex = np.zeros((3, h, w), dtype=np.float64)
    weights = np.array([0.5, 0.3, 0.2])
    for wgt, cell in zip(weights, cells):
        gh, gw = h // cell + 2, w // cell + 2
        grid = torch.from_numpy(rng.random((1, 3, gh, gw)))
        up = F.interpolate(grid, size=(gh * cell, gw * cell), mode="bilinear", align_corners=False)
        tex += wgt * up[0, :, :h, :w].numpy()
    tex = base.reshape(3, 1, 1) + contrast * (tex - 0.5) * 2
    return np.clip(tex, 0.0, 1.0)


def generate_synthetic_scene(spec, rng_seed, sample_id=None):
    rng = np.random.default_rng(rng_seed)
    h, w = spec.height, spec.width
    near_px = int(np.floor(spec.pixel_disparity(spec.depth_range[0])))
    far_px = max(1, int(np.ceil(spec.pixel_disparity(spec.depth_range[1]))))
    pad = near_px + 1

    # layer 0 is the wall at the far end of the range, the rest are objects
    bg_px = far_px
    layers = [{"px": bg_px, "x0": 0, "y0": 0, "w": w + pad, "h": h,
               "tex": _noise_texture(rng, h, w + pad, rng.uniform(0.3, 0.7, 3), 0.45, spec.texture_cells)}]
    obj_px = sorted(rng.integers(bg_px + 2, near_px + 1, size=spec.num_layers).tolist())
    for px in obj_px:
        z = spec.focal_px * spec.baseline_m / px
        ow = max(3, int(round(spec.focal_px * spec.object_size_m[0] / z)))
        oh = max(3, int(round(spec.focal_px * spec.object_size_m[1] / z)))
        bottom = int(round(spec.horizon * h + spec.focal_px * spec.camera_height_m / z))
        bottom = min(h, bottom)
        y0 = max(0, bottom - oh)
        x0 = int(rng.integers(-ow // 3, w - 2 * ow // 3))
        layers.append({"px": px, "x0": x0, "y0": y0, "w": ow, "h": bottom - y0,
                       "tex": _noise_texture(rng, bottom - y0, ow, rng.uniform(0.15, 0.85, 3),
                                             spec.object_contrast, tuple(max(2, c // 2) for c in spec.texture_cells))})

    left = np.zeros((3, h, w))
    right = np.zeros((3, h, w))
    vis_l = np.zeros((h, w), dtype=np.int64)
    vis_r = np.zeros((h, w), dtype=np.int64)
    cols = np.arange(w)
    # far-to-near painter's order (obj_px is sorted ascending)
    for k, layer in enumerate(layers):
        rows = slice(layer["y0"], layer["y0"] + layer["h"])
        for view, vis, shift in ((left, vis_l, 0), (right, vis_r, layer["px"])):
            u = cols + shift - layer["x0"]
            inside = (u >= 0) & (u < layer["w"])
            if k == 0:
                inside[:] = True
            if not inside.any():
                continue
            view[:, rows, inside] = layer["tex"][:, :, u[inside]]
            vis[rows, inside] = k

    px = np.array([layer["px"] for layer in layers])
    disp_l = px[vis_l] / w
    disp_r = px[vis_r] / w
    # a left pixel is matched iff the right view shows the same layer at j - px
    src = cols[None, :] - px[vis_l]
    in_view = src >= 0
    same = np.zeros_like(in_view)
    rr, cc = np.nonzero(in_view)
    same[rr, cc] = vis_r[rr, src[rr, cc]] == vis_l[rr, cc]
    occluded = in_view & ~same
    border = ~in_view

    depth = spec.focal_px * spec.baseline_m / (disp_l * w)
    sid = sample_id if sample_id is not None else f"synth_{int(rng_seed):06d}"
    return StereoSample(
        left=torch.from_numpy(left).float(),
        right=torch.from_numpy(right).float(),
        rig=spec.rig,
        id=sid,
        gt_depth=depth,
        extras={
            "disp_left": torch.from_numpy(disp_l).float(),
            "disp_right": torch.from_numpy(disp_r).float(),
            "occluded": torch.from_numpy(occluded),
            "border": torch.from_numpy(border),
        },
    )


def synthetic_split(spec, n, seed, prefix):
    base = np.random.SeedSequence([seed, zlib.crc32(prefix.encode())])
    seeds = base.generate_state(n)
    return [generate_synthetic_scene(spec, int(s), f"{prefix}_{i:05d}") for i, s in enumerate(seeds)]


def write_dataset(root, splits, rig=None):
    """Write ``{split: [StereoSample]}`` in the on-disk layout above."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for samples in splits.values():
        for s in samples:
            Image.fromarray(to_uint8(s.left)).save(root / "images" / f"{s.id}_L.png")
            Image.fromarray(to_uint8(s.right)).save(root / "images" / f"{s.id}_R.png")
            if s.gt_depth is not None:
                write_depth_png(root / "depth" / f"{s.id}.png", s.gt_depth)
                np.save(root / "depth" / f"{s.id}.npy", np.asarray(s.gt_depth, dtype=np.float64))
    manifest = SplitManifest(**{name: [s.id for s in splits.get(name, [])] for name in SPLITS})
    write_manifest(root, manifest)
    rig = rig or next(s.rig for samples in splits.values() for s in samples)
    (root / "rig.json").write_text(json.dumps({"focal_px": rig.focal_px, "baseline_m": rig.baseline_m}),
                                   encoding="utf-8")
    return manifest
