"""Synthetic videos of colored shapes with exact masks, flow fields and sentences.

Every video is derived deterministically from (master seed, video id) via a
keyed hash, so generation is reproducible file-for-file and train/test splits
draw from disjoint random streams.
"""

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InputError
from ..videoenc import VideoClip
from . import formats

SHAPES = ("square", "circle", "triangle")
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
ACTIONS = (
    "moving left", "moving right", "moving up", "moving down",
    "growing", "shrinking", "standing still",
)
BORDER_MARGIN = 2
MAX_ACTORS = 3
SENTENCE_STYLES = ("color-shape-action", "shape-action")

_PLACEMENT_TRIES = 200
_VIDEO_TRIES = 50


@dataclass(frozen=True)
class ShapeWorldSpec:
    canvas: int = 64
    frames: int = 4
    shapes: tuple = SHAPES
    colors: tuple = tuple(COLORS)
    actions: tuple = ACTIONS
    actors_min: int = 1
    actors_max: int = 3
    speed: int = 2
    growth: int = 1
    seed: int = 0
    sentence_style: str = "color-shape-action"

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.canvas < 12:
            raise ConfigError(f"canvas {self.canvas} is too small for margins and shapes")
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        if not (1 <= self.actors_min <= self.actors_max <= MAX_ACTORS):
            raise ConfigError(
                f"actor counts must satisfy 1 <= min <= max <= {MAX_ACTORS}, "
                f"got {self.actors_min}..{self.actors_max}"
            )
        for name, pool in (("shapes", SHAPES), ("colors", tuple(COLORS)), ("actions", ACTIONS)):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"{name} must not be empty")
            unknown = [v for v in values if v not in pool]
            if unknown:
                raise ConfigError(f"unknown {name}: {unknown}")
        if self.speed < 1 or self.growth < 1:
            raise ConfigError("speed and growth must be at least 1 px/frame")
        if self.sentence_style not in SENTENCE_STYLES:
            raise ConfigError(f"sentence_style must be one of {SENTENCE_STYLES}")
        if len(self.combos()) < self.actors_max:
            raise ConfigError(
                f"only {len(self.combos())} distinct sentences available for up to "
                f"{self.actors_max} actors per video"
            )

    def combos(self):
        """All attribute combinations that give distinct sentences."""
        if self.sentence_style == "shape-action":
            return [(None, s, a) for s in self.shapes for a in self.actions]
        return [(c, s, a) for c in self.colors for s in self.shapes for a in self.actions]

    def max_flow(self):
        """Largest per-pixel displacement magnitude the generator can emit."""
        bound = 0.0
        for action in self.actions:
            if action.startswith("moving"):
                bound = max(bound, float(self.speed))
            elif action in ("growing", "shrinking"):
                bound = max(bound, self.growth * np.sqrt(2.0))
        return bound


@dataclass
class AnnotatedSample:
    """One referring expression over one video: clip, flow, sentence, center mask."""

    clip: VideoClip
    flow: VideoClip
    sentence: str
    gt_mask: np.ndarray
    video_id: str
    instance_id: str


def make_sentence(color, shape, action, style):
    if style == "shape-action":
        return f"{shape} {action}"
    return f"{color} {shape} {action}"


def rasterize(shape, cx, cy, h, canvas):
    """Boolean (canvas, canvas) mask of one shape at integer center and half-size."""
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    dx = xs - cx
    dy = ys - cy
    if shape == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "circle":
        return dx * dx + dy * dy <= h * h
    if shape == "triangle":
        k = dy + h  # row offset from the apex
        return (k >= 0) & (k <= 2 * h) & (np.abs(dx) <= k // 2)
    raise InputError(f"unknown shape {shape!r}")


def _motion(action, speed, growth):
    """Per-frame deltas (vx, vy, dh) for one action."""
    return {
        "moving left": (-speed, 0, 0),
        "moving right": (speed, 0, 0),
        "moving up": (0, -speed, 0),
        "moving down": (0, speed, 0),
        "growing": (0, 0, growth),
        "shrinking": (0, 0, -growth),
        "standing still": (0, 0, 0),
    }[action]


def _h_range(action, spec):
    h_lo = 3
    h_hi = max(3, min(7, spec.canvas // 8))
    if action == "shrinking":
        h_lo = max(h_lo, 1 + spec.growth * (spec.frames - 1))
    if h_lo > h_hi:
        raise ConfigError(
            f"action {action!r} needs starting half-size {h_lo} but canvas "
            f"{spec.canvas} only supports up to {h_hi}"
        )
    return h_lo, h_hi


def _trajectory(action, cx0, cy0, h0, spec):
    t = np.arange(spec.frames)
    vx, vy, dh = _motion(action, spec.speed, spec.growth)
    return cx0 + vx * t, cy0 + vy * t, h0 + dh * t


def _place_actor(action, placed, spec, rng):
    """Sample (cx0, cy0, h0) keeping the whole trajectory in-bounds and disjoint
    from already placed actors (bounding boxes never touch the same pixel)."""
    h_lo, h_hi = _h_range(action, spec)
    lo_edge = BORDER_MARGIN
    hi_edge = spec.canvas - 1 - BORDER_MARGIN
    for _ in range(_PLACEMENT_TRIES):
        h0 = int(rng.integers(h_lo, h_hi + 1))
        cx_off, cy_off, h = _trajectory(action, 0, 0, h0, spec)
        x_lo = int(np.max(lo_edge + h - cx_off))
        x_hi = int(np.min(hi_edge - h - cx_off))
        y_lo = int(np.max(lo_edge + h - cy_off))
        y_hi = int(np.min(hi_edge - h - cy_off))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        cx0 = int(rng.integers(x_lo, x_hi + 1))
        cy0 = int(rng.integers(y_lo, y_hi + 1))
        cx, cy = cx_off + cx0, cy_off + cy0
        ok = True
        for other in placed:
            ox, oy, oh = other["cx"], other["cy"], other["h"]
            x_gap = (cx + h < ox - oh) | (ox + oh < cx - h)
            y_gap = (cy + h < oy - oh) | (oy + oh < cy - h)
            if not np.all(x_gap | y_gap):
                ok = False
                break
        if ok:
            return {"cx": cx, "cy": cy, "h": h}
    return None


def _video_rng(spec, video_id):
    key = (spec.seed & (2**64 - 1)).to_bytes(8, "little")
    digest = hashlib.blake2b(video_id.encode("utf-8"), key=key, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _flow_patch(action, mask, cx, cy, h, spec):
    """Exact displacement (dx, dy) of every pixel of one actor for one frame step."""
    vx, vy, dh = _motion(action, spec.speed, spec.growth)
    flow = np.zeros(mask.shape + (2,), dtype=np.float32)
    if dh == 0:
        flow[mask, 0] = vx
        flow[mask, 1] = vy
    else:
        ys, xs = np.nonzero(mask)
        scale = dh / float(h)  # uniform scaling about the center
        flow[ys, xs, 0] = scale * (xs - cx)
        flow[ys, xs, 1] = scale * (ys - cy)
    return flow


def generate_video(spec, video_id):
    """Render one video: returns a list of AnnotatedSamples, one per actor."""
    rng = _video_rng(spec, video_id)
    combos = spec.combos()
    last_error = None
    for _ in range(_VIDEO_TRIES):
        n_actors = int(rng.integers(spec.actors_min, spec.actors_max + 1))
        picks = rng.choice(len(combos), size=n_actors, replace=False)
        actors = []
        for idx in picks:
            color, shape, action = combos[int(idx)]
            if color is None:
                color = str(spec.colors[int(rng.integers(len(spec.colors)))])
            actors.append({"color": color, "shape": shape, "action": action})
        placed = []
        failed = False
        for actor in actors:
            try:
                traj = _place_actor(actor["action"], placed, spec, rng)
            except ConfigError as exc:
                raise ConfigError(f"{video_id}: {exc}") from None
            if traj is None:
                failed = True
                last_error = f"could not place {actor['shape']} ({actor['action']})"
                break
            actor.update(traj)
            placed.append(traj)
        if not failed:
            break
    else:
        raise ConfigError(f"{video_id}: {last_error}; canvas {spec.canvas} is too crowded")

    n, c = spec.frames, spec.canvas
    frames = np.zeros((n, c, c, 3), dtype=np.float32)
    flow = np.zeros((n, c, c, 2), dtype=np.float32)
    center = n // 2
    gt_masks = []
    for actor in actors:
        rgb = COLORS[actor["color"]]
        masks = [
            rasterize(actor["shape"], actor["cx"][t], actor["cy"][t], actor["h"][t], c)
            for t in range(n)
        ]
        for t in range(n):
            frames[t][masks[t]] = rgb
            flow[t] += _flow_patch(
                actor["action"], masks[t], actor["cx"][t], actor["cy"][t], actor["h"][t], spec
            )
        gt_masks.append(masks[center].astype(np.uint8))

    clip = VideoClip(frames, "appearance")
    flow_clip = VideoClip(flow, "flow")
    samples = []
    for i, actor in enumerate(actors):
        samples.append(AnnotatedSample(
            clip=clip,
            flow=flow_clip,
            sentence=make_sentence(actor["color"], actor["shape"], actor["action"],
                                   spec.sentence_style),
            gt_mask=gt_masks[i],
            video_id=video_id,
            instance_id=f"i{i}",
        ))
    return samples


def generate(spec, count, split="train"):
    """Generate `count` videos for one split; returns the flat sample list."""
    if count < 1:
        raise InputError(f"video count must be >= 1, got {count}")
    samples = []
    for i in range(count):
        samples.extend(generate_video(spec, f"{split}_{i:05d}"))
    return samples


def _by_video(samples):
    videos = {}
    for s in samples:
        videos.setdefault(s.video_id, []).append(s)
    return videos


def write_dataset(splits, out_dir, force=False):
    """Write {split: samples} as frames, flow maps, masks, CSV and manifest.

    Refuses to write into a non-empty directory unless force is set.
    """
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise InputError(f"{out_dir} is not empty; pass force to overwrite")
    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    records = []
    for split, samples in splits.items():
        videos = _by_video(samples)
        manifest[split] = list(videos)
        for vid, group in videos.items():
            vdir = os.path.join(out_dir, "videos", vid)
            mdir = os.path.join(out_dir, "masks", vid)
            os.makedirs(vdir, exist_ok=True)
            os.makedirs(mdir, exist_ok=True)
            clip = group[0].clip.frames
            flow = group[0].flow.frames
            for t in range(clip.shape[0]):
                formats.write_ppm(np.rint(clip[t] * 255).astype(np.uint8),
                                  os.path.join(vdir, f"frame_{t:05d}.ppm"))
                formats.write_flow(flow[t],
                                   os.path.join(vdir, f"flow_x_{t:05d}.pgm"),
                                   os.path.join(vdir, f"flow_y_{t:05d}.pgm"))
            for s in group:
                formats.write_mask(s.gt_mask, os.path.join(mdir, f"{s.instance_id}.pgm"))
                records.append((s.video_id, s.instance_id, s.sentence))
    formats.write_annotations(records, os.path.join(out_dir, "annotations.csv"))
    formats.write_manifest(manifest, os.path.join(out_dir, "manifest.json"))


def load_dataset(root, split):
    """Read one split back into AnnotatedSamples."""
    manifest = formats.read_manifest(os.path.join(root, "manifest.json"))
    if split not in manifest:
        raise InputError(f"manifest has no split {split!r}, only {sorted(manifest)}")
    by_vid = {}
    for vid, iid, sentence in formats.read_annotations(os.path.join(root, "annotations.csv")):
        by_vid.setdefault(vid, []).append((iid, sentence))
    samples = []
    for vid in manifest[split]:
        vdir = os.path.join(root, "videos", vid)
        if not os.path.isdir(vdir):
            raise InputError(f"missing video directory {vdir}")
        frame_files = sorted(f for f in os.listdir(vdir) if f.startswith("frame_"))
        frames = np.stack([formats.read_ppm(os.path.join(vdir, f)) for f in frame_files])
        clip = VideoClip(frames.astype(np.float32) / 255.0, "appearance")
        flow = np.stack([
            formats.read_flow(os.path.join(vdir, f"flow_x_{t:05d}.pgm"),
                              os.path.join(vdir, f"flow_y_{t:05d}.pgm"))
            for t in range(frames.shape[0])
        ])
        flow_clip = VideoClip(flow, "flow")
        for iid, sentence in by_vid.get(vid, []):
            mask = formats.read_mask(os.path.join(root, "masks", vid, f"{iid}.pgm"))
            samples.append(AnnotatedSample(
                clip=clip, flow=flow_clip, sentence=sentence, gt_mask=mask,
                video_id=vid, instance_id=iid,
            ))
    return samples


def pair_vocabulary(spec):
    """Ordered (shape, action) query labels; class id is 1 + index in this list."""
    return tuple(f"{s} {a}" for s in spec.shapes for a in spec.actions)


def oracle_pair_scores(samples, vocab):
    """Ground-truth pair confidences for one video: 1.0 if present, else 0.0.

    Only meaningful for shape-action sentences, where the sentence is the label.
    """
    present = {s.sentence for s in samples}
    return {label: (1.0 if label in present else 0.0) for label in vocab}


def pair_label_map(samples, vocab):
    """Fuse one video's instance masks into a class label map (0 = background)."""
    ids = {label: i + 1 for i, label in enumerate(vocab)}
    out = None
    for s in samples:
        if s.sentence not in ids:
            raise InputError(f"sentence {s.sentence!r} is not in the pair vocabulary")
        if out is None:
            out = np.zeros(s.gt_mask.shape, dtype=np.int32)
        out[s.gt_mask > 0] = ids[s.sentence]
    if out is None:
        raise InputError("no samples given")
    return out
