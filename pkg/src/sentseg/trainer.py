"""Training loop, checkpoint format, stream fusion and pair-query inference."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .decoder import predict_mask
from .embeddings import EmbeddingConfig, build_table
from .errors import ConfigError, FormatError, InputError, NumericError
from .loss import mask_pyramid, total_loss
from .model import STREAM_CHANNELS, ModelConfig, build_model
from .textenc import embed_sentence

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FORMAT = "sentseg-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay_every: int = 800
    decay_factor: float = 10.0
    total_iters: int = 2000
    batch_size: int = 4
    clip_len: int = 4
    seed: int = 0
    alpha: tuple | None = None  # per-resolution loss weights, None means all ones
    stream: str = "appearance"

    def __post_init__(self):
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("lr and decay_factor must be positive")
        if self.decay_every < 1 or self.batch_size < 1 or self.clip_len < 1:
            raise ConfigError("decay_every, batch_size and clip_len must be >= 1")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.stream not in STREAM_CHANNELS:
            raise ConfigError(f"stream must be one of {sorted(STREAM_CHANNELS)}")

    def to_dict(self):
        d = asdict(self)
        d["alpha"] = None if self.alpha is None else list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FusionConfig:
    w_appearance: float = 2.0
    w_flow: float = 1.0

    def __post_init__(self):
        if self.w_appearance < 0 or self.w_flow < 0:
            raise ConfigError("fusion weights must be non-negative")
        if self.w_appearance + self.w_flow <= 0:
            raise ConfigError("at least one fusion weight must be positive")


def lr_at(cfg: TrainConfig, iteration):
    """Learning rate for a 1-based iteration: divided by decay_factor at each boundary."""
    return cfg.lr / cfg.decay_factor ** ((iteration - 1) // cfg.decay_every)


def config_hash(model_cfg, train_cfg, embed_cfg):
    """Hash of everything that must match for a resume to be coherent.

    total_iters is excluded: it is the stop point of a run, not its identity.
    """
    payload = {
        "model": model_cfg.to_dict(),
        "train": {k: v for k, v in train_cfg.to_dict().items() if k != "total_iters"},
        "embeddings": asdict(embed_cfg),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def pad_or_crop_clip(frames, n):
    """Fit a clip to n frames: center-crop long clips, repeat boundary frames on short ones."""
    if n < 1:
        raise InputError(f"clip length must be >= 1, got {n}")
    frames = np.asarray(frames)
    f = frames.shape[0]
    if f == n:
        return frames
    if f > n:
        start = (f - n) // 2
        return frames[start:start + n]
    front = (n - f) // 2
    back = n - f - front
    return np.concatenate([
        np.repeat(frames[:1], front, axis=0),
        frames,
        np.repeat(frames[-1:], back, axis=0),
    ])


@dataclass
class Checkpoint:
    params: dict            # block name -> float32 ndarray
    adam_m: dict
    adam_v: dict
    iteration: int
    model_config: ModelConfig
    train_config: TrainConfig
    embed_config: EmbeddingConfig

    @property
    def config_hash(self):
        return config_hash(self.model_config, self.train_config, self.embed_config)


def save_checkpoint(ckpt: Checkpoint, path):
    """One JSON header line (names, shapes, offsets, configs) + little-endian f32 blob."""
    blocks = []
    blob = bytearray()
    for kind, table in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in table.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            blocks.append({
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "offset": len(blob),
                "count": int(arr.size),
            })
            blob.extend(arr.tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "iteration": int(ckpt.iteration),
        "config_hash": ckpt.config_hash,
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "embeddings": asdict(ckpt.embed_config),
        "blocks": blocks,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError:
        raise FormatError(f"{path}: checkpoint header is not valid JSON") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint file")
    tables = {"param": {}, "adam_m": {}, "adam_v": {}}
    for block in header["blocks"]:
        start = block["offset"]
        end = start + block["count"] * 4
        if end > len(blob):
            raise FormatError(f"{path}: block {block['name']} runs past the end of the file")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(block["shape"]).copy()
        tables[block["kind"]][block["name"]] = arr
    ckpt = Checkpoint(
        params=tables["param"],
        adam_m=tables["adam_m"],
        adam_v=tables["adam_v"],
        iteration=int(header["iteration"]),
        model_config=ModelConfig.from_dict(header["model"]),
        train_config=TrainConfig.from_dict(header["train"]),
        embed_config=EmbeddingConfig(**header["embeddings"]),
    )
    if ckpt.config_hash != header["config_hash"]:
        raise FormatError(f"{path}: config hash does not match the stored configuration")
    return ckpt


def _load_params(model, params):
    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise ConfigError(
            f"checkpoint blocks {sorted(params)} do not match model blocks {sorted(named)}"
        )
    with torch.no_grad():
        for name, p in named.items():
            arr = torch.from_numpy(np.ascontiguousarray(params[name], dtype=np.float32))
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigError(f"block {name} has shape {tuple(arr.shape)}, expected {tuple(p.shape)}")
            p.copy_(arr)


def _stream_frames(sample, stream):
    return sample.clip.frames if stream == "appearance" else sample.flow.frames


def _prepare_sample(sample, table, model_cfg, train_cfg):
    matrix = embed_sentence(sample.sentence, table, model_cfg.l_max)
    frames = pad_or_crop_clip(_stream_frames(sample, train_cfg.stream), train_cfg.clip_len)
    clip = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(3, 0, 1, 2)
    labels = {
        r: torch.from_numpy(y.astype(np.float32))
        for r, y in mask_pyramid(sample.gt_mask, model_cfg.resolutions).items()
    }
    return matrix.rows, matrix.length, clip, labels


def _batch_indices(iteration, batch_size, n, seed, perm_cache):
    idxs = []
    for j in range(batch_size):
        k = (iteration - 1) * batch_size + j
        epoch, pos = divmod(k, n)
        if epoch not in perm_cache:
            perm_cache[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        idxs.append(int(perm_cache[epoch][pos]))
    return idxs


def train(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          embed_cfg: EmbeddingConfig | None = None, resume: Checkpoint | None = None):
    """Run Adam over the dataset; returns (Checkpoint, [(iteration, lr, loss), ...]).

    Batching, initialization and the data order are all derived from seeds, so
    two runs with the same inputs produce identical logs and checkpoints.
    Resuming continues the iteration counter, schedule and data order exactly
    where the loaded checkpoint stopped.
    """
    if not dataset:
        raise InputError("training needs a non-empty dataset")
    if embed_cfg is None:
        embed_cfg = EmbeddingConfig(dim=model_cfg.embed_dim)
    if embed_cfg.dim != model_cfg.embed_dim:
        raise ConfigError(
            f"embedding dim {embed_cfg.dim} does not match model embed_dim {model_cfg.embed_dim}"
        )
    if train_cfg.alpha is not None and len(train_cfg.alpha) != len(model_cfg.resolutions):
        raise ConfigError(
            f"alpha has {len(train_cfg.alpha)} entries for {len(model_cfg.resolutions)} resolutions"
        )
    table = build_table(embed_cfg)
    model = build_model(model_cfg, train_cfg.stream)
    start_iter = 0
    adam_m = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    adam_v = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    if resume is not None:
        want = config_hash(model_cfg, train_cfg, embed_cfg)
        if resume.config_hash != want:
            raise ConfigError("checkpoint configuration does not match the requested run")
        _load_params(model, resume.params)
        for name in adam_m:
            adam_m[name] = torch.from_numpy(resume.adam_m[name].astype(np.float32))
            adam_v[name] = torch.from_numpy(resume.adam_v[name].astype(np.float32))
        start_iter = resume.iteration

    alpha = train_cfg.alpha or tuple(1.0 for _ in model_cfg.resolutions)
    weights = {r: a for r, a in zip(model_cfg.resolutions, alpha)}
    cache = [_prepare_sample(s, table, model_cfg, train_cfg) for s in dataset]
    named = dict(model.named_parameters())

    perm_cache = {}
    log = []
    last_grad_norms = {}
    n = len(cache)
    for it in range(start_iter + 1, train_cfg.total_iters + 1):
        lr = lr_at(train_cfg, it)
        idxs = _batch_indices(it, train_cfg.batch_size, n, train_cfg.seed, perm_cache)
        rows = torch.stack([cache[i][0] for i in idxs])
        lengths = torch.tensor([cache[i][1] for i in idxs], dtype=torch.long)
        clips = torch.stack([cache[i][2] for i in idxs])
        labels = {
            r: torch.stack([cache[i][3][r] for i in idxs])
            for r in model_cfg.resolutions
        }
        for p in named.values():
            p.grad = None
        responses = model(rows, lengths, clips)
        loss = total_loss(responses, labels, weights)
        loss_val = float(loss.detach())
        if not torch.isfinite(loss):
            detail = ""
            if last_grad_norms:
                worst = max(last_grad_norms, key=last_grad_norms.get)
                detail = f"; largest recent gradient was in block {worst}"
            raise NumericError(f"non-finite loss {loss_val} at iteration {it}{detail}")
        loss.backward()
        with torch.no_grad():
            for name, p in named.items():
                g = p.grad
                if g is None:
                    continue
                last_grad_norms[name] = float(g.abs().max())
                m = adam_m[name]
                v = adam_v[name]
                m.mul_(ADAM_BETA1).add_(g, alpha=1 - ADAM_BETA1)
                v.mul_(ADAM_BETA2).addcmul_(g, g, value=1 - ADAM_BETA2)
                m_hat = m / (1 - ADAM_BETA1 ** it)
                v_hat = v / (1 - ADAM_BETA2 ** it)
                p.addcdiv_(m_hat, v_hat.sqrt() + ADAM_EPS, value=-lr)
        log.append((it, lr, loss_val))

    ckpt = Checkpoint(
        params={n: p.detach().numpy().astype(np.float32, copy=True) for n, p in named.items()},
        adam_m={n: t.numpy().astype(np.float32, copy=True) for n, t in adam_m.items()},
        adam_v={n: t.numpy().astype(np.float32, copy=True) for n, t in adam_v.items()},
        iteration=max(start_iter, train_cfg.total_iters),
        model_config=model_cfg,
        train_config=train_cfg,
        embed_config=embed_cfg,
    )
    return ckpt, log


def write_loss_log(log, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iter,lr,loss\n")
        for it, lr, loss in log:
            fh.write(f"{it},{lr!r},{loss!r}\n")


class Predictor:
    """A frozen checkpoint plus its embedding table, ready to segment clips."""

    def __init__(self, ckpt: Checkpoint):
        self.model = build_model(ckpt.model_config, ckpt.train_config.stream)
        _load_params(self.model, ckpt.params)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.table = build_table(ckpt.embed_config)
        self.model_config = ckpt.model_config
        self.stream = ckpt.train_config.stream
        self.clip_len = ckpt.train_config.clip_len

    def responses(self, sentence, frames):
        """Response maps {r: (r, r) float32} for one sentence over one clip."""
        expected = STREAM_CHANNELS[self.stream]
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[3] != expected:
            raise ConfigError(
                f"{self.stream} stream expects (N, H, W, {expected}) frames, got {frames.shape}"
            )
        matrix = embed_sentence(sentence, self.table, self.model_config.l_max)
        frames = pad_or_crop_clip(frames, self.clip_len)
        clip = torch.from_numpy(np.ascontiguousarray(frames)).permute(3, 0, 1, 2).unsqueeze(0)
        with torch.no_grad():
            out = self.model(matrix.rows.unsqueeze(0), torch.tensor([matrix.length]), clip)
        return {r: s.squeeze(0).numpy() for r, s in out.items()}

    def segment(self, sentence, frames):
        """Binary mask at the highest resolution."""
        r_max = self.model_config.resolutions[-1]
        return predict_mask(self.responses(sentence, frames)[r_max])


def infer(sentence, frames, ckpt: Checkpoint):
    """One-shot convenience wrapper; build a Predictor for repeated queries."""
    return Predictor(ckpt).segment(sentence, frames)


def fuse(s_app, s_flow, cfg: FusionConfig):
    """Weighted average of two response maps."""
    a = np.asarray(s_app)
    f = np.asarray(s_flow)
    if a.shape != f.shape:
        raise InputError(f"response shapes differ: {a.shape} vs {f.shape}")
    return (cfg.w_appearance * a + cfg.w_flow * f) / (cfg.w_appearance + cfg.w_flow)


def select_pairs(pair_scores, vocab, threshold=0.5):
    """Labels scoring strictly above threshold, in vocabulary order.

    When nothing clears the threshold, fall back to the single best-scoring
    label, ties resolved toward the earliest vocabulary entry.
    """
    if not pair_scores:
        raise InputError("pair_scores is empty")
    unknown = set(pair_scores) - set(vocab)
    if unknown:
        raise InputError(f"pair scores mention labels outside the vocabulary: {sorted(unknown)}")
    chosen = [label for label in vocab if pair_scores.get(label, 0.0) > threshold]
    if chosen:
        return chosen
    best = None
    for label in vocab:
        if label in pair_scores and (best is None or pair_scores[label] > pair_scores[best]):
            best = label
    return [best]


def argmax_labels(stack, class_ids):
    """Per-pixel argmax over stacked response maps (Q, H, W) -> class label map.

    Ties go to the earliest entry of the stack; pixels whose best response is
    not strictly positive become background 0.
    """
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] != len(class_ids):
        raise InputError(
            f"need one class id per stacked map, got {stack.shape} and {len(class_ids)} ids"
        )
    winners = np.argmax(stack, axis=0)
    labels = np.asarray(class_ids, dtype=np.int32)[winners]
    labels[stack.max(axis=0) <= 0] = 0
    return labels


def pair_inference(frames, pair_scores, predictor: Predictor, vocab, threshold=0.5,
                   flow_frames=None, flow_predictor=None, fusion=None):
    """Segment a clip against a fixed pair vocabulary instead of free sentences.

    Queries are the pairs whose confidence clears the threshold (with the
    top-1 fallback); each one is run through the model as a sentence and the
    pixels take the class of the strongest response.
    """
    chosen = select_pairs(pair_scores, vocab, threshold)
    ids = {label: i + 1 for i, label in enumerate(vocab)}
    r_max = predictor.model_config.resolutions[-1]
    maps = []
    for label in chosen:
        s = predictor.responses(label, frames)[r_max]
        if flow_predictor is not None:
            s = fuse(s, flow_predictor.responses(label, flow_frames)[r_max],
                     fusion or FusionConfig())
        maps.append(s)
    return argmax_labels(np.stack(maps), [ids[label] for label in chosen])
