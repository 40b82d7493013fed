"""Encoder / vector-quantizer / decoder assembly with freeze masks.

The encoder is ``depth`` stages of stride-2 convolution with channels
doubling from ``base_channels`` (capped at 8x) under a leaky-ReLU. The
decoder mirrors it with nearest-neighbor upsampling and a final linear
convolution. Each quantized pyramid level projects its feature map to the
code dimension with a 1x1 convolution, snaps every spatial vector to the
nearest codebook entry on the unit sphere, and projects back; level 0 is
the bottleneck, further levels are quantized skip connections into the
decoder at matching resolutions.

Checkpoints serialize to the VQCK format: magic ``VQCK0001``, a 4-byte
little-endian header length, a JSON header (config, provenance, step,
codebook bookkeeping, block manifest with shapes and byte offsets), then
the raw little-endian float32 blocks in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .codebook import Codebook, QuantizeResult, quantize
from .errors import DomainError, FormatError, ShapeError

__all__ = [
    "ModelConfig",
    "FreezeMask",
    "Checkpoint",
    "ForwardResult",
    "PROVENANCE_TAGS",
    "MODES",
    "build_model",
    "param_tensors",
    "forward",
    "apply_freeze",
    "mask_for_mode",
    "value_space",
    "save_checkpoint",
    "load_checkpoint",
    "reinitialized",
]

MAGIC = b"VQCK0001"
PROVENANCE_TAGS = ("pretrained", "scratch", "finetuned")
MODES = ("scratch", "no-frozen", "enc-frozen")

LEAKY_SLOPE = 0.1
CHANNEL_CAP_FACTOR = 8


@dataclass(frozen=True)
class ModelConfig:
    spatial_rank: int = 2
    depth: int = 3
    base_channels: int = 8
    codebook_size: int = 32
    codebook_dim: int = 16
    pyramid_levels: int = 1
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.spatial_rank not in (2, 3):
            raise DomainError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.depth < 1:
            raise DomainError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise DomainError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.codebook_size < 2:
            raise DomainError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.codebook_dim < 1:
            raise DomainError(f"codebook_dim must be >= 1, got {self.codebook_dim}")
        if not 1 <= self.pyramid_levels <= self.depth:
            raise DomainError(
                f"pyramid_levels must be in [1, depth={self.depth}], got {self.pyramid_levels}")
        return self

    def channels(self) -> list[int]:
        """Channel count entering stage boundaries: index 0 is the input."""
        out = [1]
        for s in range(self.depth):
            out.append(min(self.base_channels * 2 ** s,
                           CHANNEL_CAP_FACTOR * self.base_channels))
        return out


@dataclass(frozen=True)
class FreezeMask:
    """Which parameter groups a training loop may update."""

    encoder_trainable: bool = True
    codebook_trainable: bool = True
    decoder_trainable: bool = True


def mask_for_mode(mode: str, freeze_codebook_with_encoder: bool = True) -> FreezeMask:
    """Map a fine-tuning mode name onto its freeze mask.

    In enc-frozen mode the codebook is frozen together with the encoder by
    default; pass ``freeze_codebook_with_encoder=False`` to keep it learning.
    """
    if mode == "scratch" or mode == "no-frozen":
        return FreezeMask(True, True, True)
    if mode == "enc-frozen":
        return FreezeMask(False, not freeze_codebook_with_encoder, True)
    raise DomainError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    codebooks: list[Codebook]
    step: int = 0
    provenance: str = "scratch"

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config,
                          {k: v.copy() for k, v in self.params.items()},
                          [cb.copy() for cb in self.codebooks],
                          self.step, self.provenance)


@dataclass
class ForwardResult:
    output: ag.Tensor
    commitment: ag.Tensor                   # scalar node, flows to the encoder
    code_indices: list[np.ndarray]          # per level, spatial layout
    latent_rows: list[np.ndarray]           # per level, [positions, codebook_dim]
    quantize_results: list[QuantizeResult] = field(default_factory=list)


def value_space(ckpt: Checkpoint) -> str:
    """Normalized intensity space the checkpoint operates in.

    Self-reconstruction pretraining runs in unit01; translation fine-tuning
    (and scratch training for it) runs in sym11.
    """
    return "unit01" if ckpt.provenance == "pretrained" else "sym11"


def _layer_specs(config: ModelConfig):
    """Yield (name, c_out, c_in, kernel_extent) in initialization order."""
    ch = config.channels()
    specs = []
    for i in range(config.depth):
        specs.append((f"enc.{i}", ch[i + 1], ch[i], 3))
    for j in range(config.pyramid_levels):
        level_ch = ch[config.depth - j]
        specs.append((f"vq{j}.in", config.codebook_dim, level_ch, 1))
        specs.append((f"vq{j}.out", level_ch, config.codebook_dim, 1))
    for i in range(config.depth):
        c_in = ch[config.depth - i]
        c_out = ch[max(config.depth - 1 - i, 1)]
        specs.append((f"dec.{i}", c_out, c_in, 3))
    specs.append(("dec.final", 1, ch[1], 3))
    return specs


def build_model(config: ModelConfig) -> Checkpoint:
    """Construct a freshly initialized checkpoint.

    All weights and biases draw uniformly from +-sqrt(6 / fan_in) with a
    single seeded generator; per-level codebooks start as seeded random unit
    vectors awaiting k-means initialization.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, c_out, c_in, k in _layer_specs(config):
        kshape = (c_out, c_in) + (k,) * config.spatial_rank
        fan_in = c_in * k ** config.spatial_rank
        lim = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-lim, lim, kshape)
        params[f"{name}.b"] = rng.uniform(-lim, lim, c_out)
    codebooks = [
        Codebook(config.codebook_size, config.codebook_dim,
                 seed=int(rng.integers(2 ** 31)))
        for _ in range(config.pyramid_levels)
    ]
    return Checkpoint(config, params, codebooks, step=0, provenance="scratch")


def param_tensors(ckpt: Checkpoint) -> dict[str, ag.Tensor]:
    """Graph leaves over the checkpoint parameters, shared across a batch."""
    return {name: ag.leaf(arr) for name, arr in ckpt.params.items()}


def _quantize_level(feat: ag.Tensor, level: int, params, codebook: Codebook, beta: float):
    """Project, snap to codes, project back; returns the graph pieces."""
    proj = ag.conv(feat, params[f"vq{level}.in.w"], params[f"vq{level}.in.b"])
    dim = proj.data.shape[0]
    spatial = proj.data.shape[1:]
    rows_data = proj.data.reshape(dim, -1).T
    qres = quantize(codebook, rows_data, beta=beta)
    qmap = qres.quantized.T.reshape((dim,) + spatial)
    st = ag.straight_through(proj, qmap)
    out = ag.conv(st, params[f"vq{level}.out.w"], params[f"vq{level}.out.b"])

    rows_t = ag.moveaxis(ag.reshape(proj, (dim, rows_data.shape[0])), 0, 1)
    normed = ag.l2_normalize_rows(rows_t)
    diff = ag.sub(normed, ag.leaf(qres.quantized))
    # mean over rows of the squared distance: elementwise mean times row width
    commit = ag.scale(ag.mean_all(ag.mul(diff, diff)), beta * dim)

    indices = qres.indices.reshape(spatial)
    return out, commit, indices, rows_data, qres


def forward(ckpt: Checkpoint, x, params: dict[str, ag.Tensor] | None = None,
            beta: float = 0.25) -> ForwardResult:
    """Run the full encoder/quantizer/decoder graph on one input.

    ``x`` is ``[1, *spatial]`` with every spatial extent divisible by
    2^depth. Pass a shared ``params`` dict (from :func:`param_tensors`) to
    accumulate gradients across several inputs in one backward pass.
    """
    cfg = ckpt.config
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != cfg.spatial_rank + 1 or arr.shape[0] != 1:
        raise ShapeError(
            f"input must be [1, *spatial] with rank {cfg.spatial_rank}, got {arr.shape}")
    div = 2 ** cfg.depth
    if any(d % div for d in arr.shape[1:]):
        raise DomainError(f"spatial extents {arr.shape[1:]} must be divisible by {div}")
    if params is None:
        params = param_tensors(ckpt)

    h = ag.leaf(arr)
    enc_feats = []
    for i in range(cfg.depth):
        h = ag.leaky_relu(
            ag.conv(h, params[f"enc.{i}.w"], params[f"enc.{i}.b"], stride=2, pad=1),
            LEAKY_SLOPE)
        enc_feats.append(h)

    quantized = []
    commits = []
    indices = []
    rows = []
    qresults = []
    for j in range(cfg.pyramid_levels):
        out, commit, idx, row_data, qres = _quantize_level(
            enc_feats[cfg.depth - 1 - j], j, params, ckpt.codebooks[j], beta)
        quantized.append(out)
        commits.append(commit)
        indices.append(idx)
        rows.append(row_data)
        qresults.append(qres)

    d = quantized[0]
    for i in range(cfg.depth):
        d = ag.upsample_nearest(d, 2)
        d = ag.leaky_relu(
            ag.conv(d, params[f"dec.{i}.w"], params[f"dec.{i}.b"], pad=1), LEAKY_SLOPE)
        skip_level = i + 1
        if skip_level < cfg.pyramid_levels:
            d = ag.add(d, quantized[skip_level])
    out = ag.conv(d, params["dec.final.w"], params["dec.final.b"], pad=1)

    total_commit = commits[0]
    for c in commits[1:]:
        total_commit = ag.add(total_commit, c)
    if len(commits) > 1:
        total_commit = ag.scale(total_commit, 1.0 / len(commits))

    return ForwardResult(out, total_commit, indices, rows, qresults)


def apply_freeze(ckpt: Checkpoint, mask: FreezeMask) -> list[str]:
    """Sorted names of the parameters an optimizer may update under ``mask``.

    Encoder-side (``enc.*`` and the into-codebook projections) and
    decoder-side (``dec.*`` and the from-codebook projections) groups follow
    their flags; codebook EMA updates are gated separately by
    ``mask.codebook_trainable``.
    """
    names = []
    for name in ckpt.params:
        enc_side = name.startswith("enc.") or ".in." in name
        if enc_side and mask.encoder_trainable:
            names.append(name)
        elif not enc_side and mask.decoder_trainable:
            names.append(name)
    return sorted(names)


# ---------------------------------------------------------------------------
# VQCK serialization
# ---------------------------------------------------------------------------

def _block_order(params: dict, n_levels: int):
    names = sorted(params)
    for j in range(n_levels):
        names.extend([f"codebook{j}.codes", f"codebook{j}.ema_embed_sum",
                      f"codebook{j}.ema_cluster_size"])
    return names


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize to VQCK; re-saving a loaded checkpoint is byte-identical."""
    blocks: dict[str, np.ndarray] = dict(ckpt.params)
    for j, cb in enumerate(ckpt.codebooks):
        blocks[f"codebook{j}.codes"] = cb.codes
        blocks[f"codebook{j}.ema_embed_sum"] = cb.ema_embed_sum
        blocks[f"codebook{j}.ema_cluster_size"] = cb.ema_cluster_size
    manifest = []
    offset = 0
    order = _block_order(ckpt.params, len(ckpt.codebooks))
    for name in order:
        arr = blocks[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 4 * arr.size
    header = {
        "config": asdict(ckpt.config),
        "provenance": ckpt.provenance,
        "step": ckpt.step,
        "codebooks": [
            {"initialized": cb.initialized, "usage_age": cb.usage_age.tolist()}
            for cb in ckpt.codebooks
        ],
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in order:
            fh.write(blocks[name].astype("<f4").ravel().tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a VQCK checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    end = start + header_len
    if end > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:end].decode("utf-8"))
        config = ModelConfig(**header["config"]).validate()
        provenance = header["provenance"]
        step = int(header["step"])
        cb_meta = header["codebooks"]
        manifest = header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError,
            ValueError, DomainError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from None
    if provenance not in PROVENANCE_TAGS:
        raise FormatError(f"{path}: unknown provenance tag {provenance!r}")

    blocks: dict[str, np.ndarray] = {}
    payload = blob[end:]
    for entry in manifest:
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        lo = int(entry["offset"])
        hi = lo + 4 * size
        if hi > len(payload):
            raise FormatError(f"{path}: block {entry['name']} overruns payload")
        blocks[entry["name"]] = np.frombuffer(
            payload[lo:hi], dtype="<f4").reshape(shape).astype(np.float64)

    params = {n: a for n, a in blocks.items() if not n.startswith("codebook")}
    codebooks = []
    for j, meta in enumerate(cb_meta):
        try:
            codes = blocks[f"codebook{j}.codes"]
            embed = blocks[f"codebook{j}.ema_embed_sum"]
            csize = blocks[f"codebook{j}.ema_cluster_size"]
        except KeyError as exc:
            raise FormatError(f"{path}: missing codebook block {exc}") from None
        cb = Codebook.__new__(Codebook)
        cb.codes = codes
        cb.ema_embed_sum = embed
        cb.ema_cluster_size = csize
        cb.usage_age = np.asarray(meta["usage_age"], dtype=np.int64)
        cb.initialized = bool(meta["initialized"])
        codebooks.append(cb)
    return Checkpoint(config, params, codebooks, step=step, provenance=provenance)


def reinitialized(ckpt: Checkpoint, seed: int) -> Checkpoint:
    """Fresh scratch checkpoint with this checkpoint's architecture."""
    return build_model(replace(ckpt.config, seed=seed))
