"""Vector-quantized autoencoder mapping MFCC tiles of one audio chunk to 50 codes.

Encoder: six 3x3 convolutions, 2x2 max pooling after layers 1, 3 and 5, so a
40x80 tile shrinks to the 5x10 embedding map. Decoder: six 3x3 convolutions
with bilinear x2 upsampling after layers 1, 3 and 5, followed by a dense layer
producing the raw 1470-sample chunk.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .audio import CHUNK_SAMPLES, MfccConfig, mfcc, pad_features
from .core_data import CLIP_FRAMES, LATENT_SIZE, LatentClip

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CodecConfig:
    input_hw: tuple = (40, 80)
    in_channels: int = 3
    encoder_channels: tuple = (32, 64, 64, 128, 128)
    decoder_channels: tuple = (128, 128, 64, 64, 32)
    embedding_dim: int = 1
    codebook_size: int = 512
    commitment: float = 0.25
    ema_decay: float = 0.99
    dead_code_epochs: int = 3
    leaky_slope: float = 0.3
    output_len: int = CHUNK_SAMPLES

    def __post_init__(self):
        h, w = self.input_hw
        if h % 8 or w % 8:
            raise ValueError("input tile dims must be divisible by 8 (three 2x2 poolings)")
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ValueError("encoder/decoder need 5 hidden widths (the 6th layer has embedding depth)")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")

    @property
    def embedding_hw(self):
        return self.input_hw[0] // 8, self.input_hw[1] // 8

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class QuantizationResult:
    quantized: torch.Tensor       # straight-through values, same shape as the input map
    indices: torch.Tensor         # (N, H, W)
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor
    codes: torch.Tensor           # selected codebook entries, bitwise equal to the codebook

    @property
    def latent(self) -> torch.Tensor:
        """Row-major flattening of the selected entries, (N, H*W*D)."""
        n = self.codes.shape[0]
        return self.codes.detach().permute(0, 2, 3, 1).reshape(n, -1)


def nearest_codes(values: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``values`` (lowest index on ties)."""
    d = ((values[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    return torch.argmin(d, dim=1)


def quantize(pre_quant: torch.Tensor, codebook: torch.Tensor) -> QuantizationResult:
    """Snap every cell of an (N, D, H, W) map to its nearest codebook entry.

    Losses follow VQ-VAE: the codebook term pulls entries toward detached
    encoder outputs, the commitment term pulls outputs toward detached
    entries. The returned map passes gradients straight through to the
    encoder.
    """
    if codebook.ndim != 2 or len(codebook) == 0:
        raise ValueError("codebook must be a nonempty (K, D) tensor")
    n, d, h, w = pre_quant.shape
    if d != codebook.shape[1]:
        raise ValueError(f"map depth {d} does not match codebook dim {codebook.shape[1]}")
    flat = pre_quant.permute(0, 2, 3, 1).reshape(-1, d)
    with torch.no_grad():
        idx = nearest_codes(flat, codebook)
    chosen = codebook[idx].reshape(n, h, w, d).permute(0, 3, 1, 2)
    codebook_loss = F.mse_loss(chosen, pre_quant.detach())
    commitment_loss = F.mse_loss(pre_quant, chosen.detach())
    st = pre_quant + (chosen - pre_quant).detach()
    return QuantizationResult(st, idx.reshape(n, h, w), codebook_loss, commitment_loss, chosen.detach())


class Codebook(nn.Module):
    """EMA-updated codebook with dead-code re-initialisation."""

    def __init__(self, size: int, dim: int, decay: float = 0.99, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        init = torch.linspace(-1.0, 1.0, size)[:, None].repeat(1, dim)
        init = init + 1e-3 * torch.rand(size, dim, generator=g)
        self.register_buffer("entries", init)
        self.register_buffer("cluster_size", torch.ones(size))
        self.register_buffer("embed_sum", init.clone())
        self.register_buffer("epoch_usage", torch.zeros(size))
        self.register_buffer("idle_epochs", torch.zeros(size, dtype=torch.long))
        self.decay = decay

    def __len__(self):
        return self.entries.shape[0]

    @torch.no_grad()
    def ema_update(self, flat: torch.Tensor, idx: torch.Tensor):
        k = len(self)
        onehot = F.one_hot(idx, k).type(flat.dtype)
        counts = onehot.sum(0)
        self.epoch_usage += counts
        self.cluster_size.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.embed_sum.mul_(self.decay).add_(onehot.T @ flat, alpha=1 - self.decay)
        n = self.cluster_size.sum()
        size = (self.cluster_size + 1e-5) / (n + k * 1e-5) * n
        self.entries.copy_(self.embed_sum / size[:, None])

    @torch.no_grad()
    def end_epoch(self, recent: torch.Tensor, patience: int, generator: torch.Generator) -> int:
        """Re-seed entries unused for ``patience`` epochs from recent encoder outputs."""
        unused = self.epoch_usage == 0
        self.idle_epochs[unused] += 1
        self.idle_epochs[~unused] = 0
        self.epoch_usage.zero_()
        dead = torch.nonzero(self.idle_epochs >= patience).flatten()
        if len(dead) and len(recent):
            pick = torch.randint(len(recent), (len(dead),), generator=generator)
            jitter = 1e-4 * torch.randn(len(dead), recent.shape[1], generator=generator)
            fresh = recent[pick] + jitter
            self.entries[dead] = fresh
            self.embed_sum[dead] = fresh
            self.cluster_size[dead] = 1.0
            self.idle_epochs[dead] = 0
        return len(dead)


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        widths = list(cfg.encoder_channels) + [cfg.embedding_dim]
        self.convs = nn.ModuleList()
        cin = cfg.in_channels
        for cout in widths:
            self.convs.append(_conv(cin, cout))
            cin = cout
        self.slope = cfg.leaky_slope

    def forward(self, x, trace=None):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            # the last layer is the linear pre-quantization projection
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, self.slope)
            if i in (0, 2, 4):
                x = F.max_pool2d(x, 2)
            if trace is not None:
                trace.append(tuple(x.shape[-2:]))
        return x


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        widths = list(cfg.decoder_channels) + [1]
        self.convs = nn.ModuleList()
        cin = cfg.embedding_dim
        for cout in widths:
            self.convs.append(_conv(cin, cout))
            cin = cout
        h, w = cfg.input_hw
        self.dense = nn.Linear(h * w, cfg.output_len)
        self.slope = cfg.leaky_slope

    def forward(self, z, trace=None):
        x = z
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), self.slope)
            if i in (0, 2, 4):
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if trace is not None:
                trace.append(tuple(x.shape[-2:]))
        return self.dense(x.flatten(1))


class CodecModel(nn.Module):
    def __init__(self, cfg: CodecConfig = CodecConfig(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.embedding_dim, cfg.ema_decay, seed)

    def _check_input(self, x):
        expected = (self.cfg.in_channels,) + tuple(self.cfg.input_hw)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"codec input must be (N, {expected}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x)

    def decode(self, q: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.embedding_dim,) + self.cfg.embedding_hw
        if q.ndim != 4 or tuple(q.shape[1:]) != expected:
            raise ValueError(f"decoder input must be (N, {expected}), got {tuple(q.shape)}")
        return self.decoder(q)

    def forward(self, x):
        z = self.encode(x)
        qr = quantize(z, self.codebook.entries)
        return self.decode(qr.quantized), qr, z

    def loss(self, x, target):
        recon, qr, z = self(x)
        rec = F.mse_loss(recon, target)
        total = rec + qr.codebook_loss + self.cfg.commitment * qr.commitment_loss
        return total, rec, qr, z


def features_to_tile(features: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """(T, C, 3) MFCC tensor -> (3, H, W) codec input (coefficients zero-padded)."""
    padded = pad_features(features, cfg.input_hw[1])
    if padded.shape[0] != cfg.input_hw[0]:
        raise ValueError(f"expected {cfg.input_hw[0]} time steps, got {padded.shape[0]}")
    return np.transpose(padded, (2, 0, 1))


def chunks_to_tiles(chunks: Sequence[np.ndarray], cfg: CodecConfig = CodecConfig(),
                    mfcc_cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    return np.stack([features_to_tile(mfcc(c, mfcc_cfg), cfg) for c in chunks]).astype(np.float32)


def compression_ratio(cfg: CodecConfig = CodecConfig()) -> dict:
    h, w = cfg.embedding_hw
    latent = h * w * cfg.embedding_dim
    return {
        "latent_size": latent,
        "vs_tile": latent / (cfg.input_hw[0] * cfg.input_hw[1]),
        "vs_chunk": latent / cfg.output_len,
    }


def split_corpus(n: int, ratios=(0.99, 0.005, 0.005), seed: int = 0):
    """Shuffle ``range(n)`` into disjoint train/val/test index arrays."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError("split ratios must be three positive fractions summing to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * ratios[1])))
    n_test = max(1, int(round(n * ratios[2])))
    if n_val + n_test >= n:
        raise ValueError(f"corpus of {n} chunks too small for a nonempty train/val/test split")
    return order[n_val + n_test:], order[:n_val], order[n_val:n_val + n_test]


@dataclass
class CodecTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    checkpoint_dir: str | None = None


@dataclass
class CodecTrainResult:
    model: CodecModel
    best_epoch: int
    history: list = field(default_factory=list)
    test_loss: float | None = None
    aborted: bool = False


def _evaluate(model, tiles, targets, batch_size=256):
    model.eval()
    totals = np.zeros(2)
    with torch.no_grad():
        for s in range(0, len(tiles), batch_size):
            x = torch.from_numpy(tiles[s:s + batch_size])
            y = torch.from_numpy(targets[s:s + batch_size])
            total, rec, _, _ = model.loss(x, y)
            totals += np.array([total.item(), rec.item()]) * len(x)
    return totals / len(tiles)


def save_codec(model: CodecModel, path, extra=None):
    torch.save({
        "version": CHECKPOINT_VERSION,
        "kind": "codec",
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_codec(path) -> CodecModel:
    if not Path(path).exists():
        raise FileNotFoundError(f"codec checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "codec" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} codec checkpoint")
    cfg = CodecConfig.from_dict(blob["config"])
    if cfg.hash() != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    model = CodecModel(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def train_codec(chunks: np.ndarray, split, cfg: CodecConfig = CodecConfig(),
                train_cfg: CodecTrainConfig = CodecTrainConfig(),
                mfcc_cfg: MfccConfig = MfccConfig()) -> CodecTrainResult:
    """Train on ``chunks[split[0]]`` and restore the epoch with lowest validation loss.

    ``chunks`` is an (N, 1470) array of raw waveform chunks; ``split`` holds
    disjoint (train, val, test) index arrays. Every epoch is checkpointed (to
    ``train_cfg.checkpoint_dir`` when given, in memory otherwise). A
    non-finite training loss stops training; the best finite checkpoint so far
    is returned with ``aborted=True``.
    """
    train_idx, val_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in split)
    if len(val_idx) == 0 or len(test_idx) == 0:
        raise ValueError("validation and test splits must be nonempty")
    if set(train_idx) & set(val_idx) or set(train_idx) & set(test_idx) or set(val_idx) & set(test_idx):
        raise ValueError("train/val/test splits must be disjoint")
    chunks = np.asarray(chunks, dtype=np.float32)
    tiles = chunks_to_tiles(chunks, cfg, mfcc_cfg)

    model = CodecModel(cfg, seed=train_cfg.seed)
    opt = torch.optim.Adam(list(model.encoder.parameters()) + list(model.decoder.parameters()), lr=train_cfg.lr)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history, snapshots = [], {}
    best_epoch, best_val = None, math.inf
    aborted = False
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(train_idx), generator=gen).numpy()
        recent = []
        running, seen = 0.0, 0
        for s in range(0, len(perm), train_cfg.batch_size):
            idx = train_idx[perm[s:s + train_cfg.batch_size]]
            x = torch.from_numpy(tiles[idx])
            y = torch.from_numpy(chunks[idx])
            total, rec, qr, z = model.loss(x, y)
            if not torch.isfinite(total):
                aborted = True
                break
            opt.zero_grad()
            total.backward()
            opt.step()
            flat = z.detach().permute(0, 2, 3, 1).reshape(-1, cfg.embedding_dim)
            model.codebook.ema_update(flat, qr.indices.reshape(-1))
            recent.append(flat)
            running += total.item() * len(idx)
            seen += len(idx)
        if aborted:
            log.warning("non-finite codec loss at epoch %d; keeping epoch %s", epoch, best_epoch)
            break
        model.codebook.end_epoch(torch.cat(recent), cfg.dead_code_epochs, gen)
        val_total, val_rec = _evaluate(model, tiles[val_idx], chunks[val_idx])
        record = {"epoch": epoch, "train_loss": running / max(seen, 1),
                  "val_loss": float(val_total), "val_recon": float(val_rec)}
        history.append(record)
        log.info(json.dumps(record))
        state = copy.deepcopy(model.state_dict())
        snapshots[epoch] = state
        if ckpt_dir:
            save_codec(model, ckpt_dir / f"codec_epoch{epoch:04d}.pt", extra=record)
        if not math.isfinite(val_total):
            aborted = True
            break
        if val_total < best_val:
            best_val, best_epoch = val_total, epoch
        if ckpt_dir:
            with open(ckpt_dir / "curve.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    if best_epoch is None:
        raise RuntimeError("codec training produced no finite checkpoint")
    model.load_state_dict(snapshots[best_epoch])
    model.eval()
    test_total, _ = _evaluate(model, tiles[test_idx], chunks[test_idx])
    return CodecTrainResult(model, best_epoch, history, float(test_total), aborted)


@torch.no_grad()
def encode_latents(model: CodecModel, tiles: np.ndarray) -> np.ndarray:
    """Quantized, flattened latents for a stack of codec input tiles, (N, 50)."""
    model.eval()
    z = model.encode(torch.as_tensor(tiles, dtype=torch.float32))
    return quantize(z, model.codebook.entries).latent.numpy()


def latents_for_segment(chunks: Sequence[np.ndarray], model: CodecModel,
                        mfcc_cfg: MfccConfig = MfccConfig()) -> LatentClip:
    """Stack the latents of exactly 30 consecutive chunks into a (30, 50, 1) clip."""
    if len(chunks) != CLIP_FRAMES:
        raise ValueError(f"need exactly {CLIP_FRAMES} chunks, got {len(chunks)}")
    tiles = chunks_to_tiles(chunks, model.cfg, mfcc_cfg)
    lat = encode_latents(model, tiles)
    if lat.shape[1] != LATENT_SIZE:
        raise ValueError(f"codec latent has {lat.shape[1]} values, expected {LATENT_SIZE}")
    return LatentClip(lat[..., None])
