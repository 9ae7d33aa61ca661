"""Toy encoder-decoder with index unpooling, the matting losses and checkpoint I/O."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as Fn
from torch import nn

from . import cpc
from .trimap import U, downsample_trimap, to_network

EPS = 1e-12


@dataclass
class NetConfig:
    widths: tuple[int, ...] = (16, 32, 32, 32)
    pool_stages: int = 2
    aspp: bool = True
    # "tgnl" runs the cross-patch context module; "none" feeds encoder features straight to the decoder
    context_mode: str = "tgnl"
    embed_channels: int | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not 1 <= self.pool_stages <= len(self.widths):
            raise ValueError("pool_stages must be between 1 and the number of encoder blocks")
        if self.context_mode not in ("tgnl", "none"):
            raise ValueError(f"unknown context_mode {self.context_mode!r}")

    @property
    def stride(self) -> int:
        return 2 ** self.pool_stages

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    @property
    def value_channels(self) -> int:
        return self.embed_channels or max(self.feature_channels // 2, 1)


class Encoded(NamedTuple):
    features: torch.Tensor
    skips: list
    indices: list


def unpool(x: torch.Tensor, indices: torch.Tensor, output_size) -> torch.Tensor:
    """Place values back at their recorded 2x2 max-pooling positions; zeros elsewhere."""
    return Fn.max_unpool2d(x, indices, kernel_size=2, stride=2, output_size=output_size)


def pool(x: torch.Tensor):
    return Fn.max_pool2d(x, kernel_size=2, stride=2, return_indices=True)


class MattingNet(nn.Module):
    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config = config or NetConfig()
        w = config.widths
        chans = (4,) + w
        self.blocks = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(w)))
        c = config.feature_channels
        if config.aspp:
            self.aspp = nn.ModuleList(nn.Conv2d(c, c, 3, padding=r, dilation=r) for r in (1, 2, 4))
            self.aspp_fuse = nn.Conv2d(3 * c, c, 1)
        if config.context_mode == "tgnl":
            self.embeddings = cpc.Embeddings(c, config.value_channels, config.value_channels)
            dec_in = 3 * config.value_channels
        else:
            dec_in = c
        p = config.pool_stages
        self.dec_head = nn.Conv2d(dec_in, w[p - 1], 3, padding=1)
        self.dec_blocks = nn.ModuleList(
            nn.Conv2d(2 * w[j], w[j - 1] if j > 0 else w[0], 3, padding=1) for j in reversed(range(p))
        )
        self.dec_out = nn.Conv2d(w[0], 1, 3, padding=1)

    @property
    def stride(self) -> int:
        return self.config.stride

    def encode(self, x: torch.Tensor) -> Encoded:
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by stride {self.stride}")
        skips, indices = [], []
        for i, conv in enumerate(self.blocks):
            x = Fn.relu(conv(x))
            if i < self.config.pool_stages:
                skips.append(x)
                x, idx = pool(x)
                indices.append(idx)
        if self.config.aspp:
            x = Fn.relu(self.aspp_fuse(torch.cat([Fn.relu(a(x)) for a in self.aspp], 1)))
        return Encoded(x, skips, indices)

    def decode(self, x: torch.Tensor, skips, indices) -> torch.Tensor:
        if x.shape[-2:] != indices[-1].shape[-2:]:
            raise ValueError(f"decoder input {tuple(x.shape[-2:])} does not match encoder output {tuple(indices[-1].shape[-2:])}")
        x = Fn.relu(self.dec_head(x))
        for conv, j in zip(self.dec_blocks, reversed(range(self.config.pool_stages))):
            x = unpool(x, indices[j], skips[j].shape[-2:])
            x = Fn.relu(conv(torch.cat([x, skips[j]], 1)))
        return torch.sigmoid(self.dec_out(x))

    def context_features(self, enc_features: torch.Tensor, trimap: np.ndarray, contexts) -> torch.Tensor:
        """Decoder input for one patch: CPC output, or raw features when CPC is disabled.

        ``trimap`` is at feature resolution; ``contexts`` is a list of
        ``(features, feature_trimap)`` pairs.
        """
        if self.config.context_mode == "none":
            return enc_features
        query = cpc.embed(enc_features, "query", self.embeddings, trimap)
        keyed = [cpc.embed(f, "context", self.embeddings, t) for f, t in contexts]
        return cpc.cpc_forward(query, keyed)

    def forward(self, query_x, query_trimaps, context_x=None, context_trimaps=None) -> torch.Tensor:
        """Batched prediction.

        query_x: (N, 4, S, S); query_trimaps: (N, S, S) uint8;
        context_x: (N, K, 4, S, S) or None; context_trimaps: (N, K, S, S).
        """
        enc = self.encode(query_x)
        if self.config.context_mode == "none":
            return self.decode(enc.features, enc.skips, enc.indices)
        n = query_x.shape[0]
        k = 0 if context_x is None else context_x.shape[1]
        if k:
            ctx_feats = self.encode(context_x.flatten(0, 1)).features.unflatten(0, (n, k))
        outs = []
        for b in range(n):
            qt = downsample_trimap(np.asarray(query_trimaps[b]), self.stride)
            ctx = [(ctx_feats[b, j], downsample_trimap(np.asarray(context_trimaps[b][j]), self.stride)) for j in range(k)]
            outs.append(self.context_features(enc.features[b], qt, ctx))
        return self.decode(torch.stack(outs), enc.skips, enc.indices)


def network_input(image: np.ndarray, trimap: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(4, S, S) tensor: RGB plus the trimap channel."""
    x = np.concatenate([np.moveaxis(image, -1, 0), to_network(trimap)[None]], 0)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform initialisation from a dedicated generator."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                module.bias.zero_()
    return model


def build_model(config: NetConfig | None = None, seed: int = 0) -> MattingNet:
    return init_params(MattingNet(config), seed)


# losses


def _weighted_mean(per_pixel: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    total = weights.sum()
    if float(total) <= 0:
        raise ValueError("loss weights sum to zero; no unknown pixels to supervise")
    return (per_pixel * weights).sum() / total


def loss_weights(blend: np.ndarray, trimap: np.ndarray) -> np.ndarray:
    """Blend mask restricted to unknown pixels."""
    return blend * (trimap == U)


def loss_alpha(alpha_pred: torch.Tensor, alpha_gt: torch.Tensor, weights: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    if alpha_pred.shape != alpha_gt.shape or alpha_pred.shape != weights.shape:
        raise ValueError("alpha_pred, alpha_gt and weights must share a shape")
    return _weighted_mean(torch.sqrt((alpha_gt - alpha_pred) ** 2 + eps), weights)


def loss_composite(alpha_pred, image, fg, bg, weights, eps: float = EPS) -> torch.Tensor:
    """Channels-first images: alpha (..., 1, H, W), RGB (..., 3, H, W), weights like alpha."""
    if alpha_pred.shape != weights.shape:
        raise ValueError("alpha_pred and weights must share a shape")
    resid = image - (alpha_pred * fg + (1 - alpha_pred) * bg)
    per_pixel = torch.sqrt((resid ** 2).sum(-3, keepdim=True) + eps)
    return _weighted_mean(per_pixel, weights)


def loss_overall(l_alpha, l_composite):
    return 0.5 * l_alpha + 0.5 * l_composite


@dataclass
class LossBreakdown:
    l_alpha: float
    l_composite: float
    l_overall: float


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients for every named parameter.

    Raises FloatingPointError naming the first parameter with a non-finite
    gradient.
    """
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    return grads


# checkpoints

MAGIC = b"PMCKPT01\n"


def save_checkpoint(model: MattingNet, path, extra: dict | None = None) -> None:
    """Flat float32 container: magic, manifest length, text manifest, raw arrays.

    Manifest lines are ``name<TAB>shape<TAB>byte_offset<TAB>byte_count``,
    preceded by a ``config`` line with the architecture as JSON.
    """
    header = {"config": asdict(model.config)}
    if extra:
        header.update(extra)
    lines = ["config\t" + json.dumps(header, sort_keys=True)]
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}\t{arr.nbytes}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path) -> tuple[dict, list[tuple[str, tuple[int, ...], int, int]], int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        text = fh.read(n).decode()
    lines = text.strip("\n").split("\n")
    key, payload = lines[0].split("\t", 1)
    if key != "config":
        raise ValueError("checkpoint manifest missing config line")
    header = json.loads(payload)
    entries = []
    for line in lines[1:]:
        name, shape, off, nbytes = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        entries.append((name, dims, int(off), int(nbytes)))
    return header, entries, len(MAGIC) + 8 + n


def load_checkpoint(path, config: NetConfig | None = None) -> MattingNet:
    header, entries, data_start = read_manifest(path)
    cfg = config or NetConfig(**header["config"])
    model = MattingNet(cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {name: shape for name, shape, _, _ in entries}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        bad = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        raise ValueError(f"checkpoint does not match architecture: missing {missing}, wrong shape {bad}")
    raw = Path(path).read_bytes()[data_start:]
    state = {}
    for name, shape, off, nbytes in entries:
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model
