"""The four encoding streams and the precomputed-feature cache.

Two encoder modes exist. ``cached`` loads all four streams (text, image,
face, object) from a binary feature cache produced offline by real backbone
networks; the reference dimensions are text/image/object width 2048, a
49-patch image grid, and at most 4 face rows of width 512. ``toy`` trains
small encoders in-process: an embedding + self-attention text encoder with
a learned per-layer mixing softmax, and per-patch linear projections for the
image-side streams whose raw inputs come from the same cache files.

Feature cache layout (one file per key): magic "CCF1", then four arrays,
each serialized as dtype code u8 (1 = little-endian float32), rank u8,
shape as u32 little-endian per dim, then the row-major payload. A JSON
manifest maps feature keys to file names and SHA-256 checksums.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ValidationError
from .layers import MultiHeadAttention, sinusoidal_positions

MAGIC = b"CCF1"
DTYPE_F32_LE = 1

# Reference stream dimensions for cached-feature mode.
REF_D_T = 2048
REF_IMAGE_SHAPE = (49, 2048)
REF_MAX_FACES = 4
REF_D_F = 512
REF_D_O = 2048


@dataclass(frozen=True)
class EncoderConfig:
    """Stream widths and toy-encoder sizes.

    In cached mode the widths are fixed by the reference backbones; toy mode
    uses the configured (much smaller) output widths and the ``raw_*`` input
    widths of the stored patch/box matrices.
    """

    mode: str = "toy"  # "toy" | "cached"
    d_t: int = 32
    d_i: int = 32
    d_f: int = 16
    d_o: int = 32
    n_text_layers: int = 2
    n_text_heads: int = 2
    raw_d_i: int = 16
    raw_d_f: int = 8
    raw_d_o: int = 16
    max_text_len: int = 512

    def __post_init__(self):
        if self.mode not in ("toy", "cached"):
            raise ValidationError(f"unknown encoder mode {self.mode!r}")
        if self.n_text_layers < 1:
            raise ValidationError("n_text_layers must be >= 1")

    @classmethod
    def cached(cls) -> "EncoderConfig":
        return cls(mode="cached", d_t=REF_D_T, d_i=REF_IMAGE_SHAPE[1], d_f=REF_D_F, d_o=REF_D_O)


@dataclass
class FeatureBundle:
    """The four per-image encoding streams the decoder attends to."""

    x_t: torch.Tensor  # [L_T, d_t]
    x_i: torch.Tensor  # [P, d_i]
    x_f: torch.Tensor  # [F, d_f]  (0 rows when no faces)
    x_o: torch.Tensor  # [L_O, d_o]  (0 rows when no objects)

    def __post_init__(self):
        for name, x in self.streams():
            if x.dim() != 2:
                raise ValidationError(f"stream {name} must be 2-D, got shape {tuple(x.shape)}")
            if x.numel() and not torch.isfinite(x).all():
                raise ValidationError(f"stream {name} contains non-finite values")

    def streams(self):
        return (("x_t", self.x_t), ("x_i", self.x_i), ("x_f", self.x_f), ("x_o", self.x_o))


# ---------------------------------------------------------------------------
# Binary feature cache
# ---------------------------------------------------------------------------


def write_feature_file(path: str | Path, arrays: Sequence[np.ndarray]) -> None:
    """Serialize exactly four float32 arrays in the CCF1 layout."""
    if len(arrays) != 4:
        raise FormatError(f"feature file holds exactly 4 arrays, got {len(arrays)}")
    blob = bytearray(MAGIC)
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob.append(DTYPE_F32_LE)
        blob.append(arr.ndim)
        for dim in arr.shape:
            blob.extend(struct.pack("<I", dim))
        blob.extend(arr.tobytes())
    Path(path).write_bytes(bytes(blob))


def read_feature_file(path: str | Path) -> tuple[np.ndarray, ...]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{Path(path).name}: bad magic {data[:4]!r}")
    offset = 4
    arrays = []
    for _ in range(4):
        if offset + 2 > len(data):
            raise FormatError(f"{Path(path).name}: truncated header")
        dtype_code, rank = data[offset], data[offset + 1]
        offset += 2
        if dtype_code != DTYPE_F32_LE:
            raise FormatError(f"{Path(path).name}: unsupported dtype code {dtype_code}")
        shape = []
        for _ in range(rank):
            (dim,) = struct.unpack_from("<I", data, offset)
            shape.append(dim)
            offset += 4
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(data):
            raise FormatError(f"{Path(path).name}: truncated payload")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays.append(arr.copy())
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{Path(path).name}: {len(data) - offset} trailing bytes")
    return tuple(arrays)


class FeatureStore:
    """Directory of CCF1 feature files addressed by key through a manifest."""

    MANIFEST = "manifest.json"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._entries: dict[str, dict] = {}
        self._cache: dict[str, tuple[np.ndarray, ...]] = {}
        manifest = self.root / self.MANIFEST
        if manifest.exists():
            payload = json.loads(manifest.read_text(encoding="utf-8"))
            if payload.get("format") != "CCF1":
                raise FormatError(f"{manifest}: unknown manifest format")
            self._entries = dict(payload["entries"])

    @classmethod
    def create(cls, root: str | Path) -> "FeatureStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        store = cls.__new__(cls)
        store.root = root
        store._entries = {}
        store._cache = {}
        return store

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def keys(self):
        return self._entries.keys()

    def write(self, key: str, arrays: Sequence[np.ndarray]) -> None:
        name = hashlib.sha256(key.encode("utf-8")).hexdigest()[:16] + ".ccf"
        path = self.root / name
        write_feature_file(path, arrays)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self._entries[key] = {"file": name, "sha256": digest}
        self._cache.pop(key, None)

    def save_manifest(self) -> None:
        payload = {"format": "CCF1", "entries": dict(sorted(self._entries.items()))}
        (self.root / self.MANIFEST).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def read(self, key: str, verify_checksum: bool = False) -> tuple[np.ndarray, ...]:
        if key not in self._entries:
            raise KeyError(f"feature key {key!r} not in store {self.root}")
        if key in self._cache and not verify_checksum:
            return self._cache[key]
        entry = self._entries[key]
        path = self.root / entry["file"]
        if verify_checksum:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != entry["sha256"]:
                raise FormatError(f"checksum mismatch for feature key {key!r}")
        arrays = read_feature_file(path)
        self._cache[key] = arrays
        return arrays


def load_cached_features(feature_key: str, store: FeatureStore) -> FeatureBundle:
    """Load one bundle in cached mode, enforcing the reference dimensions."""
    x_t, x_i, x_f, x_o = store.read(feature_key)
    if x_t.ndim != 2 or x_t.shape[1] != REF_D_T:
        raise FormatError(f"{feature_key!r}: text stream must be [*, {REF_D_T}], got {x_t.shape}")
    if tuple(x_i.shape) != REF_IMAGE_SHAPE:
        raise FormatError(f"{feature_key!r}: image stream must be {REF_IMAGE_SHAPE}, got {x_i.shape}")
    if x_f.ndim != 2 or x_f.shape[0] > REF_MAX_FACES or x_f.shape[1] != REF_D_F:
        raise FormatError(
            f"{feature_key!r}: face stream must be [<= {REF_MAX_FACES}, {REF_D_F}], got {x_f.shape}"
        )
    if x_o.ndim != 2 or x_o.shape[1] != REF_D_O:
        raise FormatError(f"{feature_key!r}: object stream must be [*, {REF_D_O}], got {x_o.shape}")
    return FeatureBundle(*(torch.from_numpy(np.ascontiguousarray(a)) for a in (x_t, x_i, x_f, x_o)))


# ---------------------------------------------------------------------------
# Toy encoders
# ---------------------------------------------------------------------------


class ToyTextEncoder(nn.Module):
    """Embedding + a stack of self-attention layers, mixed by a learned softmax.

    Stands in for a pretrained bidirectional text encoder: the outputs of all
    layers are combined as sum_k softmax(mix)_k * layer_k, keeping the
    per-layer weighted sum of the reference setup.
    """

    def __init__(self, vocab_size: int, pad_id: int, config: EncoderConfig):
        super().__init__()
        self.pad_id = pad_id
        self.d_t = config.d_t
        self.max_len = config.max_text_len
        self.embed = nn.Embedding(vocab_size, config.d_t)
        self.layers = nn.ModuleList(
            _TextLayer(config.d_t, config.n_text_heads) for _ in range(config.n_text_layers)
        )
        self.mix_logits = nn.Parameter(torch.zeros(config.n_text_layers))

    def layer_outputs(self, token_ids: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer encodings, each [L, d_t]; empty input becomes one pad row."""
        if token_ids.numel() == 0:
            token_ids = torch.tensor([self.pad_id], device=self.embed.weight.device)
        if token_ids.numel() > self.max_len:
            raise ValidationError(
                f"text of {token_ids.numel()} tokens exceeds max_text_len {self.max_len}"
            )
        h = self.embed(token_ids)
        h = h + sinusoidal_positions(
            h.shape[0], self.d_t, dtype=h.dtype, device=h.device
        )
        outputs = []
        for layer in self.layers:
            h = layer(h)
            outputs.append(h)
        return outputs

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """[L] int64 -> [L, d_t]: softmax-mixed sum of the layer outputs."""
        mix = torch.softmax(self.mix_logits, dim=0)
        stacked = torch.stack(self.layer_outputs(token_ids))  # [K, L, d_t]
        return (mix.view(-1, 1, 1) * stacked).sum(dim=0)


class _TextLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        normed = self.norm(h).unsqueeze(0)
        return h + self.attn(normed, normed).squeeze(0)


class ToyPatchEncoder(nn.Module):
    """Learned linear projection applied to each raw patch/box feature row."""

    def __init__(self, d_raw: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(d_raw, d_out)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.dim() != 2:
            raise ValidationError(f"patch grid must be 2-D, got shape {tuple(grid.shape)}")
        if grid.numel() and not torch.isfinite(grid).all():
            raise ValidationError("patch grid contains non-finite values")
        return self.proj(grid)
