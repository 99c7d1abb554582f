"""Transformer caption generator.

The decoder runs causal self-attention over caption tokens and multi-head
cross-attention over the row-wise concatenation of the four encoding streams
(text, image, face, object), each first mapped to the model width by its own
learned projection. The final-layer state at the sentence-end token is the
caption's coherence embedding used by the contrastive mechanisms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
from torch import nn

from .corpus import RESERVED_TOKENS, Corpus
from .encoders import (
    EncoderConfig,
    FeatureBundle,
    FeatureStore,
    ToyPatchEncoder,
    ToyTextEncoder,
    load_cached_features,
)
from .errors import ContractError, ValidationError
from .layers import FeedForward, MultiHeadAttention, causal_mask, sinusoidal_positions


class Vocab:
    """Token <-> id bijection with reserved ids 0-3 for <s> </s> <unk> <pad>."""

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token: list[str] = list(RESERVED_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for token in tokens:
            if token in self._token_to_id:
                if token in RESERVED_TOKENS:
                    continue
                raise ValidationError(f"duplicate vocabulary token {token!r}")
            self._token_to_id[token] = len(self._id_to_token)
            self._id_to_token.append(token)

    bos_id = 0
    eos_id = 1
    unk_id = 2
    pad_id = 3

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "Vocab":
        """Sorted token inventory from train-split captions, titles, and bodies.

        Falls back to all documents when the corpus carries no train split.
        """
        docs = [d for d in corpus if d.split == "train"] or list(corpus)
        seen: set[str] = set()
        for doc in docs:
            seen.update(doc.title)
            seen.update(doc.body)
            for img in doc.images:
                seen.update(img.caption)
        return cls(sorted(seen - set(RESERVED_TOKENS)))

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self._token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def to_list(self) -> list[str]:
        """Non-reserved tokens in id order (checkpoint serialization)."""
        return self._id_to_token[len(RESERVED_TOKENS) :]


@dataclass(frozen=True)
class ModelConfig:
    """Decoder geometry. Reference scale is n_heads=16, d_model=1024;
    the toy defaults keep everything runnable on a CPU."""

    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 0  # filled from the vocabulary
    max_len: int = 40
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class DecoderOutput:
    """Per-step final-layer states and token logits for one caption."""

    step_states: torch.Tensor  # [T, d_model]
    logits: torch.Tensor  # [T, vocab_size]
    end_state: Optional[torch.Tensor]  # state at the first </s>, if present


def end_state(output: DecoderOutput) -> torch.Tensor:
    """The coherence embedding: decoder state at the sentence-end token."""
    if output.end_state is None:
        raise ContractError("caption contains no </s> token; no end state available")
    return output.end_state


@dataclass
class GenerativeLoss:
    total: torch.Tensor  # summed negative log likelihood
    per_token: torch.Tensor
    n_tokens: int


def generative_loss(
    logits: torch.Tensor, targets: torch.Tensor, pad_mask: torch.Tensor
) -> GenerativeLoss:
    """Summed NLL of ``targets`` under ``logits`` at positions where
    ``pad_mask`` is True. Shapes: [..., T, V], [..., T], [..., T]."""
    if logits.shape[:-1] != targets.shape or targets.shape != pad_mask.shape:
        raise ContractError(
            f"inconsistent shapes: logits {tuple(logits.shape)}, "
            f"targets {tuple(targets.shape)}, mask {tuple(pad_mask.shape)}"
        )
    n_tokens = int(pad_mask.sum())
    if n_tokens == 0:
        raise ValidationError("generative loss over an all-pad target")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    total = -(picked * pad_mask).sum()
    return GenerativeLoss(total=total, per_token=total / n_tokens, n_tokens=n_tokens)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_cross = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_ff = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)

    def forward(self, x, memory, self_mask, mem_pad_mask):
        q = self.norm_self(x)
        x = x + self.self_attn(q, q, attn_mask=self_mask)
        x = x + self.cross_attn(
            self.norm_cross(x), memory, key_padding_mask=mem_pad_mask
        )
        return x + self.ffn(self.norm_ff(x))


class CaptionGenerator(nn.Module):
    """Four-stream encoders plus the transformer caption decoder."""

    def __init__(self, model_cfg: ModelConfig, encoder_cfg: EncoderConfig, vocab: Vocab):
        super().__init__()
        if model_cfg.vocab_size and model_cfg.vocab_size != len(vocab):
            raise ValidationError(
                f"config vocab_size {model_cfg.vocab_size} != vocabulary size {len(vocab)}"
            )
        if model_cfg.vocab_size == 0:
            model_cfg = replace(model_cfg, vocab_size=len(vocab))
        self.cfg = model_cfg
        self.encoder_cfg = encoder_cfg
        self.vocab = vocab

        if encoder_cfg.mode == "toy":
            self.text_encoder = ToyTextEncoder(len(vocab), Vocab.pad_id, encoder_cfg)
            self.image_encoder = ToyPatchEncoder(encoder_cfg.raw_d_i, encoder_cfg.d_i)
            self.face_encoder = ToyPatchEncoder(encoder_cfg.raw_d_f, encoder_cfg.d_f)
            self.object_encoder = ToyPatchEncoder(encoder_cfg.raw_d_o, encoder_cfg.d_o)
        else:
            self.text_encoder = None
            self.image_encoder = None
            self.face_encoder = None
            self.object_encoder = None

        d = model_cfg.d_model
        self.proj_t = nn.Linear(encoder_cfg.d_t, d)
        self.proj_i = nn.Linear(encoder_cfg.d_i, d)
        self.proj_f = nn.Linear(encoder_cfg.d_f, d)
        self.proj_o = nn.Linear(encoder_cfg.d_o, d)
        self.memory_norm = nn.LayerNorm(d)

        self.embed = nn.Embedding(model_cfg.vocab_size, d)
        self.embed_dropout = nn.Dropout(model_cfg.dropout)
        self.layers = nn.ModuleList(DecoderLayer(model_cfg) for _ in range(model_cfg.n_layers))
        self.final_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, model_cfg.vocab_size)

    # -- encoding ----------------------------------------------------------

    def build_bundle(
        self, txt: Sequence[str], feature_key: str, store: FeatureStore
    ) -> FeatureBundle:
        """Encode one image-text pair into the four streams.

        Toy mode runs the trainable encoders over the context window and the
        stored raw patch/box matrices; cached mode returns the stored
        reference-dimension streams unchanged.
        """
        if self.encoder_cfg.mode == "cached":
            bundle = load_cached_features(feature_key, store)
            dtype = self.proj_t.weight.dtype
            return FeatureBundle(*(s.to(dtype) for _, s in bundle.streams()))
        raw = store.read(feature_key)
        dtype = self.proj_t.weight.dtype
        device = self.proj_t.weight.device
        ids = torch.tensor(self.vocab.encode(txt), dtype=torch.long, device=device)
        return FeatureBundle(
            x_t=self.text_encoder(ids),
            x_i=self.image_encoder(torch.as_tensor(raw[1], dtype=dtype, device=device)),
            x_f=self.face_encoder(torch.as_tensor(raw[2], dtype=dtype, device=device)),
            x_o=self.object_encoder(torch.as_tensor(raw[3], dtype=dtype, device=device)),
        )

    def memory_from_bundle(self, bundle: FeatureBundle) -> torch.Tensor:
        """Project each stream to d_model and concatenate rows (X_0)."""
        dtype = self.proj_t.weight.dtype
        parts = []
        for proj, (_, stream) in zip(
            (self.proj_t, self.proj_i, self.proj_f, self.proj_o), bundle.streams()
        ):
            if stream.shape[0] == 0:
                continue
            parts.append(proj(stream.to(dtype)))
        if not parts:
            raise ContractError("all four streams are empty; nothing to attend to")
        return self.memory_norm(torch.cat(parts, dim=0))

    # -- decoding ----------------------------------------------------------

    def encode_caption(self, tokens: Sequence[str]) -> torch.Tensor:
        device = self.embed.weight.device
        return torch.tensor(self.vocab.encode(tokens), dtype=torch.long, device=device)

    def forward_batch(
        self,
        cap_ids: torch.Tensor,  # [B, T] int64
        memory: torch.Tensor,  # [B, M, d_model]
        mem_pad_mask: Optional[torch.Tensor] = None,  # [B, M], True = padding
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced pass; returns (states [B, T, d], logits [B, T, V])."""
        bsz, t = cap_ids.shape
        if t > self.cfg.max_len:
            raise ValidationError(f"caption length {t} exceeds max_len {self.cfg.max_len}")
        if cap_ids.numel() and (cap_ids.min() < 0 or cap_ids.max() >= self.cfg.vocab_size):
            raise ValidationError("caption token id out of vocabulary range")
        x = self.embed(cap_ids)
        x = x + sinusoidal_positions(t, self.cfg.d_model, dtype=x.dtype, device=x.device)
        x = self.embed_dropout(x)
        mask = causal_mask(t, device=x.device)
        for layer in self.layers:
            x = layer(x, memory, mask, mem_pad_mask)
        states = self.final_norm(x)
        return states, self.out_proj(states)

    def forward(self, caption: Sequence[str], bundle: FeatureBundle) -> DecoderOutput:
        """Single-caption pass over one feature bundle."""
        cap_ids = self.encode_caption(caption)
        if cap_ids.numel() == 0:
            raise ContractError("empty caption")
        memory = self.memory_from_bundle(bundle)
        states, logits = self.forward_batch(
            cap_ids.unsqueeze(0), memory.unsqueeze(0), None
        )
        states, logits = states[0], logits[0]
        eos_positions = (cap_ids == Vocab.eos_id).nonzero(as_tuple=True)[0]
        end = states[int(eos_positions[0])] if eos_positions.numel() else None
        return DecoderOutput(step_states=states, logits=logits, end_state=end)


def pack_memories(memories: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad per-item memories into [B, Mmax, d] plus a True-is-pad mask."""
    if not memories:
        raise ContractError("no memories to pack")
    d = memories[0].shape[1]
    max_rows = max(m.shape[0] for m in memories)
    batch = torch.zeros(len(memories), max_rows, d, dtype=memories[0].dtype)
    pad = torch.ones(len(memories), max_rows, dtype=torch.bool)
    for i, m in enumerate(memories):
        batch[i, : m.shape[0]] = m
        pad[i, : m.shape[0]] = False
    return batch, pad


def pack_captions(
    caption_ids: Sequence[Sequence[int]], pad_id: int = Vocab.pad_id
) -> torch.Tensor:
    """Right-pad integer caption sequences into a [B, Tmax] int64 tensor."""
    max_len = max(len(c) for c in caption_ids)
    out = torch.full((len(caption_ids), max_len), pad_id, dtype=torch.long)
    for i, ids in enumerate(caption_ids):
        out[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out
