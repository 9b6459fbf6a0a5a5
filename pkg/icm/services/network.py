"""
The in-context attention network g_theta.

Subtokens (A_bar row-major, I_hat) are projected, mixed by masked self-attention
inside each token and average-pooled into token embeddings. Query invariants are
projected separately; every main block is applied twice with the same parameters:
once as query -> context cross-attention and once as context self-attention.
No positional encoding is used anywhere, so outputs are invariant to token and
subtoken order. Everything runs in float64.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator
from torch import nn

from config import settings
from icm.errors import NonFiniteActivation, ShapeMismatch
from icm.services.tokenizer import Context, TokenSet, full_context

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SUBTOKEN_FEATURES = 6
QUERY_FEATURES = 2


class NetworkConfig(BaseModel):
    embed_dim: int = Field(64, ge=1)
    head_count: int = Field(4, ge=1)
    subtoken_blocks: int = Field(2, ge=1)
    main_blocks: int = Field(4, ge=1)
    ffn_hidden: int = Field(128, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _heads_divide(self) -> "NetworkConfig":
        if self.embed_dim % self.head_count:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by head_count {self.head_count}.")
        return self


@dataclass
class EmbeddingBatch:
    context_embeddings: np.ndarray
    query_embeddings: Optional[np.ndarray]
    field_embeddings: Dict[int, np.ndarray]


def _check_finite(x: torch.Tensor, layer: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteActivation(f"Non-finite activation in {layer}.", layer=layer)
    return x


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.k_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.v_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.o_proj = nn.Linear(dim, dim, dtype=DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x_q: torch.Tensor,
        x_kv: torch.Tensor,
        kv_mask: Optional[torch.Tensor] = None,
        head_mask: Optional[torch.Tensor] = None,
        chunk: Optional[int] = None,
    ) -> torch.Tensor:
        """
        Args:
            x_q: (B, Lq, d) query-side embeddings.
            x_kv: (B, Lk, d) key/value-side embeddings.
            kv_mask: (B, Lk) True for valid keys.
            head_mask: (H,) multipliers applied to each head's output.
            chunk: Query rows per softmax evaluation; rows are independent.
        """
        q = self._split(self.q_proj(x_q)) / np.sqrt(self.head_dim)
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        bias = None
        if kv_mask is not None:
            bias = torch.zeros(kv_mask.shape, dtype=DTYPE).masked_fill(~kv_mask, float("-inf"))[:, None, None, :]

        rows = q.shape[2]
        step = rows if not chunk or chunk >= rows else chunk
        parts = []
        for start in range(0, rows, step):
            scores = q[:, :, start:start + step] @ k.transpose(-1, -2)
            if bias is not None:
                scores = scores + bias
            # softmax subtracts the row max internally
            parts.append(torch.softmax(scores, dim=-1) @ v)
        out = torch.cat(parts, dim=2)
        if head_mask is not None:
            out = out * head_mask.to(DTYPE)[None, :, None, None]
        b, _, n, _ = out.shape
        return self.o_proj(out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim))


class AttentionBlock(nn.Module):
    """Pre-norm residual block: x + Attn(LN(x), LN(kv)), then + FFN(LN(.))."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim, dtype=DTYPE)
        self.attention = MultiHeadAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden, dtype=DTYPE), nn.GELU(), nn.Linear(hidden, dim, dtype=DTYPE))

    def forward(self, x, kv=None, kv_mask=None, head_mask=None, chunk=None):
        h = self.norm_attn(x)
        h_kv = h if kv is None else self.norm_attn(kv)
        x = x + self.attention(h, h_kv, kv_mask=kv_mask, head_mask=head_mask, chunk=chunk)
        return x + self.ffn(self.norm_ffn(x))


class ICMNetwork(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.subtoken_proj = nn.Linear(SUBTOKEN_FEATURES, d, dtype=DTYPE)
        self.subtoken_blocks = nn.ModuleList(
            [AttentionBlock(d, config.head_count, config.ffn_hidden) for _ in range(config.subtoken_blocks)]
        )
        self.query_proj = nn.Linear(QUERY_FEATURES, d, dtype=DTYPE)
        self.main_blocks = nn.ModuleList(
            [AttentionBlock(d, config.head_count, config.ffn_hidden) for _ in range(config.main_blocks)]
        )
        self.final_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.output_proj = nn.Linear(d, 2, dtype=DTYPE)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Uniform fan-in initialization from the configured seed; layer norms start at identity."""
        generator = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / np.sqrt(module.in_features)
                    for p in (module.weight, module.bias):
                        p.copy_((2.0 * torch.rand(p.shape, generator=generator, dtype=DTYPE) - 1.0) * bound)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.fill_(0.0)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode_tokens(self, subtokens: torch.Tensor, mask: torch.Tensor, head_mask=None) -> torch.Tensor:
        """(T, K, 6) padded subtokens with (T, K) mask -> (T, d) pooled token embeddings."""
        x = _check_finite(self.subtoken_proj(subtokens), "subtoken_proj")
        for b, block in enumerate(self.subtoken_blocks):
            x = _check_finite(block(x, kv_mask=mask, head_mask=head_mask), f"subtoken_block_{b}")
        weights = mask.to(DTYPE)[..., None]
        return (x * weights).sum(dim=1) / weights.sum(dim=1)

    def forward(
        self,
        subtokens: torch.Tensor,
        mask: torch.Tensor,
        queries: torch.Tensor,
        head_mask: Optional[torch.Tensor] = None,
        chunk: Optional[int] = None,
        return_embeddings: bool = False,
    ):
        """
        Args:
            subtokens: (T, K, 6) padded subtoken features.
            mask: (T, K) True for real subtokens.
            queries: (Q, 2) normalized query invariants.
            head_mask: optional (H,) head multipliers used by every attention module.
            chunk: query-row chunk size for the attention softmax.
            return_embeddings: also return final context and query embeddings.

        Returns:
            (Q, 2) predicted scaled gradients, optionally with the embeddings.
        """
        if subtokens.ndim != 3 or subtokens.shape[-1] != SUBTOKEN_FEATURES or mask.shape != subtokens.shape[:2]:
            raise ShapeMismatch(f"Subtoken tensor {tuple(subtokens.shape)} / mask {tuple(mask.shape)} inconsistent.")
        if queries.ndim != 2 or queries.shape[-1] != QUERY_FEATURES:
            raise ShapeMismatch(f"Queries must have shape (Q, 2), got {tuple(queries.shape)}.")

        c = self.encode_tokens(subtokens, mask, head_mask)[None]
        q = _check_finite(self.query_proj(queries), "query_proj")[None]
        for b, block in enumerate(self.main_blocks):
            q = _check_finite(block(q, kv=c, head_mask=head_mask, chunk=chunk), f"main_block_{b}_cross")
            c = _check_finite(block(c, head_mask=head_mask, chunk=chunk), f"main_block_{b}_self")
        out = _check_finite(self.output_proj(self.final_norm(q[0])), "output_proj")
        if return_embeddings:
            return out, c[0], q[0]
        return out


# --- Context plumbing ---

def context_tensors(context: Context) -> Tuple[torch.Tensor, torch.Tensor]:
    """Padded (T, K, 6) subtoken features and (T, K) mask of a context."""
    tokens = context.tokens
    counts = tokens.counts
    T, K = len(tokens), int(counts.max()) if len(tokens) else 0
    owners = tokens.owners
    positions = np.arange(tokens.subtoken_count) - np.repeat(tokens.offsets[:-1], counts)
    features = np.concatenate([tokens.A_bar.reshape(-1, 4), context.I_hat], axis=1)
    padded = np.zeros((T, K, SUBTOKEN_FEATURES))
    padded[owners, positions] = features
    mask = np.zeros((T, K), dtype=bool)
    mask[owners, positions] = True
    return torch.from_numpy(padded), torch.from_numpy(mask)


def build_network(config: NetworkConfig) -> ICMNetwork:
    model = ICMNetwork(config)
    logger.info("network built embed_dim=%d heads=%d parameters=%d", config.embed_dim, config.head_count, model.parameter_count())
    return model


def predict(
    model: ICMNetwork,
    context: Context,
    queries: np.ndarray,
    head_mask: Optional[torch.Tensor] = None,
    chunk: Optional[int] = None,
) -> np.ndarray:
    """Scaled gradients at already normalized queries, without autograd."""
    subtokens, mask = context_tensors(context)
    with torch.no_grad():
        out = model(
            subtokens,
            mask,
            torch.as_tensor(np.asarray(queries, dtype=float).reshape(-1, 2)),
            head_mask=head_mask,
            chunk=chunk or settings.ATTENTION_CHUNK,
        )
    return out.numpy()


def backward(
    model: ICMNetwork,
    context: Context,
    queries: np.ndarray,
    cotangent: np.ndarray,
    head_mask: Optional[torch.Tensor] = None,
) -> Dict[str, np.ndarray]:
    """Gradients of sum(cotangent * outputs) with respect to every parameter."""
    subtokens, mask = context_tensors(context)
    model.zero_grad(set_to_none=True)
    out = model(subtokens, mask, torch.as_tensor(np.asarray(queries, dtype=float)), head_mask=head_mask)
    cotangent = torch.as_tensor(np.asarray(cotangent, dtype=float))
    if cotangent.shape != out.shape:
        raise ShapeMismatch(f"Cotangent {tuple(cotangent.shape)} does not match outputs {tuple(out.shape)}.")
    (out * cotangent).sum().backward()
    return {
        name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for name, p in model.named_parameters()
    }


def embed_contexts(model: ICMNetwork, context: Context) -> EmbeddingBatch:
    """Final-layer context embeddings per token and their mean per field."""
    subtokens, mask = context_tensors(context)
    anchor = torch.zeros((1, 2), dtype=DTYPE)
    with torch.no_grad():
        _, c, _ = model(subtokens, mask, anchor, chunk=settings.ATTENTION_CHUNK, return_embeddings=True)
    embeddings = c.numpy()
    field_ids = context.tokens.field_ids
    fields = {int(f): embeddings[field_ids == f].mean(axis=0) for f in np.unique(field_ids)}
    return EmbeddingBatch(context_embeddings=embeddings, query_embeddings=None, field_embeddings=fields)


def field_embeddings(model: ICMNetwork, fields: Sequence[TokenSet]) -> Dict[int, np.ndarray]:
    """Mean final-layer embedding of each field, every field encoded as its own context."""
    embeddings = {}
    for tokens in fields:
        field_id = int(tokens.field_ids[0])
        if field_id in embeddings:
            raise ValueError(f"Field id {field_id} appears twice.")
        embeddings[field_id] = embed_contexts(model, full_context([tokens])).field_embeddings[field_id]
    return embeddings


def parameter_manifest(model: nn.Module) -> List[Tuple[str, List[int]]]:
    return [(name, list(p.shape)) for name, p in model.named_parameters()]
