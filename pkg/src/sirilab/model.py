"""Miniature vision-language grounding transformer.

Four parameter roles, each a top-level submodule so parameter names carry
the role as prefix:

* ``V``  visual backbone (two conv stages plus a dilated low-level branch)
  and its projection into the shared space
* ``L``  token embedding, one self-attention block and its projection
* ``E``  the vision-language fusion encoder
* ``D``  one or two decoders (``D.main``, optionally ``D.aux``), each with its
  own box and soft-token heads and, when learnable, its queries

Constant queries live outside every role as buffers named ``Q.constant.<name>``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MAX_EXPR_LEN, VOCAB
from .objectives import box_cxcywh_to_xyxy
from .queries import QuerySpec, make_queries

ROLES = ("V", "L", "E", "D")
QUERY_CODES = {"L": "learnable", "C": "constant"}
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 3
    attention_heads: int = 4
    n_queries: int = 16
    soft_token_len: int = 2
    visual_patch: int = 8
    vocab_size: int = len(VOCAB)
    max_expr_len: int = MAX_EXPR_LEN
    feedforward_dim: int | None = None
    backbone_dim: int = 32
    image_size: int = 64
    dropout: float = 0.1
    main_queries: str = "L"
    aux_queries: str | None = None

    def __post_init__(self):
        if self.feedforward_dim is None:
            object.__setattr__(self, "feedforward_dim", 4 * self.embed_dim)
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.attention_heads:
            raise ConfigError("embed_dim must be divisible by attention_heads")
        if self.soft_token_len != 2:
            raise ConfigError("soft_token_len is fixed at 2")
        if self.visual_patch != 8:
            raise ConfigError("the toy backbone has a fixed total stride of 8")
        if self.image_size % self.visual_patch:
            raise ConfigError("image_size must be divisible by visual_patch")
        if self.backbone_dim % 4:
            raise ConfigError("backbone_dim must be divisible by 4")
        for q in (self.main_queries, self.aux_queries):
            if q is not None and q not in QUERY_CODES:
                raise ConfigError(f"query code must be 'L' or 'C', got {q!r}")
        if "C" in (self.main_queries, self.aux_queries):
            QuerySpec("constant", self.n_queries, self.embed_dim)
        if min(self.embed_dim, self.encoder_layers, self.decoder_layers, self.n_queries, self.vocab_size) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.visual_patch

    @property
    def decoders(self) -> dict[str, str]:
        out = {"main": self.main_queries}
        if self.aux_queries is not None:
            out["aux"] = self.aux_queries
        return out

    def single_decoder(self) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "aux_queries": None})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Prediction(NamedTuple):
    boxes: torch.Tensor  # (B, Q, 4) center-size, in (0, 1)
    logits: torch.Tensor  # (B, Q, 2), class 0 = belongs to the expression


class EncoderOutput(NamedTuple):
    memory: torch.Tensor  # (B, Nv + Nt, C)
    pad_mask: torch.Tensor  # (B, Nv + Nt), True at text padding
    attentions: tuple[torch.Tensor, ...]  # per layer (B, heads, T, T); empty unless requested
    n_visual: int
    n_text: int


def sine_table_1d(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    out = torch.zeros(length, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(angle)
    out[:, 1::2] = torch.cos(angle)[:, : dim // 2]
    return out.float()


def sine_table_2d(rows: int, cols: int, dim: int) -> torch.Tensor:
    """(rows*cols, dim) fixed encoding: first half encodes the row, second half the column."""
    half = dim // 2
    r = sine_table_1d(rows, half)
    c = sine_table_1d(cols, half)
    return torch.cat([r[:, None, :].expand(rows, cols, half), c[None, :, :].expand(rows, cols, half)], -1).reshape(rows * cols, dim)


def grid_centers(grid: int) -> torch.Tensor:
    """(grid*grid, 2) normalized (x, y) centers of the visual tokens, row-major."""
    c = (torch.arange(grid, dtype=torch.float32) + 0.5) / grid
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    return torch.stack([cx.reshape(-1), cy.reshape(-1)], -1)


class Attention(nn.Module):
    """Multi-head attention that hands back its per-head weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v, key_pad: torch.Tensor | None = None):
        b, nq, c = q.shape
        nk = k.shape[1]
        h = self.heads
        qh = self.q(q).view(b, nq, h, c // h).transpose(1, 2)
        kh = self.k(k).view(b, nk, h, c // h).transpose(1, 2)
        vh = self.v(v).view(b, nk, h, c // h).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(c // h)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = scores.softmax(-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, nq, c)
        return self.out(out), attn


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.ff = FeedForward(dim, ff, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_pad=None, pos=None):
        # pre-norm; positions enter queries and keys only
        h = self.norm1(x)
        qk = h if pos is None else h + pos
        a, w = self.attn(qk, qk, h, key_pad)
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.norm2(x)))
        return x, w


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.cross_attn = Attention(dim, heads)
        self.ff = FeedForward(dim, ff, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, tgt, query_pos, memory, mem_pad, mem_pos=None):
        h = self.norm1(tgt)
        q = h + query_pos
        tgt = tgt + self.drop(self.self_attn(q, q, h)[0])
        h = self.norm2(tgt)
        k = memory if mem_pos is None else memory + mem_pos
        a, w = self.cross_attn(h + query_pos, k, memory, mem_pad)
        tgt = tgt + self.drop(a)
        return tgt + self.drop(self.ff(self.norm3(tgt))), w


class VisualBackbone(nn.Module):
    """Stride-8 conv backbone with a dilated low-level branch added to the deep features.

    All convolutions use replicate padding so a constant image maps to a
    spatially constant feature map.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        low, out = cfg.backbone_dim // 2, cfg.backbone_dim
        self.stem = nn.Conv2d(3, low, 4, stride=4)
        self.deep1 = nn.Conv2d(low, out, 3, stride=2, padding=1, padding_mode="replicate")
        self.deep2 = nn.Conv2d(out, out, 3, padding=1, padding_mode="replicate")
        self.dilated1 = nn.Conv2d(low, out, 3, padding=2, dilation=2, padding_mode="replicate")
        self.dilated2 = nn.Conv2d(out, out, 3, stride=2, padding=2, dilation=2, padding_mode="replicate")
        self.norm = nn.LayerNorm(out)
        self.proj = nn.Linear(out, cfg.embed_dim)
        self.register_buffer("pos", sine_table_2d(cfg.grid, cfg.grid, out), persistent=False)
        self.use_dilated = True

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """Backbone features before positional encoding, (B, grid*grid, backbone_dim)."""
        low = F.relu(self.stem(image))
        deep = F.relu(self.deep2(F.relu(self.deep1(low))))
        if self.use_dilated:
            deep = deep + self.dilated2(F.relu(self.dilated1(low)))
        return self.norm(deep.flatten(2).transpose(1, 2))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        feats = self.features(image)
        if feats.shape[1] != self.pos.shape[0]:
            raise ValueError(f"image yields {feats.shape[1]} tokens, expected {self.pos.shape[0]}")
        return feats + self.pos


class LanguageBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.block = EncoderLayer(cfg.embed_dim, cfg.attention_heads, cfg.feedforward_dim, cfg.dropout)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.register_buffer("pos", sine_table_1d(cfg.max_expr_len, cfg.embed_dim), persistent=False)

    def features(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Contextual token features and the padding mask, before projection."""
        if tokens.shape[1] > self.pos.shape[0]:
            raise ValueError(f"expression longer than {self.pos.shape[0]} tokens")
        if (tokens < 0).any() or (tokens >= self.vocab_size).any():
            raise ValueError("token id outside the vocabulary")
        pad = tokens == VOCAB.pad_id
        if pad.all(dim=1).any():
            raise ValueError("expression must hold at least one non-pad token")
        x = self.embed(tokens) * math.sqrt(self.embed.embedding_dim) + self.pos[: tokens.shape[1]]
        x, _ = self.block(x, pad)
        return x, pad

    def forward(self, tokens):
        x, pad = self.features(tokens)
        return self.proj(x), pad


class FusionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg.embed_dim, cfg.attention_heads, cfg.feedforward_dim, cfg.dropout)
                                    for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x, pad, keep_attention=False, pos=None):
        attns = []
        for layer in self.layers:
            x, w = layer(x, pad, pos)
            if keep_attention:
                attns.append(w)
        return self.norm(x), tuple(attns)


class MLP(nn.Module):
    def __init__(self, dim: int, out: int, layers: int = 3):
        super().__init__()
        dims = [dim] * layers + [out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, learnable_queries: bool):
        super().__init__()
        if learnable_queries:
            self.query = nn.Parameter(torch.empty(cfg.n_queries, cfg.embed_dim))
        self.layers = nn.ModuleList(DecoderLayer(cfg.embed_dim, cfg.attention_heads, cfg.feedforward_dim, cfg.dropout)
                                    for _ in range(cfg.decoder_layers))
        self.box_head = MLP(cfg.embed_dim, 4, 3)
        self.class_head = nn.Linear(cfg.embed_dim, cfg.soft_token_len)
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.register_buffer("xy", grid_centers(cfg.grid), persistent=False)

    def run(self, memory, mem_pad, queries, mem_pos=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-query embeddings and the last layer's cross-attention ``(B, heads, Q, N)``."""
        b = memory.shape[0]
        query_pos = queries.unsqueeze(0).expand(b, -1, -1)
        tgt = torch.zeros_like(query_pos)
        w = None
        for layer in self.layers:
            tgt, w = layer(tgt, query_pos, memory, mem_pad, mem_pos)
        return self.norm(tgt), w

    def embed(self, memory, mem_pad, queries, mem_pos=None):
        return self.run(memory, mem_pad, queries, mem_pos)[0]

    def anchor(self, attn: torch.Tensor, n_visual: int) -> torch.Tensor:
        """Center each query looks at: its head-mean attention over visual tokens, renormalized, times their centers."""
        a = attn.mean(1)[..., :n_visual]
        return (a / a.sum(-1, keepdim=True).clamp_min(1e-12)) @ self.xy

    def heads(self, emb, anchor: torch.Tensor | None = None) -> Prediction:
        raw = self.box_head(emb)
        if anchor is not None:
            # the MLP predicts a center offset in logit space around the anchor
            r = anchor.clamp(1e-4, 1 - 1e-4)
            raw = torch.cat([raw[..., :2] + torch.log(r / (1 - r)), raw[..., 2:]], -1)
        return Prediction(raw.sigmoid(), self.class_head(emb))


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.V = VisualBackbone(cfg)
        self.L = LanguageBackbone(cfg)
        self.E = FusionEncoder(cfg)
        self.D = nn.ModuleDict({name: Decoder(cfg, code == "L") for name, code in cfg.decoders.items()})
        for name, code in cfg.decoders.items():
            if code == "C":
                q, _ = make_queries(QuerySpec("constant", cfg.n_queries, cfg.embed_dim))
                self.register_buffer(f"Q_constant_{name}", q)
        self.register_buffer("mem_pos", sine_table_2d(cfg.grid, cfg.grid, cfg.embed_dim), persistent=False)
        self.steps_taken = 0

    # canonical names ------------------------------------------------------
    def param_tree(self) -> dict[str, torch.Tensor]:
        """Role-prefixed parameter name -> tensor (live references)."""
        return dict(self.named_parameters())

    def constant_queries(self) -> dict[str, torch.Tensor]:
        return {f"Q.constant.{name}": getattr(self, f"Q_constant_{name}")
                for name, code in self.config.decoders.items() if code == "C"}

    def queries(self, decoder: str) -> torch.Tensor:
        if self.config.decoders[decoder] == "C":
            return getattr(self, f"Q_constant_{decoder}")
        return self.D[decoder].query

    # forward pieces -------------------------------------------------------
    def encode(self, images, tokens, keep_attention=False) -> EncoderOutput:
        vis = self.V.proj(self.V(images))
        txt, txt_pad = self.L(tokens)
        b, nv = vis.shape[:2]
        x = torch.cat([vis, txt], dim=1)
        pad = torch.cat([torch.zeros(b, nv, dtype=torch.bool), txt_pad], dim=1)
        memory, attns = self.E(x, pad, keep_attention, self.memory_pos(txt.shape[1]))
        return EncoderOutput(memory, pad, attns, nv, txt.shape[1])

    def memory_pos(self, n_text: int) -> torch.Tensor:
        """2D sine positions for the visual tokens, zeros for the text tokens."""
        return torch.cat([self.mem_pos, self.mem_pos.new_zeros(n_text, self.mem_pos.shape[1])])

    def decode(self, enc: EncoderOutput, decoder: str = "main") -> Prediction:
        dec = self.D[decoder]
        emb, attn = dec.run(enc.memory, enc.pad_mask, self.queries(decoder), self.memory_pos(enc.n_text))
        return dec.heads(emb, dec.anchor(attn, enc.n_visual))

    def forward(self, images, tokens, decoders: tuple[str, ...] = ("main",)) -> dict[str, Prediction]:
        tokens = trim_padding(tokens)
        enc = self.encode(images, tokens)
        return {name: self.decode(enc, name) for name in decoders}


def trim_padding(tokens: torch.Tensor) -> torch.Tensor:
    """Drop trailing columns that are padding in every row."""
    used = (tokens != VOCAB.pad_id).any(dim=0).nonzero()
    return tokens[:, : int(used.max()) + 1] if len(used) else tokens


def role_of(name: str) -> str:
    role = name.split(".", 1)[0]
    if role not in ROLES:
        raise KeyError(f"parameter {name!r} has no role prefix")
    return role


def role_params(model: nn.Module, role: str) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if role_of(n) == role}


def role_seed(base_seed: int, role: str, round_index: int) -> int:
    """Stable seed for the draw of ``role`` at ``round_index``."""
    return int(np.random.SeedSequence([base_seed, ROLES.index(role) + 1, round_index]).generate_state(1)[0])


def xavier_init_(params: dict[str, torch.Tensor], generator: torch.Generator) -> None:
    """Xavier-uniform for every matrix/kernel, zero biases, unit LayerNorm gains.

    Parameters are visited in sorted-name order so the draw is independent of
    dictionary construction order.
    """
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            if p.dim() >= 2:
                nn.init.xavier_uniform_(p, generator=generator)
            elif ".norm" in name and name.endswith(".weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def init_role_(model: GroundingModel, role: str, seed: int) -> None:
    xavier_init_(role_params(model, role), torch.Generator().manual_seed(seed))


def init_model(config: ModelConfig, seed: int) -> GroundingModel:
    """Fresh model; each role drawn from its own seed stream (round 0)."""
    torch.manual_seed(seed)
    model = GroundingModel(config)
    for role in ROLES:
        init_role_(model, role, role_seed(seed, role, 0))
    return model


def xavier_bound(p: torch.Tensor) -> float:
    fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(p)
    return math.sqrt(6.0 / (fan_in + fan_out))


# --- inference ------------------------------------------------------------

def select_query(logits: torch.Tensor) -> torch.Tensor:
    """Index of the query most likely to belong to the expression (lowest index on ties)."""
    prob = logits.softmax(-1)[..., 0]
    return prob.argmax(-1)  # torch.argmax returns the first maximal index


def predict_box(pred: Prediction) -> torch.Tensor:
    """Corner-form box of the selected query; accepts batched or single predictions."""
    boxes, logits = pred
    idx = select_query(logits)
    if boxes.dim() == 2:
        return box_cxcywh_to_xyxy(boxes[idx])
    return box_cxcywh_to_xyxy(boxes[torch.arange(boxes.shape[0]), idx])


def batch_tensors(images: np.ndarray, tokens: np.ndarray, boxes: np.ndarray | None = None):
    out = [torch.from_numpy(np.ascontiguousarray(images)), torch.from_numpy(np.ascontiguousarray(tokens))]
    if boxes is not None:
        out.append(torch.from_numpy(np.ascontiguousarray(boxes)))
    return out


# --- checkpoints ------------------------------------------------------------

def export_single_decoder(model: GroundingModel, keep: str = "main") -> GroundingModel:
    """Copy of ``model`` holding only decoder ``keep`` (renamed to ``main``)."""
    cfg = model.config
    single = GroundingModel(ModelConfig(**{**asdict(cfg), "main_queries": cfg.decoders[keep], "aux_queries": None}))
    state = {}
    for name, t in model.state_dict().items():
        if name.startswith("D."):
            if not name.startswith(f"D.{keep}."):
                continue
            name = "D.main." + name[len(f"D.{keep}."):]
        elif name.startswith("Q_constant_"):
            if name != f"Q_constant_{keep}":
                continue
            name = "Q_constant_main"
        state[name] = t.clone()
    single.load_state_dict(state)
    single.steps_taken = model.steps_taken
    single.eval()
    return single


def _blob_entries(model: GroundingModel) -> list[tuple[str, str | None, torch.Tensor]]:
    entries = [(n, role_of(n), p.detach()) for n, p in model.named_parameters()]
    entries += [(n, None, t.detach()) for n, t in model.constant_queries().items()]
    return entries


def save_checkpoint(model: GroundingModel, path: str | Path, meta: dict | None = None) -> Path:
    """``meta.json`` plus ``params.bin``: float32 little-endian tensors in manifest order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, offset, chunks = [], 0, []
    for name, role, t in _blob_entries(model):
        arr = t.cpu().numpy().astype("<f4", copy=False)
        manifest.append({"name": name, "role": role, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    (path / "params.bin").write_bytes(b"".join(chunks))
    doc = {"version": CHECKPOINT_VERSION, "config": model.config.to_json(), "tensors": manifest,
           "steps_taken": model.steps_taken, **(meta or {})}
    (path / "meta.json").write_text(json.dumps(doc, indent=2))
    return path


def load_checkpoint(path: str | Path) -> tuple[GroundingModel, dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')!r} unsupported")
    model = GroundingModel(ModelConfig.from_json(meta["config"]))
    blob = (path / "params.bin").read_bytes()
    params = model.param_tree()
    consts = model.constant_queries()
    names = {e["name"] for e in meta["tensors"]}
    missing = (set(params) | set(consts)) - names
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    with torch.no_grad():
        for e in meta["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
            target = params.get(e["name"], consts.get(e["name"]))
            if target is None:
                raise ValueError(f"unexpected tensor {e['name']!r} in checkpoint")
            target.copy_(torch.from_numpy(arr.copy()))
    model.steps_taken = meta.get("steps_taken", 0)
    model.eval()
    return model, meta
