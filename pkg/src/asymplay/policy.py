"""Viewpoint-invariant driving policy.

Every geometric input is a PairPose between two frames, so outputs are
unchanged by a rigid transform of the whole scene. Layout conventions:
actor features are ``(B, N, H, D)`` (batch, actors, history, hidden),
map features are ``(B, K, D)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from asymplay.dynamics import PHI_MAX, U_MAX
from asymplay.scenegraph import pairpose_tensor

ROLES = ("student", "teacher_adversary", "teacher_demonstrator")
_POS_SCALE = 10.0
_NEG = -1e30


@dataclass(frozen=True)
class PolicyConfig:
    hidden_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    history_len: int = 3
    knn_k: int = 8
    role: str = "student"
    ffn_mult: int = 4
    decoder_hidden: int = 64
    map_rounds: int = 2
    u_max: float = U_MAX
    phi_max: float = PHI_MAX
    # None scales each layer by 1/sqrt(fan_in); a number fixes the std for every layer
    init_std: float | None = None

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.history_len < 1 or self.num_blocks < 1:
            raise ValueError("history_len and num_blocks must be >= 1")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def architecture(self) -> dict:
        d = asdict(self)
        d.pop("role")
        return d


def _init_linear(layer: nn.Linear, generator: torch.Generator, std: float | None = None) -> None:
    if std is None:
        std = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        nn.init.trunc_normal_(layer.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
        layer.bias.zero_()


def _mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def scaled_pose_features(pp: torch.Tensor) -> torch.Tensor:
    return torch.cat([pp[..., :2] / _POS_SCALE, pp[..., 2:4], pp[..., 4:] / _POS_SCALE], dim=-1)


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe


class RelativeAttention(nn.Module):
    """Multi-head attention of one element over a set of context vectors.

    The attending element supplies the key; each context entry ``h_j + r_ij``
    supplies both query and value. The relative part ``r_ij`` is the output
    of a two-layer pair MLP whose last linear layer is folded into the
    query/value projection, so the pairwise tensor is projected only once.
    """

    def __init__(self, dim: int, heads: int, pair_features: int | None = None):
        super().__init__()
        self.heads = heads
        self.dh = dim // heads
        self.w_key = nn.Linear(dim, dim)
        self.w_qv = nn.Linear(dim, 2 * dim)
        self.w_out = nn.Linear(dim, dim)
        if pair_features is not None:
            self.pair_in = nn.Linear(pair_features, dim)
            self.pair_out = nn.Linear(dim, dim)

    def relative(self, pair: torch.Tensor) -> torch.Tensor:
        """Projected relative encodings ``W_qv MLP(pair)`` without the projection bias."""
        hidden = torch.relu(self.pair_in(pair))
        w = self.w_qv.weight @ self.pair_out.weight
        b = self.w_qv.weight @ self.pair_out.bias
        return torch.nn.functional.linear(hidden, w, b)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, rel: torch.Tensor | None = None, mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (..., D); ctx: (..., J, D) or broadcastable; rel: projected (..., J, 2D); mask: (..., J)
        qv = self.w_qv(ctx)
        if rel is not None:
            qv = qv + rel
        *lead, j, _ = qv.shape
        q, v = qv.reshape(*lead, j, 2, self.heads, self.dh).unbind(-3)
        k = self.w_key(x).reshape(*x.shape[:-1], self.heads, 1, self.dh)
        q = q.transpose(-2, -3)  # (..., heads, J, dh)
        v = v.transpose(-2, -3)
        scores = (k * q).sum(-1) / math.sqrt(self.dh)  # (..., heads, J)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(-2), _NEG)
        w = torch.softmax(scores, dim=-1)
        out = (w.unsqueeze(-1) * v).sum(-2)
        return self.w_out(out.reshape(*out.shape[:-2], -1))


class TimeAttention(nn.Module):
    """Standard multi-head self-attention across an actor's history steps."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.dh = dim // heads
        self.w_qkv = nn.Linear(dim, 3 * dim)
        self.w_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, h, d = x.shape
        q, k, v = self.w_qkv(x).reshape(*lead, h, 3, self.heads, self.dh).unbind(-3)
        q, k, v = (t.transpose(-2, -3) for t in (q, k, v))  # (..., heads, H, dh)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dh), dim=-1)
        return self.w_out((w @ v).transpose(-2, -3).reshape(*lead, h, d))


class Block(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm_time = nn.LayerNorm(d)
        self.time_attn = TimeAttention(d, cfg.num_heads)
        self.norm_actor = nn.LayerNorm(d)
        self.actor_attn = RelativeAttention(d, cfg.num_heads, pair_features=5)
        self.norm_map = nn.LayerNorm(d)
        self.map_attn = RelativeAttention(d, cfg.num_heads, pair_features=5)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = _mlp([d, cfg.ffn_mult * d, d])

    def forward(self, x, pe, actor_pp, actor_mask, map_ctx, map_pp, map_mask):
        b, n, h, d = x.shape
        # actor-to-time: every history step attends over the actor's own history
        x = x + self.time_attn(self.norm_time(x) + pe)

        # actor-to-actor at each history step, relative encodings per pair
        xa = self.norm_actor(x).transpose(1, 2)  # (B, H, N, D)
        rel = self.actor_attn.relative(actor_pp)  # (B, H, N_i, N_j, 2D)
        mask = actor_mask[:, None, None, :]
        x = x + self.actor_attn(xa, xa.unsqueeze(2), rel, mask).transpose(1, 2)

        # actor-to-map, current step only, over the k nearest lane nodes
        cur = x[:, :, -1]
        rel_m = self.map_attn.relative(map_pp)
        cur = cur + self.map_attn(self.norm_map(cur), map_ctx, rel_m, map_mask)
        x = torch.cat([x[:, :, :-1], cur.unsqueeze(2)], dim=2)

        return x + self.ffn(self.norm_ffn(x))


class MapEncoder(nn.Module):
    """Node features from lane widths refined by attention over graph neighbourhoods."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.embed = _mlp([1, d, d])
        self.rounds = nn.ModuleList()
        for _ in range(cfg.map_rounds):
            self.rounds.append(
                nn.ModuleDict(
                    {
                        "norm": nn.LayerNorm(d),
                        "attn": RelativeAttention(d, cfg.num_heads, pair_features=5),
                        "norm_ffn": nn.LayerNorm(d),
                        "ffn": _mlp([d, cfg.ffn_mult * d, d]),
                    }
                )
            )

    def forward(self, node_pose, node_width, nbr_idx, nbr_mask):
        # node_pose (B, K, 3), node_width (B, K), nbr_idx/nbr_mask (B, K, Q)
        b, k, q = nbr_idx.shape
        f = self.embed((node_width / 3.7).unsqueeze(-1))
        flat_idx = nbr_idx.reshape(b, k * q, 1)
        nbr_pose = torch.gather(node_pose, 1, flat_idx.expand(b, k * q, 3)).reshape(b, k, q, 3)
        pp = scaled_pose_features(pairpose_tensor(node_pose.unsqueeze(2), nbr_pose))
        for r in self.rounds:
            fn = r["norm"](f)
            nbr_f = torch.gather(fn, 1, flat_idx.expand(b, k * q, fn.shape[-1])).reshape(b, k, q, -1)
            f = f + r["attn"](fn, nbr_f, r["attn"].relative(pp), nbr_mask)
            f = f + r["ffn"](r["norm_ffn"](f))
        return f


class DrivingPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig, seed: int = 0, zero_init_head: bool = True):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.map_encoder = MapEncoder(cfg)
        self.state_encoder = _mlp([8, d, d])
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_blocks))
        if cfg.role == "teacher_adversary":
            self.target_embedding = nn.Parameter(torch.zeros(d))
            self.target_mlp = _mlp([d + 5, d, d])
        self.norm_out = nn.LayerNorm(d)
        self.decoder = _mlp([d, cfg.decoder_hidden, cfg.decoder_hidden, 2])
        self.register_buffer("pe", sinusoidal_encoding(cfg.history_len, d), persistent=False)
        self.reset_parameters(seed, zero_init_head)

    def reset_parameters(self, seed: int, zero_init_head: bool = True) -> None:
        g = torch.Generator()
        g.manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m, g, self.cfg.init_std)
        if hasattr(self, "target_embedding"):
            with torch.no_grad():
                nn.init.trunc_normal_(self.target_embedding, std=0.02, a=-0.04, b=0.04, generator=g)
        if zero_init_head:
            with torch.no_grad():
                self.decoder[-1].weight.zero_()

    # -- stages -------------------------------------------------------------

    def encode_map(self, node_pose, node_width, nbr_idx, nbr_mask) -> torch.Tensor:
        return self.map_encoder(node_pose, node_width, nbr_idx, nbr_mask)

    def encode_state(self, hist: torch.Tensor, dims: torch.Tensor) -> torch.Tensor:
        """``hist`` (B, H, N, 4) oldest first; ``dims`` (B, N, 3). Returns (B, N, H, D)."""
        hist = hist.transpose(1, 2)  # (B, N, H, 4)
        cur = hist[:, :, -1:, :3]
        pp = scaled_pose_features(pairpose_tensor(cur, hist[..., :3]))
        h = hist.shape[2]
        extra = torch.stack(
            [hist[..., 3] / _POS_SCALE, (dims[..., 0] / 5.0).unsqueeze(-1).expand(-1, -1, h), (dims[..., 1] / 2.0).unsqueeze(-1).expand(-1, -1, h)],
            dim=-1,
        )
        return self.state_encoder(torch.cat([pp, extra], dim=-1))

    def condition_targets(self, cur: torch.Tensor, poses: torch.Tensor, teacher_mask: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Add target information to rows in the teacher set. ``cur`` (B, N, D), ``poses`` (B, N, 3)."""
        if self.cfg.role != "teacher_adversary" or not bool(teacher_mask.any()):
            return cur
        n = poses.shape[1]
        if bool(((targets >= n) | ((targets < 0) & teacher_mask)).any()):
            raise IndexError("target index out of range for a teacher-set actor")
        safe = targets.clamp(min=0)
        tgt_pose = torch.gather(poses, 1, safe.unsqueeze(-1).expand(-1, -1, 3))
        pp = scaled_pose_features(pairpose_tensor(poses, tgt_pose))
        e = self.target_embedding.expand(*cur.shape[:2], -1)
        delta = self.target_mlp(torch.cat([e, pp], dim=-1))
        return torch.where(teacher_mask.unsqueeze(-1), cur + delta, cur)

    def backbone(self, x, poses_hist, actor_mask, map_feats, node_pose, node_mask) -> torch.Tensor:
        """``x`` (B, N, H, D); ``poses_hist`` (B, H, N, 3). Returns current-step features (B, N, D)."""
        b, n, h, d = x.shape
        actor_pp = scaled_pose_features(pairpose_tensor(poses_hist.unsqueeze(3), poses_hist.unsqueeze(2)))
        cur_pose = poses_hist[:, -1]
        kq = min(self.cfg.knn_k, node_pose.shape[1])
        with torch.no_grad():
            d2 = ((cur_pose[:, :, None, :2] - node_pose[:, None, :, :2]) ** 2).sum(-1)
            # micrometre buckets: lanes are symmetric about actors on a centreline, and rounding
            # noise from a rigid transform must not reorder those exact ties
            dq = torch.round(torch.sqrt(d2) * 1e6)
            dq = dq.masked_fill(~node_mask[:, None, :], float("inf"))
            knn = torch.sort(dq, dim=-1, stable=True).indices[..., :kq]  # ties -> lower node id
            knn_mask = torch.gather(node_mask[:, None, :].expand(b, n, -1), 2, knn)
        flat = knn.reshape(b, n * kq, 1)
        map_ctx = torch.gather(map_feats, 1, flat.expand(b, n * kq, d)).reshape(b, n, kq, d)
        knn_pose = torch.gather(node_pose, 1, flat.expand(b, n * kq, 3)).reshape(b, n, kq, 3)
        map_pp = scaled_pose_features(pairpose_tensor(cur_pose.unsqueeze(2), knn_pose))
        pe = self.pe[-h:]
        for blk in self.blocks:
            x = blk(x, pe, actor_pp, actor_mask, map_ctx, map_pp, knn_mask)
        return x[:, :, -1]

    def decode_actions(self, feats: torch.Tensor) -> torch.Tensor:
        raw = self.decoder(self.norm_out(feats))
        return torch.stack([self.cfg.u_max * torch.tanh(raw[..., 0]), self.cfg.phi_max * torch.tanh(raw[..., 1])], dim=-1)

    def forward(self, hist, dims, actor_mask, map_feats, node_pose, node_mask, teacher_mask=None, targets=None):
        """Actions ``(B, N, 2)`` from the history window ``hist`` (B, H, N, 4)."""
        hist = hist[:, -self.cfg.history_len :]
        x = self.encode_state(hist, dims)
        if teacher_mask is not None:
            cur = self.condition_targets(x[:, :, -1], hist[:, -1, :, :3], teacher_mask, targets)
            x = torch.cat([x[:, :, :-1], cur.unsqueeze(2)], dim=2)
        feats = self.backbone(x, hist[..., :3], actor_mask, map_feats, node_pose, node_mask)
        return self.decode_actions(feats)


class Teacher(nn.Module):
    """Adversary and demonstrator sub-policies with disjoint parameters."""

    def __init__(self, cfg: PolicyConfig, seed: int = 0, zero_init_head: bool = True):
        super().__init__()
        base = cfg.architecture()
        self.adversary = DrivingPolicy(PolicyConfig(**base, role="teacher_adversary"), seed=seed, zero_init_head=zero_init_head)
        self.demonstrator = DrivingPolicy(PolicyConfig(**base, role="teacher_demonstrator"), seed=seed + 1, zero_init_head=zero_init_head)


def make_student(cfg: PolicyConfig, seed: int = 0, zero_init_head: bool = True) -> DrivingPolicy:
    return DrivingPolicy(PolicyConfig(**cfg.architecture(), role="student"), seed=seed, zero_init_head=zero_init_head)
