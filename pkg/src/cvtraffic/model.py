"""Dual-expert spatiotemporal graph forecaster.

Each expert embeds a real-time and a historical feature window, encodes both
with its own gated-TCN / graph-diffusion stack (one stack per window), fuses
the two encodings with a learned sigmoid gate, and maps the result to
non-negative delay and queue forecasts for the next P windows.

Array layout inside the network is channels-last ``[batch, time, link, feature]``
so that graph diffusion is a plain left-multiplication by an N x N matrix and
the temporal convolution runs along axis 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

VARIANTS = ("full", "only_R", "R_plus_H", "no_embedding", "no_tcn", "no_gcn", "no_adaptive", "no_gate")
MASKING_MODES = ("route", "zero")
N_TRAFFIC = 6
N_TEMPORAL = 6
TEMPORAL_VOCAB = (96, 7, 2, 2, 2, 2)  # time-of-day bin, weekday, holiday, am peak, pm peak, off-peak


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    embed_dims: tuple[int, int, int] = (32, 16, 16)
    blocks: int = 2
    dilations: tuple[int, ...] = (1, 2)
    kernel_size: int = 2
    diffusion_order: int = 2
    node_dim: int = 10
    dropout: float = 0.1
    w_normal: float = 0.3
    w_abnormal: float = 0.7
    smooth_l1_beta: float = 1.0
    svd_noise: float = 1e-2
    head_init_scale: float = 1e-2
    lr: float = 1e-3
    clip_norm: float = 5.0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 42
    variant: str = "full"
    masking: str = "route"

    def __post_init__(self):
        object.__setattr__(self, "embed_dims", tuple(int(v) for v in self.embed_dims))
        object.__setattr__(self, "dilations", tuple(int(v) for v in self.dilations))
        if abs(self.w_normal + self.w_abnormal - 1.0) > 1e-9:
            raise ValueError("w_normal + w_abnormal must equal 1")
        if not self.w_abnormal > 0.5:
            raise ValueError("w_abnormal must exceed 0.5")
        if len(self.dilations) != self.blocks or any(d < 1 for d in self.dilations):
            raise ValueError("need one positive dilation per block")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.masking not in MASKING_MODES:
            raise ValueError(f"unknown masking mode {self.masking!r}")
        if len(self.embed_dims) != 3 or min(self.embed_dims) < 1:
            raise ValueError("embed_dims needs three positive sizes")
        if self.kernel_size < 1 or self.diffusion_order < 0 or self.hidden_dim < 1 or self.node_dim < 1:
            raise ValueError("kernel_size, hidden_dim, node_dim must be >= 1 and diffusion_order >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")

    @property
    def embed_total(self) -> int:
        return sum(self.embed_dims)

    @property
    def dual(self) -> bool:
        return self.variant not in ("only_R", "R_plus_H")

    @property
    def uses_history(self) -> bool:
        return self.variant != "only_R"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_dims"] = list(self.embed_dims)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def variant_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Config for an ablation variant; ``no_tcn`` collapses the kernel to one tap."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    out = replace(cfg, variant=variant)
    if variant == "no_tcn":
        out = replace(out, kernel_size=1)
    return out


@dataclass(frozen=True)
class GraphMeta:
    """Network facts the model needs at construction time."""

    n_links: int
    adjacency: np.ndarray  # row-normalized fixed adjacency
    road_vocab: tuple[int, int, int]
    horizon: int = 4
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))


@dataclass
class ExpertOutputs:
    y_normal: Tensor
    y_abnormal: Tensor
    gate_normal: np.ndarray | None  # [B, N, D] gate activations, None without fusion
    gate_abnormal: np.ndarray | None

    def served(self, flags: np.ndarray) -> np.ndarray:
        """Per (link, measure) routing: flagged cells come from the abnormal expert."""
        f = np.asarray(flags, dtype=bool)[:, :, None, :]
        return np.where(f, self.y_abnormal.data, self.y_normal.data)

    def gate_means(self, flags: np.ndarray | None = None) -> tuple[float, float]:
        """Mean gate of the normal expert on unflagged links and of the abnormal expert on flagged links."""
        if self.gate_normal is None:
            return float("nan"), float("nan")
        if flags is None:
            return float(self.gate_normal.mean()), float(self.gate_abnormal.mean())
        any_flag = np.asarray(flags, dtype=bool).any(axis=-1)
        gn = self.gate_normal.mean(axis=-1)[~any_flag]
        ga = self.gate_abnormal.mean(axis=-1)[any_flag]
        return (float(gn.mean()) if gn.size else float("nan"), float(ga.mean()) if ga.size else float("nan"))


# ---------------------------------------------------------------------------
# layer functions


def adaptive_adjacency(e1: Tensor, e2: Tensor) -> Tensor:
    return nk.row_softmax(nk.relu(nk.matmul(e1, nk.transpose(e2))))


def svd_seed(adjacency: np.ndarray, d: int, rng: np.random.Generator, noise: float) -> tuple[np.ndarray, np.ndarray]:
    """Node embeddings whose product is the rank-d truncation of ``adjacency`` (plus small noise)."""
    u, s, vt = np.linalg.svd(adjacency)
    n = adjacency.shape[0]
    k = min(d, n)
    root = np.sqrt(s[:k])
    e1 = np.zeros((n, d))
    e2 = np.zeros((n, d))
    e1[:, :k] = u[:, :k] * root
    e2[:, :k] = vt[:k].T * root
    return e1 + noise * rng.standard_normal((n, d)), e2 + noise * rng.standard_normal((n, d))


def graph_diffusion(h: Tensor, a_fix, a_apt, weights: Sequence[tuple]) -> Tensor:
    """z = sum_i (A_fix^i h W_i1 + A_apt^i h W_i2), powers applied by repeated multiplication.

    ``h`` is [..., N, D]; ``weights[i]`` is the pair (W_i1, W_i2), either of
    which may be None to drop that term.
    """
    z = None
    hf = ha = h
    for i, (w1, w2) in enumerate(weights):
        if i > 0:
            if w1 is not None or any(w[0] is not None for w in weights[i + 1:]):
                hf = nk.matmul(a_fix, hf)
            if w2 is not None or any(w[1] is not None for w in weights[i + 1:]):
                ha = nk.matmul(a_apt, ha)
        for term, w in ((hf, w1), (ha, w2)):
            if w is not None:
                t = nk.matmul(term, w)
                z = t if z is None else z + t
    return z


def diffusion_packed(h: Tensor, adjs: Sequence, order: int, w: Tensor) -> Tensor:
    """Single-matmul form of ``graph_diffusion``: concat [h, A h, A^2 h, ...] then one weight.

    The two identity terms of the fixed and adaptive sums collapse into one
    block of ``w``.
    """
    terms = [h]
    for a in adjs:
        x = h
        for _ in range(order):
            x = nk.matmul(a, x)
            terms.append(x)
    return nk.matmul(nk.concat(terms, axis=-1), w)


def gated_fusion(h_rt: Tensor, h_hist: Tensor, wg: Tensor, bg: Tensor, w_rt: Tensor, b_rt: Tensor,
                 w_hist: Tensor, b_hist: Tensor) -> tuple[Tensor, Tensor]:
    g = nk.sigmoid(nk.matmul(nk.concat([h_rt, h_hist], axis=-1), wg) + bg)
    p_rt = nk.matmul(h_rt, w_rt) + b_rt
    p_hist = nk.matmul(h_hist, w_hist) + b_hist
    return g * p_rt + (1.0 - g) * p_hist, g


def predict_head(h: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, horizon: int) -> Tensor:
    z = nk.relu(nk.matmul(h, w1) + b1)
    out = nk.matmul(z, w2) + b2
    return nk.relu(nk.reshape(out, h.shape[:-1] + (horizon, 2)))


def smooth_l1_masked_mean(pred: Tensor, target: np.ndarray, mask: np.ndarray, beta: float) -> Tensor:
    """Mean Smooth-L1 over the cells where ``mask``; a zero constant when the mask is empty."""
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    t = np.where(mask, target, 0.0)
    per = nk.smooth_l1(pred, t, beta)
    return nk.reduce_sum(per * mask.astype(float)) * (1.0 / n)


# ---------------------------------------------------------------------------
# network


class Forecaster:
    """Parameter container plus the forward pass for one configuration/variant."""

    def __init__(self, cfg: ModelConfig, meta: GraphMeta):
        self.cfg = cfg
        self.meta = meta
        self.params = nk.ParamStore()
        self.adjacency = np.asarray(meta.adjacency, dtype=float)
        rng = np.random.default_rng(cfg.seed)
        self.experts = ("normal", "abnormal") if cfg.dual else ("single",)
        for ex in self.experts:
            self._build_expert(ex, rng)

    # -- construction --------------------------------------------------
    def _linear(self, name: str, n_in: int, n_out: int, rng, bias: bool = True) -> None:
        self.params.add(f"{name}.w", nk.uniform_fanin(rng, (n_in, n_out), n_in))
        if bias:
            self.params.add(f"{name}.b", np.zeros(n_out), "zeros")

    def _build_expert(self, ex: str, rng) -> None:
        c = self.cfg
        D = c.hidden_dim
        d_tr, d_tm, d_rd = c.embed_dims
        if c.variant == "no_embedding":
            self._linear(f"{ex}.embed.traffic", N_TRAFFIC, c.embed_total, rng)
        else:
            self._linear(f"{ex}.embed.traffic", N_TRAFFIC, d_tr, rng)
            for j, v in enumerate(TEMPORAL_VOCAB):
                self.params.add(f"{ex}.embed.temporal{j}", 0.1 * rng.standard_normal((v, d_tm)))
            for j, v in enumerate(self.meta.road_vocab):
                self.params.add(f"{ex}.embed.road{j}", 0.1 * rng.standard_normal((v, d_rd)))
        branches = ("rt", "hist") if c.uses_history else ("rt",)
        for br in branches:
            self._build_wavenet(f"{ex}.{br}", rng)
        if c.uses_history:
            if c.variant == "no_gate":
                self._linear(f"{ex}.fuse", 2 * D, D, rng)
            else:
                self._linear(f"{ex}.gate", 2 * D, D, rng)
                self._linear(f"{ex}.proj_rt", D, D, rng)
                self._linear(f"{ex}.proj_hist", D, D, rng)
        P = self.meta.horizon
        self._linear(f"{ex}.head1", D, D, rng)
        self.params.add(f"{ex}.head2.w", c.head_init_scale * nk.uniform_fanin(rng, (D, P * 2), D))
        self.params.add(f"{ex}.head2.b", np.asarray(self.meta.target_mean, dtype=float).reshape(P * 2).copy(),
                        "constant")

    def _n_diffusion_terms(self) -> int:
        c = self.cfg
        if c.variant == "no_gcn":
            return 1
        n_adj = 1 if c.variant == "no_adaptive" else 2
        return 1 + n_adj * c.diffusion_order

    def _build_wavenet(self, pre: str, rng) -> None:
        c = self.cfg
        D = c.hidden_dim
        self._linear(f"{pre}.start", c.embed_total, D, rng)
        if c.variant not in ("no_gcn", "no_adaptive"):
            e1, e2 = svd_seed(self.adjacency, c.node_dim, rng, c.svd_noise)
            self.params.add(f"{pre}.E1", e1, "svd_seeded")
            self.params.add(f"{pre}.E2", e2, "svd_seeded")
        for l in range(c.blocks):
            self.params.add(f"{pre}.block{l}.conv.w", nk.uniform_fanin(rng, (2 * D, D, c.kernel_size), D * c.kernel_size))
            self.params.add(f"{pre}.block{l}.conv.b", np.zeros(2 * D), "zeros")
            n_terms = self._n_diffusion_terms()
            self.params.add(f"{pre}.block{l}.gc.w", nk.uniform_fanin(rng, (n_terms * D, D), n_terms * D))
            self._linear(f"{pre}.block{l}.skip", D, D, rng)

    # -- forward -------------------------------------------------------
    def embed(self, ex: str, x: np.ndarray, codes: np.ndarray, road: np.ndarray) -> Tensor:
        """x: [B, T, N, 6] standardized; codes: [B, T, N, 6]; road: [N, 3] -> [B, T, N, D_e]."""
        p = self.params
        tr = nk.matmul(Tensor(x), p[f"{ex}.embed.traffic.w"]) + p[f"{ex}.embed.traffic.b"]
        if self.cfg.variant == "no_embedding":
            return tr
        tm = None
        for j in range(N_TEMPORAL):
            e = nk.embedding(p[f"{ex}.embed.temporal{j}"], codes[..., j])
            tm = e if tm is None else tm + e
        rd = None
        for j in range(road.shape[1]):
            e = nk.embedding(p[f"{ex}.embed.road{j}"], road[:, j])
            rd = e if rd is None else rd + e
        rd = rd * np.ones(x.shape[:2] + (1, 1))
        return nk.concat([tr, tm, rd], axis=-1)

    def wavenet(self, pre: str, e: Tensor, rng: np.random.Generator | None) -> Tensor:
        """[B, T, N, D_e] -> [B, N, D] (last time step of the relu'd skip sum)."""
        c, p = self.cfg, self.params
        D = c.hidden_dim
        x = nk.matmul(e, p[f"{pre}.start.w"]) + p[f"{pre}.start.b"]
        adjs = []
        if c.variant != "no_gcn":
            adjs.append(self.adjacency)
            if c.variant != "no_adaptive":
                adjs.append(adaptive_adjacency(p[f"{pre}.E1"], p[f"{pre}.E2"]))
        order = 0 if c.variant == "no_gcn" else c.diffusion_order
        skip = None
        for l, d in enumerate(c.dilations):
            conv = nk.conv_time_last(x, p[f"{pre}.block{l}.conv.w"], d, time_axis=1) + p[f"{pre}.block{l}.conv.b"]
            h = nk.tanh(conv[..., :D]) * nk.sigmoid(conv[..., D:])
            s = nk.matmul(h, p[f"{pre}.block{l}.skip.w"]) + p[f"{pre}.block{l}.skip.b"]
            skip = s if skip is None else skip + s
            z = diffusion_packed(h, adjs, order, p[f"{pre}.block{l}.gc.w"])
            x = x + nk.dropout(z, c.dropout, rng)
        return nk.relu(skip)[:, -1]

    def expert(self, ex: str, batch: dict, rng, x_rt: np.ndarray) -> tuple[Tensor, Tensor | None]:
        c, p = self.cfg, self.params
        road = batch["road"]
        h_rt = self.wavenet(f"{ex}.rt", self.embed(ex, x_rt, batch["c_rt"], road), rng)
        g = None
        if not c.uses_history:
            fused = h_rt
        else:
            h_hist = self.wavenet(f"{ex}.hist", self.embed(ex, batch["x_hist"], batch["c_hist"], road), rng)
            if c.variant == "no_gate":
                fused = nk.matmul(nk.concat([h_rt, h_hist], axis=-1), p[f"{ex}.fuse.w"]) + p[f"{ex}.fuse.b"]
            else:
                fused, g = gated_fusion(h_rt, h_hist, p[f"{ex}.gate.w"], p[f"{ex}.gate.b"], p[f"{ex}.proj_rt.w"],
                                        p[f"{ex}.proj_rt.b"], p[f"{ex}.proj_hist.w"], p[f"{ex}.proj_hist.b"])
        y = predict_head(fused, p[f"{ex}.head1.w"], p[f"{ex}.head1.b"], p[f"{ex}.head2.w"], p[f"{ex}.head2.b"],
                         self.meta.horizon)
        return y, g

    def forward(self, batch: dict, rng: np.random.Generator | None = None) -> ExpertOutputs:
        """Run every expert on the batch; ``rng`` enables dropout (training)."""
        if not self.cfg.dual:
            y, g = self.expert("single", batch, rng, batch["x_rt"])
            gd = None if g is None else g.data
            return ExpertOutputs(y, y, gd, gd)
        x = batch["x_rt"]
        x_n = x_a = x
        if self.cfg.masking == "zero":
            flagged = np.asarray(batch["flags"], dtype=bool).any(axis=-1)[:, None, :, None]
            x_n = np.where(flagged, 0.0, x)
            x_a = np.where(flagged, x, 0.0)
        y_n, g_n = self.expert("normal", batch, rng, x_n)
        y_a, g_a = self.expert("abnormal", batch, rng, x_a)
        return ExpertOutputs(y_n, y_a, None if g_n is None else g_n.data, None if g_a is None else g_a.data)

    def loss_masks(self, batch: dict) -> tuple[np.ndarray, np.ndarray | None]:
        """Target cells each expert is trained on; observed cells only."""
        obs = np.broadcast_to(np.asarray(batch["y_mask"], dtype=bool)[..., None], batch["y"].shape)  # [B, N, P, 2]
        if not self.cfg.dual:
            return obs, None
        flags = np.asarray(batch["flags"], dtype=bool)[:, :, None, :]  # [B, N, 1, 2]
        return obs & ~flags, obs & flags

    def loss(self, out: ExpertOutputs, batch: dict) -> Tensor:
        """Weighted Smooth-L1: normal expert on unflagged cells, abnormal expert on flagged cells.

        Single-expert variants use a plain mean over all observed cells.
        """
        c = self.cfg
        m_n, m_a = self.loss_masks(batch)
        l_n = smooth_l1_masked_mean(out.y_normal, batch["y"], m_n, c.smooth_l1_beta)
        if m_a is None:
            return l_n
        l_a = smooth_l1_masked_mean(out.y_abnormal, batch["y"], m_a, c.smooth_l1_beta)
        return l_n * c.w_normal + l_a * c.w_abnormal

    def predict(self, batch: dict) -> np.ndarray:
        return self.forward(batch, None).served(batch["flags"])
