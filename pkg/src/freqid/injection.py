"""Wiring identity signals into the backbone.

Low-frequency features are concatenated to the noisy latent as extra
channels; high-frequency identity tokens enter through residual
cross-attention at one of several sites:

    inner   between each block's self-attention and FFN
    output  after each block
    input   before each block's self-attention
    pre     once, before the first block

Plan letters a-g follow the ablation tables (a = high-frequency only,
b = low-frequency only, c = both).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from .backbone import HF_SITES, DiT, DiTConfig, attention
from .errors import InvalidArgumentError
from .extractors import FaceTower, GlobalFacialExtractor, LocalFacialExtractor, Towers, TwoTower


@dataclass(frozen=True)
class InjectionPlan:
    low_freq: bool = True
    keypoints: bool = True
    hf_site: str = "inner"

    def __post_init__(self):
        if self.hf_site not in HF_SITES:
            raise InvalidArgumentError(f"unknown injection site {self.hf_site!r}")

    @property
    def uses_lfe(self):
        return self.hf_site != "none"


PLANS = {
    "a": InjectionPlan(low_freq=False, keypoints=False, hf_site="inner"),
    "b": InjectionPlan(low_freq=True, keypoints=True, hf_site="none"),
    "c": InjectionPlan(low_freq=True, keypoints=True, hf_site="inner"),
    "d": InjectionPlan(low_freq=True, keypoints=False, hf_site="inner"),
    "e": InjectionPlan(low_freq=True, keypoints=True, hf_site="output"),
    "f": InjectionPlan(low_freq=True, keypoints=True, hf_site="input"),
    "g": InjectionPlan(low_freq=False, keypoints=False, hf_site="pre"),
    "none": InjectionPlan(low_freq=False, keypoints=False, hf_site="none"),
}


def plan_by_name(name):
    try:
        return PLANS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown plan {name!r}; expected one of {sorted(PLANS)}") from None


def plan_name(plan: InjectionPlan):
    for name, p in PLANS.items():
        if p == plan:
            return name
    return f"custom(low={plan.low_freq},kps={plan.keypoints},site={plan.hf_site})"


class IdCrossAttention(nn.Module):
    """Z' = Z + W_o Attention(LN(Z) W_q, F W_k, F W_v); W_o starts at zero."""

    def __init__(self, dim, heads=4):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)
        nn.init.zeros_(self.to_out.weight)

    def forward(self, z, f, f_mask=None):
        out = attention(self.to_q(self.norm(z)), self.to_k(f), self.to_v(f), self.heads, f_mask)
        return z + self.to_out(out)


def id_cross_attention(module: IdCrossAttention, z, f):
    return module(z, f)


def apply_low_freq(noise_latent, gfe):
    """(B, T, h, w, C) latent + (B, C_g, h, w) map -> (B, T, h, w, C + C_g)."""
    B, T, h, w, _ = noise_latent.shape
    if gfe.shape[0] != B or tuple(gfe.shape[2:]) != (h, w):
        raise InvalidArgumentError(f"global features {tuple(gfe.shape)} do not match latent {tuple(noise_latent.shape)}")
    cond = gfe.permute(0, 2, 3, 1)[:, None].expand(B, T, h, w, gfe.shape[1])
    return torch.cat([noise_latent, cond.to(noise_latent.dtype)], dim=-1)


@dataclass
class ModelConfig:
    dit: DiTConfig = field(default_factory=DiTConfig)
    gfe_channels: int = 8
    n_queries: int = 16
    qformer_layers: int = 2
    qformer_heads: int = 4
    qformer_dropout: float = 0.1
    token_drop: float = 0.1
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class Conditioning:
    """Reference-face inputs as (B, 3, S, S) tensors in [-1, 1]."""

    ref: torch.Tensor
    kps: torch.Tensor

    def select(self, index):
        return Conditioning(self.ref[index], self.kps[index])


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class ConditionedModel(nn.Module):
    """Backbone plus whichever extractors a plan calls for."""

    def __init__(self, cfg: ModelConfig, plan: InjectionPlan, towers: Towers | None = None):
        super().__init__()
        self.cfg = cfg
        self.plan = plan
        dit_cfg = cfg.dit
        base = dit_cfg.base_channels
        expected_in = base + (cfg.gfe_channels if plan.low_freq else 0)
        if dit_cfg.input_channels != expected_in:
            raise InvalidArgumentError(
                f"plan needs {expected_in} input channels but backbone is configured for {dit_cfg.input_channels}"
            )
        d = dit_cfg.model_dim
        id_attn = None
        if plan.uses_lfe:
            count = 1 if plan.hf_site == "pre" else dit_cfg.depth
            id_attn = _seeded(cfg.seed + 3, lambda: nn.ModuleList([IdCrossAttention(d, dit_cfg.heads) for _ in range(count)]))
        self.dit = _seeded(cfg.seed, lambda: DiT(dit_cfg, plan.hf_site, id_attn))
        latent_hw = dit_cfg.latent_shape[1:3]
        self.gfe = _seeded(cfg.seed + 1, lambda: GlobalFacialExtractor(cfg.gfe_channels, latent_hw)) if plan.low_freq else None
        self.lfe = None
        self.towers = None
        if plan.uses_lfe:
            if towers is None:
                towers = _seeded(cfg.seed + 4, lambda: Towers(FaceTower(), TwoTower(vocab=dit_cfg.text_vocab)))
            self.towers = towers
            self.towers.requires_grad_(False)
            pen = self.towers.face.stages[-1][0].out_channels
            shallow = tuple(s[0].out_channels for s in self.towers.face.stages[:2])
            sem = self.towers.semantic.image.stages[-1][0].out_channels
            self.lfe = _seeded(
                cfg.seed + 2,
                lambda: LocalFacialExtractor(
                    d, cfg.n_queries, cfg.qformer_layers, cfg.qformer_heads, cfg.qformer_dropout,
                    shallow_channels=shallow, semantic_channels=sem, penultimate_channels=pen,
                ),
            )

    @property
    def base_channels(self):
        return self.cfg.dit.base_channels

    def lfe_parameters(self):
        return [] if self.lfe is None else list(self.lfe.parameters())

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("towers.") and p.requires_grad]

    def identity_tokens(self, cond: Conditioning, drop_prob=0.0, rng=None):
        feats = self.towers(cond.ref)
        return self.lfe(feats, drop_prob, rng)

    def forward(self, x_t, t, tokens, null=None, cond: Conditioning | None = None, use_id=True,
                drop_prob=0.0, rng=None):
        """Epsilon prediction for (B, T, h, w, C_base) noisy latents."""
        if x_t.shape[-1] != self.base_channels:
            raise InvalidArgumentError("latent must carry only the base channels")
        text = self.dit.text(tokens, null)
        x = x_t
        if self.plan.low_freq:
            if cond is None:
                raise InvalidArgumentError("plan needs a reference face")
            kps = cond.kps if self.plan.keypoints else torch.full_like(cond.kps, -1.0)
            x = apply_low_freq(x_t, self.gfe(cond.ref, kps))
        id_tokens = None
        if self.plan.uses_lfe and use_id:
            if cond is None:
                raise InvalidArgumentError("plan needs a reference face")
            id_tokens = self.identity_tokens(cond, drop_prob, rng)
        return self.dit(x, text, t, id_tokens)

    def denoiser(self, tokens, cond: Conditioning | None, use_id=True):
        """Adapter to the sampler's ``model(x, t, text, conditioning)`` signature.

        The sampler passes ``text=None`` for the unconditional branch; the
        null caption keeps the length of ``tokens`` as in training.
        """
        B = tokens.shape[0]

        def fn(x, t, text, _cond):
            null = torch.full((B,), text is None, dtype=torch.bool)
            return self(x, t, tokens, null, cond, use_id)

        return fn


def assemble(plan: InjectionPlan, model_cfg: ModelConfig, towers: Towers | None = None) -> ConditionedModel:
    """Build a conditioned model; the backbone channel count follows the plan."""
    dit_cfg = replace(
        model_cfg.dit,
        input_channels=model_cfg.dit.base_channels + (model_cfg.gfe_channels if plan.low_freq else 0),
    )
    return ConditionedModel(replace(model_cfg, dit=dit_cfg), plan, towers)
