"""Toy-scale SPoTr networks: a classification stack and a U-net style
segmentation network with feature propagation, plus checkpoint I/O."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .attention import AttnConfig
from .block import BlockConfig, SpotrBlock, StagePlan, collate_plans, plan_cloud
from .nn import MLP, Module
from .numerics import Tensor

TASKS = ("classify", "segment")


@dataclass
class StageConfig:
    channels: int
    radius: float
    cap: int = 16
    n_sp: int = 16
    gamma: float = 16.0


def _default_stages():
    return [StageConfig(c, r) for c, r in zip((32, 64, 128, 256), (0.2, 0.4, 0.8, 1.6))]


@dataclass
class ModelConfig:
    stages: list = field(default_factory=_default_stages)
    embed_width: int = 32
    head_widths: tuple = (128,)
    task: str = "classify"
    num_classes: int = 4
    num_parts: int = 8
    variant: str = "full"
    relation: str = "sub"
    temperature: float = 1.0
    tied: bool = False
    alpha: float | None = None
    extra_lpa_layers: int = 0
    fp_neighbors: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ValueError("need at least one stage")
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(*s) for s in self.stages]
        self.head_widths = tuple(self.head_widths)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        for i, s in enumerate(self.stages):
            BlockConfig(s.radius, s.cap, s.n_sp, s.gamma, self.variant, self.attn(),
                        self.tied, self.alpha, self.extra_lpa_layers)

    def attn(self) -> AttnConfig:
        return AttnConfig(self.relation, self.temperature)

    def block_config(self, i: int) -> BlockConfig:
        s = self.stages[i]
        return BlockConfig(s.radius, s.cap, s.n_sp, s.gamma, self.variant, self.attn(),
                           self.tied, self.alpha, self.extra_lpa_layers)

    # flat key = value form used by checkpoints and config files
    def to_kv(self) -> dict:
        kv = {
            "task": self.task,
            "embed_width": str(self.embed_width),
            "head_widths": ",".join(map(str, self.head_widths)),
            "num_classes": str(self.num_classes),
            "num_parts": str(self.num_parts),
            "variant": self.variant,
            "relation": self.relation,
            "temperature": repr(float(self.temperature)),
            "tied": str(self.tied).lower(),
            "alpha": "none" if self.alpha is None else repr(float(self.alpha)),
            "extra_lpa_layers": str(self.extra_lpa_layers),
            "fp_neighbors": str(self.fp_neighbors),
            "stage_channels": ",".join(str(s.channels) for s in self.stages),
            "stage_radii": ",".join(repr(float(s.radius)) for s in self.stages),
            "stage_caps": ",".join(str(s.cap) for s in self.stages),
            "stage_n_sp": ",".join(str(s.n_sp) for s in self.stages),
            "stage_gammas": ",".join(repr(float(s.gamma)) for s in self.stages),
        }
        return kv

    @classmethod
    def from_kv(cls, kv: dict) -> "ModelConfig":
        known = set(cls().to_kv())
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        base = cls().to_kv()
        base.update(kv)
        kv = base

        def ints(s):
            return [int(v) for v in s.split(",") if v.strip()]

        def floats(s):
            return [float(v) for v in s.split(",") if v.strip()]

        chans = ints(kv["stage_channels"])
        cols = [floats(kv["stage_radii"]), ints(kv["stage_caps"]), ints(kv["stage_n_sp"]), floats(kv["stage_gammas"])]
        if any(len(c) != len(chans) for c in cols):
            raise ValueError("per-stage lists must all have one entry per stage")
        stages = [StageConfig(c, r, k, s, g) for c, r, k, s, g in zip(chans, *cols)]
        tied = kv["tied"].strip().lower()
        if tied not in ("true", "false"):
            raise ValueError(f"tied must be true or false, got {kv['tied']!r}")
        return cls(
            stages=stages,
            embed_width=int(kv["embed_width"]),
            head_widths=tuple(ints(kv["head_widths"])),
            task=kv["task"].strip(),
            num_classes=int(kv["num_classes"]),
            num_parts=int(kv["num_parts"]),
            variant=kv["variant"].strip(),
            relation=kv["relation"].strip(),
            temperature=float(kv["temperature"]),
            tied=tied == "true",
            alpha=None if kv["alpha"].strip().lower() == "none" else float(kv["alpha"]),
            extra_lpa_layers=int(kv["extra_lpa_layers"]),
            fp_neighbors=int(kv["fp_neighbors"]),
        )


# --------------------------------------------------------------------------
# geometry plans


@dataclass
class CloudPlan:
    """Per-cloud index structures for every stage (and the decoder)."""
    stages: list            # StagePlan per block, unbatched
    levels: list            # positions per level, level 0 = input
    interp: list            # (idx, weights) per decoder step, fine level l <- coarse l+1


def interp_weights(fine: np.ndarray, coarse: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse squared distance weights over the ``k`` nearest coarse points.

    A fine point that coincides with a coarse point takes that point with
    weight 1.
    """
    if len(coarse) == 0:
        raise ValueError("feature propagation needs at least one coarse point")
    k = min(k, len(coarse))
    d2 = ((fine[:, None, :] - coarse[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    near = np.take_along_axis(d2, order, axis=1)
    w = np.zeros_like(near)
    exact = near[:, 0] == 0.0
    w[exact, 0] = 1.0
    inv = 1.0 / near[~exact]
    w[~exact] = inv / inv.sum(axis=1, keepdims=True)
    return order, w


def plan_for(x: np.ndarray, cfg: ModelConfig) -> CloudPlan:
    stages, levels = [], [x]
    for s in cfg.stages:
        p = plan_cloud(levels[-1], s.radius, s.cap, s.n_sp if cfg.variant == "fps_sp" else None)
        stages.append(p)
        levels.append(levels[-1][p.anchors])
    interp = []
    if cfg.task == "segment":
        for lvl in range(len(cfg.stages)):
            interp.append(interp_weights(levels[lvl], levels[lvl + 1], cfg.fp_neighbors))
    return CloudPlan(stages, levels, interp)


@dataclass
class BatchPlan:
    positions: np.ndarray    # (B, N, 3)
    stages: list             # batched StagePlan per block
    interp: list             # (idx (B, Nf, k), weights (B, Nf, k)) per decoder step


def collate(plans: list[CloudPlan]) -> BatchPlan:
    stages = [collate_plans([p.stages[i] for p in plans]) for i in range(len(plans[0].stages))]
    interp = [(np.stack([p.interp[i][0] for p in plans]), np.stack([p.interp[i][1] for p in plans]))
              for i in range(len(plans[0].interp))]
    return BatchPlan(np.stack([p.levels[0] for p in plans]), stages, interp)


# --------------------------------------------------------------------------
# networks


def feature_propagation(coarse_f, idx: np.ndarray, weights: np.ndarray, skip, mlp: MLP | None) -> Tensor:
    """Interpolate coarse features to the fine points, concatenate the skip
    features and apply ``mlp`` (``None`` returns the interpolation only)."""
    near = nx.gather(coarse_f, idx)                         # (..., Nf, k, C)
    interp = nx.sum(nx.mul(near, weights[..., None]), axis=-2)
    if mlp is None:
        return interp
    return mlp(nx.concat([interp, skip], axis=-1))


class SpotrNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = MLP([3, cfg.embed_width, cfg.embed_width], rng, final_relu=True)
        widths = [cfg.embed_width] + [s.channels for s in cfg.stages]
        self.blocks = [SpotrBlock(widths[i], widths[i + 1], cfg.block_config(i), rng)
                       for i in range(len(cfg.stages))]
        if cfg.task == "classify":
            self.head = MLP([widths[-1], *cfg.head_widths, cfg.num_classes], rng)
            self.decoder = []
        else:
            # decoder step l maps level l+1 features (interpolated) + level l skip to level l width
            dec_in = widths[-1]
            self.decoder = []
            for lvl in reversed(range(len(cfg.stages))):
                self.decoder.append(MLP([dec_in + widths[lvl], widths[lvl]], rng, final_relu=True))
                dec_in = widths[lvl]
            self.head = MLP([widths[0], *cfg.head_widths, cfg.num_parts], rng)

    def plan(self, x: np.ndarray) -> CloudPlan:
        return plan_for(np.asarray(x, dtype=np.float64), self.cfg)

    def encode(self, batch: BatchPlan, return_parts: bool = False):
        X = Tensor(batch.positions)
        F = self.embed(X)
        feats, parts = [F], []
        for block, plan in zip(self.blocks, batch.stages):
            if return_parts:
                X, F, info = block(X, F, plan, return_parts=True)
                parts.append(info)
            else:
                X, F = block(X, F, plan)
            feats.append(F)
        return feats, parts

    def forward(self, batch: BatchPlan) -> Tensor:
        """Logits ``(B, num_classes)`` or ``(B, N, num_parts)``."""
        feats, _ = self.encode(batch)
        if self.cfg.task == "classify":
            return self.head(nx.max(feats[-1], axis=-2))
        f = feats[-1]
        for step, lvl in enumerate(reversed(range(len(self.blocks)))):
            idx, w = batch.interp[lvl]
            f = feature_propagation(f, idx, w, feats[lvl], self.decoder[step])
        return self.head(f)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0) -> SpotrNet:
    return SpotrNet(cfg, seed)


def classify_forward(pc, cfg: ModelConfig, model: SpotrNet) -> Tensor:
    """Logits ``(num_classes,)`` for one cloud (a PointCloud or ``(N, 3)``)."""
    if cfg.task != "classify":
        raise ValueError("classify_forward needs a classification config")
    x = getattr(pc, "positions", pc)
    out = model(collate([model.plan(x)]))
    return nx.reshape(out, (out.shape[-1],))


def segment_forward(pc, cfg: ModelConfig, model: SpotrNet) -> Tensor:
    """Per-point logits ``(N, num_parts)`` for one cloud."""
    if cfg.task != "segment":
        raise ValueError("segment_forward needs a segmentation config")
    x = getattr(pc, "positions", pc)
    out = model(collate([model.plan(x)]))
    return nx.reshape(out, out.shape[1:])


# --------------------------------------------------------------------------
# checkpoints: text header (config key = value) then raw float64 parameters

_MAGIC = "SPOTR-CKPT 1"
_SEP = b"\n---\n"


def save_checkpoint(path, model: SpotrNet, extra: dict | None = None) -> None:
    params = model.named_parameters()
    names, blobs = [], []
    for name, p in params:
        names.append(f"{name}:{'x'.join(map(str, p.shape)) or 'scalar'}")
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").reshape(-1))
    lines = [_MAGIC]
    for k, v in model.cfg.to_kv().items():
        lines.append(f"{k} = {v}")
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k} = {v}")
    lines.append(f"param_count = {sum(b.size for b in blobs)}")
    lines.append("param_layout = " + ";".join(names))
    payload = np.concatenate(blobs) if blobs else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode())
        fh.write(_SEP)
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[SpotrNet, dict]:
    """Returns the model and the ``meta.*`` entries of the header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, body = raw.partition(_SEP)
    if not sep:
        raise ValueError(f"{path}: not a checkpoint (missing header separator)")
    lines = head.decode().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    kv, meta = {}, {}
    for ln in lines[1:]:
        k, _, v = ln.partition(" = ")
        if k.startswith("meta."):
            meta[k[5:]] = v
        else:
            kv[k] = v
    count = int(kv.pop("param_count"))
    layout = kv.pop("param_layout")
    cfg = ModelConfig.from_kv(kv)
    model = build_model(cfg)
    values = np.frombuffer(body, dtype="<f8")
    if values.size != count:
        raise ValueError(f"{path}: expected {count} parameters, found {values.size}")
    expect = ";".join(f"{n}:{'x'.join(map(str, p.shape)) or 'scalar'}" for n, p in model.named_parameters())
    if expect != layout:
        raise ValueError(f"{path}: parameter layout does not match the config")
    off = 0
    for p in model.parameters():
        p.data[...] = values[off:off + p.data.size].reshape(p.shape)
        off += p.data.size
    return model, meta


def clone_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
