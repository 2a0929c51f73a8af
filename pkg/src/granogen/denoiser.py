"""3D convolutional UNet noise predictor, its losses and training loop.

Parameter layout
----------------
Parameters are flattened in registration order, which is fixed:

1. ``time_mlp.0`` Linear(time_embed_dim -> time_embed_dim), ``time_mlp.2`` same
2. ``conv_in`` Conv3d(in_channels -> w0, 3x3x3)
3. for each level i: ``down.i.block`` ResBlock(w_{i-1} -> w_i) (w_{-1} = w0),
   then ``down.i.down`` Conv3d(w_i -> w_i, 3x3x3, stride 2) except the last level
4. ``mid`` ResBlock(w_last -> w_last)
5. for each level i from the deepest: ``up.i.block`` ResBlock(c_in + w_i -> w_i)
   with c_in = w_last at the deepest level and w_{i+1} otherwise, then
   ``up.i.up`` (ConvTranspose3d(w_i -> w_i, 2, stride 2) or nearest x2 +
   Conv3d(w_i -> w_i, 3x3x3)) except at level 0
6. ``norm_out`` GroupNorm(w0), ``conv_out`` Conv3d(w0 -> 1, 3x3x3)

A ResBlock(cin -> cout) with ``convs_per_block = n`` holds, per conv k:
GroupNorm over its input channels then Conv3d(3x3x3) to cout; a
Linear(time_embed_dim -> cout) projection added after the first conv; and a
1x1x1 Conv3d skip when cin != cout. Activation is SiLU throughout.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from granogen.sched import NoiseSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    channel_blocks: tuple[int, ...] = (8, 16, 32, 32)
    convs_per_block: int = 2
    up_mode: str = "nearest_conv"
    time_embed_dim: int = 32
    norm_groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channel_blocks", tuple(int(c) for c in self.channel_blocks))
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if len(self.channel_blocks) < 2:
            raise ValueError("need >= 2 levels in channel_blocks")
        if self.up_mode not in ("transposed", "nearest_conv"):
            raise ValueError(f"unknown up_mode {self.up_mode!r}")
        if self.convs_per_block < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("convs_per_block >= 1 and an even time_embed_dim >= 2 required")
        for c in self.channel_blocks:
            if c % self.norm_groups:
                raise ValueError(f"width {c} not divisible by {self.norm_groups} norm groups")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.channel_blocks) - 1)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 1e-2
    warmup_epochs: int = 5
    epochs: int = 160
    lam: float = 2.0
    masked_only: bool = False
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lam < 1:
            raise ValueError("masked loss weight must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


class TrainingError(RuntimeError):
    pass


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, n_convs, groups):
        super().__init__()
        self.norms = nn.ModuleList()
        self.convs = nn.ModuleList()
        c = cin
        for _ in range(n_convs):
            self.norms.append(nn.GroupNorm(_groups_for(c, groups), c))
            self.convs.append(nn.Conv3d(c, cout, 3, padding=1))
            c = cout
        self.temb = nn.Linear(temb_dim, cout)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else None

    def forward(self, x, temb):
        h = x
        for k, (norm, conv) in enumerate(zip(self.norms, self.convs)):
            h = conv(F.silu(norm(h)))
            if k == 0:
                h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        return h + (self.skip(x) if self.skip is not None else x)


def _groups_for(channels: int, groups: int) -> int:
    # concatenated skip inputs may not divide evenly
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


class Upsample(nn.Module):
    def __init__(self, c, mode):
        super().__init__()
        self.mode = mode
        if mode == "transposed":
            self.conv = nn.ConvTranspose3d(c, c, 2, stride=2)
        else:
            self.conv = nn.Conv3d(c, c, 3, padding=1)

    def forward(self, x):
        if self.mode == "transposed":
            return self.conv(x)
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        w = config.channel_blocks
        L = len(w)
        td = config.time_embed_dim
        g = config.norm_groups
        n = config.convs_per_block
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv3d(config.in_channels, w[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = w[0]
        for i in range(L):
            level = nn.Module()
            level.block = ResBlock(prev, w[i], td, n, g)
            level.down = nn.Conv3d(w[i], w[i], 3, stride=2, padding=1) if i < L - 1 else None
            self.down.append(level)
            prev = w[i]
        self.mid = ResBlock(w[-1], w[-1], td, n, g)
        self.up = nn.ModuleList()
        for i in reversed(range(L)):
            cin = w[-1] if i == L - 1 else w[i + 1]
            level = nn.Module()
            level.block = ResBlock(cin + w[i], w[i], td, n, g)
            level.up = Upsample(w[i], config.up_mode) if i > 0 else None
            self.up.append(level)
        self.norm_out = nn.GroupNorm(_groups_for(w[0], g), w[0])
        self.conv_out = nn.Conv3d(w[0], 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, nz, ny, nx) input, got {tuple(x.shape)}")
        if any(s % cfg.divisor for s in x.shape[2:]):
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} not divisible by {cfg.divisor} for config {cfg}"
            )
        t = torch.as_tensor(t).reshape(-1)
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, cfg.time_embed_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for level in self.down:
            h = level.block(h, temb)
            skips.append(h)
            if level.down is not None:
                h = level.down(h)
        h = self.mid(h, temb)
        for level in self.up:
            h = level.block(torch.cat([h, skips.pop()], dim=1), temb)
            if level.up is not None:
                h = level.up(h)
        return self.conv_out(F.silu(self.norm_out(h)))

    # flat parameter view

    def param_layout(self) -> list[tuple[str, int, tuple[int, ...]]]:
        layout = []
        offset = 0
        for name, p in self.named_parameters():
            layout.append((name, offset, tuple(p.shape)))
            offset += p.numel()
        return layout

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).cpu().numpy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat)
        if flat.shape != (self.param_count(),):
            raise ValueError(f"expected {self.param_count()} parameters, got {flat.shape}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[offset:offset + n].copy()).reshape(p.shape).to(p.dtype))
                offset += n


def build_net(config: UNetConfig, seed: int = 0) -> DenoiserNet:
    """Construct a net with fan-in scaled uniform weights, deterministic in ``seed``.

    Weights and biases of every conv/linear layer are drawn from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm layers start at identity.
    """
    net = DenoiserNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
                w = module.weight
                if isinstance(module, nn.ConvTranspose3d):
                    fan_in = w.shape[0] * w[0, 0].numel()
                else:
                    fan_in = w[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))
                module.bias.copy_(
                    torch.rand(module.bias.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound)
                )
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
    return net


def _tensor(x, net: DenoiserNet) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype)


def _noised(x0, eps, t, sched: NoiseSchedule, net):
    x0 = _tensor(x0, net)
    eps = _tensor(eps, net)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(np.asarray(t), dtype=torch.long).reshape(-1)
    ab = torch.as_tensor(np.array(sched.alpha_bars), dtype=x0.dtype)[t].reshape(-1, 1, 1, 1, 1)
    return x0, eps, t, ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def inpaint_input(xt, mask, x0) -> torch.Tensor:
    """Channel stack [x_t, m, x0 * (1 - m)] fed to the inpainting net."""
    return torch.cat([xt, mask, x0 * (1 - mask)], dim=1)


def loss_simple(net: DenoiserNet, x0, eps, t, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between true and predicted noise, (B, 1, ...) inputs."""
    _, eps, t, xt = _noised(x0, eps, t, sched, net)
    return torch.mean((eps - net(xt, t)) ** 2)


def loss_inpaint(
    net: DenoiserNet, x0, eps, t, mask, sched: NoiseSchedule, lam: float = 2.0, masked_only: bool = False
) -> torch.Tensor:
    """Weighted noise MSE for the 3-channel net.

    Weights are ``lam`` on unknown voxels (mask 1) and 1 on known voxels,
    averaged over all voxels. With ``masked_only`` the loss is the mean over
    unknown voxels alone.
    """
    if net.config.in_channels != 3:
        raise ValueError("loss_inpaint needs a 3-channel net")
    x0, eps, t, xt = _noised(x0, eps, t, sched, net)
    m = _tensor(mask, net)
    if m.shape != x0.shape:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match {tuple(x0.shape)}")
    err = (eps - net(inpaint_input(xt, m, x0), t)) ** 2
    if masked_only:
        return (err * m).sum() / m.sum().clamp_min(1.0)
    w = 1.0 + (lam - 1.0) * m
    return torch.mean(w * err)


def gradient(net: DenoiserNet, closure) -> np.ndarray:
    """Reverse-mode gradient of ``closure()`` w.r.t. the flat parameter vector."""
    params = list(net.parameters())
    loss = closure()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat(
        [(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)]
    ).detach().cpu().numpy()


@torch.no_grad()
def predict_noise(net: DenoiserNet, x, t) -> np.ndarray:
    x = _tensor(x, net)
    t = torch.as_tensor(np.broadcast_to(np.asarray(t), (x.shape[0],)).copy(), dtype=torch.long)
    return net(x, t).double().cpu().numpy()


def sample_training_mask(dims, rng: np.random.Generator) -> np.ndarray:
    """Random inpainting mask: an axis slab or a box, with equal odds.

    Slabs span 25-75% of a random axis; boxes cover 10-50% of the volume.
    """
    dims = tuple(int(d) for d in dims)
    mask = np.zeros(dims, dtype=np.uint8)
    if rng.random() < 0.5:
        axis = int(rng.integers(3))
        n = dims[axis]
        thick = int(np.clip(round(rng.uniform(0.25, 0.75) * n), 1, n))
        start = int(rng.integers(0, n - thick + 1))
        sl = [slice(None)] * 3
        sl[axis] = slice(start, start + thick)
        mask[tuple(sl)] = 1
    else:
        frac = rng.uniform(0.10, 0.50)
        # split the volume fraction across axes with random aspect
        shares = rng.dirichlet(np.ones(3))
        sizes = [int(np.clip(round(d * frac ** s), 1, d)) for d, s in zip(dims, shares)]
        starts = [int(rng.integers(0, d - s + 1)) for d, s in zip(dims, sizes)]
        mask[tuple(slice(a, a + s) for a, s in zip(starts, sizes))] = 1
    return mask


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine annealing toward 0."""
    W = cfg.warmup_epochs
    if epoch < W:
        return cfg.lr * (epoch + 1) / W
    span = max(cfg.epochs - W, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - W) / span))


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    steps: int = 0
    final_params: np.ndarray | None = None


def _as_binary_stack(dataset) -> np.ndarray:
    grids = []
    for g in dataset:
        data = g.data if hasattr(g, "data") else np.asarray(g)
        if getattr(g, "kind", "binary") != "binary":
            raise ValueError("training data must be binary grids")
        grids.append(np.asarray(data, dtype=np.uint8))
    if not grids:
        raise ValueError("empty dataset")
    return np.stack(grids)


def train(
    net: DenoiserNet,
    dataset,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    mode: str = "unconditional",
    on_epoch=None,
) -> TrainReport:
    """AdamW training on binary grids mapped to +-1 signals.

    ``dataset`` is any iterable of binary VoxelGrids or arrays. All
    randomness (shuffling, timesteps, noise, masks) comes from ``cfg.seed``.
    """
    if mode not in ("unconditional", "inpainting"):
        raise ValueError(f"unknown training mode {mode!r}")
    expected = 3 if mode == "inpainting" else 1
    if net.config.in_channels != expected:
        raise ValueError(f"{mode} training needs a {expected}-channel net")
    data = _as_binary_stack(dataset).astype(np.float32) * 2.0 - 1.0
    n = data.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(
        net.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay
    )
    report = TrainReport()
    net.train()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            b = len(idx)
            x0 = data[idx][:, None]
            t = rng.integers(0, sched.T, size=b)
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            if mode == "inpainting":
                mask = np.stack([sample_training_mask(x0.shape[2:], rng) for _ in range(b)])[:, None]
                loss = loss_inpaint(net, x0, eps, t, mask, sched, cfg.lam, cfg.masked_only)
            else:
                loss = loss_simple(net, x0, eps, t, sched)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            value = float(loss.detach())
            if not math.isfinite(value):
                gnorm = math.sqrt(
                    sum(float((p.grad.double() ** 2).sum()) for p in net.parameters() if p.grad is not None)
                )
                raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3g}, grad norm={gnorm:.3g})")
            opt.step()
            losses.append(value)
            report.step_losses.append(value)
            report.lrs.append(lr)
            step += 1
        if losses:
            report.epoch_losses.append(float(np.mean(losses)))
            log.debug("epoch %d lr %.3g loss %.5f", epoch, lr, report.epoch_losses[-1])
            if on_epoch is not None:
                on_epoch(epoch, report)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    net.eval()
    report.steps = step
    report.final_params = net.get_flat()
    return report


# checkpoints

CKPT_MAGIC = b"GRNC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def save_checkpoint(path, net: DenoiserNet, seed: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
    """Header (magic, version, JSON length, JSON) then float32 LE parameters."""
    meta = {
        "config": asdict(net.config),
        "seed": int(seed),
        "epoch": int(epoch),
        "param_count": net.param_count(),
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    params = net.get_flat().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())


def load_checkpoint(path) -> tuple[DenoiserNet, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEAD.size:
        raise ValueError("corrupt checkpoint: truncated header")
    magic, version, n = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError("unsupported checkpoint format")
    meta = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + n])
    cfg = dict(meta["config"])
    cfg["channel_blocks"] = tuple(cfg["channel_blocks"])
    net = DenoiserNet(UNetConfig(**cfg))
    params = np.frombuffer(raw[_CKPT_HEAD.size + n:], dtype="<f4")
    if params.size != meta["param_count"] or params.size != net.param_count():
        raise ValueError("corrupt checkpoint: parameter count mismatch")
    net.set_flat(params.astype(np.float32))
    net.eval()
    return net, meta
