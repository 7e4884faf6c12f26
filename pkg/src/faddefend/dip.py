"""Large-perturbation path: single-image reconstruction with an untrained net.

An encoder-decoder with skip connections is initialized randomly and fit to
the adversarial image alone, minimizing || f_theta(z) - x_adv ||^2 for a fixed
number of steps. Low-frequency image content is learned long before the
adversarial high-frequency detail, so stopping early yields a reconstruction
with most of the perturbation removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import OptimizationError
from .image_core import validate_image
from .preprocess import PreprocessConfig, small_path_defend


@dataclass(frozen=True)
class GeneratorSpec:
    """Untrained generator shape: channels double per stage, capped at 128."""

    depth: int = 4
    base_channels: int = 32
    skip_channels: int = 4
    activation: float = 0.2  # leaky-ReLU negative slope
    channel_cap: int = 128

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if min(self.base_channels, self.skip_channels, self.channel_cap) < 1:
            raise ValueError("channel counts must be positive")

    def stage_channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.channel_cap) for i in range(self.depth)]


@dataclass(frozen=True)
class DipConfig:
    iterations: int = 400
    learning_rate: float = 0.01
    noise_seed: int = 0
    input_noise_scale: float = 0.1  # amplitude of the fixed input z
    trajectory_every: int = 0  # 0 = no snapshots

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.trajectory_every < 0:
            raise ValueError("trajectory_every must be >= 0")


@dataclass
class DipResult:
    reconstruction: np.ndarray
    loss_history: list[float]  # per-pixel mean squared objective, one per iteration
    trajectory: list[tuple[int, np.ndarray]] | None


class _Down(nn.Module):
    def __init__(self, cin, cout, slope):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.n1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.n2 = nn.BatchNorm2d(cout)
        self.slope = slope

    def forward(self, x):
        x = F.leaky_relu(self.n1(self.c1(x)), self.slope)
        return F.leaky_relu(self.n2(self.c2(x)), self.slope)


class _Up(nn.Module):
    def __init__(self, cin, cout, slope):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.n1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.n2 = nn.BatchNorm2d(cout)
        self.slope = slope

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, skip], dim=1)
        x = F.leaky_relu(self.n1(self.c1(x)), self.slope)
        return F.leaky_relu(self.n2(self.c2(x)), self.slope)


class _SkipNet(nn.Module):
    """Strided-conv encoder, bilinear decoder, 1x1-conv skip links."""

    def __init__(self, spec: GeneratorSpec, in_channels: int, out_channels: int):
        super().__init__()
        chans = spec.stage_channels()
        enc_in = [in_channels] + chans[:-1]
        self.downs = nn.ModuleList(
            _Down(enc_in[i], chans[i], spec.activation) for i in range(spec.depth)
        )
        self.skips = nn.ModuleList(
            nn.Conv2d(enc_in[i], spec.skip_channels, 1) for i in range(spec.depth)
        )
        dec_out = [chans[max(i - 1, 0)] for i in range(spec.depth)]
        dec_in = [chans[i] + spec.skip_channels for i in range(spec.depth)]
        self.ups = nn.ModuleList(
            _Up(dec_in[i], dec_out[i], spec.activation) for i in range(spec.depth)
        )
        self.head = nn.Conv2d(dec_out[0], out_channels, 1)

    def forward(self, z):
        feats = [z]
        for down in self.downs:
            feats.append(down(feats[-1]))
        x = feats[-1]
        for i in reversed(range(len(self.ups))):
            x = self.ups[i](x, self.skips[i](feats[i]))
        return torch.sigmoid(self.head(x))


def _init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Default-magnitude uniform init (+-1/sqrt(fan_in)) drawn from an explicit
    generator, so reconstructions are reproducible across processes."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.weight[0].numel()
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


def _reflect_pad(arr: np.ndarray, multiple: int) -> tuple[np.ndarray, int, int]:
    h, w = arr.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return arr, h, w


def dip_reconstruct(
    x_adv: np.ndarray, gen: GeneratorSpec = GeneratorSpec(), cfg: DipConfig = DipConfig()
) -> DipResult:
    """Fit the generator to x_adv for exactly cfg.iterations steps.

    z is drawn once, uniform in [0, input_noise_scale], with base_channels
    channels at the padded spatial size; theta is freshly seeded per run.
    The recorded objective is the per-pixel mean of the squared residual.
    """
    arr = np.asarray(validate_image(x_adv), dtype=np.float64)
    padded, h, w = _reflect_pad(arr, 2**gen.depth)

    torch_gen = torch.Generator().manual_seed(cfg.noise_seed)
    net = _SkipNet(gen, in_channels=gen.base_channels, out_channels=arr.shape[2])
    _init_parameters(net, torch_gen)
    z = (
        torch.rand(
            (1, gen.base_channels, padded.shape[0], padded.shape[1]),
            generator=torch_gen,
        )
        * cfg.input_noise_scale
    )
    target = torch.from_numpy(padded.transpose(2, 0, 1))[None].float()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    history: list[float] = []
    trajectory: list[tuple[int, np.ndarray]] | None = (
        [] if cfg.trajectory_every > 0 else None
    )

    def _snapshot() -> np.ndarray:
        with torch.no_grad():
            out = net(z)[0].permute(1, 2, 0).double().numpy()
        return np.clip(out[:h, :w, :], 0.0, 1.0)

    for i in range(cfg.iterations):
        out = net(z)
        loss = F.mse_loss(out, target)
        value = float(loss.item())
        if not np.isfinite(value):
            raise OptimizationError(f"non-finite objective at iteration {i}", i)
        history.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if trajectory is not None and (i + 1) % cfg.trajectory_every == 0:
            trajectory.append((i + 1, _snapshot()))

    return DipResult(_snapshot(), history, trajectory)


def large_path_defend(
    x_adv: np.ndarray,
    gen: GeneratorSpec = GeneratorSpec(),
    dip_cfg: DipConfig = DipConfig(),
    pre_cfg: PreprocessConfig = PreprocessConfig(),
) -> np.ndarray:
    """Reconstruct, then run the small path (JPEG round-trip + flip)."""
    result = dip_reconstruct(x_adv, gen, dip_cfg)
    return small_path_defend(result.reconstruction, pre_cfg)
