"""Invertible pixel-wise flow generator: a learnable color space.

Stacked coupling blocks built from 1x1 convolutions. Each block leaves one
channel (the active one) untouched and updates the other two from it, so
every block has an exact algebraic inverse and a receptive field of exactly
one pixel. Volume-preserving (additive) and non-volume-preserving (affine)
variants share the topology.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .container import load_container, save_container
from .views import Image, ViewPair, color_split

__all__ = [
    "PixelNet",
    "CouplingBlock",
    "FlowGenerator",
    "flow_forward",
    "flow_inverse",
    "learned_split",
    "save_generator",
    "load_generator",
]


def _init_conv(conv: nn.Conv2d, generator: torch.Generator | None) -> None:
    nn.init.kaiming_uniform_(conv.weight, a=math.sqrt(5), generator=generator)
    fan_in = conv.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(conv.bias, -bound, bound, generator=generator)


class PixelNet(nn.Module):
    """Pixel-wise map R^1 -> R^2: 1x1 convolutions 1 -> width -> width -> 2.

    The final layer is zero-initialized so a fresh net is the constant-zero
    map and the enclosing flow starts as the identity.
    """

    def __init__(self, width: int = 16, generator: torch.Generator | None = None):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(1, width, 1),
            nn.ReLU(),
            nn.Conv2d(width, width, 1),
            nn.ReLU(),
            nn.Conv2d(width, 2, 1),
        )
        for m in self.layers:
            if isinstance(m, nn.Conv2d):
                _init_conv(m, generator)
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class CouplingBlock(nn.Module):
    """One coupling step: active channel passes through, passives update.

    VP:  y_passive = x_passive + F(x_active)
    NVP: y_passive = x_passive * exp(s) + F(x_active),
         s = s_max * tanh(G(x_active) / s_max)  (soft clamp keeps scales in
         [-s_max, s_max] without killing gradients)
    """

    def __init__(
        self,
        active_channel: int,
        mode: str,
        width: int = 16,
        s_max: float = 2.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if mode not in ("VP", "NVP"):
            raise ValueError(f"mode must be VP or NVP, got {mode!r}")
        if active_channel not in (0, 1, 2):
            raise ValueError("active_channel must be 0, 1 or 2")
        self.active = active_channel
        self.passive = tuple(c for c in range(3) if c != active_channel)
        self.mode = mode
        self.s_max = float(s_max)
        self.shift_net = PixelNet(width, generator)
        self.scale_net = PixelNet(width, generator) if mode == "NVP" else None

    def _log_scale(self, x_active: torch.Tensor) -> torch.Tensor:
        g = self.scale_net(x_active)
        return self.s_max * torch.tanh(g / self.s_max)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xa = x[:, self.active : self.active + 1]
        shift = self.shift_net(xa)
        xp = x[:, self.passive, :, :]
        if self.mode == "NVP":
            yp = xp * torch.exp(self._log_scale(xa)) + shift
        else:
            yp = xp + shift
        out = x.clone()
        out[:, self.passive, :, :] = yp
        return out

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        ya = y[:, self.active : self.active + 1]
        shift = self.shift_net(ya)
        yp = y[:, self.passive, :, :]
        if self.mode == "NVP":
            xp = (yp - shift) * torch.exp(-self._log_scale(ya))
        else:
            xp = yp - shift
        out = y.clone()
        out[:, self.passive, :, :] = xp
        return out


class FlowGenerator(nn.Module):
    """Composition of coupling blocks with active channel rotating i mod 3."""

    def __init__(
        self,
        mode: str = "VP",
        depth: int = 6,
        width: int = 16,
        s_max: float = 2.0,
        seed: int | None = None,
    ):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        self.mode = mode
        self.depth = depth
        self.width = width
        self.s_max = float(s_max)
        self.seed = seed
        self.blocks = nn.ModuleList(
            CouplingBlock(i % 3, mode, width, s_max, gen) for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, H, W), got {tuple(x.shape)}")
        for block in self.blocks:
            x = block(x)
        return x

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 4 or y.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, H, W), got {tuple(y.shape)}")
        for block in reversed(self.blocks):
            y = block.inverse(y)
        return y


def _to_batch(img: Image, dtype: torch.dtype) -> torch.Tensor:
    if img.channels != 3:
        raise ValueError(f"flow operates on 3-channel images, got {img.channels}")
    return torch.from_numpy(img.data).to(dtype).unsqueeze(0)


def flow_forward(g: FlowGenerator, img: Image) -> Image:
    """Apply the flow to an image; output lives in the LEARNED space."""
    dtype = next(g.parameters()).dtype
    with torch.no_grad():
        out = g(_to_batch(img, dtype))
    return Image(out.squeeze(0).numpy().astype(np.float64), "LEARNED")


def flow_inverse(g: FlowGenerator, img: Image, restore_colorspace: str = "RGB") -> Image:
    """Invert a LEARNED-space image back to the generator's input space."""
    dtype = next(g.parameters()).dtype
    with torch.no_grad():
        out = g.inverse(_to_batch(img, dtype))
    return Image(out.squeeze(0).numpy().astype(np.float64), restore_colorspace)


def learned_split(g: FlowGenerator, img: Image) -> ViewPair:
    """Flow the image, then split channel 0 vs channels 1-2."""
    transformed = flow_forward(g, img)
    pair = color_split(transformed)
    pair.generator = "learned_split"
    pair.params = {"mode": g.mode, "depth": g.depth}
    return pair


def randomize_parameters(g: FlowGenerator, scale: float = 0.2, seed: int = 0) -> FlowGenerator:
    """Perturb all parameters in place (fresh generators are the identity map).

    scale around 0.2 keeps deep NVP stacks numerically sane; the soft clamp
    bounds per-block amplification but magnitudes still compound with depth.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in g.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return g


def pixel_jacobian_fd(
    g: FlowGenerator, x: torch.Tensor, pixel: tuple[int, int], h: float = 1e-6
) -> np.ndarray:
    """Central-difference 3x3 Jacobian of the output pixel w.r.t. the input pixel.

    Pixel-wise flows make this the full local Jacobian; its determinant is 1
    for VP mode. Use a float64 generator and input for meaningful residuals.
    """
    i, j = pixel
    jac = np.zeros((3, 3))
    with torch.no_grad():
        for cin in range(3):
            xp = x.clone()
            xm = x.clone()
            xp[0, cin, i, j] += h
            xm[0, cin, i, j] -= h
            diff = (g(xp) - g(xm))[0, :, i, j] / (2 * h)
            jac[:, cin] = diff.numpy()
    return jac


def parameter_gradient_max_rel_err(
    g: FlowGenerator,
    x: torch.Tensor,
    n_entries: int = 30,
    h: float = 1e-6,
    seed: int = 0,
) -> float:
    """Compare autograd parameter gradients against central finite differences.

    Uses a fixed random linear functional of the flow output as the scalar
    loss; returns the worst relative error over a seeded sample of parameter
    entries. Run on a float64 generator.
    """
    rng = np.random.default_rng(seed)
    w = torch.from_numpy(rng.normal(size=tuple(x.shape))).to(x.dtype)

    def loss_value() -> torch.Tensor:
        return (g(x) * w).sum()

    g.zero_grad()
    loss_value().backward()
    params = [p for p in g.parameters()]
    worst = 0.0
    for _ in range(n_entries):
        p = params[int(rng.integers(len(params)))]
        flat = p.detach().reshape(-1)
        idx = int(rng.integers(flat.numel()))
        analytic = float(p.grad.reshape(-1)[idx])
        with torch.no_grad():
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_value())
            flat[idx] = orig - h
            down = float(loss_value())
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst


def save_generator(g: FlowGenerator, path) -> None:
    header = {
        "kind": "flow_generator",
        "mode": g.mode,
        "depth": g.depth,
        "width": g.width,
        "s_max": g.s_max,
        "seed": g.seed,
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in g.state_dict().items()}
    save_container(path, header, arrays)


def load_generator(path) -> FlowGenerator:
    header, arrays = load_container(path)
    if header.get("kind") != "flow_generator":
        raise ValueError(f"{path}: container holds {header.get('kind')!r}, not a flow generator")
    g = FlowGenerator(
        mode=header["mode"],
        depth=header["depth"],
        width=header["width"],
        s_max=header["s_max"],
        seed=header["seed"],
    )
    g.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return g
