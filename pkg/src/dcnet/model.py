"""DCN models: ODE blocks with SRF or pixel kernels, and the full networks.

An ODE block evolves its input h(0) under

    dh/dt = Gn3[ K2 g( K1 g(h) + d1 t ) + d2 t ],   g(x) = act(Gn(x))

from t = 0 to T. The classifier stacks three such blocks with two
downsampling stages in between; the autoencoder reuses the encoder and adds
a small upsampling decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, activation, bilinear_upsample, channel_offset, conv2d, global_avg_pool, group_norm, linear
from .ode import IntegrationResult, SolverConfig, VectorField, odeint
from .srf import SrfConv, TimeClipRule

GN_GROUPS = 32

MODEL_VARIANTS = (
    "dcn_ode",
    "dcn_full",
    "dcn_sigma_ji",
    "dcn_meta_sigma_t",
    "dcn_meta_sigma_t2",
    "dcn_meta_sigma_alpha_t",
    "ode_net",
    "resnet_blocks",
    "resnet_srf_blocks",
    "resnet_srf_full",
)

# variant -> (block kernel, SRF outside blocks, activation, T, residual)
_VARIANT_TABLE = {
    "dcn_ode": ("shared_sigma", False, "celu", 2.0, False),
    "dcn_full": ("shared_sigma", True, "celu", 2.0, False),
    "dcn_sigma_ji": ("per_channel_sigma", False, "celu", 2.0, False),
    "dcn_meta_sigma_t": ("meta_sigma_t", False, "celu", 2.0, False),
    "dcn_meta_sigma_t2": ("meta_sigma_t2", False, "celu", 2.0, False),
    "dcn_meta_sigma_alpha_t": ("meta_sigma_alpha_t", False, "celu", 2.0, False),
    "ode_net": ("pixel", False, "relu", 1.0, False),
    "resnet_blocks": ("pixel", False, "relu", 1.0, True),
    "resnet_srf_blocks": ("shared_sigma", False, "relu", 1.0, True),
    "resnet_srf_full": ("shared_sigma", True, "relu", 1.0, True),
}


def groups_for(channels: int, groups: int = GN_GROUPS) -> int:
    """Largest group count <= ``groups`` that divides ``channels``."""
    return math.gcd(channels, groups)


class PixelConv:
    """Plain k x k convolution, Kaiming-uniform initialized, no bias."""

    def __init__(self, cout: int, cin: int, stride: int = 1, k: int = 3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True, name="weight")
        self.stride = stride
        self.time_dependent = False

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def kernel_size(self, t: float = 0.0) -> int:
        return self.weight.shape[-1]

    def __call__(self, x: Tensor, t: float = 0.0) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride)


class Norm:
    def __init__(self, channels: int, groups: int = GN_GROUPS):
        self.groups = groups_for(channels, groups)
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name="beta")

    def named_parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta)


def make_conv(kind: str, cout: int, cin: int, stride: int, rng, method: str = "separable", clip=TimeClipRule()):
    if kind == "pixel":
        return PixelConv(cout, cin, stride, 3, rng)
    return SrfConv(cout, cin, kind, stride, seed=rng, method=method, clip=clip)


class Module:
    """Minimal container: ``children`` maps names to sub-objects with parameters."""

    children: dict

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for cname, child in self.children.items():
            for pname, p in child.named_parameters().items():
                out[f"{cname}.{pname}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class _Params:
    def __init__(self, **tensors: Tensor):
        self.tensors = tensors

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)


class OdeBlock(Module):
    """Continuous-depth block; ``residual=True`` turns it into h + f(h)."""

    def __init__(
        self,
        channels: int,
        kind: str = "shared_sigma",
        act: str = "celu",
        T: float = 2.0,
        solver: SolverConfig = SolverConfig(),
        residual: bool = False,
        rng=None,
        method: str = "separable",
        adjoint_solver: SolverConfig | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.kind = kind
        self.act = act
        self.T = float(T)
        self.solver = solver
        self.adjoint_solver = adjoint_solver
        self.residual = residual
        self.conv1 = make_conv(kind, channels, channels, 1, rng, method)
        self.conv2 = make_conv(kind, channels, channels, 1, rng, method)
        self.norm1, self.norm2, self.norm3 = Norm(channels), Norm(channels), Norm(channels)
        self.children = {
            "conv1": self.conv1,
            "conv2": self.conv2,
            "norm1": self.norm1,
            "norm2": self.norm2,
            "norm3": self.norm3,
        }
        if not residual:
            self.d1 = Tensor(np.zeros(channels), requires_grad=True, name="d1")
            self.d2 = Tensor(np.zeros(channels), requires_grad=True, name="d2")
            self.children["offsets"] = _Params(d1=self.d1, d2=self.d2)

    def rhs(self, h: Tensor, t: float) -> Tensor:
        return ode_rhs(h, t, self)

    def vector_field(self) -> VectorField:
        return VectorField(self.rhs, self.parameters())

    def kernel_sizes(self, t: float = 0.0) -> tuple[int, int]:
        return self.conv1.kernel_size(t), self.conv2.kernel_size(t)

    def __call__(self, h: Tensor, record: bool = False, T: float | None = None) -> tuple[Tensor, IntegrationResult]:
        if self.residual:
            out = h + discrete_rhs(h, self)
            traj = [(0.0, h), (1.0, out)] if record else None
            return out, IntegrationResult(out, 0, 0, 0, traj)
        t1 = self.T if T is None else T
        return odeint(self.vector_field(), h, 0.0, t1, self.solver, record, self.adjoint_solver)


def ode_rhs(h: Tensor, t: float, block: OdeBlock) -> Tensor:
    if h.ndim != 4 or h.shape[1] != block.channels:
        raise ValueError(f"block expects {block.channels} channels, got state of shape {h.shape}")
    x = activation(block.norm1(h), block.act)
    x = channel_offset(block.conv1(x, t), block.d1, t)
    x = activation(block.norm2(x), block.act)
    x = channel_offset(block.conv2(x, t), block.d2, t)
    return block.norm3(x)


def discrete_rhs(h: Tensor, block: OdeBlock) -> Tensor:
    """Residual branch of a ResNet block: the ODE field without time offsets."""
    x = activation(block.norm1(h), block.act)
    x = activation(block.norm2(block.conv1(x)), block.act)
    return block.norm3(block.conv2(x))


class Downsample(Module):
    """norm -> activation -> stride-2 conv."""

    def __init__(self, cout: int, cin: int, kind: str, act: str, rng, method: str = "separable"):
        self.norm = Norm(cin)
        self.conv = make_conv(kind, cout, cin, 2, rng, method)
        self.act = act
        self.children = {"norm": self.norm, "conv": self.conv}

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(activation(self.norm(x), self.act))


class Linear(Module):
    def __init__(self, out_features: int, in_features: int, rng):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, (out_features,)), requires_grad=True)
        self.children = {"params": _Params(weight=self.weight, bias=self.bias)}

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class ModelSpec:
    variant: str = "dcn_ode"
    widths: tuple[int, int, int] = (64, 128, 256)
    num_classes: int = 10
    task: str = "classify"
    in_channels: int = 3
    rtol: float = 1e-3
    atol: float = 1e-3
    conv_method: str = "separable"
    T: float | None = None  # None: the variant's default

    def __post_init__(self):
        if self.variant not in MODEL_VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; choose from {', '.join(MODEL_VARIANTS)}")
        if self.task not in ("classify", "reconstruct"):
            raise ValueError(f"unknown task {self.task!r}")
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"need three positive stage widths, got {self.widths}")

    @property
    def block_kind(self) -> str:
        return _VARIANT_TABLE[self.variant][0]

    @property
    def srf_everywhere(self) -> bool:
        return _VARIANT_TABLE[self.variant][1]

    @property
    def act(self) -> str:
        return _VARIANT_TABLE[self.variant][2]

    @property
    def block_T(self) -> float:
        return _VARIANT_TABLE[self.variant][3] if self.T is None else float(self.T)

    @property
    def residual(self) -> bool:
        return _VARIANT_TABLE[self.variant][4]

    def to_text(self) -> str:
        return "\n".join(
            [
                f"variant={self.variant}",
                f"widths={','.join(map(str, self.widths))}",
                f"num_classes={self.num_classes}",
                f"task={self.task}",
                f"in_channels={self.in_channels}",
                f"rtol={self.rtol!r}",
                f"atol={self.atol!r}",
                f"conv_method={self.conv_method}",
                f"T={'' if self.T is None else repr(self.T)}",
            ]
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines() if line.strip())
        return cls(
            variant=kv["variant"],
            widths=tuple(int(w) for w in kv["widths"].split(",")),
            num_classes=int(kv["num_classes"]),
            task=kv["task"],
            in_channels=int(kv["in_channels"]),
            rtol=float(kv["rtol"]),
            atol=float(kv["atol"]),
            conv_method=kv["conv_method"],
            T=float(kv["T"]) if kv.get("T") else None,
        )


def _block(spec: ModelSpec, channels: int, rng) -> OdeBlock:
    return OdeBlock(
        channels,
        spec.block_kind,
        spec.act,
        spec.block_T,
        SolverConfig(spec.rtol, spec.atol),
        spec.residual,
        rng,
        spec.conv_method,
    )


class Encoder(Module):
    """Input lift, three blocks and two downsampling stages."""

    def __init__(self, spec: ModelSpec, rng):
        c1, c2, c3 = spec.widths
        outer = "shared_sigma" if spec.srf_everywhere else "pixel"
        self.lift = make_conv(outer, c1, spec.in_channels, 1, rng, spec.conv_method)
        self.block1 = _block(spec, c1, rng)
        self.down1 = Downsample(c2, c1, outer, spec.act, rng, spec.conv_method)
        self.block2 = _block(spec, c2, rng)
        self.down2 = Downsample(c3, c2, outer, spec.act, rng, spec.conv_method)
        self.block3 = _block(spec, c3, rng)
        self.children = {
            "lift": self.lift,
            "block1": self.block1,
            "down1": self.down1,
            "block2": self.block2,
            "down2": self.down2,
            "block3": self.block3,
        }

    @property
    def blocks(self) -> list[OdeBlock]:
        return [self.block1, self.block2, self.block3]

    def __call__(
        self,
        x: Tensor,
        record_trajectories: bool = False,
        contrast_block_scale: float | None = None,
        block_T: tuple | None = None,
    ):
        """``contrast_block_scale`` multiplies every block's input state;
        ``block_T`` optionally overrides each block's integration end time."""
        h = self.lift(x)
        results = []
        overrides = block_T or (None, None, None)
        for blk, down, t_end in zip(self.blocks, (self.down1, self.down2, None), overrides):
            if contrast_block_scale is not None:
                h = h * contrast_block_scale
            h, res = blk(h, record_trajectories, t_end)
            results.append(res)
            if down is not None:
                h = down(h)
        return h, results


class Classifier(Module):
    def __init__(self, spec: ModelSpec, seed=0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.encoder = Encoder(spec, rng)
        self.head = Linear(spec.num_classes, spec.widths[2], rng)
        self.children = {"encoder": self.encoder, "head": self.head}

    @property
    def blocks(self) -> list[OdeBlock]:
        return self.encoder.blocks

    def __call__(self, x: Tensor, **kw):
        h, results = self.encoder(x, **kw)
        return self.head(global_avg_pool(h)), results


class Decoder(Module):
    """[block, x2 bilinear upsample, 1x1 conv, norm, act] twice, then 1x1 conv to RGB."""

    def __init__(self, spec: ModelSpec, rng, out_channels: int = 3):
        c1, c2, c3 = spec.widths
        self.block_a = _block(spec, c3, rng)
        self.reduce_a = PixelConv(c2, c3, 1, 1, rng)
        self.norm_a = Norm(c2)
        self.block_b = _block(spec, c2, rng)
        self.reduce_b = PixelConv(c1, c2, 1, 1, rng)
        self.norm_b = Norm(c1)
        self.to_rgb = PixelConv(out_channels, c1, 1, 1, rng)
        self.act = spec.act
        self.children = {
            "block_a": self.block_a,
            "reduce_a": self.reduce_a,
            "norm_a": self.norm_a,
            "block_b": self.block_b,
            "reduce_b": self.reduce_b,
            "norm_b": self.norm_b,
            "to_rgb": self.to_rgb,
        }

    @property
    def blocks(self) -> list[OdeBlock]:
        return [self.block_a, self.block_b]

    def __call__(self, h: Tensor, record_trajectories: bool = False):
        results = []
        for blk, red, norm in ((self.block_a, self.reduce_a, self.norm_a), (self.block_b, self.reduce_b, self.norm_b)):
            h, res = blk(h, record_trajectories)
            results.append(res)
            h = activation(norm(red(bilinear_upsample(h, 2))), self.act)
        return self.to_rgb(h), results


class Autoencoder(Module):
    def __init__(self, spec: ModelSpec, seed=0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.encoder = Encoder(spec, rng)
        self.decoder = Decoder(spec, rng, spec.in_channels)
        self.children = {"encoder": self.encoder, "decoder": self.decoder}

    @property
    def blocks(self) -> list[OdeBlock]:
        return self.encoder.blocks + self.decoder.blocks

    def __call__(self, x: Tensor, record_trajectories: bool = False, **kw):
        h, r1 = self.encoder(x, record_trajectories, **kw)
        out, r2 = self.decoder(h, record_trajectories)
        return out, r1 + r2


def build_model(spec: ModelSpec, seed: int = 0) -> Module:
    if spec.task == "reconstruct":
        return build_autoencoder(spec, seed)
    return Classifier(spec, seed)


def build_autoencoder(spec: ModelSpec, seed: int = 0, encoder_params: dict[str, np.ndarray] | None = None) -> Autoencoder:
    """Encoder-decoder for image reconstruction.

    ``encoder_params`` (names as in a classifier's ``encoder.*`` entries)
    initialize the encoder, e.g. from a trained classifier checkpoint.
    """
    if spec.task != "reconstruct":
        spec = ModelSpec(**{**spec.__dict__, "task": "reconstruct"})
    model = Autoencoder(spec, seed)
    if encoder_params is not None:
        own = model.encoder.named_parameters()
        for name, t in own.items():
            key = f"encoder.{name}"
            if key not in encoder_params:
                raise ValueError(f"encoder parameters lack {key!r}")
            if encoder_params[key].shape != t.shape:
                raise ValueError(f"shape mismatch for {key}: {encoder_params[key].shape} vs {t.shape}")
            t.data = np.array(encoder_params[key], dtype=t.data.dtype)
    return model


def forward(
    model: Module,
    batch: Tensor,
    record_trajectories: bool = False,
    contrast_block_scale: float | None = None,
    **kw,
) -> tuple[Tensor, list[IntegrationResult]]:
    """Run ``model``; returns its output and one IntegrationResult per block."""
    return model(batch, record_trajectories=record_trajectories, contrast_block_scale=contrast_block_scale, **kw)


def count_params(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def block_sigmas(model: Module, t: float = 0.0) -> list[np.ndarray]:
    """Scales of both convolutions in each block (empty array for pixel kernels)."""
    out = []
    for blk in model.blocks:
        vals = [np.ravel(c.sigmas(t)) for c in (blk.conv1, blk.conv2) if isinstance(c, SrfConv)]
        out.append(np.concatenate(vals) if vals else np.zeros(0))
    return out


__all__ = [
    "MODEL_VARIANTS",
    "ModelSpec",
    "OdeBlock",
    "PixelConv",
    "Norm",
    "Classifier",
    "Autoencoder",
    "build_model",
    "build_autoencoder",
    "forward",
    "ode_rhs",
    "discrete_rhs",
    "count_params",
    "block_sigmas",
    "groups_for",
]
