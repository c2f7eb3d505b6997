# adamw_ema/nets.py
"""
MLP builders that satisfy the scale-invariance hypotheses: a normalization
after every hidden linear layer, a global normalization over all logits of
the batch, learning-rate-dependent initialization, and a separate optimizer
group for normalization parameters.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from adamw_ema.autodiff import Graph, GraphBuilder, Tensor, forward, value_and_grad
from adamw_ema.errors import ConfigError
from adamw_ema.optimizer import ParamGroup

NORM_KINDS = ("batch", "layer")
LOSSES = ("cross-entropy", "mse")
DEFAULT_NORM_LR = 1e-3


# ---------- specs ----------
@dataclass(frozen=True)
class SINetSpec:
    widths: Tuple[int, ...] = (32, 32, 10)
    activation: str = "relu"
    normalize: bool = True
    output_global_norm: bool = True
    norm_affine: bool = False
    norm_kind: str = "batch"
    norm_eps: float = 0.0
    scale_invariant: bool = True
    loss: str = "cross-entropy"

    def __post_init__(self):
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if self.activation != "relu":
            raise ConfigError(f"only relu activations are supported, got '{self.activation}'")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got '{self.norm_kind}'")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got '{self.loss}'")
        if self.norm_eps < 0:
            raise ConfigError(f"norm_eps must be non-negative, got {self.norm_eps}")


@dataclass(frozen=True)
class InitSpec:
    rho: float = 1e-3
    eta0: float = 1e-3
    seed: int = 0
    sigma: Optional[float] = None  # fixed scale: standard, learning-rate independent init
    base_noise: Optional[Dict[str, np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be positive, got {self.eta0}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    @property
    def scale(self) -> float:
        return self.eta0 / self.rho if self.sigma is None else self.sigma

    @property
    def eta_dependent(self) -> bool:
        return self.sigma is None


# ---------- init ----------
def draw_base_noise(seed: int, shapes: Dict[str, Tuple[int, ...]]) -> Dict[str, np.ndarray]:
    """Fan-in scaled standard normal noise, drawn in the order of `shapes`."""
    rng = np.random.default_rng(seed)
    return {name: rng.standard_normal(shape) / math.sqrt(shape[0]) for name, shape in shapes.items()}


def eta_dependent_init(init: InitSpec, shapes: Dict[str, Tuple[int, ...]]) -> Dict[str, np.ndarray]:
    """w0 = sigma * xi with sigma = eta0 / rho (or the fixed sigma)."""
    noise = init.base_noise if init.base_noise is not None else draw_base_noise(init.seed, shapes)
    missing = [n for n in shapes if n not in noise]
    if missing:
        raise ConfigError(f"base noise has no entry for {missing}")
    sigma = init.scale
    return {name: sigma * noise[name] for name in shapes}


# ---------- graph pieces ----------
def _affine(b: GraphBuilder, z: int, prefix: str) -> int:
    z = b.multiply(z, b.input(f"{prefix}.scale"))
    return b.add(z, b.input(f"{prefix}.bias"))


def _batch_norm(b: GraphBuilder, z: int, eps: float) -> int:
    centered = b.add(z, b.negate(b.mean(z, axis=0)))
    return b.multiply(centered, b.rsqrt(b.variance(z, axis=0), eps))


def _layer_norm(b: GraphBuilder, z: int, width: int, eps: float) -> int:
    # per-sample statistics over features, built from matmuls against constant vectors
    avg = b.const(np.full((width, 1), 1.0 / width))
    spread = b.const(np.ones((1, width)))
    centered = b.add(z, b.negate(b.matmul(b.matmul(z, avg), spread)))
    var = b.matmul(b.multiply(centered, centered), avg)
    return b.multiply(centered, b.matmul(b.rsqrt(var, eps), spread))


def _global_norm(b: GraphBuilder, z: int, width: int, eps: float, affine: bool) -> int:
    flat = b.reshape(z, (-1, 1))
    flat = _batch_norm(b, flat, eps)
    if affine:
        flat = _affine(b, flat, "out_norm")
    return b.reshape(flat, (-1, width), name="logits")


# ---------- network ----------
@dataclass(frozen=True)
class SINet:
    spec: SINetSpec
    in_features: int
    graph: Graph
    params: Dict[str, Tensor]
    kinds: Dict[str, str]  # "linear" or "norm"

    @property
    def decayed(self) -> Tuple[str, ...]:
        return tuple(n for n, k in self.kinds.items() if k == "linear")


def param_shapes(spec: SINetSpec, in_features: int) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    fan_in = in_features
    for i, width in enumerate(spec.widths):
        shapes[f"linear{i}.weight"] = (fan_in, int(width))
        fan_in = int(width)
    return shapes


def build_si_mlp(spec: SINetSpec, init: InitSpec, in_features: int) -> SINet:
    if spec.scale_invariant and not (spec.normalize and spec.output_global_norm):
        raise ConfigError(
            "scale-invariant mode needs a normalization after every linear layer, "
            "including the global normalization after the output layer"
        )
    if in_features < 1:
        raise ConfigError(f"in_features must be positive, got {in_features}")

    b = GraphBuilder()
    x = b.input("x")
    y = b.input("y")
    h = x
    kinds: Dict[str, str] = {}
    norm_params: Dict[str, np.ndarray] = {}
    depth = len(spec.widths)
    for i, width in enumerate(spec.widths):
        kinds[f"linear{i}.weight"] = "linear"
        z = b.matmul(h, b.input(f"linear{i}.weight"))
        if i < depth - 1:
            if spec.normalize:
                if spec.norm_kind == "batch":
                    z = _batch_norm(b, z, spec.norm_eps)
                else:
                    z = _layer_norm(b, z, width, spec.norm_eps)
                if spec.norm_affine:
                    z = _affine(b, z, f"norm{i}")
                    norm_params[f"norm{i}.scale"] = np.ones(width)
                    norm_params[f"norm{i}.bias"] = np.zeros(width)
            h = b.relu(z)
        elif spec.output_global_norm:
            z = _global_norm(b, z, width, spec.norm_eps, spec.norm_affine)
            if spec.norm_affine:
                norm_params["out_norm.scale"] = np.ones(1)
                norm_params["out_norm.bias"] = np.zeros(1)
    b.output("logits", z)
    if spec.loss == "cross-entropy":
        loss = b.softmax_cross_entropy(z, y, name="loss")
    else:
        diff = b.add(z, b.negate(y))
        loss = b.mean(b.multiply(diff, diff), name="loss")
    b.output("loss", loss)

    params = eta_dependent_init(init, param_shapes(spec, in_features))
    params.update(norm_params)
    kinds.update({n: "norm" for n in norm_params})
    return SINet(spec, in_features, b.build(), params, kinds)


def net_logits(net: SINet, params: Dict[str, Tensor], x: Tensor) -> Tensor:
    y = np.zeros((x.shape[0], net.spec.widths[-1]))
    return forward(net.graph, {**params, "x": x, "y": y}, ["logits"])["logits"]


def loss_and_grad(net: SINet, params: Dict[str, Tensor], x: Tensor, y: Tensor):
    """(loss, logits, gradients w.r.t. every parameter)."""
    outs, grads = value_and_grad(net.graph, "loss", {**params, "x": x, "y": y}, list(params))
    return float(outs["loss"]), outs["logits"], grads


def output_global_norm(logits: Tensor) -> Tensor:
    """Standardize a B x C logit matrix with mean and std over all B*C entries."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.size < 2:
        raise ConfigError(f"need a B x C logit matrix with at least two entries, got {logits.shape}")
    flat = logits.reshape(-1, 1)
    var = flat.var()
    if var == 0.0:
        raise ConfigError("degenerate logits: zero variance across the batch")
    return ((flat - flat.mean()) / np.sqrt(var)).reshape(logits.shape)


# ---------- optimizer groups ----------
def partition_groups(
    params: Iterable[str],
    kinds: Dict[str, str],
    decouple_norm: bool = True,
    norm_lr: float = DEFAULT_NORM_LR,
    norm_eps: float = 1e-8,
) -> Dict[str, ParamGroup]:
    """
    Split parameters into the decayed, scheduled scale-invariant group and the
    undecayed normalization group. With `decouple_norm` the normalization
    group runs on its own fixed initial learning rate and epsilon.
    """
    si, norm = [], []
    for name in params:
        kind = kinds.get(name)
        if kind == "linear":
            si.append(name)
        elif kind == "norm":
            norm.append(name)
        else:
            raise ConfigError(f"parameter '{name}' is not classified as linear or norm")
    return {
        "si": ParamGroup("si", tuple(si), apply_decay=True),
        "norm": ParamGroup(
            "norm", tuple(norm), apply_decay=False,
            lr_override=norm_lr if decouple_norm else None,
            eps_override=norm_eps if decouple_norm else None,
        ),
    }
