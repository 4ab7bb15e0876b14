"""Learnable components of the forecasting system.

The model maps a batch of pasts ``(B, 2T-, m)`` to a :class:`PredictiveOutput`:

* a shared per-agent MLP encoder, optionally followed by one round of
  dot-product attention across agents,
* a mean head producing ``K`` future trajectories per agent,
* a positive per-(mode, agent) scalar ``phi``,
* an inverse scale matrix ``sigma_inv`` per mode, from one of three heads:

  ``pe-cu``   rows ``f(e_i, mu_i)`` of a shared per-agent MLP, ``F F^T + tau I``
  ``cu-npe``  unit-lower ``L`` and positive ``D`` read off a flat, fixed-order
              vector of all agents, ``L D L^T``
  ``iu-only`` positive diagonal from a shared per-agent MLP

Inputs are made agent-centric by subtracting each agent's last observed
position and dividing by ``coord_scale``; predicted means are mapped back to
absolute coordinates. ``phi`` is multiplied by ``phi_scale``; setting it to
``coord_scale`` keeps the phi head's raw output near unit size when phi is
trained toward displacement errors measured in absolute coordinates.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, ParseError, ValidationError
from .stats import make_rng
from .tensor import Tensor
from .textio import encode_array, read_lines, write_lines

ESTIMATORS = ("pe-cu", "cu-npe", "iu-only")
INTERACTIONS = ("none", "attention")
ACTIVATIONS = {"tanh": tn.tanh, "relu": tn.relu, "softplus": tn.softplus}
POSITIVITY = {"softplus": tn.softplus, "exp": tn.exp}


@dataclass
class ModelConfig:
    m: int = 4
    t_minus: int = 50
    t_plus: int = 50
    hidden: int = 64
    layers: int = 3
    K: int = 1
    tau: float = 1e-3
    estimator: str = "pe-cu"
    interaction: str = "none"
    activation: str = "tanh"
    phi_map: str = "softplus"
    rank: int = 8
    init_seed: int = 0
    coord_scale: float = 10.0
    phi_scale: float = 1.0
    detach_mean: bool = False
    positive_floor: float = 1e-6

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if min(self.m, self.t_minus, self.t_plus, self.hidden, self.layers, self.rank) < 1:
            raise ConfigError("m, t_minus, t_plus, hidden, layers and rank must be positive")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"interaction must be one of {INTERACTIONS}, got {self.interaction!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {tuple(ACTIVATIONS)}, got {self.activation!r}")
        if self.phi_map not in POSITIVITY:
            raise ConfigError(f"phi_map must be one of {tuple(POSITIVITY)}, got {self.phi_map!r}")
        if not self.coord_scale > 0 or not self.phi_scale > 0 or not self.positive_floor >= 0:
            raise ConfigError("coord_scale and phi_scale must be positive, positive_floor non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PredictiveOutput:
    """Batched model output.

    means      ``(B, K, 2T+, m)`` absolute coordinates
    phi        ``(B, K, m)`` strictly positive
    sigma_inv  ``(B, K, m, m)`` symmetric positive definite
    """

    means: Tensor
    phi: Tensor
    sigma_inv: Tensor

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.means.data, self.phi.data, self.sigma_inv.data


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(n, fan_in)``."""
    out = tn.matmul(x, w)
    return out + tn.broadcast_to(b, out.shape)


def mlp(x: Tensor, params: dict, prefix: str, depth: int, act) -> Tensor:
    """``depth`` affine layers named ``{prefix}{i}.w/.b``; activation between
    layers, none after the last."""
    for i in range(depth):
        x = linear(x, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"])
        if i < depth - 1:
            x = act(x)
    return x


def positive(x: Tensor, kind: str, floor: float, scale: float = 1.0) -> Tensor:
    y = POSITIVITY[kind](x)
    if scale != 1.0:
        y = y * scale
    return y + floor if floor else y


def sigma_inv_pe(rows: Tensor, tau: float) -> Tensor:
    """``F F^T + tau I`` for ``rows`` of shape ``(n, m, r)``."""
    n, m, _ = rows.shape
    gram = tn.matmul(rows, tn.transpose(rows))
    return gram + Tensor(np.broadcast_to(tau * np.eye(m), (n, m, m)))


def strict_lower_selector(m: int) -> np.ndarray:
    """``(m(m-1)/2, m*m)`` 0/1 matrix scattering a vector into the strictly
    lower triangle, row-major."""
    rows, cols = np.tril_indices(m, -1)
    sel = np.zeros((rows.size, m * m))
    sel[np.arange(rows.size), rows * m + cols] = 1.0
    return sel


def sigma_inv_ldl(lower: Tensor, diag: Tensor) -> Tensor:
    """``L D L^T`` with ``L = I + scatter(lower)``.

    ``lower`` is ``(n, m(m-1)/2)``, ``diag`` is ``(n, m)`` and positive.
    """
    n, m = diag.shape
    strict = tn.matmul(lower, Tensor(strict_lower_selector(m))).reshape(n, m, m)
    L = strict + Tensor(np.broadcast_to(np.eye(m), (n, m, m)))
    LD = L * tn.broadcast_to(diag.reshape(n, 1, m), (n, m, m))
    return tn.matmul(LD, tn.transpose(L))


def sigma_inv_diag(diag: Tensor) -> Tensor:
    """Diagonal matrices from ``(n, m)`` positive entries; off-diagonals are
    exactly zero."""
    n, m = diag.shape
    full = tn.broadcast_to(diag.reshape(n, 1, m), (n, m, m))
    return full * Tensor(np.broadcast_to(np.eye(m), (n, m, m)))


def select(means: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per agent, the mode with the lowest ``phi`` (first index on ties).

    Accepts ``means (K, 2T, m)`` with ``phi (K, m)`` or a leading batch axis
    on both. Returns ``(selected means (…, 2T, m), k* (…, m))``.
    """
    means = np.asarray(means)
    phi = np.asarray(phi)
    if means.ndim != phi.ndim + 1 or means.shape[:-2] != phi.shape[:-1] or means.shape[-1] != phi.shape[-1]:
        raise DimensionError(f"select: means {means.shape} and phi {phi.shape} do not align")
    k = np.argmin(phi, axis=-2)
    picked = np.take_along_axis(means, k[..., None, None, :], axis=-3)
    return picked[..., 0, :, :], k


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise ValidationError(f"parameter names do not match the config: "
                                  f"{sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValidationError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def act(self):
        return ACTIVATIONS[self.config.activation]

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    # -- stages ---------------------------------------------------------
    def agent_inputs(self, past: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Agent-centric scaled inputs ``(B, m, 2T-)`` and anchors ``(B, 2, m)``."""
        c = self.config
        past = np.asarray(past, dtype=np.float64)
        if past.ndim == 2:
            past = past[None]
        if past.shape[1:] != (2 * c.t_minus, c.m):
            raise DimensionError(f"past has shape {past.shape[1:]}, expected {(2 * c.t_minus, c.m)}")
        anchor = past[:, -2:, :]
        rel = (past.reshape(past.shape[0], c.t_minus, 2, c.m) - anchor[:, None]) / c.coord_scale
        return rel.reshape(past.shape[0], 2 * c.t_minus, c.m).transpose(0, 2, 1), anchor

    def encode(self, past: np.ndarray) -> Tensor:
        """Latent features ``(B, m, hidden)``; row ``i`` belongs to agent ``i``."""
        c = self.config
        rel, _ = self.agent_inputs(past)
        B = rel.shape[0]
        x = Tensor(rel.reshape(B * c.m, 2 * c.t_minus))
        h = self.act(mlp(x, self.params, "enc", c.layers, self.act))
        if c.interaction == "attention":
            p = self.params
            q = tn.matmul(h, p["att.q"]).reshape(B, c.m, c.hidden)
            k = tn.matmul(h, p["att.k"]).reshape(B, c.m, c.hidden)
            v = tn.matmul(h, p["att.v"]).reshape(B, c.m, c.hidden)
            scores = tn.matmul(q, tn.transpose(k)) * (1.0 / np.sqrt(c.hidden))
            h = h + tn.matmul(tn.softmax(scores, axis=-1), v).reshape(B * c.m, c.hidden)
        return h.reshape(B, c.m, c.hidden)

    def predict_mean(self, feat: Tensor) -> Tensor:
        """Agent-centric scaled mode means ``(B, m, K, 2T+)``."""
        c = self.config
        B = feat.shape[0]
        h = feat.reshape(B * c.m, c.hidden)
        out = mlp(h, self.params, "mean", 2, self.act)
        return out.reshape(B, c.m, c.K, 2 * c.t_plus)

    def _head_inputs(self, feat: Tensor, mean_rel: Tensor) -> Tensor:
        """``(B, K, m, hidden + 2T+)``: each agent's feature next to its mode mean."""
        c = self.config
        B = feat.shape[0]
        if c.detach_mean:
            mean_rel = mean_rel.detach()
        e = tn.broadcast_to(feat.reshape(B, 1, c.m, c.hidden), (B, c.K, c.m, c.hidden))
        mu = tn.transpose(mean_rel, (0, 2, 1, 3))
        return tn.concat([e, mu], axis=-1)

    def predict_phi(self, feat: Tensor, mean_rel: Tensor) -> Tensor:
        c = self.config
        z = self._head_inputs(feat, mean_rel)
        B = z.shape[0]
        out = mlp(z.reshape(B * c.K * c.m, z.shape[-1]), self.params, "phi", 2, self.act)
        return positive(out, c.phi_map, c.positive_floor, c.phi_scale).reshape(B, c.K, c.m)

    def estimate_sigma_inv(self, feat: Tensor, mean_rel: Tensor) -> Tensor:
        c = self.config
        z = self._head_inputs(feat, mean_rel)
        B, m = z.shape[0], c.m
        n = B * c.K
        width = z.shape[-1]
        if c.estimator == "pe-cu":
            rows = mlp(z.reshape(n * m, width), self.params, "sig", 2, self.act)
            out = sigma_inv_pe(rows.reshape(n, m, c.rank), c.tau)
        elif c.estimator == "cu-npe":
            flat = mlp(z.reshape(n, m * width), self.params, "sig", 2, self.act)
            nl = m * (m - 1) // 2
            lower = tn.matmul(flat, Tensor(np.eye(nl + m)[:, :nl]))
            diag = positive(tn.matmul(flat, Tensor(np.eye(nl + m)[:, nl:])), c.phi_map, c.positive_floor)
            out = sigma_inv_ldl(lower, diag)
        else:
            d = mlp(z.reshape(n * m, width), self.params, "sig", 2, self.act)
            out = sigma_inv_diag(positive(d, c.phi_map, c.positive_floor).reshape(n, m))
        return out.reshape(B, c.K, m, m)

    def absolute_means(self, mean_rel: Tensor, anchor: np.ndarray) -> Tensor:
        c = self.config
        B = mean_rel.shape[0]
        mu = tn.transpose(mean_rel, (0, 2, 3, 1)) * c.coord_scale  # (B, K, 2T+, m)
        offset = np.tile(anchor, (1, c.t_plus, 1))[:, None]  # (B, 1, 2T+, m)
        return mu + Tensor(np.broadcast_to(offset, mu.shape))

    def forward(self, past: np.ndarray) -> PredictiveOutput:
        _, anchor = self.agent_inputs(past)
        feat = self.encode(past)
        mean_rel = self.predict_mean(feat)
        return PredictiveOutput(
            self.absolute_means(mean_rel, anchor),
            self.predict_phi(feat, mean_rel),
            self.estimate_sigma_inv(feat, mean_rel),
        )

    __call__ = forward

    def predict(self, past: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Untracked forward pass over a large array, in chunks."""
        past = np.asarray(past)
        chunks = [self.forward(past[i:i + batch]).numpy() for i in range(0, len(past), batch)]
        return tuple(np.concatenate(parts) for parts in zip(*chunks))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()[:16]


def param_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix, widths):
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"{prefix}{i}.w"] = (a, b)
            shapes[f"{prefix}{i}.b"] = (b,)

    h, m = c.hidden, c.m
    block("enc", [2 * c.t_minus] + [h] * c.layers)
    if c.interaction == "attention":
        for n in ("q", "k", "v"):
            shapes[f"att.{n}"] = (h, h)
    block("mean", [h, h, c.K * 2 * c.t_plus])
    head_in = h + 2 * c.t_plus
    block("phi", [head_in, h, 1])
    if c.estimator == "pe-cu":
        block("sig", [head_in, h, c.rank])
    elif c.estimator == "cu-npe":
        block("sig", [m * head_in, h, m * (m - 1) // 2 + m])
    else:
        block("sig", [head_in, h, 1])
    return shapes


def init_params(c: ModelConfig) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = make_rng(c.init_seed)
    params = {}
    for name, shape in sorted(param_shapes(c).items()):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    header = {"version": 1, "kind": "checkpoint", "config": model.config.to_dict()}
    if extra:
        header["extra"] = extra
    records = ({"name": k, "shape": list(v.shape), "data": encode_array(v.data)}
               for k, v in sorted(model.params.items()))
    write_lines(path, header, records)


def load_checkpoint(path) -> tuple[Model, dict]:
    header, records = read_lines(path)
    if header.get("kind") != "checkpoint" or "config" not in header:
        raise ParseError(f"{path}: line 1: not a checkpoint header")
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for lineno, rec in records:
        try:
            shape = tuple(int(s) for s in rec["shape"])
            data = np.asarray(rec["data"], dtype=np.float64)
            params[rec["name"]] = Tensor(data.reshape(shape), requires_grad=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: line {lineno}: bad parameter record ({exc})") from None
    return Model(config, params), header.get("extra", {})


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
