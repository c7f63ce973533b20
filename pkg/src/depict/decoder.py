"""DEPICT-SA / DEPICT-CA assembly, mask prediction, rate probes, parameter
perturbations and checkpoint files.

Layers are pre-norm residual: the operator update is computed on
``LN(Z)`` and added to the un-normalized stream.

Checkpoint layout (little-endian)::

    b"DPCT" | u32 version | u32 variant (0=SA, 1=CA) | u32 sa_layers
    | u32 ca_layers | u32 heads | u32 head_dim | u32 num_classes | u32 dim
    | u32 step_form (0=simplified, 1=full) | u32 final_norm
    | u32 normalize_queries | f64 epsilon | f64 ln_eps
    | f64 tensors in flatten() order, matrices column-major

A JSON sidecar ``<path>.json`` mirrors the config.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coding_rate import RateConfig, coding_rate, projected_coding_rate
from .errors import BadMagic, ConfigInvalid, NonFinite, ShapeCorrupt, ShapeMismatch, VersionMismatch
from .matcore import qr_orthonormalize, random_orthogonal, rng
from .operators import (
    LayerNormParams,
    SubspaceDictionary,
    layer_norm,
    msca_update,
    mssa_update,
)

CKPT_MAGIC = b"DPCT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIIIIIIIdd")
PERTURB_KINDS = ("per_head_orthogonal", "full_orthogonal", "orthogonalize_heads", "gaussian_noise")


@dataclass(frozen=True)
class DecoderConfig:
    variant: str = "CA"
    sa_layers: int = 2
    ca_layers: int = 1
    heads: int = 2
    head_dim: int = 4
    num_classes: int = 4
    dim: int = 16
    epsilon: float = 0.5
    step_form: str = "simplified"
    final_norm: bool = True
    normalize_queries: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in ("SA", "CA"):
            raise ConfigInvalid(f"variant must be SA or CA, got {self.variant!r}")
        if self.sa_layers < 0 or self.ca_layers < 0:
            raise ConfigInvalid("layer counts must be >= 0")
        if self.variant == "CA" and self.ca_layers < 1:
            raise ConfigInvalid("the CA variant needs ca_layers >= 1")
        if self.heads < 1 or self.head_dim < 1 or self.num_classes < 0 or self.dim < 1:
            raise ConfigInvalid("heads, head_dim, dim must be >= 1")
        if self.step_form not in ("full", "simplified"):
            raise ConfigInvalid(f"unknown step_form {self.step_form!r}")

    @property
    def dict_cols(self):
        return self.heads * self.head_dim

    @property
    def ca_count(self):
        """Cross-attention layers actually run (the SA variant has none)."""
        return self.ca_layers if self.variant == "CA" else 0

    def rate_config(self):
        return RateConfig(epsilon=self.epsilon)

    def to_dict(self):
        return asdict(self)


@dataclass
class LayerParams:
    P: np.ndarray  # D x K
    alpha: float
    ln: LayerNormParams


@dataclass
class DecoderParams:
    sa: list
    ca: list
    q0: np.ndarray  # D x C
    final_ln: LayerNormParams

    def flatten(self):
        """[(name, array)] in checkpoint order; alpha is a 0-d array."""
        out = [("q0", self.q0)]
        for tag, layers in (("sa", self.sa), ("ca", self.ca)):
            for i, lp in enumerate(layers):
                out += [
                    (f"{tag}{i}.P", lp.P),
                    (f"{tag}{i}.alpha", np.asarray(lp.alpha, dtype=np.float64)),
                    (f"{tag}{i}.gain", lp.ln.gain),
                    (f"{tag}{i}.bias", lp.ln.bias),
                ]
        out += [("final.gain", self.final_ln.gain), ("final.bias", self.final_ln.bias)]
        return out

    def with_arrays(self, arrays):
        """Copy of these params with tensors replaced, in flatten() order."""
        it = iter(arrays)
        new = copy.deepcopy(self)
        new.q0 = np.array(next(it), dtype=np.float64)
        for layers in (new.sa, new.ca):
            for lp in layers:
                lp.P = np.array(next(it), dtype=np.float64)
                lp.alpha = float(next(it))
                lp.ln.gain = np.array(next(it), dtype=np.float64)
                lp.ln.bias = np.array(next(it), dtype=np.float64)
        new.final_ln.gain = np.array(next(it), dtype=np.float64)
        new.final_ln.bias = np.array(next(it), dtype=np.float64)
        return new

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.flatten())


def _init_dictionary(config, gen):
    D, M = config.dim, config.head_dim
    if M > D:
        raise ConfigInvalid("head_dim cannot exceed dim")
    blocks = [qr_orthonormalize(gen.standard_normal((D, M))) for _ in range(config.heads)]
    return np.hstack(blocks)


def init_params(config, seed=0, alpha=0.1, q_scale=0.02):
    """Per-head orthonormal P, alpha = 0.1, Q0 ~ 0.02 N(0, 1), identity LayerNorms."""
    gen = rng(seed)
    D = config.dim

    def layer():
        return LayerParams(
            _init_dictionary(config, gen), float(alpha), LayerNormParams.identity(D, config.ln_eps)
        )

    sa = [layer() for _ in range(config.sa_layers)]
    ca = [layer() for _ in range(config.ca_count)]
    q0 = q_scale * gen.standard_normal((D, config.num_classes))
    return DecoderParams(sa, ca, q0, LayerNormParams.identity(D, config.ln_eps))


@dataclass
class ForwardResult:
    z: np.ndarray
    q: np.ndarray
    logits: np.ndarray  # C x N
    trace: list = field(default_factory=list)


def _check_finite(arr, phase, index):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values after {phase} layer {index}")


def _normalize_cols(Q):
    return Q / np.sqrt(np.sum(Q * Q, axis=0, keepdims=True) + 1e-12)


def _mask(Q, Z, params, config):
    Zf = layer_norm(Z, params.final_ln) if config.final_norm else Z
    Qf = _normalize_cols(Q) if config.normalize_queries else Q
    return Qf.T @ Zf


def _check_input(Z0, params, config):
    Z0 = np.asarray(Z0, dtype=np.float64)
    if Z0.ndim != 2 or Z0.shape[0] != config.dim:
        raise ShapeMismatch(f"expected a {config.dim} x N input, got {Z0.shape}")
    if len(params.sa) != config.sa_layers or len(params.ca) != config.ca_count:
        raise ShapeMismatch("parameter layer counts do not match the config")
    return Z0


def depict_ca_forward(Z0, params, config):
    """MSSA refinement of Z, then MSCA updates of Q, then masks Q^T LN(Z)."""
    Z = _check_input(Z0, params, config)
    cfg = config.rate_config()
    Q = np.array(params.q0, dtype=np.float64)
    trace = [{"phase": "input", "layer": 0, "Z": Z.copy(), "Q": Q.copy()}]
    for i, lp in enumerate(params.sa):
        P = SubspaceDictionary(lp.P, config.heads)
        Z = Z + mssa_update(layer_norm(Z, lp.ln), P, lp.alpha, cfg, config.step_form)
        _check_finite(Z, "sa", i)
        trace.append({"phase": "sa", "layer": i, "Z": Z.copy(), "Q": Q.copy()})
    for i, lp in enumerate(params.ca):
        P = SubspaceDictionary(lp.P, config.heads)
        Q = Q + msca_update(Q, layer_norm(Z, lp.ln), P, lp.alpha, cfg, config.step_form)
        _check_finite(Q, "ca", i)
        trace.append({"phase": "ca", "layer": i, "Z": Z.copy(), "Q": Q.copy()})
    return ForwardResult(Z, Q, _mask(Q, Z, params, config), trace)


def depict_sa_forward(Z0, params, config):
    """MSSA layers on the concatenation [Z, Q0]; masks from the split halves."""
    Z = _check_input(Z0, params, config)
    cfg = config.rate_config()
    N = Z.shape[1]
    S = np.hstack([Z, params.q0])
    trace = [{"phase": "input", "layer": 0, "Z": Z.copy(), "Q": params.q0.copy()}]
    for i, lp in enumerate(params.sa):
        P = SubspaceDictionary(lp.P, config.heads)
        S = S + mssa_update(layer_norm(S, lp.ln), P, lp.alpha, cfg, config.step_form)
        _check_finite(S, "sa", i)
        trace.append({"phase": "sa", "layer": i, "Z": S[:, :N].copy(), "Q": S[:, N:].copy()})
    Z, Q = S[:, :N], S[:, N:]
    return ForwardResult(Z, Q, _mask(Q, Z, params, config), trace)


def forward(Z0, params, config):
    if config.variant == "CA":
        return depict_ca_forward(Z0, params, config)
    return depict_sa_forward(Z0, params, config)


def predict_labels(M):
    """Argmax over classes for every column; ties go to the lowest class."""
    return np.argmax(np.asarray(M), axis=-2)


def layerwise_rate_probe(params, config, Z0):
    """Projected rates of every refinement state onto every layer's head subspaces.

    One row per (layer, head, probe point) with ``R(P_h^T Z_l')`` and
    ``R(P_h P_h^T Z_l') / R(Z_l')``. Probe points are the input and the
    output of each self-attention layer (Z part only).
    """
    res = forward(Z0, params, config)
    cfg = config.rate_config()
    states = [t["Z"] for t in res.trace if t["phase"] in ("input", "sa")]
    rows = []
    for layer, lp in enumerate(params.sa):
        P = SubspaceDictionary(lp.P, config.heads)
        for h, Ph in enumerate(P.blocks()):
            for point, Z in enumerate(states):
                rz = coding_rate(Z, cfg)
                proj = projected_coding_rate(Z, Ph, cfg)
                lifted = coding_rate(Ph @ (Ph.T @ Z), cfg)
                rows.append(
                    {
                        "layer": layer,
                        "head": h,
                        "point": point,
                        "alpha": float(lp.alpha),
                        "proj_rate": proj,
                        "rate_ratio": lifted / rz if rz > 0 else 0.0,
                    }
                )
    return rows


def own_layer_rate_changes(rows):
    """[(layer, head, alpha, R at layer output - R at layer input)]."""
    table = {(r["layer"], r["head"], r["point"]): r for r in rows}
    out = []
    for (layer, head, point), r in sorted(table.items()):
        if point == layer:
            after = table[(layer, head, layer + 1)]
            out.append((layer, head, r["alpha"], after["proj_rate"] - r["proj_rate"]))
    return out


def perturb_params(params, kind, seed=0, sigma=0.0, heads=1):
    """Perturbed copy of ``params``; only the dictionaries P are touched.

    ``heads`` is the number of column blocks each P is split into.
    """
    if kind not in PERTURB_KINDS:
        raise ConfigInvalid(f"unknown perturbation {kind!r}")
    gen = rng(seed)
    new = copy.deepcopy(params)
    for lp in new.sa + new.ca:
        D, K = lp.P.shape
        if K % heads:
            raise ShapeMismatch(f"K={K} is not divisible into {heads} heads")
        M = K // heads
        if kind == "per_head_orthogonal":
            lp.P = np.hstack(
                [lp.P[:, h * M : (h + 1) * M] @ random_orthogonal(M, gen) for h in range(heads)]
            )
        elif kind == "full_orthogonal":
            lp.P = lp.P @ random_orthogonal(K, gen)
        elif kind == "orthogonalize_heads":
            lp.P = np.hstack(
                [qr_orthonormalize(lp.P[:, h * M : (h + 1) * M]) for h in range(heads)]
            )
        elif sigma != 0.0:
            lp.P = lp.P + sigma * gen.standard_normal((D, K))
    return new


def perturb(params, config, kind, seed=0, sigma=0.0):
    """:func:`perturb_params` with the head count taken from ``config``."""
    return perturb_params(params, kind, seed, sigma, config.heads)


def write_checkpoint(path, config, params):
    path = Path(path)
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC,
        CKPT_VERSION,
        0 if config.variant == "SA" else 1,
        config.sa_layers,
        config.ca_layers,
        config.heads,
        config.head_dim,
        config.num_classes,
        config.dim,
        0 if config.step_form == "simplified" else 1,
        int(config.final_norm),
        int(config.normalize_queries),
        float(config.epsilon),
        float(config.ln_eps),
    )
    body = b"".join(
        np.asarray(a, dtype="<f8").tobytes(order="F") for _, a in params.flatten()
    )
    path.write_bytes(header + body)
    sidecar = {"format": "DPCT", "version": CKPT_VERSION, "config": config.to_dict()}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ShapeCorrupt("checkpoint shorter than header")
    fields = _CKPT_HEADER.unpack_from(raw)
    if fields[0] != CKPT_MAGIC:
        raise BadMagic(f"bad magic {fields[0]!r}")
    if fields[1] != CKPT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {fields[1]}")
    config = DecoderConfig(
        variant="SA" if fields[2] == 0 else "CA",
        sa_layers=fields[3],
        ca_layers=fields[4],
        heads=fields[5],
        head_dim=fields[6],
        num_classes=fields[7],
        dim=fields[8],
        step_form="simplified" if fields[9] == 0 else "full",
        final_norm=bool(fields[10]),
        normalize_queries=bool(fields[11]),
        epsilon=fields[12],
        ln_eps=fields[13],
    )
    template = init_params(config, 0)
    off = _CKPT_HEADER.size
    arrays = []
    for _, a in template.flatten():
        n = a.size
        if off + 8 * n > len(raw):
            raise ShapeCorrupt("checkpoint truncated")
        vals = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        arrays.append(vals.reshape(a.shape, order="F"))
        off += 8 * n
    if off != len(raw):
        raise ShapeCorrupt("trailing bytes in checkpoint")
    return config, template.with_arrays(arrays)
