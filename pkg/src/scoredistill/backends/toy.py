"""Small numpy noise-prediction network with attention hooks.

Layout: input projection plus a sinusoidal time embedding, one self-attention
block over ``n_tokens`` slices of the hidden state (with an identity-map
perturbation hook), one decoupled cross-attention block (one text token,
``visual_tokens`` image tokens scaled by tau), residual MLP blocks, output
projection. Forward and backward are written out by hand.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..conditioning import ConditionSet
from ..guidance import softmax
from ..schedule import DiffusionSchedule
from .base import CapabilityError, Denoiser, DenoiserCapabilities

WEIGHTS_FORMAT_VERSION = 1
SELF_ATTN_BLOCK = "self_attn"


@dataclass(frozen=True)
class ToyArchitecture:
    latent_shape: tuple = (2,)
    hidden: int = 128
    n_tokens: int = 4
    mlp_hidden: int = 256
    n_blocks: int = 2
    time_features: int = 32
    n_classes: int = 4
    visual_tokens: int = 4
    class_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(s) for s in self.latent_shape))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.hidden % self.n_tokens:
            raise ValueError("hidden width must split evenly into tokens")

    @property
    def dim(self) -> int:
        return int(np.prod(self.latent_shape))

    @property
    def token_dim(self) -> int:
        return self.hidden // self.n_tokens

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_shape"] = list(self.latent_shape)
        d["class_names"] = list(self.class_names)
        return d


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def time_features(t: np.ndarray, n: int) -> np.ndarray:
    half = n // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def init_params(arch: ToyArchitecture, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    H, D, d, F = arch.hidden, arch.dim, arch.token_dim, arch.mlp_hidden

    def w(fan_in, *shape, scale=1.0):
        return rng.standard_normal(shape) * (scale / math.sqrt(fan_in))

    p = {
        "Win": w(D, D, H), "bin": np.zeros(H),
        "Wt1": w(arch.time_features, arch.time_features, H), "bt1": np.zeros(H),
        "Wt2": w(H, H, H), "bt2": np.zeros(H),
        "Wq": w(d, d, d), "Wk": w(d, d, d), "Wv": w(d, d, d), "Wo": w(d, d, d, scale=0.5),
        "Wqc": w(d, d, d), "Wkt": w(d, d, d), "Wvt": w(d, d, d),
        "Wki": w(d, d, d), "Wvi": w(d, d, d), "Woc": w(d, d, d, scale=0.5),
        "Etab": rng.standard_normal((arch.n_classes + 1, d)),
        "Wout": w(H, H, D, scale=0.1), "bout": np.zeros(D),
        "Wsk": np.zeros((H, 1)), "bsk": np.zeros(1),
    }
    for b in range(arch.n_blocks):
        p[f"W1_{b}"] = w(H, H, F)
        p[f"b1_{b}"] = np.zeros(F)
        p[f"Wtm_{b}"] = w(H, H, F)
        p[f"W2_{b}"] = w(F, F, H, scale=0.5)
        p[f"b2_{b}"] = np.zeros(H)
    return p


def forward(p, arch: ToyArchitecture, x, t, ids, vis=None, tau=None, perturb=False, keep=False):
    """Batched forward. ``x`` (B, D), ``t`` (B,), ``ids`` (B,) ints, ``vis`` (B, Nv, d) or None,
    ``tau`` scalar or (B,). Returns the prediction and, with ``keep``, the cache for :func:`backward`."""
    B = x.shape[0]
    H, n, d = arch.hidden, arch.n_tokens, arch.token_dim
    sd = 1.0 / math.sqrt(d)
    c = {}
    te = time_features(t, arch.time_features)
    a1 = te @ p["Wt1"] + p["bt1"]
    g1 = silu(a1)
    temb = g1 @ p["Wt2"] + p["bt2"]
    h0 = x @ p["Win"] + p["bin"] + temb
    X = h0.reshape(B, n, d)
    Q, K, V = _lin(X, p["Wq"]), _lin(X, p["Wk"]), _lin(X, p["Wv"])
    if perturb:
        A = None
        O = V
    else:
        A = softmax(Q @ np.swapaxes(K, 1, 2) * sd)
        O = A @ V
    h1 = h0 + _lin(O, p["Wo"]).reshape(B, H)
    X1 = h1.reshape(B, n, d)
    Qc = _lin(X1, p["Wqc"])
    e = p["Etab"][ids]
    Kt = (e @ p["Wkt"])[:, None, :]
    Vt = (e @ p["Wvt"])[:, None, :]
    At = softmax(Qc @ np.swapaxes(Kt, 1, 2) * sd)
    Fsum = At @ Vt
    Ai = Vi = Ki = tau_b = None
    if vis is not None:
        Ki, Vi = _lin(vis, p["Wki"]), _lin(vis, p["Wvi"])
        Ai = softmax(Qc @ np.swapaxes(Ki, 1, 2) * sd)
        tau_b = np.broadcast_to(np.asarray(tau, dtype=np.float64), (B,))[:, None, None]
        Fsum = Fsum + tau_b * (Ai @ Vi)
    h = h1 + _lin(Fsum, p["Woc"]).reshape(B, H)
    blocks = []
    for b in range(arch.n_blocks):
        u = h @ p[f"W1_{b}"] + p[f"b1_{b}"] + temb @ p[f"Wtm_{b}"]
        act = silu(u)
        blocks.append((h, u, act))
        h = h + act @ p[f"W2_{b}"] + p[f"b2_{b}"]
    z = silu(h)
    # time-gated skip from the input, so noise can bypass the hidden bottleneck
    gate = temb @ p["Wsk"] + p["bsk"]
    y = z @ p["Wout"] + p["bout"] + gate * x
    if keep:
        c.update(x=x, te=te, a1=a1, g1=g1, temb=temb, X=X, Q=Q, K=K, V=V, A=A, O=O,
                 X1=X1, Qc=Qc, e=e, ids=ids, Kt=Kt, Vt=Vt, At=At, vis=vis, Ki=Ki, Vi=Vi,
                 Ai=Ai, tau_b=tau_b, Fsum=Fsum, blocks=blocks, hL=h, z=z, perturb=perturb)
        return y, c
    return y


def _softmax_back(A, dA):
    return A * (dA - np.sum(dA * A, axis=-1, keepdims=True))


def _bsum(a, b):
    """sum over batch of a^T b for (B, n, i), (B, n, j) -> (i, j)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _lin(a, w):
    """Token-wise linear map done as one 2-D matmul."""
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(a.shape[:-1] + (w.shape[1],))


def backward(p, arch: ToyArchitecture, c, dy) -> dict[str, np.ndarray]:
    B = dy.shape[0]
    H, n, d = arch.hidden, arch.n_tokens, arch.token_dim
    sd = 1.0 / math.sqrt(d)
    g = {}
    g["Wout"] = c["z"].T @ dy
    g["bout"] = dy.sum(0)
    dgate = np.sum(dy * c["x"], axis=1, keepdims=True)
    g["Wsk"] = c["temb"].T @ dgate
    g["bsk"] = dgate.sum(0)
    dh = (dy @ p["Wout"].T) * silu_grad(c["hL"])
    dtemb = dgate @ p["Wsk"].T
    for b in reversed(range(arch.n_blocks)):
        h_in, u, act = c["blocks"][b]
        g[f"W2_{b}"] = act.T @ dh
        g[f"b2_{b}"] = dh.sum(0)
        du = (dh @ p[f"W2_{b}"].T) * silu_grad(u)
        g[f"W1_{b}"] = h_in.T @ du
        g[f"b1_{b}"] = du.sum(0)
        g[f"Wtm_{b}"] = c["temb"].T @ du
        dtemb += du @ p[f"Wtm_{b}"].T
        dh = dh + du @ p[f"W1_{b}"].T
    # cross-attention
    dh_r = dh.reshape(B, n, d)
    g["Woc"] = _bsum(c["Fsum"], dh_r)
    dF = _lin(dh_r, p["Woc"].T)
    Qc = c["Qc"]
    dQc = np.zeros_like(Qc)
    At, Vt, Kt = c["At"], c["Vt"], c["Kt"]
    dAt = dF @ np.swapaxes(Vt, 1, 2)
    dVt = np.swapaxes(At, 1, 2) @ dF
    dSt = _softmax_back(At, dAt) * sd
    dQc += dSt @ Kt
    dKt = np.swapaxes(dSt, 1, 2) @ Qc
    e = c["e"]
    g["Wkt"] = e.T @ dKt[:, 0]
    g["Wvt"] = e.T @ dVt[:, 0]
    de = dKt[:, 0] @ p["Wkt"].T + dVt[:, 0] @ p["Wvt"].T
    g["Etab"] = np.zeros_like(p["Etab"])
    np.add.at(g["Etab"], c["ids"], de)
    if c["vis"] is not None:
        dFi = c["tau_b"] * dF
        Ai, Vi, Ki = c["Ai"], c["Vi"], c["Ki"]
        dAi = dFi @ np.swapaxes(Vi, 1, 2)
        dVi = np.swapaxes(Ai, 1, 2) @ dFi
        dSi = _softmax_back(Ai, dAi) * sd
        dQc += dSi @ Ki
        dKi = np.swapaxes(dSi, 1, 2) @ Qc
        g["Wki"] = _bsum(c["vis"], dKi)
        g["Wvi"] = _bsum(c["vis"], dVi)
    else:
        g["Wki"] = np.zeros_like(p["Wki"])
        g["Wvi"] = np.zeros_like(p["Wvi"])
    g["Wqc"] = _bsum(c["X1"], dQc)
    dh1 = dh + _lin(dQc, p["Wqc"].T).reshape(B, H)
    # self-attention
    dh1_r = dh1.reshape(B, n, d)
    g["Wo"] = _bsum(c["O"], dh1_r)
    dO = _lin(dh1_r, p["Wo"].T)
    X, Q, K, V, A = c["X"], c["Q"], c["K"], c["V"], c["A"]
    if c["perturb"]:
        dV = dO
        dQ = np.zeros_like(Q)
        dK = np.zeros_like(K)
    else:
        dA = dO @ np.swapaxes(V, 1, 2)
        dV = np.swapaxes(A, 1, 2) @ dO
        dS = _softmax_back(A, dA) * sd
        dQ = dS @ K
        dK = np.swapaxes(dS, 1, 2) @ Q
    g["Wq"] = _bsum(X, dQ)
    g["Wk"] = _bsum(X, dK)
    g["Wv"] = _bsum(X, dV)
    dX = _lin(dQ, p["Wq"].T) + _lin(dK, p["Wk"].T) + _lin(dV, p["Wv"].T)
    dh0 = dh1 + dX.reshape(B, H)
    g["Win"] = c["x"].T @ dh0
    g["bin"] = dh0.sum(0)
    dtemb += dh0
    g["Wt2"] = c["g1"].T @ dtemb
    g["bt2"] = dtemb.sum(0)
    da1 = (dtemb @ p["Wt2"].T) * silu_grad(c["a1"])
    g["Wt1"] = c["te"].T @ da1
    g["bt1"] = da1.sum(0)
    return g


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


class ToyDenoiser(Denoiser):
    """Trainable toy backend operating directly in sample/pixel space."""

    def __init__(self, arch: ToyArchitecture, schedule: DiffusionSchedule, params=None, seed: int = 0,
                 metadata: dict | None = None, pixel_range: tuple | None = None):
        self.arch = arch
        self.schedule = schedule
        self.params = init_params(arch, seed) if params is None else {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.metadata = dict(metadata or {})
        # renderer images in [lo, hi] map affinely onto [-1, 1]
        self.pixel_range = None if pixel_range is None else (float(pixel_range[0]), float(pixel_range[1]))
        self.capabilities = DenoiserCapabilities(
            supports_visual_condition=True,
            supports_perturbed_attention=True,
            concurrent_queries=True,
            latent_shape=arch.latent_shape,
            T=schedule.T,
            visual_tokens=arch.visual_tokens,
            visual_dim=arch.token_dim,
            attention_blocks=(SELF_ATTN_BLOCK,),
            min_timestep=0,
        )

    # -- conditioning helpers -------------------------------------------------
    def class_id(self, text) -> int:
        if text is None:
            return 0
        if isinstance(text, (int, np.integer)):
            i = int(text)
        elif isinstance(text, str) and text in self.arch.class_names:
            i = self.arch.class_names.index(text) + 1
        else:
            raise ValueError(f"unknown text condition {text!r}; vocabulary {self.arch.class_names}")
        if not 1 <= i <= self.arch.n_classes:
            raise ValueError(f"class id {i} outside [1, {self.arch.n_classes}]")
        return i

    def _predict(self, x, t, conditions: ConditionSet, perturb, blocks):
        if perturb and blocks != "all" and SELF_ATTN_BLOCK not in tuple(blocks):
            unknown = set(blocks) - {SELF_ATTN_BLOCK}
            if unknown:
                raise CapabilityError(f"unknown attention blocks {sorted(unknown)}")
            perturb = False
        B = x.shape[0]
        xf = x.reshape(B, -1).astype(np.float64)
        ts = np.full(B, float(t))
        ids = np.full(B, self.class_id(conditions.text), dtype=np.int64)
        vis = None
        if conditions.visual is not None:
            vis = np.broadcast_to(conditions.visual, (B,) + conditions.visual.shape)
        y = forward(self.params, self.arch, xf, ts, ids, vis, conditions.tau, perturb)
        return y.reshape(x.shape)

    def self_attention_map(self, x, t, text=None) -> np.ndarray:
        """The (B, n, n) attention map of the self-attention block, for inspection."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.arch.dim)
        B = x.shape[0]
        ids = np.full(B, self.class_id(text), dtype=np.int64)
        _, c = forward(self.params, self.arch, x, np.full(B, float(t)), ids, keep=True)
        return c["A"]

    # -- latent codec ---------------------------------------------------------
    def encode(self, image):
        image = np.asarray(image, dtype=np.float64)
        if self.pixel_range is None:
            return image
        lo, hi = self.pixel_range
        return (image - lo) * (2.0 / (hi - lo)) - 1.0

    def encode_vjp(self, image, cotangent):
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if self.pixel_range is None:
            return cotangent
        lo, hi = self.pixel_range
        return cotangent * (2.0 / (hi - lo))

    def decode(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        if self.pixel_range is None:
            return latent
        lo, hi = self.pixel_range
        return (latent + 1.0) * ((hi - lo) / 2.0) + lo

    # -- serialization --------------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "schedule": {"T": self.schedule.T, "family": self.schedule.family},
            "pixel_range": list(self.pixel_range) if self.pixel_range else None,
            "metadata": self.metadata,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.config_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        header = {"format_version": WEIGHTS_FORMAT_VERSION, "config": self.config_dict(),
                  "config_hash": self.config_hash(), "params_sha256": params_digest(self.params)}
        arrays = {f"p/{k}": v for k, v in self.params.items()}
        arrays["schedule/beta"] = self.schedule.beta
        with path.open("wb") as fh:
            np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "ToyDenoiser":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported weights format {header.get('format_version')}")
            params = {k[2:]: z[k] for k in z.files if k.startswith("p/")}
            beta = z["schedule/beta"]
        cfg = header["config"]
        sched = DiffusionSchedule.from_betas(beta, family=cfg["schedule"]["family"])
        model = cls(ToyArchitecture(**cfg["arch"]), sched, params=params, metadata=cfg.get("metadata"),
                    pixel_range=cfg.get("pixel_range"))
        if model.config_hash() != header["config_hash"]:
            raise ValueError(f"{path}: embedded config hash does not match its config")
        if params_digest(model.params) != header["params_sha256"]:
            raise ValueError(f"{path}: weights checksum mismatch")
        return model
