"""A small pre-LayerNorm decoder-only transformer with hand-written backprop.

Every weight is a named float64 matrix in a :class:`ParamStore`, so the scorer
can address ``(layer, "w_up")`` directly. Block layout::

    h = h + W_o(attn(LN1(h) W_q, LN1(h) W_k, LN1(h) W_v))
    h = h + gelu(LN2(h) W_up) W_down
    logits = LN_f(h) E^T          (output head tied to the token embedding)

Weights are stored input-major (``d_in x d_out``) so a projection is ``x @ W``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numcore
from ._fileio import atomic_write_bytes
from .errors import ConfigError, DataError, DomainError

SCORED_MODULES = ("w_q", "w_k", "w_v", "w_up", "w_down")
LAYER_MATRICES = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_up", "w_down")

LN_EPS = 1e-5
INIT_SCALE = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)
_CKPT_MAGIC = b"RFCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 128
    max_seq_len: int = 128
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_ff < self.d_model:
            raise ConfigError("d_ff must be >= d_model")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def layer_key(layer: int, module: str) -> str:
    return f"layers.{layer}.{module}"


class ParamStore:
    """Named parameter matrices of one model (or a gradient of the same shape)."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def zeros_like(cls, other: "ParamStore") -> "ParamStore":
        return cls(other.config, {k: np.zeros_like(v) for k, v in other.params.items()})

    def names(self) -> list[str]:
        return list(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def lookup(self, layer: int, module: str) -> np.ndarray:
        if not 0 <= layer < self.config.n_layers:
            raise ConfigError(f"layer {layer} outside [0, {self.config.n_layers})")
        if module not in LAYER_MATRICES:
            raise ConfigError(f"unknown module {module!r}")
        return self.params[layer_key(layer, module)]

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self.params.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.params:
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def equals(self, other: "ParamStore") -> bool:
        if self.config != other.config or list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for layer in range(cfg.n_layers):
        per_layer = {
            "ln1_g": (1, d), "ln1_b": (1, d),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "ln2_g": (1, d), "ln2_b": (1, d),
            "w_up": (d, f), "w_down": (f, d),
        }
        for mod in LAYER_MATRICES:
            shapes[layer_key(layer, mod)] = per_layer[mod]
    shapes["ln_f_g"] = (1, d)
    shapes["ln_f_b"] = (1, d)
    return shapes


def init(config: ModelConfig) -> ParamStore:
    """Seeded init: N(0, 0.02) for embeddings and projections, LayerNorm scale 1 / bias 0."""
    config.validate()
    rng = numcore.make_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) * INIT_SCALE
    return ParamStore(config, params)


# -- layers ------------------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=0, keepdims=True)
    db = dy.sum(axis=0, keepdims=True)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


class ForwardTrace:
    """Activations cached by one :func:`forward` call for the backward pass."""

    def __init__(self, tokens: np.ndarray):
        self.tokens = tokens
        self.layers: list[dict] = []
        self.final: dict = {}

    @property
    def attention(self) -> list[list[np.ndarray]]:
        """Per layer, per head attention probabilities (seq x seq)."""
        return [layer["probs"] for layer in self.layers]


def _check_tokens(params: ParamStore, tokens) -> np.ndarray:
    cfg = params.config
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise DataError("token sequence must be a nonempty 1-D sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError("token ids must be integers")
    if ids.size > cfg.max_seq_len:
        raise DataError(f"sequence length {ids.size} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"token id out of range [0, {cfg.vocab_size})")
    return ids.astype(np.int64)


def forward(params: ParamStore, tokens) -> tuple[np.ndarray, ForwardTrace]:
    cfg = params.config
    ids = _check_tokens(params, tokens)
    T = ids.size
    nh, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    future = np.triu(np.ones((T, T), dtype=bool), k=1)

    trace = ForwardTrace(ids)
    h = params["tok_emb"][ids] + params["pos_emb"][:T]
    for layer in range(cfg.n_layers):
        p = lambda m: params[layer_key(layer, m)]  # noqa: E731
        c = {"h_in": h}
        a_in, c["ln1"] = _layernorm(h, p("ln1_g"), p("ln1_b"))
        q = numcore.matmul(a_in, p("w_q"))
        k = numcore.matmul(a_in, p("w_k"))
        v = numcore.matmul(a_in, p("w_v"))
        heads, probs = [], []
        for i in range(nh):
            sl = slice(i * dh, (i + 1) * dh)
            s = numcore.matmul(q[:, sl], k[:, sl].T) * scale
            s[future] = -np.inf
            pr = _softmax_rows(s)
            probs.append(pr)
            heads.append(numcore.matmul(pr, v[:, sl]))
        o = np.concatenate(heads, axis=1)
        h = h + numcore.matmul(o, p("w_o"))
        m_in, c["ln2"] = _layernorm(h, p("ln2_g"), p("ln2_b"))
        u = numcore.matmul(m_in, p("w_up"))
        act, t = _gelu(u)
        h = h + numcore.matmul(act, p("w_down"))
        c.update(a_in=a_in, q=q, k=k, v=v, probs=probs, o=o, m_in=m_in, u=u, gelu_t=t, act=act)
        trace.layers.append(c)

    hf, lnf = _layernorm(h, params["ln_f_g"], params["ln_f_b"])
    logits = numcore.matmul(hf, params["tok_emb"].T)
    trace.final = {"hf": hf, "lnf": lnf}
    return logits, trace


def _masked_targets(ids: np.ndarray, loss_mask) -> np.ndarray:
    mask = np.asarray(loss_mask, dtype=bool)
    if mask.shape != ids.shape:
        raise DataError("loss_mask length must equal token length")
    # position t predicts token t+1; a target counts when its own mask bit is set
    weights = mask[1:]
    if not weights.any():
        raise DomainError("loss mask selects no target tokens")
    return weights


def loss_from_logits(logits: np.ndarray, ids: np.ndarray, weights: np.ndarray):
    """Mean next-token cross-entropy over weighted positions and its logits gradient."""
    z = logits[:-1]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(weights)[0]
    n = rows.size
    nll = lse[rows] - z[rows, ids[rows + 1]]
    loss = float(nll.sum() / n)

    dlogits = np.zeros_like(logits)
    probs = np.exp(z[rows] - lse[rows, None])
    probs[np.arange(n), ids[rows + 1]] -= 1.0
    dlogits[rows] = probs / n
    return loss, dlogits


def loss(params: ParamStore, tokens, loss_mask) -> float:
    logits, trace = forward(params, tokens)
    weights = _masked_targets(trace.tokens, loss_mask)
    return loss_from_logits(logits, trace.tokens, weights)[0]


def loss_and_grads(params: ParamStore, tokens, loss_mask) -> tuple[float, ParamStore]:
    cfg = params.config
    logits, trace = forward(params, tokens)
    ids = trace.tokens
    weights = _masked_targets(ids, loss_mask)
    value, dlogits = loss_from_logits(logits, ids, weights)

    T = ids.size
    nh, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    g = ParamStore.zeros_like(params)
    G = g.params

    hf = trace.final["hf"]
    G["tok_emb"] += numcore.matmul(dlogits.T, hf)
    dhf = numcore.matmul(dlogits, params["tok_emb"])
    dh_, G["ln_f_g"], G["ln_f_b"] = _layernorm_back(dhf, params["ln_f_g"], trace.final["lnf"])

    for layer in reversed(range(cfg.n_layers)):
        key = lambda m: layer_key(layer, m)  # noqa: E731
        c = trace.layers[layer]

        # MLP residual branch
        G[key("w_down")] = numcore.matmul(c["act"].T, dh_)
        dact = numcore.matmul(dh_, params[key("w_down")].T)
        du = _gelu_back(dact, c["u"], c["gelu_t"])
        G[key("w_up")] = numcore.matmul(c["m_in"].T, du)
        dm_in = numcore.matmul(du, params[key("w_up")].T)
        dx, G[key("ln2_g")], G[key("ln2_b")] = _layernorm_back(dm_in, params[key("ln2_g")], c["ln2"])
        dh_ = dh_ + dx

        # attention residual branch
        G[key("w_o")] = numcore.matmul(c["o"].T, dh_)
        do = numcore.matmul(dh_, params[key("w_o")].T)
        dq = np.zeros((T, cfg.d_model))
        dk = np.zeros((T, cfg.d_model))
        dv = np.zeros((T, cfg.d_model))
        for i in range(nh):
            sl = slice(i * dh, (i + 1) * dh)
            pr = c["probs"][i]
            do_h = do[:, sl]
            dp = numcore.matmul(do_h, c["v"][:, sl].T)
            dv[:, sl] = numcore.matmul(pr.T, do_h)
            ds = pr * (dp - (dp * pr).sum(axis=1, keepdims=True)) * scale
            dq[:, sl] = numcore.matmul(ds, c["k"][:, sl])
            dk[:, sl] = numcore.matmul(ds.T, c["q"][:, sl])
        a_in = c["a_in"]
        G[key("w_q")] = numcore.matmul(a_in.T, dq)
        G[key("w_k")] = numcore.matmul(a_in.T, dk)
        G[key("w_v")] = numcore.matmul(a_in.T, dv)
        da_in = (numcore.matmul(dq, params[key("w_q")].T)
                 + numcore.matmul(dk, params[key("w_k")].T)
                 + numcore.matmul(dv, params[key("w_v")].T))
        dx, G[key("ln1_g")], G[key("ln1_b")] = _layernorm_back(da_in, params[key("ln1_g")], c["ln1"])
        dh_ = dh_ + dx

    np.add.at(G["tok_emb"], ids, dh_)
    G["pos_emb"][:T] += dh_
    return value, g


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, header length, JSON header, raw little-endian float64 data."""
    header = {
        "config": asdict(params.config),
        "tensors": [[name, list(arr.shape)] for name, arr in params.items()],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_CKPT_MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    for arr in params.params.values():
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    config = ModelConfig(**header["config"]).validate()
    params = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return ParamStore(config, params), header["meta"]
