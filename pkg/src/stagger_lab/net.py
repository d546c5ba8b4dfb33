"""Actor-critic MLP with hand-written reverse mode.

Block index -> embedding -> ReLU trunk -> (policy logits, scalar value).
By default the value head has its own embedding and trunk
(``separate_critic``); with it off both heads share one trunk.

The input is a discrete index with at most ``embedding_rows`` values, so the
trunk is evaluated once over the whole embedding table and per-sample outputs
are gathered from it; backward scatters head gradients onto the table rows.
Same function, same gradient, far fewer flops than running every sample. It
also makes outputs bit-stable: every call does the same matmuls regardless of
which samples are in the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from stagger_lab import rng

Tensors = dict[str, np.ndarray]


@dataclass(frozen=True)
class NetArch:
    embedding_rows: int
    num_actions: int
    embed_dim: int = 64
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    separate_critic: bool = True

    def trunks(self) -> tuple[str, ...]:
        return ("actor", "critic") if self.separate_critic else ("actor",)

    @property
    def value_trunk(self) -> str:
        return "critic" if self.separate_critic else "actor"


class NetworkParams:
    """Named tensors stored as views into one flat buffer (``flat``)."""

    def __init__(self, arch: NetArch, tensors: Tensors):
        self.arch = arch
        self.flat, self.tensors = pack(tensors)

    @property
    def dtype(self):
        return self.flat.dtype

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, self.tensors)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    def __repr__(self):
        return f"NetworkParams({self.arch}, {self.flat.size} weights)"


def pack(tensors: Tensors):
    """Copy ``tensors`` into one contiguous buffer; returns ``(flat, views)``."""
    dtype = np.result_type(*tensors.values())
    flat = np.concatenate([np.asarray(v, dtype=dtype).reshape(-1) for v in tensors.values()])
    views, pos = {}, 0
    for k, v in tensors.items():
        views[k] = flat[pos : pos + v.size].reshape(v.shape)
        pos += v.size
    return flat, views


def flatten(tensors: Tensors) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in tensors.values()])


def _orthogonal(gen: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = gen.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_params(
    seed: int,
    embedding_rows: int,
    num_actions: int,
    *,
    embed_dim: int = 64,
    hidden: tuple[int, ...] = (256, 256, 256, 256),
    separate_critic: bool = True,
    dtype=np.float32,
) -> NetworkParams:
    """Orthogonal init: gain sqrt(2) on the trunk, 0.01 policy head, 1.0 value head."""
    arch = NetArch(embedding_rows, num_actions, embed_dim, tuple(hidden), separate_critic)
    gen = rng.generator(seed, rng.INIT)
    t: Tensors = {}
    for trunk in arch.trunks():
        t[f"{trunk}/embed"] = gen.normal(scale=embed_dim**-0.5, size=(embedding_rows, embed_dim))
        width = embed_dim
        for i, h in enumerate(arch.hidden):
            t[f"{trunk}/w{i}"] = _orthogonal(gen, width, h, np.sqrt(2.0))
            t[f"{trunk}/b{i}"] = np.zeros(h)
            width = h
    t["pi_w"] = _orthogonal(gen, width, num_actions, 0.01)
    t["pi_b"] = np.zeros(num_actions)
    t["v_w"] = _orthogonal(gen, width, 1, 1.0)
    t["v_b"] = np.zeros(1)
    return NetworkParams(arch, {k: v.astype(dtype) for k, v in t.items()})


@dataclass
class ForwardCache:
    obs: np.ndarray
    acts: dict[str, list[np.ndarray]]


def _trunk_forward(t: Tensors, trunk: str, n_layers: int) -> list[np.ndarray]:
    x = t[f"{trunk}/embed"]
    acts = [x]
    for i in range(n_layers):
        x = np.maximum(x @ t[f"{trunk}/w{i}"] + t[f"{trunk}/b{i}"], 0)
        acts.append(x)
    return acts


def forward_cached(params: NetworkParams, obs):
    obs = np.asarray(obs, dtype=np.int64)
    rows = params.arch.embedding_rows
    if obs.size and (obs.min() < 0 or obs.max() >= rows):
        raise IndexError(f"block index outside [0, {rows})")
    obs = obs.reshape(-1)
    t = params.tensors
    n_layers = len(params.arch.hidden)
    acts = {name: _trunk_forward(t, name, n_layers) for name in params.arch.trunks()}
    logits = acts["actor"][-1] @ t["pi_w"] + t["pi_b"]
    values = (acts[params.arch.value_trunk][-1] @ t["v_w"] + t["v_b"])[:, 0]
    return logits[obs], values[obs], ForwardCache(obs, acts)


def forward(params: NetworkParams, obs):
    """Logits ``(n, A)`` and values ``(n,)`` for a batch of block indices."""
    logits, values, _ = forward_cached(params, obs)
    return logits, values


def backward(params: NetworkParams, cache: ForwardCache, dlogits, dvalues) -> Tensors:
    """Parameter gradients given the loss gradient w.r.t. logits and values."""
    t = params.tensors
    dtype = params.dtype
    rows = params.arch.embedding_rows
    dl = np.zeros((rows, params.arch.num_actions), dtype=dtype)
    np.add.at(dl, cache.obs, np.asarray(dlogits, dtype=dtype))
    dv = np.bincount(cache.obs, weights=np.asarray(dvalues, dtype=np.float64), minlength=rows)
    dv = dv.astype(dtype)[:, None]

    grads: Tensors = {}
    h_pi = cache.acts["actor"][-1]
    h_v = cache.acts[params.arch.value_trunk][-1]
    grads["pi_w"] = h_pi.T @ dl
    grads["pi_b"] = dl.sum(axis=0)
    grads["v_w"] = h_v.T @ dv
    grads["v_b"] = dv.sum(axis=0)

    upstream = {"actor": dl @ t["pi_w"].T}
    dh_v = dv @ t["v_w"].T
    if params.arch.separate_critic:
        upstream["critic"] = dh_v
    else:
        upstream["actor"] = upstream["actor"] + dh_v

    for trunk, dh in upstream.items():
        acts = cache.acts[trunk]
        for i in reversed(range(len(params.arch.hidden))):
            dz = dh * (acts[i + 1] > 0)
            grads[f"{trunk}/w{i}"] = acts[i].T @ dz
            grads[f"{trunk}/b{i}"] = dz.sum(axis=0)
            dh = dz @ t[f"{trunk}/w{i}"].T
        grads[f"{trunk}/embed"] = dh
    return {k: grads[k] for k in t}


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_actions(logits, u):
    """Inverse-CDF categorical sampling with one uniform per row.

    Returns ``(actions, log_probs)``.
    """
    logp = log_softmax(logits)
    probs = np.exp(logp.astype(np.float64))
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[:, -1:]
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    actions = np.minimum((cdf <= u).sum(axis=-1), logp.shape[-1] - 1)
    return actions, logp[np.arange(len(actions)), actions]


def entropy_from_logp(logp) -> np.ndarray:
    return -(np.exp(logp) * logp).sum(axis=-1)


def evaluate_actions(params: NetworkParams, obs, actions):
    """``(log_probs, entropies, values)`` of the given actions under ``params``."""
    logits, values = forward(params, obs)
    logp = log_softmax(logits)
    actions = np.asarray(actions, dtype=np.int64)
    return logp[np.arange(len(actions)), actions], entropy_from_logp(logp), values


# checkpoint layout: magic, u32 tensor count, then per tensor
# (u16 name length, utf-8 name, u8 ndim, u32 dims..., float32 LE row-major data)
_MAGIC = b"STAGLAB\x01"


def save_params(params: NetworkParams, path) -> None:
    arch = params.arch
    header = {
        "embedding_rows": arch.embedding_rows,
        "num_actions": arch.num_actions,
        "embed_dim": arch.embed_dim,
        "separate_critic": int(arch.separate_critic),
    }
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<4I", *header.values()))
        f.write(struct.pack("<B", len(arch.hidden)))
        f.write(struct.pack(f"<{len(arch.hidden)}I", *arch.hidden))
        f.write(struct.pack("<I", len(params.tensors)))
        for name, arr in params.tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> NetworkParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = len(_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    rows, n_act, emb, sep = take("<4I")
    (n_hidden,) = take("<B")
    hidden = take(f"<{n_hidden}I")
    (count,) = take("<I")
    tensors: Tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) * 4
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    arch = NetArch(rows, n_act, emb, tuple(hidden), bool(sep))
    return NetworkParams(arch, tensors)
