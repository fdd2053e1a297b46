"""BERT-style post-LN encoder with attention capture, head ablation and a
hand-written backward pass.

Parameters are an ordered ``dict[str, np.ndarray]``; the key order is the
manifest order used by the checkpoint format. Weight matrices are stored
``(in, out)`` so every projection is ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from attnatlas.errors import CheckpointError, DataError, ShapeError
from attnatlas.numerics import Rng, gelu, gelu_grad, sample_normal, softmax_rows

CLS_ID = 0
SEP_ID = 1
MASK_ID = 2
SPECIAL_IDS = (CLS_ID, SEP_ID)

CKPT_MAGIC = b"ATNATLAS-CKPT v1\n"
INIT_STD = 0.02

Parameters = dict  # str -> np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 64
    max_len: int = 32
    n_segments: int = 2
    eps_ln: float = 1e-12
    n_labels: int = 2

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "n_segments", "n_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_len < 3:
            raise ValueError("max_len must be at least 3")
        if self.eps_ln <= 0:
            raise ValueError("eps_ln must be positive")
        if self.vocab_size <= MASK_ID:
            raise ValueError("vocab_size must leave room for the special ids")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class HeadCoord(NamedTuple):
    layer: int
    head: int


@dataclass(frozen=True)
class AblationSpec:
    """Heads whose attention map is replaced by the constant 1/L."""

    disabled: frozenset = field(default_factory=frozenset)

    @classmethod
    def of(cls, coords: Iterable) -> "AblationSpec":
        return cls(frozenset(HeadCoord(int(l), int(h)) for l, h in coords))

    @classmethod
    def layer(cls, layer: int, config: ModelConfig) -> "AblationSpec":
        return cls.of((layer, h) for h in range(config.n_heads))

    @classmethod
    def everything(cls, config: ModelConfig) -> "AblationSpec":
        return cls.of((l, h) for l in range(config.n_layers) for h in range(config.n_heads))

    def validate(self, config: ModelConfig) -> None:
        for c in self.disabled:
            if not (0 <= c.layer < config.n_layers and 0 <= c.head < config.n_heads):
                raise DataError(f"head {tuple(c)} outside a {config.n_layers}x{config.n_heads} model")

    def heads_in_layer(self, layer: int) -> list[int]:
        return sorted(c.head for c in self.disabled if c.layer == layer)

    def __bool__(self) -> bool:
        return bool(self.disabled)


NO_ABLATION = AblationSpec()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    segment_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "segment_ids", tuple(int(s) for s in self.segment_ids))
        if len(self.ids) != len(self.segment_ids):
            raise DataError("ids and segment_ids differ in length")
        if not self.ids or self.ids[0] != CLS_ID:
            raise DataError("sequence must start with [CLS]")
        if SEP_ID not in self.ids:
            raise DataError("sequence must contain at least one [SEP]")

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def special_positions(self) -> tuple:
        return tuple(i for i, t in enumerate(self.ids) if t in SPECIAL_IDS)

    @property
    def n_segments(self) -> int:
        return len(set(self.segment_ids))

    def validate(self, config: ModelConfig) -> None:
        if self.length > config.max_len:
            raise DataError(f"sequence length {self.length} exceeds max_len {config.max_len}")
        bad = [t for t in self.ids if not 0 <= t < config.vocab_size]
        if bad:
            raise DataError(f"unknown token id(s) {bad[:5]} for vocab_size {config.vocab_size}")
        if any(not 0 <= s < config.n_segments for s in self.segment_ids):
            raise DataError("segment id out of range")

    def with_ids(self, ids) -> "TokenSequence":
        return TokenSequence(tuple(ids), self.segment_ids)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered manifest of every learnable array."""
    d, f = config.d_model, config.d_ff
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
        "seg_emb": (config.n_segments, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for l in range(config.n_layers):
        p = f"layer{l}."
        shapes.update(
            {
                p + "wq": (d, d), p + "bq": (d,),
                p + "wk": (d, d), p + "bk": (d,),
                p + "wv": (d, d), p + "bv": (d,),
                p + "wo": (d, d), p + "bo": (d,),
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "w1": (d, f), p + "b1": (f,),
                p + "w2": (f, d), p + "b2": (d,),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
            }
        )
    shapes.update(
        {
            "pool_w": (d, d), "pool_b": (d,),
            "cls_w": (d, config.n_labels), "cls_b": (config.n_labels,),
            "mlm_w": (d, config.vocab_size), "mlm_b": (config.vocab_size,),
        }
    )
    return shapes


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Matrices ~ N(0, 0.02); biases 0; layer-norm gains 1."""
    rng = Rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            params[name] = sample_normal(rng, 0.0, INIT_STD, shape[0] * shape[1]).reshape(shape)
        elif name.endswith("_g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(config: ModelConfig, params: Parameters) -> None:
    shapes = param_shapes(config)
    if list(params) != list(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ShapeError(f"parameter names differ from config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape}, config expects {shape}")


def copy_params(params: Parameters) -> Parameters:
    return {k: v.copy() for k, v in params.items()}


def zero_head_output(params: Parameters, config: ModelConfig, coord) -> Parameters:
    """Copy of ``params`` with head ``coord``'s rows of the output projection zeroed."""
    layer, head = coord
    out = copy_params(params)
    dh = config.d_head
    out[f"layer{layer}.wo"][head * dh:(head + 1) * dh, :] = 0.0
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def attention_head(q, k, v, L: int, ablated: bool = False):
    """Single-head scaled dot-product attention.

    Returns ``(context, map)``. An ablated head ignores q and k and uses the
    constant map 1/L in every cell.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or q.shape[0] != L or k.shape != q.shape or v.shape[0] != L:
        raise ShapeError(f"attention_head expects L x d_head inputs with L={L}; got {q.shape}, {k.shape}, {v.shape}")
    if ablated:
        amap = np.full((L, L), 1.0 / L)
    else:
        amap = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return amap @ v, amap


def _ln_fwd(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


@dataclass
class ForwardResult:
    task_logits: np.ndarray
    mlm_logits: np.ndarray | None = None
    attn: np.ndarray | None = None  # (n_layers, n_heads, L, L)


def _run(config, params, seq, ablation, want_mlm, keep_cache):
    ids = np.asarray(seq.ids)
    segs = np.asarray(seq.segment_ids)
    L = len(ids)
    H, dh = config.n_heads, config.d_head
    scale = 1.0 / math.sqrt(dh)
    eps = config.eps_ln

    x0 = params["tok_emb"][ids] + params["pos_emb"][:L] + params["seg_emb"][segs]
    h, ln_cache = _ln_fwd(x0, params["emb_ln_g"], params["emb_ln_b"], eps)
    cache = {"emb_ln": ln_cache, "layers": []}
    maps = np.empty((config.n_layers, H, L, L))
    for l in range(config.n_layers):
        p = f"layer{l}."
        q = (h @ params[p + "wq"] + params[p + "bq"]).reshape(L, H, dh).transpose(1, 0, 2)
        k = (h @ params[p + "wk"] + params[p + "bk"]).reshape(L, H, dh).transpose(1, 0, 2)
        v = (h @ params[p + "wv"] + params[p + "bv"]).reshape(L, H, dh).transpose(1, 0, 2)
        a = softmax_rows(q @ k.transpose(0, 2, 1) * scale)
        for head in ablation.heads_in_layer(l):
            a[head] = np.full((L, L), 1.0 / L)
        maps[l] = a
        ctx = (a @ v).transpose(1, 0, 2).reshape(L, H * dh)
        attn_out = ctx @ params[p + "wo"] + params[p + "bo"]
        h1, ln1 = _ln_fwd(h + attn_out, params[p + "ln1_g"], params[p + "ln1_b"], eps)
        pre = h1 @ params[p + "w1"] + params[p + "b1"]
        act = gelu(pre)
        ff = act @ params[p + "w2"] + params[p + "b2"]
        h_out, ln2 = _ln_fwd(h1 + ff, params[p + "ln2_g"], params[p + "ln2_b"], eps)
        if keep_cache:
            cache["layers"].append(
                dict(h_in=h, q=q, k=k, v=v, a=a, ctx=ctx, h1=h1, ln1=ln1, pre=pre, act=act, ln2=ln2)
            )
        h = h_out

    pooled = np.tanh(h[0] @ params["pool_w"] + params["pool_b"])
    task_logits = pooled @ params["cls_w"] + params["cls_b"]
    mlm_logits = h @ params["mlm_w"] + params["mlm_b"] if want_mlm else None
    cache.update(h_final=h, pooled=pooled, ids=ids, segs=segs)
    return ForwardResult(task_logits, mlm_logits, maps), cache


def forward(config: ModelConfig, params: Parameters, seq: TokenSequence,
            ablation: AblationSpec = NO_ABLATION, capture: bool = False,
            mlm: bool = False) -> ForwardResult:
    """Run the encoder on one sequence.

    ``attn`` holds the maps actually used (ablated heads show uniform rows)
    when ``capture`` is set; ``mlm_logits`` is filled when ``mlm`` is set.
    """
    seq.validate(config)
    ablation.validate(config)
    result, _ = _run(config, params, seq, ablation, mlm, keep_cache=False)
    if not capture:
        result.attn = None
    return result


def capture_attention(config: ModelConfig, params: Parameters, seq: TokenSequence,
                      ablation: AblationSpec = NO_ABLATION) -> np.ndarray:
    return forward(config, params, seq, ablation, capture=True).attn


def _xent(logits, targets):
    """Mean cross-entropy over rows and its gradient w.r.t. logits."""
    logits = np.atleast_2d(logits)
    targets = np.atleast_1d(targets)
    probs = softmax_rows(logits)
    n = len(targets)
    rows = np.arange(n)
    loss = -np.log(np.maximum(probs[rows, targets], 1e-300)).mean()
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    return loss, grad / n


def loss_and_grads(config: ModelConfig, params: Parameters, seq: TokenSequence,
                   loss_kind: str, target, loss_scale: float = 1.0):
    """Scalar loss and exact gradients for every parameter.

    ``loss_kind`` is ``"task"`` (target: label index) or ``"mlm"`` (target:
    ``(positions, token_ids)`` for the masked positions of ``seq``). The
    loss is multiplied by ``loss_scale``. Training never ablates, so no
    ablation is accepted here.
    """
    loss, grads, _ = loss_grads_forward(config, params, seq, loss_kind, target, loss_scale)
    return loss, grads


def loss_grads_forward(config, params, seq, loss_kind, target, loss_scale=1.0):
    """:func:`loss_and_grads` plus the :class:`ForwardResult` it was computed from."""
    seq.validate(config)
    if loss_kind == "task":
        label = int(np.asarray(target).reshape(-1)[0]) if np.ndim(target) else int(target)
        if not 0 <= label < config.n_labels:
            raise ShapeError(f"label {label} outside [0, {config.n_labels})")
    elif loss_kind == "mlm":
        positions, tokens = (np.asarray(t, dtype=int) for t in target)
        if positions.shape != tokens.shape or positions.ndim != 1 or len(positions) == 0:
            raise ShapeError("mlm target needs equal-length, non-empty positions and token ids")
        if positions.min() < 0 or positions.max() >= seq.length:
            raise ShapeError("mlm target position outside the sequence")
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    res, cache = _run(config, params, seq, NO_ABLATION, loss_kind == "mlm", keep_cache=True)
    grads = {}
    H, dh = config.n_heads, config.d_head
    L = seq.length
    scale = 1.0 / math.sqrt(dh)
    h_final = cache["h_final"]

    if loss_kind == "task":
        loss, dlogits = _xent(res.task_logits, [label])
        dlogits = dlogits[0] * loss_scale
        pooled = cache["pooled"]
        grads["cls_w"] = np.outer(pooled, dlogits)
        grads["cls_b"] = dlogits
        dpooled = params["cls_w"] @ dlogits
        dpre_pool = dpooled * (1.0 - pooled**2)
        grads["pool_w"] = np.outer(h_final[0], dpre_pool)
        grads["pool_b"] = dpre_pool
        grads["mlm_w"] = np.zeros_like(params["mlm_w"])
        grads["mlm_b"] = np.zeros_like(params["mlm_b"])
        dh_ = np.zeros_like(h_final)
        dh_[0] = params["pool_w"] @ dpre_pool
    else:
        loss, dlogits = _xent(res.mlm_logits[positions], tokens)
        dlogits = dlogits * loss_scale
        full = np.zeros((L, config.vocab_size))
        np.add.at(full, positions, dlogits)
        grads["mlm_w"] = h_final.T @ full
        grads["mlm_b"] = full.sum(axis=0)
        dh_ = full @ params["mlm_w"].T
        for name in ("pool_w", "pool_b", "cls_w", "cls_b"):
            grads[name] = np.zeros_like(params[name])

    for l in reversed(range(config.n_layers)):
        p = f"layer{l}."
        c = cache["layers"][l]
        # FFN sublayer
        dz2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_bwd(dh_, params[p + "ln2_g"], c["ln2"])
        grads[p + "w2"] = c["act"].T @ dz2
        grads[p + "b2"] = dz2.sum(axis=0)
        dpre = (dz2 @ params[p + "w2"].T) * gelu_grad(c["pre"])
        grads[p + "w1"] = c["h1"].T @ dpre
        grads[p + "b1"] = dpre.sum(axis=0)
        dh1 = dz2 + dpre @ params[p + "w1"].T
        # attention sublayer
        dz1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_bwd(dh1, params[p + "ln1_g"], c["ln1"])
        grads[p + "wo"] = c["ctx"].T @ dz1
        grads[p + "bo"] = dz1.sum(axis=0)
        dctx = (dz1 @ params[p + "wo"].T).reshape(L, H, dh).transpose(1, 0, 2)
        a, q, k, v = c["a"], c["q"], c["k"], c["v"]
        da = dctx @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dctx
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dq, dk, dv = (t.transpose(1, 0, 2).reshape(L, H * dh) for t in (dq, dk, dv))
        h_in = c["h_in"]
        dh_in = dz1.copy()
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            grads[p + "w" + name] = h_in.T @ dproj
            grads[p + "b" + name] = dproj.sum(axis=0)
            dh_in += dproj @ params[p + "w" + name].T
        dh_ = dh_in

    dx0, grads["emb_ln_g"], grads["emb_ln_b"] = _ln_bwd(dh_, params["emb_ln_g"], cache["emb_ln"])
    for name, index in (("tok_emb", cache["ids"]), ("seg_emb", cache["segs"])):
        grads[name] = np.zeros_like(params[name])
        np.add.at(grads[name], index, dx0)
    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:L] = dx0
    res.attn = None
    return loss * loss_scale, {name: grads[name] for name in params}, res


def backward(config: ModelConfig, params: Parameters, seq: TokenSequence,
             loss_kind: str, target, loss_scale: float = 1.0) -> Parameters:
    """Gradients only; see :func:`loss_and_grads`."""
    return loss_and_grads(config, params, seq, loss_kind, target, loss_scale)[1]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Parameters
    label: str = ""


def save_checkpoint(params: Parameters, config: ModelConfig, path, label: str = "") -> None:
    check_params(config, params)
    manifest = []
    offset = 0
    for name, arr in params.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"config": config.to_dict(), "label": label, "arrays": manifest, "payload_bytes": offset}
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_framed(path, magic: bytes, kind: str):
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        first = data.split(b"\n", 1)[0][:40]
        raise CheckpointError(f"{path}: not a {kind} file or unsupported version (got {first!r})")
    rest = data[len(magic):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, rest[nl + 1:]


def read_checkpoint(path) -> Checkpoint:
    header, payload = _read_framed(path, CKPT_MAGIC, "checkpoint")
    try:
        config = ModelConfig.from_dict(header["config"])
        manifest = header["arrays"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    expected = param_shapes(config)
    if [m["name"] for m in manifest] != list(expected):
        raise CheckpointError(f"{path}: array manifest does not match the declared config")
    total = 0
    for m in manifest:
        if tuple(m["shape"]) != expected[m["name"]]:
            raise CheckpointError(
                f"{path}: {m['name']} declared {tuple(m['shape'])}, config implies {expected[m['name']]}"
            )
        if m["offset"] != total:
            raise CheckpointError(f"{path}: {m['name']} offset {m['offset']}, expected {total}")
        total += math.prod(m["shape"]) * 8
    if len(payload) != total:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header implies {total} (truncated or corrupt)"
        )
    params = {}
    for m in manifest:
        n = math.prod(m["shape"])
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=m["offset"])
        params[m["name"]] = arr.astype(np.float64).reshape(m["shape"])
    return Checkpoint(config, params, header.get("label", ""))


def load_checkpoint(path):
    ck = read_checkpoint(path)
    return ck.config, ck.params


def write_checkpoint(ck: Checkpoint, path) -> None:
    save_checkpoint(ck.params, ck.config, path, ck.label)
