"""Toy pre-norm Transformer over sharded tokens.

One forward implementation serves every device count: the shard plan only
changes the attention mask, so a single process can simulate the whole
cluster exactly.  Content tokens read same-shard keys at full precision and
everything else through the per-layer codebook.  Class-token replicas live
one per owning device, are never transmitted, and are mean-pooled at the
end; with one device the forward reduces to a vanilla Transformer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .attention import build_mask, multihead_attention
from .errors import LifecycleError, ShapeError
from .tensor import (Tape, Tensor, add, add_bias, concat_rows, constant, cross_entropy,
                     gather_rows, gelu, layer_norm, matmul, mean_rows, rows,
                     straight_through)
from .vq import (Codebook, NoiseConfig, ResidualStats, apply_noise, load_codebook,
                 quantize, save_codebook)

CHECKPOINT_MAGIC = b"ASTM"
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    vocab_or_classes: int
    max_tokens: int
    causal: bool
    mlp_expansion: int = 4
    codebook_size: int = 16
    groups: int = 1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.hidden % self.heads != 0:
            raise ShapeError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.hidden % self.groups != 0:
            raise ShapeError(f"hidden {self.hidden} not divisible by {self.groups} groups")
        if self.vocab_or_classes < 2:
            raise ValueError("need at least two classes / vocabulary entries")

    @property
    def class_token(self) -> bool:
        # Encoders pool a class token; causal decoders predict next tokens.
        return not self.causal


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    codebook: Codebook | None = None
    residual_stats: ResidualStats | None = None

    TENSOR_FIELDS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                     "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")


@dataclass
class ModelParams:
    config: ModelConfig
    pos: Tensor
    blocks: list[BlockParams]
    final_gain: Tensor
    final_bias: Tensor
    head: Tensor
    embedding: Tensor | None = None   # decoders only
    cls: Tensor | None = None         # encoders only

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """All parameter tensors in declaration order."""
        out = []
        if self.embedding is not None:
            out.append(("embedding", self.embedding))
        out.append(("pos", self.pos))
        if self.cls is not None:
            out.append(("cls", self.cls))
        for i, b in enumerate(self.blocks):
            for f in BlockParams.TENSOR_FIELDS:
                out.append((f"block{i}.{f}", getattr(b, f)))
        out.extend([("final_gain", self.final_gain), ("final_bias", self.final_bias),
                    ("head", self.head)])
        return out

    def bind(self, tape: Tape) -> "ModelParams":
        """Copy of the container whose tensors are tape variables."""
        def v(t):
            return None if t is None else tape.variable(t.data)
        blocks = [BlockParams(*(v(getattr(b, f)) for f in BlockParams.TENSOR_FIELDS),
                              codebook=b.codebook, residual_stats=b.residual_stats)
                  for b in self.blocks]
        return ModelParams(config=self.config, pos=v(self.pos), blocks=blocks,
                           final_gain=v(self.final_gain), final_bias=v(self.final_bias),
                           head=v(self.head), embedding=v(self.embedding), cls=v(self.cls))

    def assign(self, name: str, data: np.ndarray) -> None:
        """Replace one named tensor with fresh constant data."""
        if name.startswith("block"):
            idx, f = name.split(".", 1)
            setattr(self.blocks[int(idx[5:])], f, Tensor(data))
        else:
            setattr(self, name, Tensor(data))


def init_params(config: ModelConfig, seed: int, dtype=np.float32,
                init_scale: float = 0.02) -> ModelParams:
    """Gaussian init scaled by ``init_scale``; layer norms start at identity."""
    d = config.hidden
    m = d * config.mlp_expansion

    def w(name, shape, scl=init_scale):
        g = rng.generator(seed, "init", name)
        return Tensor(g.normal(size=shape) * scl, dtype=dtype)

    def ones(shape):
        return Tensor(np.ones(shape), dtype=dtype)

    def zeros(shape):
        return Tensor(np.zeros(shape), dtype=dtype)

    blocks = []
    for i in range(config.layers):
        blocks.append(BlockParams(
            wq=w(f"b{i}.wq", (d, d)), wk=w(f"b{i}.wk", (d, d)),
            wv=w(f"b{i}.wv", (d, d)), wo=w(f"b{i}.wo", (d, d)),
            w1=w(f"b{i}.w1", (d, m)), b1=zeros((m,)),
            w2=w(f"b{i}.w2", (m, d)), b2=zeros((d,)),
            ln1_gain=ones((d,)), ln1_bias=zeros((d,)),
            ln2_gain=ones((d,)), ln2_bias=zeros((d,)),
        ))
    return ModelParams(
        config=config,
        embedding=w("embedding", (config.vocab_or_classes, d)) if config.causal else None,
        pos=w("pos", (config.max_tokens, d), 0.01),
        cls=w("cls", (1, d)) if config.class_token else None,
        blocks=blocks,
        final_gain=ones((d,)), final_bias=zeros((d,)),
        head=w("head", (d, config.vocab_or_classes)),
    )


def class_owner_ids(plan, cls_mode: str) -> list[int]:
    """Devices holding a class-token replica: all of them, or device 0 only."""
    if cls_mode == "distributed":
        return list(range(plan.devices))
    if cls_mode == "single":
        return [0]
    raise ValueError(f"unknown cls_mode {cls_mode!r}")


def _extended_mask(plan, causal: bool, quantized: bool, replica_owners) -> np.ndarray:
    """Mask over rows [content; replicas] and columns [K | K_hat? | replica keys].

    Replica keys are visible only to content rows of the owning device and to
    the replica itself; replicas read content like any same/other-shard query.
    """
    t = plan.tokens
    owner = plan.owner_of()
    base = build_mask(t, plan, causal).matrix
    content = base if quantized else base[:, :t] | base[:, t:]
    n_rep = len(replica_owners)
    width = content.shape[1] + n_rep
    out = np.zeros((t + n_rep, width), dtype=bool)
    out[:t, :content.shape[1]] = content
    for e, dev in enumerate(replica_owners):
        out[:t, content.shape[1] + e] = owner == dev
        row = t + e
        if quantized:
            out[row, :t] = owner == dev
            out[row, t:2 * t] = owner != dev
        else:
            out[row, :t] = True
        out[row, content.shape[1] + e] = True
    return out


def run_blocks(params: ModelParams, plan, x0: Tensor, *, training: bool = False,
               noise: NoiseConfig | None = None, cls_mode: str = "distributed",
               on_layer=None):
    """Push content (and class replicas, if any) through every block.

    Returns (content, replicas); ``on_layer(i, info)`` observes per-layer
    tensors for codebook fitting, commitment terms, and KV capture.
    """
    cfg = params.config
    t = plan.tokens
    if x0.data.shape != (t, cfg.hidden):
        raise ShapeError(f"expected [{t}, {cfg.hidden}] content, got {x0.data.shape}")
    quantized = params.blocks[0].codebook is not None
    for b in params.blocks:
        if (b.codebook is not None) != quantized:
            raise LifecycleError("codebooks must be initialized for all layers or none")
    if not quantized and plan.devices > 1:
        raise LifecycleError("multi-device forward requires initialized codebooks")

    replica_owners = class_owner_ids(plan, cls_mode) if cfg.class_token else []
    mask = _extended_mask(plan, cfg.causal, quantized, replica_owners)
    x = x0
    c = concat_rows([params.cls] * len(replica_owners)) if replica_owners else None

    for i, bp in enumerate(params.blocks):
        h = concat_rows([x, c]) if c is not None else x
        info = {"x_in": x.data, "x_tensor": x, "x_hat": None, "q": None}
        ln1 = layer_norm(h, bp.ln1_gain, bp.ln1_bias, LN_EPS)
        kf = matmul(ln1, bp.wk)
        vf = matmul(ln1, bp.wv)
        q_all = matmul(ln1, bp.wq)
        parts_k = [rows(kf, 0, t)]
        parts_v = [rows(vf, 0, t)]
        if quantized:
            qt, x_hat = quantize(bp.codebook, x.data)
            info["x_hat"], info["q"] = x_hat, qt
            x_send = x_hat
            if training and noise is not None and noise.enabled and noise.lam > 0.0:
                if bp.residual_stats is None:
                    raise LifecycleError(f"layer {i} has no residual statistics")
                x_send = apply_noise(x_hat, bp.residual_stats, noise, training)
            xq = straight_through(x, x_send)
            lnq = layer_norm(xq, bp.ln1_gain, bp.ln1_bias, LN_EPS)
            k_hat = matmul(lnq, bp.wk)
            v_hat = matmul(lnq, bp.wv)
            parts_k.append(k_hat)
            parts_v.append(v_hat)
            info["k_full"], info["v_full"] = parts_k[0].data, parts_v[0].data
            info["k_hat"], info["v_hat"] = k_hat.data, v_hat.data
        else:
            info["k_full"], info["v_full"] = parts_k[0].data, parts_v[0].data
            info["k_hat"] = info["v_hat"] = None
        if c is not None:
            parts_k.append(rows(kf, t, h.data.shape[0]))
            parts_v.append(rows(vf, t, h.data.shape[0]))
        attn = multihead_attention(q_all, concat_rows(parts_k), concat_rows(parts_v),
                                   mask, cfg.heads)
        h = add(h, matmul(attn, bp.wo))
        ln2 = layer_norm(h, bp.ln2_gain, bp.ln2_bias, LN_EPS)
        mlp = add_bias(matmul(gelu(add_bias(matmul(ln2, bp.w1), bp.b1)), bp.w2), bp.b2)
        h = add(h, mlp)
        if c is not None:
            x, c = rows(h, 0, t), rows(h, t, h.data.shape[0])
        else:
            x = h
        if on_layer is not None:
            on_layer(i, info)
    return x, c


def aggregate_class_tokens(replicas: Tensor) -> Tensor:
    """Mean-pool replica states into one classification embedding."""
    if replicas.data.shape[0] < 1:
        raise ShapeError("no class-token replicas to aggregate")
    return mean_rows(replicas)


def embed_classifier_inputs(params: ModelParams, x: np.ndarray | Tensor) -> Tensor:
    t = (x if isinstance(x, Tensor) else constant(x, dtype=params.pos.data.dtype))
    n = t.data.shape[0]
    if n > params.config.max_tokens:
        raise ShapeError(f"{n} tokens exceed max_tokens={params.config.max_tokens}")
    return add(t, rows(params.pos, 0, n))


def embed_lm_inputs(params: ModelParams, ids, offset: int = 0) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if offset + ids.shape[0] > params.config.max_tokens:
        raise ShapeError("sequence exceeds max_tokens")
    emb = gather_rows(params.embedding, ids)
    return add(emb, rows(params.pos, offset, offset + ids.shape[0]))


def classify(params: ModelParams, plan, x: np.ndarray | Tensor, *,
             training: bool = False, noise: NoiseConfig | None = None,
             cls_mode: str = "distributed", on_layer=None) -> Tensor:
    """Logits [1, classes] from mean-pooled class replicas."""
    if not params.config.class_token:
        raise ValueError("classify requires an encoder config (causal=False)")
    x0 = embed_classifier_inputs(params, x)
    _, c = run_blocks(params, plan, x0, training=training, noise=noise,
                      cls_mode=cls_mode, on_layer=on_layer)
    pooled = aggregate_class_tokens(c)
    pooled = layer_norm(pooled, params.final_gain, params.final_bias, LN_EPS)
    return matmul(pooled, params.head)


def lm_logits(params: ModelParams, plan, ids, *, training: bool = False,
              noise: NoiseConfig | None = None, on_layer=None) -> Tensor:
    """Next-token logits [T, vocab] for a causal decoder."""
    if not params.config.causal:
        raise ValueError("lm_logits requires a causal config")
    x0 = embed_lm_inputs(params, ids)
    x, _ = run_blocks(params, plan, x0, training=training, noise=noise,
                      on_layer=on_layer)
    x = layer_norm(x, params.final_gain, params.final_bias, LN_EPS)
    return matmul(x, params.head)


def lm_loss(params: ModelParams, plan, ids, targets, *, training: bool = False,
            noise: NoiseConfig | None = None, on_layer=None) -> Tensor:
    logits = lm_logits(params, plan, ids, training=training, noise=noise,
                       on_layer=on_layer)
    return cross_entropy(logits, targets)


class DecodeState:
    """Per-layer KV cache seen by the decoding device: full precision for its
    own and generated tokens, dequantized for the rest of the prefill."""

    def __init__(self, k_layers: list[np.ndarray], v_layers: list[np.ndarray]):
        self.k = [k.copy() for k in k_layers]
        self.v = [v.copy() for v in v_layers]

    def append(self, layer: int, k_row: np.ndarray, v_row: np.ndarray) -> None:
        self.k[layer] = np.concatenate([self.k[layer], k_row], axis=0)
        self.v[layer] = np.concatenate([self.v[layer], v_row], axis=0)


def _decode_one(params: ModelParams, state: DecodeState, token_id: int,
                position: int) -> int:
    """Advance one autoregressive step on the decoding device."""
    cfg = params.config
    x = embed_lm_inputs(params, np.array([token_id]), offset=position)
    for i, bp in enumerate(params.blocks):
        ln1 = layer_norm(x, bp.ln1_gain, bp.ln1_bias, LN_EPS)
        q = matmul(ln1, bp.wq)
        k_new = matmul(ln1, bp.wk)
        v_new = matmul(ln1, bp.wv)
        k_all = constant(np.concatenate([state.k[i], k_new.data], axis=0))
        v_all = constant(np.concatenate([state.v[i], v_new.data], axis=0))
        visible = np.ones((1, k_all.data.shape[0]), dtype=bool)
        attn = multihead_attention(q, k_all, v_all, visible, cfg.heads)
        x = add(x, matmul(attn, bp.wo))
        ln2 = layer_norm(x, bp.ln2_gain, bp.ln2_bias, LN_EPS)
        mlp = add_bias(matmul(gelu(add_bias(matmul(ln2, bp.w1), bp.b1)), bp.w2), bp.b2)
        x = add(x, mlp)
        state.append(i, k_new.data, v_new.data)
    x = layer_norm(x, params.final_gain, params.final_bias, LN_EPS)
    logits = matmul(x, params.head)
    return int(np.argmax(logits.data[0]))


def prefill_decode_state(params: ModelParams, plan, prompt_ids) -> tuple[DecodeState, int]:
    """Sequence-parallel prefill; returns the decoding device's KV view and the
    first greedy token.  The decoding device owns the last prompt token."""
    cfg = params.config
    dec = plan.devices - 1
    owner = plan.owner_of()
    captured_k: list[np.ndarray] = []
    captured_v: list[np.ndarray] = []

    def capture(_i, info):
        if info["k_hat"] is None:
            captured_k.append(info["k_full"])
            captured_v.append(info["v_full"])
        else:
            local = (owner == dec)[:, None]
            captured_k.append(np.where(local, info["k_full"], info["k_hat"]))
            captured_v.append(np.where(local, info["v_full"], info["v_hat"]))

    logits = lm_logits(params, plan, prompt_ids, on_layer=capture)
    first = int(np.argmax(logits.data[-1]))
    return DecodeState(captured_k, captured_v), first


def generate(params: ModelParams, plan, prompt_ids, steps: int) -> list[int]:
    """Greedy decoding: parallel prefill, then sequential decode on the device
    holding the last prompt token.  Ties resolve to the lowest token id."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return []
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    t0 = prompt_ids.shape[0]
    if t0 < plan.devices:
        raise ValueError("prompt must cover at least one token per device")
    if t0 + steps > params.config.max_tokens:
        raise ShapeError("prompt plus generated tokens exceed max_tokens")
    state, token = prefill_decode_state(params, plan, prompt_ids)
    out = [token]
    for i in range(1, steps):
        token = _decode_one(params, state, token, t0 + i - 1)
        out.append(token)
    return out


def exact_codebooks_from_reference(params: ModelParams, plan1, x_or_ids) -> list[Codebook]:
    """Codebooks whose centroids are exactly the reference run's layer inputs,
    so quantization reproduces every token bit-for-bit (K = T)."""
    if plan1.devices != 1:
        raise ValueError("reference capture requires a single-device plan")
    cfg = params.config
    captured: list[np.ndarray] = []

    def capture(_i, info):
        captured.append(info["x_in"].copy())

    stripped = ModelParams(
        config=cfg, pos=params.pos,
        blocks=[BlockParams(*(getattr(b, f) for f in BlockParams.TENSOR_FIELDS))
                for b in params.blocks],
        final_gain=params.final_gain, final_bias=params.final_bias,
        head=params.head, embedding=params.embedding, cls=params.cls)
    if cfg.causal:
        lm_logits(stripped, plan1, x_or_ids, on_layer=capture)
    else:
        classify(stripped, plan1, x_or_ids, on_layer=capture)
    gd = cfg.hidden // cfg.groups
    books = []
    for layer, xin in enumerate(captured):
        tables = [np.ascontiguousarray(xin[:, g * gd:(g + 1) * gd])
                  for g in range(cfg.groups)]
        books.append(Codebook(layer_id=layer, groups=cfg.groups, centroids=tables))
    return books


def save_checkpoint(params: ModelParams) -> bytes:
    """Container: magic, version, config record, parameters in declaration
    order as float32 little-endian, then embedded codebook blobs."""
    cfg = params.config
    out = [CHECKPOINT_MAGIC, struct.pack("<10I", 1, cfg.layers, cfg.hidden, cfg.heads,
                                         cfg.vocab_or_classes, cfg.max_tokens,
                                         int(cfg.causal), cfg.mlp_expansion,
                                         cfg.codebook_size, cfg.groups)]
    for _, t in params.named_tensors():
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    books = [b.codebook for b in params.blocks if b.codebook is not None]
    out.append(struct.pack("<I", len(books)))
    for cb in books:
        blob = save_codebook(cb)
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    return b"".join(out)


def load_checkpoint(blob: bytes) -> ModelParams:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    fields = struct.unpack("<10I", blob[4:44])
    version = fields[0]
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(layers=fields[1], hidden=fields[2], heads=fields[3],
                      vocab_or_classes=fields[4], max_tokens=fields[5],
                      causal=bool(fields[6]), mlp_expansion=fields[7],
                      codebook_size=fields[8], groups=fields[9])
    params = init_params(cfg, seed=0)
    off = 44
    for name, t in params.named_tensors():
        n = t.data.size
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(t.data.shape)
        params.assign(name, arr.copy())
        off += 4 * n
    (count,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    for _ in range(count):
        (size,) = struct.unpack("<I", blob[off:off + 4])
        off += 4
        cb = load_codebook(blob[off:off + size])
        off += size
        params.blocks[cb.layer_id].codebook = cb
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return params
