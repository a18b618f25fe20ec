"""Lockstep multi-device inference with explicit index exchange.

Devices hold contiguous token shards and identical codebook copies.  Each
layer runs quantize -> allgather -> attention -> MLP with a barrier between
phases; the only traffic is vector-quantization indices, accounted per
device per layer in a byte-exact ledger.  Class replicas and decoded tokens
never travel.
"""

from __future__ import annotations

import copy
import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import multihead_attention
from .errors import PlanError, ProtocolError, ShapeError
from .model import (DecodeState, LN_EPS, ModelParams, _decode_one, aggregate_class_tokens,
                    class_owner_ids, embed_classifier_inputs, embed_lm_inputs)
from .tensor import add, add_bias, constant, gelu, layer_norm, matmul
from .vq import QuantizedTokens, dequantize, quantize

LEDGER_COLUMNS = ("layer", "device", "bits_sent", "bits_received", "messages")


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous token ranges, one per device, in device order."""

    tokens: int
    devices: int
    ranges: tuple[tuple[int, int], ...]
    class_replication: bool = True

    def __post_init__(self):
        if self.devices < 1 or len(self.ranges) != self.devices:
            raise PlanError("need one range per device")
        cursor = 0
        for start, stop in self.ranges:
            if start != cursor or stop < start:
                raise PlanError("ranges must be contiguous and ordered")
            cursor = stop
        if cursor != self.tokens:
            raise PlanError(f"ranges cover {cursor} of {self.tokens} tokens")
        if self.tokens and min(stop - start for start, stop in self.ranges) == 0:
            raise PlanError("every device needs at least one token")

    def owner_of(self) -> np.ndarray:
        owner = np.empty(self.tokens, dtype=np.int64)
        for dev, (start, stop) in enumerate(self.ranges):
            owner[start:stop] = dev
        return owner

    def shard_sizes(self) -> list[int]:
        return [stop - start for start, stop in self.ranges]


def partition_tokens(tokens: int, devices: int, class_replication: bool = True) -> ShardPlan:
    """Contiguous near-even shards; any remainder goes to the trailing devices."""
    if devices < 1:
        raise PlanError("need at least one device")
    if tokens < devices:
        raise PlanError(f"cannot spread {tokens} tokens over {devices} devices")
    base, rem = divmod(tokens, devices)
    ranges = []
    cursor = 0
    for dev in range(devices):
        size = base + (1 if dev >= devices - rem else 0)
        ranges.append((cursor, cursor + size))
        cursor += size
    return ShardPlan(tokens=tokens, devices=devices, ranges=tuple(ranges),
                     class_replication=class_replication)


@dataclass(frozen=True)
class IndexMessage:
    """One device's quantized indices for one layer."""

    sender: int
    layer: int
    payload: QuantizedTokens

    @property
    def bits(self) -> int:
        return self.payload.payload_bits


class CommsLedger:
    """Bits sent/received and message counts per (layer, device).

    "Sent" counts one copy of each payload (broadcast is not multiplied by
    receiver count), matching the per-token accounting of the latency model.
    """

    def __init__(self):
        self._rows: dict[tuple[int, int], list[int]] = {}

    def _row(self, layer: int, device: int) -> list[int]:
        return self._rows.setdefault((layer, device), [0, 0, 0])

    def record_send(self, layer: int, device: int, bits: int) -> None:
        row = self._row(layer, device)
        row[0] += bits
        row[2] += 1

    def record_receive(self, layer: int, device: int, bits: int) -> None:
        self._row(layer, device)[1] += bits

    def total_bits_sent(self) -> int:
        return sum(r[0] for r in self._rows.values())

    def bits_per_token(self, tokens: int) -> float:
        return self.total_bits_sent() / tokens

    def rows(self) -> list[tuple[int, int, int, int, int]]:
        return [(layer, dev, *vals)
                for (layer, dev), vals in sorted(self._rows.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LEDGER_COLUMNS)
        writer.writerows(self.rows())
        return buf.getvalue()


@dataclass
class DeviceState:
    """One simulated device: its shard, replica, codebook copies, and inbox."""

    device_id: int
    span: tuple[int, int]
    x_local: np.ndarray
    replica: np.ndarray | None
    codebooks: list
    staged: IndexMessage | None = None
    inbox: dict[int, QuantizedTokens] = field(default_factory=dict)


def allgather_indices(devices: list[DeviceState], layer: int,
                      ledger: CommsLedger) -> None:
    """Deliver every staged message to every other device, (layer, sender)
    ordered; a device that failed to stage aborts the round."""
    for dev in devices:
        if dev.staged is None or dev.staged.layer != layer:
            raise ProtocolError(
                f"device {dev.device_id} did not stage indices for layer {layer}")
    messages = sorted((d.staged for d in devices), key=lambda m: (m.layer, m.sender))
    for msg in messages:
        ledger.record_send(layer, msg.sender, msg.bits)
        for dev in devices:
            if dev.device_id != msg.sender:
                dev.inbox[msg.sender] = msg.payload
                ledger.record_receive(layer, dev.device_id, msg.bits)
    for dev in devices:
        dev.staged = None


@dataclass
class InferenceResult:
    output: np.ndarray | list[int]
    ledger: CommsLedger


def _map_devices(devices, fn, workers: int):
    if workers <= 1 or len(devices) == 1:
        return [fn(d) for d in devices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, devices))


def _device_layer_compute(params: ModelParams, plan: ShardPlan, layer: int, bp,
                          dev: DeviceState, replica_owners, causal: bool):
    """One device's attention + MLP for one layer, from its mixed view."""
    cfg = params.config
    t = plan.tokens
    start, stop = dev.span
    x_view = np.empty((t, cfg.hidden), dtype=dev.x_local.dtype)
    x_view[start:stop] = dev.x_local
    for sender, payload in sorted(dev.inbox.items()):
        s, e = plan.ranges[sender]
        x_view[s:e] = dequantize(dev.codebooks[layer], payload)
    dev.inbox.clear()

    has_replica = dev.device_id in replica_owners
    rows_list = [constant(x_view)]
    if has_replica:
        rows_list.append(constant(dev.replica))
    stack = rows_list[0] if len(rows_list) == 1 else constant(
        np.concatenate([r.data for r in rows_list], axis=0))

    ln1 = layer_norm(stack, bp.ln1_gain, bp.ln1_bias, LN_EPS)
    k = matmul(ln1, bp.wk)
    v = matmul(ln1, bp.wv)
    q = matmul(ln1, bp.wq)

    local_rows = list(range(start, stop)) + ([t] if has_replica else [])
    n_keys = t + (1 if has_replica else 0)
    mask = np.zeros((len(local_rows), n_keys), dtype=bool)
    for r_i, row in enumerate(local_rows):
        if row < t:
            mask[r_i, :t] = np.arange(t) <= row if causal else True
        else:
            mask[r_i, :t] = True
        if has_replica:
            mask[r_i, t] = True
    q_local = constant(q.data[local_rows])
    attn = multihead_attention(q_local, k, v, mask, cfg.heads)
    h = add(constant(stack.data[local_rows]), matmul(attn, bp.wo))
    ln2 = layer_norm(h, bp.ln2_gain, bp.ln2_bias, LN_EPS)
    mlp = add_bias(matmul(gelu(add_bias(matmul(ln2, bp.w1), bp.b1)), bp.w2), bp.b2)
    h = add(h, mlp).data

    dev.x_local = h[:stop - start]
    if has_replica:
        dev.replica = h[stop - start:]
    return k.data, v.data


def run_inference(params: ModelParams, plan: ShardPlan, inputs, mode: str,
                  steps: int = 0, workers: int = 1,
                  cls_mode: str = "distributed") -> InferenceResult:
    """Full lockstep inference.  mode="classify" returns logits [1, classes];
    mode="generate" returns ``steps`` greedy token ids."""
    cfg = params.config
    if mode not in ("classify", "generate"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "classify" and cfg.causal:
        raise ValueError("classify requires an encoder config")
    if mode == "classify" and not plan.class_replication:
        raise PlanError("classification requires class-token replication")
    if mode == "generate" and not cfg.causal:
        raise ValueError("generate requires a causal config")
    for b in params.blocks:
        if b.codebook is None:
            raise ProtocolError("cluster inference requires initialized codebooks")

    ledger = CommsLedger()
    if mode == "generate":
        ids = np.asarray(inputs, dtype=np.int64)
        if steps < 0:
            raise ValueError("steps must be non-negative")
        if steps == 0:
            return InferenceResult(output=[], ledger=ledger)
        if ids.shape[0] + steps > cfg.max_tokens:
            raise ShapeError("prompt plus generated tokens exceed max_tokens")
        x0 = embed_lm_inputs(params, ids).data
    else:
        x0 = embed_classifier_inputs(params, inputs).data
    if plan.tokens != x0.shape[0]:
        raise PlanError("plan does not cover the input tokens")

    replica_owners = class_owner_ids(plan, cls_mode) if (
        cfg.class_token and plan.class_replication) else []
    devices = [
        DeviceState(device_id=d, span=plan.ranges[d],
                    x_local=x0[plan.ranges[d][0]:plan.ranges[d][1]].copy(),
                    replica=params.cls.data.copy() if d in replica_owners else None,
                    codebooks=[copy.deepcopy(b.codebook) for b in params.blocks])
        for d in range(plan.devices)
    ]

    decode_k: list[np.ndarray] = []
    decode_v: list[np.ndarray] = []
    dec = plan.devices - 1

    for layer, bp in enumerate(params.blocks):
        def stage(dev: DeviceState, layer=layer):
            q, _ = quantize(dev.codebooks[layer], dev.x_local)
            dev.staged = IndexMessage(sender=dev.device_id, layer=layer, payload=q)
        _map_devices(devices, stage, workers)
        if plan.devices > 1:
            allgather_indices(devices, layer, ledger)
        else:
            devices[0].staged = None

        def compute(dev: DeviceState, layer=layer, bp=bp):
            return _device_layer_compute(params, plan, layer, bp, dev,
                                         replica_owners, cfg.causal)
        results = _map_devices(devices, compute, workers)
        if mode == "generate":
            k_dec, v_dec = results[dec]
            decode_k.append(k_dec[:plan.tokens])
            decode_v.append(v_dec[:plan.tokens])

    if mode == "classify":
        reps = np.concatenate([d.replica for d in devices if d.replica is not None])
        pooled = aggregate_class_tokens(constant(reps))
        pooled = layer_norm(pooled, params.final_gain, params.final_bias, LN_EPS)
        logits = matmul(pooled, params.head)
        return InferenceResult(output=logits.data.copy(), ledger=ledger)

    # Greedy decode on the device that owns the last prompt token; nothing is
    # transmitted during decoding.
    last_dev = devices[dec]
    x_last = constant(last_dev.x_local[-1:])
    x_last = layer_norm(x_last, params.final_gain, params.final_bias, LN_EPS)
    first = int(np.argmax(matmul(x_last, params.head).data[0]))
    out = [first]
    state = DecodeState(decode_k, decode_v)
    t0 = plan.tokens
    for i in range(1, steps):
        out.append(_decode_one(params, state, out[-1], t0 + i - 1))
    return InferenceResult(output=out, ledger=ledger)
