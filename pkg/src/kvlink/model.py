"""A small Llama-shaped decoder: RMSNorm pre-norm, RoPE attention with grouped
KV heads, SiLU-gated FFN, untied output head.

Attention visibility is always given explicitly, either as a full boolean mask
(``forward_masked``) or as a visibility object evaluated on global positions
(``extend_over_cache``). Every pass emits K before rotation so the result can be
stored position-free.

Weights file layout (``KVLW``, little-endian)::

    magic "KVLW" | u32 version | config (7 x u32, 2 x f64) | u32 n_tensors
    per tensor: u16 name length | name | u8 ndim | ndim x u32 | u64 payload offset
    f32 payloads | u32 CRC32 of the payloads
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .config import ModelConfig, SpecialTokens
from .errors import (
    CausalityError,
    EmptyInputError,
    FormatError,
    PlanError,
    ShapeError,
    TruncationError,
    VocabError,
)
from .kvcache import AssembledContext, SegmentCache, segment_hash
from .numerics import mask_bias, matmul, matmul_f32, rms_norm, softmax_biased_
from .rope import RopeTables, build_tables, rotate_heads

WEIGHTS_MAGIC = b"KVLW"
WEIGHTS_VERSION = 1
INIT_STD = 0.02
# query/key projections are drawn wider so attention scores are O(1); at 0.02
# attention is near-uniform and insensitive to positions
QK_INIT_STD = 0.2

# query rows per attention block; bounds the score buffer at ROW_BLOCK x keys
ROW_BLOCK = 256


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, kv, f, v = cfg.hidden_dim, cfg.kv_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_embed": (v, h)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (h,)
        shapes[p + "wq"] = (h, h)
        shapes[p + "wk"] = (h, kv)
        shapes[p + "wv"] = (h, kv)
        shapes[p + "wo"] = (h, h)
        shapes[p + "ffn_norm"] = (h,)
        shapes[p + "w_gate"] = (h, f)
        shapes[p + "w_up"] = (h, f)
        shapes[p + "w_down"] = (f, h)
    shapes["final_norm"] = (h,)
    shapes["lm_head"] = (h, v)
    return shapes


@dataclass(eq=False)
class Weights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"tensor set mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape or t.dtype != np.float32:
                raise ShapeError(f"tensor {name}: got {t.shape}/{t.dtype}, want {shape}/float32")
            if not np.isfinite(t).all():
                raise ShapeError(f"tensor {name} has non-finite entries")
            t.flags.writeable = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[f"layers.{i}.{name}"]

    @cached_property
    def rope(self) -> RopeTables:
        return build_tables(self.config.head_dim, self.config.max_pos, self.config.theta_base)

    @cached_property
    def special(self) -> SpecialTokens:
        return SpecialTokens(self.config.vocab_size)

    @cached_property
    def model_hash(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.config.pack())
        for name in tensor_shapes(self.config):
            h.update(name.encode())
            h.update(self.tensors[name].tobytes())
        return int.from_bytes(h.digest(), "little")

    def equals(self, other: "Weights") -> bool:
        return self.config == other.config and all(
            self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors
        )


def init_random(config: ModelConfig, seed: int, std: float = INIT_STD, qk_std: float = QK_INIT_STD) -> Weights:
    """Deterministic normal init, drawn tensor by tensor in a fixed order.

    Matrices use ``std`` except W_q/W_k which use ``qk_std``; norm gains are ones.
    Link, boundary and anchor token rows are ordinary embedding rows.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
            continue
        scale = qk_std if name.endswith(("wq", "wk")) else std
        tensors[name] = rng.standard_normal(shape, dtype=np.float32) * np.float32(scale)
    return Weights(config, tensors)


def save_weights(w: Weights, path) -> None:
    names = list(tensor_shapes(w.config))
    directory, offset = [], 0
    for name in names:
        t = w.tensors[name]
        enc = name.encode()
        directory.append(
            struct.pack("<H", len(enc)) + enc + struct.pack("<B", t.ndim)
            + struct.pack(f"<{t.ndim}I", *t.shape) + struct.pack("<Q", offset)
        )
        offset += t.nbytes
    payload = b"".join(np.ascontiguousarray(w.tensors[n], dtype="<f4").tobytes() for n in names)
    header = (
        WEIGHTS_MAGIC + struct.pack("<I", WEIGHTS_VERSION) + w.config.pack()
        + struct.pack("<I", len(names)) + b"".join(directory)
    )
    Path(path).write_bytes(header + payload + struct.pack("<I", zlib.crc32(payload)))


def load_weights(path) -> Weights:
    raw = Path(path).read_bytes()
    cfg_size = ModelConfig._STRUCT.size
    if len(raw) < 8 + cfg_size + 4:
        raise TruncationError("weights file shorter than its header")
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad weights magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    config = ModelConfig.unpack(raw[8:8 + cfg_size])
    pos = 8 + cfg_size
    try:
        (n_tensors,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        entries = []
        for _ in range(n_tensors):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            (offset,) = struct.unpack_from("<Q", raw, pos + 1 + 4 * ndim)
            pos += 1 + 4 * ndim + 8
            entries.append((name, tuple(shape), offset))
    except (struct.error, UnicodeDecodeError) as exc:
        raise TruncationError(f"weights tensor directory truncated or corrupt: {exc}") from exc
    payload_start = pos
    available = len(raw) - payload_start
    tensors, total = {}, 0
    for name, shape, offset in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > available:
            raise TruncationError(f"weights file truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(
            raw, dtype="<f4", count=nbytes // 4, offset=payload_start + offset
        ).reshape(shape).astype(np.float32)
        total = max(total, offset + nbytes)
    if available < total + 4:
        raise TruncationError("weights file truncated before the payload CRC")
    (crc,) = struct.unpack_from("<I", raw, payload_start + total)
    if zlib.crc32(raw[payload_start:payload_start + total]) != crc:
        raise FormatError("weights payload CRC mismatch")
    return Weights(config, tensors)


# ------------------------------------------------------------------ building blocks


def pass_flops(cfg: ModelConfig, q_len: int, kv_len: int) -> int:
    """Closed-form FLOPs of one pass: projections, gated FFN, scores and mix."""
    h, f = cfg.hidden_dim, cfg.ffn_dim
    per_layer = q_len * (2 * 4 * h * h + 2 * 3 * h * f) + 2 * 2 * q_len * kv_len * h
    return cfg.n_layers * per_layer


def check_tokens(w: Weights, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ShapeError("tokens must be a flat list of IDs")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= w.config.vocab_size):
        raise VocabError(f"token IDs must lie in [0, {w.config.vocab_size})")
    return tokens


def embed(w: Weights, tokens) -> np.ndarray:
    return w["tok_embed"][check_tokens(w, tokens)].copy()


def project_qkv(w: Weights, layer: int, x: np.ndarray, positions):
    """Return (q rotated, k unrotated, k rotated, v) for hidden rows ``x``.

    Shapes: q ``[n, n_heads, hd]``; k and v ``[n, n_kv_heads * hd]``.
    """
    cfg = w.config
    n = x.shape[0]
    xn = rms_norm(x, w.layer(layer, "attn_norm"), cfg.norm_eps)
    q = matmul(xn, w.layer(layer, "wq")).reshape(n, cfg.n_heads, cfg.head_dim)
    k = matmul(xn, w.layer(layer, "wk"))
    v = matmul(xn, w.layer(layer, "wv"))
    q_rot = rotate_heads(q, positions, w.rope)
    k_rot = rotate_heads(k.reshape(n, cfg.n_kv_heads, cfg.head_dim), positions, w.rope).reshape(n, cfg.kv_dim)
    return q_rot, k, k_rot, v


class AttentionPlan:
    """Row blocks of a boolean visibility matrix with their additive biases.

    Built once per pass and shared by every layer and head. Each block only
    spans the key columns up to its last allowed one.
    """

    def __init__(self, allow: np.ndarray):
        allow = np.asarray(allow, dtype=bool)
        self.shape = allow.shape
        self.blocks = []
        for r0 in range(0, allow.shape[0], ROW_BLOCK):
            r1 = min(allow.shape[0], r0 + ROW_BLOCK)
            block = allow[r0:r1]
            used = np.flatnonzero(block.any(axis=0))
            c1 = int(used[-1]) + 1 if used.size else 1
            self.blocks.append((r0, r1, c1, mask_bias(block[:, :c1])))


def attend(q_rot: np.ndarray, k_rot: np.ndarray, v: np.ndarray, plan: AttentionPlan, cfg: ModelConfig) -> np.ndarray:
    """Grouped-query attention. Returns ``[n, hidden]``."""
    n = q_rot.shape[0]
    m = k_rot.shape[0]
    if plan.shape != (n, m):
        raise ShapeError(f"visibility {plan.shape} does not match {n} queries x {m} keys")
    hd = cfg.head_dim
    k3 = k_rot.reshape(m, cfg.n_kv_heads, hd)
    v3 = v.reshape(m, cfg.n_kv_heads, hd)
    q_scaled = q_rot * np.float32(1.0 / np.sqrt(hd))
    out = np.empty((n, cfg.n_heads, hd), dtype=np.float32)
    for head in range(cfg.n_heads):
        g = head // cfg.group_size
        kt = np.ascontiguousarray(k3[:, g, :].T)
        vg = np.ascontiguousarray(v3[:, g, :])
        for r0, r1, c1, bias in plan.blocks:
            scores = matmul_f32(q_scaled[r0:r1, head, :], kt[:, :c1])
            probs = softmax_biased_(scores, bias)
            out[r0:r1, head, :] = matmul_f32(probs, vg[:c1])
    return out.reshape(n, cfg.hidden_dim)


def block_tail(w: Weights, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
    """Output projection + residual, then the gated FFN + residual."""
    cfg = w.config
    h = x + matmul(attn, w.layer(layer, "wo"))
    hn = rms_norm(h, w.layer(layer, "ffn_norm"), cfg.norm_eps)
    gate = matmul(hn, w.layer(layer, "w_gate"))
    up = matmul(hn, w.layer(layer, "w_up"))
    act = (gate / (np.float32(1.0) + np.exp(-gate))) * up
    return h + matmul(act, w.layer(layer, "w_down"))


def head_logits(w: Weights, x: np.ndarray) -> np.ndarray:
    return matmul(rms_norm(x, w["final_norm"], w.config.norm_eps), w["lm_head"])


@dataclass
class ForwardOutput:
    logits: np.ndarray
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    rotated_keys: list[np.ndarray] = field(default_factory=list)
    flops: int = 0


def _run(w: Weights, tokens, positions, allow, past_keys=None, past_values=None) -> ForwardOutput:
    cfg = w.config
    x = embed(w, tokens)
    n = x.shape[0]
    plan = AttentionPlan(allow)
    keys, values, rkeys = [], [], []
    for layer in range(cfg.n_layers):
        q_rot, k, k_rot, v = project_qkv(w, layer, x, positions)
        if past_keys is not None:
            k_all = np.concatenate([past_keys[layer], k_rot])
            v_all = np.concatenate([past_values[layer], v])
        else:
            k_all, v_all = k_rot, v
        x = block_tail(w, layer, x, attend(q_rot, k_all, v_all, plan, cfg))
        keys.append(k)
        values.append(v)
        rkeys.append(k_rot)
    kv_len = plan.shape[1]
    return ForwardOutput(head_logits(w, x), keys, values, rkeys, pass_flops(cfg, n, kv_len))


def forward_masked(tokens, positions, mask, w: Weights) -> ForwardOutput:
    """Monolithic pass under an explicit mask; the reference for staged execution."""
    tokens = check_tokens(w, tokens)
    positions = np.asarray(positions, dtype=np.int64)
    allow = np.asarray(getattr(mask, "allow", mask), dtype=bool)
    n = tokens.shape[0]
    if n == 0:
        raise EmptyInputError("forward_masked needs at least one token")
    if positions.shape != (n,) or allow.shape != (n, n):
        raise ShapeError(f"{n} tokens, {positions.shape} positions, mask {allow.shape}")
    if np.triu(allow, 1).any():
        r, c = np.argwhere(np.triu(allow, 1))[0]
        raise CausalityError(f"mask row {r} allows future column {c}")
    return _run(w, tokens, positions, allow)


def forward_causal(tokens, w: Weights, start: int = 0) -> ForwardOutput:
    """Plain causal prefill at positions ``start..start+n-1``."""
    tokens = check_tokens(w, tokens)
    if tokens.size == 0:
        raise EmptyInputError("forward_causal needs at least one token")
    return _run(w, tokens, start + np.arange(tokens.size), causal_mask(tokens.size))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def prefill_segment(tokens, w: Weights, tag: bytes = b"") -> SegmentCache:
    """Encode one segment on its own at local positions ``0..L-1``."""
    tokens = check_tokens(w, tokens)
    if tokens.size == 0:
        raise EmptyInputError("cannot prefill an empty segment")
    out = _run(w, tokens, np.arange(tokens.size), causal_mask(tokens.size))
    return SegmentCache(
        segment_id=segment_hash(w.model_hash, tokens, tag),
        model_hash=w.model_hash,
        n_kv_heads=w.config.n_kv_heads,
        head_dim=w.config.head_dim,
        keys=out.keys,
        values=out.values,
    )


class Causal:
    """Visibility on global positions: every earlier-or-equal position."""

    def allows(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        return cols[None, :] <= rows[:, None]


def extend_over_cache(assembled: AssembledContext, new_tokens, new_positions, visibility, w: Weights) -> ForwardOutput:
    """Run ``new_tokens`` against an assembled context and append their K/V.

    ``visibility.allows(rows, cols)`` decides, on global positions, which cached
    rows and which earlier new tokens each new token attends.
    """
    tokens = check_tokens(w, new_tokens)
    new_positions = np.asarray(new_positions, dtype=np.int64)
    if tokens.size == 0:
        raise EmptyInputError("extend_over_cache needs at least one new token")
    if new_positions.shape != tokens.shape:
        raise ShapeError("new_tokens and new_positions differ in length")
    if visibility is None:
        visibility = Causal()
    cols = np.concatenate([assembled.positions, new_positions])
    allow = np.asarray(visibility.allows(new_positions, cols), dtype=bool)
    # new tokens only see earlier new tokens, in their own order
    n_old = assembled.total_len
    allow[:, n_old:] &= causal_mask(tokens.size)
    seen = np.where(allow, cols[None, :], -1).max(axis=1)
    if np.any(seen > new_positions):
        raise CausalityError("a new token would attend a later position")
    out = _run(w, tokens, new_positions, allow, assembled.keys, assembled.values)
    assembled.append(out.rotated_keys, out.values, new_positions)
    return out


def decode_from(assembled: AssembledContext, logits_row: np.ndarray, max_new: int, w: Weights) -> list[int]:
    """Greedy continuation given the logits that predict the next token."""
    if max_new < 1:
        raise PlanError("max_new must be >= 1")
    generated = [int(np.argmax(logits_row))]
    while len(generated) < max_new:
        pos = assembled.next_position
        out = extend_over_cache(assembled, [generated[-1]], [pos], Causal(), w)
        generated.append(int(np.argmax(out.logits[-1])))
    return generated


def greedy_decode(assembled: AssembledContext, prompt_tail, max_new: int, w: Weights) -> list[int]:
    """Process ``prompt_tail`` causally over the context, then decode greedily.

    ``np.argmax`` returns the first maximum, so ties go to the lower token ID.
    """
    if max_new < 1:
        raise PlanError("max_new must be >= 1")
    tail = list(prompt_tail)
    start = assembled.next_position
    out = extend_over_cache(assembled, tail, start + np.arange(len(tail)), Causal(), w)
    return decode_from(assembled, out.logits[-1], max_new, w)
