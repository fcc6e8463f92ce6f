"""Image-conditioned LSTM caption model, trained with teacher forcing.

The image feature enters through a learned affine adapter whose output is
the step-0 input to the recurrence (the slot a <bos> embedding would
normally occupy); every later step receives the embedding of the previous
ground-truth token during training, or of the previously emitted token
during decoding. Each step's hidden state feeds a softmax head over the
vocabulary.

Cell equations are the standard LSTM (sigmoid i/f/o gates, tanh candidate,
c' = f*c + i*g, h' = o*tanh(c')) with gate rows packed i, f, g, o - see
``kernels`` for the exact layout, which checkpoints depend on.

Checkpoint layout (DSKC, little-endian):

    magic    4 bytes  b"DSKC"
    version  u32      1
    vocab_size, image_dim, e, h   u32 each
    vocab    vocab_size entries of (u16 len, UTF-8 bytes), reserved first
    params   f64 blocks: input_embed (e x |V|), adapter_w (e x image_dim),
             adapter_b (e), w_g (4h x (e+h)), b_g (4h),
             w_out (|V| x h), b_out (|V|)
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError, FormatError, IntegrityError, ShapeError
from .features import tokenize
from .numerics import AdamState, Rng, adam_step, clip_gradients

MAGIC = b"DSKC"
VERSION = 1

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3


class Vocabulary:
    """Token table with four reserved slots; lookups never fail (<unk>)."""

    def __init__(self, tokens):
        self.tokens = list(RESERVED) + list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise IntegrityError("vocabulary contains duplicate tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus, min_freq: int = 1) -> "Vocabulary":
        """Tokens with frequency >= min_freq, ordered by (freq desc, token asc)."""
        if min_freq < 1:
            raise DataError(f"min_freq must be >= 1, got {min_freq}")
        counts = Counter()
        for caption in corpus:
            counts.update(tokenize(caption))
        kept = [(tok, c) for tok, c in counts.items() if c >= min_freq]
        kept.sort(key=lambda item: (-item[1], item[0]))
        return cls([tok for tok, _ in kept])

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode_text(self, text: str) -> list[int]:
        return [self.encode(tok) for tok in tokenize(text)]

    def token(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LstmParams:
    input_embed: np.ndarray  # (e, |V|)
    adapter_w: np.ndarray  # (e, image_dim)
    adapter_b: np.ndarray  # (e,)
    w_g: np.ndarray  # (4h, e+h), gate rows i,f,g,o
    b_g: np.ndarray  # (4h,)
    w_out: np.ndarray  # (|V|, h)
    b_out: np.ndarray  # (|V|,)

    @property
    def e(self) -> int:
        return self.input_embed.shape[0]

    @property
    def h(self) -> int:
        return self.w_g.shape[0] // 4

    @property
    def vocab_size(self) -> int:
        return self.input_embed.shape[1]

    @property
    def image_dim(self) -> int:
        return self.adapter_w.shape[1]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {
            "input_embed": self.input_embed,
            "adapter_w": self.adapter_w,
            "adapter_b": self.adapter_b,
            "w_g": self.w_g,
            "b_g": self.b_g,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "LstmParams":
        return cls(**d)


def init_captioner(vocab_size: int, image_dim: int, e: int = 64, h: int = 128,
                   seed: int = 42) -> LstmParams:
    """Fan-based uniform init for embeddings/adapter/gates; the output head
    starts at zero so an untrained model is exactly uniform over the vocab."""
    if min(vocab_size, image_dim, e, h) < 1:
        raise DataError("all captioner dims must be positive")
    rng = Rng(seed)
    s_embed = np.sqrt(6.0 / (vocab_size + e))
    s_adapt = np.sqrt(6.0 / (image_dim + e))
    s_gate = np.sqrt(6.0 / (e + h + 4 * h))
    return LstmParams(
        input_embed=rng.uniform(-s_embed, s_embed, size=(e, vocab_size)),
        adapter_w=rng.uniform(-s_adapt, s_adapt, size=(e, image_dim)),
        adapter_b=np.zeros(e),
        w_g=rng.uniform(-s_gate, s_gate, size=(4 * h, e + h)),
        b_g=np.zeros(4 * h),
        w_out=np.zeros((vocab_size, h)),
        b_out=np.zeros(vocab_size),
    )


def lstm_step(params: LstmParams, state: LstmState, x_t: np.ndarray):
    """One recurrence step plus the softmax head's logits."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (params.e,):
        raise ShapeError(f"step input must have shape ({params.e},), got {x_t.shape}")
    if state.h.shape != (params.h,) or state.c.shape != (params.h,):
        raise ShapeError(
            f"state must have shape ({params.h},), got h {state.h.shape}, c {state.c.shape}"
        )
    hs, cs, _ = kernels.lstm_seq_forward(
        x_t[None, :], state.h, state.c, params.w_g, params.b_g
    )
    logits = params.w_out @ hs[0] + params.b_out
    return LstmState(h=hs[0], c=cs[0]), logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _adapter_input(params: LstmParams, image_feature: np.ndarray) -> np.ndarray:
    feat = np.asarray(image_feature, dtype=np.float64)
    if feat.shape != (params.image_dim,):
        raise ShapeError(
            f"image feature must have shape ({params.image_dim},), got {feat.shape}"
        )
    return params.adapter_w @ feat + params.adapter_b


def caption_nll(params: LstmParams, vocab: Vocabulary, image_feature: np.ndarray,
                caption: str):
    """Teacher-forced mean cross-entropy per target token, with BPTT gradients.

    The scored sequence targets w_1..w_T then <eos>; an empty caption is
    scored as the single <eos> target.
    """
    if len(vocab) != params.vocab_size:
        raise ShapeError(
            f"vocab has {len(vocab)} tokens, params expect {params.vocab_size}"
        )
    ids = vocab.encode_text(caption)
    targets = np.array(ids + [EOS], dtype=np.intp)
    steps = targets.shape[0]

    xs = np.empty((steps, params.e))
    xs[0] = _adapter_input(params, image_feature)
    for t in range(1, steps):
        xs[t] = params.input_embed[:, ids[t - 1]]

    h0 = np.zeros(params.h)
    c0 = np.zeros(params.h)
    hs, cs, gates = kernels.lstm_seq_forward(xs, h0, c0, params.w_g, params.b_g)
    logits = hs @ params.w_out.T + params.b_out  # (steps, |V|)

    probs = softmax(logits)
    picked = probs[np.arange(steps), targets]
    nll = float(-np.log(picked).mean())

    dlogits = probs
    dlogits[np.arange(steps), targets] -= 1.0
    dlogits /= steps

    d_w_out = dlogits.T @ hs
    d_b_out = dlogits.sum(axis=0)
    dhs = dlogits @ params.w_out

    dxs, d_w_g, d_b_g = kernels.lstm_seq_backward(
        xs, h0, c0, hs, cs, gates, params.w_g, dhs
    )

    d_embed = np.zeros_like(params.input_embed)
    for t in range(1, steps):
        d_embed[:, ids[t - 1]] += dxs[t]
    feat = np.asarray(image_feature, dtype=np.float64)
    grads = {
        "input_embed": d_embed,
        "adapter_w": np.outer(dxs[0], feat),
        "adapter_b": dxs[0].copy(),
        "w_g": d_w_g,
        "b_g": d_b_g,
        "w_out": d_w_out,
        "b_out": d_b_out,
    }
    return nll, grads


@dataclass
class CaptionTrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 128
    grad_clip: float = 10.0
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise DataError("learning_rate and grad_clip must be positive")


@dataclass
class CaptionTrainResult:
    params: LstmParams
    loss_history: list[float]
    diagnostics: dict = field(default_factory=dict)


def train_captioner(params: LstmParams, vocab: Vocabulary, dataset,
                    config: CaptionTrainConfig) -> CaptionTrainResult:
    """Adam with seeded shuffling and global-norm clipping over
    (image_feature, caption) samples; per-batch gradients are the mean of
    the per-sample BPTT gradients."""
    samples = list(dataset)
    if not samples:
        raise DataError("empty captioner training dataset")
    current = {k: p.copy() for k, p in params.to_dict().items()}
    opt = AdamState.for_params(current, learning_rate=config.learning_rate)
    rng = Rng(config.seed)
    history: list[float] = []
    n = len(samples)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            acc = {k: np.zeros_like(p) for k, p in current.items()}
            batch_loss = 0.0
            p_obj = LstmParams.from_dict(current)
            for i in idx:
                feat, caption = samples[i]
                nll, grads = caption_nll(p_obj, vocab, feat, caption)
                batch_loss += nll
                for k in acc:
                    acc[k] += grads[k]
            m = len(idx)
            if not np.isfinite(batch_loss):
                raise DataError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            total += batch_loss
            for k in acc:
                acc[k] /= m
            acc = clip_gradients(acc, config.grad_clip)
            current = adam_step(opt, current, acc)
        history.append(total / n)

    return CaptionTrainResult(
        params=LstmParams.from_dict(current),
        loss_history=history,
        diagnostics={"final_loss": history[-1] if history else None},
    )


def greedy_decode(params: LstmParams, vocab: Vocabulary, image_feature: np.ndarray,
                  max_len: int = 20) -> str:
    """Argmax decoding, at most max_len tokens, stopping at <eos>.

    Reserved tokens other than <eos> are masked out; argmax ties resolve
    to the lowest token index.
    """
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    if len(vocab) != params.vocab_size:
        raise ShapeError(
            f"vocab has {len(vocab)} tokens, params expect {params.vocab_size}"
        )
    state = LstmState(h=np.zeros(params.h), c=np.zeros(params.h))
    x = _adapter_input(params, image_feature)
    words: list[str] = []
    for _ in range(max_len):
        state, logits = lstm_step(params, state, x)
        masked = logits.copy()
        masked[[PAD, BOS, UNK]] = -np.inf
        tok = int(np.argmax(masked))
        if tok == EOS:
            break
        words.append(vocab.token(tok))
        x = params.input_embed[:, tok]
    return " ".join(words)


# ---------------------------------------------------------------------------
# DSKC checkpoints
# ---------------------------------------------------------------------------

_PARAM_ORDER = ("input_embed", "adapter_w", "adapter_b", "w_g", "b_g", "w_out", "b_out")


def save_captioner(params: LstmParams, vocab: Vocabulary, path) -> None:
    if len(vocab) != params.vocab_size:
        raise ShapeError(
            f"vocab has {len(vocab)} tokens, params expect {params.vocab_size}"
        )
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIIII", VERSION, params.vocab_size, params.image_dim,
                       params.e, params.h)
    for tok in vocab.tokens:
        encoded = tok.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
    bundle = params.to_dict()
    for name in _PARAM_ORDER:
        buf += np.ascontiguousarray(bundle[name], dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_captioner(path) -> tuple[LstmParams, Vocabulary]:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise IntegrityError(f"captioner checkpoint truncated: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, vocab_size, image_dim, e, h = struct.unpack_from("<IIIII", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported captioner checkpoint version {version}")
    offset = 24
    tokens: list[str] = []
    for _ in range(vocab_size):
        if offset + 2 > len(data):
            raise IntegrityError(f"captioner checkpoint truncated at byte {offset}")
        (tok_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + tok_len > len(data):
            raise IntegrityError(f"captioner checkpoint truncated at byte {offset}")
        tokens.append(data[offset:offset + tok_len].decode("utf-8"))
        offset += tok_len
    if tokens[:4] != list(RESERVED):
        raise IntegrityError("captioner checkpoint vocabulary lacks reserved tokens")

    shapes = {
        "input_embed": (e, vocab_size),
        "adapter_w": (e, image_dim),
        "adapter_b": (e,),
        "w_g": (4 * h, e + h),
        "b_g": (4 * h,),
        "w_out": (vocab_size, h),
        "b_out": (vocab_size,),
    }
    expected = sum(8 * int(np.prod(s)) for s in shapes.values())
    if len(data) - offset != expected:
        raise IntegrityError(
            f"captioner checkpoint has {len(data) - offset} parameter bytes, "
            f"expected {expected}"
        )
    bundle = {}
    for name in _PARAM_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        bundle[name] = np.frombuffer(
            data, dtype="<f8", count=count, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += 8 * count
    return LstmParams.from_dict(bundle), Vocabulary(tokens[4:])
