"""Shared-trunk transformer with switchable attention masking.

One set of trunk weights serves two modes: causal masking for next-token
generation and bidirectional masking (with MASK-token substitution at
hidden positions) for masked-token reconstruction. A small MLP head on
the first output position predicts the scalar target; only that head has
its own weights, everything else is shared between the modes.

Losses:
  * ``loss_decoder``    mean next-token NLL under causal masking (PAD excluded)
  * ``loss_encoder``    mean NLL of the hidden tokens at masked positions
  * ``loss_prediction`` 0.5 * (mean - y)^2 for regression, cross-entropy
                        for classification
  * ``loss_joint``      per-step branch: generation -> decoder loss,
                        prediction -> encoder (+ prediction when labeled)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .numerics import Rng, Tensor
from .smiles import MASK_ID, PAD_ID, TokenSequence

NEG_BIAS = -1e9  # additive attention bias for disallowed key positions


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int = 128
    embed_dim: int = 256
    n_layers: int = 6
    n_heads: int = 8
    ff_dim: int = 1024
    dropout_rate: float = 0.1
    predictor_hidden_dim: int = 100
    predictor_layers: int = 1
    ln_eps: float = 1e-5
    n_classes: int = 0  # 0 = regression head

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        for name in ("vocab_size", "max_len", "embed_dim", "n_layers", "n_heads", "ff_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def predictor_out_dim(self) -> int:
        return self.n_classes if self.n_classes > 0 else 1


class Task(enum.Enum):
    GENERATION = "generation"
    PREDICTION = "prediction"


class JointModelParams:
    """All trainable tensors, keyed by name in a fixed order.

    Trunk tensors (embeddings, blocks, final norm, token head) serve both
    masking modes; names under ``pred.`` belong to the predictor MLP.
    """

    def __init__(self, config: ModelConfig, rng: Rng | None = None, init_std: float = 0.02):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        E, F, V = config.embed_dim, config.ff_dim, config.vocab_size
        H = config.predictor_hidden_dim

        def w(name, *shape):
            data = rng.normal(shape, std=init_std) if rng is not None else np.zeros(shape)
            self.tensors[name] = Tensor(data, name=name)

        def zeros(name, *shape):
            self.tensors[name] = Tensor(np.zeros(shape), name=name)

        def ones(name, *shape):
            self.tensors[name] = Tensor(np.ones(shape), name=name)

        w("tok_emb", V, E)
        w("pos_emb", config.max_len, E)
        for i in range(config.n_layers):
            p = f"h{i}."
            ones(p + "ln1.g", E)
            zeros(p + "ln1.b", E)
            for proj in ("wq", "wk", "wv", "wo"):
                w(p + "attn." + proj, E, E)
            for b in ("bq", "bk", "bv", "bo"):
                zeros(p + "attn." + b, E)
            ones(p + "ln2.g", E)
            zeros(p + "ln2.b", E)
            w(p + "ff.w1", E, F)  # feed-forward carries no biases
            w(p + "ff.w2", F, E)
        ones("ln_f.g", E)
        zeros("ln_f.b", E)
        w("head.w", E, V)

        dims = [E] + [H] * config.predictor_layers + [config.predictor_out_dim]
        for i in range(len(dims) - 1):
            w(f"pred.l{i}.w", dims[i], dims[i + 1])
            zeros(f"pred.l{i}.b", dims[i + 1])

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trunk_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("pred.")]

    def predictor_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith("pred.")]

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def pad_batch(seqs: list[TokenSequence], length: int | None = None) -> np.ndarray:
    """Stack sequences into a (B, S) id array, padding to the longest."""
    n = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s.ids
    return out


def sample_mask_vector(ids: np.ndarray, mask_rate: float, rng: Rng) -> np.ndarray:
    """Per-position Bernoulli(mask_rate) mask; specials are never masked."""
    maskable = ids > MASK_ID  # specials sit at fixed ids 0..3
    return (rng.random(ids.shape) < mask_rate) & maskable


def attention_bias(ids: np.ndarray, causal: bool) -> np.ndarray:
    """Additive attention bias: 0 where attending is allowed, else NEG_BIAS.

    PAD keys are excluded in both modes; causal mode additionally hides
    positions j > i.
    """
    B, S = ids.shape
    bias = np.where(ids[:, None, None, :] != PAD_ID, 0.0, NEG_BIAS)
    if causal:
        bias = bias + np.triu(np.full((S, S), NEG_BIAS), k=1)
    else:
        bias = np.broadcast_to(bias, (B, 1, S, S))
    return np.ascontiguousarray(bias, dtype=nm.current_dtype())


def _dropout(x: Tensor, rate: float, rng: Rng | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    u = rng.random(x.shape, dtype=np.float32)
    keep = (u >= rate).astype(x.data.dtype) / (1.0 - rate)
    return nm.mul(x, keep)


def _transformer(
    params: JointModelParams,
    ids: np.ndarray,
    causal: bool,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the trunk; returns (token logits, final hidden states)."""
    cfg = params.config
    B, S_in = ids.shape
    if S_in > cfg.max_len:
        raise ValueError(f"sequence length {S_in} exceeds max_len {cfg.max_len}")
    # trailing all-PAD columns are dropped so that appending PAD after EOS
    # leaves every pre-PAD output bit-identical
    S = max(int((ids != PAD_ID).sum(axis=1).max()), 1)
    ids = ids[:, :S]
    eps = cfg.ln_eps
    nh, hd = cfg.n_heads, cfg.embed_dim // cfg.n_heads
    bias = attention_bias(ids, causal)

    tok = nm.embedding(params["tok_emb"], ids)
    pos = nm.embedding(params["pos_emb"], np.arange(S))
    x = _dropout(nm.add(tok, pos), dropout, rng)

    for i in range(cfg.n_layers):
        p = f"h{i}."
        a = nm.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], eps)
        q = nm.add(nm.matmul(a, params[p + "attn.wq"]), params[p + "attn.bq"])
        k = nm.add(nm.matmul(a, params[p + "attn.wk"]), params[p + "attn.bk"])
        v = nm.add(nm.matmul(a, params[p + "attn.wv"]), params[p + "attn.bv"])
        q = nm.transpose(nm.reshape(q, (B, S, nh, hd)), (0, 2, 1, 3))
        k = nm.transpose(nm.reshape(k, (B, S, nh, hd)), (0, 2, 1, 3))
        v = nm.transpose(nm.reshape(v, (B, S, nh, hd)), (0, 2, 1, 3))
        att = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        att = nm.softmax_rows(nm.add(att, bias))
        att = _dropout(att, dropout, rng)
        y = nm.reshape(nm.transpose(nm.matmul(att, v), (0, 2, 1, 3)), (B, S, cfg.embed_dim))
        y = nm.add(nm.matmul(y, params[p + "attn.wo"]), params[p + "attn.bo"])
        x = nm.add(x, _dropout(y, dropout, rng))

        f = nm.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], eps)
        f = nm.matmul(nm.gelu(nm.matmul(f, params[p + "ff.w1"])), params[p + "ff.w2"])
        x = nm.add(x, _dropout(f, dropout, rng))

    h = nm.layer_norm(x, params["ln_f.g"], params["ln_f.b"], eps)
    logits = nm.matmul(h, params["head.w"])
    return nm.pad_cols(logits, S_in), nm.pad_cols(h, S_in)


def forward_decoder(
    params: JointModelParams,
    ids: np.ndarray,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> Tensor:
    """Causally masked forward; logits[i] depends only on tokens 0..i."""
    logits, _ = _transformer(params, ids, causal=True, dropout=dropout, rng=rng)
    return logits


def forward_encoder(
    params: JointModelParams,
    ids: np.ndarray,
    mask: np.ndarray,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> Tensor:
    """Bidirectional forward with MASK-token substitution at hidden positions."""
    masked_ids = np.where(mask, MASK_ID, ids)
    logits, _ = _transformer(params, masked_ids, causal=False, dropout=dropout, rng=rng)
    return logits


def _predictor_head(params: JointModelParams, h: Tensor) -> Tensor:
    """First-position hidden state through the predictor MLP."""
    cfg = params.config
    z = nm.take(h, 0, axis=1)
    for i in range(cfg.predictor_layers):
        z = nm.gelu(nm.add(nm.matmul(z, params[f"pred.l{i}.w"]), params[f"pred.l{i}.b"]))
    last = cfg.predictor_layers
    return nm.add(nm.matmul(z, params[f"pred.l{last}.w"]), params[f"pred.l{last}.b"])


def forward_predictor(
    params: JointModelParams,
    ids: np.ndarray,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> Tensor:
    """Predictor output on an all-visible bidirectional pass.

    Regression: raw means, shape (B, 1). Classification: class logits
    (B, n_classes).
    """
    masked_ids = ids  # all-visible mask: nothing hidden
    _, h = _transformer(params, masked_ids, causal=False, dropout=dropout, rng=rng)
    return _predictor_head(params, h)


def predict_target(params: JointModelParams, ids: np.ndarray) -> np.ndarray:
    """Deterministic predictive distribution parameters per example.

    Returns means (B,) for regression (unit-variance Gaussian likelihood)
    or class probabilities (B, n_classes) for classification. Dropout is
    always off here.
    """
    out = forward_predictor(params, ids)
    if params.config.n_classes > 0:
        return nm.softmax_rows(out).data.copy()
    return out.data[:, 0].copy()


def loss_decoder(
    params: JointModelParams,
    ids: np.ndarray,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> Tensor:
    """Mean per-token next-token NLL under causal masking, PAD excluded."""
    logits = forward_decoder(params, ids, dropout=dropout, rng=rng)
    targets = np.full_like(ids, PAD_ID)
    targets[:, :-1] = ids[:, 1:]
    select = targets != PAD_ID
    return nm.cross_entropy(logits, targets, select)


def loss_encoder(
    params: JointModelParams,
    ids: np.ndarray,
    mask: np.ndarray,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> Tensor:
    """Mean NLL of the true tokens at masked positions; 0 if none masked."""
    if not mask.any():
        return Tensor(0.0, name="encoder_loss_empty")
    logits = forward_encoder(params, ids, mask, dropout=dropout, rng=rng)
    return nm.cross_entropy(logits, ids, mask)


def loss_prediction(
    params: JointModelParams,
    ids: np.ndarray,
    y: np.ndarray,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> Tensor:
    """Target NLL: 0.5*(mean - y)^2 for regression, CE for classification."""
    out = forward_predictor(params, ids, dropout=dropout, rng=rng)
    if params.config.n_classes > 0:
        labels = np.asarray(y, dtype=np.int64)
        return nm.cross_entropy(out, labels, np.ones(labels.shape, dtype=bool))
    diff = nm.sub(nm.reshape(out, (out.shape[0],)), np.asarray(y))
    return nm.mul(nm.mean_all(nm.mul(diff, diff)), 0.5)


def loss_joint(
    params: JointModelParams,
    ids: np.ndarray,
    y: np.ndarray | None,
    mask: np.ndarray | None,
    task: Task,
    dropout: float = 0.0,
    rng: Rng | None = None,
    encoder_term: bool = True,
) -> Tensor:
    """Per-step loss for the chosen branch.

    Generation: decoder NLL (never touches the predictor head).
    Prediction: encoder loss plus the prediction term when targets exist;
    with ``encoder_term=False`` (ablation) only the prediction term.
    """
    if task is Task.GENERATION:
        return loss_decoder(params, ids, dropout=dropout, rng=rng)
    parts = []
    if encoder_term:
        if mask is None:
            raise ValueError("prediction branch needs a mask vector")
        parts.append(loss_encoder(params, ids, mask, dropout=dropout, rng=rng))
    if y is not None:
        parts.append(loss_prediction(params, ids, y, dropout=dropout, rng=rng))
    if not parts:
        raise ValueError("prediction branch has no loss terms (unlabeled data with encoder_term=False)")
    total = parts[0]
    for p in parts[1:]:
        total = nm.add(total, p)
    return total
