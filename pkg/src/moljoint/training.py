"""Training loops with the per-step task switch.

Each step draws one Bernoulli(p_task) indicator: with probability p_task
the step trains the generation mode (causal next-token loss), otherwise
the prediction mode (masked-token loss, plus the target term when the
batch is labeled). Unsupervised corpora therefore pretrain with the
prediction term absent; fine-tuning is the same loop on labeled data,
conventionally with a prediction-heavy switch (p_task = 0.1).

The optimizer is Adam with decoupled weight decay: decay applies to
matrix weights only, never to biases, gains, or embeddings. Each step
updates only the parameters that participate in that step's loss, so
generation steps never move the predictor head and unsupervised
prediction steps never move it either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import model as mdl
from .model import JointModelParams, ModelConfig, Task
from .numerics import NonFiniteError, Rng, Tape
from .smiles import TokenSequence, Vocabulary, tokenize


@dataclass
class TrainConfig:
    p_task: float = 0.95  # probability of taking the generation branch
    mask_rate: float = 0.15
    batch_size: int = 64
    max_iters: int = 5000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    lr_max: float = 6e-4
    lr_min: float = 6e-5
    decay_lr: bool = True
    warmup_iters: int = 2000
    decay_iters: int | None = None  # defaults to max_iters
    grad_clip: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    eval_interval: int = 500
    # ablation switches
    encoder_term: bool = True      # drop the masked-token penalty when False
    generation_task: bool = True   # drop the generation branch entirely when False

    def __post_init__(self):
        if not 0.0 <= self.p_task <= 1.0:
            raise ValueError("p_task must lie in [0, 1]")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.decay_iters is not None and self.warmup_iters > self.decay_iters:
            raise ValueError("warmup_iters must not exceed decay_iters")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        """Prediction-heavy fine-tuning: constant small LR, p_task 0.1."""
        base = dict(p_task=0.1, lr_max=3e-5, lr_min=3e-5, decay_lr=False, max_iters=50_000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Token sequences with optional aligned scalar targets."""

    sequences: list[TokenSequence]
    targets: np.ndarray | None = None
    target_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if len(self.targets) != len(self.sequences):
                raise ValueError("targets must align 1:1 with sequences")
            lo, hi = self.target_range
            if self.targets.size and (self.targets.min() < lo or self.targets.max() > hi):
                raise ValueError(f"targets outside declared range [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def supervised(self) -> bool:
        return self.targets is not None


def encode_corpus(
    lines: list[str],
    vocab: Vocabulary,
    max_len: int,
    targets: list[float] | None = None,
) -> Dataset:
    seqs = [tokenize(s, vocab, max_len) for s in lines]
    return Dataset(seqs, None if targets is None else np.asarray(targets))


def read_smiles_lines(path) -> list[str]:
    """Unsupervised data file: UTF-8, one SMILES per line."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [ln for ln in lines if ln]


def read_labeled_lines(path) -> tuple[list[str], list[float]]:
    """Supervised data file: "SMILES<TAB>float" per line."""
    smiles, ys = [], []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        ln = ln.rstrip()
        if not ln:
            continue
        parts = ln.split("\t")
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'SMILES<TAB>float', got {ln!r}")
        smiles.append(parts[0])
        try:
            ys.append(float(parts[1]))
        except ValueError:
            raise ValueError(f"line {lineno}: bad target {parts[1]!r}") from None
    return smiles, ys


class AdamW:
    """Adam with decoupled weight decay and per-parameter step counts.

    Decay set: tensors with ndim >= 2 except the embedding tables. Step
    counts are per parameter because a step only updates the parameters
    participating in that step's loss.
    """

    def __init__(self, params: JointModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.steps = {n: 0 for n in params.tensors}
        self.decay_set = {
            n for n, t in params.tensors.items()
            if t.ndim >= 2 and n not in ("tok_emb", "pos_emb")
        }

    def step(self, params: JointModelParams, lr: float, names: list[str]) -> None:
        cfg = self.cfg
        for n in names:
            t = params.tensors[n]
            g = t.grad
            self.steps[n] += 1
            k = self.steps[n]
            m, v = self.m[n], self.v[n]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1**k)
            vhat = v / (1 - cfg.beta2**k)
            upd = mhat / (np.sqrt(vhat) + cfg.adam_eps)
            if n in self.decay_set:
                upd = upd + cfg.weight_decay * t.data
            t.data -= (lr * upd).astype(t.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"m:{n}"] = self.m[n]
            out[f"v:{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        for n in self.m:
            self.m[n] = arrays[f"m:{n}"].astype(self.m[n].dtype)
            self.v[n] = arrays[f"v:{n}"].astype(self.v[n].dtype)
        self.steps = dict(steps)


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, cosine decay to lr_min, then flat.

    With decay disabled the rate is constant lr_max.
    """
    if not cfg.decay_lr:
        return cfg.lr_max
    decay_iters = cfg.decay_iters if cfg.decay_iters is not None else cfg.max_iters
    if it < cfg.warmup_iters:
        return cfg.lr_max * it / cfg.warmup_iters
    if it >= decay_iters:
        return cfg.lr_min
    frac = (it - cfg.warmup_iters) / (decay_iters - cfg.warmup_iters)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def clip_gradients(params: JointModelParams, names: list[str], clip: float) -> float:
    """Scale gradients so their global L2 norm is at most `clip`."""
    total = 0.0
    for n in names:
        g = params.tensors[n].grad
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if clip > 0 and norm > clip:
        scale = clip / (norm + 1e-6)
        for n in names:
            params.tensors[n].grad *= scale
    return norm


def _active_names(params: JointModelParams, task: Task, labeled: bool, encoder_term: bool) -> list[str]:
    """Parameters participating in this step's loss."""
    if task is Task.GENERATION:
        return params.trunk_names()
    names: list[str] = []
    if encoder_term:
        names += params.trunk_names()
    if labeled:
        names += [n for n in params.trunk_names() if n != "head.w" and n not in names]
        names += params.predictor_names()
    return names


def train_step(
    params: JointModelParams,
    opt: AdamW,
    batch: tuple[np.ndarray, np.ndarray | None],
    cfg: TrainConfig,
    rng: Rng,
    it: int,
) -> tuple[float, Task]:
    """One optimization step; returns (loss value, branch taken)."""
    ids, y = batch
    take_generation = cfg.generation_task and rng.random() < cfg.p_task
    task = Task.GENERATION if take_generation else Task.PREDICTION
    mask = None
    if task is Task.PREDICTION and cfg.encoder_term:
        mask = mdl.sample_mask_vector(ids, cfg.mask_rate, rng)
    if task is Task.PREDICTION and y is None and (not cfg.encoder_term or not mask.any()):
        # nothing to optimize on this branch (no targets and an empty or
        # disabled masked-token term): the step is a no-op
        return 0.0, task

    params.zero_grads()
    try:
        with Tape() as tape:
            loss = mdl.loss_joint(
                params, ids, y, mask, task,
                dropout=cfg.dropout, rng=rng, encoder_term=cfg.encoder_term,
            )
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"loss = {value}")
        tape.backward(loss)
    except NonFiniteError as e:
        raise NonFiniteError(f"training aborted at iter {it} ({task.value} step): {e}") from None

    names = _active_names(params, task, labeled=y is not None, encoder_term=cfg.encoder_term)
    clip_gradients(params, names, cfg.grad_clip)
    opt.step(params, lr_at(it, cfg), names)
    return value, task


@dataclass
class Checkpoint:
    """Full training state; save/load round-trips bit-exactly."""

    model_config: ModelConfig
    train_config: TrainConfig
    vocab: Vocabulary
    params: JointModelParams
    opt: AdamW
    iteration: int
    rng: Rng

    def save(self, path) -> None:
        ckpt_io.save_bundle(
            path,
            iteration=self.iteration,
            config={"model": self.model_config.to_dict(), "train": self.train_config.to_dict()},
            vocab_lines=self.vocab.to_lines(),
            params={n: t.data for n, t in self.params.tensors.items()},
            optim_arrays=self.opt.state_arrays(),
            optim_extra={"steps": self.opt.steps},
            rng_state=self.rng.get_state(),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        bundle = ckpt_io.load_bundle(path)
        model_config = ModelConfig(**bundle["config"]["model"])
        train_config = TrainConfig(**bundle["config"]["train"])
        vocab = Vocabulary.from_lines(bundle["vocab_lines"])
        params = JointModelParams(model_config)
        for n, t in params.tensors.items():
            arr = bundle["params"][n]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"checkpoint tensor {n} has shape {arr.shape}, expected {t.shape}")
            t.data[...] = arr
        opt = AdamW(params, train_config)
        opt.load_state(bundle["optim_arrays"], bundle["optim_extra"]["steps"])
        rng = Rng(0)
        rng.set_state(bundle["rng_state"])
        return cls(model_config, train_config, vocab, params, opt, bundle["iteration"], rng)


def _batch(dataset: Dataset, rng: Rng, cfg: TrainConfig):
    idx = rng.integers(0, len(dataset), cfg.batch_size)
    seqs = [dataset.sequences[i] for i in idx]
    ids = mdl.pad_batch(seqs)
    y = dataset.targets[idx] if dataset.supervised else None
    return ids, y


def _run_loop(
    state: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    log_cb: Callable[[int, float, Task], None] | None,
    checkpoint_dir,
) -> Checkpoint:
    while state.iteration < cfg.max_iters:
        it = state.iteration
        batch = _batch(dataset, state.rng, cfg)
        loss, task = train_step(state.params, state.opt, batch, cfg, state.rng, it)
        state.iteration = it + 1
        if log_cb is not None:
            log_cb(it, loss, task)
        if checkpoint_dir is not None and cfg.eval_interval > 0 and state.iteration % cfg.eval_interval == 0:
            state.save(checkpoint_dir)
    if checkpoint_dir is not None:
        state.save(checkpoint_dir)
    return state


def pretrain(
    dataset: Dataset,
    vocab: Vocabulary,
    model_config: ModelConfig,
    cfg: TrainConfig,
    *,
    resume: Checkpoint | None = None,
    log_cb: Callable[[int, float, Task], None] | None = None,
    checkpoint_dir=None,
) -> Checkpoint:
    """Unsupervised training: the prediction term is absent throughout."""
    if dataset.supervised:
        raise ValueError("pretrain expects an unsupervised dataset")
    if resume is not None:
        state = resume
    else:
        rng = Rng(cfg.seed)
        params = JointModelParams(model_config, rng)
        state = Checkpoint(model_config, cfg, vocab, params, AdamW(params, cfg), 0, rng)
    return _run_loop(state, dataset, cfg, log_cb, checkpoint_dir)


def finetune(
    base: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    log_cb: Callable[[int, float, Task], None] | None = None,
    checkpoint_dir=None,
) -> Checkpoint:
    """Supervised training from a pretrained state (fresh optimizer)."""
    if not dataset.supervised:
        raise ValueError("finetune expects a supervised dataset")
    vocab_size = len(base.vocab)
    for seq in dataset.sequences:
        if max(seq.ids) >= vocab_size:
            raise ValueError("dataset token ids exceed checkpoint vocabulary")
    params = JointModelParams(base.model_config)
    for n, t in params.tensors.items():
        t.data[...] = base.params.tensors[n].data
    rng = Rng(cfg.seed)
    state = Checkpoint(base.model_config, cfg, base.vocab, params, AdamW(params, cfg), 0, rng)
    return _run_loop(state, dataset, cfg, log_cb, checkpoint_dir)
