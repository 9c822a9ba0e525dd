import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

MEMORIZED_STRING = "CC(=O)OC1CC1N"
MEMORIZED_TARGET = 0.37


@pytest.fixture(scope="session")
def memorized():
    """A tiny model trained to memorize one labeled string.

    Returns (params, vocab, dataset, string, target). Used by the
    overfit-based examples: near-zero NLL, masked-token recovery, target
    recall, argmax emission.
    """
    from moljoint import training as T
    from moljoint.model import JointModelParams, ModelConfig
    from moljoint.numerics import Rng
    from moljoint.smiles import build_vocabulary

    vocab = build_vocabulary([MEMORIZED_STRING])
    mcfg = ModelConfig(vocab_size=len(vocab), max_len=20, embed_dim=32, n_layers=2,
                       n_heads=2, ff_dim=64, predictor_hidden_dim=16, dropout_rate=0.0)
    dataset = T.encode_corpus([MEMORIZED_STRING], vocab, 20, targets=[MEMORIZED_TARGET])
    cfg = T.TrainConfig(p_task=0.5, batch_size=4, max_iters=600, warmup_iters=10,
                        lr_max=3e-3, lr_min=3e-4, decay_iters=600, dropout=0.0,
                        seed=0, eval_interval=0)
    params = JointModelParams(mcfg, Rng(0))
    opt = T.AdamW(params, cfg)
    rng = Rng(0)
    for it in range(cfg.max_iters):
        T.train_step(params, opt, T._batch(dataset, rng, cfg), cfg, rng, it)
    return params, vocab, dataset, MEMORIZED_STRING, MEMORIZED_TARGET
