"""Desk-scale experiment recipes shared by the acceptance suite and the
pilot script.

Every trained artifact in the lab comes from one of these named recipes so
results are reproducible from (recipe name, seeds) alone.  Checkpoints are
cached by name when a cache directory is supplied.

Geometry notes:

* Criterion-style length experiments use the 4-layer desk encoder; the
  direction-study models use 8 layers so last-3 / last-6 / all schedules
  are distinct, and a narrower conv kernel so convolutional lookahead
  stays well below typical key-to-query distances.
* The SF training set is large enough (6000 utterances) that the planted
  key/value bindings cannot be memorized; retrieval has to be learned
  in-context, which is what makes direction and chunk-size effects real.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .bench import model_from_checkpoint, save_checkpoint
from .direction import DirDropPolicy
from .encoder import EncoderConfig, EncoderModel
from .synthdata import TaskSpec, Utterance, make_splits
from .training import TrainConfig, finetune_attention_only, train

DESK_TASK = TaskSpec(vocab_size=24, feature_dim=16, frames_per_token=4,
                     key_value_pairs=6, noise_std=0.0, seed=100)

# frames for one mean SF utterance (64 tokens x 4 frames): the "1x training
# length" unit for chunked decoding experiments
SF_TRAIN_FRAMES = 256


def _enc(kind: str, bidirectional: bool, n_layers: int = 4,
         conv_kernel: int = 7) -> EncoderConfig:
    return EncoderConfig(
        n_layers=n_layers, d_model=64, n_heads=4, d_ff=128,
        conv_kernel=conv_kernel, attention_kind=kind,
        bidirectional=bidirectional, vocab_size=DESK_TASK.vocab_size,
        d_in=DESK_TASK.feature_dim, left_window=16, right_window=16,
        n_global=1, ra_chunk=6)


def _tc(max_steps: int, seed: int, dirdrop: str = "off",
        p: float = 0.2) -> TrainConfig:
    return TrainConfig(lr_peak=2.5e-3, warmup_steps=150, max_steps=max_steps,
                       batch_frames=4096, seed=seed,
                       dirdrop=DirDropPolicy(dirdrop, p if dirdrop != "off" else 0.0))


@dataclass
class Recipe:
    encoder: EncoderConfig
    trainer: TrainConfig
    data_regime: str = "SF"
    data_n: int = 6000
    init_from: str | None = None        # recipe name to fine-tune from
    attention_only: bool = False


RECIPES: dict[str, Recipe] = {
    "mha_sf": Recipe(_enc("mha", False), _tc(2000, seed=21)),
    "birwkv_sf": Recipe(_enc("rwkv", True), _tc(2000, seed=22)),
    "mha_lf": Recipe(_enc("mha", False), _tc(2000, seed=23), "LF", 2400),
    "birwkv_lf": Recipe(_enc("rwkv", True), _tc(2000, seed=24), "LF", 2400),
    "plainbi_sf": Recipe(_enc("rwkv", True, n_layers=8, conv_kernel=5),
                         _tc(2000, seed=25)),
    "dirdrop_both_sf": Recipe(_enc("rwkv", True, n_layers=8, conv_kernel=5),
                              _tc(2000, seed=26, dirdrop="both", p=0.2)),
    "birwkv_lfxl_ft": Recipe(_enc("rwkv", True), _tc(150, seed=27), "LFXL", 60,
                             init_from="birwkv_lf", attention_only=True),
}


def training_data(recipe: Recipe) -> list[Utterance]:
    return make_splits(DESK_TASK, recipe.data_regime, recipe.data_n, salt=1)


def eval_split(regime: str, n: int, salt: int = 9) -> list[Utterance]:
    return make_splits(DESK_TASK, regime, n, salt=salt)


def train_recipe(name: str, cache_dir: str | None = None,
                 log=print) -> EncoderModel:
    """Train (or load from cache) one named model."""
    recipe = RECIPES[name]
    if cache_dir:
        path = os.path.join(cache_dir, f"{name}.ckpt")
        if os.path.exists(path):
            return model_from_checkpoint(ckpt_io.load(path))
    if recipe.init_from:
        base = train_recipe(recipe.init_from, cache_dir, log)
        model = base  # fine-tune in place; caller gets the updated model
    else:
        model = EncoderModel(recipe.encoder, np.random.default_rng(7))
    data = training_data(recipe)
    log(f"[experiments] training {name}: {recipe.encoder.attention_kind}"
        f"{' bi' if recipe.encoder.bidirectional else ''} "
        f"x{recipe.encoder.n_layers}L on {recipe.data_regime} "
        f"({len(data)} utts, {recipe.trainer.max_steps} steps)")
    runner = finetune_attention_only if recipe.attention_only else train
    runner(model, data, recipe.trainer)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        save_checkpoint(os.path.join(cache_dir, f"{name}.ckpt"), model,
                        step=recipe.trainer.max_steps)
    return model
