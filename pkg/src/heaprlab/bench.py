"""Benchmark harness: synthetic corpus, perplexity, FLOPs accounting, sweeps.

The corpus is an order-2 Markov chain over a small vocabulary with skewed
(Dirichlet-drawn) transition rows, which gives the language model real
structure to learn while staying fully synthetic and seedable.  FLOPs are
counted under an explicit convention (multiply-add = 2) that is printed into
every report; a separate instrumented counter wired through the forward pass
cross-checks the closed-form accounting.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import CameraConfig, camera_energy, expert_drop_manifest, magnitude_importance, random_importance
from .core_math import seeded_rng
from .heapr import (
    ImportanceTable,
    PruneManifest,
    apply_prune,
    compute_importances,
    estimate_covariances,
    rank_global,
    rank_layerwise,
)
from .model import FlopCounter, MoEConfig, MoEModel, TrainingError, init_model, lm_forward, train

__all__ = [
    "CorpusSpec",
    "Corpus",
    "generate_corpus",
    "save_corpus",
    "load_corpus",
    "batches",
    "perplexity",
    "expert_flops",
    "FlopsReport",
    "count_flops",
    "TrainSettings",
    "RecipeResult",
    "train_recipe",
    "PruneSettings",
    "EvalSettings",
    "RunConfig",
    "default_run_config",
    "seeded_run_config",
    "config_hash",
    "importance_for_method",
    "manifest_for_method",
    "SweepRow",
    "sweep_rows",
    "run_sweep",
    "write_sweep_csv",
    "METHODS",
    "MODES",
]

CORPUS_STREAM = 6
RECIPE_STREAM = 7

METHODS = ("heapr", "camera", "random", "magnitude", "expert_drop")
MODES = ("global", "layerwise")

FLOPS_CONVENTION = "multiply-add = 2 FLOPs; matrix products and expert gating only"


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusSpec:
    """Order-2 Markov corpus description.

    `skew` is the Dirichlet concentration for each transition row; small
    values produce peaked rows (low conditional entropy), large values
    approach uniform.  Each pair-conditioned row is a blend of three parts:
    a seeded single-cycle permutation row (weight `cycle_weight`), a
    backbone row that depends only on the immediately preceding token
    (weight `(1-cycle_weight)*backbone`), and a pair-specific row (the
    rest): the chain is genuinely order-2, but only the first two parts are
    carried by order-1 statistics.  The language model here reads a single
    token of context, so those parts are what it can learn at all;
    cycle_weight=backbone=0 gives a corpus that is near-noise to this
    architecture.  A high cycle weight makes sequences walk one fixed
    permutation cycle through the whole vocabulary, which keeps per-token
    frequencies almost exactly uniform across splits while the full
    transition table stays far above the rank any d_model < V linear map
    can reach.  Split fractions must sum to 1.
    """

    vocab: int = 64
    num_sequences: int = 2560
    seq_len: int = 64
    skew: float = 0.05
    backbone: float = 0.7
    cycle_weight: float = 0.0
    fractions: tuple = (0.8, 0.05, 0.15)  # train, calib, test
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.num_sequences < 1:
            raise ValueError("num_sequences must be >= 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if not self.skew > 0:
            raise ValueError("skew must be positive")
        if not 0.0 <= self.backbone <= 1.0:
            raise ValueError("backbone must lie in [0, 1]")
        if not 0.0 <= self.cycle_weight <= 1.0:
            raise ValueError("cycle_weight must lie in [0, 1]")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be three non-negative numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "num_sequences": self.num_sequences,
            "seq_len": self.seq_len,
            "skew": self.skew,
            "backbone": self.backbone,
            "cycle_weight": self.cycle_weight,
            "fractions": list(self.fractions),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "fractions" in d:
            d["fractions"] = tuple(d["fractions"])
        known = {
            "vocab", "num_sequences", "seq_len", "skew", "backbone",
            "cycle_weight", "fractions", "seed",
        }
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Corpus:
    spec: CorpusSpec
    train: np.ndarray
    calib: np.ndarray
    test: np.ndarray


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Sample sequences from a seeded order-2 Markov chain and split them.

    The transition table is drawn once per (vocab, skew, seed); the first two
    tokens of each sequence are uniform.  Sampling draws a surplus of
    sequences and keeps the first `num_sequences` distinct ones, because a
    strongly cyclic chain can emit the same lap twice.  Splits are cut in
    order from the kept block, sized by rounding the fractions (train, then
    calib, with the remainder going to test), and checked for sequence-level
    disjointness so calibration data can never leak into evaluation.
    """
    v = spec.vocab
    rng = seeded_rng(spec.seed, CORPUS_STREAM)
    backbone_rows = rng.dirichlet(np.full(v, spec.skew), size=v)  # (v, v), keyed by prev1
    pair_rows = rng.dirichlet(np.full(v, spec.skew), size=v * v)  # (v*v, v), keyed by (prev2, prev1)
    prev1 = np.tile(np.arange(v), v)  # row index a*v + b has prev1 = b
    transitions = spec.backbone * backbone_rows[prev1] + (1.0 - spec.backbone) * pair_rows
    if spec.cycle_weight > 0.0:
        order = rng.permutation(v)
        cycle_rows = np.zeros((v, v))
        cycle_rows[order, np.roll(order, -1)] = 1.0  # single cycle through all of 0..v-1
        transitions = spec.cycle_weight * cycle_rows[prev1] + (1.0 - spec.cycle_weight) * transitions
    n, t = spec.num_sequences, spec.seq_len
    n_try = n + max(64, n // 4)
    seqs = np.zeros((n_try, t), dtype=np.int64)
    seqs[:, :2] = rng.integers(0, v, size=(n_try, 2))
    for pos in range(2, t):
        ctx = seqs[:, pos - 2] * v + seqs[:, pos - 1]
        cdf = np.cumsum(transitions[ctx], axis=1)
        cdf[:, -1] = 1.0  # close the last bin against rounding shortfall
        u = rng.random(n_try)
        seqs[:, pos] = (cdf > u[:, None]).argmax(axis=1)
    _, first = np.unique(seqs.reshape(n_try, -1), axis=0, return_index=True)
    if first.size < n:
        raise ValueError(
            f"chain too repetitive: only {first.size} distinct sequences in "
            f"{n_try} draws; lower cycle_weight or raise skew"
        )
    seqs = seqs[np.sort(first)[:n]]

    f_train, f_calib, _ = spec.fractions
    n_train = int(round(f_train * n))
    n_calib = int(round(f_calib * n))
    if n_train + n_calib > n:
        raise ValueError("split fractions leave no room for the test split")
    train_split = seqs[:n_train]
    calib_split = seqs[n_train : n_train + n_calib]
    test_split = seqs[n_train + n_calib :]

    seen: dict = {}
    for name, split in (("train", train_split), ("calib", calib_split), ("test", test_split)):
        for row in split:
            key = row.tobytes()
            if key in seen and seen[key] != name:
                raise ValueError(
                    f"splits are not disjoint: a sequence appears in both {seen[key]} and {name}"
                )
            seen[key] = name
    return Corpus(spec, train_split, calib_split, test_split)


CORPUS_FORMAT = "heaprlab-corpus-v1"


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format=np.array(CORPUS_FORMAT),
            spec=np.array(json.dumps(corpus.spec.to_dict(), sort_keys=True)),
            train=corpus.train,
            calib=corpus.calib,
            test=corpus.test,
        )


def load_corpus(path) -> Corpus:
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != CORPUS_FORMAT:
            raise ValueError(f"{path} is not a corpus file")
        spec = CorpusSpec.from_dict(json.loads(str(data["spec"])))
        return Corpus(spec, data["train"].copy(), data["calib"].copy(), data["test"].copy())


def batches(split: np.ndarray, batch_size: int) -> list:
    """Chop a split into contiguous batches (the trailing partial batch is kept).

    Calibration passes weight gradients per batch, so sizes that divide the
    split evenly keep every token's weight identical; the defaults do.
    """
    split = np.asarray(split)
    if split.ndim != 2 or split.shape[0] == 0:
        raise ValueError(f"split must be a non-empty (sequences, seq_len) array, got {split.shape}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [split[i : i + batch_size] for i in range(0, split.shape[0], batch_size)]


def perplexity(model: MoEModel, split: np.ndarray, *, batch_size: int = 16) -> float:
    """exp(mean token NLL) over a split, token-weighted across batches."""
    total = 0.0
    count = 0
    for batch in batches(split, batch_size):
        _, trace = lm_forward(model, batch)
        total += float(trace.token_nll.sum())
        count += trace.token_count
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# FLOPs accounting


def expert_flops(d_model: int, channels: int) -> int:
    """Per-token cost of one expert: three projections plus gating elementwise."""
    return 3 * (2 * d_model * channels) + 2 * channels


def _per_token_moe(config: MoEConfig, channel_counts: list) -> float:
    """Expected per-token MoE cost under uniform routing over live experts.

    Exact for uniform channel counts (every routed expert costs the same);
    for ragged pruned models it is the uniform-routing expectation, since the
    true cost depends on data-dependent routing frequencies.
    """
    d = config.d_model
    total = 0.0
    for counts in channel_counts:
        total += 2 * config.num_experts * d  # router scores
        alive = [c for c in counts if c > 0]
        if not alive:
            continue
        k_eff = min(config.kappa, len(alive))
        # multiply before dividing: keeps the uniform case bit-exact
        total += k_eff * sum(expert_flops(d, c) for c in alive) / len(alive)
    return total


@dataclass
class FlopsReport:
    per_token_moe: float
    per_token_moe_original: float
    per_token_head: int
    per_token_total: float
    per_token_total_original: float
    moe_saving: float
    total_saving: float
    params: int
    params_original: int
    param_fraction_removed: float
    convention: str = FLOPS_CONVENTION

    def to_dict(self) -> dict:
        return {
            "per_token_moe": self.per_token_moe,
            "per_token_moe_original": self.per_token_moe_original,
            "per_token_head": self.per_token_head,
            "per_token_total": self.per_token_total,
            "per_token_total_original": self.per_token_total_original,
            "moe_saving": self.moe_saving,
            "total_saving": self.total_saving,
            "params": self.params,
            "params_original": self.params_original,
            "param_fraction_removed": self.param_fraction_removed,
            "convention": self.convention,
        }


def count_flops(model: MoEModel) -> FlopsReport:
    """Closed-form per-token FLOPs for the model as it stands.

    The "original" columns use the config's nominal channel width, so a
    pruned model reports its saving against the unpruned architecture.  The
    whole-model parameter fraction removed is reported alongside because the
    channel fraction r and the parameter fraction differ at this scale
    (embedding, router, and head parameters are never pruned).
    """
    cfg = model.config
    counts = model.channel_counts()
    full_counts = [[cfg.d_inter] * cfg.num_experts for _ in range(cfg.num_layers)]
    moe = _per_token_moe(cfg, counts)
    moe_orig = _per_token_moe(cfg, full_counts)
    head = 2 * cfg.vocab * cfg.d_model
    total = moe + head
    total_orig = moe_orig + head
    params = model.num_params()
    params_orig = (
        2 * cfg.vocab * cfg.d_model
        + cfg.num_layers * cfg.num_experts * (cfg.d_model + 3 * cfg.d_model * cfg.d_inter)
    )
    return FlopsReport(
        per_token_moe=moe,
        per_token_moe_original=moe_orig,
        per_token_head=head,
        per_token_total=total,
        per_token_total_original=total_orig,
        moe_saving=1.0 - moe / moe_orig,
        total_saving=1.0 - total / total_orig,
        params=params,
        params_original=params_orig,
        param_fraction_removed=1.0 - params / params_orig,
    )


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class TrainSettings:
    """Three-phase recipe: hot edge-riding, cosine cool-down, short polish.

    The hot phase runs constant-lr chunks and adapts the rate to the
    stability edge: after a clean chunk the lr grows by hot_grow, after a
    divergence the model rolls back to the last checkpoint and the lr
    shrinks by hot_shrink.  Riding the edge matters here: the expert mix
    only picks up signal mass through gradient noise, so timid schedules
    leave the experts at their initialization scale and every routed-channel
    score degenerates.  The cool phase is one cosine decay that settles the
    run into a basin.  The polish phase then takes full-batch cosine steps
    on the measurement split (see train_recipe): the second-order scores
    assume a stationary point of the measured loss, and with finite data
    the basin floor for one split sits slightly off where the stochastic
    phases stop, leaving a first-order term that drowns the quadratic one.
    The polish is deliberately short and annealed: its early steps kill
    that first-order gap, but descending much past it inflates every
    ablation delta and with them the quadratic model's truncation error, so
    rank agreement peaks near this budget and decays on either side.
    polish_steps=0 turns the phase off; a polish divergence rolls back to
    the last healthy checkpoint and retries the whole budget at half the
    rate, at most polish_retries times.
    """

    hot_steps: int = 14000
    hot_lr: float = 2.0
    hot_chunk: int = 2000
    hot_grow: float = 1.1
    hot_shrink: float = 0.6
    cool_steps: int = 6000
    cool_lr: float = 0.4
    polish_steps: int = 1000
    polish_lr: float = 0.3
    polish_retries: int = 3
    polish_grad_tol: float = 0.0
    batch_size: int = 16
    momentum: float = 0.9

    def __post_init__(self):
        for name in ("hot_steps", "cool_steps", "polish_steps", "polish_retries"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("hot_lr", "cool_lr", "polish_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("hot_chunk", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.hot_grow >= 1.0:
            raise ValueError("hot_grow must be >= 1")
        if not 0.0 < self.hot_shrink < 1.0:
            raise ValueError("hot_shrink must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.polish_grad_tol < 0:
            raise ValueError("polish_grad_tol must be >= 0")

    def to_dict(self) -> dict:
        return {
            "hot_steps": self.hot_steps,
            "hot_lr": self.hot_lr,
            "hot_chunk": self.hot_chunk,
            "hot_grow": self.hot_grow,
            "hot_shrink": self.hot_shrink,
            "cool_steps": self.cool_steps,
            "cool_lr": self.cool_lr,
            "polish_steps": self.polish_steps,
            "polish_lr": self.polish_lr,
            "polish_retries": self.polish_retries,
            "polish_grad_tol": self.polish_grad_tol,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
        }


@dataclass
class RecipeResult:
    """Model plus the kept per-step history across all recipe phases.

    Steps from chunks that diverged and were rolled back are not in the
    history; restarts counts those rollbacks.
    """

    model: MoEModel
    losses: np.ndarray
    grad_norms: np.ndarray
    restarts: int
    polish_converged: bool
    final_grad_norm: float


REGRESS_TOL = 2.0  # nats a chunk may end above its start before it counts as diverged


def _edge_phase(
    model, data, *, budget, lr0, chunk, grow, shrink, momentum, batch_size, seed_source,
):
    """Constant-lr chunks with grow-on-success / rollback-and-shrink-on-blowup.

    A chunk that finishes REGRESS_TOL nats above where it started is treated
    as a divergence even though nothing overflowed: the in-chunk explosion
    guard only sees the chunk's own best loss, so without this rule a
    sequence of quietly worsening chunks can ratchet the state hot enough to
    poison whatever runs next.
    """
    m, lr, used = model, lr0, 0
    losses, gnorms = [], []
    restarts = 0
    while used < budget:
        steps = min(chunk, budget - used)
        seed = int(seed_source.integers(2**31 - 1))
        used += steps
        try:
            res = train(
                m, data, steps=steps, batch_size=batch_size, lr=lr,
                momentum=momentum, schedule="constant", seed=seed,
            )
        except TrainingError as err:
            m = err.checkpoint
            lr *= shrink
            restarts += 1
            continue
        if res.losses[-1] > res.losses[0] + REGRESS_TOL:
            lr *= shrink  # keep the entry state; the chunk only made things worse
            restarts += 1
            continue
        m = res.model
        losses.extend(res.losses)
        gnorms.extend(res.grad_norms)
        lr *= grow
    return m, losses, gnorms, restarts


def _anneal_with_retries(model, data, *, steps, lr, retries, momentum, batch_size,
                         seed_source, sample="replacement", grad_tol=0.0):
    """One cosine anneal; a divergence rolls back to the last healthy
    checkpoint and retries the whole budget at half the rate."""
    attempt = 0
    while True:
        try:
            res = train(
                model, data, steps=steps, lr=lr, momentum=momentum,
                schedule="cosine", sample=sample, batch_size=batch_size,
                seed=int(seed_source.integers(2**31 - 1)),
                checkpoint_every=50, grad_tol=grad_tol,
            )
        except TrainingError as err:
            if attempt >= retries:
                raise
            model = err.checkpoint
            lr *= 0.5
            attempt += 1
            continue
        return res, attempt


def train_recipe(
    model: MoEModel,
    sequences: np.ndarray,
    settings: TrainSettings | None = None,
    *,
    seed: int = 0,
    polish_sequences: np.ndarray | None = None,
) -> RecipeResult:
    """Run the full hot / cool / polish schedule from TrainSettings.

    `polish_sequences` names the split the polish phase descends toward a
    stationary point of (the pipeline passes the calibration split, since
    the covariances and measured loss deltas live there); default is the
    training sequences.  Chunk seeds come from one RECIPE_STREAM generator,
    so the whole schedule is a pure function of (model, data, settings,
    seed).
    """
    if settings is None:
        settings = TrainSettings()
    seeds = seeded_rng(seed, RECIPE_STREAM)
    m = model
    losses: list = []
    gnorms: list = []
    restarts = 0
    if settings.hot_steps > 0:
        m, l, g, r = _edge_phase(
            m, sequences, budget=settings.hot_steps, lr0=settings.hot_lr,
            chunk=settings.hot_chunk, grow=settings.hot_grow,
            shrink=settings.hot_shrink, momentum=settings.momentum,
            batch_size=settings.batch_size, seed_source=seeds,
        )
        losses += l
        gnorms += g
        restarts += r
    if settings.cool_steps > 0:
        res, retried = _anneal_with_retries(
            m, sequences, steps=settings.cool_steps, lr=settings.cool_lr,
            retries=settings.polish_retries, momentum=settings.momentum,
            batch_size=settings.batch_size, seed_source=seeds,
        )
        m = res.model
        losses += list(res.losses)
        gnorms += list(res.grad_norms)
        restarts += retried
    polish_converged = settings.polish_steps == 0
    if settings.polish_steps > 0:
        pol = sequences if polish_sequences is None else polish_sequences
        res, retried = _anneal_with_retries(
            m, pol, steps=settings.polish_steps, lr=settings.polish_lr,
            retries=settings.polish_retries, momentum=settings.momentum,
            batch_size=settings.batch_size, seed_source=seeds,
            sample="full", grad_tol=settings.polish_grad_tol,
        )
        m = res.model
        losses += list(res.losses)
        gnorms += list(res.grad_norms)
        restarts += retried
        polish_converged = res.converged
    final = float(gnorms[-1]) if gnorms else float("nan")
    return RecipeResult(m, np.asarray(losses), np.asarray(gnorms), restarts, polish_converged, final)


@dataclass(frozen=True)
class PruneSettings:
    method: str = "heapr"
    mode: str = "global"
    ratio: float = 0.25
    channel_floor: int = 1
    camera_alpha: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method == "camera" and self.mode == "global":
            raise ValueError("camera scores are layer-local; combine camera with mode='layerwise'")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio must be in [0, 1), got {self.ratio}")
        if self.channel_floor < 0:
            raise ValueError("channel_floor must be >= 0")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "ratio": self.ratio,
            "channel_floor": self.channel_floor,
            "camera_alpha": self.camera_alpha,
        }


@dataclass(frozen=True)
class EvalSettings:
    split: str = "test"
    batch_size: int = 16

    def __post_init__(self):
        if self.split not in ("train", "calib", "test"):
            raise ValueError(f"split must be train/calib/test, got {self.split!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"split": self.split, "batch_size": self.batch_size}


@dataclass(frozen=True)
class RunConfig:
    """Everything one benchmark run depends on.

    `seed` is the single master seed: model init, corpus sampling, training
    batches, and the random baseline all derive their independent streams
    from it.  The implementation is deterministic regardless of the
    `deterministic` flag (sequential numpy, no timestamps in artifacts); the
    flag is recorded so runs state their intent.
    """

    model: MoEConfig = field(default_factory=MoEConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    prune: PruneSettings = field(default_factory=PruneSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    calib_batch_size: int = 16
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.calib_batch_size < 1:
            raise ValueError("calib_batch_size must be >= 1")
        if self.model.vocab != self.corpus.vocab:
            raise ValueError(
                f"model vocab {self.model.vocab} does not match corpus vocab {self.corpus.vocab}"
            )
        if self.model.seq_len != self.corpus.seq_len:
            raise ValueError(
                f"model seq_len {self.model.seq_len} does not match corpus seq_len {self.corpus.seq_len}"
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "corpus": self.corpus.to_dict(),
            "train": self.train.to_dict(),
            "prune": self.prune.to_dict(),
            "eval": self.eval.to_dict(),
            "calib_batch_size": self.calib_batch_size,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "out_dir": self.out_dir,
        }


def default_run_config(seed: int = 0) -> RunConfig:
    """The pinned toy scale: V=64, d=32, c=16, E=8, kappa=2, L=2, 256 channels."""
    return RunConfig(
        model=MoEConfig(seed=seed),
        corpus=CorpusSpec(seed=seed),
        seed=seed,
    )


def seeded_run_config(config: RunConfig, seed: int) -> RunConfig:
    """Re-key every seeded component of a config to one master seed."""
    return replace(
        config,
        model=replace(config.model, seed=seed),
        corpus=replace(config.corpus, seed=seed),
        seed=seed,
    )


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# method dispatch and sweeps


def importance_for_method(
    method: str,
    model: MoEModel,
    calib_batches,
    *,
    seed: int = 0,
    camera_alpha: float = 1.0,
) -> ImportanceTable:
    """Build the importance table a named method ranks with.

    `expert_drop` aggregates the second-order table (it differs from heapr
    only in pruning granularity, which keeps the comparison about
    granularity rather than about the underlying metric).
    """
    if method in ("heapr", "expert_drop"):
        covs = estimate_covariances(model, calib_batches)
        return compute_importances(model, calib_batches, covs)
    if method == "camera":
        return camera_energy(model, calib_batches, CameraConfig(camera_alpha))
    if method == "random":
        return random_importance(model, seed)
    if method == "magnitude":
        return magnitude_importance(model)
    raise ValueError(f"unknown method {method!r}")


def manifest_for_method(
    method: str,
    table: ImportanceTable,
    ratio: float,
    *,
    mode: str = "global",
    channel_floor: int = 1,
) -> PruneManifest:
    if method == "expert_drop":
        return expert_drop_manifest(table, ratio)
    if mode == "global":
        return rank_global(table, ratio, channel_floor=channel_floor)
    if mode == "layerwise":
        return rank_layerwise(table, ratio, channel_floor=channel_floor)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class SweepRow:
    ratio: float
    method: str
    mode: str
    seed: int
    perplexity: float
    flops_saving: float


def sweep_rows(
    model: MoEModel,
    table: ImportanceTable,
    split: np.ndarray,
    ratios,
    *,
    method: str,
    mode: str,
    seed: int,
    channel_floor: int = 1,
    batch_size: int = 16,
) -> list:
    """Prune fresh from one importance table at each ratio and evaluate.

    `flops_saving` is the whole-model per-token saving (MoE plus head) from
    count_flops; the head dilutes the MoE saving, which is reported
    separately in the FLOPs JSON.
    """
    ratios = [float(r) for r in ratios]
    if any(not 0.0 <= r < 1.0 for r in ratios):
        raise ValueError("ratios must lie in [0, 1)")
    if sorted(ratios) != ratios:
        raise ValueError("ratios must be ascending")
    rows = []
    for r in ratios:
        manifest = manifest_for_method(method, table, r, mode=mode, channel_floor=channel_floor)
        pruned = apply_prune(model, manifest)
        ppl = perplexity(pruned, split, batch_size=batch_size)
        saving = count_flops(pruned).total_saving
        rows.append(SweepRow(r, method, mode, seed, ppl, saving))
    return rows


@dataclass
class RunArtifacts:
    """In-memory products of an end-to-end run."""

    config: RunConfig
    corpus: Corpus
    model: MoEModel
    calib_batches: list
    table: ImportanceTable


def prepare_run(config: RunConfig) -> RunArtifacts:
    """Corpus -> init -> recipe -> importance table, all from one config."""
    corpus = generate_corpus(config.corpus)
    recipe = train_recipe(
        init_model(config.model),
        corpus.train,
        config.train,
        seed=config.seed,
        polish_sequences=corpus.calib,
    )
    calib = batches(corpus.calib, config.calib_batch_size)
    table = importance_for_method(
        config.prune.method,
        recipe.model,
        calib,
        seed=config.seed,
        camera_alpha=config.prune.camera_alpha,
    )
    return RunArtifacts(config, corpus, recipe.model, calib, table)


def run_sweep(config: RunConfig, ratios) -> list:
    """End-to-end sweep per the config's method/mode on its eval split."""
    art = prepare_run(config)
    split = getattr(art.corpus, config.eval.split)
    return sweep_rows(
        art.model,
        art.table,
        split,
        ratios,
        method=config.prune.method,
        mode=config.prune.mode,
        seed=config.seed,
        channel_floor=config.prune.channel_floor,
        batch_size=config.eval.batch_size,
    )


SWEEP_COLUMNS = ["ratio", "method", "mode", "seed", "perplexity", "flops_saving"]


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(
                [repr(row.ratio), row.method, row.mode, row.seed, repr(row.perplexity), repr(row.flops_saving)]
            )
