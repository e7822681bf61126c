"""Trial sampling, Adam optimization and the NPLDA training loop.

Batches are stratified: the target and non-target pools are shuffled
independently and interleaved at the global ratio, so each mini-batch
preserves the overall class mix to within one trial. The learning rate is
halved whenever the validation loss fails to decrease for a configurable
number of consecutive epochs (the plateau counter resets after a halving),
and the returned parameters are the snapshot with the best validation
minDCF, the untrained starting point included.

The loop is sequential over batches; per-batch work is vectorized with a
fixed reduction order, so two runs with the same seed produce identical
histories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import metrics, nplda
from .dataio import NONTARGET, TARGET, EmbeddingArchive, Trial
from .metrics import CostParams, ScoreSet

LOSSES = ("soft_dcf", "bce", "bce_regularized")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; the defaults are the reference recipe."""

    batch_size: int = 8192
    lr: float = 1e-3
    lr_halving_patience: int = 2
    max_epochs: int = 20
    target_nontarget_ratio: int = 10
    seed: int = 42
    loss: str = "soft_dcf"
    lam: float = 0.0
    alpha: float = 20.0
    costs: tuple[CostParams, ...] = (CostParams(),)
    stratified: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.lam < 0 or self.lr <= 0 or self.alpha <= 0:
            raise ValueError("lr and alpha must be positive, lambda non-negative")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_min_dcf: float
    lr: float


def history_to_csv(history: list[EpochStats]) -> str:
    """Comma-separated rows: epoch, train_loss, valid_loss, valid_min_dcf, lr."""
    lines = ["epoch,train_loss,valid_loss,valid_min_dcf,lr"]
    for row in history:
        lines.append(
            f"{row.epoch},{row.train_loss:.10g},{row.valid_loss:.10g},"
            f"{row.valid_min_dcf:.10g},{row.lr:.10g}"
        )
    return "\n".join(lines) + "\n"


# -- trial sampling -------------------------------------------------------


def _speaker_segments(archive: EmbeddingArchive) -> dict[str, list[str]]:
    segs: dict[str, list[str]] = {}
    for sid, spk in zip(archive.segment_ids, archive.speaker_ids):
        if spk is None:
            raise ValueError(f"record {sid!r} has no speaker label")
        segs.setdefault(spk, []).append(sid)
    return segs


def sample_trials(
    archive: EmbeddingArchive,
    n_target: int,
    ratio: int = 10,
    seed: int = 0,
) -> list[Trial]:
    """Sample gender-matched verification trials without duplicate pairs.

    Produces exactly ``n_target`` same-speaker pairs of distinct segments
    followed by ``ratio * n_target`` different-speaker pairs whose speakers
    share a gender. Deterministic for a given seed (PCG64 stream).
    """
    if n_target < 1 or ratio < 1:
        raise ValueError("n_target and ratio must be positive")
    segs = _speaker_segments(archive)
    gender_of = dict(zip(archive.segment_ids, archive.genders))
    speaker_gender = {spk: gender_of[ids[0]] for spk, ids in segs.items()}

    n_target_pairs = sum(len(ids) * (len(ids) - 1) // 2 for ids in segs.values())
    if n_target_pairs < n_target:
        raise ValueError(
            f"only {n_target_pairs} distinct same-speaker pairs available, "
            f"need {n_target}"
        )
    by_gender: dict[str, list[str]] = {}
    for spk in sorted(segs):
        by_gender.setdefault(speaker_gender[spk], []).append(spk)
    n_nontarget = ratio * n_target
    n_cross_pairs = 0
    for spks in by_gender.values():
        total = sum(len(segs[s]) for s in spks)
        same = sum(len(segs[s]) ** 2 for s in spks)
        n_cross_pairs += (total * total - same) // 2
    if n_cross_pairs < n_nontarget:
        raise ValueError(
            f"only {n_cross_pairs} gender-matched cross-speaker pairs available, "
            f"need {n_nontarget}"
        )

    rng = np.random.Generator(np.random.PCG64(seed))
    seen: set[tuple[str, str]] = set()

    def unseen(a: str, b: str) -> bool:
        key = (a, b) if a <= b else (b, a)
        if key in seen:
            return False
        seen.add(key)
        return True

    trials: list[Trial] = []
    target_speakers = sorted(s for s in segs if len(segs[s]) >= 2)
    if n_target > n_target_pairs // 2:
        # Close to exhausting the pair pool: enumerate and draw without
        # replacement instead of rejection sampling.
        pairs = [
            (ids[a], ids[b])
            for spk in target_speakers
            for ids in (segs[spk],)
            for a in range(len(ids))
            for b in range(a + 1, len(ids))
        ]
        for idx in rng.choice(len(pairs), size=n_target, replace=False):
            e, t = pairs[idx]
            seen.add((e, t) if e <= t else (t, e))
            trials.append(Trial(e, t, TARGET))
    else:
        weights = np.array(
            [len(segs[s]) * (len(segs[s]) - 1) // 2 for s in target_speakers], float
        )
        weights /= weights.sum()
        while len(trials) < n_target:
            spk = target_speakers[rng.choice(len(target_speakers), p=weights)]
            a, b = rng.choice(len(segs[spk]), size=2, replace=False)
            e, t = segs[spk][a], segs[spk][b]
            if unseen(e, t):
                trials.append(Trial(e, t, TARGET))

    genders = sorted(g for g in by_gender if len(by_gender[g]) >= 2)
    if not genders:
        raise ValueError("non-target sampling needs at least 2 speakers of one gender")
    gender_segments = {
        g: [(spk, sid) for spk in by_gender[g] for sid in segs[spk]] for g in genders
    }
    if n_nontarget > n_cross_pairs // 2:
        pairs = [
            (pool[i][1], pool[j][1])
            for g in genders
            for pool in (gender_segments[g],)
            for i in range(len(pool))
            for j in range(i + 1, len(pool))
            if pool[i][0] != pool[j][0]
        ]
        for idx in rng.choice(len(pairs), size=n_nontarget, replace=False):
            e, t = pairs[idx]
            trials.append(Trial(e, t, NONTARGET))
    else:
        gender_weights = np.array([len(gender_segments[g]) for g in genders], float)
        gender_weights /= gender_weights.sum()
        n_done = 0
        while n_done < n_nontarget:
            g = genders[rng.choice(len(genders), p=gender_weights)]
            pool = gender_segments[g]
            i, j = rng.integers(0, len(pool), size=2)
            (spk_e, e), (spk_t, t) = pool[i], pool[j]
            if spk_e == spk_t:
                continue
            if unseen(e, t):
                trials.append(Trial(e, t, NONTARGET))
                n_done += 1
    return trials


# -- Adam -----------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """First/second-moment accumulators per parameter block plus step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_blocks(cls, blocks: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in blocks.items()},
            v={k: np.zeros_like(v) for k, v in blocks.items()},
        )


def adam_step(
    state: AdamState,
    blocks: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update over named parameter blocks."""
    if set(blocks) != set(grads) or set(blocks) != set(state.m):
        raise ValueError("parameter, gradient and state blocks must carry the same names")
    t = state.step + 1
    new_blocks: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, param in blocks.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient shape mismatch for block {name!r}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        update = param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if not np.isfinite(update).all():
            raise FloatingPointError(f"non-finite Adam update in block {name!r}")
        new_blocks[name] = update
        new_m[name] = m
        new_v[name] = v
    return new_blocks, AdamState(new_m, new_v, t)


# -- batching -------------------------------------------------------------


def stratified_batches(
    target_idx: np.ndarray,
    nontarget_idx: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """Consecutive batches of an interleaving that keeps every window's
    class mix within one trial of the global ratio."""
    targets = rng.permutation(target_idx)
    nontargets = rng.permutation(nontarget_idx)
    n_t, n = len(targets), len(targets) + len(nontargets)
    order = np.empty(n, dtype=np.int64)
    cum = (np.arange(n + 1, dtype=np.int64) * n_t) // n
    slots = np.diff(cum).astype(bool)
    order[slots] = targets
    order[~slots] = nontargets
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def plain_batches(
    all_idx: np.ndarray, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    order = rng.permutation(all_idx)
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


# -- NPLDA training -------------------------------------------------------


@dataclass
class TrialTensors:
    """Trials resolved to archive rows once, for fast batched gathering."""

    enroll_rows: np.ndarray
    test_rows: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_trials(cls, trials: list[Trial], archive: EmbeddingArchive) -> "TrialTensors":
        enroll = np.array([archive.row(t.enroll_id) for t in trials], dtype=np.int64)
        test = np.array([archive.row(t.test_id) for t in trials], dtype=np.int64)
        labels = np.empty(len(trials), dtype=np.int8)
        for i, t in enumerate(trials):
            if t.label == TARGET:
                labels[i] = 1
            elif t.label == NONTARGET:
                labels[i] = 0
            else:
                raise ValueError(f"trial ({t.enroll_id}, {t.test_id}) is unlabeled")
        return cls(enroll, test, labels)


def _loss_and_score_grads(
    config: TrainConfig,
    params: nplda.NPLDAParams,
    scores: np.ndarray,
    labels: np.ndarray,
    ref_scores: np.ndarray | None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, d/d(scores) and d/d(thresholds) of the configured loss.

    The soft-DCF loss averages one soft cost per operating point, each with
    its own learnable threshold.
    """
    if config.loss == "soft_dcf":
        m = len(config.costs)
        total = 0.0
        grad_scores = np.zeros_like(scores)
        grad_thresholds = np.zeros_like(params.thresholds)
        for j, cp in enumerate(config.costs):
            value, g_s, g_t = metrics.soft_dcf_grad(
                scores, labels, cp, float(params.thresholds[j]), params.alpha
            )
            total += value / m
            grad_scores += g_s / m
            grad_thresholds[j] = g_t / m
        return total, grad_scores, grad_thresholds
    if config.loss == "bce":
        value, grad_scores = metrics.bce_grad(scores, labels)
    else:
        value, grad_scores = metrics.bce_regularized_grad(scores, labels, ref_scores, config.lam)
    return value, grad_scores, np.zeros_like(params.thresholds)


def _evaluate(
    config: TrainConfig,
    params: nplda.NPLDAParams,
    vectors: np.ndarray,
    tensors: TrialTensors,
    ref_scores: np.ndarray | None,
) -> tuple[float, float]:
    """(loss, minDCF at the primary operating point) over a full trial set."""
    scores = nplda.forward_batch(params, vectors[tensors.enroll_rows], vectors[tensors.test_rows])
    loss, _, _ = _loss_and_score_grads(config, params, scores, tensors.labels, ref_scores)
    ss = ScoreSet(scores, tensors.labels)
    return loss, metrics.min_dcf(ss, config.costs[0])[0]


def train_nplda(
    params: nplda.NPLDAParams,
    train_trials: list[Trial],
    valid_trials: list[Trial],
    archive: EmbeddingArchive,
    config: TrainConfig,
) -> tuple[nplda.NPLDAParams, list[EpochStats]]:
    """Train the network, returning the best-validation-minDCF snapshot.

    The history holds one row per evaluated epoch, starting with the
    untrained epoch-0 state; with ``max_epochs == 0`` the initial parameters
    come back unchanged with an empty history.
    """
    if len(params.thresholds) != len(config.costs):
        raise ValueError("one threshold per configured operating point is required")
    if config.max_epochs == 0:
        return params, []
    params = nplda.symmetrized(params)
    vectors = archive.vectors
    train = TrialTensors.from_trials(train_trials, archive)
    valid = TrialTensors.from_trials(valid_trials, archive)

    ref_train = ref_valid = None
    if config.loss == "bce_regularized":
        # Regression targets: raw backend scores from the untrained network.
        ref_train = nplda.forward_batch(params, vectors[train.enroll_rows], vectors[train.test_rows])
        ref_valid = nplda.forward_batch(params, vectors[valid.enroll_rows], vectors[valid.test_rows])

    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = AdamState.for_blocks(params.blocks())
    lr = config.lr

    train_loss, _ = _evaluate(config, params, vectors, train, ref_train)
    valid_loss, valid_mdcf = _evaluate(config, params, vectors, valid, ref_valid)
    history = [EpochStats(0, train_loss, valid_loss, valid_mdcf, lr)]
    best_params, best_mdcf = params, valid_mdcf
    best_valid_loss = valid_loss
    plateau = 0

    target_idx = np.flatnonzero(train.labels == 1)
    nontarget_idx = np.flatnonzero(train.labels == 0)

    for epoch in range(1, config.max_epochs + 1):
        if config.stratified:
            batches = stratified_batches(target_idx, nontarget_idx, config.batch_size, rng)
        else:
            batches = plain_batches(np.arange(len(train.labels)), config.batch_size, rng)
        loss_sum = 0.0
        n_seen = 0
        for batch_idx, batch in enumerate(batches):
            labels = train.labels[batch]
            if config.loss == "soft_dcf" and (labels.all() or not labels.any()):
                # A remainder batch too small to hold both classes cannot
                # define the cost; skip it.
                continue
            x_e = vectors[train.enroll_rows[batch]]
            x_t = vectors[train.test_rows[batch]]
            scores = nplda.forward_batch(params, x_e, x_t)
            ref = ref_train[batch] if ref_train is not None else None
            loss, g_scores, g_thresholds = _loss_and_score_grads(
                config, params, scores, labels, ref
            )
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_idx}"
                )
            grads = nplda.backward(params, x_e, x_t, g_scores, g_thresholds)
            blocks, state = adam_step(state, params.blocks(), grads.blocks(), lr)
            params = nplda.symmetrized(params.with_blocks(blocks))
            loss_sum += loss * len(batch)
            n_seen += len(batch)
        train_loss = loss_sum / n_seen

        valid_loss, valid_mdcf = _evaluate(config, params, vectors, valid, ref_valid)
        history.append(EpochStats(epoch, train_loss, valid_loss, valid_mdcf, lr))
        if valid_mdcf < best_mdcf:
            best_params, best_mdcf = params, valid_mdcf
        if valid_loss < best_valid_loss:
            best_valid_loss = valid_loss
            plateau = 0
        else:
            plateau += 1
            if plateau >= config.lr_halving_patience:
                lr /= 2.0
                plateau = 0
    return best_params, history
