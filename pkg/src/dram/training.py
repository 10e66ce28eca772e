"""Hybrid supervised / score-function training.

Per episode the loss is, over steps n grouped into targets s:

    sum_active_s  -log p(y_s)
  + sum_active_n  -lambda * detach(R_s - b_n) * log q(l_n | l_hat_n)
  + sum_active_n  0.5 * (b_n - detach(R_s))^2

where R_s is the cumulative 0/1 reward up to target s and "active" masks
out every step at or beyond the first mislabeled target's successor
(curriculum truncation), as well as batch padding beyond a sample's own
targets. Sampled locations enter the network as constants; gradient flows
to the emission pathway only through the log-density term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .optim import OptimizerState, abort_lookahead, decay_learning_rate, lookahead, nesterov_step
from .sensor import SensorConfig, context_image, glimpse_batch
from .tensor import Tape, Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the batch and image ids for diagnosis."""

    def __init__(self, epoch: int, batch_index: int, image_ids, cause: Exception):
        self.epoch = epoch
        self.batch_index = batch_index
        self.image_ids = list(image_ids)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}, "
            f"image ids {self.image_ids[:8]}{'...' if len(self.image_ids) > 8 else ''}: {cause}"
        )


def sample_location(l_hat: Tensor, sigma: float, rng: np.random.Generator):
    """Draw l ~ N(l_hat, sigma^2 I); returns (constant sample, taped log-density)."""
    noise = rng.standard_normal(l_hat.data.shape)
    l_tilde = l_hat.data + sigma * noise
    return l_tilde, T.gaussian_log_density(l_hat, l_tilde, sigma)


def reward_indicator(log_probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """1.0 where argmax matches the target; argmax ties break to the lowest class."""
    pred = np.argmax(log_probs, axis=-1)
    return (pred == np.asarray(target)).astype(np.float64)


def sequential_rewards(rewards: np.ndarray) -> np.ndarray:
    """Cumulative reward R_s = sum_{j<=s} R_j along the target axis."""
    return np.cumsum(rewards, axis=-1)


def curriculum_mask(rewards: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Active-target mask: train targets up to and including the first miss.

    rewards: (B, T) 0/1 per target; lengths: (B,) true target counts.
    """
    r = np.asarray(rewards, dtype=np.float64)
    b, t = r.shape
    idx = np.arange(t)
    in_len = idx[None, :] < np.asarray(lengths)[:, None]
    wrong = (r == 0.0) & in_len
    first_wrong = np.where(wrong.any(axis=1), wrong.argmax(axis=1), t - 1)
    return (in_len & (idx[None, :] <= first_wrong[:, None])).astype(np.float64)


@dataclass
class EpisodeTrace:
    """Per-episode record of everything the loss and the tests need."""

    l_hat: np.ndarray          # (B, steps, 2)
    l_tilde: np.ndarray        # (B, steps, 2)
    log_density: np.ndarray    # (B, steps)
    baselines: np.ndarray      # (B, steps)
    log_probs: np.ndarray      # (B, T, K) at prediction steps
    rewards: np.ndarray        # (B, T) 0/1
    cum_rewards: np.ndarray    # (B, T)
    lengths: np.ndarray        # (B,) target counts incl. the EOS slot
    active_targets: np.ndarray  # (B, T) curriculum mask
    targets: np.ndarray        # (B, T) class indices (padding zeros)


@dataclass
class RunResult:
    trace: EpisodeTrace
    nll_terms: list            # per target: (B,) Tensor, unmasked
    logdens_terms: list        # per step: (B,) Tensor
    baseline_terms: list       # per step: (B,) Tensor
    glimpses_per_target: int


def _target_matrix(label_seqs, mcfg: ModelConfig):
    """(targets (B, T), lengths (B,)): labels plus EOS when sequential."""
    b = len(label_seqs)
    seqs = []
    for labs in label_seqs:
        seq = list(labs) + ([mcfg.eos_class] if mcfg.sequential else [])
        if not seq:
            raise ValueError("empty label sequence for a non-sequential task")
        seqs.append(seq)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    t_max = int(lengths.max())
    targets = np.zeros((b, t_max), dtype=np.int64)
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = s
    return targets, lengths


def run_episodes(params: M.ModelParams, mcfg: ModelConfig, scfg: SensorConfig,
                 tcfg: TrainConfig, images: np.ndarray, label_seqs,
                 rng: np.random.Generator | None = None,
                 fixed_locs: np.ndarray | None = None,
                 cache: dict | None = None) -> RunResult:
    """Teacher-forced unroll of N glimpses per target over a batch.

    With `rng` set, locations are sampled; with `fixed_locs` (B, steps, 2)
    the recorded locations are replayed as constants, which makes the whole
    episode a deterministic, finite-difference-checkable function of the
    parameters. For replays, `cache` (any dict) memoizes the glimpse
    observations and the coarse context image across calls; they depend on
    the image and the frozen locations only, never on parameters.
    """
    if (rng is None) == (fixed_locs is None):
        raise ValueError("pass exactly one of rng (sample) or fixed_locs (replay)")
    if cache is not None and fixed_locs is None:
        raise ValueError("observation cache is only valid when replaying fixed locations")
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    b = imgs.shape[0]
    targets, lengths = _target_matrix(label_seqs, mcfg)
    t_max = targets.shape[1]
    n_per = mcfg.glimpses_per_target
    steps = n_per * t_max

    coarse = None
    if cache is not None:
        if "context" not in cache and not mcfg.no_context:
            cache["context"] = np.stack([context_image(img, scfg) for img in imgs])
        coarse = cache.get("context")
    state = M.init_state(params, mcfg, scfg, imgs, coarse=coarse)
    sigma = tcfg.location_std

    l_hat_v = np.zeros((b, steps, 2))
    l_tilde_v = np.zeros((b, steps, 2))
    ld_v = np.zeros((b, steps))
    base_v = np.zeros((b, steps))
    logp_v = np.zeros((b, t_max, mcfg.num_classes))
    nll_terms, logdens_terms, baseline_terms = [], [], []

    for n in range(steps):
        l_hat = M.emission(params, state)
        if rng is not None:
            l_tilde, ld = sample_location(l_hat, sigma, rng)
        else:
            l_tilde = np.asarray(fixed_locs[:, n], dtype=np.float64)
            ld = T.gaussian_log_density(l_hat, l_tilde, sigma)
        if cache is not None:
            if n not in cache:
                cache[n] = glimpse_batch(imgs, l_tilde, scfg)
            obs = cache[n]
        else:
            obs = glimpse_batch(imgs, l_tilde, scfg)
        g = M.glimpse_network(params, mcfg, obs, l_tilde)
        state = M.recurrent_step(params, g, state)
        bl = M.baseline(params, state)

        l_hat_v[:, n] = l_hat.data
        l_tilde_v[:, n] = l_tilde
        ld_v[:, n] = ld.data
        base_v[:, n] = bl.data
        logdens_terms.append(ld)
        baseline_terms.append(bl)

        if (n + 1) % n_per == 0:
            t = (n + 1) // n_per - 1
            logp = M.classify(params, state)
            nll_terms.append(T.nll_pick(logp, targets[:, t]))
            logp_v[:, t] = logp.data

    rewards = np.zeros((b, t_max))
    for t in range(t_max):
        rewards[:, t] = reward_indicator(logp_v[:, t], targets[:, t])
    cum = sequential_rewards(rewards)
    active = curriculum_mask(rewards, lengths)
    trace = EpisodeTrace(
        l_hat=l_hat_v, l_tilde=l_tilde_v, log_density=ld_v, baselines=base_v,
        log_probs=logp_v, rewards=rewards, cum_rewards=cum, lengths=lengths,
        active_targets=active, targets=targets,
    )
    return RunResult(trace=trace, nll_terms=nll_terms, logdens_terms=logdens_terms,
                     baseline_terms=baseline_terms, glimpses_per_target=n_per)


def surrogate_loss(sup_terms, sup_weights, logdens_terms, rf_coeffs,
                   baseline_terms=(), baseline_targets=(), baseline_weights=()) -> Tensor:
    """Assemble the per-episode surrogate as a (B,) tensor.

    rf_coeffs multiply the log-densities and must already carry the
    -lambda * (R - b) factor as constants; baseline targets likewise enter
    detached. This is the single assembly point shared by training and by
    the estimator-unbiasedness oracle.
    """
    acc = None
    for term, w in zip(sup_terms, sup_weights):
        piece = T.mul(term, Tensor(w)) if w is not None else term
        acc = piece if acc is None else T.add(acc, piece)
    for ld, c in zip(logdens_terms, rf_coeffs):
        piece = T.mul(ld, Tensor(c))
        acc = piece if acc is None else T.add(acc, piece)
    for bl, tgt, w in zip(baseline_terms, baseline_targets, baseline_weights):
        piece = T.half_squared_error(bl, tgt, w)
        acc = piece if acc is None else T.add(acc, piece)
    if acc is None:
        raise ValueError("no loss terms")
    return acc


def episode_loss(run: RunResult, tcfg: TrainConfig, frozen: EpisodeTrace | None = None) -> Tensor:
    """Scalar training loss: batch mean of the per-episode surrogate.

    `frozen` substitutes another trace's rewards, baselines, and curriculum
    masks as the detached constants. Finite-difference checks replay an
    episode at perturbed parameters but must keep the constants of the
    original graph; this is exactly the detach() boundary.
    """
    tr = frozen if frozen is not None else run.trace
    n_per = run.glimpses_per_target
    lam = tcfg.reinforce_weight
    sup_weights = [tr.active_targets[:, t] for t in range(tr.targets.shape[1])]
    rf_coeffs, base_targets, base_weights = [], [], []
    for n in range(len(run.logdens_terms)):
        t = n // n_per
        w = tr.active_targets[:, t]
        coef = -lam * w * (tr.cum_rewards[:, t] - tr.baselines[:, n])
        rf_coeffs.append(coef)
        base_targets.append(tr.cum_rewards[:, t])
        base_weights.append(w)
    per_episode = surrogate_loss(run.nll_terms, sup_weights, run.logdens_terms, rf_coeffs,
                                 run.baseline_terms, base_targets, base_weights)
    return T.mean_all(per_episode)


def reinforcement_loss(run: RunResult, tcfg: TrainConfig, use_baseline: bool = True) -> Tensor:
    """Only the score-function term (for variance diagnostics)."""
    tr = run.trace
    n_per = run.glimpses_per_target
    lam = tcfg.reinforce_weight
    coeffs = []
    for n in range(len(run.logdens_terms)):
        t = n // n_per
        w = tr.active_targets[:, t]
        base = tr.baselines[:, n] if use_baseline else 0.0
        coeffs.append(-lam * w * (tr.cum_rewards[:, t] - base))
    per_episode = surrogate_loss([], [], run.logdens_terms, coeffs)
    return T.mean_all(per_episode)


def batch_stats(trace: EpisodeTrace, loss_value: float) -> dict:
    """reward_rate over true targets; seq_error = any target wrong."""
    in_len = np.arange(trace.targets.shape[1])[None, :] < trace.lengths[:, None]
    total = in_len.sum()
    correct = (trace.rewards * in_len).sum()
    seq_ok = ((trace.rewards >= 1.0) | ~in_len).all(axis=1)
    return {
        "loss": float(loss_value),
        "reward_rate": float(correct / total),
        "seq_error": float(1.0 - seq_ok.mean()),
        "episodes": len(trace.lengths),
        "targets": int(total),
    }


def train_epoch(params: M.ModelParams, opt: OptimizerState, mcfg: ModelConfig,
                scfg: SensorConfig, tcfg: TrainConfig, dataset, epoch: int,
                rng: np.random.Generator) -> dict:
    """One pass over the dataset: shuffle, per-batch Nesterov lookahead step,
    learning-rate decay at the end. Returns aggregate metrics."""
    n = len(dataset.images)
    order = rng.permutation(n)
    tensors = params.tensors
    sums = {"loss": 0.0, "reward": 0.0, "seq_err": 0.0, "targets": 0, "episodes": 0}
    lr_used = opt.learning_rate

    for bi, start in enumerate(range(0, n, tcfg.batch_size)):
        ids = order[start: start + tcfg.batch_size]
        images = dataset.images[ids]
        labels = [dataset.labels[i] for i in ids]
        if tcfg.mc_samples > 1:
            images = np.repeat(images, tcfg.mc_samples, axis=0)
            labels = [l for l in labels for _ in range(tcfg.mc_samples)]

        lookahead(tensors, opt)
        tape = Tape()
        try:
            with tape:
                run = run_episodes(params, mcfg, scfg, tcfg, images, labels, rng=rng)
                loss = episode_loss(run, tcfg)
        except T.NonFiniteError as e:
            abort_lookahead(tensors, opt)
            raise TrainingDiverged(epoch, bi, ids.tolist(), e) from e
        tape.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
        T.zero_grad(tensors.values())
        nesterov_step(tensors, grads, opt)

        st = batch_stats(run.trace, loss.item())
        sums["loss"] += st["loss"] * st["episodes"]
        sums["reward"] += st["reward_rate"] * st["targets"]
        sums["seq_err"] += st["seq_error"] * st["episodes"]
        sums["targets"] += st["targets"]
        sums["episodes"] += st["episodes"]

    decay_learning_rate(opt)
    return {
        "loss": sums["loss"] / sums["episodes"],
        "reward_rate": sums["reward"] / sums["targets"],
        "seq_error": sums["seq_err"] / sums["episodes"],
        "lr": lr_used,
    }
