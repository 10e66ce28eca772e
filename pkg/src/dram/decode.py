"""Decoding: deterministic, Monte-Carlo averaged, forward-backward merged,
and two-pass focus refinement for oversized canvases.

All decoders stop glimpsing as soon as termination is decided, so a decode
never spends more than N * (S_max + 1) glimpses and an EOS-terminated
sequence uses exactly N * (len + 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .config import ModelConfig
from .rng import stream
from .sensor import SensorConfig, loc_to_pixels


@dataclass
class SequencePrediction:
    labels: list
    log_probs: list                  # one (K,) vector per emitted position
    trajectory: list = field(default_factory=list)
    terminated_by: str = "max_length"
    glimpse_count: int = 0
    image_id: int = 0


def _logmeanexp_renorm(vectors) -> np.ndarray:
    """Arithmetic mean of log-prob vectors, renormalized to a distribution."""
    avg = np.mean(np.stack(vectors), axis=0)
    m = avg.max()
    return avg - (m + np.log(np.exp(avg - m).sum()))


def decode_one(params: M.ModelParams, mcfg: ModelConfig, scfg: SensorConfig,
               image: np.ndarray, stochastic: bool = False,
               rng: np.random.Generator | None = None, sigma: float = 0.03,
               image_id: int = 0) -> SequencePrediction:
    """Glimpse until EOS or the target budget is exhausted.

    Deterministic mode looks exactly at the emitted means; stochastic mode
    perturbs them with N(0, sigma^2) noise (used by Monte Carlo averaging).
    """
    if stochastic and rng is None:
        raise ValueError("stochastic decode needs an rng")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    imgs = img[None]
    hw = img.shape[1:]
    n_per = mcfg.glimpses_per_target
    groups = mcfg.max_targets
    state = M.init_state(params, mcfg, scfg, imgs)

    pred = SequencePrediction(labels=[], log_probs=[], image_id=image_id)
    step = 0
    next_loc = M.emission(params, state).data[0]
    for gidx in range(groups):
        outs = None
        for _ in range(n_per):
            loc = next_loc
            if stochastic:
                loc = loc + sigma * rng.standard_normal(2)
            state, outs = M.model_step(params, mcfg, scfg, imgs, loc[None], state)
            step += 1
            pred.trajectory.append({
                "image_id": image_id,
                "step": step,
                "loc_xy": [float(loc[0]), float(loc[1])],
                "pixel_rc": [float(v) for v in loc_to_pixels(loc, hw, scfg.unit_width_px)],
            })
            next_loc = outs["l_hat"].data[0]
        logp = outs["log_probs"].data[0]
        label = int(np.argmax(logp))
        pred.trajectory[-1]["predicted_label"] = label
        pred.trajectory[-1]["log_probs"] = [float(v) for v in logp]
        if not mcfg.sequential:
            pred.labels.append(label)
            pred.log_probs.append(logp.copy())
            pred.terminated_by = "max_length"
            break
        if label == mcfg.eos_class:
            pred.terminated_by = "eos"
            break
        if len(pred.labels) == mcfg.max_targets - 1:
            pred.terminated_by = "max_length"
            break
        pred.labels.append(label)
        pred.log_probs.append(logp.copy())
    pred.glimpse_count = step
    return pred


def mc_average_predict(params: M.ModelParams, mcfg: ModelConfig, scfg: SensorConfig,
                       image: np.ndarray, m: int, seed: int, sigma: float = 0.03,
                       image_id: int = 0) -> SequencePrediction:
    """Average log-probabilities over m stochastic decodes.

    Position alignment truncates to the shortest predicted length among the
    samples; per position the log-prob vectors are averaged arithmetically
    and renormalized.
    """
    runs = [
        decode_one(params, mcfg, scfg, image, stochastic=True,
                   rng=stream(seed, "mc", image_id, i), sigma=sigma, image_id=image_id)
        for i in range(m)
    ]
    k = min(len(r.labels) for r in runs)
    merged = SequencePrediction(labels=[], log_probs=[], image_id=image_id,
                                terminated_by="mc",
                                glimpse_count=max(r.glimpse_count for r in runs))
    for t in range(k):
        lp = _logmeanexp_renorm([r.log_probs[t] for r in runs])
        merged.log_probs.append(lp)
        merged.labels.append(int(np.argmax(lp)))
    merged.trajectory = runs[0].trajectory
    return merged


def forward_backward_merge(fwd: SequencePrediction, bwd: SequencePrediction) -> SequencePrediction:
    """Merge a left-to-right and a right-to-left decode of the same image.

    The first k predictions of the backward model are flipped to forward
    order (k = shorter length) and per-position log-prob vectors averaged.
    """
    k = min(len(fwd.labels), len(bwd.labels))
    rev = bwd.log_probs[:k][::-1]
    merged = SequencePrediction(labels=[], log_probs=[], image_id=fwd.image_id,
                                terminated_by="fb",
                                glimpse_count=fwd.glimpse_count + bwd.glimpse_count)
    for t in range(k):
        lp = _logmeanexp_renorm([fwd.log_probs[t], rev[t]])
        merged.log_probs.append(lp)
        merged.labels.append(int(np.argmax(lp)))
    return merged


def focus_refine(params: M.ModelParams, mcfg: ModelConfig, scfg: SensorConfig,
                 image: np.ndarray, crop_hw, image_id: int = 0):
    """Two-pass decode for canvases larger than the training size.

    Pass 1 decodes the raw image; the crop window is centered on the
    centroid of pass 1's glimpse pixel positions; pass 2 decodes the crop.
    Returns (refined prediction, crop origin (row, col)).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    ch, cw = (crop_hw, crop_hw) if isinstance(crop_hw, int) else tuple(crop_hw)
    pass1 = decode_one(params, mcfg, scfg, img, image_id=image_id)
    centers = np.array([rec["pixel_rc"] for rec in pass1.trajectory])
    cr, cc = centers.mean(axis=0)
    h, w = img.shape
    r0 = int(np.clip(round(cr - ch / 2), 0, max(h - ch, 0)))
    c0 = int(np.clip(round(cc - cw / 2), 0, max(w - cw, 0)))
    crop = np.zeros((ch, cw), dtype=img.dtype)
    rs, cs = min(ch, h - r0), min(cw, w - c0)
    crop[:rs, :cs] = img[r0: r0 + rs, c0: c0 + cs]
    refined = decode_one(params, mcfg, scfg, crop, image_id=image_id)
    refined.terminated_by = "focus:" + refined.terminated_by
    return refined, (r0, c0)


# ---------------------------------------------------------------------------
# dataset-level evaluation


def whole_sequence_error(preds, truths) -> float:
    wrong = sum(1 for p, t in zip(preds, truths) if list(p.labels) != list(t))
    return wrong / len(truths)


def per_position_accuracy(preds, truths) -> float:
    total = sum(len(t) for t in truths)
    hit = 0
    for p, t in zip(preds, truths):
        for i, y in enumerate(t):
            if i < len(p.labels) and p.labels[i] == y:
                hit += 1
    return hit / total if total else 0.0


def dump_trajectories(preds, path) -> None:
    """JSON-lines dump, one record per glimpse step."""
    with open(path, "w", encoding="utf8") as f:
        for p in preds:
            for rec in p.trajectory:
                f.write(json.dumps(rec) + "\n")


def evaluate_dataset(params: M.ModelParams, mcfg: ModelConfig, scfg: SensorConfig,
                     dataset, mode: str = "det", seed: int = 0,
                     backward: tuple | None = None, crop_hw=None, limit=None,
                     sigma: float = 0.03):
    """Decode a dataset with the given mode; returns (metrics dict, predictions).

    Modes: det, mc:M, fb (needs backward=(params, mcfg, scfg)), focus
    (needs crop_hw).
    """
    n = len(dataset.images) if limit is None else min(limit, len(dataset.images))
    preds = []
    for i in range(n):
        img = dataset.images[i]
        if mode == "det":
            preds.append(decode_one(params, mcfg, scfg, img, image_id=i))
        elif mode.startswith("mc:"):
            m = int(mode.split(":", 1)[1])
            preds.append(mc_average_predict(params, mcfg, scfg, img, m, seed, sigma=sigma, image_id=i))
        elif mode == "fb":
            if backward is None:
                raise ValueError("fb mode requires a backward model")
            bp, bm, bs = backward
            f = decode_one(params, mcfg, scfg, img, image_id=i)
            b = decode_one(bp, bm, bs, img, image_id=i)
            preds.append(forward_backward_merge(f, b))
        elif mode == "focus":
            if crop_hw is None:
                raise ValueError("focus mode requires a crop size")
            refined, _ = focus_refine(params, mcfg, scfg, img, crop_hw, image_id=i)
            preds.append(refined)
        else:
            raise ValueError(f"unknown eval mode '{mode}'")
    truths = [dataset.labels[i] for i in range(n)]
    metrics = {
        "mode": mode,
        "images": n,
        "seq_error": whole_sequence_error(preds, truths),
        "position_accuracy": per_position_accuracy(preds, truths),
    }
    return metrics, preds
