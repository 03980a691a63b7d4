"""Triple scoring heads, margin training and threshold selection.

All heads score so that lower means more plausible:

* ``transe``   ``sum |m + r - g|``
* ``rotate``   ``sum_k |m_k * exp(i r_k) - g_k|`` over complex coordinates
  (first half of a vector is the real part, second half the imaginary part)
* ``distmult`` ``-sum m * r * g``
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import DivergenceError
from .features import uniform_
from .graph import BatchCorruptor, Direction, Triple, Vocabulary

log = logging.getLogger(__name__)

VARIANTS = ("transe", "rotate", "distmult")


class MissingEmbedding(KeyError):
    pass


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact zero at zero, with a zero (not nan) gradient there
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


class LinkPredModel(nn.Module):
    def __init__(self, n_vertices: int, dim: int = 512, variant: str = "transe", seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant == "rotate" and dim % 2:
            raise ValueError("rotate needs an even dimension")
        self.variant = variant
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        self.vertex_emb = nn.Parameter(uniform_(torch.empty(n_vertices, dim, dtype=torch.float64), dim, gen))
        if variant == "rotate":
            phases = torch.empty(2, dim // 2, dtype=torch.float64)
            with torch.no_grad():
                phases.uniform_(-math.pi, math.pi, generator=gen)
            self.relation_emb = nn.Parameter(phases)
        else:
            self.relation_emb = nn.Parameter(uniform_(torch.empty(2, dim, dtype=torch.float64), dim, gen))

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        """Scores for ``[..., 3]`` encoded triples (metabolite, direction, gene)."""
        m = self.vertex_emb[idx[..., 0]]
        r = self.relation_emb[idx[..., 1]]
        g = self.vertex_emb[idx[..., 2]]
        if self.variant == "transe":
            return (m + r - g).abs().sum(-1)
        if self.variant == "distmult":
            return -(m * r * g).sum(-1)
        half = self.dim // 2
        m_re, m_im = m[..., :half], m[..., half:]
        g_re, g_im = g[..., :half], g[..., half:]
        cos, sin = torch.cos(r), torch.sin(r)
        re = m_re * cos - m_im * sin - g_re
        im = m_re * sin + m_im * cos - g_im
        return _safe_sqrt(re * re + im * im).sum(-1)


def score(model: LinkPredModel, vocab: Vocabulary, t: Triple) -> float:
    try:
        idx = vocab.encode([t])
    except KeyError as exc:
        raise MissingEmbedding(f"no embedding for {exc.args[0]}") from None
    with torch.no_grad():
        return float(model(torch.as_tensor(idx))[0])


def lp_loss(model: LinkPredModel, positives: torch.Tensor, negatives: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """``sum max(0, f(t) - f(t') + margin)`` with ``negatives`` shaped ``[P, K, 3]``."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if len(positives) == 0:
        raise ValueError("no positive triples")
    return F.relu(model(positives)[:, None] - model(negatives) + margin).sum()


# ------------------------------------------------------------------- thresholds

Thresholds = dict  # direction value -> float | None (None: nothing classified valid)


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Score cut-off maximising F1 for ``valid iff score <= tau``.

    Candidates are the distinct observed scores; the smallest maximiser wins.
    """
    if not labels.any():
        return None
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order].astype(np.int64)
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # only cut after the last copy of a repeated score
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp, cut = tp[last], fp[last], s[last]
    fn = y.sum() - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    return float(cut[int(np.argmax(f1))])


def select_thresholds(scores: np.ndarray, labels: np.ndarray, relations: np.ndarray) -> Thresholds:
    return {
        d.value: best_threshold(scores[relations == i], labels[relations == i])
        for i, d in enumerate((Direction.LEFT, Direction.RIGHT))
    }


def predict(scores: np.ndarray, relations: np.ndarray, tau: Thresholds) -> np.ndarray:
    out = np.zeros(len(scores), dtype=bool)
    for i, d in enumerate((Direction.LEFT, Direction.RIGHT)):
        t = tau.get(d.value)
        if t is not None:
            sel = relations == i
            out[sel] = scores[sel] <= t
    return out


def classify(model: LinkPredModel, vocab: Vocabulary, tau: Thresholds, t: Triple) -> str:
    """``"valid"`` iff the score is at most the relation's threshold (inclusive)."""
    s = score(model, vocab, t)
    cut = tau.get(t.direction.value)
    return "valid" if cut is not None and s <= cut else "invalid"


# --------------------------------------------------------------------- training


@dataclass
class LPConfig:
    variant: str = "transe"
    dim: int = 512
    lr: float = 5e-4
    margin: float = 1.0
    neg_rate: int = 10
    epochs: int = 100
    batch_size: int = 512
    eval_every: int = 5
    seed: int = 0


@dataclass
class LPResult:
    model: LinkPredModel
    tau: Thresholds
    best_epoch: int
    best_valid_f1: float
    trace: list[dict]


def score_array(model: LinkPredModel, idx: np.ndarray, chunk: int = 65536) -> np.ndarray:
    with torch.no_grad():
        parts = [model(torch.as_tensor(idx[i : i + chunk])).numpy() for i in range(0, len(idx), chunk)]
    return np.concatenate(parts) if parts else np.zeros(0)


def train_lp(
    vocab: Vocabulary,
    train_idx: np.ndarray,
    valid_idx: np.ndarray,
    valid_labels: np.ndarray,
    config: LPConfig,
    init: torch.Tensor | None = None,
) -> LPResult:
    """Mini-batch margin training; keeps the epoch with the best validation F1.

    ``train_idx`` are encoded positives (their corruptions are drawn fresh every
    batch and filtered against the positives). ``valid_idx``/``valid_labels``
    is a labelled validation set used for model and threshold selection.
    """
    if len(train_idx) == 0:
        raise ValueError("empty training pool")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = LinkPredModel(len(vocab), config.dim, config.variant, config.seed)
    if init is not None:
        with torch.no_grad():
            model.vertex_emb.copy_(init)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    corruptor = BatchCorruptor(vocab, train_idx)
    valid_rel = valid_idx[:, 1]

    best = (-1.0, 0, None, None)
    trace = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_idx))
        total = 0.0
        for lo in range(0, len(perm), config.batch_size):
            batch = train_idx[perm[lo : lo + config.batch_size]]
            neg = corruptor.corrupt(batch, config.neg_rate, rng).reshape(len(batch), config.neg_rate, 3)
            opt.zero_grad()
            loss = lp_loss(model, torch.as_tensor(batch), torch.as_tensor(neg), config.margin)
            if not torch.isfinite(loss):
                raise DivergenceError(f"link prediction loss is {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
        row = {"epoch": epoch, "loss": total}
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            s = score_array(model, valid_idx)
            tau = select_thresholds(s, valid_labels, valid_rel)
            pred = predict(s, valid_rel, tau)
            tp = int((pred & valid_labels).sum())
            fp = int((pred & ~valid_labels).sum())
            fn = int((~pred & valid_labels).sum())
            f1 = f1_from_counts(tp, fp, fn)[2]
            row["valid_f1"] = f1
            if f1 > best[0]:
                best = (f1, epoch, copy.deepcopy(model.state_dict()), tau)
        trace.append(row)
    model.load_state_dict(best[2])
    log.info("link prediction: best validation F1 %.4f at epoch %d", best[0], best[1])
    return LPResult(model, best[3], best[1], best[0], trace)


def write_lp_trace(trace: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "valid_f1"])
        for row in trace:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["valid_f1"]) if "valid_f1" in row else ""])


def save_lp_checkpoint(result: LPResult, vocab: Vocabulary, config: LPConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "variant": result.model.variant,
            "state": result.model.state_dict(),
            "tau": result.tau,
            "config": asdict(config),
            "best_epoch": result.best_epoch,
            "vertices": [str(v) for v in vocab.vertices],
        },
        path,
    )


def load_lp_checkpoint(path: str | Path, vocab: Vocabulary) -> tuple[LinkPredModel, Thresholds]:
    state = torch.load(path, weights_only=False)
    if state["vertices"] != [str(v) for v in vocab.vertices]:
        raise ValueError("checkpoint vertex set does not match the graphs")
    cfg = state["config"]
    model = LinkPredModel(len(vocab), cfg["dim"], state["variant"], cfg["seed"])
    model.load_state_dict(state["state"])
    return model, state["tau"]
