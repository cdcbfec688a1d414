"""Self-supervised training of the decoder from a handful of unlabelled scenes."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import (DEFAULT_ATTENTION_EPSILON, DEFAULT_HEAD_DIM, DEFAULT_HEADS, DecoderParams,
                        FieldContext, init_params)
from .keypoints import (DEFAULT_KNN, DEFAULT_MAX_KEYPOINTS, EmptyKeypointsError, KeypointCorrespondence,
                        select_keypoints)
from .scene import FeaturedCloud, stack_dim

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    tau: float = 0.1
    learning_rate: float = 1e-3
    iterations: int = 100
    k_nn: int = DEFAULT_KNN
    seed: int = 0
    mode: str = "exclusive"          # or "standard"
    similarity: str = "cosine"
    max_keypoints: int = DEFAULT_MAX_KEYPOINTS
    heads: int = DEFAULT_HEADS
    head_dim: int = DEFAULT_HEAD_DIM
    layers: int = 1
    epsilon: float = DEFAULT_ATTENTION_EPSILON
    query_init_scale: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode not in ("exclusive", "standard"):
            raise ValueError(f"unknown InfoNCE mode {self.mode!r}")
        if self.similarity != "cosine":
            raise ValueError("only cosine similarity is supported")


@dataclass
class TrainingResult:
    params: DecoderParams
    losses: list[float]
    keypoints: KeypointCorrespondence
    trajectory: list[DecoderParams] = field(default_factory=list, repr=False)


def keypoint_features(params: DecoderParams, clouds: list[FeaturedCloud],
                      corr: KeypointCorrespondence) -> list[torch.Tensor]:
    out = []
    for i, cloud in enumerate(clouds):
        ctx = FieldContext(params, cloud)
        out.append(ctx.query(torch.from_numpy(cloud.points[corr.indices[:, i]])))
    return out


def _unit_rows(f: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(f, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity undefined for a zero-norm feature row")
    return f / norms


def infonce_loss(featsets, tau: float = 0.1, mode: str = "exclusive") -> torch.Tensor:
    """Sum over ordered scene pairs i != j of the per-keypoint InfoNCE terms.

    ``exclusive`` leaves the positive out of the denominator; ``standard`` keeps it.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mode not in ("exclusive", "standard"):
        raise ValueError(f"unknown InfoNCE mode {mode!r}")
    feats = [torch.as_tensor(f, dtype=torch.float64) for f in featsets]
    shapes = {tuple(f.shape) for f in feats}
    if len(shapes) != 1:
        raise ValueError(f"feature sets disagree in shape: {sorted(shapes)}")
    k = feats[0].shape[0]
    if k < 2:
        raise ValueError("InfoNCE needs at least two keypoints")
    units = [_unit_rows(f) for f in feats]
    eye = torch.eye(k, dtype=torch.bool)
    total = torch.zeros((), dtype=torch.float64)
    for i, a in enumerate(units):
        for j, b in enumerate(units):
            if i == j:
                continue
            s = (a @ b.T) / tau
            pos = torch.diagonal(s)
            denom = s.masked_fill(eye, float("-inf")) if mode == "exclusive" else s
            total = total + (torch.logsumexp(denom, 1) - pos).sum()
    return total


def train(clouds: list[FeaturedCloud], config: TrainingConfig | None = None,
          keep_trajectory: bool = False) -> TrainingResult:
    """Fit the decoder so that keypoint correspondences survive aggregation."""
    config = config or TrainingConfig()
    if len(clouds) < 2:
        raise ValueError("training needs at least two scenes")
    c = stack_dim(clouds)
    corr = select_keypoints(clouds, config.k_nn, config.seed, config.max_keypoints)
    if corr.count < 2:
        raise EmptyKeypointsError(f"only {corr.count} keypoint survived; InfoNCE needs two")
    log.info("training on %d scenes, %d keypoints", len(clouds), corr.count)

    params = init_params(c, config.heads, config.head_dim, config.seed, "zero-logit",
                         config.layers, config.epsilon, config.query_init_scale).requiring_grad()
    tensors = params.tensors()
    opt = torch.optim.Adam(tensors, lr=config.learning_rate)
    losses, trajectory = [], []
    for it in range(config.iterations):
        opt.zero_grad()
        loss = infonce_loss(keypoint_features(params, clouds, corr), config.tau, config.mode)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if keep_trajectory:
            trajectory.append(params.detached())
    return TrainingResult(params.detached(), losses, corr, trajectory)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def retrieval_accuracy(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of rows of ``a`` whose cosine-nearest row in ``b`` has the same index."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return float(np.mean(np.argmax(a @ b.T, axis=1) == np.arange(a.shape[0])))
