"""The anomaly-scorer family and per-domain adaptation hooks.

Every detector follows the same contract: fit on normal data only, then
`clip_score(clip, section=..., domain=...)` returns a finite scalar that is
larger for more anomalous clips. Estimators are sklearn-style: constructor
arguments are stored verbatim, fitted state lives in trailing-underscore
attributes, and scoring before fitting raises NotFittedError.

Detectors:
  - AutoencoderDetector: mean squared reconstruction error of frame stacks.
  - SectionClassifierDetector: softmax classifier over sections; the score
    averages log((1-p)/p) of the correct section's probability over the
    clip's context windows. Also exposes penultimate-layer embeddings.
  - GaussianMixtureDetector: mean per-frame negative log-likelihood under a
    diagonal-covariance mixture fitted by EM.
  - NearestNeighborDetector: mean distance to the k nearest stored normal
    vectors, with one bank per domain.
  - SerialHybridDetector: per-domain inlier model fitted on the frozen
    classifier's embeddings.
  - EnsembleDetector: mean of z-scored member scores, calibrated on
    source-domain training normals.
"""

from __future__ import annotations

import json
import shutil
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import AudioClip, DatasetIndex, load_clip
from .features import StftParams, ae_frames, frame_windows, log_mel
from .nnet import DenseNet, TrainConfig, load_model, save_model, train

DETECTOR_KINDS = ("ae", "oe", "gmm", "knn", "serial", "ensemble")

BLOCKS_MAGIC = b"ASDB"
BLOCKS_VERSION = 1
_BLOCKS_HEADER = struct.Struct("<4sII")  # magic, version, block count

SCORER_FILE = "scorer.json"
SCORER_FORMAT_VERSION = 1


class InsufficientSectionsError(ValueError):
    """Section-classification scoring needs at least two sections."""


# ---------------------------------------------------------------------------
# Feature plumbing shared by all detectors


@dataclass(frozen=True)
class FeaturePipeline:
    """Clip-to-feature recipes used by the detectors."""

    stft: StftParams = StftParams()
    n_mels: int = 128
    f_min: float = 50.0
    f_max: float = 8000.0
    context_frames: int = 64
    context_shift: int = 8
    ae_context: int = 5

    def logmel(self, clip: AudioClip):
        return log_mel(
            clip, self.stft, n_mels=self.n_mels, f_min=self.f_min, f_max=self.f_max
        )

    def frames(self, clip: AudioClip) -> np.ndarray:
        """Raw log-mel frames, one vector per STFT frame."""
        return self.logmel(clip).values

    def windows(self, clip: AudioClip) -> np.ndarray:
        """Flattened context images for classifier-based scoring."""
        return frame_windows(self.logmel(clip), self.context_frames, self.context_shift).images

    def ae_vectors(self, clip: AudioClip) -> np.ndarray:
        """Stride-1 stacks of consecutive frames for reconstruction scoring."""
        return ae_frames(self.logmel(clip), self.ae_context)

    def to_config(self) -> dict:
        return {
            "frame_length": self.stft.frame_length,
            "hop": self.stft.hop,
            "window": self.stft.window,
            "n_mels": self.n_mels,
            "f_min": self.f_min,
            "f_max": self.f_max,
            "context_frames": self.context_frames,
            "context_shift": self.context_shift,
            "ae_context": self.ae_context,
        }

    @classmethod
    def from_config(cls, config: dict) -> "FeaturePipeline":
        return cls(
            stft=StftParams(config["frame_length"], config["hop"], config["window"]),
            n_mels=config["n_mels"],
            f_min=config["f_min"],
            f_max=config["f_max"],
            context_frames=config["context_frames"],
            context_shift=config["context_shift"],
            ae_context=config["ae_context"],
        )


def _as_matrix(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


class AnomalyDetector(BaseEstimator):
    """Fit-on-normal / score-clip contract; higher scores mean more anomalous."""

    kind = "base"

    def clip_score(self, clip: AudioClip, *, section=None, domain=None) -> float:
        raise NotImplementedError

    def _require_fitted(self, attr: str) -> None:
        if not hasattr(self, attr):
            raise NotFittedError(
                f"this {type(self).__name__} is not fitted yet; call fit() first"
            )

    @property
    def _pipe(self) -> FeaturePipeline:
        pipeline = getattr(self, "pipeline", None)
        return pipeline if pipeline is not None else _DEFAULT_PIPELINE


_DEFAULT_PIPELINE = FeaturePipeline()


# ---------------------------------------------------------------------------
# Autoencoder


class AutoencoderDetector(AnomalyDetector):
    """Bottlenecked reconstruction of frame stacks; score is the mean squared error."""

    kind = "ae"

    def __init__(
        self,
        hidden_units=(128, 128, 128, 128),
        bottleneck=8,
        epochs=100,
        learning_rate=1e-3,
        batch_size=512,
        seed=0,
        pipeline=None,
    ):
        self.hidden_units = hidden_units
        self.bottleneck = bottleneck
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.pipeline = pipeline

    def fit(self, X, y=None):
        """Train on frame stacks from normal clips only."""
        X = _as_matrix(X)
        hidden = list(self.hidden_units)
        dims = [X.shape[1], *hidden, self.bottleneck, *hidden[::-1], X.shape[1]]
        activations = ["relu"] * (len(dims) - 2) + ["linear"]
        self.input_mean_ = X.mean(axis=0)
        net = DenseNet.initialize(dims, activations, seed=self.seed)
        config = TrainConfig(self.epochs, self.batch_size, self.learning_rate, seed=self.seed)
        centered = X - self.input_mean_
        self.net_, self.loss_curve_ = train(net, centered, centered, config, loss="mse")
        return self

    def score_samples(self, X) -> np.ndarray:
        """Per-row reconstruction error (mean over dimensions)."""
        self._require_fitted("net_")
        X = _as_matrix(X) - self.input_mean_
        recon = self.net_.predict(X)
        return np.mean((recon - X) ** 2, axis=1)

    def clip_score(self, clip, *, section=None, domain=None) -> float:
        return float(np.mean(self.score_samples(self._pipe.ae_vectors(clip))))


# ---------------------------------------------------------------------------
# Section classifier (outlier-exposure style scoring)


def windowed_logit_score(probabilities, clamp: float = 1e-12) -> float:
    """Mean over windows of log((1 - p) / p), p clamped to [clamp, 1 - clamp]."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), clamp, 1.0 - clamp)
    if p.size == 0:
        raise ValueError("need at least one probability")
    return float(np.mean(np.log((1.0 - p) / p)))


class SectionClassifierDetector(AnomalyDetector):
    """Softmax classifier over sections, scored by the correct-section logit.

    An anomalous clip makes the classifier less sure of the clip's own
    section, so the averaged negative logit rises. Degrades to chance when
    sections are indistinguishable; see EnsembleDetector for the usual
    mitigation.
    """

    kind = "oe"

    def __init__(
        self,
        hidden_units=(640, 128),
        epochs=20,
        learning_rate=1e-5,
        batch_size=32,
        seed=0,
        probability_clamp=1e-12,
        pipeline=None,
    ):
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.probability_clamp = probability_clamp
        self.pipeline = pipeline

    def fit(self, X, y):
        """Train on context windows X labeled with their clip's section y."""
        X = _as_matrix(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one section label per window")
        classes = np.unique(y)
        if classes.size < 2:
            raise InsufficientSectionsError(
                f"section classification needs >= 2 sections, got {classes.size}; "
                "use an inlier-model detector for single-section machines"
            )
        self.classes_ = classes
        labels = np.searchsorted(classes, y)
        self.input_mean_ = X.mean(axis=0)
        dims = [X.shape[1], *self.hidden_units, classes.size]
        activations = ["relu"] * len(self.hidden_units) + ["softmax"]
        net = DenseNet.initialize(dims, activations, seed=self.seed)
        config = TrainConfig(self.epochs, self.batch_size, self.learning_rate, seed=self.seed)
        self.net_, self.loss_curve_ = train(net, X - self.input_mean_, labels, config, loss="cross_entropy")
        return self

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted("net_")
        return self.net_.predict(_as_matrix(X) - self.input_mean_)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def embed(self, X) -> np.ndarray:
        """Penultimate-layer activations, one row per window."""
        self._require_fitted("net_")
        return self.net_.forward(_as_matrix(X) - self.input_mean_)[-2]

    def score_windows(self, X, section) -> float:
        """Averaged negative logit of the correct section over the windows."""
        self._require_fitted("net_")
        matches = np.flatnonzero(self.classes_ == section)
        if matches.size == 0:
            raise ValueError(f"unknown section {section!r}; trained on {list(self.classes_)}")
        probs = self.predict_proba(X)[:, matches[0]]
        return windowed_logit_score(probs, self.probability_clamp)

    def clip_score(self, clip, *, section=None, domain=None) -> float:
        if section is None:
            raise ValueError("section-classifier scoring needs the clip's section")
        return self.score_windows(self._pipe.windows(clip), section)


# ---------------------------------------------------------------------------
# Diagonal-covariance Gaussian mixture (EM)


class DiagonalGmm:
    """Gaussian mixture with diagonal covariances, fitted by EM.

    Seeding picks spread-out initial means (distance-squared sampling);
    iteration stops when the mean log-likelihood gain drops below `tol` or
    after `max_iter` rounds. The per-iteration mean log-likelihood path is
    kept in `ll_path_`.
    """

    def __init__(self, n_components, max_iter=200, tol=1e-6, var_floor=1e-6, seed=0):
        self.n_components = int(n_components)
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.seed = seed

    def _init_means(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = X.shape[0]
        centers = [X[rng.integers(n)]]
        d2 = np.sum((X - centers[0]) ** 2, axis=1)
        for _ in range(1, self.n_components):
            total = d2.sum()
            if total <= 0.0:
                idx = int(rng.integers(n))
            else:
                idx = int(rng.choice(n, p=d2 / total))
            centers.append(X[idx])
            d2 = np.minimum(d2, np.sum((X - centers[-1]) ** 2, axis=1))
        return np.stack(centers)

    def _log_prob(self, X: np.ndarray) -> np.ndarray:
        # (n, k) joint log density log w_k + log N(x; mu_k, diag var_k);
        # the quadratic term is expanded to avoid materializing (n, k, d)
        inv_var = 1.0 / self.variances_
        quad = (X**2) @ inv_var.T - 2.0 * X @ (self.means_ * inv_var).T + np.sum(
            self.means_**2 * inv_var, axis=1
        )
        log_norm = -0.5 * (
            X.shape[1] * np.log(2.0 * np.pi) + np.sum(np.log(self.variances_), axis=1)
        )
        return np.log(self.weights_) + log_norm - 0.5 * quad

    def fit(self, X) -> "DiagonalGmm":
        X = _as_matrix(X)
        n, d = X.shape
        if n < self.n_components:
            raise ValueError(f"need at least {self.n_components} samples, got {n}")
        rng = np.random.default_rng(self.seed)
        self.means_ = self._init_means(X, rng)
        global_var = np.maximum(X.var(axis=0), self.var_floor)
        self.variances_ = np.tile(global_var, (self.n_components, 1))
        self.weights_ = np.full(self.n_components, 1.0 / self.n_components)

        ll_path = []
        prev_ll = -np.inf
        for _ in range(self.max_iter):
            joint = self._log_prob(X)
            peak = joint.max(axis=1, keepdims=True)
            log_total = peak[:, 0] + np.log(np.sum(np.exp(joint - peak), axis=1))
            ll = float(np.mean(log_total))
            ll_path.append(ll)
            if ll - prev_ll < self.tol and len(ll_path) > 1:
                break
            prev_ll = ll

            resp = np.exp(joint - log_total[:, None])
            mass = resp.sum(axis=0)
            if np.any(mass < 1e-12):
                warnings.warn("a mixture component collapsed to zero mass")
                mass = np.maximum(mass, 1e-12)
            self.weights_ = mass / mass.sum()
            self.means_ = (resp.T @ X) / mass[:, None]
            second_moment = (resp.T @ (X**2)) / mass[:, None]
            variances = second_moment - self.means_**2
            if np.any(variances < self.var_floor):
                warnings.warn(
                    f"variance floor {self.var_floor} applied to a near-singular component"
                )
            self.variances_ = np.maximum(variances, self.var_floor)
        self.ll_path_ = np.asarray(ll_path)
        self.n_iter_ = len(ll_path)
        return self

    def per_sample_nll(self, X) -> np.ndarray:
        """Negative log-likelihood of each row under the fitted mixture."""
        if not hasattr(self, "means_"):
            raise NotFittedError("DiagonalGmm is not fitted yet")
        X = _as_matrix(X)
        joint = self._log_prob(X)
        peak = joint.max(axis=1)
        return -(peak + np.log(np.sum(np.exp(joint - peak[:, None]), axis=1)))


class GaussianMixtureDetector(AnomalyDetector):
    """Inlier model on raw log-mel frames; score is the mean per-frame NLL."""

    kind = "gmm"

    def __init__(self, n_components=8, max_iter=200, tol=1e-6, var_floor=1e-6, seed=0, pipeline=None):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.seed = seed
        self.pipeline = pipeline

    def fit(self, X, y=None):
        X = _as_matrix(X)
        self.model_ = DiagonalGmm(
            self.n_components, self.max_iter, self.tol, self.var_floor, self.seed
        ).fit(X)
        return self

    def score_samples(self, X) -> np.ndarray:
        self._require_fitted("model_")
        return self.model_.per_sample_nll(X)

    def clip_score(self, clip, *, section=None, domain=None) -> float:
        return float(np.mean(self.score_samples(self._pipe.frames(clip))))


# ---------------------------------------------------------------------------
# Nearest-neighbor banks


def k_nearest_distances(bank: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Euclidean distances to the k nearest bank rows, sorted, per query row."""
    bank = _as_matrix(bank, "bank")
    queries = _as_matrix(queries, "queries")
    if not 1 <= k <= bank.shape[0]:
        raise ValueError(f"k must be in [1, {bank.shape[0]}], got {k}")
    d2 = (
        np.sum(queries**2, axis=1)[:, None]
        + np.sum(bank**2, axis=1)[None, :]
        - 2.0 * queries @ bank.T
    )
    np.maximum(d2, 0.0, out=d2)
    if k < bank.shape[0]:
        part = np.partition(d2, k - 1, axis=1)[:, :k]
    else:
        part = d2
    return np.sqrt(np.sort(part, axis=1))


class NearestNeighborDetector(AnomalyDetector):
    """Distance to stored normal vectors, with one memory bank per domain.

    Scoring with a domain hint searches that domain's bank; without a hint
    (or for a domain with no bank) the score is the minimum over banks.
    """

    kind = "knn"

    def __init__(self, k=1, pipeline=None):
        self.k = k
        self.pipeline = pipeline

    def fit(self, X, domains=None):
        """Store X rows as banks, grouped by the per-row domain labels."""
        X = _as_matrix(X)
        if domains is None:
            banks = {"source": X}
        else:
            domains = np.asarray(domains)
            if domains.shape != (X.shape[0],):
                raise ValueError("domains must hold one label per row")
            banks = {str(d): X[domains == d] for d in np.unique(domains)}
        for name, bank in banks.items():
            if bank.shape[0] < self.k:
                raise ValueError(
                    f"bank {name!r} holds {bank.shape[0]} vectors, fewer than k={self.k}"
                )
        self.banks_ = banks
        return self

    def _bank_score(self, bank: np.ndarray, queries: np.ndarray) -> float:
        return float(np.mean(k_nearest_distances(bank, queries, self.k)))

    def score_vectors(self, queries, domain=None) -> float:
        self._require_fitted("banks_")
        queries = _as_matrix(queries, "queries")
        if domain is not None and domain in self.banks_:
            return self._bank_score(self.banks_[domain], queries)
        return min(self._bank_score(bank, queries) for bank in self.banks_.values())

    def clip_score(self, clip, *, section=None, domain=None) -> float:
        return self.score_vectors(self._pipe.frames(clip), domain)


# ---------------------------------------------------------------------------
# Serial hybrid: inlier model on frozen classifier embeddings


class SerialHybridDetector(AnomalyDetector):
    """Per-domain inlier model on embeddings from a frozen section classifier.

    Fitting never touches the classifier's parameters; only the inlier
    models adapt to each domain. A mixture inlier model falls back to a
    nearest-neighbor bank (with a warning) when a domain has fewer
    embedding vectors than mixture components.
    """

    kind = "serial"

    def __init__(self, classifier=None, im_kind="gmm", n_components=2, k=1, seed=0, pipeline=None):
        self.classifier = classifier
        self.im_kind = im_kind
        self.n_components = n_components
        self.k = k
        self.seed = seed
        self.pipeline = pipeline

    def fit(self, windows_by_domain: Mapping[str, np.ndarray], y=None):
        """Fit one inlier model per domain on embeddings of normal windows."""
        if self.classifier is None:
            raise ValueError("SerialHybridDetector needs a fitted SectionClassifierDetector")
        self.classifier._require_fitted("net_")
        if self.im_kind not in ("gmm", "knn"):
            raise ValueError(f"im_kind must be 'gmm' or 'knn', got {self.im_kind!r}")
        if not windows_by_domain:
            raise ValueError("windows_by_domain is empty")
        models: dict[str, tuple[str, object]] = {}
        for domain, windows in windows_by_domain.items():
            emb = self.classifier.embed(windows)
            if self.im_kind == "gmm" and emb.shape[0] >= self.n_components:
                models[domain] = (
                    "gmm",
                    DiagonalGmm(self.n_components, seed=self.seed).fit(emb),
                )
            else:
                if self.im_kind == "gmm":
                    warnings.warn(
                        f"domain {domain!r} has {emb.shape[0]} embeddings, fewer than "
                        f"{self.n_components} mixture components; falling back to kNN"
                    )
                if emb.shape[0] < self.k:
                    raise ValueError(f"domain {domain!r} has fewer embeddings than k={self.k}")
                models[domain] = ("knn", emb)
        self.ims_ = models
        return self

    def _im_score(self, model: tuple[str, object], emb: np.ndarray) -> float:
        kind, payload = model
        if kind == "gmm":
            return float(np.mean(payload.per_sample_nll(emb)))
        return float(np.mean(k_nearest_distances(payload, emb, self.k)))

    def score_windows(self, windows, domain=None) -> float:
        self._require_fitted("ims_")
        emb = self.classifier.embed(windows)
        if domain is not None and domain in self.ims_:
            return self._im_score(self.ims_[domain], emb)
        return min(self._im_score(model, emb) for model in self.ims_.values())

    def clip_score(self, clip, *, section=None, domain=None) -> float:
        return self.score_windows(self._pipe.windows(clip), domain)


# ---------------------------------------------------------------------------
# Parallel hybrid: calibrated score ensemble


class EnsembleDetector(AnomalyDetector):
    """Mean of z-scored member scores.

    Calibration statistics (mean and standard deviation per member) come
    from the members' scores on source-domain training normals. Members
    whose scores do not vary are dropped with a warning; ranking is
    invariant to any positive affine rescaling of a member's scores.
    """

    kind = "ensemble"

    def __init__(self, members=None):
        self.members = members

    def fit(self, member_scores, y=None):
        """Calibrate from a (clips x members) matrix of training-normal scores."""
        if not self.members:
            raise ValueError("EnsembleDetector needs at least one member")
        scores = _as_matrix(member_scores, "member_scores")
        if scores.shape[1] != len(self.members):
            raise ValueError(
                f"member_scores has {scores.shape[1]} columns for {len(self.members)} members"
            )
        means = scores.mean(axis=0)
        stds = scores.std(axis=0)
        keep = stds > 0.0
        if not np.all(keep):
            dropped = [self.members[i].kind for i in np.flatnonzero(~keep)]
            warnings.warn(f"dropping ensemble members with constant scores: {dropped}")
        if not np.any(keep):
            raise ValueError("all ensemble members were dropped (constant scores)")
        self.active_ = np.flatnonzero(keep)
        self.means_ = means[keep]
        self.stds_ = stds[keep]
        return self

    def member_scores(self, clip, *, section=None, domain=None) -> np.ndarray:
        """Raw member scores for one clip, active members only."""
        self._require_fitted("active_")
        return np.array(
            [
                self.members[i].clip_score(clip, section=section, domain=domain)
                for i in self.active_
            ]
        )

    def clip_score(self, clip, *, section=None, domain=None) -> float:
        raw = self.member_scores(clip, section=section, domain=domain)
        return float(np.mean((raw - self.means_) / self.stds_))


# ---------------------------------------------------------------------------
# Corpus-level orchestration


@dataclass
class TrainOptions:
    """Knobs for fitting a detector from a scanned corpus."""

    seed: int = 0
    adapt: bool = True
    pool_target: bool = False
    members: tuple[str, ...] = ("oe", "gmm")
    knn_k: int = 1
    knn_frame_stride: int = 4
    gmm_components: int = 8
    serial_im: str = "gmm"
    serial_components: int = 2
    ae_epochs: int | None = None
    oe_epochs: int | None = None
    pipeline: FeaturePipeline | None = None


class _ClipCache:
    """Per-run cache of log-mel spectrograms keyed by relative path."""

    def __init__(self, index: DatasetIndex, pipeline: FeaturePipeline):
        self.index = index
        self.pipeline = pipeline
        self._cache: dict[str, object] = {}

    def logmel(self, relpath: str):
        if relpath not in self._cache:
            clip = load_clip(self.index.path(relpath))
            self._cache[relpath] = self.pipeline.logmel(clip)
        return self._cache[relpath]

    def frames(self, relpath: str) -> np.ndarray:
        return self.logmel(relpath).values

    def windows(self, relpath: str) -> np.ndarray:
        return frame_windows(
            self.logmel(relpath), self.pipeline.context_frames, self.pipeline.context_shift
        ).images

    def ae_vectors(self, relpath: str) -> np.ndarray:
        return ae_frames(self.logmel(relpath), self.pipeline.ae_context)


def _train_entries(index, machine):
    """Training-normal entries per domain."""
    source = index.clips(machine_type=machine, split="train", domain="source", condition="normal")
    target = index.clips(machine_type=machine, split="train", domain="target", condition="normal")
    if not source:
        raise ValueError(f"no source-domain training normals for machine {machine!r}")
    return {"source": source, "target": target}


def _pooled_entries(entries_by_domain, options):
    pooled = list(entries_by_domain["source"])
    if options.pool_target:
        pooled += entries_by_domain["target"]
    return pooled


def fit_detector(
    kind: str,
    index: DatasetIndex,
    machine: str,
    options: TrainOptions | None = None,
    cache: _ClipCache | None = None,
) -> AnomalyDetector:
    """Fit one detector for one machine type from a scanned corpus.

    Training uses normal clips only. Per-domain adaptation (kNN banks,
    serial inlier models) is controlled by options.adapt; options.pool_target
    additionally pools the few target-domain training clips into the
    single-model detectors.
    """
    options = options or TrainOptions()
    if kind not in DETECTOR_KINDS:
        raise ValueError(f"unknown detector kind {kind!r}; expected one of {DETECTOR_KINDS}")
    pipeline = options.pipeline or _DEFAULT_PIPELINE
    cache = cache or _ClipCache(index, pipeline)
    entries = _train_entries(index, machine)

    if kind == "ae":
        pooled = _pooled_entries(entries, options)
        X = np.vstack([cache.ae_vectors(rel) for rel, _ in pooled])
        detector = AutoencoderDetector(seed=options.seed, pipeline=pipeline)
        if options.ae_epochs is not None:
            detector.epochs = options.ae_epochs
        return detector.fit(X)

    if kind == "oe":
        pooled = _pooled_entries(entries, options)
        blocks, labels = [], []
        for rel, meta in pooled:
            windows = cache.windows(rel)
            blocks.append(windows)
            labels.append(np.full(windows.shape[0], meta.section))
        detector = SectionClassifierDetector(seed=options.seed, pipeline=pipeline)
        if options.oe_epochs is not None:
            detector.epochs = options.oe_epochs
        return detector.fit(np.vstack(blocks), np.concatenate(labels))

    if kind == "gmm":
        pooled = _pooled_entries(entries, options)
        X = np.vstack([cache.frames(rel) for rel, _ in pooled])
        return GaussianMixtureDetector(
            n_components=options.gmm_components, seed=options.seed, pipeline=pipeline
        ).fit(X)

    if kind == "knn":
        stride = max(1, options.knn_frame_stride)
        vectors, domains = [], []
        for domain, domain_entries in entries.items():
            if not options.adapt and domain == "target" and not options.pool_target:
                continue
            for rel, _ in domain_entries:
                frames = cache.frames(rel)[::stride]
                vectors.append(frames)
                domains.append(np.full(frames.shape[0], domain if options.adapt else "source"))
        return NearestNeighborDetector(k=options.knn_k, pipeline=pipeline).fit(
            np.vstack(vectors), np.concatenate(domains)
        )

    if kind == "serial":
        classifier = fit_detector("oe", index, machine, options, cache)
        windows_by_domain = {}
        for domain, domain_entries in entries.items():
            if not options.adapt and domain == "target":
                continue
            if not domain_entries:
                continue
            windows_by_domain[domain] = np.vstack(
                [cache.windows(rel) for rel, _ in domain_entries]
            )
        return SerialHybridDetector(
            classifier=classifier,
            im_kind=options.serial_im,
            n_components=options.serial_components,
            k=options.knn_k,
            seed=options.seed,
            pipeline=pipeline,
        ).fit(windows_by_domain)

    # ensemble
    members = [fit_detector(m, index, machine, options, cache) for m in options.members]
    calibration_entries = entries["source"]
    rows = []
    for rel, meta in calibration_entries:
        clip = load_clip(index.path(rel))
        rows.append(
            [m.clip_score(clip, section=meta.section, domain="source") for m in members]
        )
    return EnsembleDetector(members=members).fit(np.asarray(rows))


def score_dataset(detector: AnomalyDetector, index: DatasetIndex, machine: str, split="test"):
    """Score every clip of one machine's split; returns metrics.ScoreRecord rows."""
    from .metrics import ScoreRecord

    records = []
    for relpath, meta in sorted(index.clips(machine_type=machine, split=split)):
        clip = load_clip(index.path(relpath))
        score = detector.clip_score(clip, section=meta.section, domain=meta.domain)
        if not np.isfinite(score):
            raise ValueError(f"detector produced a non-finite score for {relpath}")
        records.append(ScoreRecord(meta, float(score)))
    return records


# ---------------------------------------------------------------------------
# Persistence: JSON sidecar + binary blocks (+ nnet model files)


def write_blocks(path, blocks: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays as a single binary container."""
    with open(path, "wb") as fh:
        fh.write(_BLOCKS_HEADER.pack(BLOCKS_MAGIC, BLOCKS_VERSION, len(blocks)))
        for name, array in blocks.items():
            array = np.asarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            fh.write(np.ascontiguousarray(array).tobytes())


def read_blocks(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic, version, count = _BLOCKS_HEADER.unpack(fh.read(_BLOCKS_HEADER.size))
        if magic != BLOCKS_MAGIC or version != BLOCKS_VERSION:
            raise ValueError(f"{path}: bad block container header")
        blocks = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n_items * 8), dtype="<f8")
            blocks[name] = data.reshape(shape).copy()
    return blocks


def _scorer_meta(detector, payload: dict) -> dict:
    return {
        "format_version": SCORER_FORMAT_VERSION,
        "kind": detector.kind,
        "pipeline": detector._pipe.to_config(),
        **payload,
    }


def _write_scorer_json(directory: Path, meta: dict) -> None:
    (directory / SCORER_FILE).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def save_detector(detector: AnomalyDetector, directory) -> Path:
    """Persist a fitted detector under a directory; overwrites prior content."""
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)

    if detector.kind == "ae":
        detector._require_fitted("net_")
        save_model(detector.net_, directory / "net.bin", {"loss_curve": detector.loss_curve_})
        write_blocks(directory / "payload.bin", {"input_mean": detector.input_mean_})
        _write_scorer_json(
            directory,
            _scorer_meta(
                detector,
                {
                    "hidden_units": list(detector.hidden_units),
                    "bottleneck": detector.bottleneck,
                    "epochs": detector.epochs,
                    "learning_rate": detector.learning_rate,
                    "batch_size": detector.batch_size,
                    "seed": detector.seed,
                },
            ),
        )
    elif detector.kind == "oe":
        detector._require_fitted("net_")
        save_model(detector.net_, directory / "net.bin", {"loss_curve": detector.loss_curve_})
        write_blocks(directory / "payload.bin", {"input_mean": detector.input_mean_})
        _write_scorer_json(
            directory,
            _scorer_meta(
                detector,
                {
                    "sections": [int(c) for c in detector.classes_],
                    "hidden_units": list(detector.hidden_units),
                    "epochs": detector.epochs,
                    "learning_rate": detector.learning_rate,
                    "batch_size": detector.batch_size,
                    "seed": detector.seed,
                    "probability_clamp": detector.probability_clamp,
                },
            ),
        )
    elif detector.kind == "gmm":
        detector._require_fitted("model_")
        model = detector.model_
        write_blocks(
            directory / "payload.bin",
            {"weights": model.weights_, "means": model.means_, "variances": model.variances_},
        )
        _write_scorer_json(
            directory,
            _scorer_meta(
                detector,
                {
                    "n_components": detector.n_components,
                    "max_iter": detector.max_iter,
                    "tol": detector.tol,
                    "var_floor": detector.var_floor,
                    "seed": detector.seed,
                },
            ),
        )
    elif detector.kind == "knn":
        detector._require_fitted("banks_")
        write_blocks(
            directory / "payload.bin",
            {f"bank_{domain}": bank for domain, bank in sorted(detector.banks_.items())},
        )
        _write_scorer_json(
            directory,
            _scorer_meta(detector, {"k": detector.k, "domains": sorted(detector.banks_)}),
        )
    elif detector.kind == "serial":
        detector._require_fitted("ims_")
        save_detector(detector.classifier, directory / "classifier")
        blocks, im_kinds = {}, {}
        for domain, (im_kind, payload) in sorted(detector.ims_.items()):
            im_kinds[domain] = im_kind
            if im_kind == "gmm":
                blocks[f"{domain}_weights"] = payload.weights_
                blocks[f"{domain}_means"] = payload.means_
                blocks[f"{domain}_variances"] = payload.variances_
            else:
                blocks[f"{domain}_bank"] = payload
        write_blocks(directory / "payload.bin", blocks)
        _write_scorer_json(
            directory,
            _scorer_meta(
                detector,
                {
                    "im_kind": detector.im_kind,
                    "im_kinds_by_domain": im_kinds,
                    "n_components": detector.n_components,
                    "k": detector.k,
                    "seed": detector.seed,
                },
            ),
        )
    elif detector.kind == "ensemble":
        detector._require_fitted("active_")
        member_dirs = []
        for slot, member_index in enumerate(detector.active_):
            member = detector.members[member_index]
            member_dir = f"member_{slot:02d}_{member.kind}"
            save_detector(member, directory / member_dir)
            member_dirs.append(member_dir)
        _write_scorer_json(
            directory,
            _scorer_meta(
                detector,
                {
                    "members": member_dirs,
                    "calibration_means": [float(v) for v in detector.means_],
                    "calibration_stds": [float(v) for v in detector.stds_],
                },
            ),
        )
    else:
        raise ValueError(f"cannot persist detector kind {detector.kind!r}")
    return directory


def load_detector(directory) -> AnomalyDetector:
    """Load a detector saved by save_detector."""
    directory = Path(directory)
    meta_path = directory / SCORER_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"no scorer found at {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != SCORER_FORMAT_VERSION:
        raise ValueError(f"{meta_path}: unsupported scorer format {meta.get('format_version')}")
    pipeline = FeaturePipeline.from_config(meta["pipeline"])
    kind = meta["kind"]

    if kind == "ae":
        detector = AutoencoderDetector(
            hidden_units=tuple(meta["hidden_units"]),
            bottleneck=meta["bottleneck"],
            epochs=meta["epochs"],
            learning_rate=meta["learning_rate"],
            batch_size=meta["batch_size"],
            seed=meta["seed"],
            pipeline=pipeline,
        )
        detector.net_, training = load_model(directory / "net.bin")
        detector.loss_curve_ = training.get("loss_curve", [])
        detector.input_mean_ = read_blocks(directory / "payload.bin")["input_mean"]
        return detector
    if kind == "oe":
        detector = SectionClassifierDetector(
            hidden_units=tuple(meta["hidden_units"]),
            epochs=meta["epochs"],
            learning_rate=meta["learning_rate"],
            batch_size=meta["batch_size"],
            seed=meta["seed"],
            probability_clamp=meta["probability_clamp"],
            pipeline=pipeline,
        )
        detector.net_, training = load_model(directory / "net.bin")
        detector.loss_curve_ = training.get("loss_curve", [])
        detector.input_mean_ = read_blocks(directory / "payload.bin")["input_mean"]
        detector.classes_ = np.asarray(meta["sections"])
        return detector
    if kind == "gmm":
        detector = GaussianMixtureDetector(
            n_components=meta["n_components"],
            max_iter=meta["max_iter"],
            tol=meta["tol"],
            var_floor=meta["var_floor"],
            seed=meta["seed"],
            pipeline=pipeline,
        )
        blocks = read_blocks(directory / "payload.bin")
        model = DiagonalGmm(meta["n_components"], seed=meta["seed"])
        model.weights_ = blocks["weights"]
        model.means_ = blocks["means"]
        model.variances_ = blocks["variances"]
        detector.model_ = model
        return detector
    if kind == "knn":
        detector = NearestNeighborDetector(k=meta["k"], pipeline=pipeline)
        blocks = read_blocks(directory / "payload.bin")
        detector.banks_ = {
            name[len("bank_") :]: bank for name, bank in blocks.items()
        }
        return detector
    if kind == "serial":
        classifier = load_detector(directory / "classifier")
        detector = SerialHybridDetector(
            classifier=classifier,
            im_kind=meta["im_kind"],
            n_components=meta["n_components"],
            k=meta["k"],
            seed=meta["seed"],
            pipeline=pipeline,
        )
        blocks = read_blocks(directory / "payload.bin")
        ims: dict[str, tuple[str, object]] = {}
        for domain, im_kind in meta["im_kinds_by_domain"].items():
            if im_kind == "gmm":
                model = DiagonalGmm(meta["n_components"], seed=meta["seed"])
                model.weights_ = blocks[f"{domain}_weights"]
                model.means_ = blocks[f"{domain}_means"]
                model.variances_ = blocks[f"{domain}_variances"]
                ims[domain] = ("gmm", model)
            else:
                ims[domain] = ("knn", blocks[f"{domain}_bank"])
        detector.ims_ = ims
        return detector
    if kind == "ensemble":
        members = [load_detector(directory / member_dir) for member_dir in meta["members"]]
        detector = EnsembleDetector(members=members)
        detector.active_ = np.arange(len(members))
        detector.means_ = np.asarray(meta["calibration_means"])
        detector.stds_ = np.asarray(meta["calibration_stds"])
        return detector
    raise ValueError(f"unknown persisted detector kind {kind!r}")
