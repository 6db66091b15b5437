"""Binary detectors over feature vectors, plus the evaluation metric suite.

The main detector is a logistic regression trained by deterministic
full-batch gradient descent with backtracking. K-nearest-neighbours and
Gaussian naive Bayes serve as lightweight comparators. Two baselines score
samples through the network itself: a local-intrinsic-dimensionality
estimate per activation layer, and the Mahalanobis distance to
class-conditional Gaussians fitted on benign activations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .spectral import FeatureDescriptor

log = logging.getLogger(__name__)


@dataclass
class LabeledFeatureSet:
    """Feature rows with binary labels: 0 = benign, 1 = adversarial."""
    features: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be a 2D matrix, got {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (benign) or 1 (adversarial)")


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    descriptor: FeatureDescriptor | None = None


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def train_logreg(data: LabeledFeatureSet, l2_strength: float = 1e-4,
                 max_iter: int = 1000, tol: float = 1e-6,
                 descriptor: FeatureDescriptor | None = None) -> LogRegModel:
    """Full-batch gradient descent with Armijo backtracking; deterministic.

    Minimizes mean logistic loss + l2_strength/2 * ||w||^2 (bias excluded).
    Stops when the gradient norm drops below tol or after max_iter steps.
    """
    x, y = data.features, data.labels.astype(np.float64)
    n, d = x.shape
    if min((y == 0).sum(), (y == 1).sum()) < 2:
        raise ValueError("need at least 2 samples per class")

    theta = np.zeros(d + 1)  # bias last

    def loss_of(th):
        s = x @ th[:-1] + th[-1]
        # log(1 + exp(-s)) for y=1, log(1 + exp(s)) for y=0, stably
        per = np.logaddexp(0.0, np.where(y == 1.0, -s, s))
        return float(per.mean() + 0.5 * l2_strength * (th[:-1] @ th[:-1]))

    def grad_of(th):
        p = _sigmoid(x @ th[:-1] + th[-1])
        r = (p - y) / n
        g = np.empty(d + 1)
        g[:-1] = x.T @ r + l2_strength * th[:-1]
        g[-1] = r.sum()
        return g

    loss = loss_of(theta)
    if not np.isfinite(loss):
        raise RuntimeError("logistic loss is non-finite at initialization")
    step = 1.0
    for _ in range(max_iter):
        g = grad_of(theta)
        gnorm_sq = float(g @ g)
        if np.sqrt(gnorm_sq) < tol:
            break
        # Armijo backtracking from the last accepted step (doubled once)
        step = min(step * 2.0, 1e12)
        while True:
            candidate = theta - step * g
            new_loss = loss_of(candidate)
            if np.isfinite(new_loss) and new_loss <= loss - 1e-4 * step * gnorm_sq:
                break
            step *= 0.5
            if step < 1e-20:
                return LogRegModel(weights=theta[:-1].copy(), bias=float(theta[-1]),
                                   descriptor=descriptor)
        theta = candidate
        loss = new_loss
        if not np.isfinite(loss):
            raise RuntimeError("logistic loss became non-finite during training")
    return LogRegModel(weights=theta[:-1].copy(), bias=float(theta[-1]),
                       descriptor=descriptor)


def predict_score(lr_model: LogRegModel, features: np.ndarray):
    """sigmoid(w.x + b); accepts one vector or a matrix of rows."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    rows = features[None] if single else features
    if rows.shape[1] != lr_model.weights.shape[0]:
        raise ValueError(f"feature length {rows.shape[1]} != model dimension "
                         f"{lr_model.weights.shape[0]}")
    scores = _sigmoid(rows @ lr_model.weights + lr_model.bias)
    return float(scores[0]) if single else scores


# ---------------------------------------------------------------------------
# comparator classifiers
# ---------------------------------------------------------------------------

def knn_classify(train: LabeledFeatureSet, query: np.ndarray, k: int) -> int:
    """Majority vote over the k nearest training rows (Euclidean)."""
    if len(train.features) == 0:
        raise ValueError("empty training set")
    if k % 2 == 0:
        raise ValueError(f"k must be odd, got {k}")
    if k > len(train.features):
        raise ValueError(f"k={k} exceeds {len(train.features)} training samples")
    diff = train.features - np.asarray(query, dtype=np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    nearest = np.argsort(dist, kind="stable")[:k]
    votes = train.labels[nearest]
    return int((votes == 1).sum() > k // 2)


def gnb_classify(train: LabeledFeatureSet, query: np.ndarray) -> int:
    """Gaussian naive Bayes with a variance floor; ties go to label 0."""
    if len(train.features) == 0:
        raise ValueError("empty training set")
    x, y = train.features, train.labels
    query = np.asarray(query, dtype=np.float64)
    floor = 1e-9 * max(1.0, float(x.var(axis=0).max()))
    loglik = []
    for label in (0, 1):
        rows = x[y == label]
        if len(rows) == 0:
            raise ValueError(f"no training samples for class {label}")
        mu = rows.mean(axis=0)
        var = np.maximum(rows.var(axis=0), floor)
        ll = -0.5 * (np.log(2.0 * np.pi * var) + (query - mu) ** 2 / var).sum()
        loglik.append(ll + np.log(len(rows) / len(x)))
    return int(np.argmax(loglik))  # argmax tie -> first index -> label 0


# ---------------------------------------------------------------------------
# local intrinsic dimensionality
# ---------------------------------------------------------------------------

def lid_estimate(distances: np.ndarray, k: int) -> np.ndarray:
    """Maximum-likelihood LID from each row's distances to a reference batch.

    Uses the k smallest distances r_1..r_k per row: -k / sum log(r_i / r_k).
    Zero distances (duplicate points) are dropped with the count adjusted;
    rows whose neighbourhood is entirely zero-distance score 0.
    """
    n = distances.shape[0]
    smallest = np.sort(distances, axis=1)[:, :k]
    r_k = smallest[:, -1]
    out = np.zeros(n)
    for i in range(n):
        if r_k[i] <= 0.0:
            log.warning("lid_estimate: all %d nearest distances are zero", k)
            continue
        r = smallest[i]
        r = r[r > 0.0]
        s = np.log(r / r_k[i]).sum()
        if s < 0.0:
            out[i] = -len(r) / s
    return out


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def lid_scores(query_layers: list[np.ndarray], reference_layers: list[np.ndarray],
               batch_size: int = 100, k: int = 20, seed: int = 0,
               num_batches: int = 10) -> np.ndarray:
    """Per-sample LID feature vector, one column per activation layer.

    For every layer, distances are taken to `num_batches` random reference
    batches of benign activations and the per-batch estimates are averaged.
    Scale-invariant: the estimate only sees distance ratios.
    """
    if len(query_layers) != len(reference_layers):
        raise ValueError("query and reference layer lists differ in length")
    rng = np.random.default_rng(seed)
    n_queries = len(query_layers[0])
    out = np.zeros((n_queries, len(query_layers)))
    for li, (queries, reference) in enumerate(zip(query_layers, reference_layers)):
        if batch_size > len(reference):
            raise ValueError(f"batch_size {batch_size} exceeds {len(reference)} reference samples")
        if k >= batch_size:
            raise ValueError(f"k={k} must be below batch_size {batch_size}")
        acc = np.zeros(n_queries)
        for _ in range(num_batches):
            batch = reference[rng.choice(len(reference), size=batch_size, replace=False)]
            acc += lid_estimate(_pairwise_distances(queries, batch), k)
        out[:, li] = acc / num_batches
    return out


# ---------------------------------------------------------------------------
# Mahalanobis distance baseline
# ---------------------------------------------------------------------------

@dataclass
class MahalanobisStats:
    """Class-conditional Gaussian fit of benign activations, per layer."""
    ordinals: tuple[int, ...]
    means: list[np.ndarray]          # per layer: [num_classes, dim]
    precisions: list[np.ndarray]     # per layer: inverse shared covariance
    noise_magnitude: float = 0.0


def pooled_activations(params, images: np.ndarray, ordinals, chunk: int = 256) -> list[np.ndarray]:
    """Per-layer activation features: channel means for conv maps, raw vectors
    for the hidden dense activation."""
    feats: list[list[np.ndarray]] = [[] for _ in ordinals]
    for lo in range(0, len(images), chunk):
        maps = model_mod.feature_maps_batch(params, images[lo:lo + chunk], ordinals)
        for i, m in enumerate(maps):
            feats[i].append(m.mean(axis=(2, 3)) if m.ndim == 4 else m)
    return [np.concatenate(f, axis=0) for f in feats]


def fit_mahalanobis(params, train_set, ordinals=None,
                    noise_magnitude: float = 0.0) -> MahalanobisStats:
    """Fit per-class means and a shared covariance per activation layer."""
    if ordinals is None:
        ordinals = tuple(range(1, params.num_activations + 1))
    ordinals = tuple(ordinals)
    acts = pooled_activations(params, train_set.images, ordinals)
    labels = train_set.labels
    num_classes = params.config.num_classes
    means, precisions = [], []
    for a in acts:
        dim = a.shape[1]
        mu = np.stack([a[labels == cl].mean(axis=0) for cl in range(num_classes)])
        centered = a - mu[labels]
        cov = centered.T @ centered / len(a)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            ridge = 1e-6 * np.trace(cov) / dim
            log.warning("singular covariance (dim %d); adding ridge %.3g", dim, ridge)
            cov = cov + ridge * np.eye(dim)
        precisions.append(np.linalg.inv(cov))
        means.append(mu)
    return MahalanobisStats(ordinals=ordinals, means=means, precisions=precisions,
                            noise_magnitude=noise_magnitude)


def _layer_scores(feats: np.ndarray, mu: np.ndarray, precision: np.ndarray):
    """max_c -(f-mu_c)' P (f-mu_c) plus the argmax class per row."""
    diffs = feats[:, None, :] - mu[None, :, :]          # [n, classes, dim]
    q = np.einsum("ncd,de,nce->nc", diffs, precision, diffs)
    best = q.argmin(axis=1)
    return -q[np.arange(len(feats)), best], best


def mahalanobis_scores(params, stats: MahalanobisStats, images: np.ndarray,
                       noise_magnitude: float | None = None) -> np.ndarray:
    """Per-layer scores for a batch of images: [n, num_layers].

    With a positive noise magnitude, each image is first nudged by
    magnitude * sign(d score / d input) for that layer, which raises the
    score of natural inputs more than that of adversarial ones.
    """
    if noise_magnitude is None:
        noise_magnitude = stats.noise_magnitude
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    n = len(images)
    out = np.zeros((n, len(stats.ordinals)))
    base = pooled_activations(params, images, stats.ordinals)
    for li, ordinal in enumerate(stats.ordinals):
        feats = base[li]
        mu, precision = stats.means[li], stats.precisions[li]
        if noise_magnitude > 0.0:
            scores, best = _layer_scores(feats, mu, precision)
            dfeat = -2.0 * np.einsum("de,ne->nd", precision, feats - mu[best])
            maps = model_mod.feature_maps_batch(params, images, (ordinal,))[0]
            if maps.ndim == 4:  # undo the channel-mean pooling
                dact = np.broadcast_to(
                    (dfeat / (maps.shape[2] * maps.shape[3]))[:, :, None, None], maps.shape)
            else:
                dact = dfeat
            grad = model_mod.activation_input_gradients(params, images, ordinal, dact)
            nudged = images + noise_magnitude * np.sign(grad)
            feats = pooled_activations(params, nudged, (ordinal,))[0]
        out[:, li], _ = _layer_scores(feats, mu, precision)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    auc: float
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    provenance: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # ties share the mean rank
        i = j + 1
    return ranks


def compute_metrics(scores: np.ndarray, labels: np.ndarray,
                    provenance: dict | None = None) -> EvalReport:
    """AUC via the rank statistic (ties half-credited) plus threshold-0.5
    accuracy, precision and recall."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")
    ranks = _average_ranks(scores)
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    pred = scores >= 0.5
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    tn = int((~pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    flags = []
    if tp + fp == 0:
        flags.append("no_positive_predictions")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    return EvalReport(auc=float(auc), accuracy=(tp + tn) / len(labels),
                      precision=precision, recall=recall,
                      tp=tp, fp=fp, tn=tn, fn=fn,
                      provenance=dict(provenance or {}), flags=tuple(flags))
