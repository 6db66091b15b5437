"""End-to-end experiment orchestration, persistence formats and runners.

The flow mirrors the attack/detection bench: train the small CNN, attack the
correctly classified test images, keep successful adversarials with their
benign counterparts, extract spectral (or baseline) features, train one
detector per (attack, feature) cell on an 80/20 pair-atomic split, and report
AUC/accuracy/precision/recall. All randomness derives from one master seed
plus the cell identity, so the whole grid is reproducible and cells are
schedule-independent.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attacks as attacks_mod
from . import detectors as det_mod
from . import model as model_mod
from . import spectral
from .attacks import AttackConfig
from .detectors import EvalReport, LabeledFeatureSet
from .model import LabeledImageSet, ModelConfig

log = logging.getLogger(__name__)

ATTACKS = ("fgsm", "bim", "pgd", "deepfool", "cw")
DETECTORS = ("input_mfs", "input_pfs", "layer_mfs", "layer_pfs", "lid", "md")

# per-attack gradient preprocessing magnitudes for the Mahalanobis baseline
MD_DEFAULT_NOISE = {"fgsm": 0.002, "bim": 5e-5, "pgd": 5e-5, "deepfool": 5e-5,
                    "cw": 1e-4}

FEATURE_MAGIC = b"SDF1"
_MODE_TAGS = {"mfs": 0, "pfs": 1, "raw": 255}


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"              # "synthetic" | "cifar10"
    cifar_train_path: str | None = None
    cifar_test_path: str | None = None
    num_classes: int = 4
    train_per_class: int = 300
    test_per_class: int = 200
    image_side: int = 32
    # model
    conv_blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    hidden_units: int = 128
    epochs: int = 6
    learning_rate: float = 0.002
    batch_size: int = 32
    train_label_noise: float = 0.08
    # attacks
    epsilon: float = 0.04
    bim_iterations: int = 10
    pgd_iterations: int = 40
    cw_inner_steps: int = 100
    cw_binary_steps: int = 5
    cw_lr: float = 0.01
    attack_sample_limit: int | None = 400
    cw_sample_limit: int | None = 150
    attacks: tuple[str, ...] = ATTACKS
    # detectors
    detectors: tuple[str, ...] = DETECTORS
    layer_ordinals: tuple[int, ...] = (3, 5, 7)
    split_fraction: float = 0.8
    logreg_l2: float = 1e-4
    logreg_max_iter: int = 400
    logreg_tol: float = 1e-6
    lid_batch_size: int = 100
    lid_k: int = 20
    lid_batches: int = 10
    md_noise: dict = field(default_factory=lambda: dict(MD_DEFAULT_NOISE))
    # ablations and sweeps
    band_bounds: tuple[int, ...] = (0, 8, 16, 24, 32)
    band_attack: str = "bim"
    sweep_epsilons: tuple[float, ...] = (0.01, 0.02, 0.03, 0.05, 0.1)
    sweep_attacks: tuple[str, ...] = ("fgsm", "bim", "pgd")
    sweep_sample_limit: int | None = 250
    transfer_detectors: tuple[str, ...] = ("input_mfs", "layer_mfs", "layer_pfs")
    # bookkeeping
    master_seed: int = 7
    out_dir: str = "runs"

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split fraction {self.split_fraction} outside (0,1)")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        for a in tuple(self.attacks) + (self.band_attack,) + tuple(self.sweep_attacks):
            if a not in ATTACKS:
                raise ValueError(f"unknown attack {a!r}")
        for d in tuple(self.detectors) + tuple(self.transfer_detectors):
            if d not in DETECTORS:
                raise ValueError(f"unknown detector {d!r}")
        for e in self.sweep_epsilons:
            if not 0.0 < e <= 1.0:
                raise ValueError(f"sweep epsilon {e} outside (0,1]")
        num_acts = sum(n for _, n in self.conv_blocks) + 1
        for o in self.layer_ordinals:
            if not 0 <= o <= num_acts:
                raise ValueError(f"layer ordinal {o} outside 0..{num_acts} "
                                 f"for this architecture")
        if self.dataset == "cifar10":
            for p in (self.cifar_train_path, self.cifar_test_path):
                if p is None or not Path(p).exists():
                    raise ValueError(f"cifar10 dataset path {p!r} not resolvable")
        self.conv_blocks = tuple(tuple(b) for b in self.conv_blocks)
        for name in ("attacks", "detectors", "layer_ordinals", "band_bounds",
                     "sweep_epsilons", "sweep_attacks", "transfer_detectors"):
            setattr(self, name, tuple(getattr(self, name)))

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Git-blob style SHA1 of the canonical config JSON."""
        blob = self.canonical_json().encode()
        return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()

    def model_config(self) -> ModelConfig:
        channels = 3
        return ModelConfig(input_shape=(channels, self.image_side, self.image_side),
                           conv_blocks=self.conv_blocks,
                           num_classes=self.num_classes,
                           hidden_units=self.hidden_units,
                           seed=cell_seed(self.master_seed, "model-init"))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**doc)


def cell_seed(master_seed: int, *parts) -> int:
    """Stable per-cell seed from the master seed and the cell identity."""
    tag = "/".join(str(p) for p in parts)
    return int(np.random.SeedSequence(
        (int(master_seed), zlib.crc32(tag.encode()))).generate_state(1)[0])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def synth_dataset(num_classes: int, samples_per_class: int, image_side: int,
                  seed: int, label_noise: float = 0.0) -> LabeledImageSet:
    """Procedural class-conditional textures.

    Each class owns a mid-band spatial frequency pair; samples jitter it
    continuously (adjacent classes overlap a little), draw random phases and
    amplitudes, share a low-frequency background, and sit on a broadband
    noise floor. An optional fraction of labels is flipped: a nonzero loss
    floor keeps the trained network's margins moderate, which is what makes
    it attackable at small budgets (a network ground to zero loss on clean
    separable data saturates its softmax and shrugs off one-step attacks).
    Deterministic per seed.
    """
    if image_side < 8 or image_side & (image_side - 1):
        raise ValueError(f"image_side must be a power of two >= 8, got {image_side}")
    rng = np.random.default_rng(seed)
    n = image_side
    u = np.arange(n)[:, None] / n
    v = np.arange(n)[None, :] / n
    scale = n / 32.0  # keep frequencies mid-band for any image side
    images = np.empty((num_classes * samples_per_class, 3, n, n))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    idx = 0
    for cl in range(num_classes):
        f_row = (4.0 + 2.0 * cl) * scale
        f_col = (5.0 + 2.0 * cl) * scale
        for _ in range(samples_per_class):
            fr = f_row + rng.uniform(-0.8, 0.8) * scale
            fc = f_col + rng.uniform(-0.8, 0.8) * scale
            bg = rng.uniform(0.1, 0.4) * np.cos(
                2 * np.pi * (u + v) + rng.uniform(0, 2 * np.pi))
            img = np.empty((3, n, n))
            for ch in range(3):
                main = rng.uniform(0.55, 0.95) * np.cos(
                    2 * np.pi * (fr * u + fc * v) + rng.uniform(0, 2 * np.pi))
                cross = rng.uniform(0.2, 0.5) * np.cos(
                    2 * np.pi * (fc * u + fr * v) + rng.uniform(0, 2 * np.pi))
                noise = rng.uniform(-0.15, 0.15, size=(n, n))
                img[ch] = 0.5 + 0.3 * (main + cross + bg) + noise
            images[idx] = img
            labels[idx] = cl
            idx += 1
    np.clip(images, 0.0, 1.0, out=images)
    if label_noise:
        flips = rng.random(len(labels)) < label_noise
        shift = rng.integers(1, num_classes, size=len(labels))
        labels[flips] = (labels[flips] + shift[flips]) % num_classes
    return LabeledImageSet(images=images, labels=labels)


def ingest_cifar(path) -> LabeledImageSet:
    """Read the 3073-bytes-per-record binary layout (label + RGB planes)."""
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % 3073:
        offset = len(blob) - (len(blob) % 3073)
        raise ValueError(f"{path}: size {len(blob)} is not a positive multiple of "
                         f"3073 (incomplete record at byte {offset})")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3073)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImageSet(images=images, labels=labels)


# ---------------------------------------------------------------------------
# attack datasets
# ---------------------------------------------------------------------------

@dataclass
class PairedDataset:
    """Benign images and their successfully attacked counterparts."""
    benign: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    attack: str
    epsilon: float | None
    success_rate: float | None
    attempts: int

    def __len__(self):
        return len(self.labels)

    def verify(self, params) -> None:
        """Invariants: benign correctly classified, adversarial misclassified."""
        if len(self) == 0:
            return
        ben = model_mod.predict_batch(params, self.benign)
        adv = model_mod.predict_batch(params, self.adversarial)
        if np.any(ben != self.labels):
            raise AssertionError("benign pair member misclassified")
        if np.any(adv == self.labels):
            raise AssertionError("adversarial pair member still correctly classified")


def build_attack_dataset(params, test_set: LabeledImageSet,
                         attack_config: AttackConfig,
                         limit: int | None = None) -> PairedDataset:
    """Filter to correctly classified images, attack them, keep successes."""
    preds = model_mod.predict_batch(params, test_set.images)
    keep = preds == test_set.labels
    if not keep.any():
        raise ValueError("no correctly classified images to attack")
    images = test_set.images[keep]
    labels = test_set.labels[keep]
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    successes, summary = attacks_mod.attack_batch(params, images, labels, attack_config)
    benign = np.stack([r.original for r in successes]) if successes else \
        np.empty((0,) + images.shape[1:])
    adv = np.stack([r.adversarial for r in successes]) if successes else \
        np.empty((0,) + images.shape[1:])
    lab = np.array([r.true_label for r in successes], dtype=np.int64)
    return PairedDataset(benign=benign, adversarial=adv, labels=lab,
                         attack=attack_config.method, epsilon=attack_config.epsilon,
                         success_rate=summary.success_rate, attempts=summary.attempts)


def attack_configs(config: ExperimentConfig) -> dict[str, AttackConfig]:
    """Attack settings for the bench, seeded from the master seed."""
    eps = config.epsilon
    return {
        "fgsm": AttackConfig("fgsm", epsilon=eps),
        "bim": AttackConfig("bim", epsilon=eps, iterations=config.bim_iterations),
        "pgd": AttackConfig("pgd", epsilon=eps, iterations=config.pgd_iterations,
                            seed=cell_seed(config.master_seed, "pgd-noise")),
        "deepfool": AttackConfig("deepfool"),
        "cw": AttackConfig("cw", cw_inner_steps=config.cw_inner_steps,
                           cw_binary_steps=config.cw_binary_steps,
                           cw_lr=config.cw_lr),
    }


# ---------------------------------------------------------------------------
# the bench: one materialized experiment context
# ---------------------------------------------------------------------------

class Bench:
    """Caches the trained model, paired datasets and splits for one config."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._train_set = None
        self._test_set = None
        self._params = None
        self._paired: dict[str, PairedDataset] = {}
        self._splits: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._md_stats = None
        self._pooled: dict[int, list[np.ndarray]] = {}

    # -- data ---------------------------------------------------------------
    def datasets(self) -> tuple[LabeledImageSet, LabeledImageSet]:
        if self._train_set is None:
            cfg = self.config
            if cfg.dataset == "synthetic":
                self._train_set = synth_dataset(cfg.num_classes, cfg.train_per_class,
                                                cfg.image_side,
                                                cell_seed(cfg.master_seed, "train-data"),
                                                label_noise=cfg.train_label_noise)
                self._test_set = synth_dataset(cfg.num_classes, cfg.test_per_class,
                                               cfg.image_side,
                                               cell_seed(cfg.master_seed, "test-data"))
            else:
                self._train_set = ingest_cifar(cfg.cifar_train_path)
                self._test_set = ingest_cifar(cfg.cifar_test_path)
        return self._train_set, self._test_set

    @property
    def params(self):
        if self._params is None:
            cfg = self.config
            train_set, _ = self.datasets()
            log.info("training model: %d images, %d epochs", len(train_set), cfg.epochs)
            self._params = model_mod.train(cfg.model_config(), train_set,
                                           epochs=cfg.epochs, lr=cfg.learning_rate,
                                           batch_size=cfg.batch_size)
        return self._params

    def use_params(self, params) -> None:
        """Adopt an externally trained or loaded model."""
        self._params = params

    # -- attacks ------------------------------------------------------------
    def paired(self, attack: str) -> PairedDataset:
        if attack not in self._paired:
            cfg = self.config
            limit = cfg.cw_sample_limit if attack == "cw" else cfg.attack_sample_limit
            _, test_set = self.datasets()
            log.info("building %s attack dataset", attack)
            self._paired[attack] = build_attack_dataset(
                self.params, test_set, attack_configs(cfg)[attack], limit=limit)
        return self._paired[attack]

    def set_paired(self, attack: str, paired: PairedDataset) -> None:
        self._paired[attack] = paired

    def pair_split(self, attack: str) -> tuple[np.ndarray, np.ndarray]:
        """Pair-atomic 80/20 split: both members of a pair stay together."""
        if attack not in self._splits:
            n = len(self.paired(attack))
            rng = np.random.default_rng(cell_seed(self.config.master_seed, "split", attack))
            order = rng.permutation(n)
            cut = int(round(self.config.split_fraction * n))
            self._splits[attack] = (order[:cut], order[cut:])
        return self._splits[attack]

    # -- shared detector inputs ----------------------------------------------
    @property
    def md_stats(self):
        if self._md_stats is None:
            train_set, _ = self.datasets()
            self._md_stats = det_mod.fit_mahalanobis(self.params, train_set)
        return self._md_stats

    def all_ordinals(self) -> tuple[int, ...]:
        return tuple(range(1, self.params.num_activations + 1))


def _stacked_rows(n_pairs, train_idx, test_idx, ben_x, adv_x):
    x = np.concatenate([ben_x, adv_x], axis=0)
    y = np.concatenate([np.zeros(n_pairs, dtype=np.int64),
                        np.ones(n_pairs, dtype=np.int64)])
    tr = np.concatenate([train_idx, train_idx + n_pairs])
    te = np.concatenate([test_idx, test_idx + n_pairs])
    return x[tr], y[tr], x[te], y[te]


def detector_features(bench: Bench, attack: str, detector: str):
    """Feature rows for one cell: (train_x, train_y, test_x, test_y, descriptor)."""
    cfg = bench.config
    paired = bench.paired(attack)
    n = len(paired)
    if n < 4:
        raise ValueError(f"too few successful {attack} pairs ({n}) to train a detector")
    train_idx, test_idx = bench.pair_split(attack)
    params = bench.params

    if detector in ("input_mfs", "input_pfs"):
        mode = detector.split("_")[1]
        ben = spectral.extract_input_features_batch(paired.benign, mode)
        adv = spectral.extract_input_features_batch(paired.adversarial, mode)
        desc = spectral.input_descriptor(paired.benign.shape[1], paired.benign.shape[2], mode)
    elif detector in ("layer_mfs", "layer_pfs"):
        mode = detector.split("_")[1]
        ben = spectral.extract_layer_features_batch(params, paired.benign,
                                                    cfg.layer_ordinals, mode)
        adv = spectral.extract_layer_features_batch(params, paired.adversarial,
                                                    cfg.layer_ordinals, mode)
        desc = spectral.layers_descriptor(params, cfg.layer_ordinals, mode)
    elif detector == "lid":
        ordinals = bench.all_ordinals()
        ben_act = det_mod.pooled_activations(params, paired.benign, ordinals)
        adv_act = det_mod.pooled_activations(params, paired.adversarial, ordinals)
        reference = [a[train_idx] for a in ben_act]
        queries = [np.concatenate([b, a], axis=0) for b, a in zip(ben_act, adv_act)]
        batch_size = min(cfg.lid_batch_size, len(train_idx))
        k = min(cfg.lid_k, batch_size - 1)
        feats = det_mod.lid_scores(queries, reference, batch_size=batch_size, k=k,
                                   seed=cell_seed(cfg.master_seed, "lid", attack),
                                   num_batches=cfg.lid_batches)
        ben, adv = feats[:n], feats[n:]
        desc = None
    elif detector == "md":
        noise = cfg.md_noise.get(attack, 0.0)
        ben = det_mod.mahalanobis_scores(params, bench.md_stats, paired.benign, noise)
        adv = det_mod.mahalanobis_scores(params, bench.md_stats, paired.adversarial, noise)
        desc = None
    else:
        raise ValueError(f"unknown detector {detector!r}")
    train_x, train_y, test_x, test_y = _stacked_rows(n, train_idx, test_idx, ben, adv)
    return train_x, train_y, test_x, test_y, desc


def _cell_provenance(cfg: ExperimentConfig, attack: str, detector: str, **extra):
    prov = {
        "attack": attack,
        "detector": detector,
        "epsilon": cfg.epsilon if attack in ("fgsm", "bim", "pgd") else "none",
        "layer_ordinals": ",".join(str(o) for o in cfg.layer_ordinals),
        "seed": cfg.master_seed,
        "config_hash": cfg.config_hash(),
    }
    prov.update(extra)
    return prov


def train_cell(bench: Bench, attack: str, detector: str):
    """Train one detector cell; returns (model, test_x, test_y, report)."""
    cfg = bench.config
    train_x, train_y, test_x, test_y, desc = detector_features(bench, attack, detector)
    lr_model = det_mod.train_logreg(
        LabeledFeatureSet(train_x, train_y), l2_strength=cfg.logreg_l2,
        max_iter=cfg.logreg_max_iter, tol=cfg.logreg_tol, descriptor=desc)
    scores = det_mod.predict_score(lr_model, test_x)
    paired = bench.paired(attack)
    report = det_mod.compute_metrics(
        scores, test_y,
        provenance=_cell_provenance(cfg, attack, detector,
                                    success_rate=_fmt(paired.success_rate),
                                    pairs=len(paired)))
    return lr_model, test_x, test_y, report


def _fmt(value):
    return "none" if value is None else value


def _failed_report(cfg, attack, detector, err, **extra) -> EvalReport:
    return EvalReport(auc=float("nan"), accuracy=float("nan"), precision=float("nan"),
                      recall=float("nan"), tp=0, fp=0, tn=0, fn=0,
                      provenance=_cell_provenance(cfg, attack, detector,
                                                  error=str(err).replace("\n", " "), **extra),
                      flags=("failed",))


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------

def run_detection_experiment(config: ExperimentConfig,
                             bench: Bench | None = None) -> list[EvalReport]:
    """The full (attack x detector) grid; a failing cell is flagged, not fatal."""
    bench = bench or Bench(config)
    reports = []
    for attack in config.attacks:
        for detector in config.detectors:
            try:
                _, _, _, report = train_cell(bench, attack, detector)
            except Exception as err:  # cell-local failure
                log.warning("cell (%s, %s) failed: %s", attack, detector, err)
                report = _failed_report(config, attack, detector, err)
            reports.append(report)
            log.info("cell %s/%s auc=%.3f", attack, detector, report.auc)
    return reports


def run_band_ablation(config: ExperimentConfig,
                      bench: Bench | None = None) -> list[EvalReport]:
    """Input-magnitude detection per frequency band over the bounds grid."""
    bench = bench or Bench(config)
    attack = config.band_attack
    reports = []
    train_x, train_y, test_x, test_y, desc = detector_features(bench, attack, "input_mfs")
    channels, side = desc.channels, desc.side
    bounds = config.band_bounds
    for i, lo in enumerate(bounds[:-1]):
        for hi in bounds[i + 1:]:
            band = spectral.FrequencyBand(lo, hi)
            try:
                masked_desc = replace(desc, band=(lo, hi))
                lr_model = det_mod.train_logreg(
                    LabeledFeatureSet(spectral.apply_band_matrix(train_x, channels, side, band),
                                      train_y),
                    l2_strength=config.logreg_l2, max_iter=config.logreg_max_iter,
                    tol=config.logreg_tol, descriptor=masked_desc)
                scores = det_mod.predict_score(
                    lr_model, spectral.apply_band_matrix(test_x, channels, side, band))
                report = det_mod.compute_metrics(
                    scores, test_y,
                    provenance=_cell_provenance(config, attack, "input_mfs",
                                                band_lo=lo, band_hi=hi))
            except Exception as err:
                log.warning("band (%d,%d) failed: %s", lo, hi, err)
                report = _failed_report(config, attack, "input_mfs", err,
                                        band_lo=lo, band_hi=hi)
            reports.append(report)
    return reports


def run_layer_ablation(config: ExperimentConfig,
                       bench: Bench | None = None) -> list[EvalReport]:
    """MFS and PFS detection per single activation ordinal (0 = input)."""
    bench = bench or Bench(config)
    attack = config.band_attack
    paired = bench.paired(attack)
    n = len(paired)
    train_idx, test_idx = bench.pair_split(attack)
    reports = []
    for ordinal in range(0, bench.params.num_activations + 1):
        for mode in ("mfs", "pfs"):
            try:
                ben = spectral.extract_layer_features_batch(
                    bench.params, paired.benign, (ordinal,), mode)
                adv = spectral.extract_layer_features_batch(
                    bench.params, paired.adversarial, (ordinal,), mode)
                desc = spectral.layers_descriptor(bench.params, (ordinal,), mode)
                train_x, train_y, test_x, test_y = _stacked_rows(
                    n, train_idx, test_idx, ben, adv)
                lr_model = det_mod.train_logreg(
                    LabeledFeatureSet(train_x, train_y), l2_strength=config.logreg_l2,
                    max_iter=config.logreg_max_iter, tol=config.logreg_tol,
                    descriptor=desc)
                scores = det_mod.predict_score(lr_model, test_x)
                report = det_mod.compute_metrics(
                    scores, test_y,
                    provenance=_cell_provenance(config, attack, f"layer_{mode}",
                                                ordinal=ordinal, dim=ben.shape[1]))
            except Exception as err:
                log.warning("layer %d (%s) failed: %s", ordinal, mode, err)
                report = _failed_report(config, attack, f"layer_{mode}", err,
                                        ordinal=ordinal)
            reports.append(report)
    return reports


def run_epsilon_sweep(config: ExperimentConfig,
                      bench: Bench | None = None) -> list[EvalReport]:
    """Success rate and input-magnitude detection AUC over an epsilon grid."""
    bench = bench or Bench(config)
    if any(e <= 0.0 for e in config.sweep_epsilons):
        raise ValueError("sweep epsilons must be positive")
    _, test_set = bench.datasets()
    reports = []
    for attack in config.sweep_attacks:
        for eps in config.sweep_epsilons:
            sub = replace(config, epsilon=eps,
                          attack_sample_limit=config.sweep_sample_limit,
                          attacks=(attack,), detectors=("input_mfs",))
            sub_bench = Bench(sub)
            sub_bench.use_params(bench.params)
            sub_bench._train_set, sub_bench._test_set = bench.datasets()
            try:
                _, _, _, report = train_cell(sub_bench, attack, "input_mfs")
                report.provenance["series"] = "epsilon_sweep"
                report.provenance["epsilon"] = eps
            except Exception as err:
                log.warning("sweep %s eps=%g failed: %s", attack, eps, err)
                report = _failed_report(sub, attack, "input_mfs", err,
                                        series="epsilon_sweep")
                report.provenance["epsilon"] = eps
            reports.append(report)
    return reports


def run_transfer(config: ExperimentConfig,
                 bench: Bench | None = None) -> list[EvalReport]:
    """Train on one attack, evaluate on the held-out split of the others.

    Attacks transfer within the budgeted group (fgsm/bim/pgd) and within the
    minimal-perturbation group (deepfool/cw).
    """
    bench = bench or Bench(config)
    groups = [tuple(a for a in ("fgsm", "bim", "pgd") if a in config.attacks),
              tuple(a for a in ("deepfool", "cw") if a in config.attacks)]
    reports = []
    for group in groups:
        if len(group) < 1:
            continue
        for detector in config.transfer_detectors:
            models = {}
            for attack in group:
                try:
                    models[attack] = train_cell(bench, attack, detector)
                except Exception as err:
                    log.warning("transfer training (%s, %s) failed: %s",
                                attack, detector, err)
                    models[attack] = None
            for train_attack in group:
                for eval_attack in group:
                    entry = models[train_attack]
                    if entry is None:
                        reports.append(_failed_report(
                            config, train_attack, detector,
                            "training cell failed", eval_attack=eval_attack))
                        continue
                    lr_model, test_x, test_y, own_report = entry
                    if eval_attack == train_attack:
                        report = det_mod.compute_metrics(
                            det_mod.predict_score(lr_model, test_x), test_y,
                            provenance=_cell_provenance(
                                config, train_attack, detector,
                                eval_attack=eval_attack))
                    else:
                        try:
                            _, _, ex, ey, edesc = detector_features(bench, eval_attack, detector)
                            if (lr_model.descriptor is not None and edesc is not None
                                    and lr_model.descriptor != edesc):
                                raise ValueError(
                                    f"feature descriptor mismatch: trained on "
                                    f"{lr_model.descriptor}, evaluating {edesc}")
                            report = det_mod.compute_metrics(
                                det_mod.predict_score(lr_model, ex), ey,
                                provenance=_cell_provenance(
                                    config, train_attack, detector,
                                    eval_attack=eval_attack))
                        except Exception as err:
                            log.warning("transfer (%s->%s, %s) failed: %s",
                                        train_attack, eval_attack, detector, err)
                            report = _failed_report(config, train_attack, detector,
                                                    err, eval_attack=eval_attack)
                    reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# persistence: feature container, paired datasets, reports
# ---------------------------------------------------------------------------

def _checksum(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()[:8]


def save_features(matrix: np.ndarray, mode: str, path) -> None:
    """SDF1 container: magic, u32 rows, u32 cols, u8 mode tag, f64 payload."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2D, got {matrix.shape}")
    tag = _MODE_TAGS.get(mode.lower())
    if tag is None:
        raise ValueError(f"unknown feature mode {mode!r}")
    body = (FEATURE_MAGIC + struct.pack("<IIB", matrix.shape[0], matrix.shape[1], tag)
            + matrix.astype("<f8").tobytes())
    Path(path).write_bytes(body + _checksum(body))


def load_features(path) -> tuple[np.ndarray, str]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 9 + 8 or blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature container (bad magic or truncated)")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise ValueError(f"{path}: checksum mismatch, file corrupted")
    rows, cols, tag = struct.unpack_from("<IIB", body, 4)
    payload = body[13:]
    if len(payload) != rows * cols * 8:
        raise ValueError(f"{path}: payload size {len(payload)} != {rows}x{cols} float64")
    names = {v: k for k, v in _MODE_TAGS.items()}
    if tag not in names:
        raise ValueError(f"{path}: unknown mode tag {tag}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy(), names[tag]


def save_paired(paired: PairedDataset, path) -> None:
    np.savez_compressed(
        path, benign=paired.benign, adversarial=paired.adversarial,
        labels=paired.labels,
        meta=json.dumps({"attack": paired.attack, "epsilon": paired.epsilon,
                         "success_rate": paired.success_rate,
                         "attempts": paired.attempts}))


def load_paired(path) -> PairedDataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        return PairedDataset(benign=z["benign"], adversarial=z["adversarial"],
                             labels=z["labels"], attack=meta["attack"],
                             epsilon=meta["epsilon"],
                             success_rate=meta["success_rate"],
                             attempts=meta["attempts"])


REQUIRED_PROVENANCE = ("attack", "detector", "seed", "config_hash")
_REPORT_FIELDS = ("auc", "accuracy", "precision", "recall")
_COUNT_FIELDS = ("tp", "fp", "tn", "fn")


def write_report(reports: list[EvalReport], path, master_seed: int,
                 config_hash: str) -> None:
    """Line-delimited key-value report file; rejects missing provenance."""
    lines = ["format advspec-report-v1",
             f"timestamp {datetime.now(timezone.utc).isoformat()}",
             f"master_seed {master_seed}",
             f"config_hash {config_hash}",
             f"reports {len(reports)}"]
    for i, rep in enumerate(reports):
        for key in REQUIRED_PROVENANCE:
            if key not in rep.provenance:
                raise ValueError(f"report {i} missing provenance field {key!r}")
        lines.append(f"report {i}")
        for name in _REPORT_FIELDS:
            lines.append(f"{name} {getattr(rep, name)!r}")
        for name in _COUNT_FIELDS:
            lines.append(f"{name} {getattr(rep, name)}")
        for flag in rep.flags:
            lines.append(f"flag {flag}")
        for key in sorted(rep.provenance):
            lines.append(f"prov {key} {rep.provenance[key]}")
        lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> tuple[dict, list[EvalReport]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "format advspec-report-v1":
        raise ValueError(f"{path}: not a report file")
    header = {}
    reports = []
    current = None
    for line in text[1:]:
        if not line:
            continue
        key, _, value = line.partition(" ")
        if key == "report":
            current = {"flags": [], "provenance": {}}
        elif key == "end":
            reports.append(EvalReport(
                auc=float(current["auc"]), accuracy=float(current["accuracy"]),
                precision=float(current["precision"]), recall=float(current["recall"]),
                tp=int(current["tp"]), fp=int(current["fp"]),
                tn=int(current["tn"]), fn=int(current["fn"]),
                provenance=current["provenance"], flags=tuple(current["flags"])))
            current = None
        elif current is None:
            header[key] = value
        elif key == "flag":
            current["flags"].append(value)
        elif key == "prov":
            pkey, _, pvalue = value.partition(" ")
            current["provenance"][pkey] = _parse_scalar(pvalue)
        else:
            current[key] = value
    return header, reports


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text
