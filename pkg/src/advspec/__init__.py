"""Adversarial attacks on a small CNN and Fourier-spectrum detectors."""

from .attacks import (AttackConfig, AttackResult, AttackSummary, attack_batch,
                      bim, carlini_wagner_l2, deepfool, fgsm, pgd)
from .detectors import (EvalReport, LabeledFeatureSet, LogRegModel,
                        MahalanobisStats, compute_metrics, fit_mahalanobis,
                        gnb_classify, knn_classify, lid_scores,
                        mahalanobis_scores, predict_score, train_logreg)
from .model import (LabeledImageSet, ModelConfig, ModelParams, feature_maps,
                    load_checkpoint, predict, save_checkpoint, train)
from .nn import (GradientPair, conv2d, dense, loss_and_gradients, maxpool2,
                 relu, softmax_xent)
from .pipeline import (Bench, ExperimentConfig, PairedDataset,
                       build_attack_dataset, ingest_cifar, read_report,
                       run_band_ablation, run_detection_experiment,
                       run_epsilon_sweep, run_layer_ablation, run_transfer,
                       synth_dataset, write_report)
from .spectral import (FeatureVector, FrequencyBand, apply_band, dft2,
                       extract_input_features, extract_layer_features,
                       magnitude, phase)

__version__ = "0.1.0"
