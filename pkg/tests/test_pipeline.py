"""Pipeline tests: data plumbing, persistence formats, experiment runners."""

import dataclasses

import numpy as np
import pytest

from advspec import detectors as D
from advspec import model as M
from advspec import pipeline as P
from advspec import spectral as S


def mini_config(**overrides):
    """A benchmark small enough for test-suite turnaround."""
    base = dict(
        num_classes=2, train_per_class=50, test_per_class=30, image_side=32,
        conv_blocks=((6, 1), (8, 1), (8, 1)), hidden_units=24,
        epochs=4, learning_rate=0.004, epsilon=0.06,
        attack_sample_limit=40, cw_sample_limit=20,
        cw_inner_steps=25, cw_binary_steps=3,
        attacks=("fgsm", "bim"), detectors=("input_mfs", "input_pfs", "layer_mfs"),
        layer_ordinals=(2, 4),
        lid_batch_size=30, lid_k=10, lid_batches=4,
        sweep_epsilons=(0.04, 0.08), sweep_attacks=("fgsm",),
        sweep_sample_limit=30, transfer_detectors=("input_mfs",),
        master_seed=123,
    )
    base.update(overrides)
    return P.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def bench():
    b = P.Bench(mini_config())
    b.params  # train once for the whole module
    return b


class TestSynthDataset:
    def test_deterministic(self):
        a = P.synth_dataset(3, 5, 16, seed=42)
        b = P.synth_dataset(3, 5, 16, seed=42)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a = P.synth_dataset(3, 5, 16, seed=1)
        b = P.synth_dataset(3, 5, 16, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_pixel_range(self):
        ds = P.synth_dataset(4, 10, 32, seed=0)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_label_layout(self):
        ds = P.synth_dataset(3, 4, 16, seed=0)
        assert np.array_equal(ds.labels, np.repeat(np.arange(3), 4))

    def test_side_must_be_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            P.synth_dataset(2, 3, 24, seed=0)


class TestIngestCifar:
    def test_single_record_all_ones(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes([7]) + bytes([255]) * 3072)
        ds = P.ingest_cifar(path)
        assert len(ds) == 1
        assert ds.labels[0] == 7
        assert np.all(ds.images[0] == 1.0)
        assert ds.images[0].shape == (3, 32, 32)

    def test_round_trip_known_record(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
        labels = [3, 9]
        blob = b"".join(bytes([labels[i]]) + pixels[i].tobytes() for i in range(2))
        path = tmp_path / "two.bin"
        path.write_bytes(blob)
        ds = P.ingest_cifar(path)
        assert np.array_equal(ds.labels, labels)
        assert np.array_equal(ds.images, pixels.astype(np.float64) / 255.0)

    def test_truncated_reports_offset(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(3073 + 100))
        with pytest.raises(ValueError, match="byte 3073"):
            P.ingest_cifar(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(ValueError, match="multiple"):
            P.ingest_cifar(path)


class TestFeatureContainer:
    def test_round_trip(self, tmp_path):
        mat = np.random.default_rng(1).normal(size=(7, 13))
        path = tmp_path / "f.sdf1"
        P.save_features(mat, "mfs", path)
        got, mode = P.load_features(path)
        assert mode == "mfs"
        assert np.array_equal(got, mat)

    def test_mode_tag(self, tmp_path):
        path = tmp_path / "f.sdf1"
        P.save_features(np.zeros((1, 1)), "pfs", path)
        assert P.load_features(path)[1] == "pfs"

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "f.sdf1"
        P.save_features(np.ones((2, 2)), "mfs", path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            P.load_features(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.sdf1"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ValueError, match="magic"):
            P.load_features(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "f.sdf1"
        P.save_features(np.ones((4, 4)), "mfs", path)
        truncated = path.read_bytes()[:-24]
        path.write_bytes(truncated[:-8] + truncated[-8:])
        with pytest.raises(ValueError):
            P.load_features(path)


def sample_reports():
    return [
        D.EvalReport(auc=0.975, accuracy=0.9, precision=0.8125, recall=1.0,
                     tp=13, fp=3, tn=14, fn=0,
                     provenance={"attack": "fgsm", "detector": "input_mfs",
                                 "epsilon": 0.04, "seed": 7, "config_hash": "ab12"},
                     flags=()),
        D.EvalReport(auc=0.5, accuracy=0.5, precision=0.0, recall=0.0,
                     tp=0, fp=0, tn=10, fn=10,
                     provenance={"attack": "cw", "detector": "input_pfs",
                                 "seed": 7, "config_hash": "ab12"},
                     flags=("no_positive_predictions",)),
    ]


class TestReports:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "r.report"
        reports = sample_reports()
        P.write_report(reports, path, master_seed=7, config_hash="ab12")
        header, got = P.read_report(path)
        assert header["master_seed"] == "7"
        assert got == reports

    def test_missing_provenance_rejected(self, tmp_path):
        rep = sample_reports()[0]
        rep.provenance.pop("config_hash")
        with pytest.raises(ValueError, match="config_hash"):
            P.write_report([rep], tmp_path / "r.report", 7, "ab12")

    def test_byte_identical_modulo_timestamp(self, tmp_path):
        a, b = tmp_path / "a.report", tmp_path / "b.report"
        P.write_report(sample_reports(), a, 7, "ab12")
        P.write_report(sample_reports(), b, 7, "ab12")
        strip = lambda p: [l for l in p.read_text().splitlines()
                           if not l.startswith("timestamp ")]
        assert strip(a) == strip(b)

    def test_non_report_file_rejected(self, tmp_path):
        path = tmp_path / "x.report"
        path.write_text("something else\n")
        with pytest.raises(ValueError, match="report"):
            P.read_report(path)


class TestConfig:
    def test_split_fraction_validated(self):
        with pytest.raises(ValueError, match="split"):
            mini_config(split_fraction=1.0)

    def test_unknown_attack_rejected(self):
        with pytest.raises(ValueError, match="attack"):
            mini_config(attacks=("fgsm", "boundary"))

    def test_cifar_paths_must_resolve(self):
        with pytest.raises(ValueError, match="path"):
            mini_config(dataset="cifar10")

    def test_load_config_unknown_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"epsilon": 0.05, "warp_factor": 9}')
        with pytest.raises(ValueError, match="warp_factor"):
            P.load_config(path)

    def test_load_config_round_trip(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"epsilon": 0.05, "num_classes": 3, "attacks": ["fgsm"]}')
        cfg = P.load_config(path)
        assert cfg.epsilon == 0.05 and cfg.num_classes == 3 and cfg.attacks == ("fgsm",)

    def test_config_hash_tracks_content(self):
        a, b = mini_config(), mini_config(epsilon=0.07)
        assert a.config_hash() != b.config_hash()
        assert a.config_hash() == mini_config().config_hash()

    def test_cell_seed_stable_and_distinct(self):
        assert P.cell_seed(7, "split", "fgsm") == P.cell_seed(7, "split", "fgsm")
        assert P.cell_seed(7, "split", "fgsm") != P.cell_seed(7, "split", "bim")
        assert P.cell_seed(7, "split", "fgsm") != P.cell_seed(8, "split", "fgsm")


class TestAttackDataset:
    def test_invariants_hold(self, bench):
        paired = bench.paired("fgsm")
        assert len(paired) > 0
        paired.verify(bench.params)  # benign correct, adversarial flipped

    def test_success_rate_interior(self, bench):
        paired = bench.paired("fgsm")
        assert 0.0 < paired.success_rate < 1.0 or paired.success_rate == 1.0

    def test_limit_respected(self, bench):
        assert bench.paired("fgsm").attempts <= bench.config.attack_sample_limit

    def test_save_load_round_trip(self, bench, tmp_path):
        paired = bench.paired("fgsm")
        path = tmp_path / "paired.npz"
        P.save_paired(paired, path)
        got = P.load_paired(path)
        assert np.array_equal(got.benign, paired.benign)
        assert np.array_equal(got.adversarial, paired.adversarial)
        assert np.array_equal(got.labels, paired.labels)
        assert got.attack == paired.attack
        assert got.success_rate == paired.success_rate

    def test_all_wrong_model_raises(self, bench):
        _, test_set = bench.datasets()
        broken = M.ModelParams(bench.params.config,
                               np.zeros_like(bench.params.flat))
        # all-zero net predicts class 0 everywhere: some images are still
        # "correct", so scramble labels to kill them all
        bad_set = M.LabeledImageSet(test_set.images[:8],
                                    np.full(8, bench.config.num_classes - 1))
        with pytest.raises(ValueError, match="correctly classified"):
            P.build_attack_dataset(broken, bad_set,
                                   P.attack_configs(bench.config)["fgsm"])


class TestSplits:
    def test_pair_atomic_partition(self, bench):
        train_idx, test_idx = bench.pair_split("fgsm")
        n = len(bench.paired("fgsm"))
        combined = np.sort(np.concatenate([train_idx, test_idx]))
        assert np.array_equal(combined, np.arange(n))
        assert len(train_idx) == int(round(0.8 * n))

    def test_split_deterministic(self, bench):
        a = bench.pair_split("fgsm")
        fresh = P.Bench(bench.config)
        fresh.use_params(bench.params)
        fresh.set_paired("fgsm", bench.paired("fgsm"))
        b = fresh.pair_split("fgsm")
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestDetectorCells:
    def test_cell_report_structure(self, bench):
        _, _, _, rep = P.train_cell(bench, "fgsm", "input_mfs")
        assert 0.0 <= rep.auc <= 1.0
        assert rep.provenance["attack"] == "fgsm"
        assert rep.provenance["detector"] == "input_mfs"
        assert rep.tp + rep.fp + rep.tn + rep.fn == 2 * len(bench.pair_split("fgsm")[1])

    def test_detector_feature_shapes(self, bench):
        n = len(bench.paired("fgsm"))
        side = bench.config.image_side
        train_x, train_y, test_x, test_y, desc = P.detector_features(
            bench, "fgsm", "input_mfs")
        assert train_x.shape[1] == 3 * side * side
        assert len(train_x) + len(test_x) == 2 * n
        assert train_y.sum() * 2 == len(train_y)  # balanced

    def test_lid_and_md_cells_run(self, bench):
        for det in ("lid", "md"):
            _, _, _, rep = P.train_cell(bench, "fgsm", det)
            assert 0.0 <= rep.auc <= 1.0

    def test_null_labels_give_chance_auc(self, bench):
        train_x, train_y, test_x, test_y, _ = P.detector_features(
            bench, "fgsm", "input_mfs")
        rng = np.random.default_rng(0)
        scrambled = rng.permutation(train_y)
        lr_model = D.train_logreg(D.LabeledFeatureSet(train_x, scrambled),
                                  max_iter=200)
        scores = D.predict_score(lr_model, test_x)
        rep = D.compute_metrics(scores, rng.permutation(test_y))
        assert 0.25 <= rep.auc <= 0.75  # tiny test split: generous bracket


class TestRunners:
    def test_detection_grid(self, bench):
        reports = P.run_detection_experiment(bench.config, bench)
        keys = {(r.provenance["attack"], r.provenance["detector"]) for r in reports}
        assert len(reports) == len(bench.config.attacks) * len(bench.config.detectors)
        assert ("fgsm", "input_mfs") in keys
        assert all("failed" not in r.flags for r in reports)

    def test_band_full_equals_unmasked(self, bench):
        cfg = dataclasses.replace(bench.config, band_attack="fgsm",
                                  band_bounds=(0, 8, 32))
        reports = P.run_band_ablation(cfg, bench)
        full = next(r for r in reports
                    if r.provenance["band_lo"] == 0 and r.provenance["band_hi"] == 32)
        _, _, _, plain = P.train_cell(bench, "fgsm", "input_mfs")
        assert full.auc == plain.auc
        assert full.accuracy == plain.accuracy

    def test_layer_ablation_rows(self, bench):
        cfg = dataclasses.replace(bench.config, band_attack="fgsm")
        reports = P.run_layer_ablation(cfg, bench)
        acts = bench.params.num_activations
        assert len(reports) == 2 * (acts + 1)
        zero_mfs = next(r for r in reports
                        if r.provenance.get("ordinal") == 0
                        and r.provenance["detector"] == "layer_mfs")
        _, _, _, inp = P.train_cell(bench, "fgsm", "input_mfs")
        assert abs(zero_mfs.auc - inp.auc) < 1e-12
        assert zero_mfs.provenance["dim"] == 3 * 32 * 32

    def test_epsilon_sweep_series(self, bench):
        reports = P.run_epsilon_sweep(bench.config, bench)
        assert len(reports) == len(bench.config.sweep_epsilons)
        for r in reports:
            assert r.provenance["series"] == "epsilon_sweep"
            assert "success_rate" in r.provenance

    def test_sweep_rejects_zero_epsilon(self, bench):
        with pytest.raises(ValueError, match="epsilon"):
            dataclasses.replace(bench.config, sweep_epsilons=(0.0, 0.1))

    def test_transfer_matrix(self, bench):
        reports = P.run_transfer(bench.config, bench)
        cells = {(r.provenance["attack"], r.provenance["eval_attack"]): r
                 for r in reports}
        assert set(cells) == {("fgsm", "fgsm"), ("fgsm", "bim"),
                              ("bim", "fgsm"), ("bim", "bim")}
        _, _, _, diag = P.train_cell(bench, "fgsm", "input_mfs")
        assert cells[("fgsm", "fgsm")].auc == diag.auc

    def test_descriptor_mismatch_rejected(self, bench):
        lr_model, _, _, _ = P.train_cell(bench, "fgsm", "input_mfs")
        other = S.layers_descriptor(bench.params, (1,), "mfs")
        assert lr_model.descriptor != other


class TestDeterminism:
    def test_same_seed_identical_reports(self):
        cfg = mini_config(attacks=("fgsm",), detectors=("input_mfs", "input_pfs"),
                          train_per_class=30, test_per_class=20, epochs=2,
                          attack_sample_limit=25)
        a = P.run_detection_experiment(cfg, P.Bench(cfg))
        b = P.run_detection_experiment(cfg, P.Bench(cfg))
        assert a == b
