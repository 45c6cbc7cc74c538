import dataclasses
import json

import numpy as np
import pytest

from stubs import constant_label_model, intensity_oracle_model
from tileseg.nnet import NetworkConfig
from tileseg.phantom import PhantomSpec, generate_subject
from tileseg.tiling import plan_tiles
from tileseg.transfer import (
    Cohort,
    ExperimentSpec,
    SubjectData,
    TrainConfig,
    TrainedModel,
    TrainingDivergence,
    evaluate_model,
    evaluate_reproducibility,
    load_model,
    pretrain,
    run_experiment,
    save_model,
    segment_volume,
    split_cohort,
    transfer_learn,
)
from tileseg.volio import CohortManifest, SubjectRecord


def fake_manifest(n, tag="original"):
    return CohortManifest(subjects=[
        SubjectRecord(subject_id=f"s{i:02d}", image_path=f"s{i:02d}.nii",
                      cohort_tag=tag) for i in range(n)])


MICRO_NET = NetworkConfig(num_classes=5, hidden_channels=4, hidden_layers=1)
MICRO_TILE = dict(tiles_per_axis=(2, 2, 2), tile_shape=(12, 12, 12))


def micro_plan():
    return plan_tiles((20, 20, 20), **MICRO_TILE)


class TestSplitCohort:
    def test_30_subjects_5_folds(self):
        cfg = TrainConfig(folds=5, seed=1)
        s = split_cohort(fake_manifest(30), 0, cfg)
        assert (len(s.train_ids), len(s.validation_ids), len(s.test_ids)) == (24, 3, 3)

    def test_10_subjects_5_folds(self):
        cfg = TrainConfig(folds=5, seed=1)
        s = split_cohort(fake_manifest(10), 2, cfg)
        assert (len(s.train_ids), len(s.validation_ids), len(s.test_ids)) == (8, 1, 1)

    def test_partition_properties(self):
        cfg = TrainConfig(folds=5, seed=7)
        manifest = fake_manifest(23)
        all_ids = set(manifest.subject_ids())
        test_union = []
        for fold in range(5):
            s = split_cohort(manifest, fold, cfg)
            parts = [set(s.train_ids), set(s.validation_ids), set(s.test_ids)]
            assert not (parts[0] & parts[1] or parts[0] & parts[2]
                        or parts[1] & parts[2])
            assert parts[0] | parts[1] | parts[2] == all_ids
            test_union.extend(s.test_ids)
        assert len(test_union) == len(set(test_union))
        # validation + test blocks across folds cover the cohort
        held = set(test_union)
        for fold in range(5):
            held |= set(split_cohort(manifest, fold, cfg).validation_ids)
        assert held == all_ids

    def test_deterministic(self):
        cfg = TrainConfig(folds=4, seed=3)
        a = split_cohort(fake_manifest(12), 1, cfg)
        b = split_cohort(fake_manifest(12), 1, cfg)
        assert a == b

    def test_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            split_cohort(fake_manifest(3), 0, TrainConfig(folds=5))

    def test_fold_out_of_range(self):
        with pytest.raises(ValueError, match="fold"):
            split_cohort(fake_manifest(10), 5, TrainConfig(folds=5))

    def test_config_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TrainConfig(split=(0.5, 0.2, 0.2)).validate()
        with pytest.raises(ValueError, match="mix_mode"):
            TrainConfig(mix_mode="other").validate()


class TestPretrain:
    def test_epochs_zero_returns_init(self, micro_adult_cohort):
        cfg = TrainConfig(epochs=0, folds=3, seed=9)
        model = pretrain(micro_adult_cohort, micro_plan(), MICRO_NET, cfg)
        assert model.regime_tag == "baseline"
        assert model.validation_curve == []
        assert model.selected_epoch is None
        from tileseg.nnet import init_bank
        from tileseg.transfer import _rng, _STREAM_INIT
        seed = int(_rng(9, _STREAM_INIT, 0).integers(0, 2 ** 31))
        fresh = init_bank(MICRO_NET, micro_plan().num_tiles, seed=seed)
        for k, v in model.bank.tensors().items():
            np.testing.assert_array_equal(v, fresh.tensors()[k])

    def test_trains_and_selects(self, micro_adult_cohort):
        cfg = TrainConfig(epochs=3, folds=3, seed=9, lr=3e-3)
        log = []
        model = pretrain(micro_adult_cohort, micro_plan(), MICRO_NET, cfg, log=log)
        assert len(model.validation_curve) == 3
        assert model.selected_epoch == int(np.argmax(model.validation_curve))
        assert len(log) == 3
        assert {r["regime"] for r in log} == {"baseline"}
        # learning this easy phantom task moves validation DSC well above chance
        assert max(model.validation_curve) > 0.5

    def test_num_classes_must_match_vocabulary(self, micro_adult_cohort):
        bad = NetworkConfig(num_classes=3)
        with pytest.raises(ValueError, match="vocabulary"):
            pretrain(micro_adult_cohort, micro_plan(), bad, TrainConfig(folds=3))

    def test_divergence_reports_subject_and_epoch(self, micro_adult_cohort):
        cohort = Cohort(manifest=micro_adult_cohort.manifest,
                        subjects={k: dataclasses.replace(v)
                                  for k, v in micro_adult_cohort.subjects.items()})
        sid = cohort.manifest.subject_ids()[0]
        poisoned = dataclasses.replace(cohort.subjects[sid])
        bad_img = dataclasses.replace(
            poisoned.image, data=poisoned.image.data.copy())
        bad_img.data[0, 0, 0] = np.nan
        cohort.subjects[sid] = dataclasses.replace(poisoned, image=bad_img)
        cfg = TrainConfig(epochs=1, folds=3, seed=1)
        with pytest.raises(TrainingDivergence, match="epoch 0"):
            pretrain(cohort, micro_plan(), MICRO_NET, cfg)


class TestTransferLearn:
    @pytest.fixture()
    def base_model(self, micro_adult_cohort):
        cfg = TrainConfig(epochs=2, folds=3, seed=11, lr=3e-3)
        return pretrain(micro_adult_cohort, micro_plan(), MICRO_NET, cfg)

    def test_epochs_zero_identity(self, base_model, micro_pediatric_cohort):
        cfg = TrainConfig(epochs=0, folds=3, seed=11, mix_mode="new_only")
        out = transfer_learn(base_model, micro_pediatric_cohort, None, cfg)
        for k, v in out.bank.tensors().items():
            np.testing.assert_array_equal(v, base_model.bank.tensors()[k])
        assert out.regime_tag == "new_only"

    def test_augmented_requires_original(self, base_model, micro_pediatric_cohort):
        cfg = TrainConfig(epochs=1, folds=3, seed=11, mix_mode="augmented")
        with pytest.raises(ValueError, match="original cohort"):
            transfer_learn(base_model, micro_pediatric_cohort, None, cfg)
        empty = Cohort(manifest=CohortManifest(subjects=[]), subjects={})
        with pytest.raises(ValueError, match="original cohort"):
            transfer_learn(base_model, micro_pediatric_cohort, empty, cfg)

    def test_regimes_share_schedule_seeds(self, base_model, micro_adult_cohort,
                                          micro_pediatric_cohort):
        # the epoch shuffle stream is derived from (seed, fold, epoch) only,
        # so both regimes see identical schedules in the log
        log = []
        cfg = TrainConfig(epochs=2, folds=3, seed=11, mix_mode="new_only")
        transfer_learn(base_model, micro_pediatric_cohort, None, cfg, log=log)
        cfg2 = dataclasses.replace(cfg, mix_mode="augmented")
        transfer_learn(base_model, micro_pediatric_cohort, micro_adult_cohort,
                       cfg2, log=log)
        by_regime = {}
        for row in log:
            by_regime.setdefault(row["regime"], []).append(row["epoch"])
        assert by_regime["new_only"] == by_regime["augmented"] == [0, 1]

    def test_improves_on_new_cohort(self, base_model, micro_pediatric_cohort):
        cfg = TrainConfig(epochs=4, folds=3, seed=11, lr=3e-3,
                          mix_mode="new_only")
        out = transfer_learn(base_model, micro_pediatric_cohort, None, cfg)
        split = split_cohort(micro_pediatric_cohort.manifest, 0, cfg)
        test = [micro_pediatric_cohort.subject(s) for s in split.test_ids]
        before = np.mean([r.mean_dsc for r in evaluate_model(base_model, test)])
        after = np.mean([r.mean_dsc for r in evaluate_model(out, test)])
        assert after > before


class TestEvaluate:
    def test_oracle_stub_scores_one(self):
        spec = PhantomSpec(dims=(20, 20, 20), seed=77, noise_sigma=0.0,
                           deform_amplitude=0.8)
        subject = generate_subject(spec)
        model = intensity_oracle_model(subject.image.data, subject.truth)
        data = SubjectData(subject_id="s0", image=subject.image,
                           truth=subject.truth)
        records = evaluate_model(model, [data])
        assert records[0].mean_dsc == 1.0
        assert all(v in (None, 1.0) for v in records[0].per_label.values())

    def test_all_background_scores_zero(self):
        spec = PhantomSpec(dims=(20, 20, 20), seed=78, deform_amplitude=0.8)
        subject = generate_subject(spec)
        model = constant_label_model((20, 20, 20), subject.truth.vocabulary, 0)
        data = SubjectData(subject_id="s0", image=subject.image,
                           truth=subject.truth)
        records = evaluate_model(model, [data])
        assert records[0].mean_dsc == 0.0

    def test_order_independent(self):
        spec = PhantomSpec(dims=(20, 20, 20), seed=79, deform_amplitude=0.8)
        subjects = []
        for i in range(3):
            s = generate_subject(dataclasses.replace(spec, seed=79 + i))
            subjects.append(SubjectData(subject_id=f"s{i}", image=s.image,
                                        truth=s.truth))
        model = constant_label_model((20, 20, 20), subjects[0].truth.vocabulary, 3)
        fwd = {r.subject_id: r.mean_dsc for r in evaluate_model(model, subjects)}
        rev = {r.subject_id: r.mean_dsc
               for r in evaluate_model(model, subjects[::-1])}
        assert fwd == rev

    def test_missing_truth(self):
        spec = PhantomSpec(dims=(20, 20, 20), seed=80, deform_amplitude=0.8)
        s = generate_subject(spec)
        model = constant_label_model((20, 20, 20), s.truth.vocabulary, 0)
        data = SubjectData(subject_id="s0", image=s.image, truth=None)
        with pytest.raises(ValueError, match="truth"):
            evaluate_model(model, [data])

    def test_reproducibility_identical_images(self):
        spec = PhantomSpec(dims=(20, 20, 20), seed=81, noise_sigma=0.0,
                           deform_amplitude=0.8)
        s = generate_subject(spec)
        model = intensity_oracle_model(s.image.data, s.truth)
        data = SubjectData(subject_id="s0", image=s.image, truth=s.truth,
                           post_image=s.image)
        records, volumes = evaluate_reproducibility(model, [data], volume_label=4)
        assert records[0].kind == "rdsc"
        assert records[0].mean_dsc == 1.0
        assert volumes[0].percent_change == 0.0

    def test_segment_dims_mismatch(self):
        spec = PhantomSpec(dims=(20, 20, 20), seed=82, deform_amplitude=0.8)
        s = generate_subject(spec)
        model = constant_label_model((20, 20, 20), s.truth.vocabulary, 0)
        small = generate_subject(dataclasses.replace(spec, dims=(24, 24, 24),
                                                     seed=83))
        with pytest.raises(ValueError, match="tile\\s?plan|dims"):
            segment_volume(model, small.image)


class TestModelCheckpoint:
    def test_save_load_round_trip(self, micro_adult_cohort, tmp_path):
        cfg = TrainConfig(epochs=1, folds=3, seed=13, lr=1e-3)
        model = pretrain(micro_adult_cohort, micro_plan(), MICRO_NET, cfg)
        p = tmp_path / "model.tbnn"
        save_model(model, p)
        back = load_model(p)
        assert back.regime_tag == model.regime_tag
        assert back.vocabulary == model.vocabulary
        assert back.selected_epoch == model.selected_epoch
        assert back.plan.origins == model.plan.origins
        for k, v in model.bank.tensors().items():
            np.testing.assert_array_equal(back.bank.tensors()[k], v)
        sid = micro_adult_cohort.manifest.subject_ids()[0]
        img = micro_adult_cohort.subject(sid).image
        np.testing.assert_array_equal(segment_volume(back, img).labels,
                                      segment_volume(model, img).labels)


def write_micro_experiment_spec(tmp_path, adult_dir, original_dir, new_dir,
                                metric="pdsc", epochs=2, folds=2, seed=21):
    doc = {
        "name": "micro",
        "cohorts": {"pretrain": str(adult_dir / "manifest.json"),
                    "original": str(original_dir / "manifest.json"),
                    "new": str(new_dir / "manifest.json")},
        "tile": {"tiles_per_axis": [2, 2, 2], "tile_shape": [12, 12, 12]},
        "network": {"num_classes": 5, "hidden_channels": 4, "hidden_layers": 1},
        "train": {"epochs": epochs, "lr": 0.003, "folds": folds, "seed": seed},
        "evaluation": {"new_metric": metric, "volume_label": 4},
        "out_dir": "out",
    }
    spec_path = tmp_path / "experiment.json"
    spec_path.write_text(json.dumps(doc, indent=2))
    return spec_path


@pytest.fixture(scope="module")
def micro_experiment_dirs(tmp_path_factory):
    from tileseg.phantom import generate_cohort
    from conftest import micro_spec
    root = tmp_path_factory.mktemp("micro_exp")
    adult = root / "adult"
    original = root / "original"
    ped = root / "ped"
    contrast = root / "contrast"
    generate_cohort(micro_spec(seed=500), 5, "original", adult)
    generate_cohort(micro_spec(seed=550), 4, "original", original)
    generate_cohort(micro_spec(seed=600, scale=0.8, gm_intensity=0.8), 4,
                    "new", ped)
    generate_cohort(micro_spec(seed=700, enhancement_delta=0.5), 4,
                    "contrast_pair", contrast)
    return root, adult, original, ped, contrast


class TestRunExperiment:
    def test_structure_and_determinism(self, micro_experiment_dirs, tmp_path):
        root, adult, original, ped, _ = micro_experiment_dirs
        spec_path = write_micro_experiment_spec(tmp_path, adult, original, ped)
        spec = ExperimentSpec.from_json(spec_path)
        report = run_experiment(spec)
        data = report.data
        assert data["regimes"] == ["baseline", "new_only", "augmented"]
        assert set(data["panels"]) == {"new_cohort", "original_cohort"}
        assert len(data["per_fold"]) == 2
        for panel in data["panels"].values():
            assert set(panel["per_regime"]) == set(data["regimes"])
            assert len(panel["comparisons"]) == 3
            for regime, entry in panel["per_regime"].items():
                vals = [e["value"] for e in entry["per_subject"]]
                assert entry["mean"] == pytest.approx(float(np.mean(vals)))
                assert entry["n"] == len(vals)
        # reproducibility: a rerun yields a byte-identical report
        report2 = run_experiment(ExperimentSpec.from_json(spec_path))
        assert report.to_json() == report2.to_json()

    def test_output_files(self, micro_experiment_dirs, tmp_path):
        root, adult, original, ped, _ = micro_experiment_dirs
        spec_path = write_micro_experiment_spec(tmp_path, adult, original, ped,
                                                epochs=1)
        spec = ExperimentSpec.from_json(spec_path)
        report = run_experiment(spec)
        out = tmp_path / "out"
        for name in ("report.json", "training_log.csv", "metrics_new_cohort.csv",
                     "metrics_original_cohort.csv", "summary.csv", "stats.csv"):
            assert (out / name).exists(), name
        assert json.loads((out / "report.json").read_text()) == report.data
        ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
        assert ckpts == [f"fold{f}_{r}.tbnn" for f in range(2)
                         for r in ("augmented", "baseline", "new_only")]
        model = load_model(out / "checkpoints" / "fold0_baseline.tbnn")
        assert model.regime_tag == "baseline"

    def test_rdsc_experiment(self, micro_experiment_dirs, tmp_path):
        root, adult, original, _, contrast = micro_experiment_dirs
        spec_path = write_micro_experiment_spec(tmp_path, adult, original,
                                                contrast, metric="rdsc",
                                                epochs=1)
        spec = ExperimentSpec.from_json(spec_path)
        report = run_experiment(spec)
        vc = report.data["volume_change"]
        assert vc["label"] == 4
        for regime in ("baseline", "new_only", "augmented"):
            entry = vc["per_regime"][regime]
            assert len(entry["per_subject"]) == 4  # every subject tested once
            per = [e["percent_change"] for e in entry["per_subject"]]
            assert entry["mean_percent_change"] == pytest.approx(float(np.mean(per)))
        assert report.data["panels"]["new_cohort"]["metric"] == "rdsc"
        assert (tmp_path / "out" / "volume_change.csv").exists()

    def test_threads_match_sequential(self, micro_experiment_dirs, tmp_path):
        root, adult, original, ped, _ = micro_experiment_dirs
        spec_path = write_micro_experiment_spec(tmp_path, adult, original, ped,
                                                epochs=1)
        spec = dataclasses.replace(ExperimentSpec.from_json(spec_path),
                                   out_dir=None)
        seq = run_experiment(spec, threads=1)
        par = run_experiment(spec, threads=2)
        assert seq.to_json() == par.to_json()
