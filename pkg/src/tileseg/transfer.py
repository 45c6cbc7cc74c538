"""Training regimes and the experiment harness.

A run pretrains the tile ensemble on an adult cohort (the baseline), then
continues training either on the new cohort alone (new_only) or on the new
cohort mixed with the original adult cohort (augmented), and evaluates every
regime on both the new cohort's and the original cohort's held-out test
splits. Splits realize an 80/10/10 protocol through contiguous fold blocks
of a seeded permutation, so the per-fold test sets partition each cohort.

Contrast cohorts train the post-contrast image against labels the baseline
predicted on the pre-contrast image, and are scored by reproducibility DSC
between the model's own pre and post segmentations.

Everything is a pure function of (spec, seed): random streams are derived
from the config seed with fixed purpose tags, and the epoch shuffle stream
depends only on (seed, fold, epoch) so regimes share identical schedules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation, nnet, tiling, volio
from .evaluation import (
    VolumeChangeRecord,
    dsc_record,
    mean_dsc,
    reproducibility_dsc,
    volume_change_stats,
    wilcoxon_signed_rank,
)
from .nnet import NetworkConfig, ParamsBank, bank_forward
from .tiling import TilePlan, crop_grid, fuse_label_grids, plan_tiles
from .volio import CohortManifest, LabelMap, Volume3D

REGIMES = ("baseline", "new_only", "augmented")

# purpose tags for derived random streams
_STREAM_SPLIT = 1
_STREAM_INIT = 2
_STREAM_EPOCH = 3


class TrainingDivergence(ArithmeticError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    folds: int = 5
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    mix_mode: str = "new_only"
    seed: int = 0
    original_fraction: float = 1.0

    def validate(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.folds < 1:
            raise ValueError(f"folds must be >= 1, got {self.folds}")
        if self.mix_mode not in ("new_only", "augmented"):
            raise ValueError(f"unknown mix_mode {self.mix_mode!r}")
        if not 0 < self.original_fraction <= 1:
            raise ValueError(
                f"original_fraction must be in (0, 1], got {self.original_fraction}")


@dataclass
class SplitAssignment:
    train_ids: list[str]
    validation_ids: list[str]
    test_ids: list[str]


@dataclass
class SubjectData:
    subject_id: str
    image: Volume3D
    truth: LabelMap | None = None
    post_image: Volume3D | None = None
    cohort_tag: str = "original"


@dataclass
class Cohort:
    manifest: CohortManifest
    subjects: dict[str, SubjectData]

    def subject(self, sid: str) -> SubjectData:
        return self.subjects[sid]

    def __len__(self) -> int:
        return len(self.subjects)


@dataclass
class TrainPair:
    subject_id: str
    input_volume: Volume3D
    target: LabelMap


@dataclass
class TrainedModel:
    bank: ParamsBank
    net_config: NetworkConfig
    plan: TilePlan
    vocabulary: list[tuple[int, str]]
    regime_tag: str
    validation_curve: list[float] = field(default_factory=list)
    selected_epoch: int | None = None
    background_id: int = 0

    @property
    def label_ids(self) -> list[int]:
        return [i for i, _ in self.vocabulary]

    @property
    def tile_models(self) -> list:
        return self.bank.models()


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(tags)))


def load_cohort(manifest: CohortManifest) -> Cohort:
    subjects = {}
    for rec in manifest.subjects:
        truth = None
        if rec.label_path:
            truth = volio.read_labelmap(rec.label_path)
        post = None
        if rec.paired_image_path:
            post = volio.read_volume(rec.paired_image_path)
        subjects[rec.subject_id] = SubjectData(
            subject_id=rec.subject_id,
            image=volio.read_volume(rec.image_path),
            truth=truth,
            post_image=post,
            cohort_tag=rec.cohort_tag,
        )
    return Cohort(manifest=manifest, subjects=subjects)


def split_cohort(manifest: CohortManifest, fold: int,
                 config: TrainConfig) -> SplitAssignment:
    """Contiguous fold blocks of one seeded permutation; block = val + test."""
    config.validate()
    ids = manifest.subject_ids()
    if len(ids) < config.folds:
        raise ValueError(
            f"cohort of {len(ids)} too small for {config.folds} folds")
    if not 0 <= fold < config.folds:
        raise ValueError(f"fold {fold} out of range for {config.folds} folds")
    perm = _rng(config.seed, _STREAM_SPLIT).permutation(len(ids))
    ordered = [ids[i] for i in perm]
    blocks = np.array_split(np.arange(len(ids)), config.folds)
    lo, hi = blocks[fold][0], blocks[fold][-1] + 1
    held = ordered[lo:hi]
    validation = held[:len(held) // 2]  # odd element goes to test
    test = held[len(held) // 2:]
    train = ordered[:lo] + ordered[hi:]
    return SplitAssignment(train_ids=train, validation_ids=validation,
                           test_ids=test)


# ---------------------------------------------------------------------------
# tile-ensemble inference

def _tile_stack(plan: TilePlan, grid: np.ndarray) -> np.ndarray:
    crops = [crop_grid(grid, o, plan.tile_shape) for o in plan.origins]
    return np.stack(crops)[:, None]  # (T, 1, d, h, w)


def _onehot_stack(plan: TilePlan, labels: np.ndarray,
                  label_ids: list[int]) -> np.ndarray:
    lut = np.asarray(label_ids, dtype=np.int32)
    channel = np.searchsorted(lut, labels.astype(np.int32))
    crops = [crop_grid(channel, o, plan.tile_shape) for o in plan.origins]
    t = len(crops)
    c = len(label_ids)
    out = np.zeros((t,) + (c,) + tuple(plan.tile_shape), dtype=np.float32)
    for i, crop in enumerate(crops):
        for ch in range(c):
            out[i, ch] = crop == ch
    return out


def segment_grid(model: TrainedModel, grid: np.ndarray) -> np.ndarray:
    """Tile-wise forward passes fused by majority vote; returns a label grid."""
    if tuple(grid.shape) != tuple(model.plan.volume_dims):
        raise ValueError(
            f"volume dims {tuple(grid.shape)} do not match the model's tile "
            f"plan {tuple(model.plan.volume_dims)}")
    crops = _tile_stack(model.plan, np.asarray(grid, dtype=np.float32))
    probs, _ = bank_forward(crops, model.bank, keep_cols=False)
    channels = probs.argmax(axis=1).astype(np.int32)
    lut = np.asarray(model.label_ids, dtype=np.int32)
    grids = [lut[channels[i]] for i in range(channels.shape[0])]
    return fuse_label_grids(model.plan, grids, model.label_ids)


def segment_volume(model: TrainedModel, volume: Volume3D) -> LabelMap:
    labels = segment_grid(model, volume.data)
    return LabelMap(dims=tuple(model.plan.volume_dims),
                    voxel_size=volume.header.voxel_size,
                    labels=labels, vocabulary=list(model.vocabulary),
                    background_id=model.background_id)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class _TrainItem:
    subject_id: str
    crops: np.ndarray
    onehots: np.ndarray


def _prepare_items(plan, pairs, label_ids):
    items = []
    for pair in pairs:
        items.append(_TrainItem(
            subject_id=pair.subject_id,
            crops=_tile_stack(plan, pair.input_volume.data),
            onehots=_onehot_stack(plan, pair.target.labels, label_ids),
        ))
    return items


def _validation_dsc(bank, model_template: TrainedModel, val_pairs) -> float:
    probe = replace(model_template, bank=bank)
    scores = []
    for pair in val_pairs:
        seg = segment_grid(probe, pair.input_volume.data)
        lm = LabelMap(dims=pair.target.dims, voxel_size=pair.target.voxel_size,
                      labels=seg, vocabulary=list(model_template.vocabulary),
                      background_id=model_template.background_id)
        per_label = evaluation.dsc_per_label(lm, pair.target)
        scores.append(mean_dsc(per_label, model_template.background_id))
    return float(np.mean(scores))


def _train(bank, template: TrainedModel, train_pairs, val_pairs,
           config: TrainConfig, fold: int, regime: str, log=None):
    """Shared epoch loop; selects the epoch with the best validation DSC."""
    if not train_pairs:
        raise ValueError(f"{regime}: empty training set")
    if config.epochs > 0 and not val_pairs:
        raise ValueError(f"{regime}: empty validation split, cannot select a model")
    items = _prepare_items(template.plan, train_pairs, template.label_ids)
    state = nnet.init_adam_state(bank, lr=config.lr)
    current = bank
    curve: list[float] = []
    best_bank, best_dsc, best_epoch = bank, -np.inf, None
    for epoch in range(config.epochs):
        order = _rng(config.seed, _STREAM_EPOCH, fold, epoch).permutation(len(items))
        epoch_losses = []
        for idx in order:
            item = items[idx]
            probs, cache = bank_forward(item.crops, current)
            tile_losses, grad_probs = nnet.bank_dice_loss(probs, item.onehots)
            if not np.isfinite(tile_losses).all():
                raise TrainingDivergence(
                    f"non-finite loss in {regime} at fold {fold}, epoch {epoch}, "
                    f"subject {item.subject_id}")
            grads = nnet.bank_backward(cache, grad_probs)
            current, state = nnet.adam_step(current, grads, state)
            epoch_losses.append(float(tile_losses.mean()))
        val = _validation_dsc(current, template, val_pairs)
        curve.append(val)
        if log is not None:
            log.append({"fold": fold, "regime": regime, "epoch": epoch,
                        "train_loss": float(np.mean(epoch_losses)),
                        "val_dsc": val})
        if val > best_dsc:  # strict: ties keep the earliest epoch
            best_bank, best_dsc, best_epoch = current, val, epoch
    if config.epochs == 0:
        return bank, curve, None
    return best_bank, curve, best_epoch


def _truth_pairs(cohort: Cohort, ids) -> list[TrainPair]:
    pairs = []
    for sid in ids:
        s = cohort.subject(sid)
        if s.truth is None:
            raise ValueError(f"subject {sid} has no truth labels")
        pairs.append(TrainPair(subject_id=sid, input_volume=s.image,
                               target=s.truth))
    return pairs


def _pseudo_pairs(cohort: Cohort, ids, targets) -> list[TrainPair]:
    pairs = []
    for sid in ids:
        s = cohort.subject(sid)
        if s.post_image is None:
            raise ValueError(f"subject {sid} has no paired post image")
        if sid not in targets:
            raise ValueError(f"subject {sid} has no predicted labels")
        pairs.append(TrainPair(subject_id=sid, input_volume=s.post_image,
                               target=targets[sid]))
    return pairs


def _cohort_vocabulary(cohort: Cohort):
    for s in cohort.subjects.values():
        if s.truth is not None:
            return list(s.truth.vocabulary), s.truth.background_id
    raise ValueError("cohort has no truth labels to derive a vocabulary from")


def pretrain(cohort: Cohort, tile_plan: TilePlan, net_config: NetworkConfig,
             train_config: TrainConfig, fold: int = 0, log=None) -> TrainedModel:
    """Train one model per tile on the cohort's train split (the baseline)."""
    train_config.validate()
    net_config.validate()
    vocabulary, background_id = _cohort_vocabulary(cohort)
    if net_config.num_classes != len(vocabulary):
        raise ValueError(
            f"network has {net_config.num_classes} classes but the vocabulary "
            f"has {len(vocabulary)} labels")
    split = split_cohort(cohort.manifest, fold, train_config)
    bank = nnet.init_bank(net_config, tile_plan.num_tiles,
                          seed=int(_rng(train_config.seed, _STREAM_INIT,
                                        fold).integers(0, 2 ** 31)))
    template = TrainedModel(bank=bank, net_config=net_config, plan=tile_plan,
                            vocabulary=vocabulary, regime_tag="baseline",
                            background_id=background_id)
    train_pairs = _truth_pairs(cohort, split.train_ids)
    val_pairs = _truth_pairs(cohort, split.validation_ids)
    best, curve, best_epoch = _train(bank, template, train_pairs, val_pairs,
                                     train_config, fold, "baseline", log)
    return replace(template, bank=best, validation_curve=curve,
                   selected_epoch=best_epoch)


def transfer_learn(base: TrainedModel, new_cohort: Cohort,
                   original_cohort: Cohort | None, config: TrainConfig,
                   fold: int = 0, log=None, new_targets=None) -> TrainedModel:
    """Continue training from the base model on new data, optionally mixed
    with the original cohort; selection uses the new cohort's validation
    split. ``new_targets`` substitutes predicted labels (and the paired
    post image as input) for contrast flows."""
    config.validate()
    regime = config.mix_mode
    if regime == "augmented" and (original_cohort is None or len(original_cohort) == 0):
        raise ValueError("augmented mode requires a non-empty original cohort")
    split_new = split_cohort(new_cohort.manifest, fold, config)

    def new_pairs(ids):
        if new_targets is None:
            return _truth_pairs(new_cohort, ids)
        return _pseudo_pairs(new_cohort, ids, new_targets)

    train_pairs = new_pairs(split_new.train_ids)
    if regime == "augmented":
        split_orig = split_cohort(original_cohort.manifest, fold, config)
        take = int(round(config.original_fraction * len(split_orig.train_ids)))
        if take == 0:
            raise ValueError("augmented mode selected no original subjects")
        train_pairs = train_pairs + _truth_pairs(original_cohort,
                                                 split_orig.train_ids[:take])
    val_pairs = new_pairs(split_new.validation_ids)
    best, curve, best_epoch = _train(base.bank, base, train_pairs, val_pairs,
                                     config, fold, regime, log)
    return replace(base, bank=best, regime_tag=regime, validation_curve=curve,
                   selected_epoch=best_epoch)


# ---------------------------------------------------------------------------
# evaluation flows

def evaluate_model(model: TrainedModel, subjects) -> list:
    """Per-subject DSC of fused predictions against truth labels."""
    records = []
    for s in subjects:
        if s.truth is None:
            raise ValueError(f"subject {s.subject_id} has no truth labels")
        seg = segment_volume(model, s.image)
        records.append(dsc_record(seg, s.truth, subject_id=s.subject_id,
                                  kind="pdsc"))
    return records


def evaluate_reproducibility(model: TrainedModel, subjects,
                             volume_label: int | None = None):
    """rDSC between the model's own pre and post segmentations, plus volume
    change records for one designated label."""
    records, volumes = [], []
    for s in subjects:
        if s.post_image is None:
            raise ValueError(f"subject {s.subject_id} has no paired post image")
        seg_pre = segment_volume(model, s.image)
        seg_post = segment_volume(model, s.post_image)
        records.append(reproducibility_dsc(seg_pre, seg_post,
                                           subject_id=s.subject_id))
        if volume_label is not None:
            volumes.append(VolumeChangeRecord(
                subject_id=s.subject_id,
                pre_volume_cm3=evaluation.region_volume(seg_pre, volume_label),
                post_volume_cm3=evaluation.region_volume(seg_post, volume_label),
            ))
    return records, volumes


# ---------------------------------------------------------------------------
# whole experiments

@dataclass
class ExperimentSpec:
    name: str
    pretrain_manifest: str
    original_manifest: str
    new_manifest: str
    tile_shape: tuple[int, int, int]
    tiles_per_axis: tuple[int, int, int] = (3, 3, 3)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(num_classes=5))
    train: TrainConfig = field(default_factory=TrainConfig)
    new_metric: str = "pdsc"  # pdsc: score vs truth; rdsc: pre/post consistency
    volume_label: int | None = None
    bonferroni_new: int = 3
    bonferroni_original: int = 6
    alpha: float = 0.05
    out_dir: str | None = None

    def validate(self) -> None:
        if self.new_metric not in ("pdsc", "rdsc"):
            raise ValueError(f"unknown new_metric {self.new_metric!r}")
        self.network.validate()
        self.train.validate()

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from exc
        base = path.parent

        def _path(p):
            return str((base / p).resolve())

        try:
            cohorts = doc["cohorts"]
            tile = doc["tile"]
            spec = cls(
                name=doc.get("name", path.stem),
                pretrain_manifest=_path(cohorts["pretrain"]),
                original_manifest=_path(cohorts["original"]),
                new_manifest=_path(cohorts["new"]),
                tile_shape=tuple(tile["tile_shape"]),
                tiles_per_axis=tuple(tile.get("tiles_per_axis", (3, 3, 3))),
                network=NetworkConfig.from_dict(doc["network"]),
                train=TrainConfig(**doc.get("train", {})),
                new_metric=doc.get("evaluation", {}).get("new_metric", "pdsc"),
                volume_label=doc.get("evaluation", {}).get("volume_label"),
                bonferroni_new=doc.get("evaluation", {}).get("bonferroni_new", 3),
                bonferroni_original=doc.get("evaluation", {}).get(
                    "bonferroni_original", 6),
                alpha=doc.get("evaluation", {}).get("alpha", 0.05),
                out_dir=(str((base / doc["out_dir"]).resolve())
                         if doc.get("out_dir") else None),
            )
        except KeyError as exc:
            raise ValueError(f"{path}: missing experiment spec field {exc}") from exc
        spec.validate()
        return spec


@dataclass
class ExperimentReport:
    data: dict

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1) + "\n"

    def panel(self, name: str) -> dict:
        return self.data["panels"][name]

    def regime_mean(self, panel: str, regime: str) -> float:
        return self.panel(panel)["per_regime"][regime]["mean"]

    def fold_mean(self, fold: int, panel: str, regime: str) -> float:
        return self.data["per_fold"][fold][panel][regime]

    @property
    def folds(self) -> int:
        return len(self.data["per_fold"])


def _per_subject_sorted(values: dict[str, float]):
    return [{"subject_id": sid, "fold": values[sid][0], "value": values[sid][1]}
            for sid in sorted(values)]


def _panel_summary(per_regime_values, comparisons_m, alpha):
    """per_regime_values: regime -> {sid: (fold, value)}"""
    panel = {"per_regime": {}, "comparisons": []}
    for regime, values in per_regime_values.items():
        listed = _per_subject_sorted(values)
        vals = [e["value"] for e in listed]
        panel["per_regime"][regime] = {
            "per_subject": listed,
            "mean": float(np.mean(vals)),
            "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            "n": len(vals),
        }
    pairs = [("baseline", "new_only"), ("baseline", "augmented"),
             ("new_only", "augmented")]
    for a, b in pairs:
        ids = sorted(set(per_regime_values[a]) & set(per_regime_values[b]))
        x = [per_regime_values[a][sid][1] for sid in ids]
        y = [per_regime_values[b][sid][1] for sid in ids]
        entry = {"pair": [a, b], "m": comparisons_m,
                 "threshold": evaluation.bonferroni(alpha, comparisons_m)}
        try:
            r = wilcoxon_signed_rank(x, y, n_comparisons=comparisons_m,
                                     alpha=alpha, comparison=f"{a}_vs_{b}")
            entry.update({"n_pairs": r.n_pairs, "w_plus": r.w_plus,
                          "p": r.p_two_sided, "significant": r.significant})
        except ValueError:
            # identical samples: the test is undefined for this pair
            entry.update({"n_pairs": 0, "w_plus": None, "p": None,
                          "significant": False})
        panel["comparisons"].append(entry)
    return panel


def save_model(model: TrainedModel, path) -> None:
    meta = {
        "network": model.net_config.to_dict(),
        "tile_plan": {
            "volume_dims": list(model.plan.volume_dims),
            "tiles_per_axis": list(model.plan.tiles_per_axis),
            "tile_shape": list(model.plan.tile_shape),
        },
        "vocabulary": [[int(i), n] for i, n in model.vocabulary],
        "background_id": model.background_id,
        "regime": model.regime_tag,
        "selected_epoch": model.selected_epoch,
        "validation_curve": model.validation_curve,
    }
    nnet.save_checkpoint(path, meta, model.bank.models())


def load_model(path) -> TrainedModel:
    meta, models = nnet.load_checkpoint(path)
    cfg = NetworkConfig.from_dict(meta["network"])
    tp = meta["tile_plan"]
    plan = plan_tiles(tuple(tp["volume_dims"]), tuple(tp["tiles_per_axis"]),
                      tuple(tp["tile_shape"]))
    if plan.num_tiles != len(models):
        raise ValueError(
            f"checkpoint has {len(models)} models for a plan of "
            f"{plan.num_tiles} tiles")
    return TrainedModel(
        bank=ParamsBank.from_models(models), net_config=cfg, plan=plan,
        vocabulary=[(int(i), n) for i, n in meta["vocabulary"]],
        regime_tag=meta.get("regime", "baseline"),
        validation_curve=list(meta.get("validation_curve", [])),
        selected_epoch=meta.get("selected_epoch"),
        background_id=int(meta.get("background_id", 0)),
    )


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Run the full multi-fold protocol and aggregate the report."""
    spec.validate()
    pretrain_cohort = load_cohort(volio.load_manifest(spec.pretrain_manifest))
    original_cohort = load_cohort(volio.load_manifest(spec.original_manifest))
    new_cohort = load_cohort(volio.load_manifest(spec.new_manifest))

    first = next(iter(pretrain_cohort.subjects.values()))
    plan = plan_tiles(first.image.dims, spec.tiles_per_axis, spec.tile_shape)
    folds = spec.train.folds

    out_dir = Path(spec.out_dir) if spec.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "checkpoints").mkdir(exist_ok=True)

    def run_fold(fold: int):
        log_rows: list[dict] = []
        cfg = spec.train
        baseline = pretrain(pretrain_cohort, plan, spec.network, cfg, fold,
                            log_rows)
        new_targets = None
        if spec.new_metric == "rdsc":
            split_new = split_cohort(new_cohort.manifest, fold, cfg)
            new_targets = {}
            for sid in split_new.train_ids + split_new.validation_ids:
                new_targets[sid] = segment_volume(
                    baseline, new_cohort.subject(sid).image)
        new_only = transfer_learn(baseline, new_cohort, None,
                                  replace(cfg, mix_mode="new_only"), fold,
                                  log_rows, new_targets)
        augmented = transfer_learn(baseline, new_cohort, original_cohort,
                                   replace(cfg, mix_mode="augmented"), fold,
                                   log_rows, new_targets)
        models = {"baseline": baseline, "new_only": new_only,
                  "augmented": augmented}

        split_new = split_cohort(new_cohort.manifest, fold, cfg)
        split_orig = split_cohort(original_cohort.manifest, fold, cfg)
        new_test = [new_cohort.subject(s) for s in split_new.test_ids]
        orig_test = [original_cohort.subject(s) for s in split_orig.test_ids]

        fold_out = {"fold": fold, "log": log_rows, "new": {}, "original": {},
                    "volumes": {}, "metrics_new": {}, "metrics_original": {}}
        for regime, model in models.items():
            if spec.new_metric == "rdsc":
                label = spec.volume_label if spec.volume_label is not None else 4
                recs, vols = evaluate_reproducibility(model, new_test, label)
                fold_out["volumes"][regime] = vols
            else:
                recs = evaluate_model(model, new_test)
            fold_out["new"][regime] = [(r.subject_id, r.mean_dsc) for r in recs]
            fold_out["metrics_new"][regime] = recs
            orig_recs = evaluate_model(model, orig_test)
            fold_out["original"][regime] = [(r.subject_id, r.mean_dsc)
                                            for r in orig_recs]
            fold_out["metrics_original"][regime] = orig_recs
            if out_dir:
                save_model(model,
                           out_dir / "checkpoints" / f"fold{fold}_{regime}.tbnn")
        return fold_out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=min(threads, folds)) as ex:
            fold_results = list(ex.map(run_fold, range(folds)))
    else:
        fold_results = [run_fold(f) for f in range(folds)]

    # aggregate: each subject is tested in exactly one fold
    new_values = {r: {} for r in REGIMES}
    orig_values = {r: {} for r in REGIMES}
    vol_records = {r: [] for r in REGIMES}
    per_fold = []
    log_rows = []
    metric_records_new, metric_records_orig = [], []
    for res in fold_results:
        log_rows.extend(res["log"])
        fold_entry = {"fold": res["fold"], "new_cohort": {}, "original_cohort": {}}
        for regime in REGIMES:
            for sid, val in res["new"][regime]:
                new_values[regime][sid] = (res["fold"], float(val))
            for sid, val in res["original"][regime]:
                orig_values[regime][sid] = (res["fold"], float(val))
            fold_entry["new_cohort"][regime] = float(
                np.mean([v for _, v in res["new"][regime]]))
            fold_entry["original_cohort"][regime] = float(
                np.mean([v for _, v in res["original"][regime]]))
            vol_records[regime].extend(res["volumes"].get(regime, []))
            metric_records_new.extend(res["metrics_new"][regime])
            metric_records_orig.extend(res["metrics_original"][regime])
        per_fold.append(fold_entry)

    panels = {
        "new_cohort": {"metric": spec.new_metric,
                       **_panel_summary(new_values, spec.bonferroni_new,
                                        spec.alpha)},
        "original_cohort": {"metric": "pdsc",
                            **_panel_summary(orig_values,
                                             spec.bonferroni_original,
                                             spec.alpha)},
    }

    volume_change = None
    if spec.new_metric == "rdsc":
        label = spec.volume_label if spec.volume_label is not None else 4
        volume_change = {"label": label, "per_regime": {}}
        for regime in REGIMES:
            recs = vol_records[regime]
            mean_pc, rmse = volume_change_stats(recs)
            volume_change["per_regime"][regime] = {
                "per_subject": [{"subject_id": r.subject_id,
                                 "pre_cm3": float(r.pre_volume_cm3),
                                 "post_cm3": float(r.post_volume_cm3),
                                 "percent_change": float(r.percent_change)}
                                for r in sorted(recs, key=lambda r: r.subject_id)],
                "mean_percent_change": float(mean_pc),
                "rmse_cm3": float(rmse),
                "mean_abs_percent_change": float(
                    np.mean([abs(r.percent_change) for r in recs])),
            }

    report = ExperimentReport(data={
        "name": spec.name,
        "new_metric": spec.new_metric,
        "seed": spec.train.seed,
        "folds": folds,
        "epochs": spec.train.epochs,
        "regimes": list(REGIMES),
        "panels": panels,
        "volume_change": volume_change,
        "per_fold": per_fold,
    })

    if out_dir:
        _write_experiment_files(out_dir, report, log_rows,
                                metric_records_new, metric_records_orig)
    return report


def _write_experiment_files(out_dir: Path, report: ExperimentReport, log_rows,
                            metric_records_new, metric_records_orig) -> None:
    import csv

    (out_dir / "report.json").write_text(report.to_json())
    with open(out_dir / "training_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "regime", "epoch", "train_loss", "val_dsc"])
        for row in log_rows:
            w.writerow([row["fold"], row["regime"], row["epoch"],
                        f"{row['train_loss']:.6f}", f"{row['val_dsc']:.6f}"])
    evaluation.write_metrics_csv(metric_records_new,
                                 out_dir / "metrics_new_cohort.csv")
    evaluation.write_metrics_csv(metric_records_orig,
                                 out_dir / "metrics_original_cohort.csv")
    summary_rows = []
    stats = []
    for panel_name, panel in report.data["panels"].items():
        for regime, entry in panel["per_regime"].items():
            summary_rows.append((regime, panel_name, entry["mean"], entry["sd"],
                                 entry["n"]))
        for comp in panel["comparisons"]:
            stats.append(evaluation.StatResult(
                n_pairs=comp["n_pairs"], w_plus=comp["w_plus"] or 0.0,
                p_two_sided=comp["p"] if comp["p"] is not None else 1.0,
                n_comparisons=comp["m"],
                comparison=f"{panel_name}:{comp['pair'][0]}_vs_{comp['pair'][1]}"))
    evaluation.write_summary_csv(summary_rows, out_dir / "summary.csv")
    evaluation.write_stats_csv(stats, out_dir / "stats.csv")
    if report.data["volume_change"]:
        with open(out_dir / "volume_change.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["regime", "subject_id", "pre_cm3", "post_cm3",
                        "percent_change"])
            for regime, entry in report.data["volume_change"]["per_regime"].items():
                for r in entry["per_subject"]:
                    w.writerow([regime, r["subject_id"], f"{r['pre_cm3']:.6f}",
                                f"{r['post_cm3']:.6f}",
                                f"{r['percent_change']:.4f}"])
