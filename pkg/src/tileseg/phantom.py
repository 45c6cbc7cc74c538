"""Deterministic synthetic cohorts with exact ground-truth labels.

Each subject is a nest of randomly jittered concentric ellipsoids (CSF rim
around a GM shell around a WM core, with a small spherical HC analog buried
in the core), smoothly warped by a low-frequency displacement field and
rendered as per-label intensities plus Gaussian noise. All geometry scales
with ``spec.scale`` so a pediatric cohort is a shrunken adult cohort,
and everything is a pure function of the seed.

Contrast pairs share anatomy and truth; the post image adds
``enhancement_delta`` to an enhancing mask (the CSF rim plus a seeded random
10% of GM voxels) before its own independent noise draw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .volio import (
    CohortManifest,
    LabelMap,
    SubjectRecord,
    Volume3D,
    VolumeHeader,
    save_manifest,
    write_labelmap,
    write_volume,
)

LABEL_VOCABULARY = [
    (0, "background"),
    (1, "csf_rim"),
    (2, "gm_shell"),
    (3, "wm_core"),
    (4, "hc_analog"),
]
MIN_LABEL_VOXELS = 8

# enhancing mask = CSF rim plus this fraction of GM voxels
GM_ENHANCEMENT_FRACTION = 0.10


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    scale: float = 1.0
    gm_intensity: float = 0.6
    wm_intensity: float = 1.0
    csf_intensity: float = 0.3
    hc_intensity: float = 0.55
    noise_sigma: float = 0.05
    deform_amplitude: float = 1.5
    enhancement_delta: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.scale <= 1:
            raise ValueError(f"scale must be in (0, 1], got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.deform_amplitude < 0:
            raise ValueError(
                f"deform_amplitude must be >= 0, got {self.deform_amplitude}")
        vals = [self.gm_intensity, self.wm_intensity, self.csf_intensity,
                self.hc_intensity, self.enhancement_delta]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intensities must be finite")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")


@dataclass
class PhantomSubject:
    image: Volume3D
    truth: LabelMap
    post_image: Volume3D | None = None


def load_presets() -> dict:
    with resources.files("tileseg.data").joinpath("presets.json").open() as fh:
        return json.load(fh)


def spec_from_preset(name: str, seed: int = 0, **overrides) -> PhantomSpec:
    presets = load_presets()
    if name not in presets or name == "version":
        known = sorted(k for k in presets if k != "version")
        raise ValueError(f"unknown preset {name!r}; known presets: {known}")
    fields = dict(presets[name])
    fields["dims"] = tuple(fields["dims"])
    fields.update(overrides)
    spec = PhantomSpec(seed=seed, **fields)
    spec.validate()
    return spec


def _geometry_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = spec.dims
    dims = np.array(spec.dims, dtype=np.float64)
    s = spec.scale

    # all geometry is drawn in brain-relative units and multiplied by the
    # scale, so two specs differing only in scale are exact homotheties
    center = (dims - 1) / 2.0 + s * rng.uniform(-1.5, 1.5, size=3)
    semi = s * dims * (0.40 + rng.uniform(-0.02, 0.02, size=3))
    rho_gm = 0.84 + rng.uniform(-0.02, 0.02)
    rho_wm = 0.62 + rng.uniform(-0.02, 0.02)

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    hc_offset = 0.45 * direction * rho_wm * semi
    hc_radius = (0.42 + rng.uniform(-0.03, 0.03)) * rho_wm * semi.min()
    hc_center = center + hc_offset

    freqs = rng.uniform(0.4, 1.2, size=(3, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)

    grid = np.indices(spec.dims, dtype=np.float64)  # (3, nx, ny, nz)
    q = (grid - center.reshape(3, 1, 1, 1)) / (s * dims.reshape(3, 1, 1, 1))
    warped = np.empty_like(grid)
    amp = spec.deform_amplitude * s
    for axis in range(3):
        phase_field = 2.0 * np.pi * np.tensordot(freqs[axis], q, axes=(0, 0))
        warped[axis] = grid[axis] + amp * np.sin(phase_field + phases[axis])

    rel = (warped - center.reshape(3, 1, 1, 1)) / semi.reshape(3, 1, 1, 1)
    rho = np.sqrt((rel ** 2).sum(axis=0))
    hc_d2 = ((warped - hc_center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)

    labels = np.zeros(spec.dims, dtype=np.int32)
    labels[rho <= 1.0] = 1
    labels[rho <= rho_gm] = 2
    labels[rho <= rho_wm] = 3
    labels[(hc_d2 <= hc_radius ** 2) & (rho <= rho_wm)] = 4

    for lab in (1, 2, 3, 4):
        count = int((labels == lab).sum())
        if count < MIN_LABEL_VOXELS:
            raise ValueError(
                f"phantom too small: label {lab} has {count} voxels "
                f"(need >= {MIN_LABEL_VOXELS})"
            )
    return labels


def _intensity_lut(spec: PhantomSpec) -> np.ndarray:
    return np.array([0.0, spec.csf_intensity, spec.gm_intensity,
                     spec.wm_intensity, spec.hc_intensity], dtype=np.float32)


def _as_volume(data: np.ndarray, dims) -> Volume3D:
    header = VolumeHeader(dims=tuple(dims), voxel_size=(1.0, 1.0, 1.0),
                          datatype="float32")
    return Volume3D(header=header, data=data.astype(np.float32, copy=False))


def _render(clean: np.ndarray, sigma: float, rng: np.random.Generator,
            dims) -> Volume3D:
    if sigma > 0:
        data = (clean + rng.normal(0.0, sigma, size=clean.shape)).astype(np.float32)
    else:
        data = clean.astype(np.float32, copy=True)
    return _as_volume(data, dims)


def generate_subject(spec: PhantomSpec) -> PhantomSubject:
    """Generate one subject; deterministic given the spec's seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = _geometry_labels(spec, rng)
    clean = _intensity_lut(spec)[labels]
    image = _render(clean, spec.noise_sigma, rng, spec.dims)
    truth = LabelMap(dims=tuple(spec.dims), voxel_size=(1.0, 1.0, 1.0),
                     labels=labels, vocabulary=list(LABEL_VOCABULARY))
    return PhantomSubject(image=image, truth=truth)


def generate_contrast_pair(spec: PhantomSpec) -> PhantomSubject:
    """Generate a pre/post pair sharing anatomy; post adds the enhancement."""
    spec.validate()
    if spec.enhancement_delta == 0:
        raise ValueError("contrast pairs require a non-zero enhancement_delta")
    rng = np.random.default_rng(spec.seed)
    labels = _geometry_labels(spec, rng)
    clean = _intensity_lut(spec)[labels]
    image = _render(clean, spec.noise_sigma, rng, spec.dims)

    mask = labels == 1
    gm_flat = np.flatnonzero(labels == 2)
    n_pick = int(round(GM_ENHANCEMENT_FRACTION * len(gm_flat)))
    picked = rng.choice(len(gm_flat), size=n_pick, replace=False)
    mask_flat = mask.reshape(-1).copy()
    mask_flat[gm_flat[picked]] = True
    enhanced = clean + spec.enhancement_delta * mask_flat.reshape(labels.shape)

    post_image = _render(enhanced.astype(np.float32), spec.noise_sigma, rng,
                         spec.dims)
    truth = LabelMap(dims=tuple(spec.dims), voxel_size=(1.0, 1.0, 1.0),
                     labels=labels, vocabulary=list(LABEL_VOCABULARY))
    return PhantomSubject(image=image, truth=truth, post_image=post_image)


def generate_cohort(spec: PhantomSpec, n: int, cohort_tag: str,
                    out_dir) -> tuple[list[PhantomSubject], CohortManifest]:
    """Generate n subjects (seed + i each), write them, emit a manifest."""
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    if cohort_tag not in ("original", "new", "contrast_pair"):
        raise ValueError(f"unknown cohort tag {cohort_tag!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    subjects = []
    records = []
    for i in range(n):
        sub_spec = replace(spec, seed=spec.seed + i)
        if cohort_tag == "contrast_pair":
            subject = generate_contrast_pair(sub_spec)
        else:
            subject = generate_subject(sub_spec)
        sid = f"sub-{i:03d}"
        image_path = out_dir / f"{sid}_image.nii"
        label_path = out_dir / f"{sid}_labels.nii"
        write_volume(subject.image, image_path)
        write_labelmap(subject.truth, label_path)
        paired_path = None
        if subject.post_image is not None:
            paired_path = out_dir / f"{sid}_post.nii"
            write_volume(subject.post_image, paired_path)
        records.append(SubjectRecord(
            subject_id=sid,
            image_path=str(image_path),
            label_path=str(label_path),
            paired_image_path=str(paired_path) if paired_path else None,
            cohort_tag=cohort_tag,
        ))
        subjects.append(subject)

    manifest = CohortManifest(subjects=records)
    save_manifest(manifest, out_dir / "manifest.json")
    return subjects, manifest
