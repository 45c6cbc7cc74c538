import numpy as np
import pytest

from tileseg.phantom import PhantomSpec, generate_cohort
from tileseg.transfer import Cohort, SubjectData, load_cohort
from tileseg.volio import load_manifest


def micro_spec(seed, **kw):
    """A small, fast phantom configuration for harness-level tests."""
    base = dict(dims=(20, 20, 20), seed=seed, noise_sigma=0.05,
                deform_amplitude=0.8)
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture(scope="session")
def micro_adult_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_adult")
    generate_cohort(micro_spec(seed=500), 6, "original", out)
    return load_cohort(load_manifest(out / "manifest.json"))


@pytest.fixture(scope="session")
def micro_pediatric_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_ped")
    generate_cohort(micro_spec(seed=600, scale=0.8, gm_intensity=0.8), 6, "new", out)
    return load_cohort(load_manifest(out / "manifest.json"))


@pytest.fixture(scope="session")
def micro_contrast_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_contrast")
    generate_cohort(micro_spec(seed=700, enhancement_delta=0.5), 6,
                    "contrast_pair", out)
    return load_cohort(load_manifest(out / "manifest.json"))
