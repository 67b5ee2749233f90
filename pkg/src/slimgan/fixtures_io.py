"""Access to the bundled reference architecture files.

The bundle covers the full-size CycleGAN-style translation generator, four
compact searched translation generators (one per dataset direction), and two
compact super-resolution generators (visual- and PSNR-oriented). They feed
the cost-model cross-checks and serve as import/export examples.
"""

from __future__ import annotations

from importlib import resources

from .schema import import_architecture
from .search_space import Architecture

FIXTURE_NAMES = (
    "cyclegan_base",
    "horse2zebra",
    "zebra2horse",
    "summer2winter",
    "winter2summer",
    "sr_visual",
    "sr_psnr",
)


def fixture_text(name: str) -> str:
    if name not in FIXTURE_NAMES:
        raise KeyError(f"unknown fixture {name!r}; available: {FIXTURE_NAMES}")
    return resources.files("slimgan").joinpath(f"fixtures/{name}.arch").read_text()


def load_fixture(name: str) -> Architecture:
    return import_architecture(fixture_text(name))
