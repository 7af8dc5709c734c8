import math

import numpy as np
import pytest

from placeprivacy.features import PoiContext
from placeprivacy.ingest import group_to_samples, merge_repeat_checkins
from placeprivacy.synth import SynthSpec, generate


def haversine(lat1, lon1, lat2, lon2, r=6371008.8):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


class SmallCity:
    def __init__(self, spec):
        self.spec = spec
        self.pois, checkins = generate(spec)
        self.checkins, _ = merge_repeat_checkins(checkins)
        self.samples = group_to_samples(self.checkins)
        self.ctx = PoiContext(self.pois, spec.categories, spec.anchor)


@pytest.fixture(scope="session")
def small_city():
    return SmallCity(SynthSpec(n_users=60, n_pois=800, mean_visits=25, region_km=3.0, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
