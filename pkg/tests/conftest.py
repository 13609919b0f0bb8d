import numpy as np
import pytest

from tieredreplay import Sample


def make_sample(sid: int, label: int = 0, task: int = 0, dim: int = 4, aux=None) -> Sample:
    rng = np.random.default_rng(sid)
    return Sample(id=sid, label=label, task=task, features=rng.standard_normal(dim), aux_logits=aux)


@pytest.fixture
def sample_factory():
    return make_sample
