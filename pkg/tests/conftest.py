import dataclasses

import pytest
import torch
from hypothesis import HealthCheck, settings

from t2ue.generator import GeneratorModel
from t2ue.surrogate import SurrogateModel, build_vocab
from t2ue.toydata import DatasetSpec, build_in_memory

settings.register_profile("t2ue", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("t2ue")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(samples_per_class={"train": 4, "test": 2, "pretrain": 4})


@pytest.fixture(scope="session")
def tiny_train(tiny_spec):
    return build_in_memory(tiny_spec, "train")


@pytest.fixture()
def frozen_surrogate(tiny_spec):
    torch.manual_seed(0)
    return SurrogateModel(build_vocab(tiny_spec)).freeze()


@pytest.fixture()
def small_generator():
    torch.manual_seed(0)
    return GeneratorModel(block_channels=(16, 8, 8), base_channels=16, head_init_scale=1.0)


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)
