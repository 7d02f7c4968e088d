import pytest

from fairshift.config import RunConfig

TINY = {
    "sample.n_train": 300,
    "sample.n_val": 150,
    "sample.n_test": 150,
    "net.encoder": [16],
    "net.adversary_hidden": [8],
    "train.epochs": 3,
    "train.warmup": 1,
    "optim.batch_size": 64,
    "optim.unlabeled_batch_size": 64,
    "eval.consistency_trials": 1,
    "run.seeds": [0, 1],
}


@pytest.fixture
def tiny_cfg():
    return RunConfig.from_mapping(TINY)
