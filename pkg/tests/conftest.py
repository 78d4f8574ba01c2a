import logging

import numpy as np
import pytest
import torch

from hetero_eeg.montage import ElectrodeLayout


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def caplog_json(caplog):
    caplog.set_level(logging.WARNING, logger="hetero_eeg")
    return caplog


def chain_layout(names=("A", "B", "C"), dataset_id="chain"):
    S = len(names)
    nbrs = [set() for _ in range(S)]
    for i in range(S - 1):
        nbrs[i].add(i + 1)
        nbrs[i + 1].add(i)
    pos = np.stack([np.arange(S, dtype=float), np.zeros(S)], axis=1)
    return ElectrodeLayout(dataset_id, list(names), pos, nbrs)


def random_symmetric_graph(rng, S, p=0.4):
    upper = np.triu(rng.random((S, S)) < p, 1).astype(float)
    return upper + upper.T
