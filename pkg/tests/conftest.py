import logging
import os

import numpy as np
from pytest import fixture

from catalog import ShowRecord, Transaction, build_index
from evaluation import SyntheticSpec, generate_synthetic

_log = logging.getLogger(__name__)

# u1 buys {A,B}; u2 buys {A,B,C}; u3 buys {B,C}; u4 buys {D}
T1_PURCHASES = [
    ('u1', 'A'), ('u1', 'B'),
    ('u2', 'A'), ('u2', 'B'), ('u2', 'C'),
    ('u3', 'B'), ('u3', 'C'),
    ('u4', 'D'),
]


def make_transactions(purchases, amount=10.0, start=1000):
    return [Transaction(u, s, amount, start + i) for i, (u, s) in enumerate(purchases)]


def random_transactions(rng: np.random.Generator, max_users=10, max_shows=8, density=0.4):
    """Random purchase log over at most max_users users and max_shows shows"""
    n_users = int(rng.integers(1, max_users + 1))
    n_shows = int(rng.integers(1, max_shows + 1))
    purchases = []
    for u in range(n_users):
        bought = np.flatnonzero(rng.random(n_shows) < density)
        if len(bought) == 0:
            bought = [int(rng.integers(n_shows))]
        purchases.extend((f"u{u}", f"s{s}") for s in bought)
    return make_transactions(purchases)


@fixture
def t1_transactions():
    return make_transactions(T1_PURCHASES)


@fixture
def t1_index(t1_transactions):
    return build_index(t1_transactions)


@fixture
def t1_catalog():
    return {
        'A': ShowRecord('A', city='Paris', venue='Olympia', types={'rock', 'live'},
                        stakeholders={'prod-1'}),
        'B': ShowRecord('B', city='Paris', venue='Zenith', types={'rock'},
                        stakeholders={'prod-1', 'prod-2'}),
        'C': ShowRecord('C', city='Lyon', venue='Halle', types={'jazz'},
                        stakeholders={'prod-2'}),
        'D': ShowRecord('D', city='Lille', types={'opera'}),
    }


@fixture(scope='session')
def small_synthetic():
    spec = SyntheticSpec(num_users=400, num_shows=40, num_communities=2, feature_noise=0.0,
                         mean_purchases=4.0, seed=3)
    dataset = generate_synthetic(spec)
    _log.info("synthetic fixture: %d transactions", len(dataset.transactions))
    return dataset


@fixture(autouse=True)
def clean_environment(monkeypatch):
    """COLDSTART_* variables from the caller's shell must not leak into Config()"""
    for key in [k for k in os.environ if k.startswith('COLDSTART_')]:
        monkeypatch.delenv(key)
