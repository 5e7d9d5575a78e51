#!/usr/bin/env python3
"""
Unified Configuration Management for the Cold-Start Audience Recommender
Resolves pipeline settings from defaults, environment, a key-value config
file and command-line overrides (in increasing precedence).
"""

import os
import copy
import json
import hashlib
from typing import Dict, Any, Optional

from dotenv import dotenv_values

from error_handler import ConfigurationError

__version__ = "1.0.0"

# Bumped whenever the on-disk layout of an artifact changes
FORMAT_VERSIONS = {
    'index_cache': 1,
    'graph_tsv': 1,
    'model_json': 1,
    'report_json': 1,
    'ranking_csv': 1,
}

ENV_PREFIX = 'COLDSTART_'

# Groups excluded from the fingerprint: they never change artifact contents
_UNFINGERPRINTED = ('paths', 'runtime')


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _optional(kind):
    def parse(value):
        if value is None or str(value).strip().lower() in ('', 'none', 'null'):
            return None
        return kind(value)
    return parse


# (group, key) -> parser; defaults live in Config.__init__
_PARSERS = {
    ('paths', 'transactions'): _optional(str),
    ('paths', 'shows'): _optional(str),
    ('paths', 'cache_dir'): _optional(str),
    ('paths', 'output_dir'): str,
    ('paths', 'graph'): _optional(str),
    ('paths', 'model'): _optional(str),
    ('graph', 'kind'): str,
    ('propagation', 'length'): int,
    ('propagation', 'aggregation'): str,
    ('insertion', 'mode'): str,
    ('insertion', 'top_k'): _optional(int),
    ('insertion', 'symmetric'): _parse_bool,
    ('sgd', 'learning_rate'): float,
    ('sgd', 'epochs'): int,
    ('sgd', 'l2'): float,
    ('sgd', 'fit_intercept'): _parse_bool,
    ('revenue', 'communication_cost'): float,
    ('evaluation', 'cutoff'): _optional(str),
    ('evaluation', 'test_sample_size'): _optional(int),
    ('evaluation', 'grid_lengths'): str,
    ('evaluation', 'grid_kinds'): str,
    ('evaluation', 'baseline_rounds'): int,
    ('synthetic', 'num_users'): int,
    ('synthetic', 'num_shows'): int,
    ('synthetic', 'num_communities'): int,
    ('synthetic', 'feature_noise'): float,
    ('synthetic', 'mean_purchases'): float,
    ('synthetic', 'activity_sigma'): float,
    ('synthetic', 'in_community_rate'): float,
    ('synthetic', 'spend_mean'): float,
    ('synthetic', 'spend_sigma'): float,
    ('seeds', 'negative_sampling'): int,
    ('seeds', 'sgd_shuffle'): int,
    ('seeds', 'synthetic'): int,
    ('seeds', 'test_sample'): int,
    ('seeds', 'baseline'): int,
    ('runtime', 'threads'): int,
    ('runtime', 'log_level'): str,
}


class Config:
    def __init__(self):
        # Input and output locations
        self.paths = {
            'transactions': None,
            'shows': None,
            'cache_dir': None,
            'output_dir': 'output',
            'graph': None,
            'model': None
        }

        # Collaborative network
        self.graph = {
            'kind': 'MDW-asym'
        }

        # Similarity propagation and user preference
        self.propagation = {
            'length': 2,
            'aggregation': 'max'
        }

        # New-show insertion policy
        self.insertion = {
            'mode': 'keep-positive',
            'top_k': None,
            'symmetric': True
        }

        # Content-to-collaborative regression
        self.sgd = {
            'learning_rate': 0.01,
            'epochs': 20,
            'l2': 0.0,
            'fit_intercept': True
        }

        self.revenue = {
            'communication_cost': 0.05  # euros per contacted user
        }

        self.evaluation = {
            'cutoff': None,
            'test_sample_size': None,
            'grid_lengths': '1..5',
            'grid_kinds': 'all',
            'baseline_rounds': 100
        }

        # Planted-community generator
        self.synthetic = {
            'num_users': 5000,
            'num_shows': 500,
            'num_communities': 4,
            'feature_noise': 0.1,
            'mean_purchases': 4.0,
            'activity_sigma': 1.0,
            'in_community_rate': 0.9,
            'spend_mean': 30.0,
            'spend_sigma': 0.5
        }

        # Every random draw in the pipeline is seeded from here
        self.seeds = {
            'negative_sampling': 0,
            'sgd_shuffle': 0,
            'synthetic': 0,
            'test_sample': 0,
            'baseline': 0
        }

        self.runtime = {
            'threads': os.cpu_count() or 1,
            'log_level': 'INFO'
        }

        self.load_environment()

    def _groups(self) -> Dict[str, Dict[str, Any]]:
        return {group: getattr(self, group) for group in sorted({g for g, _ in _PARSERS})}

    def set_value(self, group: str, key: str, value: Any):
        """Set one setting, parsing strings into the setting's type"""
        parser = _PARSERS.get((group, key))
        if parser is None:
            raise ConfigurationError(f"unknown configuration key: {group}.{key}")
        try:
            getattr(self, group)[key] = parser(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid value for {group}.{key}: {value!r} ({e})")

    def _split_key(self, raw_key: str):
        key = raw_key.strip()
        if '.' in key:
            group, name = key.split('.', 1)
            return group.lower(), name.lower()
        for group, name in _PARSERS:
            if key.upper() == f"{group}_{name}".upper():
                return group, name
        raise ConfigurationError(f"unknown configuration key: {raw_key}")

    def load_environment(self, environ: Optional[Dict[str, str]] = None):
        """Apply COLDSTART_<GROUP>_<KEY> environment overrides"""
        environ = os.environ if environ is None else environ
        for group, name in _PARSERS:
            env_key = f"{ENV_PREFIX}{group}_{name}".upper()
            if env_key in environ:
                self.set_value(group, name, environ[env_key])

    def load_file(self, path: str):
        """Apply a key-value config file (dotenv syntax)"""
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        for raw_key, value in dotenv_values(path).items():
            group, name = self._split_key(raw_key)
            self.set_value(group, name, value)

    def apply_overrides(self, overrides: Dict[str, Any]):
        """Apply flag overrides keyed 'group.key'; None means 'not given'"""
        for dotted, value in overrides.items():
            if value is None:
                continue
            group, name = self._split_key(dotted)
            self.set_value(group, name, value)

    def validate_config(self) -> Dict[str, Any]:
        """Validate configuration and return status"""
        from copurchase import WeightFunctionKind

        status = {
            'valid': True,
            'errors': [],
            'warnings': []
        }

        def fail(message):
            status['errors'].append(message)
            status['valid'] = False

        try:
            WeightFunctionKind.parse(self.graph['kind'])
        except ValueError as e:
            fail(str(e))
        if self.propagation['length'] < 1:
            fail("propagation.length must be >= 1")
        if self.propagation['aggregation'] not in ('max', 'sum'):
            fail("propagation.aggregation must be 'max' or 'sum'")
        if self.insertion['mode'] not in ('keep-positive', 'top-k'):
            fail("insertion.mode must be 'keep-positive' or 'top-k'")
        if self.insertion['mode'] == 'top-k' and (self.insertion['top_k'] or 0) < 1:
            fail("insertion.top_k must be >= 1 in top-k mode")
        if self.sgd['learning_rate'] <= 0:
            fail("sgd.learning_rate must be > 0")
        if self.sgd['epochs'] < 1:
            fail("sgd.epochs must be >= 1")
        if self.sgd['l2'] < 0:
            fail("sgd.l2 must be >= 0")
        if self.revenue['communication_cost'] < 0:
            fail("revenue.communication_cost must be >= 0")
        if self.runtime['threads'] < 1:
            fail("runtime.threads must be >= 1")
        if not 0.0 <= self.synthetic['feature_noise'] <= 1.0:
            fail("synthetic.feature_noise must be in [0, 1]")

        if self.paths['cache_dir'] is None:
            status['warnings'].append("no cache_dir: the interaction index is rebuilt on every run")

        return status

    def resolve(self) -> 'Config':
        """Validate and return self, raising on the first invalid setting"""
        status = self.validate_config()
        if not status['valid']:
            raise ConfigurationError("; ".join(status['errors']))
        return self

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self._groups())

    def fingerprint(self) -> str:
        """md5 over the settings that determine artifact contents"""
        relevant = {g: v for g, v in self._groups().items() if g not in _UNFINGERPRINTED}
        canonical = json.dumps(relevant, sort_keys=True, separators=(',', ':'))
        return hashlib.md5(canonical.encode('utf-8')).hexdigest()

    def get_seed(self, name: str) -> int:
        """Get the explicit seed for a random stage"""
        return self.seeds[name]


if __name__ == "__main__":
    config = Config()
    validation = config.validate_config()
    print(f"Configuration valid: {validation['valid']}")
    if validation['errors']:
        print(f"Errors: {validation['errors']}")
    if validation['warnings']:
        print(f"Warnings: {validation['warnings']}")
    print(f"Fingerprint: {config.fingerprint()}")
