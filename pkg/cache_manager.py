#!/usr/bin/env python3
"""
Index Cache Manager for the Cold-Start Audience Recommender
Keeps built interaction indexes on disk, keyed by the digest of the
transaction file they were built from.
"""

import os
import json
import hashlib
import logging
from datetime import datetime
from typing import Callable, Optional

import numpy as np
from scipy import sparse as sp

from catalog import InteractionIndex
from config import FORMAT_VERSIONS


def file_digest(path: str, chunk_size: int = 1 << 20) -> str:
    """md5 of a file's bytes"""
    digest = hashlib.md5()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


class CacheManager:
    def __init__(self, cache_dir: str):
        self.cache_dir = cache_dir
        self.logger = logging.getLogger('CacheManager')
        self.stats = {'hits': 0, 'misses': 0, 'writes': 0}
        os.makedirs(self.cache_dir, exist_ok=True)

    def _get_cache_key(self, prefix: str, *args) -> str:
        """Generate cache key from arguments"""
        key_string = f"{prefix}:" + ":".join(str(arg) for arg in args)
        return hashlib.md5(key_string.encode()).hexdigest()

    def _paths(self, cache_key: str):
        base = os.path.join(self.cache_dir, f"index-{cache_key}")
        return f"{base}.npz", f"{base}.json"

    def get_index(self, source_path: str, tag: str = '') -> Optional[InteractionIndex]:
        """Cached index for this source file, or None on any mismatch"""
        digest = file_digest(source_path)
        archive_path, sidecar_path = self._paths(self._get_cache_key('index', digest, tag))
        if not (os.path.exists(archive_path) and os.path.exists(sidecar_path)):
            self.stats['misses'] += 1
            return None

        try:
            with open(sidecar_path, 'r', encoding='utf-8') as f:
                sidecar = json.load(f)
            if (sidecar.get('format_version') != FORMAT_VERSIONS['index_cache']
                    or sidecar.get('source_digest') != digest):
                self.logger.info(f"Stale index cache for {source_path}, rebuilding")
                self.stats['misses'] += 1
                return None
            with np.load(archive_path, allow_pickle=False) as archive:
                incidence = sp.csr_matrix(
                    (archive['data'], archive['indices'], archive['indptr']),
                    shape=tuple(archive['shape']),
                )
                index = InteractionIndex(archive['user_ids'].astype(object),
                                         archive['show_ids'].astype(object), incidence)
        except (OSError, ValueError, KeyError) as e:
            self.logger.warning(f"Unreadable index cache {archive_path}: {e}")
            self.stats['misses'] += 1
            return None

        self.stats['hits'] += 1
        self.logger.debug(f"Index cache hit for {source_path}")
        return index

    def set_index(self, source_path: str, index: InteractionIndex, tag: str = '') -> bool:
        """Store index under the digest of source_path"""
        digest = file_digest(source_path)
        archive_path, sidecar_path = self._paths(self._get_cache_key('index', digest, tag))
        incidence = index.incidence
        try:
            with open(archive_path, 'wb') as f:
                np.savez_compressed(
                    f,
                    user_ids=index.user_ids.astype(str),
                    show_ids=index.show_ids.astype(str),
                    data=incidence.data,
                    indices=incidence.indices,
                    indptr=incidence.indptr,
                    shape=np.asarray(incidence.shape, dtype=np.int64),
                )
            sidecar = {
                'format_version': FORMAT_VERSIONS['index_cache'],
                'source_digest': digest,
                'source_path': os.path.abspath(source_path),
                'users': index.user_count,
                'shows': index.show_count,
                'degree_sum': index.degree_sum,
                'cached_at': datetime.now().isoformat()
            }
            with open(sidecar_path, 'w', encoding='utf-8') as f:
                json.dump(sidecar, f, indent=2, sort_keys=True)
        except OSError as e:
            self.logger.warning(f"Index cache write error: {e}")
            return False
        self.stats['writes'] += 1
        return True

    def get_or_build(self, source_path: str, builder: Callable[[], InteractionIndex],
                     tag: str = '') -> InteractionIndex:
        index = self.get_index(source_path, tag)
        if index is None:
            index = builder()
            self.set_index(source_path, index, tag)
        return index

    def invalidate(self, source_path: str, tag: str = '') -> bool:
        """Drop the cached index of source_path"""
        cache_key = self._get_cache_key('index', file_digest(source_path), tag)
        removed = False
        for path in self._paths(cache_key):
            if os.path.exists(path):
                os.remove(path)
                removed = True
        return removed

    def clear_all(self) -> int:
        """Remove every cached index; returns the number of files removed"""
        removed = 0
        for name in os.listdir(self.cache_dir):
            if name.startswith('index-') and name.endswith(('.npz', '.json')):
                os.remove(os.path.join(self.cache_dir, name))
                removed += 1
        self.logger.info(f"Cleared {removed} index cache files")
        return removed

    def get_cache_stats(self) -> dict:
        entries = [n for n in os.listdir(self.cache_dir) if n.startswith('index-') and n.endswith('.npz')]
        return {**self.stats, 'entries': len(entries), 'cache_dir': self.cache_dir}
