"""
Run reproducibility metadata.

Captures the code revision, a hash of the installed dependencies, platform
and numeric-library versions, and binds the seed to the run id so a summary
JSON is enough to tell whether two runs can be compared bit for bit.
"""
import hashlib
import os
import platform
import subprocess
import sys
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import numpy as np

from .structured_logging import get_training_logger

logger = get_training_logger()


class ReproducibilityCapture:
    """
    Capture metadata for run reproducibility.

    Features:
    - Git commit SHA with dirty status
    - Hashed dependency manifest (pip freeze + SHA256)
    - Platform, Python and numeric library versions
    - Binding of seed to run id
    """

    @staticmethod
    def get_git_commit() -> Optional[str]:
        """Get current Git commit SHA, or None if not in a repo."""
        try:
            result = subprocess.run(
                ['git', 'rev-parse', 'HEAD'],
                capture_output=True,
                text=True,
                timeout=5,
                check=True
            )
            commit = result.stdout.strip()

            dirty_result = subprocess.run(
                ['git', 'diff-index', '--quiet', 'HEAD', '--'],
                capture_output=True,
                timeout=5
            )
            if dirty_result.returncode != 0:
                commit += '-dirty'
            return commit
        except Exception as e:
            logger.warning(f'Failed to capture git commit: {e}')
            return None

    @staticmethod
    def get_dependency_hash() -> str:
        """SHA256 of the sorted ``pip freeze`` output, or 'unknown'."""
        try:
            result = subprocess.run(
                [sys.executable, '-m', 'pip', 'freeze'],
                capture_output=True,
                text=True,
                timeout=10,
                check=True
            )
            sorted_deps = '\n'.join(sorted(result.stdout.strip().split('\n')))
            return hashlib.sha256(sorted_deps.encode('utf-8')).hexdigest()
        except Exception as e:
            logger.warning(f'Failed to capture dependency hash: {e}')
            return 'unknown'

    @staticmethod
    def get_platform_info() -> Dict[str, str]:
        return {
            'system': platform.system(),
            'release': platform.release(),
            'machine': platform.machine(),
            'processor': platform.processor(),
            'python_version': sys.version,
            'python_implementation': platform.python_implementation(),
        }

    @staticmethod
    def get_library_versions() -> Dict[str, str]:
        """Versions of the libraries whose arithmetic shapes the results."""
        versions = {'numpy': np.__version__}
        for name in ('pandas', 'scipy', 'sklearn', 'django'):
            try:
                module = __import__(name)
                versions[name] = getattr(module, '__version__', None) or module.get_version()
            except Exception:
                versions[name] = 'unknown'
        return versions

    @staticmethod
    def get_container_runtime() -> str:
        if os.path.exists('/.dockerenv'):
            return 'docker'
        if os.path.exists('/run/.containerenv'):
            return 'podman'
        return 'none'

    @staticmethod
    def bind_seed_to_run(run_id: str, seed: int) -> str:
        """SHA256 binding a seed to a run id."""
        return hashlib.sha256(f'{run_id}:{seed}'.encode('utf-8')).hexdigest()

    @classmethod
    def capture_full_metadata(cls, run_id: Optional[str] = None, seed: Optional[int] = None,
                              include_dependencies: bool = True) -> Dict[str, Any]:
        """
        Capture complete reproducibility metadata.

        Args:
            run_id: Optional run identifier for seed binding
            seed: Optional random seed value
            include_dependencies: Skip the (slow) pip freeze hash when False

        Returns:
            Dictionary with all reproducibility metadata
        """
        metadata = {
            'git_commit': cls.get_git_commit(),
            'dependency_hash': cls.get_dependency_hash() if include_dependencies else 'skipped',
            'platform': cls.get_platform_info(),
            'libraries': cls.get_library_versions(),
            'container_runtime': cls.get_container_runtime(),
            'captured_at': datetime.now(timezone.utc).isoformat(),
        }
        if run_id and seed is not None:
            metadata['seed'] = seed
            metadata['seed_binding'] = cls.bind_seed_to_run(run_id, seed)
        return metadata
