#!/usr/bin/env python
"""srns_lab entry point: prepare, train, noise_sweep, profile and analyze."""
import os
import sys


def main():
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "srns_lab.settings")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "srns_lab needs Django; install requirements.txt into the active environment"
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == "__main__":
    main()
