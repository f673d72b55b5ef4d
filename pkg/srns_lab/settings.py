"""
Django settings for the srns_lab project.

The project hosts a single app, ``recsys``, whose management commands are the
command-line surface of the training engine. There are no models and no URL
routes; settings exist for logging, defaults and environment overrides.

Every tunable reads an ``SRNS_`` prefixed environment variable first.
"""

from pathlib import Path
import os
import logging

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Commands never serve requests; the key only satisfies Django's startup checks.
_DEFAULT_DEV_SECRET = "srns-lab-insecure-development-key"
SECRET_KEY = os.environ.get("SRNS_SECRET_KEY", _DEFAULT_DEV_SECRET)

DEBUG = os.environ.get("SRNS_DEBUG", "False").lower() in ("1", "true", "yes")

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "recsys",
]

MIDDLEWARE = []

# No persistence layer: runs write CSV/JSON/NPZ artifacts to disk.
DATABASES = {}

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# --- Engine settings ---
SRNS_ENV_PREFIX = "SRNS_"
SRNS_ENVIRONMENT = os.environ.get("SRNS_ENVIRONMENT", "development")
SRNS_OUTPUT_DIR = Path(os.environ.get("SRNS_OUTPUT_DIR", str(BASE_DIR / "runs")))
SRNS_PRESET = os.environ.get("SRNS_PRESET", "ml100k")
# Worker threads used when a command fans out seeds (--repeat)
SRNS_N_JOBS = int(os.environ.get("SRNS_N_JOBS", "1"))
# Capturing pip freeze takes a second or two; switch off for quick local loops
SRNS_CAPTURE_ENVIRONMENT = os.environ.get(
    "SRNS_CAPTURE_ENVIRONMENT", "True"
).lower() in ("1", "true", "yes")

# Logging: "json" for log aggregation, "standard" for terminals
LOG_LEVEL = os.environ.get("SRNS_LOG_LEVEL", "INFO")
LOG_FORMAT = os.environ.get("SRNS_LOG_FORMAT", "standard")
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "standard": {"format": "[%(asctime)s] %(levelname)s %(name)s: %(message)s"},
        "json": {"()": "recsys.structured_logging.JSONFormatter"},
    },
    "handlers": {
        "console": {
            "level": LOG_LEVEL,
            "class": "logging.StreamHandler",
            "formatter": LOG_FORMAT if LOG_FORMAT in ("standard", "json") else "standard",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": LOG_LEVEL,
    },
    "loggers": {
        "training": {
            "handlers": ["console"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "data": {
            "handlers": ["console"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
        "evaluation": {
            "handlers": ["console"],
            "level": LOG_LEVEL,
            "propagate": False,
        },
    },
}

# Allow simple access to the logger in other modules
logger = logging.getLogger(__name__)
