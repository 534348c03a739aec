from pathlib import Path

import environ

BASE_DIR = Path(__file__).resolve().parent.parent
env = environ.Env(
    DEBUG=(bool, False),
    ENVIRONMENT=(str, "development"),
)
environ.Env.read_env(BASE_DIR / ".env")

ENVIRONMENT = env("ENVIRONMENT")
DEBUG = env.bool("DEBUG", default=(ENVIRONMENT != "production"))
# Nothing is served; the key only satisfies Django's startup checks.
SECRET_KEY = env("SECRET_KEY", default="mecformer-local-only")

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    # Thirdpary apps
    "rest_framework",

    "tensor_core",
    "attention",
    "ecn",
    "mecformer",
    "data_pipeline",
    "training",
    "evaluation",
    "cli",
]

DATABASES = {}

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

REST_FRAMEWORK = {
    "UNAUTHENTICATED_USER": None,
}

MECFORMER_RUNS_ROOT = Path(env("MECFORMER_RUNS_ROOT", default=str(BASE_DIR / "runs")))
MECFORMER_LOG_LEVEL = env("MECFORMER_LOG_LEVEL", default="INFO")
MECFORMER_SLOW_TESTS = env.bool("MECFORMER_SLOW_TESTS", default=False)
MECFORMER_WORKERS = env.int("MECFORMER_WORKERS", default=1)

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        app: {"handlers": ["console"], "level": MECFORMER_LOG_LEVEL, "propagate": False}
        for app in (
            "tensor_core", "attention", "ecn", "mecformer",
            "data_pipeline", "training", "evaluation", "cli",
        )
    },
}
