from pathlib import Path
import os
from dotenv import load_dotenv
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Only management commands run in this project; the key signs nothing.
SECRET_KEY = os.getenv('LDP_SECRET_KEY', 'ldp-local-only')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    # 3rd Party Apps
    'rest_framework',

    # My Apps
    'precision',
]


# Run records (`ldp ... --record`) land in a local SQLite file.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.getenv('LDP_DATABASE_PATH', str(BASE_DIR / 'db.sqlite3')),
    }
}


# Logging
# LDP_LOG_LEVEL is one of error, warn, info, debug.

LOG_LEVELS = {
    'error': 'ERROR',
    'warn': 'WARNING',
    'info': 'INFO',
    'debug': 'DEBUG',
}

LDP_LOG_LEVEL = LOG_LEVELS.get(os.getenv('LDP_LOG_LEVEL', 'info').lower(), 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'stderr': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'precision': {
            'handlers': ['stderr'],
            'level': LDP_LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Default primary key field type

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'
