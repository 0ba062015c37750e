from django.apps import AppConfig


class PrecisionConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'precision'
