from django.apps import AppConfig


class EcnConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'ecn'
