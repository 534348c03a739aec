from django.apps import AppConfig


class MecformerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'mecformer'
