import math

from rest_framework import serializers

from core.constants import OPTIMIZER_KINDS, TRAINING_SETTINGS
from core.serializers import ConfigSerializer
from training.config import TrainConfig


class TrainConfigSerializer(ConfigSerializer):
    config_class = TrainConfig

    lr = serializers.FloatField(required=False)
    epochs = serializers.IntegerField(required=False, min_value=1)
    patience = serializers.IntegerField(required=False, min_value=1)
    batch_size = serializers.IntegerField(required=False, min_value=1, max_value=1)
    grad_accum = serializers.IntegerField(required=False, min_value=1)
    seed = serializers.IntegerField(required=False, min_value=0)
    lookahead_k = serializers.IntegerField(required=False, min_value=1)
    lookahead_alpha = serializers.FloatField(required=False, min_value=0.0, max_value=1.0)
    optimizer = serializers.ChoiceField(choices=OPTIMIZER_KINDS, required=False)
    setting = serializers.ChoiceField(choices=TRAINING_SETTINGS, required=False)
    workers = serializers.IntegerField(required=False, min_value=1)
    keep_all_checkpoints = serializers.BooleanField(required=False)

    def validate_lr(self, value):
        if not math.isfinite(value) or value <= 0:
            raise serializers.ValidationError("Learning rate must be finite and positive.")
        return value
