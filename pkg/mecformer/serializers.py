from rest_framework import serializers

from core.constants import PROJECTION_KINDS
from core.serializers import ConfigSerializer
from mecformer.config import ModelConfig

# Set from the task spec, never by hand.
DERIVED_FIELDS = ("task_count", "vocab_size", "category_count")


class ModelConfigSerializer(ConfigSerializer):
    config_class = ModelConfig

    d_f = serializers.IntegerField(required=False, min_value=1)
    d_model = serializers.IntegerField(required=False, min_value=2)
    encoder_layers = serializers.IntegerField(required=False, min_value=0)
    decoder_layers = serializers.IntegerField(required=False, min_value=0)
    heads = serializers.IntegerField(required=False, min_value=1)
    task_count = serializers.IntegerField(required=False, min_value=1)
    vocab_size = serializers.IntegerField(required=False, min_value=3)
    category_count = serializers.IntegerField(required=False, min_value=1)
    gamma = serializers.FloatField(required=False)
    beta = serializers.FloatField(required=False)
    num_landmarks = serializers.IntegerField(required=False, min_value=1)
    pinv_iterations = serializers.IntegerField(required=False, min_value=1)
    max_decode_len = serializers.IntegerField(required=False, min_value=1)
    pwff_hidden = serializers.IntegerField(required=False, allow_null=True, min_value=1)
    projection_kind = serializers.ChoiceField(choices=PROJECTION_KINDS, required=False)
    use_exact_attention = serializers.BooleanField(required=False)
    use_decoder = serializers.BooleanField(required=False)
    ecn_literal_scaling = serializers.BooleanField(required=False)
    pwff_residual = serializers.BooleanField(required=False)
    router_bias = serializers.BooleanField(required=False)
    layer_norm_eps = serializers.FloatField(required=False, min_value=0.0)


class ModelOverridesSerializer(ModelConfigSerializer):
    """Model settings a run may choose; the task spec supplies the rest."""

    def get_fields(self):
        fields = super().get_fields()
        for name in DERIVED_FIELDS:
            fields.pop(name)
        return fields
