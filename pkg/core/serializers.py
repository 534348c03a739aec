from typing import Any, Mapping, Type

from rest_framework import serializers

from core.exceptions import MecformerError


class StrictSerializer(serializers.Serializer):
    """Rejects undeclared keys and reports them together with every field error."""

    def to_internal_value(self, data):
        errors = {}
        if isinstance(data, Mapping):
            errors = {key: ["Unknown setting."] for key in sorted(set(data) - set(self.fields))}
        try:
            value = super().to_internal_value(data)
        except serializers.ValidationError as exc:
            detail = exc.detail if isinstance(exc.detail, dict) else {"non_field_errors": exc.detail}
            errors.update(detail)
            raise serializers.ValidationError(errors)
        if errors:
            raise serializers.ValidationError(errors)
        return value


class ConfigSerializer(StrictSerializer):
    """Builds ``config_class`` from validated data; omitted keys keep the dataclass defaults."""

    config_class: Type = None

    def validate(self, attrs):
        try:
            self.config_class(**attrs)
        except MecformerError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs

    def create(self, validated_data):
        return self.config_class(**validated_data)


def build(serializer_class: Type[serializers.Serializer], data: Mapping[str, Any], **kwargs):
    serializer = serializer_class(data=data, **kwargs)
    serializer.is_valid(raise_exception=True)
    return serializer.save()


def format_errors(detail, prefix: str = "") -> str:
    """Flattens DRF error detail into ``field: message`` clauses."""
    if isinstance(detail, dict):
        parts = []
        for key, value in detail.items():
            name = prefix if key == "non_field_errors" else (f"{prefix}.{key}" if prefix else str(key))
            parts.append(format_errors(value, name))
        return "; ".join(p for p in parts if p)
    if isinstance(detail, list):
        return "; ".join(format_errors(item, prefix) for item in detail)
    return f"{prefix}: {detail}" if prefix else str(detail)
