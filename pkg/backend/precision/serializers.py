from collections.abc import Mapping
from math import prod

from rest_framework import serializers


class StrictSerializer(serializers.Serializer):
    """
    Serializer that rejects keys it does not declare.

    Subclasses may set `kind_keys` ({kind: keys}) to also reject keys that
    belong to a different `kind` than the one selected. Missing nested
    sections are validated as empty objects so their defaults apply.
    """
    kind_keys = None

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
            if self.kind_keys:
                kind = data.get('kind', self.fields['kind'].default)
                allowed = self.kind_keys.get(kind)
                if allowed is not None:
                    foreign = sorted(set(data) - set(allowed) - {'kind'})
                    if foreign:
                        raise serializers.ValidationError(
                            {key: [f'Not used when kind is "{kind}".'] for key in foreign}
                        )
            data = dict(data)
            for name, field in self.fields.items():
                if isinstance(field, serializers.Serializer) and name not in data:
                    data[name] = {}
        return super().to_internal_value(data)


def flatten_errors(detail, prefix=''):
    """Turn DRF's nested error detail into ['dotted.path: message', ...]."""
    lines = []
    if isinstance(detail, Mapping):
        for key, value in detail.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            if key == 'non_field_errors':
                path = prefix or 'config'
            lines.extend(flatten_errors(value, path))
    elif isinstance(detail, (list, tuple)):
        for item in detail:
            lines.extend(flatten_errors(item, prefix))
    else:
        lines.append(f"{prefix}: {detail}")
    return lines


BIT_FIELD = dict(min_value=2, max_value=32)


class ModelSpecSerializer(StrictSerializer):
    kind_keys = {
        'mlp': {'widths', 'quantize_first_last', 'n', 'b_min', 'b_max'},
        'tiny_resnet': {'stem_channels', 'blocks', 'classes', 'quantize_first_last', 'n', 'b_min', 'b_max'},
    }

    kind = serializers.ChoiceField(choices=['mlp', 'tiny_resnet'], default='mlp')
    widths = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2, default=(2, 64, 64, 2))
    stem_channels = serializers.IntegerField(min_value=1, default=16)
    blocks = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=3, max_length=3, default=(1, 1, 1)
    )
    classes = serializers.IntegerField(min_value=2, default=10)
    quantize_first_last = serializers.BooleanField(default=False)
    n = serializers.IntegerField(**BIT_FIELD, default=8)
    b_min = serializers.IntegerField(**BIT_FIELD, default=3)
    b_max = serializers.IntegerField(**BIT_FIELD, default=8)

    def validate(self, attrs):
        if attrs['b_max'] != attrs['n']:
            raise serializers.ValidationError({'b_max': ['Must equal n.']})
        if attrs['b_min'] > attrs['b_max']:
            raise serializers.ValidationError({'b_min': ['Must not exceed b_max.']})
        return attrs


class DataSpecSerializer(StrictSerializer):
    kind_keys = {
        'synthetic': {'classes', 'dims', 'per_class', 'radius', 'image_shape', 'seed'},
        'idx': {'train_images', 'train_labels', 'test_images', 'test_labels', 'normalize',
                'limit_train', 'limit_test'},
    }

    kind = serializers.ChoiceField(choices=['synthetic', 'idx'], default='synthetic')
    classes = serializers.IntegerField(min_value=2, default=2)
    dims = serializers.IntegerField(min_value=1, default=2)
    per_class = serializers.IntegerField(min_value=1, default=500)
    radius = serializers.FloatField(min_value=0, default=3.0)
    image_shape = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=3, max_length=3, allow_null=True, default=None
    )
    seed = serializers.IntegerField(min_value=0, allow_null=True, default=None)
    train_images = serializers.CharField(allow_null=True, default=None)
    train_labels = serializers.CharField(allow_null=True, default=None)
    test_images = serializers.CharField(allow_null=True, default=None)
    test_labels = serializers.CharField(allow_null=True, default=None)
    normalize = serializers.BooleanField(default=True)
    limit_train = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    limit_test = serializers.IntegerField(min_value=1, allow_null=True, default=None)

    def validate(self, attrs):
        if attrs['kind'] == 'idx':
            missing = [k for k in ('train_images', 'train_labels', 'test_images', 'test_labels') if not attrs[k]]
            if missing:
                raise serializers.ValidationError({k: ['Required for idx data.'] for k in missing})
        elif attrs['image_shape'] is not None and prod(attrs['image_shape']) != attrs['dims']:
            raise serializers.ValidationError({'image_shape': ['Product must equal dims.']})
        return attrs


class TrainSpecSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=1, default=20)
    batch_size = serializers.IntegerField(min_value=2, default=32)
    lr = serializers.FloatField(min_value=0, default=0.1)
    momentum = serializers.FloatField(min_value=0, max_value=0.999, default=0.9)
    weight_decay = serializers.FloatField(min_value=0, default=1e-4)
    milestones = serializers.ListField(
        child=serializers.FloatField(min_value=0, max_value=1), default=(0.5, 0.75)
    )
    gamma = serializers.FloatField(min_value=0, default=0.1)
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 64 - 1, default=0)
    output_dir = serializers.CharField(default='runs/default')
    freeze_precision_after_epoch = serializers.IntegerField(min_value=0, allow_null=True, default=None)


class SchedulerSpecSerializer(StrictSerializer):
    kind_keys = {
        'learned': set(),
        'static': {'bits'},
        'random_k': {'k', 'choices', 'active_epochs', 'fallback_bits', 'per_layer'},
        'staged': {'boundaries', 'stage_bits'},
        'progressive': {'b_start', 'b_end', 'num_stages'},
        'cyclic': {'b_min', 'b_max', 'cycle_len'},
    }
    required_keys = {
        'static': ('bits',),
        'staged': ('boundaries', 'stage_bits'),
        'progressive': ('b_start', 'b_end', 'num_stages'),
        'cyclic': ('b_min', 'b_max', 'cycle_len'),
    }

    kind = serializers.ChoiceField(choices=sorted(kind_keys), default='learned')
    bits = serializers.IntegerField(**BIT_FIELD, allow_null=True, default=None)
    k = serializers.IntegerField(min_value=1, allow_null=True, default=10)
    choices = serializers.ListField(child=serializers.IntegerField(**BIT_FIELD), min_length=1, default=(4, 6, 8))
    active_epochs = serializers.IntegerField(min_value=0, allow_null=True, default=None)
    fallback_bits = serializers.IntegerField(**BIT_FIELD, default=8)
    per_layer = serializers.BooleanField(default=False)
    boundaries = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_null=True, default=None)
    stage_bits = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(**BIT_FIELD), min_length=1),
        allow_null=True, default=None,
    )
    b_start = serializers.IntegerField(**BIT_FIELD, allow_null=True, default=None)
    b_end = serializers.IntegerField(**BIT_FIELD, allow_null=True, default=None)
    num_stages = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    b_min = serializers.IntegerField(**BIT_FIELD, allow_null=True, default=None)
    b_max = serializers.IntegerField(**BIT_FIELD, allow_null=True, default=None)
    cycle_len = serializers.IntegerField(min_value=1, allow_null=True, default=None)

    def validate(self, attrs):
        missing = [k for k in self.required_keys.get(attrs['kind'], ()) if attrs[k] is None]
        if missing:
            raise serializers.ValidationError({k: [f'Required when kind is "{attrs["kind"]}".'] for k in missing})
        if attrs['kind'] == 'staged':
            if len(attrs['stage_bits']) != len(attrs['boundaries']) + 1:
                raise serializers.ValidationError({'stage_bits': ['Needs one more stage than there are boundaries.']})
            if attrs['boundaries'] != sorted(attrs['boundaries']):
                raise serializers.ValidationError({'boundaries': ['Must be increasing.']})
        if attrs['kind'] == 'cyclic' and attrs['b_min'] > attrs['b_max']:
            raise serializers.ValidationError({'b_min': ['Must not exceed b_max.']})
        return attrs


class PrecisionSpecSerializer(StrictSerializer):
    lr = serializers.FloatField(min_value=0, default=0.1)
    t_frac = serializers.FloatField(default=0.6)
    alpha = serializers.FloatField(min_value=0, default=1.0)
    epsilon = serializers.FloatField(default=1e-12)
    bw_bits = serializers.IntegerField(**BIT_FIELD, default=8)
    b_static = serializers.IntegerField(**BIT_FIELD, default=8)
    beta_init = serializers.FloatField(default=1.0)
    scheduler = SchedulerSpecSerializer()

    def validate_t_frac(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError('Must lie in (0, 1].')
        return value

    def validate_epsilon(self, value):
        if not value > 0:
            raise serializers.ValidationError('Must be positive.')
        return value

    def validate_beta_init(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError('Must lie in (0, 1].')
        return value


class RunConfigSerializer(StrictSerializer):
    model = ModelSpecSerializer()
    data = DataSpecSerializer()
    train = TrainSpecSerializer()
    precision = PrecisionSpecSerializer()

    def validate(self, attrs):
        model, data, precision = attrs['model'], attrs['data'], attrs['precision']
        if precision['beta_init'] < model['b_min'] / model['n']:
            raise serializers.ValidationError(
                {'precision': {'beta_init': [f"Must be at least b_min / n = {model['b_min'] / model['n']}."]}}
            )
        if data['kind'] == 'synthetic':
            if model['kind'] == 'mlp':
                widths = model['widths']
                if widths[0] != data['dims']:
                    raise serializers.ValidationError({'model': {'widths': ['First width must equal data.dims.']}})
                if widths[-1] != data['classes']:
                    raise serializers.ValidationError({'model': {'widths': ['Last width must equal data.classes.']}})
            else:
                if data['image_shape'] is None:
                    raise serializers.ValidationError(
                        {'data': {'image_shape': ['Required when model.kind is "tiny_resnet".']}}
                    )
                if model['classes'] != data['classes']:
                    raise serializers.ValidationError({'model': {'classes': ['Must equal data.classes.']}})
        return attrs
