import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from cli.serializers import RunConfig, RunConfigSerializer
from core.exceptions import ContractError, IncompatibilityError, MecformerError
from core.serializers import build, format_errors
from data_pipeline.manifest import load_dataset
from data_pipeline.taskspec import TaskSpec
from mecformer.checkpoint import load_model
from mecformer.network import Mecformer
from training.binding import TaskBinding, bindings_for

logger = logging.getLogger(__name__)

# flag dest -> model setting
MODEL_FLAGS = {
    "d_model": "d_model",
    "heads": "heads",
    "gamma": "gamma",
    "beta": "beta",
    "projection": "projection_kind",
    "landmarks": "num_landmarks",
    "max_decode_len": "max_decode_len",
}
# flag dest -> training setting
TRAIN_FLAGS = {
    "lr": "lr",
    "epochs": "epochs",
    "patience": "patience",
    "seed": "seed",
    "optimizer": "optimizer",
    "setting": "setting",
    "grad_accum": "grad_accum",
    "workers": "workers",
}


class MecformerCommand(BaseCommand):
    """Turns project and validation errors into ``CommandError`` so the exit code is nonzero."""

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except serializers.ValidationError as exc:
            raise CommandError(f"invalid configuration: {format_errors(exc.detail)}") from exc
        except (MecformerError, OSError) as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}") from exc

    def run(self, **options):
        raise NotImplementedError

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))


def read_json(path: str) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CommandError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CommandError(f"{path} must hold a JSON object")
    return data


class RunConfigCommand(MecformerCommand):
    """Commands configured by a run config file plus model and training flags."""

    extra_keys = ()

    def add_arguments(self, parser):
        parser.add_argument("--config", help="JSON run config; flags override its values")
        parser.add_argument("--data", dest="data_dir", help="dataset directory written by gen_data")
        parser.add_argument("--run-dir", help="output run directory (default: under MECFORMER_RUNS_ROOT)")

        model = parser.add_argument_group("model")
        model.add_argument("--d-model", type=int)
        model.add_argument("--heads", type=int)
        model.add_argument("--layers", type=int, help="encoder and decoder layers")
        model.add_argument("--gamma", type=float)
        model.add_argument("--beta", type=float)
        model.add_argument("--projection", choices=("ecn", "p1", "pt"))
        model.add_argument("--landmarks", type=int)
        model.add_argument("--max-decode-len", type=int)
        model.add_argument("--exact-attention", action="store_true", default=None)
        model.add_argument("--no-decoder", action="store_true", default=None)

        train = parser.add_argument_group("training")
        train.add_argument("--lr", type=float)
        train.add_argument("--epochs", type=int)
        train.add_argument("--patience", type=int)
        train.add_argument("--seed", type=int)
        train.add_argument("--optimizer")
        train.add_argument("--setting")
        train.add_argument("--grad-accum", type=int)
        train.add_argument("--workers", type=int)

    def load_run_config(self, options: Dict[str, Any]) -> RunConfig:
        data = read_json(options["config"]) if options.get("config") else {}
        model = dict(data.get("model") or {})
        train = dict(data.get("train") or {})
        for flag, key in MODEL_FLAGS.items():
            if options.get(flag) is not None:
                model[key] = options[flag]
        if options.get("layers") is not None:
            model["encoder_layers"] = model["decoder_layers"] = options["layers"]
        if options.get("exact_attention"):
            model["use_exact_attention"] = True
        if options.get("no_decoder"):
            model["use_decoder"] = False
        for flag, key in TRAIN_FLAGS.items():
            if options.get(flag) is not None:
                train[key] = options[flag]
        if model:
            data["model"] = model
        if train:
            data["train"] = train
        for key in ("data_dir", "run_dir") + self.extra_keys:
            if options.get(key) is not None:
                data[key] = options[key]
        run_config = build(RunConfigSerializer, data)
        logger.debug("run config %s", run_config.snapshot())
        return run_config


def load_run_data(run_config: RunConfig):
    """(task spec, splits, d_f) of the run's dataset; a d_f in the model settings must match it."""
    task_spec, splits = load_dataset(run_config.data_dir, expected_d_f=run_config.model.get("d_f"))
    bags = splits.train + splits.val + splits.test
    if not bags:
        raise ContractError(f"{run_config.data_dir} holds no bags")
    return task_spec, splits, bags[0].d_f


def load_checkpoint(path: str, task_spec: Optional[TaskSpec] = None) -> Tuple[Mecformer, TaskBinding]:
    """Loads a model with the binding it was trained under, checked against ``task_spec`` when given."""
    model, metadata = load_model(path)
    if "binding" in metadata:
        binding = TaskBinding.from_dict(metadata["binding"])
    elif task_spec is not None:
        binding = TaskBinding(task_spec)
    else:
        raise IncompatibilityError(f"{path} records no task spec")
    if task_spec is not None and binding not in bindings_for(binding.setting, task_spec):
        raise IncompatibilityError(
            f"{path} was trained for {binding.label} on tasks {binding.task_spec.task_names}, "
            f"which the dataset's task spec {task_spec.task_names} does not reproduce"
        )
    cfg = model.config
    if cfg.vocab_size != binding.task_spec.vocabulary.size:
        raise IncompatibilityError(
            f"{path}: model vocabulary {cfg.vocab_size} != task spec vocabulary {binding.task_spec.vocabulary.size}"
        )
    return model, binding


def check_d_f(model: Mecformer, bags, source) -> None:
    if bags and bags[0].d_f != model.config.d_f:
        raise IncompatibilityError(f"{source}: model expects d_f={model.config.d_f}, data has d_f={bags[0].d_f}")
