"""
End-to-end runs: training with learned or scheduled precision, checkpoint
evaluation, parameter sweeps, schedule replay and static cost reports.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from .autodiff import SGDHyper, Tape, Tensor, backward, sgd_step, softmax_cross_entropy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, set_dotted, validate_config_dict
from .cost_model import (
    BalanceConfig,
    CostState,
    balance,
    bitops_at_bits,
    cost_grad,
    cost_loss,
    inference_bitops,
    static_target,
    training_bitops_report,
    training_bitops_summary,
    write_training_bitops_report,
)
from .datasets import batches_per_epoch, iterate_batches, load_data, load_test_dir
from .exceptions import CheckpointError, ConfigError, DatasetError, DivergenceError, RangeError
from .networks import ForwardContext, build_model
from .quantizer import FULL_PRECISION_BITS, GradQuantSpec, beta_sgd_step, bits_of
from .schedulers import (
    MAX_BITS,
    MIN_BITS,
    CyclicSchedule,
    LearnedSchedule,
    ProgressiveSchedule,
    RandomKSchedule,
    ScheduleLog,
    StagedSchedule,
    StaticSchedule,
    record_iteration,
)
from .seeding import RandomStreams

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ['iteration', 'epoch', 'split', 'loss', 'accuracy', 'avg_bits', 'iter_fwd_bitops',
                   'iter_train_bitops']
SWEEP_COLUMNS = ['value', 'final_acc', 'total_train_bitops', 'final_inference_bitops']

BETA_TOLERANCE = 1e-9


@dataclass
class RunArtifacts:
    output_dir: Path
    metrics_path: Path
    schedule_path: Path
    checkpoint_path: Path
    summary_path: Path
    summary: dict
    extra_paths: Dict[str, Path] = field(default_factory=dict)
    config: Optional[RunConfig] = None

    @property
    def paths(self):
        return [self.metrics_path, self.schedule_path, self.checkpoint_path, self.summary_path,
                *self.extra_paths.values()]


def build_schedule(cfg: RunConfig, net):
    spec = cfg.precision.scheduler
    if spec.kind == 'learned':
        return LearnedSchedule(net.precision_params)
    if spec.kind == 'static':
        return StaticSchedule(spec.bits)
    if spec.kind == 'random_k':
        return RandomKSchedule(spec.k, spec.choices, spec.active_epochs, spec.fallback_bits, spec.per_layer)
    if spec.kind == 'staged':
        return StagedSchedule(spec.boundaries, spec.stage_bits, block_of=net.block_of(len(spec.stage_bits[0])))
    if spec.kind == 'progressive':
        return ProgressiveSchedule(spec.b_start, spec.b_end, spec.num_stages, cfg.train.epochs)
    if spec.kind == 'cyclic':
        return CyclicSchedule(spec.b_min, spec.b_max, spec.cycle_len)
    raise ConfigError(f"unknown scheduler kind '{spec.kind}'", paths=['precision.scheduler.kind'])


def lr_at_epoch(train_spec, epoch):
    """Step decay: multiply by gamma at every milestone (a fraction of the epochs) already reached."""
    passed = sum(1 for m in train_spec.milestones if epoch >= int(m * train_spec.epochs))
    return train_spec.lr * train_spec.gamma ** passed


def evaluate_split(net, dataset, bits, batch_size):
    """(mean loss, accuracy) of `net` on `dataset` at `bits`, eval mode, no tape."""
    if len(dataset) == 0:
        raise DatasetError(f"cannot evaluate on empty dataset '{dataset.name}'")
    ctx = ForwardContext(bits=bits, training=False)
    total_loss, correct = 0.0, 0
    for xb, yb in iterate_batches(dataset, batch_size):
        logits = net.forward(Tensor(xb), ctx)
        total_loss += softmax_cross_entropy(logits, yb).item() * len(yb)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return total_loss / len(dataset), correct / len(dataset)


def average_bits(bits):
    return float(np.mean(list(bits.values()))) if bits else float(FULL_PRECISION_BITS)


class Trainer:
    """
    One training run. Each iteration fake-quantizes every quantized layer at
    the schedule's bits, backpropagates with quantized activation gradients,
    balances the task and cost gradients of the precision parameters (learned
    schedule only) and steps weights and betas on the same batch.
    """

    def __init__(self, cfg: RunConfig, schedule=None, data=None):
        self.cfg = cfg
        self.streams = RandomStreams(cfg.train.seed)
        self.data = data if data is not None else load_data(cfg.data, cfg.train.seed)
        self.net = build_model(cfg.model, self.data.input_shape, self.data.num_classes, self.streams['weights'],
                               beta_init=cfg.precision.beta_init, lr_beta=cfg.precision.lr)
        self.costs = self.net.layer_costs
        self.names = self.net.layer_names
        self.precisions = self.net.precision_params
        self.ordered = [self.precisions[c.layer_id] for c in self.costs]
        self.t_target, self.t_stat = static_target(self.costs, cfg.precision.b_static, cfg.precision.t_frac)
        self.schedule = schedule if schedule is not None else build_schedule(cfg, self.net)
        self.balance_cfg = BalanceConfig(cfg.precision.alpha, cfg.precision.epsilon)
        self.grad_spec = GradQuantSpec(cfg.precision.bw_bits, cfg.train.seed)
        self.iterations_per_epoch = batches_per_epoch(self.data.train, cfg.train.batch_size)
        if self.iterations_per_epoch == 0:
            raise DatasetError(f"{len(self.data.train)} training samples do not fill one batch of "
                               f"{cfg.train.batch_size}")
        self.total_iterations = cfg.train.epochs * self.iterations_per_epoch
        self.cost_state = CostState(0.0, self.t_target, cfg.precision.t_frac)
        self.log = ScheduleLog()
        self.metrics = []
        self.last_bits = {}
        self.beta_decreases_inactive = 0

    def learning_precision(self, epoch):
        freeze = self.cfg.train.freeze_precision_after_epoch
        return self.schedule.learned and (freeze is None or epoch < freeze)

    def current_bits(self):
        if self.schedule.learned:
            return {lid: bits_of(p) for lid, p in self.precisions.items()}
        return dict(self.last_bits)

    def train_step(self, iteration, epoch, xb, yb, hyper):
        learn = self.learning_precision(epoch)
        bits = {c.layer_id: self.schedule.bits_for(iteration, epoch, c.layer_id, rng=self.streams['random_k'])
                for c in self.costs}
        for p in self.ordered:
            p.zero_grad()
        ctx = ForwardContext(bits, training=True, grad_spec=self.grad_spec, rng=self.streams['rounding'],
                             learn_precision=learn)
        with Tape():
            logits = self.net.forward(Tensor(xb), ctx)
            loss = softmax_cross_entropy(logits, yb)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            logger.error(f"Non-finite loss {loss_value} at iteration {iteration} (epoch {epoch}), bits {bits}")
            raise DivergenceError(f"training diverged: loss is {loss_value} at iteration {iteration}",
                                  iteration=iteration)
        backward(loss)

        c = bitops_at_bits(bits, self.costs)
        self.cost_state.c_current = c
        record_iteration(self.log, iteration, bits, self.costs, self.names,
                         self.precisions if self.schedule.learned else None, n=self.cfg.model.n)

        if learn:
            g_task = np.array([p.grad for p in self.ordered])
            g_cost = cost_grad(self.ordered, self.costs, c, self.t_target)
            g_total = balance(g_task, g_cost, self.balance_cfg)
            for p, g in zip(self.ordered, g_total):
                before = p.beta
                beta_sgd_step(p, g)
                if p.beta < before - BETA_TOLERANCE and not self.cost_state.hinge_active:
                    self.beta_decreases_inactive += 1
            logger.debug(f"iter {iteration}: C={c:.0f} T={self.t_target:.0f} "
                         f"cost loss {cost_loss(c, self.t_target):.0f} G_T={g_task} G={g_total}")

        sgd_step(self.net.parameters(), hyper)
        self.last_bits = bits

        bw = self.cfg.precision.bw_bits
        train_bitops = float(sum(cost.macs * (bits[cost.layer_id] ** 2 + 2 * bits[cost.layer_id] * bw)
                                 for cost in self.costs))
        self.cost_state.cumulative_train_bitops += train_bitops
        accuracy = float(np.mean(np.argmax(logits.data, axis=1) == yb))
        self.metrics.append({
            'iteration': iteration, 'epoch': epoch, 'split': 'train', 'loss': loss_value, 'accuracy': accuracy,
            'avg_bits': average_bits(bits), 'iter_fwd_bitops': c, 'iter_train_bitops': train_bitops,
        })
        return loss_value

    def evaluate_epoch(self, iteration, epoch):
        bits = self.current_bits()
        loss, accuracy = evaluate_split(self.net, self.data.test, bits, self.cfg.train.batch_size)
        self.metrics.append({
            'iteration': iteration, 'epoch': epoch, 'split': 'test', 'loss': loss, 'accuracy': accuracy,
            'avg_bits': average_bits(bits), 'iter_fwd_bitops': bitops_at_bits(bits, self.costs),
            'iter_train_bitops': 0.0,
        })
        return loss, accuracy

    def run(self) -> RunArtifacts:
        cfg = self.cfg
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        logger.info(f"Starting {self.schedule.kind} run: {cfg.train.epochs} epochs x {self.iterations_per_epoch} "
                    f"iterations, T={self.t_target:.0f} ({cfg.precision.t_frac} of T_stat={self.t_stat:.0f}), "
                    f"output {out}")

        iteration = 0
        for epoch in range(cfg.train.epochs):
            hyper = SGDHyper(lr_at_epoch(cfg.train, epoch), cfg.train.momentum, cfg.train.weight_decay)
            losses = []
            for xb, yb in iterate_batches(self.data.train, cfg.train.batch_size, rng=self.streams['data']):
                losses.append(self.train_step(iteration, epoch, xb, yb, hyper))
                iteration += 1
            test_loss, test_acc = self.evaluate_epoch(iteration - 1, epoch)
            logger.info(f"Epoch {epoch + 1}/{cfg.train.epochs}: train loss {np.mean(losses):.4f}, "
                        f"test loss {test_loss:.4f}, test acc {test_acc:.4f}, "
                        f"bits {self.current_bits()}, C/T {self.cost_state.c_current / self.t_target:.3f}")

        return self.write_artifacts(out)

    def checkpoint_metadata(self, final_bits):
        return {
            'config': self.cfg.to_dict(),
            'betas': {str(lid): p.beta for lid, p in self.precisions.items()},
            'final_bits': {str(lid): b for lid, b in final_bits.items()},
            'layer_names': {str(lid): name for lid, name in self.names.items()},
            'input_shape': list(self.net.input_shape),
            'num_classes': self.net.num_classes,
            'normalization': list(self.data.normalization) if self.data.normalization else None,
        }

    def write_artifacts(self, out: Path) -> RunArtifacts:
        metrics = pd.DataFrame(self.metrics, columns=METRICS_COLUMNS)
        metrics_path = out / 'metrics.csv'
        metrics.to_csv(metrics_path, index=False)
        logger.info(f"Wrote {len(metrics)} metric rows to {metrics_path}")

        schedule_path = out / 'schedule.csv'
        self.log.write_csv(schedule_path)
        schedule = self.log.to_frame()

        final_bits = self.current_bits()
        checkpoint_path = save_checkpoint(out / 'checkpoint.ldpc', self.net.state_arrays(),
                                          self.checkpoint_metadata(final_bits))

        report = training_bitops_report(schedule, self.costs, self.cfg.precision.bw_bits)
        cost_path = out / 'train_cost.csv'
        write_training_bitops_report(report, cost_path)
        profile_path = out / 'precision_profile.csv'
        precision_profile(schedule, self.iterations_per_epoch).to_csv(profile_path, index=False)
        blocks_path = out / 'block_precision.csv'
        block_precision(schedule, self.iterations_per_epoch, self.net.block_of()).to_csv(blocks_path, index=False)

        test_rows = metrics[metrics['split'] == 'test']
        static_bits = {c.layer_id: self.cfg.precision.b_static for c in self.costs}
        summary = {
            **training_bitops_summary(report, self.t_target, self.t_stat, self.cfg.precision.t_frac),
            'scheduler': self.schedule.kind,
            'epochs': self.cfg.train.epochs,
            'seed': self.cfg.train.seed,
            'final_acc': float(test_rows['accuracy'].iloc[-1]),
            'final_test_loss': float(test_rows['loss'].iloc[-1]),
            'final_inference_bitops': inference_bitops(final_bits, self.costs),
            'static_inference_bitops': inference_bitops(static_bits, self.costs),
            'final_bits': {str(lid): b for lid, b in final_bits.items()},
            'final_betas': {str(lid): p.beta for lid, p in self.precisions.items()},
            'mean_final_bits': average_bits(final_bits),
            'beta_decreases_while_hinge_inactive': self.beta_decreases_inactive,
        }
        summary_path = out / 'summary.json'
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
        logger.info(f"Run finished: test acc {summary['final_acc']:.4f}, "
                    f"train BitOPs {summary['total_train_bitops']:.4g}, "
                    f"inference BitOPs {summary['final_inference_bitops']:.4g}")
        return RunArtifacts(out, metrics_path, schedule_path, checkpoint_path, summary_path, summary, {
            'train_cost': cost_path,
            'precision_profile': profile_path,
            'block_precision': blocks_path,
        }, config=self.cfg)


def precision_profile(schedule: pd.DataFrame, window):
    """Per-layer beta smoothed with a moving average over `window` iterations. Logging only."""
    profile = schedule[['iteration', 'layer_id', 'layer_name', 'beta', 'bits']].copy()
    profile['beta_smoothed'] = (
        profile.groupby('layer_id')['beta'].transform(lambda s: s.rolling(window, min_periods=1).mean())
    )
    return profile


def block_precision(schedule: pd.DataFrame, iterations_per_epoch, block_of):
    frame = schedule[['iteration', 'layer_id', 'beta', 'bits']].copy()
    frame['epoch'] = frame['iteration'] // iterations_per_epoch
    frame['block'] = frame['layer_id'].map(block_of)
    grouped = frame.groupby(['epoch', 'block']).agg(mean_bits=('bits', 'mean'), mean_beta=('beta', 'mean'))
    return grouped.reset_index()


def train(cfg: RunConfig, schedule=None) -> RunArtifacts:
    return Trainer(cfg, schedule=schedule).run()


def restore_model(checkpoint):
    """Rebuild the network a checkpoint was saved from and load its tensors and betas."""
    try:
        cfg = validate_config_dict(checkpoint.config, source='checkpoint config')
    except (ConfigError, KeyError) as exc:
        raise CheckpointError(f"checkpoint carries an invalid config: {exc}") from exc
    meta = checkpoint.metadata
    net = build_model(cfg.model, tuple(meta['input_shape']), meta['num_classes'],
                      RandomStreams(cfg.train.seed)['weights'], beta_init=cfg.precision.beta_init,
                      lr_beta=cfg.precision.lr)
    net.load_state_arrays(checkpoint.arrays)
    for lid, beta in checkpoint.betas.items():
        if lid not in net.precision_params:
            raise CheckpointError(f"checkpoint has a beta for layer {lid}, which is not quantized in this model")
        net.precision_params[lid].beta = beta
    return net, cfg


def evaluate(checkpoint_path, dataset=None, bits=None, data_dir=None):
    """
    Accuracy and inference BitOPs of a saved model. Uses the checkpoint's final
    bit-widths unless `bits` overrides them on every quantized layer.
    """
    if bits is not None and not MIN_BITS <= bits <= MAX_BITS:
        raise RangeError(f"bits override must lie in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    checkpoint = load_checkpoint(checkpoint_path)
    net, cfg = restore_model(checkpoint)
    if dataset is None:
        normalization = checkpoint.metadata.get('normalization')
        if data_dir is not None:
            dataset = load_test_dir(data_dir, net.num_classes, normalization)
        else:
            dataset = load_data(cfg.data, cfg.train.seed).test
    if dataset.input_shape != net.input_shape:
        raise CheckpointError(f"dataset samples have shape {dataset.input_shape}, model expects {net.input_shape}")
    if len(dataset) and int(dataset.y.max()) >= net.num_classes:
        raise CheckpointError(f"dataset has labels up to {int(dataset.y.max())}, model has {net.num_classes} classes")

    costs = net.layer_costs
    eval_bits = checkpoint.final_bits if bits is None else {c.layer_id: int(bits) for c in costs}
    loss, accuracy = evaluate_split(net, dataset, eval_bits, cfg.train.batch_size)
    result = {
        'accuracy': accuracy,
        'loss': loss,
        'inference_bitops': inference_bitops(eval_bits, costs),
        'bits': {str(lid): b for lid, b in eval_bits.items()},
        'samples': len(dataset),
    }
    logger.info(f"Evaluated {checkpoint_path} on {len(dataset)} samples: acc {accuracy:.4f}, "
                f"inference BitOPs {result['inference_bitops']:.4g}")
    return result


def run_sweep(cfg: RunConfig, param, values, out=None):
    """
    One run per value of the dotted parameter `param`, same seed throughout.
    Every config is validated before the first run starts. Returns the
    artifacts and the path of the combined summary CSV.
    """
    out = Path(out) if out is not None else cfg.output_dir / f"sweep-{param}"
    base = cfg.to_dict()
    configs = []
    for value in values:
        data = set_dotted(base, param, value)
        data['train']['output_dir'] = str(out / f"{param}={value}")
        configs.append((value, validate_config_dict(data, source=f"sweep {param}={value}")))

    out.mkdir(parents=True, exist_ok=True)
    artifacts, rows = [], []
    for value, run_cfg in configs:
        logger.info(f"Sweep {param}={value}")
        result = train(run_cfg)
        artifacts.append(result)
        rows.append({'value': value, 'final_acc': result.summary['final_acc'],
                     'total_train_bitops': result.summary['total_train_bitops'],
                     'final_inference_bitops': result.summary['final_inference_bitops']})
    summary_path = out / 'summary.csv'
    pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(summary_path, index=False)
    logger.info(f"Wrote sweep summary ({len(rows)} runs) to {summary_path}")
    return artifacts, summary_path


def run_replay(cfg: RunConfig, log_path) -> RunArtifacts:
    """Train with bits forced from a recorded schedule log; precision learning is off."""
    schedule = ScheduleLog.read_csv(log_path).replay()
    trainer = Trainer(cfg, schedule=schedule)
    schedule.check_covers(trainer.total_iterations, [c.layer_id for c in trainer.costs])
    logger.info(f"Replaying {schedule.iterations} logged iterations from {log_path}")
    return trainer.run()


def run_cost_report(cfg: RunConfig, data=None):
    """Static cost analysis: per-layer MACs and full BitOPs, T_stat, T and the achievable range of C."""
    data = data if data is not None else load_data(cfg.data, cfg.train.seed)
    net = build_model(cfg.model, data.input_shape, data.num_classes, RandomStreams(cfg.train.seed)['weights'],
                      beta_init=cfg.precision.beta_init, lr_beta=cfg.precision.lr)
    costs = net.layer_costs
    quantized = {c.layer_id for c in costs}
    kinds = {layer.layer_id: type(layer).__name__ for layer in net.layers}
    b_static = cfg.precision.b_static
    layers = pd.DataFrame([{
        'layer_id': c.layer_id,
        'name': c.name,
        'kind': kinds[c.layer_id],
        'quantized': c.layer_id in quantized,
        'macs': c.macs,
        'o_full': c.o_full,
        'bitops_at_b_static': c.macs * b_static ** 2 if c.layer_id in quantized else np.nan,
    } for c in net.all_layer_costs])
    t_target, t_stat = static_target(costs, b_static, cfg.precision.t_frac)
    totals = {
        'quantized_layers': len(costs),
        'total_macs': int(sum(c.macs for c in costs)),
        'total_o_full': int(sum(c.o_full for c in costs)),
        'b_static': b_static,
        'T_stat': t_stat,
        't_frac': cfg.precision.t_frac,
        'T': t_target,
        'C_min': bitops_at_bits({c.layer_id: cfg.model.b_min for c in costs}, costs),
        'C_max': bitops_at_bits({c.layer_id: cfg.model.b_max for c in costs}, costs),
    }
    return layers, totals


def write_cost_report(layers: pd.DataFrame, totals: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / 'cost_report.csv', out / 'cost_report.json'
    layers.to_csv(csv_path, index=False)
    json_path.write_text(json.dumps({
        'totals': totals,
        'layers': json.loads(layers.to_json(orient='records')),
    }, indent=2))
    logger.info(f"Wrote cost report to {csv_path} and {json_path}")
    return csv_path, json_path
