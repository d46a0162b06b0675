"""Training loop, checkpointing and seeded restarts."""

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from advdepth import config as cfg
from advdepth.adversarial import build_discriminator, d_loss, g_loss
from advdepth.data import StereoDataset, load_split, synthetic_split
from advdepth.losses import build_scale_outputs, l1_loss, reconstruction_loss
from advdepth.model import GeneratorConfig, build_generator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, batch, components):
        self.step, self.batch, self.components = step, batch, components
        super().__init__(f"non-finite loss at step {step} (batch {batch}): {components}")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Datasets:
    train: StereoDataset
    val: list
    test: list


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    initial_val: dict
    epochs: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str = None
    run_log: str = None
    steps: int = 0
    discriminator_evals: int = 0
    step_objectives: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @property
    def final_val(self):
        return self.epochs[-1]["val"] if self.epochs else self.initial_val


def build_datasets(config):
    d = config.data
    if d.kind == "synthetic":
        s = d.synthetic
        scene = s.scene
        if (scene.height, scene.width) != (d.height, d.width):
            raise cfg.ConfigError("data.synthetic.scene size must match data.height/data.width")
        train = synthetic_split(scene, s.num_train, s.seed, "train")
        val = synthetic_split(scene, s.num_val, s.seed, "val")
        test = synthetic_split(scene, s.num_test, s.seed, "test")
    else:
        size = (d.height, d.width)
        train = list(load_split(d.kind, d.root, "train", size))
        val = list(load_split(d.kind, d.root, "val", size, with_depth=False))
        test = list(load_split(d.kind, d.root, "test", size))
    log.info("datasets: train=%d val=%d test=%d", len(train), len(val), len(test))
    return Datasets(StereoDataset(train, d.augment, config.train.seed), val, test)


def _stack(samples):
    return torch.stack([s.left for s in samples]), torch.stack([s.right for s in samples])


@torch.no_grad()
def validate(gen, samples, weights, batch_size=8):
    """Mean reconstruction loss and finest-scale photometric L1 over ``samples``."""
    if not samples:
        return {"loss": float("nan"), "l1": float("nan")}
    was_training = gen.training
    gen.eval()
    total = l1 = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        left, right = _stack(chunk)
        outs = build_scale_outputs(left, right, gen(left))
        total += float(reconstruction_loss(outs, weights)) * len(chunk)
        o = outs[0]
        l1 += 0.5 * float(l1_loss(o.recon_left, o.left) + l1_loss(o.recon_right, o.right)) * len(chunk)
    gen.train(was_training)
    return {"loss": total / len(samples), "l1": l1 / len(samples)}


class _CountingModule(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return self.inner(x)


def save_checkpoint(path, gen, config, epoch, opt_g=None, disc=None, opt_d=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "generator",
        "generator_config": gen.config.to_dict(),
        "arch_hash": cfg.arch_hash(gen.config),
        "config": cfg.to_dict(config) if config is not None else None,
        "config_hash": cfg.config_hash(config) if config is not None else None,
        "epoch": epoch,
        "state_dict": gen.state_dict(),
        "optimizer": opt_g.state_dict() if opt_g is not None else None,
        "disc_state": disc.state_dict() if disc is not None else None,
        "disc_optimizer": opt_d.state_dict() if opt_d is not None else None,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") == "generator":
        gcfg = GeneratorConfig(**payload["generator_config"])
        if payload["arch_hash"] != cfg.arch_hash(gcfg):
            raise CheckpointError(f"{path}: stored architecture hash does not match its generator config")
        gen = build_generator(gcfg)
        gen.load_state_dict(payload["state_dict"])
        gen.eval()
        return gen, payload
    if payload.get("kind") == "oracle":
        from advdepth.eval import OracleGenerator

        return OracleGenerator.from_payload(payload), payload
    raise CheckpointError(f"{path}: unknown checkpoint kind {payload.get('kind')!r}")


def _set_determinism(config):
    seed = config.train.seed
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    if config.train.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def train(config, data=None, out_dir=None, record_objectives=False, return_model=False):
    """Train one model; returns its :class:`RunRecord` (and the generator with ``return_model``)."""
    t0 = time.time()
    data = data if data is not None else build_datasets(config)
    data.train.seed = config.train.seed
    _set_determinism(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    gen = build_generator(config.generator)
    tc, weights, variant = config.train, config.weights, config.gan
    opt_g = torch.optim.Adam(gen.parameters(), lr=tc.lr, betas=(0.9, 0.999))
    sched_g = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt_g, mode="min", factor=tc.scheduler.factor, patience=tc.scheduler.patience)
    disc = opt_d = sched_d = None
    if variant.enabled:
        shape = tuple(data.train.samples[0].left.shape)
        disc = _CountingModule(build_discriminator(variant, shape))
        opt_d = torch.optim.Adam(disc.parameters(), lr=tc.lr, betas=(0.9, 0.999))
        sched_d = torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt_d, mode="min", factor=tc.scheduler.factor, patience=tc.scheduler.patience)
    gp_rng = torch.Generator().manual_seed(tc.seed + 1)

    record = RunRecord(cfg.config_hash(config), tc.seed, validate(gen, data.val, weights, tc.batch_size))
    log_fh = None
    if out is not None:
        record.run_log = str(out / "run_log.jsonl")
        log_fh = open(record.run_log, "w", encoding="utf-8")
    step = 0
    try:
        for epoch in range(1, tc.epochs + 1):
            gen.train()
            data.train.set_epoch(epoch)
            running, nb = 0.0, 0
            for batch_id, (left, right) in enumerate(data.train.batches(tc.batch_size)):
                outs = build_scale_outputs(left, right, gen(left))
                rec, terms = reconstruction_loss(outs, weights, return_terms=True)
                comps = {k: float(v.detach()) for k, v in terms.items()}
                objective = rec
                if disc is not None:
                    fake = outs[0].recon_right
                    for _ in range(variant.n_critic):
                        opt_d.zero_grad()
                        ld = d_loss(variant, disc, right, fake.detach(), generator=gp_rng)
                        if not torch.isfinite(ld):
                            raise NonFiniteLossError(step, batch_id, {**comps, "d_loss": float(ld.detach())})
                        ld.backward()
                        opt_d.step()
                    comps["d_loss"] = float(ld.detach())
                    lg = g_loss(variant, disc, fake)
                    comps["g_loss"] = float(lg.detach())
                    objective = rec + weights.phi_g * lg
                comps["total"] = float(objective.detach())
                if not math.isfinite(comps["total"]):
                    raise NonFiniteLossError(step, batch_id, comps)
                opt_g.zero_grad()
                objective.backward()
                opt_g.step()
                if record_objectives:
                    record.step_objectives.append(comps["total"])
                running += comps["total"]
                nb += 1
                step += 1
                if log_fh is not None:
                    log_fh.write(json.dumps({"epoch": epoch, "step": step, **comps,
                                             "lr": opt_g.param_groups[0]["lr"]}) + "\n")
                if tc.max_steps is not None and step >= tc.max_steps:
                    break
            val = validate(gen, data.val, weights, tc.batch_size)
            sched_g.step(val["loss"])
            if sched_d is not None:
                sched_d.step(val["loss"])
            record.epochs.append({"epoch": epoch, "train_loss": running / max(nb, 1), "val": val,
                                  "lr": opt_g.param_groups[0]["lr"], "steps": step})
            log.info("epoch %d: train %.4f val %.4f (l1 %.4f)", epoch, running / max(nb, 1), val["loss"], val["l1"])
            if out is not None and (epoch % tc.checkpoint_every == 0 or epoch == tc.epochs):
                record.checkpoint = str(save_checkpoint(
                    out / "checkpoint.pt", gen, config, epoch, opt_g, disc.inner if disc else None, opt_d))
            if tc.max_steps is not None and step >= tc.max_steps:
                break
    except NonFiniteLossError as exc:
        if out is not None:
            (out / "nonfinite_dump.json").write_text(
                json.dumps({"step": exc.step, "batch": exc.batch, "components": exc.components}, indent=2))
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None and record.checkpoint is None:
        record.checkpoint = str(save_checkpoint(
            out / "checkpoint.pt", gen, config, len(record.epochs), opt_g, disc.inner if disc else None, opt_d))
    record.steps = step
    record.discriminator_evals = disc.calls if disc is not None else 0
    record.wall_time = time.time() - t0
    if out is not None:
        (out / "run_record.json").write_text(json.dumps(record.to_dict(), indent=2))
    return (record, gen) if return_model else record


def run_restarts(config, data=None, out_dir=None):
    """``train.restarts`` runs with seeds ``seed, seed+1, ...``; returns (records, generators)."""
    records, gens = [], []
    for i in range(config.train.restarts):
        run_cfg = cfg.with_seed(config, config.train.seed + i)
        sub = Path(out_dir) / f"restart_{i:02d}" if out_dir is not None else None
        record, gen = train(run_cfg, data, sub, return_model=True)
        records.append(record)
        gens.append(gen)
    return records, gens


def report_restarts(records, eval_results):
    """Per-metric min / max / mean / sample std across restarts."""
    if len(records) < 2:
        raise ValueError("restart statistics need at least 2 records")
    if len(eval_results) != len(records):
        raise ValueError("one evaluation result per record is required")
    rows = [r if isinstance(r, dict) else r.aggregate() for r in eval_results]
    summary = {}
    for metric in rows[0]:
        vals = [float(row[metric]) for row in rows]
        # statistics rounds exactly: identical runs give std 0 and mean == min
        summary[metric] = {
            "min": min(vals),
            "max": max(vals),
            "mean": statistics.mean(vals),
            "std": statistics.stdev(vals),
        }
    return summary
