"""Progressive multi-stage training.

Each stage trains on its own bucket mix. Per optimizer step every worker group
takes one batch of a single bucket type; group gradients are summed in group
order 0..G-1 and averaged. Randomness for a step comes from
``default_rng([seeds.train, step, group])`` so a resumed run replays the same
draws as an uninterrupted one.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from backend.autodiff.optim import Adam
from backend.autodiff.tensor import backward
from backend.codec.latent import ToyCodec
from backend.core.dataset import ClipRecord, batch_inputs, load_clips
from backend.flow.rectified import cfm_loss, drop_conditions, fixed_draws, validation_loss
from backend.models.mvdit import MVDiT, build_model
from backend.parallel.buckets import BucketBatch, BucketBatchSampler, StagePlan, plan_buckets
from backend.parallel.sequence import Trace
from backend.services import logger as project_logger
from backend.services.config import RunConfig, config_hash
from backend.services.storage import (
    CheckpointError,
    OutputDir,
    checkpoint_bytes,
    load_checkpoint,
    merge_checkpoint,
    split_checkpoint,
)
from backend.services.utils import memory_mb

LOGGER = project_logger.get_logger("core.trainer")

TRAIN_LOG = "train_log.jsonl"
VALIDATION_LOG = "validation_log.jsonl"
SP_TRACE = "sp_trace.jsonl"
LATEST = "latest.ckpt"


@dataclass
class TrainResult:
    step: int
    losses: List[float] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)
    checkpoint: Optional[str] = None


def load_model_state(model: MVDiT, params: Dict[str, np.ndarray]) -> None:
    try:
        model.load_state_dict(params, strict=True)
    except (KeyError, ValueError) as error:
        raise CheckpointError(f"checkpoint does not fit the configured model: {error}") from error


class Trainer:
    def __init__(self, config: RunConfig, output: OutputDir) -> None:
        self.config = config
        self.output = output
        self.model = build_model(
            config.model,
            config.codec.latent_channels,
            config.seeds.model,
            conditions=config.conditions,
            flip_window=config.fault.flip_window,
        )
        self.params = list(self.model.named_parameters())
        self.optimizer = Adam(self.params, lr=config.train.lr, warmup_steps=config.train.warmup_steps)
        self.codec = ToyCodec(config.codec)
        self.step = 0
        self._clips: Dict[int, List[ClipRecord]] = {}

    # Checkpoints

    def save_checkpoint(self) -> str:
        meta = {"step": self.step, "config_hash": config_hash(self.config)}
        entries = merge_checkpoint(self.model.state_dict(), self.optimizer.state_dict())
        data = checkpoint_bytes(meta, entries)
        self.output.write_bytes(data, "checkpoints", f"step_{self.step:06d}.ckpt")
        path = self.output.write_bytes(data, "checkpoints", LATEST)
        LOGGER.info("checkpoint at step {} -> {}", self.step, path)
        return str(path)

    def resume(self, path: str) -> None:
        meta, entries = load_checkpoint(path)
        params, optim = split_checkpoint(entries)
        load_model_state(self.model, params)
        if optim:
            try:
                self.optimizer.load_state_dict(optim)
            except KeyError as error:
                raise CheckpointError(f"optimizer state is incomplete: {error}") from error
        self.step = int(meta.get("step", 0))
        LOGGER.info("resumed from {} at step {}", path, self.step)

    # Data

    def stage_clips(self, index: int, stage: StagePlan) -> List[ClipRecord]:
        if index not in self._clips:
            self._clips[index] = load_clips(self.config.data, stage, self.codec, self.config.seeds.data)
        return self._clips[index]

    def _schedule(self, stage: StagePlan, clips: Sequence[ClipRecord]) -> Iterator[List[Optional[BucketBatch]]]:
        train = self.config.train
        buckets = plan_buckets(stage.buckets, train.target_iter_seconds)
        sampler = BucketBatchSampler(
            [c.key for c in clips],
            buckets,
            workers=train.data_parallel * stage.sp_size,
            sp_size=stage.sp_size,
            min_ratio=train.min_ratio,
            seed=self.config.seeds.data + stage.stage,
        )
        epoch = 0
        while True:
            rows = sampler.epoch(epoch)
            if not rows:
                return
            yield from rows
            epoch += 1

    # Steps

    def group_loss(self, clips: Sequence[ClipRecord], rng: np.random.Generator):
        inputs, z1 = batch_inputs(clips)
        ctx = self.model.conditions.encode(inputs)
        ctx = drop_conditions(ctx, rng, self.config.conditions.drop_prob)
        return cfm_loss(self.model, z1, ctx, rng)

    def train_step(self, row: Sequence[Optional[BucketBatch]], clips: Sequence[ClipRecord]) -> Tuple[float, float]:
        totals: List[Optional[np.ndarray]] = [None] * len(self.params)
        losses = []
        for group, batch in enumerate(row):
            if batch is None:
                continue
            rng = np.random.default_rng([self.config.seeds.train, self.step, group])
            loss = self.group_loss([clips[i] for i in batch.indices], rng)
            grads = backward(loss, inputs=[p for _, p in self.params])
            for i, g in enumerate(grads):
                if g is not None:
                    totals[i] = g.copy() if totals[i] is None else totals[i] + g
            losses.append(loss.item())
        active = len(losses)
        for (_, p), g in zip(self.params, totals):
            p.grad = None if g is None else g / active
        lr = self.optimizer.step()
        self.optimizer.zero_grad()
        self.step += 1
        return float(np.mean(losses)), lr

    def validate(self, clips: Sequence[ClipRecord]) -> float:
        chosen = list(clips[: max(1, self.config.data.validation_clips)])
        contexts, latents = [], []
        for clip in chosen:
            inputs, z1 = batch_inputs([clip])
            contexts.append(self.model.conditions.encode(inputs))
            latents.append(z1)
        draws = fixed_draws(latents, self.config.seeds.validation)
        return validation_loss(self.model, latents, contexts, draws)

    # Run

    def run(self, resume: Optional[str] = None) -> TrainResult:
        if resume:
            self.resume(resume)
        result = TrainResult(step=self.step)
        train = self.config.train
        start = 0
        for index, stage in enumerate(self.config.stages):
            end = start + stage.steps
            if self.step >= end:
                start = end
                continue
            self.model.set_sequence_parallel(stage.sp_size)
            clips = self.stage_clips(index, stage)
            LOGGER.info("stage {}: {} steps over {} buckets, {} clips", stage.stage, stage.steps, len(stage.buckets), len(clips))
            schedule = self._schedule(stage, clips)
            for _ in range(self.step - start):
                next(schedule)
            progress = tqdm(total=end - self.step, desc=f"stage {stage.stage}", leave=False, disable=not sys.stderr.isatty())
            while self.step < end:
                row = next(schedule)
                began = time.perf_counter()
                trace = Trace(iteration=self.step + 1) if stage.sp_size > 1 else None
                self.model.set_sequence_parallel(stage.sp_size, trace)
                loss, lr = self.train_step(row, clips)
                if trace is not None:
                    self.model.set_sequence_parallel(stage.sp_size)
                    self.output.extend_jsonl(trace.records(), SP_TRACE)
                record = {
                    "step": self.step,
                    "stage": stage.stage,
                    "loss": loss,
                    "lr": lr,
                    "bucket": ",".join(b.bucket for b in row if b is not None),
                    "wall_ms": round(1000.0 * (time.perf_counter() - began), 3),
                }
                self.output.append_jsonl(record, TRAIN_LOG)
                project_logger.metric("step {} stage {} loss {:.5f} lr {:.2e}", self.step, stage.stage, loss, lr)
                result.losses.append(loss)
                progress.update(1)
                progress.set_postfix(loss=f"{loss:.4f}")
                if self.step % train.validate_every == 0 or self.step == end:
                    val = self.validate(clips)
                    result.validation.append((self.step, val))
                    self.output.append_jsonl({"step": self.step, "stage": stage.stage, "val_loss": val}, VALIDATION_LOG)
                    project_logger.metric("validation step {} loss {:.5f}", self.step, val)
                if self.step % train.checkpoint_every == 0:
                    result.checkpoint = self.save_checkpoint()
            progress.close()
            rss = memory_mb()
            LOGGER.info("stage {} done at step {}{}", stage.stage, self.step, "" if rss is None else f", rss {rss:.0f} MiB")
            start = end
        self.model.set_sequence_parallel(1)
        result.step = self.step
        result.checkpoint = self.save_checkpoint()
        return result


def run_train(config: RunConfig, output: OutputDir, resume: Optional[str] = None) -> TrainResult:
    return Trainer(config, output).run(resume=resume)
