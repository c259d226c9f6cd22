"""Desk-scale joint pretraining of orchestrator, denoiser and pointer."""

import math
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from loguru import logger

from avs.core.config import RunConfig
from avs.core.errors import NumericalAbort
from avs.core.logger import log_train_step
from avs.models.report import TrainRecord, TrainReport
from avs.parsers.traces import TraceWriter
from avs.services import flow
from avs.services.bundle import NetworkBundle
from avs.services.generator import TrainingBatch, ground_truth_batch
from avs.services.synthworld import hashed_seed

WARMUP = "warmup"
JOINT = "joint"
EVAL_SEED = 0xE7A1


def check_finite(values: dict[str, float], where: str, step: int) -> None:
    """Raise NumericalAbort if any value is NaN or infinite."""
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericalAbort(f"non-finite values during {where}", {"step": step, **values})


def grad_norm(params) -> float:
    grads = [p.grad.detach().reshape(-1) for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.cat(grads)))


class TeacherTrainer:
    """
    Trains the teacher on synthetic world chunks.

    The first ``orchestrator_warmup_steps`` optimise only the pointer loss
    (orchestrator + pointer); afterwards the joint flow-matching loss of
    both modalities is added.
    """

    def __init__(self, run: RunConfig, output_dir: Path, bundle: Optional[NetworkBundle] = None):
        self.run = run
        self.cfg = run.train
        self.output_dir = output_dir
        self.bundle = bundle or NetworkBundle.build(run)
        self.generator = self.bundle.generator()
        self.optimizer = torch.optim.AdamW(
            self.bundle.parameters(), lr=self.cfg.lr, weight_decay=self.cfg.weight_decay
        )
        self.trace: Optional[TraceWriter] = None
        self.history: list[TrainRecord] = []

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "checkpoints" / "teacher.sck"

    def draw_batch(self, step: int) -> TrainingBatch:
        return ground_truth_batch(
            self.run,
            batch_seed=step,
            batch_size=self.cfg.batch_size,
            context_prob=self.cfg.context_prob,
            token_range=self.cfg.sample_tokens,
        )

    def _noise(self, batch: TrainingBatch, seed: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        gen = torch.Generator().manual_seed(seed % (2**63))
        t = torch.rand(batch.z_v.shape[0], generator=gen, dtype=torch.float64)
        eps_v = torch.randn(batch.z_v.shape, generator=gen, dtype=batch.z_v.dtype)
        eps_a = torch.randn(batch.z_a.shape, generator=gen, dtype=batch.z_a.dtype)
        return t, eps_v, eps_a

    def flow_loss(self, batch: TrainingBatch, seed: int) -> torch.Tensor:
        """Joint velocity-regression loss at per-sample t."""
        t, eps_v, eps_a = self._noise(batch, seed)
        x_v = flow.corrupt_batch(batch.z_v, eps_v, t)
        x_a = flow.corrupt_batch(batch.z_a, eps_a, t)
        f_v, f_a = self.generator.velocity(x_v, x_a, t.to(x_v.dtype), batch.ctx)
        return flow.flow_loss(f_v, f_a, batch.z_v, batch.z_a, eps_v, eps_a)

    def pointer_loss(self, batch: TrainingBatch) -> tuple[torch.Tensor, list[float]]:
        """Mean pointer loss on clean audio, plus per-sample absolute errors."""
        outs = self.generator.point(batch.ctx, batch.z_a)
        losses = [self.bundle.pointer.loss(o, s) for o, s in zip(outs, batch.endpoints, strict=True)]
        errors = [abs(float(o.s_hat) - s) for o, s in zip(outs, batch.endpoints, strict=True)]
        return torch.stack(losses).mean(), errors

    def train_step(self, step: int) -> TrainRecord:
        phase = WARMUP if step < self.cfg.orchestrator_warmup_steps else JOINT
        batch = self.draw_batch(step)
        pap, _ = self.pointer_loss(batch)
        if phase == JOINT:
            fl = self.flow_loss(batch, hashed_seed("noise", self.run.seed, step))
            total = fl + self.cfg.pap_loss_weight * pap
        else:
            fl = None
            total = pap

        values = {"pap_loss": float(pap), "total_loss": float(total)}
        if fl is not None:
            values["flow_loss"] = float(fl)
        check_finite(values, f"{phase} step", step)

        self.optimizer.zero_grad()
        total.backward()
        norm = grad_norm(self.bundle.parameters())
        check_finite({"grad_norm": norm}, f"{phase} backward", step)
        self.optimizer.step()
        return TrainRecord(
            step=step,
            phase=phase,
            flow_loss=None if fl is None else float(fl),
            pap_loss=float(pap),
            total_loss=float(total),
        )

    @torch.no_grad()
    def evaluate(self, n_batches: int = 4) -> tuple[float, float]:
        """(flow loss, pointer MAE) on fixed held-out batches."""
        flows, errors = [], []
        for i in range(n_batches):
            batch = ground_truth_batch(
                self.run,
                batch_seed=hashed_seed("heldout", EVAL_SEED, i),
                batch_size=self.cfg.batch_size,
                context_prob=self.cfg.context_prob,
                token_range=self.cfg.sample_tokens,
            )
            flows.append(float(self.flow_loss(batch, hashed_seed("heldout-noise", EVAL_SEED, i))))
            errors.extend(self.pointer_loss(batch)[1])
        return float(np.mean(flows)), float(np.mean(errors))

    def train(self, steps: Optional[int] = None) -> TrainReport:
        """Run the full schedule, writing curves and checkpoints under ``output_dir``."""
        total_steps = self.cfg.steps if steps is None else steps
        start = time.monotonic()
        self.trace = TraceWriter(self.output_dir / "traces" / "train.jsonl")
        initial_flow, _ = self.evaluate()
        logger.info(f"[Trainer] {total_steps} steps, initial held-out flow loss {initial_flow:.5f}")

        for step in range(total_steps):
            record = self.train_step(step)
            self.history.append(record)
            self.trace.write(record)
            if step % self.cfg.log_every == 0 or step == total_steps - 1:
                losses = {"pap": record.pap_loss}
                if record.flow_loss is not None:
                    losses["flow"] = record.flow_loss
                log_train_step(f"Trainer/{record.phase}", step, total_steps, losses)
            if (step + 1) % self.cfg.checkpoint_every == 0 and step + 1 < total_steps:
                self.bundle.save(self.checkpoint_path, self.run, "teacher")

        final_flow, mae = self.evaluate()
        path = self.bundle.save(self.checkpoint_path, self.run, "teacher")
        report = TrainReport(
            steps=total_steps,
            initial_flow_loss=initial_flow,
            final_flow_loss=final_flow,
            pointer_mae=mae,
            checkpoint=str(path),
            duration_seconds=time.monotonic() - start,
        )
        logger.info(
            f"[Trainer] done: flow {initial_flow:.5f} -> {final_flow:.5f} "
            f"(x{report.loss_ratio:.3f}), pointer MAE {mae:.3f}"
        )
        return report
