"""Evaluation of stream containers: WER-proxy, drift, cursor audit, latency."""

import asyncio
import math
from typing import Optional, Sequence

import numpy as np
import torch
from loguru import logger

from avs.core.config import RunConfig
from avs.models.report import EvalReport
from avs.parsers.stream_container import StreamContainer
from avs.services.bundle import NetworkBundle
from avs.services.stream import StreamEngine, stream_drift
from avs.services.synthworld import decode_tokens, gen_sample, hashed_seed


def edit_distance(reference: Sequence[int], hypothesis: Sequence[int]) -> int:
    """Levenshtein distance between two token sequences."""
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, start=1):
        cur = [i] + [0] * len(hypothesis)
        for j, h in enumerate(hypothesis, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    if not reference:
        return 0.0 if not hypothesis else 1.0
    return edit_distance(reference, hypothesis) / len(reference)


def wer_proxy(container: StreamContainer) -> tuple[float, list[int], list[int]]:
    """
    Nearest-signature decoding of the generated audio against the transcript
    prefix the stream claims to have spoken.

    Returns:
        (WER, reference tokens, decoded tokens)
    """
    audio = container.audio()
    cfg = container.header.config.world
    hyp = [] if audio is None else decode_tokens(cfg, audio.double().numpy())
    spoken = math.ceil(container.cursors[-1] - 1e-9) if container.records else 0
    ref = list(container.header.transcript[:spoken])
    return wer(ref, hyp), ref, hyp


def cursor_audit(cursors: Sequence[float], n_tokens: int) -> tuple[bool, int]:
    """(monotone and within [0, N], number of regressions)."""
    regressions = sum(1 for a, b in zip(cursors, cursors[1:]) if b < a)
    in_range = all(0.0 <= c <= n_tokens for c in cursors)
    return regressions == 0 and in_range, regressions


def evaluate_container(
    container: StreamContainer,
    reference: tuple[torch.Tensor, torch.Tensor],
    source: Optional[str] = None,
) -> EvalReport:
    """All metrics of one container; deterministic for a given container."""
    run = container.header.config
    n_tokens = len(container.header.transcript)
    score, ref, hyp = wer_proxy(container)
    drift_value, _ = stream_drift(run, container.video(), reference)
    monotone, regressions = cursor_audit(container.cursors, n_tokens)
    latencies = [r.latency for r in container.records]
    walls = [lat.wall_s for lat in latencies]
    report = EvalReport(
        container=source or "<memory>",
        n_chunks=len(container.records),
        n_tokens=n_tokens,
        wer_proxy=score,
        drift=drift_value,
        cursor_monotone=monotone,
        cursor_regressions=regressions,
        final_cursor=container.cursors[-1] if container.records else 0.0,
        mean_wall_s=float(np.mean(walls)) if walls else 0.0,
        real_time_fraction=(sum(lat.real_time for lat in latencies) / len(latencies)) if latencies else 0.0,
        budget_s=run.geometry.budget_s,
    )
    logger.info(
        f"[Eval] {report.n_chunks} chunks | WER-proxy {score:.3f} ({len(hyp)} decoded / {len(ref)} spoken) | "
        f"drift {'n/a' if drift_value is None else f'{drift_value:.5f}'} | "
        f"cursor {'monotone' if monotone else f'{regressions} regressions'}"
    )
    return report


def heldout_wer(
    run: RunConfig,
    bundle: NetworkBundle,
    seeds: Sequence[int],
    n_chunks: int,
    n_steps: Optional[int] = None,
) -> float:
    """
    Mean WER-proxy of a model streaming held-out world transcripts.

    Sampling uses ``train.teacher_steps`` steps unless ``n_steps`` is given,
    so a teacher is judged with its own sampler; the transcripts depend only
    on the run seed and ``seeds``, never on the model.
    """
    steps = run.train.teacher_steps if n_steps is None else n_steps
    scores = []
    for seed in seeds:
        sample = gen_sample(
            run.world, run.stream.transcript_tokens, hashed_seed("heldout-wer", run.seed, seed)
        )
        engine = StreamEngine.from_sample(run, bundle, sample, overlap=False, n_steps=steps, seed=seed)
        asyncio.run(engine.run(n_chunks))
        score, _, _ = wer_proxy(StreamContainer(engine.header(), list(engine.records)))
        scores.append(score)
    mean = float(np.mean(scores)) if scores else 0.0
    logger.info(f"[Eval] held-out WER-proxy {mean:.3f} over {len(scores)} transcripts, {steps} steps")
    return mean
