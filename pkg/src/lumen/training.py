"""Training loop, evaluation and model/checkpoint helpers."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import imaging
from .checkpoint import Checkpoint, load_checkpoint, load_into, model_to_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import DatasetIndex, load_samples, prepare
from .diffcore import RngStream, counting_attention
from .enhancer import LumenModel, infer_config
from .losses import (
    ExternalFeatureExtractor,
    FrozenRandomExtractor,
    LossWeights,
    NonFiniteLossError,
    artifacts_loss,
)
from .optim import AdamW, cosine_lr

log = logging.getLogger(__name__)


def make_extractor(cfg: TrainConfig):
    if cfg.extractor == "external":
        return ExternalFeatureExtractor(cfg.extractor_dir)
    return FrozenRandomExtractor(cfg.extractor_seed)


def model_from_checkpoint(ckpt: Checkpoint, **overrides) -> LumenModel:
    cfg = infer_config({k: tuple(v.shape) for k, v in ckpt.model_state().items()}, **overrides)
    model = LumenModel(cfg, seed=ckpt.seed)
    load_into(model, ckpt)
    return model


def load_model(path, **overrides) -> tuple[LumenModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt, **overrides), ckpt


def parameter_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    model: LumenModel
    checkpoint: Checkpoint
    losses: list[dict] = field(default_factory=list)


def total_steps_for(cfg: TrainConfig, n_samples: int) -> int:
    if cfg.max_steps > 0:
        return cfg.max_steps
    return cfg.epochs * math.ceil(n_samples / cfg.batch_size)


def train(cfg: TrainConfig, dataset: DatasetIndex, model: LumenModel | None = None,
          resume: Checkpoint | None = None, out: Path | None = None,
          log_path: Path | None = None) -> TrainResult:
    """Train end-to-end with AdamW + cosine schedule.

    Every random draw at step s comes from streams forked off (seed, s), so a
    run resumed from a checkpoint reproduces the uninterrupted run.
    """
    weights = cfg.loss_weights
    if weights.depth > 0 and not dataset.has_depth:
        missing = [r.stem for r in dataset.records if r.depth is None]
        raise ValueError(f"lambda_depth > 0 but depth maps are missing for: {', '.join(missing)}")
    samples = load_samples(dataset)
    if model is None:
        model = model_from_checkpoint(resume, depth_detach=cfg.depth_detach) if resume is not None \
            else LumenModel(cfg.model_config, seed=cfg.seed)
    start = 0
    optimizer = AdamW(model.named_parameters(), (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    if resume is not None:
        load_into(model, resume)
        state = resume.optimizer_state()
        if state["m"]:
            optimizer.load_moments(state["m"], state["v"], resume.step)
        start = resume.step
    extractor = make_extractor(cfg)
    master = RngStream(cfg.seed)
    n = len(samples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = total_steps_for(cfg, n)
    losses = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        for step in range(start, total):
            epoch, within = divmod(step, per_epoch)
            order = master.fork(f"epoch{epoch}").permutation(n)
            batch_ids = order[within * cfg.batch_size:(within + 1) * cfg.batch_size]
            step_rng = master.fork(f"step{step}")
            crop_rng = step_rng.fork("crop")
            lows, highs, depths = [], [], []
            for i in batch_ids:
                lo, hi, de = prepare(samples[i], cfg.crop_size, cfg.crop_mode, crop_rng)
                lows.append(lo)
                highs.append(hi)
                depths.append(de)
            low, high = torch.stack(lows), torch.stack(highs)
            depth = torch.stack(depths) if all(d is not None for d in depths) else None

            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
            model.train()
            optimizer.zero_grad()
            artifacts = model(low, rng=step_rng.fork("model"))
            try:
                report = artifacts_loss(artifacts, high, depth, weights, extractor)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"step {step}: {exc}") from exc
            report.total.backward()
            optimizer.step(lr)
            model.after_step()

            entry = {"step": step + 1, "lr": lr, **report.as_floats()}
            if not math.isfinite(entry["total"]):
                raise NonFiniteLossError(f"step {step}: non-finite total loss {entry}")
            losses.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            log.info("step %d/%d loss %.5f", step + 1, total, entry["total"])
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(f"{out}.step{step + 1}",
                                model_to_checkpoint(model, step + 1, cfg.seed, optimizer))
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = model_to_checkpoint(model, max(total, start), cfg.seed, optimizer)
    if out is not None:
        save_checkpoint(out, ckpt)
    return TrainResult(model, ckpt, losses)


def _mean(values):
    return sum(values) / len(values)


@torch.no_grad()
def evaluate(model: LumenModel, dataset: DatasetIndex, out_dir=None,
             weights: LossWeights = LossWeights(), extractor=None, step: int = 0,
             timing: bool = False) -> dict:
    """Eval-mode metrics per image plus means; optionally writes PNG outputs.

    Images are centre-cropped to a multiple of 16. ``timing`` adds a
    wall-clock ``runtime_s`` entry, which makes the report non-reproducible.
    """
    t0 = time.perf_counter()
    extractor = extractor if extractor is not None else FrozenRandomExtractor(0)
    model.eval()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        for sub in ("enhanced", "depth", "flash"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    tokens = set()
    for sample in load_samples(dataset):
        low = imaging.center_crop_multiple(sample.low).unsqueeze(0)
        high = imaging.center_crop_multiple(sample.high).unsqueeze(0)
        depth = imaging.center_crop_multiple(sample.depth).unsqueeze(0) if sample.depth is not None else None
        with counting_attention() as counter:
            art = model(low)
        tokens.update(c["query_tokens"] for c in counter.calls)
        report = artifacts_loss(art, high, depth, weights, extractor)
        p = imaging.psnr(art.i_enh, high)
        rows.append({
            "name": sample.stem,
            "psnr": imaging.format_psnr(p),
            "ssim": imaging.ssim(art.i_enh, high).item(),
            "mae": imaging.mae(art.i_enh, high),
            "loss": report.as_floats(),
        })
        if out_dir is not None:
            imaging.save_image(art.i_enh[0], out_dir / "enhanced" / f"{sample.stem}.png")
            imaging.save_depth(art.d_pred[0], out_dir / "depth" / f"{sample.stem}.png")
            imaging.save_image(art.i_flash[0], out_dir / "flash" / f"{sample.stem}.png")
    mean = {
        "psnr": _mean([imaging.PSNR_FINITE_CAP if r["psnr"] == "inf" else r["psnr"] for r in rows]),
        "ssim": _mean([r["ssim"] for r in rows]),
        "mae": _mean([r["mae"] for r in rows]),
        "loss": {k: _mean([r["loss"][k] for r in rows]) for k in rows[0]["loss"]},
    }
    report = {
        "checkpoint_step": step,
        "images": rows,
        "mean": mean,
        "attention_tokens": sorted(tokens),
    }
    if timing:
        report["runtime_s"] = time.perf_counter() - t0
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
