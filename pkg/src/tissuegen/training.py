"""Optimization loops for the three model families, plus inference entry points.

All loops follow the same recipe: Adam (beta1 0.5, beta2 0.999), mini-batch 1
by default, learning rate 2e-4 held constant for the first half of training
and decayed linearly to zero over the second half, weights initialized from
N(0, 0.02). Each iteration takes a discriminator step, then a generator step.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, canonical_json, config_digest
from .data import DatasetManifest, PairSample
from .losses import LossWeights, cgan_loss, l1_loss
from .masks import BinaryMask, read_mask_png
from .nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    load_param_arrays,
    mask_from_tensor,
    mask_to_tensor,
    multiscale_forward,
    param_arrays,
    rgb_from_tensor,
    rgb_to_tensor,
    soft_from_tensor,
)
from .data import read_rgb_png

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "lr_at_epoch",
    "train_pix2pix",
    "train_cyclegan",
    "train_hd",
    "infer_fine",
    "infer_rgb",
    "metrics_digest",
]


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; a diagnostic checkpoint is written first."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    epochs_const: int = 50
    epochs_decay: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10
    patch_height: int = 64
    patch_width: int = 128
    gen_base_width: int = 16
    gen_depth: int = 4
    gen_dropout: float = 0.5
    disc_base_width: int = 16
    disc_n_layers: int = 3
    binarize_threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_const < 0 or self.epochs_decay < 0:
            raise ValueError("epoch counts must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {"lambda_l1": self.weights.lambda_l1,
                        "lambda_cyc": self.weights.lambda_cyc,
                        "hd_weights": dict(self.weights.hd_weights)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", None)
        weights = LossWeights(**w) if w else LossWeights()
        return cls(weights=weights, **d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Constant lr0 for `epochs_const` epochs, then linear decay to zero."""
    if not 0 <= epoch <= config.total_epochs:
        raise ValueError(f"epoch must be in [0, {config.total_epochs}], got {epoch}")
    if epoch < config.epochs_const or config.epochs_decay == 0:
        return config.lr0
    return config.lr0 * (config.total_epochs - epoch) / config.epochs_decay


def metrics_digest(log: list[dict]) -> str:
    payload = "\n".join(canonical_json(row) for row in log).encode()
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------- data access

def _load_pair(manifest: DatasetManifest, rec) -> PairSample:
    coarse = read_mask_png(manifest.resolve(rec.coarse_mask_path))
    fine = read_mask_png(manifest.resolve(rec.fine_mask_path))
    return PairSample(coarse=coarse, fine=fine)


def _train_records(manifest: DatasetManifest):
    records = manifest.split_records("train")
    if not records:
        raise ValueError(f"dataset {manifest.name!r} has an empty train split")
    return records


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------- run harness

class _Run:
    """Shared training-loop state: rngs, metrics log, checkpoint plumbing."""

    def __init__(self, kind: str, manifest: DatasetManifest, config: TrainConfig,
                 run_dir: Path | str, resume_from: Checkpoint | None = None):
        if config.deterministic:
            torch.set_num_threads(1)
        self.kind = kind
        self.manifest = manifest
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.torch_rng = torch.Generator().manual_seed(config.seed)
        self.data_rng = np.random.default_rng(config.seed)
        self.metric_log: list[dict] = []
        self.step = 0
        self.start_epoch = 0
        self.modules: dict[str, torch.nn.Module] = {}
        self.optimizers: dict[str, torch.optim.Adam] = {}
        self.specs: dict[str, dict] = {}
        self.resume_from = resume_from

    def add_module(self, name: str, module: torch.nn.Module):
        self.modules[name] = module
        self.optimizers[name] = torch.optim.Adam(
            module.parameters(), lr=self.config.lr0,
            betas=(self.config.beta1, self.config.beta2))

    def joint_optimizer(self, name: str, module_names: list[str]):
        params = []
        for m in module_names:
            params.extend(self.modules[m].parameters())
        self.optimizers[name] = torch.optim.Adam(
            params, lr=self.config.lr0, betas=(self.config.beta1, self.config.beta2))

    def restore(self):
        ckpt = self.resume_from
        if ckpt is None:
            return
        for name, module in self.modules.items():
            load_param_arrays(module, ckpt.subset(f"params.{name}."))
        for name, opt in self.optimizers.items():
            _load_optimizer_state(opt, ckpt, name)
        self.torch_rng.set_state(torch.from_numpy(ckpt.arrays["rng.torch"].copy()))
        self.data_rng.bit_generator.state = json.loads(ckpt.meta["data_rng_state"])
        self.metric_log = list(ckpt.meta["metric_log"])
        self.step = ckpt.meta["next_step"]
        self.start_epoch = ckpt.epoch

    def set_lr(self, epoch: int):
        lr = lr_at_epoch(self.config, epoch)
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def log(self, epoch: int, lr: float, parts: dict):
        row = {"step": self.step, "epoch": epoch, "lr": lr}
        row.update({k: round(float(v), 10) for k, v in sorted(parts.items())})
        self.metric_log.append(row)
        self.step += 1
        if not all(np.isfinite(v) for v in parts.values()):
            self.write_metrics()
            self.checkpoint(epoch, tag="diagnostic")
            raise TrainingDiverged(
                f"non-finite loss at step {self.step - 1}: {parts}")

    def write_metrics(self):
        lines = [json.dumps(row) for row in self.metric_log]
        (self.run_dir / "metrics.log").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    def checkpoint(self, epoch: int, tag=None) -> Checkpoint:
        arrays: dict[str, np.ndarray] = {}
        for name, module in self.modules.items():
            for pname, arr in param_arrays(module).items():
                arrays[f"params.{name}.{pname}"] = arr
        for name, opt in self.optimizers.items():
            arrays.update(_optimizer_arrays(opt, name))
        arrays["rng.torch"] = self.torch_rng.get_state().numpy()
        cfg = self.config.to_dict()
        meta = {
            "kind": self.kind,
            "epoch": epoch,
            "seed": self.config.seed,
            "config": cfg,
            "config_digest": config_digest(cfg),
            "dataset": {"name": self.manifest.name, "stain": self.manifest.stain},
            "specs": self.specs,
            "data_rng_state": json.dumps(self.data_rng.bit_generator.state,
                                         sort_keys=True),
            "metric_log": self.metric_log,
            "metrics_digest": metrics_digest(self.metric_log),
            "next_step": self.step,
        }
        ckpt = Checkpoint(meta=meta, arrays=arrays)
        name = f"ckpt_{tag}" if tag else f"ckpt_{epoch}"
        ckpt.save(self.run_dir / name)
        return ckpt

    def finish(self, epoch: int) -> Checkpoint:
        self.write_metrics()
        ckpt = self.checkpoint(epoch, tag="final")
        return ckpt


def _optimizer_arrays(opt, name: str) -> dict[str, np.ndarray]:
    out = {}
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arr = value.detach().cpu().numpy() if torch.is_tensor(value) \
                else np.asarray(value)
            out[f"opt.{name}.{idx}.{key}"] = arr
    return out


def _load_optimizer_state(opt, ckpt: Checkpoint, name: str):
    prefix = f"opt.{name}."
    state: dict[int, dict] = {}
    for key, arr in ckpt.arrays.items():
        if not key.startswith(prefix):
            continue
        idx_str, field_name = key[len(prefix):].split(".", 1)
        state.setdefault(int(idx_str), {})[field_name] = torch.from_numpy(arr.copy())
    if not state:
        return
    sd = opt.state_dict()
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


# ---------------------------------------------------------------- pix2pix

def _gen_spec(config: TrainConfig, kind: str, in_ch: int, out_ch: int,
              dropout: float) -> GeneratorSpec:
    return GeneratorSpec(kind=kind, in_channels=in_ch, out_channels=out_ch,
                         base_width=config.gen_base_width, depth=config.gen_depth,
                         dropout=dropout)


def _disc_spec(config: TrainConfig, in_ch: int, n_scales: int = 1) -> DiscriminatorSpec:
    return DiscriminatorSpec(in_channels=in_ch, n_layers=config.disc_n_layers,
                             base_width=config.disc_base_width, n_scales=n_scales)


def _stack_masks(masks: list[BinaryMask]) -> torch.Tensor:
    return torch.cat([mask_to_tensor(m) for m in masks], dim=0)


def train_pix2pix(manifest: DatasetManifest, config: TrainConfig,
                  run_dir: Path | str,
                  resume_from: Checkpoint | None = None) -> Checkpoint:
    """Paired coarse-to-fine training: conditional GAN plus weighted L1."""
    records = _train_records(manifest)
    pairs = [_load_pair(manifest, r) for r in records]
    run = _Run("pix2pix", manifest, config, run_dir, resume_from)
    g_spec = _gen_spec(config, "unet", 1, 1, config.gen_dropout)
    d_spec = _disc_spec(config, 2)
    run.specs = {"g": g_spec.to_dict(), "d": d_spec.to_dict()}
    run.add_module("g", build_generator(g_spec, config.seed + 1))
    run.add_module("d", build_discriminator(d_spec, config.seed + 2))
    run.restore()
    G, D = run.modules["g"], run.modules["d"]
    opt_g, opt_d = run.optimizers["g"], run.optimizers["d"]

    for epoch in range(run.start_epoch, config.total_epochs):
        lr = run.set_lr(epoch)
        order = run.data_rng.permutation(len(pairs))
        for batch in _batches(order, config.batch_size):
            x = _stack_masks([pairs[i].coarse for i in batch])
            y = _stack_masks([pairs[i].fine for i in batch])
            fake = G(x, run.torch_rng)

            opt_d.zero_grad()
            d_real, _ = D(torch.cat([x, y], dim=1))
            d_fake_det, _ = D(torch.cat([x, fake.detach()], dim=1))
            loss_d, _ = cgan_loss(d_real, d_fake_det)
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            d_fake, _ = D(torch.cat([x, fake], dim=1))
            _, loss_g_adv = cgan_loss(d_fake.detach(), d_fake)
            loss_l1 = l1_loss(y, fake)
            loss_g = loss_g_adv + config.weights.lambda_l1 * loss_l1
            loss_g.backward()
            opt_g.step()

            run.log(epoch, lr, {"loss_d": float(loss_d.detach()),
                                "loss_g_adv": float(loss_g_adv.detach()),
                                "loss_g_l1": float(loss_l1.detach())})
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            run.write_metrics()
            run.checkpoint(epoch + 1)
    return run.finish(config.total_epochs)


# ---------------------------------------------------------------- cyclegan

def train_cyclegan(manifest: DatasetManifest, config: TrainConfig,
                   run_dir: Path | str,
                   resume_from: Checkpoint | None = None) -> Checkpoint:
    """Unpaired training: coarse and fine masks are sampled independently.

    The forward and backward translators have no dropout (the cycle objective
    carries no noise input), matching the deterministic G(x) of the cycle
    formulation.
    """
    records = _train_records(manifest)
    pairs = [_load_pair(manifest, r) for r in records]
    coarse_masks = [p.coarse for p in pairs]
    fine_masks = [p.fine for p in pairs]
    run = _Run("cyclegan", manifest, config, run_dir, resume_from)
    g_spec = _gen_spec(config, "unet", 1, 1, 0.0)
    d_spec = _disc_spec(config, 1)
    run.specs = {"g": g_spec.to_dict(), "f": g_spec.to_dict(),
                 "dx": d_spec.to_dict(), "dy": d_spec.to_dict()}
    run.add_module("g", build_generator(g_spec, config.seed + 1))
    run.add_module("f", build_generator(g_spec, config.seed + 2))
    run.add_module("dx", build_discriminator(d_spec, config.seed + 3))
    run.add_module("dy", build_discriminator(d_spec, config.seed + 4))
    # G and F step jointly; their per-module optimizers are replaced by one
    del run.optimizers["g"], run.optimizers["f"]
    run.joint_optimizer("gf", ["g", "f"])
    run.restore()
    G, F, D_X, D_Y = (run.modules[k] for k in ("g", "f", "dx", "dy"))
    opt_gf = run.optimizers["gf"]
    opt_dx, opt_dy = run.optimizers["dx"], run.optimizers["dy"]

    for epoch in range(run.start_epoch, config.total_epochs):
        lr = run.set_lr(epoch)
        order_x = run.data_rng.permutation(len(coarse_masks))
        order_y = run.data_rng.permutation(len(fine_masks))
        for bx, by in zip(_batches(order_x, config.batch_size),
                          _batches(order_y, config.batch_size)):
            x = _stack_masks([coarse_masks[i] for i in bx])
            y = _stack_masks([fine_masks[i] for i in by])
            fake_y = G(x, run.torch_rng)
            fake_x = F(y, run.torch_rng)

            opt_dy.zero_grad()
            loss_dy, _ = cgan_loss(D_Y(y)[0], D_Y(fake_y.detach())[0])
            loss_dy.backward()
            opt_dy.step()
            opt_dx.zero_grad()
            loss_dx, _ = cgan_loss(D_X(x)[0], D_X(fake_x.detach())[0])
            loss_dx.backward()
            opt_dx.step()

            opt_gf.zero_grad()
            sy = D_Y(fake_y)[0]
            sx = D_X(fake_x)[0]
            _, adv_y = cgan_loss(sy.detach(), sy)
            _, adv_x = cgan_loss(sx.detach(), sx)
            loss_cyc = l1_loss(F(fake_y, run.torch_rng), x) \
                + l1_loss(G(fake_x, run.torch_rng), y)
            loss_g = adv_y + adv_x + config.weights.lambda_cyc * loss_cyc
            loss_g.backward()
            opt_gf.step()

            run.log(epoch, lr, {
                "loss_d": float((loss_dx + loss_dy).detach()),
                "loss_dx": float(loss_dx.detach()),
                "loss_dy": float(loss_dy.detach()),
                "loss_g_adv": float((adv_x + adv_y).detach()),
                "loss_g_cyc": float(loss_cyc.detach()),
            })
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            run.write_metrics()
            run.checkpoint(epoch + 1)
    return run.finish(config.total_epochs)


# ---------------------------------------------------------------- hd (rgb)

def train_hd(manifest: DatasetManifest, config: TrainConfig,
             run_dir: Path | str,
             resume_from: Checkpoint | None = None) -> Checkpoint:
    """Fine-mask to RGB training: residual generator, two-scale PatchGANs."""
    records = _train_records(manifest)
    samples = []
    for rec in records:
        fine = read_mask_png(manifest.resolve(rec.fine_mask_path))
        rgb = read_rgb_png(manifest.resolve(rec.image_path))
        samples.append((mask_to_tensor(fine), rgb_to_tensor(rgb)))
    run = _Run("hd", manifest, config, run_dir, resume_from)
    g_spec = _gen_spec(config, "residual_global", 1, 3, 0.0)
    d_spec = _disc_spec(config, 4, n_scales=2)
    run.specs = {"g": g_spec.to_dict(), "d": d_spec.to_dict()}
    run.add_module("g", build_generator(g_spec, config.seed + 1))
    run.add_module("d", build_discriminator(d_spec, config.seed + 2))
    run.restore()
    G, D = run.modules["g"], run.modules["d"]
    opt_g, opt_d = run.optimizers["g"], run.optimizers["d"]
    w = config.weights.hd_weights

    for epoch in range(run.start_epoch, config.total_epochs):
        lr = run.set_lr(epoch)
        order = run.data_rng.permutation(len(samples))
        for batch in _batches(order, config.batch_size):
            x = torch.cat([samples[i][0] for i in batch], dim=0)
            real = torch.cat([samples[i][1] for i in batch], dim=0)
            fake = G(x, run.torch_rng)
            real_in = torch.cat([x, real], dim=1)

            opt_d.zero_grad()
            outs_real = multiscale_forward(D, real_in)
            outs_fake_det = multiscale_forward(D, torch.cat([x, fake.detach()], dim=1))
            loss_d = sum(cgan_loss(sr, sf)[0]
                         for (sr, _), (sf, _) in zip(outs_real, outs_fake_det))
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            outs_real = multiscale_forward(D, real_in)
            outs_fake = multiscale_forward(D, torch.cat([x, fake], dim=1))
            adv = x.new_zeros(())
            mse = x.new_zeros(())
            fm = x.new_zeros(())
            for (sr, fr), (sf, ff) in zip(outs_real, outs_fake):
                _, adv_s = cgan_loss(sf.detach(), sf)
                adv = adv + adv_s
                mse = mse + (torch.sigmoid(sf).mean()
                             - torch.sigmoid(sr).mean().detach()) ** 2
                fm = fm + sum(l1_loss(a.detach(), b)
                              for a, b in zip(fr, ff)) / len(fr)
            loss_g = w["bce"] * adv + w["mse"] * mse + w["feat_match"] * fm
            loss_g.backward()
            opt_g.step()

            run.log(epoch, lr, {"loss_d": float(loss_d.detach()),
                                "loss_g_adv": float(adv.detach()),
                                "loss_g_mse": float(mse.detach()),
                                "loss_g_fm": float(fm.detach())})
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            run.write_metrics()
            run.checkpoint(epoch + 1)
    return run.finish(config.total_epochs)


# ---------------------------------------------------------------- inference

def _cached_generator(checkpoint: Checkpoint, role: str) -> torch.nn.Module:
    if role not in checkpoint._model_cache:
        spec = GeneratorSpec(**checkpoint.meta["specs"][role])
        net = build_generator(spec, seed=0)
        load_param_arrays(net, checkpoint.subset(f"params.{role}."))
        net.eval()
        checkpoint._model_cache[role] = net
    return checkpoint._model_cache[role]


def infer_fine(checkpoint: Checkpoint, coarse: BinaryMask, binarize: bool = True,
               seed: int = 0, threshold: float | None = None):
    """Generate a fine mask from a coarse one (dropout active, seeded).

    Returns a BinaryMask when `binarize` (soft value > threshold, default the
    config's 0.5), else the soft mask as a float array in [0, 1].
    """
    if checkpoint.stage != "fine":
        raise ValueError(f"checkpoint kind {checkpoint.kind!r} is not a fine-mask model")
    if checkpoint.meta["config"]["deterministic"]:
        torch.set_num_threads(1)
    G = _cached_generator(checkpoint, "g")
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out = G(mask_to_tensor(coarse), rng)
    if not binarize:
        return soft_from_tensor(out)
    if threshold is None:
        threshold = checkpoint.meta["config"].get("binarize_threshold", 0.5)
    return mask_from_tensor(out, threshold=threshold)


def infer_rgb(checkpoint: Checkpoint, fine: BinaryMask) -> np.ndarray:
    """Render a fine mask to an 8-bit RGB image (deterministic)."""
    if checkpoint.stage != "rgb":
        raise ValueError(f"checkpoint kind {checkpoint.kind!r} is not an RGB model")
    if checkpoint.meta["config"]["deterministic"]:
        torch.set_num_threads(1)
    G = _cached_generator(checkpoint, "g")
    with torch.no_grad():
        out = G(mask_to_tensor(fine), None)
    return rgb_from_tensor(out)
