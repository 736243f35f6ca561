"""Objective, schedule, checkpointing and the training regimes.

Three regimes: 2D pretraining on the synthetic flow corpus, fine-tuning the
lifted model from a pretrained trunk with randomly initialized vertical
blocks ("mixed"), and the fully random baseline. All randomness is derived
statelessly from (seed, step), so a checkpoint resume replays the exact
same stream.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .archive import SplitSpec, TensorArchive, split_chronological
from .errors import ContractError, CorruptionError, DivergenceError, FormatError
from .grid import PHYSICAL_CHANNELS, ScalerStats, apply_scaler, fit_scaler
from .lift import LiftConfig, LiftedModel, build_lifted, sample_adjacent_levels
from .model2d import SwinUNet, TrunkConfig, build_trunk

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "normalized_l1",
    "cosine_lr",
    "train_step",
    "run_pretrain",
    "run_finetune",
    "save_checkpoint",
    "load_checkpoint",
    "default_split",
    "sparsify_block",
    "config_hash",
    "LOSS_EPS",
]

LOSS_EPS = 1e-10
CHECKPOINT_MAGIC = b"ALCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and regime knobs shared by pretraining and fine-tuning."""

    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    sparsity: float = 0.0
    init_mode: str = "random"  # "random" | "mixed"
    levels_total: int = 6
    levels_sampled: int = 3
    val_every: int = 100
    val_max_pairs: int = 32
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ContractError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if self.init_mode not in ("random", "mixed"):
            raise ContractError(f"init_mode must be 'random' or 'mixed', got {self.init_mode!r}")
        if self.batch_size < 1 or self.val_every < 1:
            raise ContractError("batch_size and val_every must be >= 1")


def normalized_l1(pred: Tensor, target: Tensor, eps: float = LOSS_EPS) -> Tensor:
    """Per-channel L1 normalized by the target's L1 mass, averaged over channels.

    All non-channel axes (batch, level, lat, lon) are summed jointly; the sum
    runs over every pixel whether or not it was masked out of the input.
    """
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim < 2 or pred.shape[-1] < 1:
        raise ContractError("expected at least [*, channel] with channel >= 1")
    dims = tuple(range(pred.ndim - 1))
    num = (pred - target).abs().sum(dim=dims)
    den = target.abs().sum(dim=dims) + eps
    return (num / den).mean()


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at step == total."""
    if step < 0 or step > total:
        raise ContractError(f"step {step} outside [0, {total}]")
    return max(0.0, 0.5 * lr0 * (1.0 + np.cos(np.pi * step / total)))


def train_step(
    model_fn,
    batch_x: Tensor,
    batch_y: Tensor,
    optimizer: torch.optim.Optimizer,
    lr: float,
    step: int = 0,
) -> float:
    """One forward/backward/update at the given learning rate."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = normalized_l1(model_fn(batch_x), batch_y)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def sparsify_block(x: Tensor, ratio: float, seed: int) -> Tensor:
    """Column sparsification on a scaled [..., lat, lon, channel] tensor.

    Same column-selection rule as grid.sparsify_columns: zero the physical
    channels of dropped columns, write the presence mask into channel 3.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"drop ratio must lie in [0, 1], got {ratio}")
    h, w = x.shape[-3], x.shape[-2]
    n_total = h * w
    n_keep = int(round((1.0 - ratio) * n_total))
    rng = np.random.default_rng(seed)
    kept = rng.choice(n_total, size=n_keep, replace=False)
    mask = np.zeros(n_total, dtype=np.float32)
    mask[kept] = 1.0
    m = torch.from_numpy(mask.reshape(h, w)).to(x.dtype)
    out = x.clone()
    out[..., :PHYSICAL_CHANNELS] = out[..., :PHYSICAL_CHANNELS] * m[..., None]
    out[..., 3] = m
    return out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Parameters, optimizer moments and bookkeeping for exact resume."""

    params: dict[str, np.ndarray]
    opt_state: dict[str, dict[str, np.ndarray]]
    opt_steps: dict[str, int]
    step: int
    config_hash: str
    configs: dict
    scaler: ScalerStats | None = None
    val_curve: list[tuple[int, float]] = field(default_factory=list)


def config_hash(configs: dict) -> str:
    return hashlib.sha256(json.dumps(configs, sort_keys=True).encode()).hexdigest()[:16]


def _gather_checkpoint(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    step: int,
    configs: dict,
    scaler: ScalerStats | None,
    val_curve: list[tuple[int, float]],
) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    params = {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
    opt_state: dict[str, dict[str, np.ndarray]] = {"exp_avg": {}, "exp_avg_sq": {}}
    opt_steps: dict[str, int] = {}
    state = optimizer.state_dict()["state"]
    for idx, name in enumerate(names):
        if idx in state:
            opt_state["exp_avg"][name] = state[idx]["exp_avg"].numpy().copy()
            opt_state["exp_avg_sq"][name] = state[idx]["exp_avg_sq"].numpy().copy()
            opt_steps[name] = int(state[idx]["step"])
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        opt_steps=opt_steps,
        step=step,
        config_hash=config_hash(configs),
        configs=configs,
        scaler=scaler,
        val_curve=list(val_curve),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single-file format: magic, version, JSON header, raw blobs, CRC-checked."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.params):
        tensors.append((f"param:{name}", ckpt.params[name]))
    for kind in ("exp_avg", "exp_avg_sq"):
        for name in sorted(ckpt.opt_state.get(kind, {})):
            tensors.append((f"opt.{kind}:{name}", ckpt.opt_state[kind][name]))
    if ckpt.scaler is not None:
        tensors.append(("scaler:mean", ckpt.scaler.mean))
        tensors.append(("scaler:std", ckpt.scaler.std))

    payload = bytearray()
    entries = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.str.lstrip("<>|=")
        raw = arr.astype(np.dtype("<" + dtype)).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": len(payload)}
        )
        payload += raw
    header = {
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "configs": ckpt.configs,
        "opt_steps": ckpt.opt_steps,
        "scaler_source": ckpt.scaler.source if ckpt.scaler is not None else None,
        "val_curve": [[int(s), float(v)] for s, v in ckpt.val_curve],
        "tensors": entries,
        "payload_len": len(payload),
        "payload_crc32": zlib.crc32(bytes(payload)),
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {version}, reader supports {CHECKPOINT_VERSION}"
        )
    (head_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + head_len].decode())
    payload = blob[16 + head_len :]
    if len(payload) != header["payload_len"]:
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_len']}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CorruptionError(f"{path}: payload checksum mismatch")

    arrays: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        dt = np.dtype("<" + ent["dtype"])
        arr = np.frombuffer(
            payload, dtype=dt, count=count, offset=ent["offset"]
        ).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(ent["dtype"])

    params = {k[len("param:"):]: v for k, v in arrays.items() if k.startswith("param:")}
    opt_state = {
        kind: {
            k[len(f"opt.{kind}:"):]: v
            for k, v in arrays.items()
            if k.startswith(f"opt.{kind}:")
        }
        for kind in ("exp_avg", "exp_avg_sq")
    }
    scaler = None
    if "scaler:mean" in arrays:
        scaler = ScalerStats(
            mean=arrays["scaler:mean"],
            std=arrays["scaler:std"],
            source=header.get("scaler_source") or "",
        )
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        opt_steps={k: int(v) for k, v in header["opt_steps"].items()},
        step=int(header["step"]),
        config_hash=header["config_hash"],
        configs=header["configs"],
        scaler=scaler,
        val_curve=[(int(s), float(v)) for s, v in header["val_curve"]],
    )


def apply_checkpoint(
    model: torch.nn.Module,
    ckpt: Checkpoint,
    optimizer: torch.optim.Optimizer | None = None,
    expected_hash: str | None = None,
) -> None:
    """Load parameters (and optimizer moments) back into live objects."""
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise ContractError(
            f"config hash mismatch: checkpoint {ckpt.config_hash}, expected {expected_hash}"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in ckpt.params:
                raise ContractError(f"checkpoint missing parameter {name!r}")
            p.copy_(torch.from_numpy(ckpt.params[name]))
    if optimizer is not None and ckpt.opt_steps:
        names = [n for n, _ in model.named_parameters()]
        state: dict[int, dict] = {}
        for idx, name in enumerate(names):
            if name in ckpt.opt_steps:
                state[idx] = {
                    "step": torch.tensor(float(ckpt.opt_steps[name])),
                    "exp_avg": torch.from_numpy(ckpt.opt_state["exp_avg"][name].copy()),
                    "exp_avg_sq": torch.from_numpy(ckpt.opt_state["exp_avg_sq"][name].copy()),
                }
        sd = optimizer.state_dict()
        sd["state"] = state
        optimizer.load_state_dict(sd)


def load_trunk_weights(model: LiftedModel, ckpt: Checkpoint) -> None:
    """Mixed init: pretrained 2D weights into the trunk, lift stays random."""
    with torch.no_grad():
        for name, p in model.trunk.named_parameters():
            if name not in ckpt.params:
                raise ContractError(f"pretrain checkpoint missing trunk parameter {name!r}")
            p.copy_(torch.from_numpy(ckpt.params[name]))


# ---------------------------------------------------------------------------
# training loops


class LossLog:
    """Append-only CSV: step,split,loss,lr."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple[int, str, float, float]] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,split,loss,lr\n")

    def append(self, step: int, split: str, loss: float, lr: float) -> None:
        self.rows.append((step, split, loss, lr))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(f"{step},{split},{loss:.10g},{lr:.10g}\n")

    def curve(self, split: str) -> list[tuple[int, float]]:
        return [(s, loss) for s, sp, loss, _ in self.rows if sp == split]


def _rng_for(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )


def run_pretrain(
    archive: TensorArchive,
    trunk_config: TrunkConfig,
    cfg: TrainConfig,
    out_dir=None,
) -> tuple[Checkpoint, LossLog]:
    """One-step-ahead training of the 2D trunk on a single-level corpus."""
    if archive.grid.n_levels != 1:
        raise ContractError(
            f"pretraining expects a single-level corpus, got {archive.grid.n_levels} levels"
        )
    configs = {"trunk": _cfg_dict(trunk_config), "train": _cfg_dict(cfg), "regime": "pretrain"}
    out_dir = Path(out_dir) if out_dir is not None else None
    log = LossLog(out_dir / "losslog.csv" if out_dir else None)

    scaler = fit_scaler(archive.values(), source=f"pretrain:{archive.path.name}")
    block = apply_scaler(archive.values(), scaler)
    data = torch.from_numpy(np.ascontiguousarray(block[:, 0])).float()  # [T, H, W, C]
    pairs = archive.pair_indices()
    if not pairs:
        raise ContractError("corpus has no consecutive-snapshot pairs")

    model = build_trunk(trunk_config, seed=cfg.seed)
    optimizer = _make_optimizer(model, cfg)
    for step in range(cfg.steps):
        rng = _rng_for(cfg.seed, 1, step)
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        xs = torch.stack([data[pairs[i][0]] for i in idx])
        ys = torch.stack([data[pairs[i][1]] for i in idx])
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        loss = train_step(model, xs, ys, optimizer, lr, step)
        if step % 50 == 0 or step == cfg.steps - 1:
            log.append(step, "train", loss, lr)

    ckpt = _gather_checkpoint(model, optimizer, cfg.steps, configs, scaler, [])
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / "checkpoints" / "pretrain.ckpt")
    return ckpt, log


def default_split(archive: TensorArchive, val_fraction: float = 0.25) -> SplitSpec:
    """Chronological split at a trajectory boundary (val gets the tail)."""
    spt = archive.manifest["meta"].get("snapshots_per_traj")
    times = archive.times
    if spt:
        n_traj = len(times) // int(spt)
        n_val = max(1, int(round(val_fraction * n_traj)))
        boundary_idx = (n_traj - n_val) * int(spt)
    else:
        boundary_idx = int(round((1 - val_fraction) * len(times)))
    if boundary_idx <= 0 or boundary_idx >= len(times):
        raise ContractError("split leaves an empty train or validation side")
    boundary = (times[boundary_idx - 1] + times[boundary_idx]) / 2.0
    return SplitSpec(
        train_range=(float(times[0]) - 1.0, float(boundary)),
        val_range=(float(boundary), float(times[-1]) + 1.0),
    )


def run_finetune(
    archive: TensorArchive,
    trunk_config: TrunkConfig,
    lift_config: LiftConfig,
    cfg: TrainConfig,
    init_checkpoint: Checkpoint | None = None,
    split: SplitSpec | None = None,
    out_dir=None,
) -> tuple[Checkpoint, LossLog]:
    """Fine-tune the lifted model on a 3D corpus, mixed or random init.

    Every step samples a contiguous window of ``levels_sampled`` levels and
    sparsifies each sample with a fresh mask at the configured ratio;
    validation runs on all levels at the same ratio with fixed masks.
    """
    d = archive.grid.n_levels
    if d != cfg.levels_total or d != lift_config.levels_total:
        raise ContractError(
            f"archive has {d} levels but configs expect "
            f"{cfg.levels_total}/{lift_config.levels_total}"
        )
    if cfg.init_mode == "mixed" and init_checkpoint is None:
        raise ContractError("mixed init requires a pretrain checkpoint")
    configs = {
        "trunk": _cfg_dict(trunk_config),
        "lift": _cfg_dict(lift_config),
        "train": _cfg_dict(cfg),
        "regime": "finetune",
    }
    out_dir = Path(out_dir) if out_dir is not None else None
    log = LossLog(out_dir / "losslog.csv" if out_dir else None)

    if split is None:
        split = default_split(archive)
    train_view, val_view = split_chronological(archive, split)
    train_pairs = train_view.pair_indices()
    val_pairs = val_view.pair_indices()
    if not train_pairs or not val_pairs:
        raise ContractError("split produced an empty train or validation pair set")

    block = archive.values()  # [T, D, H, W, C]
    train_block = block[np.asarray(train_view.indices)]
    scaler = fit_scaler(train_block, source=f"finetune:{archive.path.name}")
    data = torch.from_numpy(np.ascontiguousarray(apply_scaler(block, scaler))).float()
    sigmas = torch.tensor(archive.sigmas, dtype=torch.float64)

    model = build_lifted(trunk_config, lift_config, seed=cfg.seed)
    if cfg.init_mode == "mixed":
        load_trunk_weights(model, init_checkpoint)
    optimizer = _make_optimizer(model, cfg)

    k = cfg.levels_sampled
    val_pairs = val_pairs[: cfg.val_max_pairs]

    def validate(step: int, lr: float) -> float:
        model.eval()
        total = 0.0
        with torch.no_grad():
            for vi, (i, j) in enumerate(val_pairs):
                # fixed per-pair mask seeds: re-evaluating at the same step is identical
                vseed = int(_rng_for(cfg.seed, 3, vi).integers(2**31))
                x = sparsify_block(data[i], cfg.sparsity, vseed)
                pred = model(x[None], sigmas)
                total += float(normalized_l1(pred, data[j][None]))
        model.train()
        loss = total / len(val_pairs)
        log.append(step, "val", loss, lr)
        return loss

    val_curve: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        rng = _rng_for(cfg.seed, 2, step)
        start, _ = sample_adjacent_levels(d, k, int(rng.integers(2**31)))
        sl = slice(start, start + k)
        idx = rng.integers(0, len(train_pairs), size=cfg.batch_size)
        xs, ys = [], []
        for b, i in enumerate(idx):
            pi, pj = train_pairs[i]
            x = data[pi, sl]
            mseed = int(rng.integers(2**31))
            x = sparsify_block(x, cfg.sparsity, mseed)
            xs.append(x)
            ys.append(data[pj, sl])
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        loss = train_step(
            lambda bx: model(bx, sigmas[sl]), torch.stack(xs), torch.stack(ys), optimizer, lr, step
        )
        if step % 50 == 0 or step == cfg.steps - 1:
            log.append(step, "train", loss, lr)
        if (step + 1) % cfg.val_every == 0 or step == cfg.steps - 1:
            val_curve.append((step, validate(step, lr)))

    ckpt = _gather_checkpoint(model, optimizer, cfg.steps, configs, scaler, val_curve)
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / "checkpoints" / f"finetune_{cfg.init_mode}.ckpt")
    return ckpt, log


def _cfg_dict(cfg) -> dict:
    out = {}
    for key, value in vars(cfg).items():
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out
